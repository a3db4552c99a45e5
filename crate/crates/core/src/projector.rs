//! Forward projectors.
//!
//! [`render_drr`] is a Joseph projector: each ray steps through the voxel
//! planes perpendicular to its dominant index-space axis, bilinearly
//! interpolates attenuation inside each plane and multiplies by the path
//! length between planes. [`render_drr_marching`] integrates a trilinear
//! interpolant at a fixed step and serves as the reference.
//! Samples outside the grid are zero.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Frame, Ray, ViewGeometry};
use crate::image::DrrImage;
use crate::volume::Volume;

/// Index-space ray: `q(t) = q0 + t * dq` in voxel units, `t` in mm.
struct IndexRay {
    q0: [f64; 3],
    dq: [f64; 3],
    t_min: f64,
}

impl IndexRay {
    fn new(vol: &Volume, ray: &Ray) -> Self {
        IndexRay {
            q0: std::array::from_fn(|a| (ray.origin[a] - vol.origin[a]) / vol.spacing[a]),
            dq: std::array::from_fn(|a| ray.dir[a] / vol.spacing[a]),
            t_min: ray.t_min,
        }
    }
}

/// Axis with the largest index-space direction component; ties go to the
/// lower axis.
fn dominant_axis(dq: [f64; 3]) -> usize {
    let mut best = 0;
    for a in 1..3 {
        if dq[a].abs() > dq[best].abs() {
            best = a;
        }
    }
    best
}

#[inline]
fn voxel_at(vol: &Volume, axes: [usize; 3], ia: usize, ib: isize, ic: isize) -> f64 {
    let mut idx = [0isize; 3];
    idx[axes[0]] = ia as isize;
    idx[axes[1]] = ib;
    idx[axes[2]] = ic;
    vol.get_padded(idx[0], idx[1], idx[2])
}

fn joseph_ray(vol: &Volume, ray: &Ray) -> f64 {
    let r = IndexRay::new(vol, ray);
    let a = dominant_axis(r.dq);
    let (b, c) = ((a + 1) % 3, (a + 2) % 3);
    let axes = [a, b, c];
    let step_mm = 1.0 / r.dq[a].abs();
    let (nb, nc) = (vol.dims[b] as f64, vol.dims[c] as f64);
    let mut sum = 0.0;
    for k in 0..vol.dims[a] {
        let t = (k as f64 - r.q0[a]) / r.dq[a];
        if t < r.t_min {
            continue;
        }
        let qb = r.q0[b] + t * r.dq[b];
        let qc = r.q0[c] + t * r.dq[c];
        if qb <= -1.0 || qc <= -1.0 || qb >= nb || qc >= nc {
            continue;
        }
        let (ib, ic) = (qb.floor(), qc.floor());
        let (fb, fc) = (qb - ib, qc - ic);
        let (ib, ic) = (ib as isize, ic as isize);
        let mut s = (1.0 - fb) * (1.0 - fc) * voxel_at(vol, axes, k, ib, ic);
        if fb > 0.0 {
            s += fb * (1.0 - fc) * voxel_at(vol, axes, k, ib + 1, ic);
        }
        if fc > 0.0 {
            s += (1.0 - fb) * fc * voxel_at(vol, axes, k, ib, ic + 1);
            if fb > 0.0 {
                s += fb * fc * voxel_at(vol, axes, k, ib + 1, ic + 1);
            }
        }
        sum += s;
    }
    sum * step_mm
}

fn render_with<F>(vol: &Volume, geom: &ViewGeometry, per_ray: F) -> Result<DrrImage>
where
    F: Fn(&Ray) -> f64 + Sync,
{
    geom.validate(vol)?;
    let frame = geom.frame(vol);
    let (nu, nv) = (geom.detector.nu, geom.detector.nv);
    if vol.is_empty() {
        return Ok(DrrImage::zeros(geom.clone()));
    }
    let pixels: Vec<f64> = (0..nu * nv)
        .into_par_iter()
        .map(|i| per_ray(&geom.pixel_ray(&frame, i % nu, i / nu)))
        .collect();
    Ok(DrrImage {
        nu,
        nv,
        pixels,
        geometry: geom.clone(),
    })
}

/// Joseph-method DRR of `vol` under `geom`.
pub fn render_drr(vol: &Volume, geom: &ViewGeometry) -> Result<DrrImage> {
    render_with(vol, geom, |ray| joseph_ray(vol, ray))
}

fn trilinear(vol: &Volume, q: [f64; 3]) -> f64 {
    let mut base = [0isize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        if q[a] <= -1.0 || q[a] >= vol.dims[a] as f64 {
            return 0.0;
        }
        let f = q[a].floor();
        base[a] = f as isize;
        frac[a] = q[a] - f;
    }
    let mut s = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = base;
        for a in 0..3 {
            if corner >> a & 1 == 1 {
                w *= frac[a];
                idx[a] += 1;
            } else {
                w *= 1.0 - frac[a];
            }
        }
        if w != 0.0 {
            s += w * vol.get_padded(idx[0], idx[1], idx[2]);
        }
    }
    s
}

/// `t` interval where the ray is inside the support of the trilinear
/// interpolant, i.e. the grid grown by one voxel.
fn support_interval(vol: &Volume, r: &IndexRay) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (r.t_min, f64::INFINITY);
    for a in 0..3 {
        let (lo, hi) = (-1.0, vol.dims[a] as f64);
        if r.dq[a] == 0.0 {
            if r.q0[a] <= lo || r.q0[a] >= hi {
                return None;
            }
            continue;
        }
        let ta = (lo - r.q0[a]) / r.dq[a];
        let tb = (hi - r.q0[a]) / r.dq[a];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t1 > t0).then_some((t0, t1))
}

fn marching_ray(vol: &Volume, ray: &Ray, step: f64) -> f64 {
    let r = IndexRay::new(vol, ray);
    let Some((t0, t1)) = support_interval(vol, &r) else {
        return 0.0;
    };
    let n = ((t1 - t0) / step).ceil() as usize;
    let mut sum = 0.0;
    for i in 0..n {
        let t = t0 + (i as f64 + 0.5) * step;
        let q = std::array::from_fn(|a| r.q0[a] + t * r.dq[a]);
        sum += trilinear(vol, q);
    }
    sum * step
}

/// Reference projector: midpoint-rule integral of the trilinear interpolant
/// every `step` mm.
pub fn render_drr_marching(vol: &Volume, geom: &ViewGeometry, step: f64) -> Result<DrrImage> {
    if !(step > 0.0) {
        return Err(Error::invalid("marching step must be positive"));
    }
    render_with(vol, geom, |ray| marching_ray(vol, ray, step))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootprintEntry {
    pub iu: usize,
    pub iv: usize,
    pub weight: f64,
}

/// Sparse detector response of a single voxel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VoxelFootprint {
    pub entries: Vec<FootprintEntry>,
}

impl VoxelFootprint {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    /// Dense `nu * nv` image, `u` fastest.
    pub fn scatter(&self, nu: usize, nv: usize) -> Vec<f64> {
        let mut out = vec![0.0; nu * nv];
        for e in &self.entries {
            out[e.iu + nu * e.iv] += e.weight;
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_voxel(vol: &Volume, voxel: [usize; 3]) -> Result<()> {
    if (0..3).any(|a| voxel[a] >= vol.dims[a]) {
        return Err(Error::invalid(format!(
            "voxel {voxel:?} outside dims {:?}",
            vol.dims
        )));
    }
    if !(vol.get(voxel[0], voxel[1], voxel[2]) > 0.0) {
        return Err(Error::invalid(format!("voxel {voxel:?} is air")));
    }
    Ok(())
}

/// Chord of a ray through the center of an axis-aligned box.
fn center_chord(dir: [f64; 3], spacing: [f64; 3]) -> f64 {
    (0..3)
        .filter(|&a| dir[a] != 0.0)
        .map(|a| spacing[a] / dir[a].abs())
        .fold(f64::INFINITY, f64::min)
}

/// Footprint of one voxel given a precomputed frame. The voxel is assumed
/// in bounds and non-air.
pub(crate) fn footprint_in_frame(
    vol: &Volume,
    voxel: [usize; 3],
    geom: &ViewGeometry,
    frame: &Frame,
) -> VoxelFootprint {
    let mu = vol.get(voxel[0], voxel[1], voxel[2]);
    let Some((ray, fu, fv)) = geom.project_point(frame, vol.voxel_center(voxel)) else {
        log::debug!("voxel {voxel:?} projects behind the source");
        return VoxelFootprint::default();
    };
    let w = mu * center_chord(ray.dir, vol.spacing);
    let (nu, nv) = (geom.detector.nu as isize, geom.detector.nv as isize);
    let (u0, v0) = (fu.floor(), fv.floor());
    let (au, av) = (fu - u0, fv - v0);
    let (u0, v0) = (u0 as isize, v0 as isize);
    let mut entries = Vec::with_capacity(4);
    for (du, wu) in [(0, 1.0 - au), (1, au)] {
        for (dv, wv) in [(0, 1.0 - av), (1, av)] {
            let (iu, iv) = (u0 + du, v0 + dv);
            let weight = w * wu * wv;
            if weight > 0.0 && (0..nu).contains(&iu) && (0..nv).contains(&iv) {
                entries.push(FootprintEntry {
                    iu: iu as usize,
                    iv: iv as usize,
                    weight,
                });
            }
        }
    }
    if entries.is_empty() {
        log::debug!("voxel {voxel:?} misses the detector");
    }
    VoxelFootprint { entries }
}

/// Fast single-voxel projection: the ray from the source through the voxel
/// center deposits `mu * chord` bilinearly onto the nearest four pixels.
/// Deposits falling off the detector are dropped.
pub fn project_voxel(vol: &Volume, voxel: [usize; 3], geom: &ViewGeometry) -> Result<VoxelFootprint> {
    check_voxel(vol, voxel)?;
    geom.validate(vol)?;
    Ok(footprint_in_frame(vol, voxel, geom, &geom.frame(vol)))
}

/// Brute-force single-voxel projection: the Joseph DRR of a volume holding
/// only that voxel.
pub fn project_voxel_oracle(vol: &Volume, voxel: [usize; 3], geom: &ViewGeometry) -> Result<DrrImage> {
    check_voxel(vol, voxel)?;
    render_drr(&vol.isolate_voxel(voxel), geom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Detector;

    fn det(n: usize, pitch: f64) -> Detector {
        Detector {
            nu: n,
            nv: n,
            du: pitch,
            dv: pitch,
            distance: 50.0,
        }
    }

    fn single(mu: f64) -> Volume {
        Volume::new([1, 1, 1], [1.0; 3], [0.0; 3], vec![mu]).unwrap()
    }

    #[test]
    fn empty_volume_renders_black() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3]);
        let g = ViewGeometry::cone([0.2, 0.4, 0.0], 40.0, det(8, 1.0));
        assert!(render_drr(&v, &g).unwrap().pixels.iter().all(|&p| p == 0.0));
        assert!(render_drr_marching(&v, &g, 0.1)
            .unwrap()
            .pixels
            .iter()
            .all(|&p| p == 0.0));
    }

    #[test]
    fn single_voxel_line_integral() {
        let g = ViewGeometry::parallel([0.0; 3], det(3, 1.0));
        let img = render_drr(&single(0.5), &g).unwrap();
        assert_eq!(img.get(1, 1), 0.5);
        assert_eq!(img.pixels.iter().filter(|&&p| p != 0.0).count(), 1);
        let m = render_drr_marching(&single(0.5), &g, 1.0 / 16.0).unwrap();
        assert!((m.get(1, 1) - 0.5).abs() <= 0.5 * 2.0 / 16.0);
    }

    #[test]
    fn source_inside_volume_is_rejected() {
        let v = Volume::zeros([8, 8, 8], [1.0; 3]);
        let g = ViewGeometry::cone([0.0; 3], 3.0, det(4, 1.0));
        assert!(render_drr(&v, &g).is_err());
        assert!(render_drr_marching(&v, &g, 0.0).is_err());
    }

    #[test]
    fn footprint_cases() {
        let g = ViewGeometry::parallel([0.0; 3], det(3, 1.0));
        let fp = project_voxel(&single(0.5), [0, 0, 0], &g).unwrap();
        assert_eq!(
            fp.entries,
            vec![FootprintEntry {
                iu: 1,
                iv: 1,
                weight: 0.5
            }]
        );

        // An even detector puts the voxel center between two pixel columns.
        let g2 = ViewGeometry::parallel(
            [0.0; 3],
            Detector {
                nu: 2,
                nv: 1,
                du: 1.0,
                dv: 1.0,
                distance: 50.0,
            },
        );
        let fp = project_voxel(&single(0.5), [0, 0, 0], &g2).unwrap();
        let w: Vec<f64> = fp.entries.iter().map(|e| e.weight).collect();
        assert_eq!(w, vec![0.25, 0.25]);

        assert!(project_voxel(&single(0.0), [0, 0, 0], &g).is_err());
        assert!(project_voxel(&single(0.5), [1, 0, 0], &g).is_err());
        assert!(project_voxel_oracle(&single(0.0), [0, 0, 0], &g).is_err());
    }

    #[test]
    fn dominant_axis_ties_prefer_lower_axis() {
        assert_eq!(dominant_axis([1.0, 1.0, 1.0]), 0);
        assert_eq!(dominant_axis([0.5, -1.0, 1.0]), 1);
        assert_eq!(dominant_axis([0.0, 0.0, -1.0]), 2);
    }

    #[test]
    fn column_sums_match_render() {
        let data: Vec<f64> = (0..5 * 5 * 4).map(|i| ((i * 37) % 11) as f64 * 0.01).collect();
        let vol = Volume::new([5, 5, 4], [1.0; 3], [0.0; 3], data).unwrap();
        let g = ViewGeometry::parallel([0.0; 3], det(5, 1.0));
        let img = render_drr(&vol, &g).unwrap();
        let mut acc = vec![0.0; 25];
        for i in 0..vol.len() {
            let vx = vol.coords(i);
            if vol.data[i] > 0.0 {
                for e in project_voxel(&vol, vx, &g).unwrap().entries {
                    acc[e.iu + 5 * e.iv] += e.weight;
                }
            }
        }
        for (a, b) in acc.iter().zip(&img.pixels) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn oracle_matches_footprint_axis_aligned() {
        let data: Vec<f64> = (0..27).map(|i| 0.01 * (1 + i % 4) as f64).collect();
        let vol = Volume::new([3, 3, 3], [1.0; 3], [0.0; 3], data).unwrap();
        for rot in [[0.0, 0.0, 0.0], [0.0, 90.0, 0.0], [0.0, 0.0, 90.0], [90.0, 0.0, 0.0]] {
            let g = ViewGeometry::parallel([0.0; 3], det(3, 1.0)).with_rotation_deg(rot);
            for i in 0..27 {
                let vx = vol.coords(i);
                let fp = project_voxel(&vol, vx, &g).unwrap().scatter(3, 3);
                let or = project_voxel_oracle(&vol, vx, &g).unwrap();
                for (a, b) in fp.iter().zip(&or.pixels) {
                    assert!((a - b).abs() < 1e-6, "rot {rot:?} voxel {vx:?}");
                }
            }
        }
    }

    #[test]
    fn oracle_support_contains_footprint_when_rotated() {
        // Pixel pitch below cos(30°) of the voxel size keeps every bilinear
        // neighbour inside the Joseph support of the voxel.
        let vol = Volume::new([5, 5, 5], [1.0; 3], [0.0; 3], vec![0.03; 125]).unwrap();
        let g = ViewGeometry::parallel([0.0, 30f64.to_radians(), 0.0], det(16, 0.5));
        for i in 0..vol.len() {
            let vx = vol.coords(i);
            let fp = project_voxel(&vol, vx, &g).unwrap();
            let or = project_voxel_oracle(&vol, vx, &g).unwrap();
            assert!(!fp.is_empty());
            for e in &fp.entries {
                assert!(or.get(e.iu, e.iv) > 0.0, "voxel {vx:?} pixel ({}, {})", e.iu, e.iv);
            }
        }
    }

    #[test]
    fn rotating_half_turn_flips_image() {
        let data: Vec<f64> = (0..6 * 6 * 6).map(|i| ((i * 13) % 7) as f64 * 0.01).collect();
        let vol = Volume::new([6, 6, 6], [1.0; 3], [0.0; 3], data).unwrap();
        let g = ViewGeometry::parallel([0.0; 3], det(6, 1.0));
        let a = render_drr(&vol, &g).unwrap();
        let b = render_drr(&vol, &g.clone().with_rotation_deg([180.0, 0.0, 0.0])).unwrap();
        for iv in 0..6 {
            for iu in 0..6 {
                assert!((a.get(iu, iv) - b.get(5 - iu, 5 - iv)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn marching_converges_on_single_voxel() {
        // Off-axis ray through one voxel; compare against piecewise Gauss
        // quadrature of the product of three tent functions.
        let vol = single(0.5);
        let g = ViewGeometry::parallel([0.4, 0.3, 0.0], det(1, 1.0));
        let frame = g.frame(&vol);
        let ray = g.pixel_ray(&frame, 0, 0);
        let exact = tent_line_integral(ray.origin, ray.dir) * 0.5;
        let e1 = (marching_ray(&vol, &ray, 0.1) - exact).abs();
        let e2 = (marching_ray(&vol, &ray, 0.05) - exact).abs();
        assert!(e2 <= 0.5 * e1 + 1e-15, "{e1} {e2}");
    }

    /// Exact integral of tent(x)tent(y)tent(z) along a line, split at every
    /// kink so each piece is a cubic integrated exactly by two-point Gauss.
    fn tent_line_integral(o: [f64; 3], d: [f64; 3]) -> f64 {
        let mut knots = Vec::new();
        for a in 0..3 {
            if d[a] != 0.0 {
                for k in [-1.0, 0.0, 1.0] {
                    knots.push((k - o[a]) / d[a]);
                }
            }
        }
        knots.sort_by(f64::total_cmp);
        let f = |t: f64| -> f64 {
            (0..3)
                .map(|a| (1.0 - (o[a] + t * d[a]).abs()).max(0.0))
                .product()
        };
        let g = 1.0 / 3f64.sqrt();
        knots
            .windows(2)
            .map(|w| {
                let (m, h) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
                h * (f(m - h * g) + f(m + h * g))
            })
            .sum()
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn rand_vol() -> impl Strategy<Value = Volume> {
            proptest::collection::vec(0.0f64..0.1, 4 * 5 * 6)
                .prop_map(|d| Volume::new([4, 5, 6], [1.0, 0.8, 1.2], [0.0; 3], d).unwrap())
        }

        fn geom() -> impl Strategy<Value = ViewGeometry> {
            (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0, any::<bool>()).prop_map(|(a, b, c, cone)| {
                let d = det(9, 0.9);
                if cone {
                    ViewGeometry::cone([a, b, c], 30.0, d)
                } else {
                    ViewGeometry::parallel([a, b, c], d)
                }
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn render_is_linear(v in rand_vol(), g in geom(), s in 0.1f64..10.0) {
                let a = render_drr(&v, &g).unwrap();
                let b = render_drr(&v.scaled(s), &g).unwrap();
                for (x, y) in a.pixels.iter().zip(&b.pixels) {
                    prop_assert!((x * s - y).abs() <= 1e-12 * y.abs().max(1e-300));
                }
            }

            #[test]
            fn render_superposes(v1 in rand_vol(), v2 in rand_vol(), g in geom()) {
                let sum = Volume {
                    data: v1.data.iter().zip(&v2.data).map(|(a, b)| a + b).collect(),
                    ..v1.clone()
                };
                let a = render_drr(&v1, &g).unwrap();
                let b = render_drr(&v2, &g).unwrap();
                let c = render_drr(&sum, &g).unwrap();
                for i in 0..c.len() {
                    let want = a.pixels[i] + b.pixels[i];
                    prop_assert!((c.pixels[i] - want).abs() <= 1e-9 * want.abs().max(1e-12));
                }
            }
        }
    }
}
