//! Projection geometry for a single view.
//!
//! The volume is rotated about its isocenter by `R = Rz(yaw) · Ry(pitch) ·
//! Rx(roll)`. In the resulting view frame rays travel along `+z`: the cone
//! source sits at `z = -source_distance`, the detector plane at
//! `z = +detector.distance`, and detector `u`/`v` run along view `x`/`y`.
//! Detector pixel `(iu, iv)` is centered at
//! `((iu - (nu-1)/2) du, (iv - (nv-1)/2) dv)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    Parallel,
    Cone,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detector {
    pub nu: usize,
    pub nv: usize,
    #[serde(rename = "du_mm")]
    pub du: f64,
    #[serde(rename = "dv_mm")]
    pub dv: f64,
    /// Distance from the isocenter to the detector plane.
    #[serde(rename = "distance_mm")]
    pub distance: f64,
}

impl Detector {
    pub fn pixels(&self) -> usize {
        self.nu * self.nv
    }

    /// Detector with `k`×`k` pixel bins merged into one.
    pub fn binned(&self, k: usize) -> Result<Detector> {
        if k == 0 || self.nu % k != 0 || self.nv % k != 0 {
            return Err(Error::invalid(format!(
                "detector {}x{} cannot be binned by {k}",
                self.nu, self.nv
            )));
        }
        Ok(Detector {
            nu: self.nu / k,
            nv: self.nv / k,
            du: self.du * k as f64,
            dv: self.dv * k as f64,
            distance: self.distance,
        })
    }

    /// Continuous pixel coordinates of a detector-plane point.
    #[inline]
    pub fn to_pixel(&self, u: f64, v: f64) -> (f64, f64) {
        (
            u / self.du + 0.5 * (self.nu as f64 - 1.0),
            v / self.dv + 0.5 * (self.nv as f64 - 1.0),
        )
    }

    #[inline]
    pub fn pixel_center(&self, iu: usize, iv: usize) -> (f64, f64) {
        (
            (iu as f64 - 0.5 * (self.nu as f64 - 1.0)) * self.du,
            (iv as f64 - 0.5 * (self.nv as f64 - 1.0)) * self.dv,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewGeometry {
    pub mode: ProjectionMode,
    /// Yaw, pitch, roll in degrees. Degrees are the stored form so that the
    /// JSON representation round-trips exactly; see [`Self::rotation_rad`].
    pub rotation_deg: [f64; 3],
    /// Source to isocenter distance, cone mode only.
    #[serde(rename = "source_distance_mm", default)]
    pub source_distance: f64,
    pub detector: Detector,
    /// Rotation center in world mm; defaults to the volume center.
    #[serde(
        rename = "isocenter_mm",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub isocenter: Option<[f64; 3]>,
}

/// A ray `origin + t * dir` with unit `dir`, valid for `t >= t_min`.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub t_min: f64,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

impl ViewGeometry {
    pub fn parallel(rotation_rad: [f64; 3], detector: Detector) -> Self {
        ViewGeometry {
            mode: ProjectionMode::Parallel,
            rotation_deg: rotation_rad.map(f64::to_degrees),
            source_distance: 0.0,
            detector,
            isocenter: None,
        }
    }

    pub fn cone(rotation_rad: [f64; 3], source_distance: f64, detector: Detector) -> Self {
        ViewGeometry {
            mode: ProjectionMode::Cone,
            rotation_deg: rotation_rad.map(f64::to_degrees),
            source_distance,
            detector,
            isocenter: None,
        }
    }

    pub fn with_rotation_deg(mut self, deg: [f64; 3]) -> Self {
        self.rotation_deg = deg;
        self
    }

    pub fn rotation_rad(&self) -> [f64; 3] {
        self.rotation_deg.map(f64::to_radians)
    }

    pub fn with_isocenter(mut self, iso: [f64; 3]) -> Self {
        self.isocenter = Some(iso);
        self
    }

    pub fn with_detector(mut self, detector: Detector) -> Self {
        self.detector = detector;
        self
    }

    /// Checks the detector and the source/detector clearance around `vol`.
    pub fn validate(&self, vol: &Volume) -> Result<()> {
        let d = &self.detector;
        if d.nu == 0 || d.nv == 0 {
            return Err(Error::invalid("detector needs at least one pixel per axis"));
        }
        if !(d.du > 0.0 && d.dv > 0.0) {
            return Err(Error::invalid("detector pixel pitch must be positive"));
        }
        if self.rotation_deg.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("rotation angles must be finite"));
        }
        let reach = vol.max_corner_distance(self.isocenter_for(vol));
        if !(d.distance > reach) {
            return Err(Error::invalid(format!(
                "detector distance {} mm must exceed the volume half-diagonal {reach:.3} mm",
                d.distance
            )));
        }
        if self.mode == ProjectionMode::Cone && !(self.source_distance > reach) {
            return Err(Error::invalid(format!(
                "source distance {} mm places the source inside the volume (half-diagonal {reach:.3} mm)",
                self.source_distance
            )));
        }
        Ok(())
    }

    pub fn isocenter_for(&self, vol: &Volume) -> [f64; 3] {
        self.isocenter.unwrap_or_else(|| vol.center())
    }

    pub fn frame(&self, vol: &Volume) -> Frame {
        Frame {
            rot: rotation_matrix(self.rotation_deg),
            iso: self.isocenter_for(vol),
        }
    }

    /// Ray through the center of detector pixel `(iu, iv)`.
    pub fn pixel_ray(&self, frame: &Frame, iu: usize, iv: usize) -> Ray {
        let (u, v) = self.detector.pixel_center(iu, iv);
        self.ray_to(frame, u, v)
    }

    /// Ray hitting the detector plane at `(u, v)` mm.
    pub fn ray_to(&self, frame: &Frame, u: f64, v: f64) -> Ray {
        match self.mode {
            ProjectionMode::Parallel => Ray {
                origin: frame.to_world([u, v, 0.0]),
                dir: frame.dir_to_world([0.0, 0.0, 1.0]),
                t_min: f64::NEG_INFINITY,
            },
            ProjectionMode::Cone => {
                let src = [0.0, 0.0, -self.source_distance];
                let tgt = [u, v, self.detector.distance];
                let d = normalize(sub(tgt, src));
                Ray {
                    origin: frame.to_world(src),
                    dir: frame.dir_to_world(d),
                    t_min: 0.0,
                }
            }
        }
    }

    /// Ray from the source through a world point, and the continuous pixel
    /// coordinates where it meets the detector. `None` when the point lies
    /// behind the source.
    pub fn project_point(&self, frame: &Frame, p: [f64; 3]) -> Option<(Ray, f64, f64)> {
        let q = frame.to_view(p);
        let (u, v) = match self.mode {
            ProjectionMode::Parallel => (q[0], q[1]),
            ProjectionMode::Cone => {
                let depth = q[2] + self.source_distance;
                if !(depth > 0.0) {
                    return None;
                }
                let mag = (self.source_distance + self.detector.distance) / depth;
                (q[0] * mag, q[1] * mag)
            }
        };
        let ray = match self.mode {
            ProjectionMode::Parallel => Ray {
                origin: p,
                dir: frame.dir_to_world([0.0, 0.0, 1.0]),
                t_min: f64::NEG_INFINITY,
            },
            ProjectionMode::Cone => self.ray_to(frame, u, v),
        };
        let (fu, fv) = self.detector.to_pixel(u, v);
        Some((ray, fu, fv))
    }
}

/// World/view transform for one geometry.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub rot: [[f64; 3]; 3],
    pub iso: [f64; 3],
}

impl Frame {
    pub fn to_view(&self, p: [f64; 3]) -> [f64; 3] {
        mat_vec(&self.rot, sub(p, self.iso))
    }

    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let d = self.dir_to_world(q);
        [d[0] + self.iso[0], d[1] + self.iso[1], d[2] + self.iso[2]]
    }

    pub fn dir_to_world(&self, d: [f64; 3]) -> [f64; 3] {
        let r = &self.rot;
        std::array::from_fn(|i| r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2])
    }
}

/// Sine and cosine of an angle in degrees, exact at multiples of 90°.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let quarter = deg / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// `Rz(yaw) · Ry(pitch) · Rx(roll)` from angles in degrees.
pub fn rotation_matrix(deg: [f64; 3]) -> [[f64; 3]; 3] {
    let (sy, cy) = sin_cos_deg(deg[0]);
    let (sp, cp) = sin_cos_deg(deg[1]);
    let (sr, cr) = sin_cos_deg(deg[2]);
    let rz = [[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn mat_vec(a: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

#[inline]
pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(n: usize) -> Detector {
        Detector {
            nu: n,
            nv: n,
            du: 1.0,
            dv: 1.0,
            distance: 100.0,
        }
    }

    #[test]
    fn quarter_turns_are_exact() {
        let r = rotation_matrix([0.0, 90.0, 0.0]);
        assert_eq!(r, [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]);
        assert_eq!(sin_cos_deg(-90.0), (-1.0, 0.0));
        assert_eq!(sin_cos_deg(540.0), (0.0, -1.0));
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation_matrix([17.0, -33.0, 71.0]);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let g = ViewGeometry::cone([0.3, -1.1, 0.05], 412.5, det(16)).with_isocenter([1.0, 2.0, 3.0]);
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("rotation_deg"));
        let back: ViewGeometry = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn validation() {
        let vol = Volume::zeros([10, 10, 10], [1.0; 3]);
        assert!(ViewGeometry::parallel([0.0; 3], det(4)).validate(&vol).is_ok());
        let inside = ViewGeometry::cone([0.0; 3], 5.0, det(4));
        assert!(inside.validate(&vol).is_err());
        let mut bad = det(4);
        bad.du = 0.0;
        assert!(ViewGeometry::parallel([0.0; 3], bad).validate(&vol).is_err());
        let mut close = det(4);
        close.distance = 2.0;
        assert!(ViewGeometry::parallel([0.0; 3], close).validate(&vol).is_err());
    }

    #[test]
    fn cone_projection_magnifies() {
        let vol = Volume::zeros([4, 4, 4], [1.0; 3]);
        let g = ViewGeometry::cone([0.0; 3], 100.0, det(101));
        let f = g.frame(&vol);
        let (_, fu, fv) = g.project_point(&f, [1.0, 0.0, 0.0]).unwrap();
        assert!((fu - (50.0 + 2.0)).abs() < 1e-12);
        assert!((fv - 50.0).abs() < 1e-12);
    }

    #[test]
    fn binning() {
        let b = det(8).binned(2).unwrap();
        assert_eq!((b.nu, b.du), (4, 2.0));
        assert!(det(6).binned(4).is_err());
        // Binned pixel centers are the centers of the merged blocks.
        let fine = det(8);
        let (u0, _) = fine.pixel_center(0, 0);
        let (u1, _) = fine.pixel_center(1, 0);
        assert_eq!(b.pixel_center(0, 0).0, 0.5 * (u0 + u1));
    }
}
