//! Procedural phantoms built from analytic primitives.
//!
//! Phantom grids are centered on the world origin, so primitive centers are
//! given in millimetres relative to the middle of the volume.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::volume::{centered_origin, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        attenuation: f64,
    },
    /// Axis-aligned box; `size` holds full edge lengths.
    Box {
        center: [f64; 3],
        size: [f64; 3],
        attenuation: f64,
    },
    Cylinder {
        center: [f64; 3],
        radius: f64,
        length: f64,
        axis: Axis,
        attenuation: f64,
    },
}

impl Primitive {
    pub fn attenuation(&self) -> f64 {
        match *self {
            Primitive::Sphere { attenuation, .. }
            | Primitive::Box { attenuation, .. }
            | Primitive::Cylinder { attenuation, .. } => attenuation,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Primitive::Sphere { center, radius, .. } => dist2(p, center) <= radius * radius,
            Primitive::Box { center, size, .. } => {
                (0..3).all(|a| (p[a] - center[a]).abs() <= 0.5 * size[a])
            }
            Primitive::Cylinder {
                center,
                radius,
                length,
                axis,
                ..
            } => {
                let ax = axis.index();
                let mut r2 = 0.0;
                for a in (0..3).filter(|&a| a != ax) {
                    r2 += (p[a] - center[a]).powi(2);
                }
                r2 <= radius * radius && (p[ax] - center[ax]).abs() <= 0.5 * length
            }
        }
    }

    /// Axis-aligned bounding box `(low, high)`.
    fn extent(&self) -> ([f64; 3], [f64; 3]) {
        let half: [f64; 3] = match *self {
            Primitive::Sphere { radius, .. } => [radius; 3],
            Primitive::Box { size, .. } => size.map(|s| 0.5 * s),
            Primitive::Cylinder {
                radius,
                length,
                axis,
                ..
            } => {
                let mut h = [radius; 3];
                h[axis.index()] = 0.5 * length;
                h
            }
        };
        let c = match *self {
            Primitive::Sphere { center, .. }
            | Primitive::Box { center, .. }
            | Primitive::Cylinder { center, .. } => center,
        };
        (
            std::array::from_fn(|a| c[a] - half[a]),
            std::array::from_fn(|a| c[a] + half[a]),
        )
    }

    fn validate(&self) -> Result<()> {
        let a = self.attenuation();
        if !(a >= 0.0) || !a.is_finite() {
            return Err(Error::invalid(format!("primitive attenuation must be >= 0, got {a}")));
        }
        let ok = match *self {
            Primitive::Sphere { radius, .. } => radius >= 0.0,
            Primitive::Box { size, .. } => size.iter().all(|&s| s >= 0.0),
            Primitive::Cylinder { radius, length, .. } => radius >= 0.0 && length >= 0.0,
        };
        if !ok {
            return Err(Error::invalid("primitive sizes must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anomaly {
    pub center: [f64; 3],
    pub radius: f64,
    /// Added to the attenuation inside the anomaly sphere.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub primitives: Vec<Primitive>,
    /// `None`: no anomaly field (unlabeled). `Some(None)`: declared absent
    /// (negative sample). `Some(Some(_))`: anomaly present.
    #[serde(
        default,
        deserialize_with = "declared",
        skip_serializing_if = "Option::is_none"
    )]
    pub anomaly: Option<Option<Anomaly>>,
    pub seed: u64,
    /// Relative amplitude of per-voxel multiplicative texture inside primitives.
    #[serde(default)]
    pub texture: f64,
}

fn declared<'de, D, T>(d: D) -> std::result::Result<Option<Option<T>>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d).map(Some)
}

impl PhantomSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: PhantomSpec =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("phantom dims must be >= 1"));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("phantom spacing must be positive"));
        }
        if self.primitives.is_empty() {
            return Err(Error::invalid("phantom needs at least one primitive"));
        }
        for p in &self.primitives {
            p.validate()?;
        }
        if let Some(Some(a)) = &self.anomaly {
            if !(a.radius > 0.0) {
                return Err(Error::invalid("anomaly radius must be positive"));
            }
            if !a.delta.is_finite() {
                return Err(Error::invalid("anomaly delta must be finite"));
            }
        }
        if !(self.texture >= 0.0 && self.texture < 1.0) {
            return Err(Error::invalid("texture amplitude must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Binary label: `Some(true)` when an anomaly is present, `Some(false)`
    /// when the field is declared empty, `None` when undeclared.
    pub fn label(&self) -> Option<bool> {
        self.anomaly.as_ref().map(|a| a.is_some())
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Rasterizes a phantom by sampling every primitive at voxel centers.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let dims = spec.dims;
    let spacing = spec.spacing_mm;
    let origin = centered_origin(dims, spacing);
    let template = Volume::zeros(dims, spacing);
    let (lo, hi) = template.bounds();
    for (i, p) in spec.primitives.iter().enumerate() {
        let (plo, phi) = p.extent();
        if (0..3).any(|a| plo[a] < lo[a] || phi[a] > hi[a]) {
            log::warn!("primitive {i} extends outside the volume and is clipped");
        }
    }
    let anomaly = spec.anomaly.clone().flatten();
    let plane = dims[0] * dims[1];
    let slices: Vec<Vec<f64>> = (0..dims[2])
        .into_par_iter()
        .map(|z| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(z as u64);
            let mut out = Vec::with_capacity(plane);
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [
                        origin[0] + x as f64 * spacing[0],
                        origin[1] + y as f64 * spacing[1],
                        origin[2] + z as f64 * spacing[2],
                    ];
                    let mut v = spec
                        .primitives
                        .iter()
                        .filter(|prim| prim.contains(p))
                        .map(Primitive::attenuation)
                        .fold(0.0, f64::max);
                    // Draw unconditionally so the stream position only
                    // depends on the voxel index.
                    let jitter: f64 = rng.gen_range(-1.0..1.0);
                    if spec.texture > 0.0 {
                        v *= 1.0 + spec.texture * jitter;
                    }
                    if let Some(a) = &anomaly {
                        if dist2(p, a.center) <= a.radius * a.radius {
                            v = (v + a.delta).max(0.0);
                        }
                    }
                    out.push(v);
                }
            }
            out
        })
        .collect();
    Ok(Volume {
        dims,
        spacing,
        origin,
        data: slices.concat(),
    })
}

const LIMB_SEGMENTS: usize = 6;

/// Random limb-like phantom: a tapered soft-tissue column along `y` holding
/// a few bone rods and blobs. `anomaly` selects the label semantics of
/// [`PhantomSpec::anomaly`].
pub fn random_limb(
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    seed: u64,
    anomaly: Option<bool>,
) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * spacing_mm[a]);
    let r_xz = 0.5 * ext[0].min(ext[2]);
    let mut primitives = Vec::new();

    let tissue_r = r_xz * rng.gen_range(0.55..0.85);
    let tissue_c = [
        rng.gen_range(-0.1..0.1) * r_xz,
        0.0,
        rng.gen_range(-0.1..0.1) * r_xz,
    ];
    // Tapered soft-tissue column made of stacked cylinder segments.
    let length = ext[1] * rng.gen_range(0.7..1.0);
    let taper = rng.gen_range(0.2..0.5);
    let flip = rng.gen_bool(0.5);
    let seg_len = length / LIMB_SEGMENTS as f64;
    let tissue_att = rng.gen_range(0.018..0.022);
    for s in 0..LIMB_SEGMENTS {
        let mut f = s as f64 / (LIMB_SEGMENTS - 1) as f64;
        if flip {
            f = 1.0 - f;
        }
        primitives.push(Primitive::Cylinder {
            center: [
                tissue_c[0],
                -0.5 * length + (s as f64 + 0.5) * seg_len,
                tissue_c[2],
            ],
            radius: tissue_r * (1.0 - taper * f) * rng.gen_range(0.95..1.05),
            length: seg_len,
            axis: Axis::Y,
            attenuation: tissue_att,
        });
    }
    let tissue_r = tissue_r * (1.0 - taper) * 0.95;

    let n_bones = rng.gen_range(1..=3);
    for _ in 0..n_bones {
        let r = tissue_r * rng.gen_range(0.12..0.3);
        let (dx, dz) = random_disk(&mut rng, (tissue_r - r).max(0.0) * 0.8);
        let len = ext[1] * rng.gen_range(0.3..0.9);
        let cy = rng.gen_range(-0.5..0.5) * (ext[1] - len);
        primitives.push(Primitive::Cylinder {
            center: [tissue_c[0] + dx, cy, tissue_c[2] + dz],
            radius: r,
            length: len,
            axis: Axis::Y,
            attenuation: rng.gen_range(0.025..0.032),
        });
    }

    let n_blobs = rng.gen_range(2..=4);
    for _ in 0..n_blobs {
        let (dx, dz) = random_disk(&mut rng, tissue_r * 0.6);
        let c = [
            tissue_c[0] + dx,
            rng.gen_range(-0.4..0.4) * ext[1],
            tissue_c[2] + dz,
        ];
        let att = rng.gen_range(0.025..0.032);
        if rng.gen_bool(0.5) {
            primitives.push(Primitive::Sphere {
                center: c,
                radius: tissue_r * rng.gen_range(0.15..0.35),
                attenuation: att,
            });
        } else {
            let s = tissue_r;
            primitives.push(Primitive::Box {
                center: c,
                size: [
                    s * rng.gen_range(0.2..0.6),
                    s * rng.gen_range(0.2..0.6),
                    s * rng.gen_range(0.2..0.6),
                ],
                attenuation: att,
            });
        }
    }

    let anomaly = anomaly.map(|present| {
        present.then(|| {
            let (dx, dz) = random_disk(&mut rng, tissue_r * 0.6);
            Anomaly {
                center: [
                    tissue_c[0] + dx,
                    rng.gen_range(-0.35..0.35) * ext[1],
                    tissue_c[2] + dz,
                ],
                radius: tissue_r * rng.gen_range(0.15..0.25),
                delta: 0.03,
            }
        })
    });

    PhantomSpec {
        dims,
        spacing_mm,
        primitives,
        anomaly,
        seed,
        texture: 0.0,
    }
}

/// Decoy-matched anomaly task on a cubic grid viewed along `z` and `x`.
///
/// Every object is built from spheres of radius 1.5 voxels centered on voxel
/// centers. The anomaly is one sphere of strength `delta`. Decoys are chains
/// of three touching spheres along `z` or `x` (strength `delta / 3`) and 3×3
/// sheets in the `x`-`z` plane (strength `delta / 9`). Seen along its own
/// axis a chain projects exactly like the anomaly; seen across it, exactly
/// like a sheet.
///
/// Every volume shows one blob and one streak along `z`, so that view alone
/// carries no label information. In three quarters of the volumes (drawn from `seed`)
/// positives hold the anomaly and a sheet and negatives a `z` chain and an
/// `x` chain; the `x` view then also shows a blob and a streak and only
/// pairing the blobs across views reveals the label. In the rest
/// positives hold the anomaly and an `x` chain and negatives a `z` chain and
/// a sheet, which the `x` view tells apart on its own.
///
/// Objects occupy distinct bands of four rows along `y` where the grid allows.
pub fn anomaly_task(n: usize, seed: u64, positive: bool, delta: f64) -> PhantomSpec {
    const R: f64 = 1.5;
    const STEP: isize = 3;
    const BAND: isize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = centered_origin([n; 3], [1.0; 3]);
    let chain = |axis: usize| -> Vec<[isize; 3]> {
        (-1..=1)
            .map(|i| std::array::from_fn(|a| if a == axis { i * STEP } else { 0 }))
            .collect()
    };
    let sheet: Vec<[isize; 3]> = (-1..=1)
        .flat_map(|i| (-1..=1).map(move |k| [i * STEP, 0, k * STEP]))
        .collect();
    let paired = rng.gen_bool(0.75);
    let kinds: Vec<(Vec<[isize; 3]>, f64)> = match (paired, positive) {
        (true, true) => vec![(sheet, delta / 9.0)],
        (true, false) => vec![(chain(2), delta / 3.0), (chain(0), delta / 3.0)],
        (false, true) => vec![(chain(0), delta / 3.0)],
        (false, false) => vec![(chain(2), delta / 3.0), (sheet, delta / 9.0)],
    };
    let lo = STEP + 2;
    let hi = n as isize - STEP - 3;
    // Each object sits inside its own band of BAND rows along y.
    let mut bands: Vec<isize> = (0..n as isize / BAND)
        .filter(|b| b * BAND + 1 >= lo && b * BAND + 2 <= hi)
        .collect();
    let mut taken: Vec<([isize; 3], [isize; 3])> = Vec::new();
    let mut place = |rng: &mut ChaCha8Rng, offsets: &[[isize; 3]]| -> [isize; 3] {
        let lo_o: [isize; 3] = std::array::from_fn(|a| offsets.iter().map(|o| o[a]).min().unwrap() - 1);
        let hi_o: [isize; 3] = std::array::from_fn(|a| offsets.iter().map(|o| o[a]).max().unwrap() + 1);
        let band = if bands.is_empty() { None } else { Some(bands.swap_remove(rng.gen_range(0..bands.len()))) };
        for attempt in 0.. {
            let mut c: [isize; 3] = std::array::from_fn(|_| rng.gen_range(lo..=hi));
            if let Some(b) = band {
                c[1] = b * BAND + 1 + rng.gen_range(0..=1);
            }
            let bb = (
                std::array::from_fn(|a| c[a] + lo_o[a] - 1),
                std::array::from_fn(|a| c[a] + hi_o[a] + 1),
            );
            let clear = taken
                .iter()
                .all(|t: &([isize; 3], [isize; 3])| (0..3).any(|a| bb.1[a] < t.0[a] || t.1[a] < bb.0[a]));
            if clear || attempt > 1000 {
                taken.push(bb);
                return c;
            }
        }
        unreachable!()
    };
    let world = |c: [isize; 3]| -> [f64; 3] { std::array::from_fn(|a| origin[a] + c[a] as f64) };

    let anomaly = positive.then(|| {
        let c = place(&mut rng, &[[0, 0, 0]]);
        Anomaly {
            center: world(c),
            radius: R,
            delta,
        }
    });
    let mut primitives = Vec::new();
    for (offsets, strength) in &kinds {
        let c = place(&mut rng, offsets);
        for o in offsets {
            primitives.push(Primitive::Sphere {
                center: world(std::array::from_fn(|a| c[a] + o[a])),
                radius: R,
                attenuation: *strength,
            });
        }
    }
    PhantomSpec {
        dims: [n; 3],
        spacing_mm: [1.0; 3],
        primitives,
        anomaly: Some(anomaly),
        seed,
        texture: 0.0,
    }
}

fn random_disk(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.gen::<f64>().sqrt();
    let t = rng.gen_range(0.0..std::f64::consts::TAU);
    (r * t.cos(), r * t.sin())
}
