//! Randomized view-pair datasets.
//!
//! Each sample draws two view geometries (and optionally a crop) from its
//! own RNG stream, renders both views at full detector resolution, computes
//! the normalized patch-level correspondence at factor `k`, and writes
//! three files. A JSON manifest lists every sample with its split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::{generate_correspondence, normalize, CorrespondenceMatrix};
use crate::error::{Error, Result};
use crate::geometry::{Detector, ProjectionMode, ViewGeometry};
use crate::image::save_drr;
use crate::phantom::{make_phantom, PhantomSpec};
use crate::projector::render_drr;
use crate::volume::{write_file, Volume};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    pub enabled: bool,
    /// Per-axis kept fraction is drawn uniformly from this range.
    pub fraction: [f64; 2],
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            enabled: false,
            fraction: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationSpec {
    pub mode: ProjectionMode,
    /// `[lo, hi]` per rotation axis (yaw, pitch, roll), radians.
    pub view1_angles_rad: [[f64; 2]; 3],
    pub view2_angles_rad: [[f64; 2]; 3],
    /// Drawn independently for each view; ignored in parallel mode.
    pub source_distance_mm: [f64; 2],
    /// Full-resolution detector; its pixel counts must be divisible by `k`.
    pub detector: Detector,
    #[serde(default)]
    pub crop: CropSpec,
    pub pairs_per_volume: usize,
    pub seed: u64,
    /// Train, validation, test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    [0.6, 0.1, 0.3]
}

impl VariationSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: VariationSpec =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !self
            .view1_angles_rad
            .iter()
            .chain(&self.view2_angles_rad)
            .all(|&r| ordered(r))
        {
            return Err(Error::invalid("angle ranges must be finite and ordered"));
        }
        if !ordered(self.source_distance_mm) {
            return Err(Error::invalid("source distance range must be ordered"));
        }
        if self.pairs_per_volume == 0 {
            return Err(Error::invalid("pairs_per_volume must be >= 1"));
        }
        let f = self.crop.fraction;
        if self.crop.enabled && !(ordered(f) && f[0] > 0.0 && f[1] <= 1.0) {
            return Err(Error::invalid("crop fractions must lie in (0, 1]"));
        }
        if self.split.iter().any(|&s| !(s >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must be non-negative and sum to 1"));
        }
        Ok(())
    }
}

/// Input volume for dataset generation.
#[derive(Debug, Clone)]
pub enum VolumeSource {
    Volume(Volume),
    Phantom(PhantomSpec),
}

impl VolumeSource {
    pub fn materialize(&self) -> Result<(Volume, Option<bool>)> {
        match self {
            VolumeSource::Volume(v) => Ok((v.clone(), None)),
            VolumeSource::Phantom(spec) => Ok((make_phantom(spec)?, spec.label())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub offset: [usize; 3],
    pub dims: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub view1: String,
    pub view2: String,
    pub corr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
    pub split: Split,
    pub seed: u64,
    pub source: usize,
    pub geometry1: ViewGeometry,
    pub geometry2: ViewGeometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub k: usize,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format {
                what: "manifest",
                reason: format!("unsupported version {}", m.version),
            });
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

/// Sub-volume of `round-down(fraction * dims)` voxels starting at `anchor`.
/// The origin moves so every kept voxel keeps its world position.
pub fn crop_volume(vol: &Volume, fraction: [f64; 3], anchor: [usize; 3]) -> Result<Volume> {
    let mut dims = [0usize; 3];
    for a in 0..3 {
        if !(fraction[a] > 0.0 && fraction[a] <= 1.0) {
            return Err(Error::invalid(format!("crop fraction {} outside (0, 1]", fraction[a])));
        }
        dims[a] = (fraction[a] * vol.dims[a] as f64).floor() as usize;
        if dims[a] == 0 {
            return Err(Error::invalid(format!(
                "crop fraction {} leaves no voxels on axis {a} of {}",
                fraction[a], vol.dims[a]
            )));
        }
        if anchor[a] + dims[a] > vol.dims[a] {
            return Err(Error::invalid(format!("crop anchor {anchor:?} out of range")));
        }
    }
    let mut data = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let start = vol.index(anchor[0], anchor[1] + y, anchor[2] + z);
            data.extend_from_slice(&vol.data[start..start + dims[0]]);
        }
    }
    Ok(Volume {
        dims,
        spacing: vol.spacing,
        origin: vol.voxel_center(anchor),
        data,
    })
}

/// SplitMix64 finalizer; decorrelates consecutive sample indices.
fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_seed(base: u64, index: usize) -> u64 {
    mix_seed(base ^ mix_seed(index as u64))
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Everything needed to write one sample.
#[derive(Debug, Clone)]
pub struct SampleData {
    pub geometry1: ViewGeometry,
    pub geometry2: ViewGeometry,
    pub crop: Option<CropRecord>,
    pub view1: Vec<f64>,
    pub view2: Vec<f64>,
    pub matrix: CorrespondenceMatrix,
}

/// Draws geometries and crop for one sample from its seed.
pub fn draw_sample_setup(
    vol: &Volume,
    var: &VariationSpec,
    seed: u64,
) -> Result<(ViewGeometry, ViewGeometry, Option<CropRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::with_capacity(2);
    for ranges in [&var.view1_angles_rad, &var.view2_angles_rad] {
        let rot = [draw(&mut rng, ranges[0]), draw(&mut rng, ranges[1]), draw(&mut rng, ranges[2])];
        let sd = draw(&mut rng, var.source_distance_mm);
        views.push(match var.mode {
            ProjectionMode::Parallel => ViewGeometry::parallel(rot, var.detector),
            ProjectionMode::Cone => ViewGeometry::cone(rot, sd, var.detector),
        });
    }
    let crop = if var.crop.enabled {
        let frac: [f64; 3] = std::array::from_fn(|_| draw(&mut rng, var.crop.fraction));
        let dims: [usize; 3] =
            std::array::from_fn(|a| ((frac[a] * vol.dims[a] as f64).floor() as usize).max(1));
        let offset = std::array::from_fn(|a| rng.gen_range(0..=vol.dims[a] - dims[a]));
        Some(CropRecord { offset, dims })
    } else {
        None
    };
    let g2 = views.pop().unwrap();
    let g1 = views.pop().unwrap();
    Ok((g1, g2, crop))
}

fn apply_crop(vol: &Volume, crop: &Option<CropRecord>) -> Result<Volume> {
    match crop {
        None => Ok(vol.clone()),
        Some(c) => {
            let frac = std::array::from_fn(|a| c.dims[a] as f64 / vol.dims[a] as f64);
            let out = crop_volume(vol, frac, c.offset)?;
            debug_assert_eq!(out.dims, c.dims);
            Ok(out)
        }
    }
}

/// Renders one sample from explicit geometries and crop.
pub fn render_sample(
    vol: &Volume,
    g1: &ViewGeometry,
    g2: &ViewGeometry,
    crop: &Option<CropRecord>,
    k: usize,
) -> Result<SampleData> {
    let vol = apply_crop(vol, crop)?;
    let view1 = render_drr(&vol, g1)?.pixels;
    let view2 = render_drr(&vol, g2)?.pixels;
    let matrix = normalize(&generate_correspondence(&vol, g1, g2, k)?.matrix);
    Ok(SampleData {
        geometry1: g1.clone(),
        geometry2: g2.clone(),
        crop: crop.clone(),
        view1,
        view2,
        matrix,
    })
}

pub fn generate_sample(vol: &Volume, var: &VariationSpec, k: usize, seed: u64) -> Result<SampleData> {
    let (g1, g2, crop) = draw_sample_setup(vol, var, seed)?;
    render_sample(vol, &g1, &g2, &crop, k)
}

fn write_sample(out_dir: &Path, id: &str, data: &SampleData, det: &Detector) -> Result<[String; 3]> {
    let names = [
        format!("samples/{id}_v1.drr"),
        format!("samples/{id}_v2.drr"),
        format!("samples/{id}_corr.xcorr"),
    ];
    save_drr(&data.view1, det.nu, det.nv, &out_dir.join(&names[0]))?;
    save_drr(&data.view2, det.nu, det.nv, &out_dir.join(&names[1]))?;
    data.matrix.save(&out_dir.join(&names[2]))?;
    Ok(names)
}

/// Split counts: validation and test are rounded down, train takes the rest.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let val = (fractions[1] * n as f64).floor() as usize;
    let test = ((fractions[2] * n as f64).floor() as usize).min(n - val);
    [n - val - test, val, test]
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}

/// Generates, writes, and indexes every sample. Samples that fail are
/// logged and skipped.
pub fn generate_dataset(
    sources: &[VolumeSource],
    var: &VariationSpec,
    k: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    if sources.is_empty() {
        return Err(Error::invalid("dataset generation needs at least one volume"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    var.validate()?;
    var.detector.binned(k)?;
    fs::create_dir_all(out_dir.join("samples")).map_err(|e| Error::io(out_dir, e))?;

    let jobs: Vec<(usize, usize)> = (0..sources.len())
        .flat_map(|s| (0..var.pairs_per_volume).map(move |p| (s, p)))
        .collect();
    let results: Vec<Result<SampleRecord>> = jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(source, _))| {
            let id = format!("{index:06}");
            let seed = sample_seed(var.seed, index);
            let (vol, label) = sources[source].materialize()?;
            let data = generate_sample(&vol, var, k, seed)?;
            let [view1, view2, corr] = write_sample(out_dir, &id, &data, &var.detector)?;
            Ok(SampleRecord {
                id,
                view1,
                view2,
                corr,
                label,
                split: Split::Train,
                seed,
                source,
                geometry1: data.geometry1,
                geometry2: data.geometry2,
                crop: data.crop,
            })
        })
        .collect();

    let mut samples = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => log::warn!("skipping sample {index}: {e}"),
        }
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));

    let counts = split_counts(samples.len(), var.split);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(var.seed ^ 0x5EED_5B11)));
    for (rank, &i) in order.iter().enumerate() {
        samples[i].split = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        k,
        samples,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&manifest_path(out_dir), json.as_bytes())?;
    Ok(manifest)
}

/// Outcome of [`validate_dataset`].
#[derive(Debug, Clone, Default)]
pub struct ValidationSummary {
    pub checked: usize,
    pub failures: Vec<String>,
}

/// Re-derives a deterministic subset (every `1/fraction`-th sample) and
/// checks that the stored matrix is reproduced bit-exactly, that swapping
/// the views yields its transpose, and that its support is backed by voxel
/// footprints.
pub fn validate_dataset(
    dir: &Path,
    manifest: &Manifest,
    sources: &[VolumeSource],
    fraction: f64,
) -> Result<ValidationSummary> {
    let stride = (1.0 / fraction.clamp(1e-6, 1.0)).round().max(1.0) as usize;
    let mut summary = ValidationSummary::default();
    for rec in manifest.samples.iter().step_by(stride) {
        summary.checked += 1;
        let stored = CorrespondenceMatrix::load(&dir.join(&rec.corr))?;
        let src = sources.get(rec.source).ok_or_else(|| {
            Error::invalid(format!("sample {} refers to missing source {}", rec.id, rec.source))
        })?;
        let (vol, _) = src.materialize()?;
        let fwd = render_sample(&vol, &rec.geometry1, &rec.geometry2, &rec.crop, manifest.k)?;
        let swapped = render_sample(&vol, &rec.geometry2, &rec.geometry1, &rec.crop, manifest.k)?;
        let as_stored = |m: &CorrespondenceMatrix| -> Vec<(u32, u32, f32)> {
            m.entries.iter().map(|&(i, j, v)| (i, j, v as f32)).collect()
        };
        let stored_f32 = as_stored(&stored);
        if as_stored(&fwd.matrix) != stored_f32 {
            summary.failures.push(format!("{}: stored matrix not reproduced", rec.id));
        }
        if as_stored(&swapped.matrix.transpose()) != stored_f32 {
            summary.failures.push(format!("{}: transpose symmetry violated", rec.id));
        }
        let support: std::collections::HashSet<(u32, u32)> =
            fwd.matrix.entries.iter().map(|e| (e.0, e.1)).collect();
        if stored.entries.iter().any(|e| !support.contains(&(e.0, e.1))) {
            summary.failures.push(format!("{}: entry without footprint support", rec.id));
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::random_limb;

    #[test]
    fn crop_cases() {
        let data: Vec<f64> = (0..64).map(|i| i as f64 * 0.001).collect();
        let vol = Volume::new([4, 4, 4], [1.0, 2.0, 0.5], [-3.0, 1.0, 2.0], data).unwrap();
        assert_eq!(crop_volume(&vol, [1.0; 3], [0; 3]).unwrap(), vol);

        let c = crop_volume(&vol, [0.5; 3], [0; 3]).unwrap();
        assert_eq!(c.dims, [2, 2, 2]);
        assert_eq!(c.get(1, 1, 1), vol.get(1, 1, 1));

        let c = crop_volume(&vol, [0.5; 3], [1, 2, 1]).unwrap();
        assert_eq!(c.voxel_center([1, 0, 1]), vol.voxel_center([2, 2, 2]));
        assert_eq!(c.get(1, 0, 1), vol.get(2, 2, 2));

        assert!(crop_volume(&vol, [0.1, 1.0, 1.0], [0; 3]).is_err());
        assert!(crop_volume(&vol, [0.5; 3], [3, 0, 0]).is_err());
    }

    #[test]
    fn split_rounding() {
        assert_eq!(split_counts(10, [0.6, 0.1, 0.3]), [6, 1, 3]);
        assert_eq!(split_counts(7, [0.6, 0.1, 0.3]), [5, 0, 2]);
        assert_eq!(split_counts(0, [0.6, 0.1, 0.3]), [0, 0, 0]);
    }

    pub(crate) fn small_variation() -> VariationSpec {
        VariationSpec {
            mode: ProjectionMode::Cone,
            view1_angles_rad: [[-0.2, 0.2], [-0.2, 0.2], [0.0, 0.0]],
            view2_angles_rad: [[-0.2, 0.2], [1.3, 1.8], [0.0, 0.0]],
            source_distance_mm: [60.0, 80.0],
            detector: Detector {
                nu: 16,
                nv: 16,
                du: 1.5,
                dv: 1.5,
                distance: 30.0,
            },
            crop: CropSpec {
                enabled: true,
                fraction: [0.7, 1.0],
            },
            pairs_per_volume: 3,
            seed: 11,
            split: [0.6, 0.1, 0.3],
        }
    }

    #[test]
    fn three_pairs_write_nine_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = random_limb([16, 16, 16], [1.0; 3], 5, Some(true));
        let m = generate_dataset(&[VolumeSource::Phantom(spec.clone())], &small_variation(), 4, dir.path())
            .unwrap();
        assert_eq!(m.samples.len(), 3);
        let files = fs::read_dir(dir.path().join("samples")).unwrap().count();
        assert_eq!(files, 9);
        assert!(manifest_path(dir.path()).exists());
        assert!(m.samples.iter().all(|s| s.label == Some(true)));
        let first = fs::read(manifest_path(dir.path())).unwrap();

        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(&[VolumeSource::Phantom(spec.clone())], &small_variation(), 4, dir2.path()).unwrap();
        assert_eq!(first, fs::read(manifest_path(dir2.path())).unwrap());

        let back = Manifest::load(&manifest_path(dir.path())).unwrap();
        assert_eq!(back, m);
        let summary =
            validate_dataset(dir.path(), &m, &[VolumeSource::Phantom(spec)], 1.0).unwrap();
        assert_eq!(summary.checked, 3);
        assert!(summary.failures.is_empty(), "{:?}", summary.failures);
    }

    #[test]
    fn regenerating_one_sample_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = random_limb([16, 16, 16], [1.0; 3], 9, None);
        let m = generate_dataset(&[VolumeSource::Phantom(spec.clone())], &small_variation(), 4, dir.path())
            .unwrap();
        let rec = &m.samples[2];
        assert_eq!(rec.label, None);
        let vol = make_phantom(&spec).unwrap();
        let again = render_sample(&vol, &rec.geometry1, &rec.geometry2, &rec.crop, 4).unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_sample(d2.path(), &rec.id, &again, &small_variation().detector).unwrap();
        for name in [&rec.view1, &rec.view2, &rec.corr] {
            assert_eq!(fs::read(dir.path().join(name)).unwrap(), fs::read(d2.path().join(name)).unwrap());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(&[], &small_variation(), 4, dir.path()).is_err());
        let mut v = small_variation();
        v.pairs_per_volume = 0;
        assert!(v.validate().is_err());
        let mut v = small_variation();
        v.view1_angles_rad[0] = [1.0, -1.0];
        assert!(v.validate().is_err());
        let src = [VolumeSource::Volume(Volume::zeros([8, 8, 8], [1.0; 3]))];
        assert!(generate_dataset(&src, &small_variation(), 3, dir.path()).is_err());
    }
}
