//! Attenuation volumes: storage, file I/O, air thresholding and mean-pool
//! downsampling.
//!
//! Voxel `(x, y, z)` lives at linear index `x + nx * (y + ny * z)` and its
//! center sits at `origin + (x, y, z) * spacing` in world millimetres.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear attenuation of water in mm⁻¹ (about 60 keV), used for HU input.
pub const MU_WATER: f64 = 0.02;

/// Default non-air threshold in mm⁻¹.
pub const DEFAULT_AIR_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], data: Vec<f64>) -> Result<Self> {
        let vol = Volume {
            dims,
            spacing,
            origin,
            data,
        };
        vol.validate()?;
        Ok(vol)
    }

    /// All-air volume whose center sits at the world origin.
    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        let origin = centered_origin(dims, spacing);
        Volume {
            dims,
            spacing,
            origin,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("volume dims must be >= 1, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "volume spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("volume origin must be finite"));
        }
        if self.data.len() != self.len() {
            return Err(Error::invalid(format!(
                "volume payload has {} voxels, dims {:?} need {}",
                self.data.len(),
                self.dims,
                self.len()
            )));
        }
        check_attenuation(&self.data)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// Value at integer coordinates, zero outside the grid.
    #[inline]
    pub fn get_padded(&self, x: isize, y: isize, z: isize) -> f64 {
        if x < 0 || y < 0 || z < 0 {
            return 0.0;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            return 0.0;
        }
        self.get(x, y, z)
    }

    pub fn voxel_center(&self, voxel: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + voxel[a] as f64 * self.spacing[a])
    }

    /// World position of the geometric center of the grid.
    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| {
            self.origin[a] + 0.5 * (self.dims[a] as f64 - 1.0) * self.spacing[a]
        })
    }

    /// Outer faces of the voxel grid, `(low, high)` per axis.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let lo = std::array::from_fn(|a| self.origin[a] - 0.5 * self.spacing[a]);
        let hi = std::array::from_fn(|a| {
            self.origin[a] + (self.dims[a] as f64 - 0.5) * self.spacing[a]
        });
        (lo, hi)
    }

    /// Largest distance from `point` to any corner of the grid.
    pub fn max_corner_distance(&self, point: [f64; 3]) -> f64 {
        let (lo, hi) = self.bounds();
        let mut sq = 0.0;
        for a in 0..3 {
            let d = (point[a] - lo[a]).abs().max((hi[a] - point[a]).abs());
            sq += d * d;
        }
        sq.sqrt()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, factor: f64) -> Volume {
        Volume {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Copy of the grid metadata with every voxel zeroed except `voxel`.
    pub fn isolate_voxel(&self, voxel: [usize; 3]) -> Volume {
        let mut data = vec![0.0; self.len()];
        let idx = self.index(voxel[0], voxel[1], voxel[2]);
        data[idx] = self.data[idx];
        Volume {
            data,
            ..self.clone()
        }
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Origin that centers a grid of `dims` voxels on the world origin.
pub fn centered_origin(dims: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| -0.5 * (dims[a] as f64 - 1.0) * spacing[a])
}

fn check_attenuation(data: &[f64]) -> Result<()> {
    for (index, &v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "volume",
                index,
            });
        }
        if v < 0.0 {
            return Err(Error::invalid(format!(
                "negative attenuation {v} at voxel index {index}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelMask {
    pub dims: [usize; 3],
    pub bits: Vec<bool>,
}

impl VoxelMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Linear indices of the set voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Marks voxels whose attenuation strictly exceeds `tau`.
pub fn threshold_air(vol: &Volume, tau: f64) -> VoxelMask {
    VoxelMask {
        dims: vol.dims,
        bits: vol.data.iter().map(|&v| v > tau).collect(),
    }
}

/// Mean-pools `k`×`k`×`k` blocks. Dimensions that are not a multiple of `k`
/// are zero-padded at the high end first.
pub fn downsample(vol: &Volume, k: usize) -> Result<Volume> {
    if k == 0 {
        return Err(Error::invalid("downsample factor must be >= 1"));
    }
    if k == 1 {
        return Ok(vol.clone());
    }
    let out_dims: [usize; 3] = std::array::from_fn(|a| vol.dims[a].div_ceil(k));
    let block = (k * k * k) as f64;
    let plane = out_dims[0] * out_dims[1];
    let data: Vec<f64> = (0..out_dims.iter().product::<usize>())
        .into_par_iter()
        .map(|i| {
            let (ox, oy, oz) = (i % out_dims[0], (i / out_dims[0]) % out_dims[1], i / plane);
            let mut sum = 0.0;
            for z in oz * k..((oz + 1) * k).min(vol.dims[2]) {
                for y in oy * k..((oy + 1) * k).min(vol.dims[1]) {
                    for x in ox * k..((ox + 1) * k).min(vol.dims[0]) {
                        sum += vol.get(x, y, z);
                    }
                }
            }
            sum / block
        })
        .collect();
    let spacing = std::array::from_fn(|a| vol.spacing[a] * k as f64);
    let origin = std::array::from_fn(|a| vol.origin[a] + 0.5 * (k as f64 - 1.0) * vol.spacing[a]);
    Ok(Volume {
        dims: out_dims,
        spacing,
        origin,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    #[serde(rename = "mu")]
    Mu,
    #[serde(rename = "HU")]
    Hounsfield,
}

/// JSON sidecar describing a raw volume payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub units: Units,
    pub dtype: String,
    /// Payload location relative to the header, used by header-first files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_file: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    /// `path` is the payload; the header lives at `path` + `.json`.
    RawF32,
    /// `path` is the JSON header; its `data_file` names the payload.
    HeaderFirst,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn hu_to_mu(hu: f64) -> f64 {
    (MU_WATER * (1.0 + hu / 1000.0)).max(0.0)
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume> {
    let (header_path, payload_path) = match format {
        VolumeFormat::RawF32 => (sidecar_path(path), path.to_path_buf()),
        VolumeFormat::HeaderFirst => {
            let header = read_header(path)?;
            let data_file = header.data_file.ok_or_else(|| Error::Format {
                what: "volume header",
                reason: "header-first volume needs a data_file field".into(),
            })?;
            let dir = path.parent().unwrap_or(Path::new("."));
            (path.to_path_buf(), dir.join(data_file))
        }
    };
    let header = read_header(&header_path)?;
    if header.dtype != "f32le" {
        return Err(Error::Format {
            what: "volume header",
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format {
            what: "volume payload",
            reason: format!(
                "{} bytes for dims {:?}, expected {}",
                bytes.len(),
                header.dims,
                n * 4
            ),
        });
    }
    let mut data = Vec::with_capacity(n);
    for (index, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "volume payload",
                index,
            });
        }
        data.push(match header.units {
            Units::Mu => v,
            Units::Hounsfield => hu_to_mu(v),
        });
    }
    Volume::new(header.dims, header.spacing_mm, header.origin_mm, data)
}

fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Writes the payload to `path` (f32, units mu) and its sidecar header.
pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    let header = VolumeHeader {
        dims: vol.dims,
        spacing_mm: vol.spacing,
        origin_mm: vol.origin,
        units: Units::Mu,
        dtype: "f32le".into(),
        data_file: None,
    };
    let mut bytes = Vec::with_capacity(vol.len() * 4);
    for &v in &vol.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &bytes)?;
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    write_file(&sidecar_path(path), json.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], data: Vec<f64>) -> Volume {
        Volume::new(dims, [1.0; 3], [0.0; 3], data).unwrap()
    }

    fn write_raw(dir: &Path, name: &str, header: &str, values: &[f32]) -> PathBuf {
        let path = dir.join(name);
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, bytes).unwrap();
        fs::write(sidecar_path(&path), header).unwrap();
        path
    }

    #[test]
    fn load_mu_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let vals = [0.0f32, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07];
        let header = r#"{"dims":[2,2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"units":"mu","dtype":"f32le"}"#;
        let p = write_raw(dir.path(), "v.raw", header, &vals);
        let v = load_volume(&p, VolumeFormat::RawF32).unwrap();
        assert_eq!(v.dims, [2, 2, 2]);
        for (a, b) in v.data.iter().zip(vals) {
            assert_eq!(*a, b as f64);
        }
    }

    #[test]
    fn load_hu_converts() {
        let dir = tempfile::tempdir().unwrap();
        let header = r#"{"dims":[3,1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"units":"HU","dtype":"f32le"}"#;
        let p = write_raw(dir.path(), "hu.raw", header, &[-1000.0, 0.0, -3000.0]);
        let v = load_volume(&p, VolumeFormat::RawF32).unwrap();
        assert_eq!(v.data[0], 0.0);
        assert!((v.data[1] - 0.02).abs() < 1e-15);
        assert_eq!(v.data[2], 0.0);
    }

    #[test]
    fn load_header_first() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = [0.5f32].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("one.bin"), payload).unwrap();
        let header = r#"{"dims":[1,1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"units":"mu","dtype":"f32le","data_file":"one.bin"}"#;
        let hp = dir.path().join("one.json");
        fs::write(&hp, header).unwrap();
        let v = load_volume(&hp, VolumeFormat::HeaderFirst).unwrap();
        assert_eq!(v.data, vec![0.5]);
    }

    #[test]
    fn load_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_volume(&dir.path().join("nope.raw"), VolumeFormat::RawF32);
        assert!(matches!(missing, Err(Error::Io { .. })));

        let header = r#"{"dims":[2,2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"units":"mu","dtype":"f32le"}"#;
        let short = write_raw(dir.path(), "short.raw", header, &[0.0; 7]);
        assert!(matches!(
            load_volume(&short, VolumeFormat::RawF32),
            Err(Error::Format { .. })
        ));

        let mut vals = [0.0f32; 8];
        vals[5] = f32::NAN;
        let nan = write_raw(dir.path(), "nan.raw", header, &vals);
        assert!(matches!(
            load_volume(&nan, VolumeFormat::RawF32),
            Err(Error::NonFinite { index: 5, .. })
        ));

        let bad = write_raw(dir.path(), "bad.raw", "{\"dims\": [2,2", &[0.0; 8]);
        let err = load_volume(&bad, VolumeFormat::RawF32).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..24).map(|i| (i as f32 * 0.013f32) as f64).collect();
        let v = Volume::new([2, 3, 4], [0.5, 1.0, 2.0], [-1.0, 0.25, 3.0], data).unwrap();
        let p = dir.path().join("rt.vol");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p, VolumeFormat::RawF32).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn threshold_cases() {
        let zero = vol([2, 2, 2], vec![0.0; 8]);
        assert_eq!(threshold_air(&zero, DEFAULT_AIR_THRESHOLD).count(), 0);

        let mut d = vec![0.0; 8];
        d[3] = 0.02;
        let one = vol([2, 2, 2], d);
        let m = threshold_air(&one, DEFAULT_AIR_THRESHOLD);
        assert_eq!(m.indices(), vec![3]);

        let mixed = vol([2, 1, 1], vec![0.0, 0.01]);
        assert_eq!(threshold_air(&mixed, 0.0).bits, vec![false, true]);
    }

    #[test]
    fn downsample_cases() {
        let v = vol([2, 2, 2], vec![0.5; 8]);
        assert_eq!(downsample(&v, 1).unwrap(), v);

        let d = downsample(&v, 2).unwrap();
        assert_eq!(d.dims, [1, 1, 1]);
        assert_eq!(d.spacing, [2.0; 3]);
        assert_eq!(d.data, vec![0.5]);
        assert_eq!(d.center(), v.center());

        let mut data = vec![0.0; 8];
        data[6] = 0.8;
        let d = downsample(&vol([2, 2, 2], data), 2).unwrap();
        assert!((d.data[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn downsample_pads_high_end() {
        let v = vol([3, 2, 2], vec![0.6; 12]);
        let d = downsample(&v, 2).unwrap();
        assert_eq!(d.dims, [2, 1, 1]);
        assert!((d.data[0] - 0.6).abs() < 1e-15);
        assert!((d.data[1] - 0.3).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn volume_strategy() -> impl Strategy<Value = (Volume, usize)> {
            (1usize..4, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(a, b, c, k)| {
                let dims = [a * k, b * k, c * k];
                let n = dims.iter().product::<usize>();
                proptest::collection::vec(0.0f64..1.0, n)
                    .prop_map(move |data| (vol(dims, data), k))
            })
        }

        proptest! {
            #[test]
            fn downsample_preserves_mass((v, k) in volume_strategy()) {
                let d = downsample(&v, k).unwrap();
                let lhs = d.total() * (k * k * k) as f64;
                let rhs = v.total();
                prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1e-300));
            }

            #[test]
            fn threshold_is_monotone(data in proptest::collection::vec(0.0f64..0.05, 27),
                                     t1 in 0.0f64..0.05, t2 in 0.0f64..0.05) {
                let v = vol([3, 3, 3], data);
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                let a = threshold_air(&v, lo);
                let b = threshold_air(&v, hi);
                for (x, y) in a.bits.iter().zip(&b.bits) {
                    prop_assert!(!(*y && !*x));
                }
            }
        }
    }
}
