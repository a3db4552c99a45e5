//! Detector images and their on-disk forms.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ViewGeometry;
use crate::volume::{sidecar_path, write_file};

/// A rendered radiograph. Pixels are stored `u`-fastest: index `iu + nu * iv`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrrImage {
    pub nu: usize,
    pub nv: usize,
    pub pixels: Vec<f64>,
    pub geometry: ViewGeometry,
}

pub const DRR_MAGIC: &[u8; 6] = b"XDRR1\0";

#[derive(Debug, Serialize, Deserialize)]
struct ImageSidecar {
    nu: usize,
    nv: usize,
    /// Value mapped to the top code of a PGM export.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<f64>,
    dtype: String,
    geometry: ViewGeometry,
}

impl DrrImage {
    pub fn zeros(geometry: ViewGeometry) -> Self {
        let (nu, nv) = (geometry.detector.nu, geometry.detector.nv);
        DrrImage {
            nu,
            nv,
            pixels: vec![0.0; nu * nv],
            geometry,
        }
    }

    #[inline]
    pub fn get(&self, iu: usize, iv: usize) -> f64 {
        self.pixels[iu + self.nu * iv]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().cloned().fold(0.0, f64::max)
    }

    /// Row-major flattening with `u` fastest.
    pub fn flatten(&self) -> Vec<f64> {
        self.pixels.clone()
    }

    /// Inverse of [`Self::flatten`].
    pub fn unflatten(values: Vec<f64>, geometry: ViewGeometry) -> Result<Self> {
        let (nu, nv) = (geometry.detector.nu, geometry.detector.nv);
        if values.len() != nu * nv {
            return Err(Error::Shape {
                expected: (nu, nv),
                got: (values.len(), 1),
            });
        }
        Ok(DrrImage {
            nu,
            nv,
            pixels: values,
            geometry,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.nu * self.nv
            || self.nu != self.geometry.detector.nu
            || self.nv != self.geometry.detector.nv
        {
            return Err(Error::invalid("image shape does not match its geometry"));
        }
        for (index, &p) in self.pixels.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite { what: "image", index });
            }
            if p < 0.0 {
                return Err(Error::invalid(format!("negative pixel at {index}")));
            }
        }
        Ok(())
    }

    /// 16-bit binary PGM scaled so that the image maximum maps to 65535. The
    /// scale is recorded in a JSON sidecar.
    pub fn save_pgm16(&self, path: &Path) -> Result<()> {
        let max = self.max();
        let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
        let mut bytes = format!("P5\n{} {}\n65535\n", self.nu, self.nv).into_bytes();
        for &p in &self.pixels {
            let code = (p * scale).round().clamp(0.0, 65535.0) as u16;
            bytes.extend_from_slice(&code.to_be_bytes());
        }
        write_file(path, &bytes)?;
        self.write_sidecar(path, Some(max), "u16be")
    }

    pub fn save_raw_f32(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .flat_map(|&p| (p as f32).to_le_bytes())
            .collect();
        write_file(path, &bytes)?;
        self.write_sidecar(path, None, "f32le")
    }

    pub fn load_raw_f32(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: ImageSidecar =
            serde_json::from_str(&text).map_err(|e| Error::json(side.display().to_string(), e))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let pixels = decode_f32(&bytes, meta.nu * meta.nv, "raw image")?;
        let img = DrrImage {
            nu: meta.nu,
            nv: meta.nv,
            pixels,
            geometry: meta.geometry,
        };
        img.validate()?;
        Ok(img)
    }

    fn write_sidecar(&self, path: &Path, max: Option<f64>, dtype: &str) -> Result<()> {
        let meta = ImageSidecar {
            nu: self.nu,
            nv: self.nv,
            max,
            dtype: dtype.into(),
            geometry: self.geometry.clone(),
        };
        let json = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
        write_file(&sidecar_path(path), json.as_bytes())
    }
}

/// Single-file image: magic, `nu`, `nv` (u32 LE), then f32 LE pixels. Used
/// for dataset samples, whose geometry lives in the manifest.
pub fn save_drr(pixels: &[f64], nu: usize, nv: usize, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(14 + pixels.len() * 4);
    bytes.extend_from_slice(DRR_MAGIC);
    bytes.extend_from_slice(&(nu as u32).to_le_bytes());
    bytes.extend_from_slice(&(nv as u32).to_le_bytes());
    for &p in pixels {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    write_file(path, &bytes)
}

/// Reads a single-file image written by [`save_drr`]: `(nu, nv, pixels)`.
pub fn load_drr(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 14 || &bytes[..6] != DRR_MAGIC {
        return Err(Error::Format {
            what: "drr image",
            reason: format!("{}: bad magic", path.display()),
        });
    }
    let nu = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let nv = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let pixels = decode_f32(&bytes[14..], nu * nv, "drr image")?;
    Ok((nu, nv, pixels))
}

fn decode_f32(bytes: &[u8], n: usize, what: &'static str) -> Result<Vec<f64>> {
    if bytes.len() != n * 4 {
        return Err(Error::Format {
            what,
            reason: format!("payload is {} bytes, expected {}", bytes.len(), n * 4),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

/// 8-bit PGM of a row-major `width`×`height` buffer, scaled by its max.
pub fn save_pgm8(values: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8));
    write_file(path, &bytes)
}
