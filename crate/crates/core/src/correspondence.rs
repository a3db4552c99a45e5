//! Many-to-many correspondence between two views.
//!
//! Every non-air voxel `v` yields projections `p1`, `p2` (one per view); its
//! contribution is the outer product `p1 p2ᵀ` and the view-pair matrix is
//! the elementwise maximum of those contributions over all voxels. Pixel
//! indices are flattened `u`-fastest.
//!
//! The optimized path never builds dense per-voxel products: each voxel's
//! footprint has at most four entries per view, so it contributes at most
//! sixteen candidates to a sparse max-map.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ViewGeometry;
use crate::image::{save_pgm8, DrrImage};
use crate::projector::{footprint_in_frame, project_voxel_oracle, render_drr};
use crate::volume::{downsample, threshold_air, write_file, Volume, DEFAULT_AIR_THRESHOLD};

/// Default ground-truth binarization threshold, as a fraction of the max.
pub const DEFAULT_GT_THRESHOLD: f64 = 0.05;
/// Downsampling factor giving a 16×16 patch grid on a 256² detector.
pub const DEFAULT_K: usize = 16;

/// Voxel budget of [`generate_correspondence_oracle`].
pub const ORACLE_VOXEL_LIMIT: usize = 10_000;

pub const MAGIC: &[u8; 6] = b"XCORR1";

/// Sparse nonnegative matrix in coordinate form, sorted by `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(u32, u32, f64)>,
    /// Maximum before normalization; `None` for a raw matrix.
    pub norm_max: Option<f64>,
}

impl CorrespondenceMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CorrespondenceMatrix {
            rows,
            cols,
            entries: Vec::new(),
            norm_max: None,
        }
    }

    /// Builds from unsorted triples; zero entries are dropped.
    pub fn from_triples(rows: usize, cols: usize, mut entries: Vec<(u32, u32, f64)>) -> Self {
        entries.retain(|e| e.2 != 0.0);
        entries.sort_unstable_by_key(|e| (e.0, e.1));
        CorrespondenceMatrix {
            rows,
            cols,
            entries,
            norm_max: None,
        }
    }

    pub fn from_dense(rows: usize, cols: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), rows * cols);
        let entries = dense
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(k, &v)| ((k / cols) as u32, (k % cols) as u32, v))
            .collect();
        CorrespondenceMatrix {
            rows,
            cols,
            entries,
            norm_max: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries
            .binary_search_by_key(&(i as u32, j as u32), |e| (e.0, e.1))
            .map(|k| self.entries[k].2)
            .unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().map(|e| e.2).fold(0.0, f64::max)
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for &(i, j, v) in &self.entries {
            out[i as usize * self.cols + j as usize] = v;
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut t = CorrespondenceMatrix::from_triples(
            self.cols,
            self.rows,
            self.entries.iter().map(|&(i, j, v)| (j, i, v)).collect(),
        );
        t.norm_max = self.norm_max;
        t
    }

    pub fn validate(&self) -> Result<()> {
        for (k, &(i, j, v)) in self.entries.iter().enumerate() {
            if i as usize >= self.rows || j as usize >= self.cols {
                return Err(Error::invalid(format!("entry ({i}, {j}) outside {:?}", self.shape())));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "correspondence",
                    index: k,
                });
            }
            if v < 0.0 {
                return Err(Error::invalid(format!("negative correspondence at ({i}, {j})")));
            }
        }
        Ok(())
    }

    /// Binary file: magic `XCORR1`, flags u8 (bit 0: normalized), one pad
    /// byte, rows u32, cols u32, count u64, norm_max f64, then
    /// `(i u32, j u32, value f32)` triples sorted by `(i, j)`. Little endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut b = Vec::with_capacity(32 + 12 * self.entries.len());
        b.extend_from_slice(MAGIC);
        b.push(self.norm_max.is_some() as u8);
        b.push(0);
        b.extend_from_slice(&(self.rows as u32).to_le_bytes());
        b.extend_from_slice(&(self.cols as u32).to_le_bytes());
        b.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        b.extend_from_slice(&self.norm_max.unwrap_or(0.0).to_le_bytes());
        for &(i, j, v) in &self.entries {
            b.extend_from_slice(&i.to_le_bytes());
            b.extend_from_slice(&j.to_le_bytes());
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
        write_file(path, &b)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Format {
            what: "correspondence file",
            reason,
        };
        if b.len() < 32 || &b[..6] != MAGIC {
            return Err(bad(format!("{}: bad magic", path.display())));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let normalized = b[6] & 1 == 1;
        let rows = u32_at(8) as usize;
        let cols = u32_at(12) as usize;
        let count = u64::from_le_bytes(b[16..24].try_into().unwrap()) as usize;
        let norm_max = f64::from_le_bytes(b[24..32].try_into().unwrap());
        if b.len() != 32 + 12 * count {
            return Err(bad(format!("{count} entries need {} bytes, file has {}", 32 + 12 * count, b.len())));
        }
        let mut entries = Vec::with_capacity(count);
        for k in 0..count {
            let o = 32 + 12 * k;
            let v = f32::from_le_bytes(b[o + 8..o + 12].try_into().unwrap()) as f64;
            entries.push((u32_at(o), u32_at(o + 4), v));
        }
        if entries.windows(2).any(|w| (w[0].0, w[0].1) >= (w[1].0, w[1].1)) {
            return Err(bad("entries not strictly sorted by (i, j)".into()));
        }
        let m = CorrespondenceMatrix {
            rows,
            cols,
            entries,
            norm_max: normalized.then_some(norm_max),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("i,j,value\n");
        for &(i, j, v) in &self.entries {
            s.push_str(&format!("{i},{j},{v}\n"));
        }
        write_file(path, s.as_bytes())
    }

    /// 8-bit heatmap, one pixel per entry (rows down, cols across).
    pub fn save_heatmap(&self, path: &Path) -> Result<()> {
        save_pgm8(&self.to_dense(), self.cols, self.rows, path)
    }
}

/// Sparse outer product `p1 p2ᵀ` over the nonzero supports.
pub fn voxel_correspondence(p1: &[f64], p2: &[f64]) -> CorrespondenceMatrix {
    let nz2: Vec<(u32, f64)> = p2
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(j, &v)| (j as u32, v))
        .collect();
    let mut entries = Vec::new();
    for (i, &a) in p1.iter().enumerate() {
        if a != 0.0 {
            entries.extend(nz2.iter().map(|&(j, b)| (i as u32, j, a * b)));
        }
    }
    CorrespondenceMatrix {
        rows: p1.len(),
        cols: p2.len(),
        entries,
        norm_max: None,
    }
}

type MaxMap = HashMap<u64, f64>;

#[inline]
fn key(i: u32, j: u32) -> u64 {
    (i as u64) << 32 | j as u64
}

fn merge_max(mut a: MaxMap, b: MaxMap) -> MaxMap {
    if a.len() < b.len() {
        return merge_max(b, a);
    }
    for (k, v) in b {
        a.entry(k).and_modify(|x| *x = x.max(v)).or_insert(v);
    }
    a
}

fn map_to_matrix(rows: usize, cols: usize, map: MaxMap) -> CorrespondenceMatrix {
    CorrespondenceMatrix::from_triples(
        rows,
        cols,
        map.into_iter()
            .map(|(k, v)| ((k >> 32) as u32, k as u32, v))
            .collect(),
    )
}

/// Elementwise maximum over a stream of equally shaped matrices.
pub fn aggregate_max<I>(rows: usize, cols: usize, stream: I) -> Result<CorrespondenceMatrix>
where
    I: IntoIterator<Item = CorrespondenceMatrix>,
{
    let mut acc = MaxMap::new();
    for m in stream {
        if m.shape() != (rows, cols) {
            return Err(Error::Shape {
                expected: (rows, cols),
                got: m.shape(),
            });
        }
        for (i, j, v) in m.entries {
            acc.entry(key(i, j)).and_modify(|x| *x = x.max(v)).or_insert(v);
        }
    }
    Ok(map_to_matrix(rows, cols, acc))
}

/// Two coarse DRRs and their correspondence matrix.
#[derive(Debug, Clone)]
pub struct CorrespondenceResult {
    pub view1: DrrImage,
    pub view2: DrrImage,
    pub matrix: CorrespondenceMatrix,
}

/// Geometry with its detector binned by `k` and, unless already pinned, its
/// isocenter fixed to the fine volume's center so padding during
/// downsampling cannot shift the view.
pub fn coarse_geometry(vol: &Volume, geom: &ViewGeometry, k: usize) -> Result<ViewGeometry> {
    let iso = geom.isocenter_for(vol);
    Ok(geom
        .clone()
        .with_detector(geom.detector.binned(k)?)
        .with_isocenter(iso))
}

fn coarse_inputs(
    vol: &Volume,
    g1: &ViewGeometry,
    g2: &ViewGeometry,
    k: usize,
) -> Result<(Volume, ViewGeometry, ViewGeometry)> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    g1.validate(vol)?;
    g2.validate(vol)?;
    let coarse = downsample(vol, k)?;
    let c1 = coarse_geometry(vol, g1, k)?;
    let c2 = coarse_geometry(vol, g2, k)?;
    c1.validate(&coarse)?;
    c2.validate(&coarse)?;
    Ok((coarse, c1, c2))
}

/// Full ground-truth pipeline at patch resolution `k`: downsample, render
/// both views, threshold air, project every non-air voxel and reduce the
/// per-voxel outer products by maximum.
pub fn generate_correspondence(
    vol: &Volume,
    g1: &ViewGeometry,
    g2: &ViewGeometry,
    k: usize,
) -> Result<CorrespondenceResult> {
    let (coarse, c1, c2) = coarse_inputs(vol, g1, g2, k)?;
    let view1 = render_drr(&coarse, &c1)?;
    let view2 = render_drr(&coarse, &c2)?;
    let matrix = correspondence_from_footprints(&coarse, &c1, &c2);
    Ok(CorrespondenceResult {
        view1,
        view2,
        matrix,
    })
}

/// Sparse max-reduction over voxel footprints; `vol` is used as is.
pub fn correspondence_from_footprints(
    vol: &Volume,
    g1: &ViewGeometry,
    g2: &ViewGeometry,
) -> CorrespondenceMatrix {
    let (f1, f2) = (g1.frame(vol), g2.frame(vol));
    let (n1, n2) = (g1.detector.nu, g2.detector.nu);
    let voxels = threshold_air(vol, DEFAULT_AIR_THRESHOLD).indices();
    let map = voxels
        .par_iter()
        .fold(MaxMap::new, |mut acc, &idx| {
            let vx = vol.coords(idx);
            let a = footprint_in_frame(vol, vx, g1, &f1);
            let b = footprint_in_frame(vol, vx, g2, &f2);
            for ea in &a.entries {
                let i = (ea.iu + n1 * ea.iv) as u32;
                for eb in &b.entries {
                    let j = (eb.iu + n2 * eb.iv) as u32;
                    let v = ea.weight * eb.weight;
                    acc.entry(key(i, j)).and_modify(|x| *x = x.max(v)).or_insert(v);
                }
            }
            acc
        })
        .reduce(MaxMap::new, merge_max);
    map_to_matrix(g1.detector.pixels(), g2.detector.pixels(), map)
}

/// Reference implementation: dense Joseph images of each isolated voxel,
/// dense outer products, dense elementwise maximum.
pub fn generate_correspondence_oracle(
    vol: &Volume,
    g1: &ViewGeometry,
    g2: &ViewGeometry,
    k: usize,
) -> Result<CorrespondenceMatrix> {
    let (coarse, c1, c2) = coarse_inputs(vol, g1, g2, k)?;
    if coarse.len() > ORACLE_VOXEL_LIMIT {
        return Err(Error::invalid(format!(
            "oracle limited to {ORACLE_VOXEL_LIMIT} voxels, volume has {}",
            coarse.len()
        )));
    }
    let (rows, cols) = (c1.detector.pixels(), c2.detector.pixels());
    let mut dense = vec![0.0; rows * cols];
    for idx in threshold_air(&coarse, DEFAULT_AIR_THRESHOLD).indices() {
        let vx = coarse.coords(idx);
        let p1 = project_voxel_oracle(&coarse, vx, &c1)?.flatten();
        let p2 = project_voxel_oracle(&coarse, vx, &c2)?.flatten();
        for (i, &a) in p1.iter().enumerate() {
            let row = &mut dense[i * cols..(i + 1) * cols];
            for (cell, &b) in row.iter_mut().zip(&p2) {
                *cell = f64::max(*cell, a * b);
            }
        }
    }
    Ok(CorrespondenceMatrix::from_dense(rows, cols, &dense))
}

/// All pairwise matrices `(a, b)` with `a < b` for more than two views.
pub fn generate_pairwise(
    vol: &Volume,
    geoms: &[ViewGeometry],
    k: usize,
) -> Result<Vec<((usize, usize), CorrespondenceMatrix)>> {
    let mut out = Vec::new();
    for a in 0..geoms.len() {
        for b in a + 1..geoms.len() {
            let r = generate_correspondence(vol, &geoms[a], &geoms[b], k)?;
            out.push(((a, b), r.matrix));
        }
    }
    Ok(out)
}

/// Scales entries so the maximum is one; all-zero input is returned as is.
pub fn normalize(c: &CorrespondenceMatrix) -> CorrespondenceMatrix {
    if c.norm_max.is_some() {
        return c.clone();
    }
    let max = c.max();
    let entries = if max > 0.0 {
        c.entries.iter().map(|&(i, j, v)| (i, j, v / max)).collect()
    } else {
        c.entries.clone()
    };
    CorrespondenceMatrix {
        rows: c.rows,
        cols: c.cols,
        entries,
        norm_max: Some(max),
    }
}

/// Row-major positives: normalized entry strictly above `tau_gt`.
pub fn binarize(c: &CorrespondenceMatrix, tau_gt: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&tau_gt) {
        return Err(Error::invalid(format!("tau_gt must lie in [0, 1], got {tau_gt}")));
    }
    let n = normalize(c);
    let mut out = vec![false; c.rows * c.cols];
    for &(i, j, v) in &n.entries {
        out[i as usize * c.cols + j as usize] = v > tau_gt;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Detector;

    fn m(rows: usize, cols: usize, dense: &[f64]) -> CorrespondenceMatrix {
        CorrespondenceMatrix::from_dense(rows, cols, dense)
    }

    #[test]
    fn outer_product_cases() {
        let c = voxel_correspondence(&[0.0, 2.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(c.entries, vec![(1, 0, 2.0)]);
        assert_eq!(voxel_correspondence(&[0.0; 3], &[1.0, 2.0]).nnz(), 0);
        let c = voxel_correspondence(&[1.0, 0.0, 3.0], &[2.0, 5.0, 0.0, 1.0]);
        assert_eq!(c.nnz(), 2 * 3);
    }

    #[test]
    fn aggregate_cases() {
        let a = m(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let b = m(2, 2, &[0.0, 3.0, 0.0, 1.0]);
        let r = aggregate_max(2, 2, [a.clone(), b.clone()]).unwrap();
        assert_eq!(r.to_dense(), vec![1.0, 3.0, 0.0, 2.0]);
        assert_eq!(aggregate_max(2, 2, [a.clone()]).unwrap(), a);
        assert_eq!(aggregate_max(2, 2, [b, a.clone()]).unwrap(), r);
        assert_eq!(aggregate_max(2, 2, []).unwrap().nnz(), 0);
        assert!(aggregate_max(2, 3, [a]).is_err());
    }

    #[test]
    fn normalize_cases() {
        let n = normalize(&m(1, 2, &[2.0, 4.0]));
        assert_eq!(n.to_dense(), vec![0.5, 1.0]);
        assert_eq!(n.norm_max, Some(4.0));
        let z = normalize(&CorrespondenceMatrix::zeros(2, 2));
        assert_eq!(z.nnz(), 0);
        assert_eq!(z.norm_max, Some(0.0));
        assert_eq!(normalize(&n), n);
    }

    #[test]
    fn binarize_cases() {
        let c = m(1, 4, &[0.0, 0.01, 0.5, 1.0]);
        assert_eq!(binarize(&c, 0.0).unwrap(), vec![false, true, true, true]);
        assert_eq!(binarize(&c, 1.0).unwrap(), vec![false; 4]);
        assert_eq!(binarize(&c, 0.05).unwrap(), vec![false, false, true, true]);
        assert!(binarize(&c, 1.5).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = normalize(&m(2, 3, &[0.0, 0.5, 0.25, 1.0, 0.0, 0.125]));
        let p = dir.path().join("c.xcorr");
        c.save(&p).unwrap();
        assert_eq!(CorrespondenceMatrix::load(&p).unwrap(), c);
        let raw = m(1, 1, &[0.75]);
        raw.save(&p).unwrap();
        assert_eq!(CorrespondenceMatrix::load(&p).unwrap().norm_max, None);
        fs::write(&p, b"nope").unwrap();
        assert!(CorrespondenceMatrix::load(&p).is_err());
        c.save_csv(&dir.path().join("c.csv")).unwrap();
        let csv = fs::read_to_string(dir.path().join("c.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + c.nnz());
    }

    fn det(n: usize) -> Detector {
        Detector {
            nu: n,
            nv: n,
            du: 1.0,
            dv: 1.0,
            distance: 50.0,
        }
    }

    #[test]
    fn air_volume_gives_empty_matrix() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3]);
        let g = ViewGeometry::parallel([0.0; 3], det(4));
        let r = generate_correspondence(&v, &g, &g, 1).unwrap();
        assert_eq!(r.matrix.nnz(), 0);
        assert_eq!(r.matrix.shape(), (16, 16));
        assert!(r.view1.pixels.iter().all(|&p| p == 0.0));
        assert_eq!(generate_correspondence_oracle(&v, &g, &g, 1).unwrap().nnz(), 0);
    }

    #[test]
    fn single_voxel_oracle_is_outer_product() {
        let mut v = Volume::zeros([3, 3, 3], [1.0; 3]);
        v.data[13] = 0.7;
        let g1 = ViewGeometry::parallel([0.0; 3], det(3));
        let g2 = g1.clone().with_rotation_deg([0.0, 90.0, 0.0]);
        let c = generate_correspondence_oracle(&v, &g1, &g2, 1).unwrap();
        let p1 = project_voxel_oracle(&v, [1, 1, 1], &g1).unwrap().flatten();
        let p2 = project_voxel_oracle(&v, [1, 1, 1], &g2).unwrap().flatten();
        assert_eq!(c, voxel_correspondence(&p1, &p2));
    }

    #[test]
    fn oracle_guard() {
        let v = Volume::zeros([30, 30, 12], [1.0; 3]);
        let g = ViewGeometry::parallel([0.0; 3], det(4));
        assert!(generate_correspondence_oracle(&v, &g, &g, 1).is_err());
    }

    #[test]
    fn k_bins_shapes() {
        let mut v = Volume::zeros([8, 8, 8], [1.0; 3]);
        v.data.iter_mut().for_each(|x| *x = 0.02);
        let g = ViewGeometry::parallel([0.0; 3], det(8));
        let a = generate_correspondence(&v, &g, &g, 1).unwrap().matrix;
        let b = generate_correspondence(&v, &g, &g, 2).unwrap().matrix;
        assert_eq!(a.shape(), (64, 64));
        assert_eq!(b.shape(), (16, 16));
        assert!(generate_correspondence(&v, &g, &g, 3).is_err());
    }

    #[test]
    fn scaling_volume_scales_matrix_quadratically() {
        let data: Vec<f64> = (0..64).map(|i| 0.01 * ((i * 7) % 5) as f64).collect();
        let v = Volume::new([4, 4, 4], [1.0; 3], [0.0; 3], data).unwrap();
        let g1 = ViewGeometry::cone([0.1, 0.2, 0.0], 40.0, det(5));
        let g2 = ViewGeometry::cone([0.0, 1.3, 0.2], 40.0, det(5));
        let a = generate_correspondence(&v, &g1, &g2, 1).unwrap().matrix;
        let b = generate_correspondence(&v.scaled(3.0), &g1, &g2, 1).unwrap().matrix;
        assert_eq!(a.nnz(), b.nnz());
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!((x.0, x.1), (y.0, y.1));
            assert!((x.2 * 9.0 - y.2).abs() <= 1e-12 * y.2);
        }
    }

    #[test]
    fn pairwise_views() {
        let mut v = Volume::zeros([4, 4, 4], [1.0; 3]);
        v.data[21] = 0.05;
        let g = ViewGeometry::parallel([0.0; 3], det(4));
        let gs = [
            g.clone(),
            g.clone().with_rotation_deg([0.0, 90.0, 0.0]),
            g.with_rotation_deg([0.0, 0.0, 90.0]),
        ];
        let all = generate_pairwise(&v, &gs, 1).unwrap();
        let pairs: Vec<_> = all.iter().map(|p| p.0).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2)]);
        assert!(all.iter().all(|p| p.1.nnz() == 1));
    }
}
