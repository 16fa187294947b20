//! Region-feature matrices and the FMAT binary format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size       field
//! 0       4          magic "VCF1"
//! 4       4          u32 R (rows)
//! 8       4          u32 d (columns)
//! 12      4·R·d      f32 values, row-major
//! ..      16·R       index: R × (u64 image_id, u32 region_id, u32 category)
//! ```
//!
//! Storage is `f32`; accessors widen to `f64` for computation.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::{stream_rng, Stream};
use crate::scm::{SceneSample, ScmWorld};

pub const MAGIC: &[u8; 4] = b"VCF1";
const HEADER_LEN: usize = 12;
const INDEX_RECORD_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum FmatError {
    #[error("bad magic {0:?}, expected \"VCF1\"")]
    BadMagic([u8; 4]),
    #[error("truncated file: need {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },
    #[error("index mismatch: {0}")]
    IndexMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row key; `(image_id, region_id)` is unique within a set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionKey {
    pub image_id: u64,
    pub region_id: u32,
    pub category: u32,
}

impl RegionKey {
    pub fn new(image_id: u64, region_id: u32, category: u32) -> Self {
        Self {
            image_id,
            region_id,
            category,
        }
    }

    pub fn id(&self) -> (u64, u32) {
        (self.image_id, self.region_id)
    }
}

/// `R × d` region features with one [`RegionKey`] per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureSet {
    dim: usize,
    data: Vec<f32>,
    index: Vec<RegionKey>,
}

impl RegionFeatureSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            index: Vec::new(),
        }
    }

    pub fn new(dim: usize, data: Vec<f32>, index: Vec<RegionKey>) -> Result<Self, FmatError> {
        if data.len() != dim * index.len() {
            return Err(FmatError::IndexMismatch(format!(
                "{} values for {} rows of width {dim}",
                data.len(),
                index.len()
            )));
        }
        let mut seen = HashMap::with_capacity(index.len());
        for (row, k) in index.iter().enumerate() {
            if let Some(prev) = seen.insert(k.id(), row) {
                return Err(FmatError::IndexMismatch(format!(
                    "duplicate key (image {}, region {}) at rows {prev} and {row}",
                    k.image_id, k.region_id
                )));
            }
        }
        Ok(Self { dim, data, index })
    }

    /// Builds from `f64` rows, rounding to `f32` storage.
    pub fn from_f64_rows(dim: usize, rows: &[Vec<f64>], index: Vec<RegionKey>) -> Result<Self, FmatError> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(FmatError::DimensionMismatch(format!(
                    "row of width {} in a set of width {dim}",
                    r.len()
                )));
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(dim, data, index)
    }

    /// Stores a matrix with synthetic keys `(0, row, row)`.
    pub fn from_matrix(m: &Matrix) -> Self {
        let index = (0..m.rows() as u32).map(|r| RegionKey::new(0, r, r)).collect();
        let data = m.as_slice().iter().map(|&v| v as f32).collect();
        Self {
            dim: m.cols(),
            data,
            index,
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.len(), self.dim, self.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &[RegionKey] {
        &self.index
    }

    pub fn key(&self, row: usize) -> RegionKey {
        self.index[row]
    }

    pub fn row_f32(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.row_f32(row).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    /// Rows grouped by image, in first-appearance order.
    pub fn rows_by_image(&self) -> Vec<(u64, Vec<usize>)> {
        let mut order: Vec<(u64, Vec<usize>)> = Vec::new();
        let mut slot: HashMap<u64, usize> = HashMap::new();
        for (row, k) in self.index.iter().enumerate() {
            let s = *slot.entry(k.image_id).or_insert_with(|| {
                order.push((k.image_id, Vec::new()));
                order.len() - 1
            });
            order[s].1.push(row);
        }
        order
    }

    /// Largest category index plus one.
    pub fn n_categories(&self) -> usize {
        self.index.iter().map(|k| k.category as usize + 1).max().unwrap_or(0)
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row_f32(r));
        }
        Self {
            dim: self.dim,
            data,
            index: rows.iter().map(|&r| self.index[r]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4 + self.len() * INDEX_RECORD_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for k in &self.index {
            out.extend_from_slice(&k.image_id.to_le_bytes());
            out.extend_from_slice(&k.region_id.to_le_bytes());
            out.extend_from_slice(&k.category.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FmatError> {
        if bytes.len() < 4 {
            return Err(FmatError::TruncatedFile {
                needed: HEADER_LEN,
                have: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(FmatError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(FmatError::TruncatedFile {
                needed: HEADER_LEN,
                have: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let rows = u32_at(4) as usize;
        let dim = u32_at(8) as usize;
        let values_end = HEADER_LEN + rows * dim * 4;
        let needed = values_end + rows * INDEX_RECORD_LEN;
        if bytes.len() < needed {
            return Err(FmatError::TruncatedFile {
                needed,
                have: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(FmatError::IndexMismatch(format!(
                "{} trailing bytes after the index block",
                bytes.len() - needed
            )));
        }
        let data = bytes[HEADER_LEN..values_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let index = bytes[values_end..]
            .chunks_exact(INDEX_RECORD_LEN)
            .map(|c| RegionKey {
                image_id: u64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                region_id: u32::from_le_bytes(c[8..12].try_into().expect("4 bytes")),
                category: u32::from_le_bytes(c[12..16].try_into().expect("4 bytes")),
            })
            .collect();
        Self::new(dim, data, index)
    }

    /// Debug export; `f32` printed with shortest round-trip digits.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("image_id,region_id,category");
        for j in 0..self.dim {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for (row, k) in self.index.iter().enumerate() {
            let _ = write!(out, "{},{},{}", k.image_id, k.region_id, k.category);
            for v in self.row_f32(row) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Writes atomically: a temporary file in the target directory is renamed
/// over `path` once complete.
pub fn write_fmat(path: &Path, set: &RegionFeatureSet) -> Result<(), FmatError> {
    write_atomic(path, &set.to_bytes())
}

pub fn read_fmat(path: &Path) -> Result<RegionFeatureSet, FmatError> {
    let bytes = std::fs::read(path).map_err(|source| FmatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RegionFeatureSet::from_bytes(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FmatError> {
    let io_err = |source| FmatError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Appends `vc` columns to `base`, aligning rows by `(image_id, region_id)`.
/// Output rows follow `base` order.
pub fn concat_features(
    base: &RegionFeatureSet,
    vc: &RegionFeatureSet,
) -> Result<RegionFeatureSet, FmatError> {
    if base.len() != vc.len() {
        return Err(FmatError::IndexMismatch(format!(
            "base has {} rows, vc has {}",
            base.len(),
            vc.len()
        )));
    }
    let lookup: HashMap<(u64, u32), usize> =
        vc.index.iter().enumerate().map(|(r, k)| (k.id(), r)).collect();
    let dim = base.dim + vc.dim;
    let mut data = Vec::with_capacity(base.len() * dim);
    for (row, k) in base.index.iter().enumerate() {
        let other = *lookup.get(&k.id()).ok_or_else(|| {
            FmatError::IndexMismatch(format!(
                "key (image {}, region {}) missing from vc features",
                k.image_id, k.region_id
            ))
        })?;
        data.extend_from_slice(base.row_f32(row));
        data.extend_from_slice(vc.row_f32(other));
    }
    Ok(RegionFeatureSet {
        dim,
        data,
        index: base.index.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFeatureConfig {
    pub dim: usize,
    /// Standard deviation of per-region Gaussian noise.
    pub noise: f64,
    /// Scale of the per-confounder offset vectors.
    pub confounder_scale: f64,
    /// Draw each region's confounder states independently from the priors
    /// instead of using the scene's, breaking the feature/context link.
    pub deconfound: bool,
    pub seed: u64,
}

impl Default for SynthFeatureConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            noise: 0.3,
            confounder_scale: 1.0,
            deconfound: false,
            seed: 0,
        }
    }
}

/// Per-category prototypes and per-confounder offsets used by
/// [`synth_region_features`]; both depend only on the seed.
pub fn synth_prototypes(world: &ScmWorld, cfg: &SynthFeatureConfig) -> (Matrix, Matrix) {
    let mut rng = stream_rng(cfg.seed, Stream::Prototypes, 0);
    let mut draw = |rows: usize| {
        let data = (0..rows * cfg.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Matrix::from_vec(rows, cfg.dim, data)
    };
    let protos = draw(world.n_categories);
    let mut offsets = draw(world.n_confounders);
    offsets.scale(cfg.confounder_scale);
    (protos, offsets)
}

/// One region per present category per scene: prototype + offsets of the
/// active confounder parents + Gaussian noise. Keys are
/// `(scene index, ordinal within scene, category)`.
pub fn synth_region_features(
    world: &ScmWorld,
    scenes: &[SceneSample],
    cfg: &SynthFeatureConfig,
) -> RegionFeatureSet {
    assert!(cfg.dim >= 1, "feature dimension must be positive");
    let (protos, offsets) = synth_prototypes(world, cfg);
    let mut noise_rng = stream_rng(cfg.seed, Stream::FeatureNoise, 0);
    let mut conf_rng = stream_rng(cfg.seed, Stream::FeatureNoise, 1);
    let mut data = Vec::new();
    let mut index = Vec::new();
    let mut feat = vec![0.0f64; cfg.dim];
    for (i, s) in scenes.iter().enumerate() {
        let mut ordinal = 0u32;
        for c in (0..world.n_categories).filter(|&c| s.is_present(c)) {
            feat.copy_from_slice(protos.row(c));
            for &h in &world.parents[c] {
                let active = if cfg.deconfound {
                    conf_rng.gen::<f64>() < world.confounder_priors[h]
                } else {
                    s.confounder(h)
                };
                if active {
                    crate::linalg::axpy(1.0, offsets.row(h), &mut feat);
                }
            }
            if cfg.noise > 0.0 {
                for v in feat.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut noise_rng);
                    *v += cfg.noise * e;
                }
            }
            data.extend(feat.iter().map(|&v| v as f32));
            index.push(RegionKey::new(i as u64, ordinal, c as u32));
            ordinal += 1;
        }
    }
    RegionFeatureSet {
        dim: cfg.dim,
        data,
        index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{reference_world, sample_scenes};

    fn fixture() -> RegionFeatureSet {
        RegionFeatureSet::new(
            3,
            vec![1.0, 2.0, 3.0, -0.5, f32::MIN_POSITIVE, 1e30],
            vec![RegionKey::new(7, 0, 2), RegionKey::new(7, 1, 0)],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.fmat");
        let s = fixture();
        write_fmat(&p, &s).unwrap();
        let back = read_fmat(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(std::fs::read(&p).unwrap().len(), 12 + 6 * 4 + 2 * 16);
    }

    #[test]
    fn layout_is_little_endian() {
        let b = fixture().to_bytes();
        assert_eq!(&b[..4], b"VCF1");
        assert_eq!(&b[4..8], &[2, 0, 0, 0]);
        assert_eq!(&b[8..12], &[3, 0, 0, 0]);
        assert_eq!(&b[12..16], &1.0f32.to_le_bytes());
        let idx = 12 + 24;
        assert_eq!(&b[idx..idx + 8], &7u64.to_le_bytes());
        assert_eq!(&b[idx + 12..idx + 16], &2u32.to_le_bytes());
    }

    #[test]
    fn empty_matrix_round_trips() {
        let s = RegionFeatureSet::empty(5);
        let b = s.to_bytes();
        assert_eq!(b.len(), 12);
        assert_eq!(RegionFeatureSet::from_bytes(&b).unwrap(), s);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut b = fixture().to_bytes();
        b[0] = b'X';
        assert!(matches!(RegionFeatureSet::from_bytes(&b), Err(FmatError::BadMagic(_))));
        let b = fixture().to_bytes();
        assert!(matches!(
            RegionFeatureSet::from_bytes(&b[..b.len() - 1]),
            Err(FmatError::TruncatedFile { .. })
        ));
        assert!(matches!(RegionFeatureSet::from_bytes(&b[..7]), Err(FmatError::TruncatedFile { .. })));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(RegionFeatureSet::from_bytes(&long), Err(FmatError::IndexMismatch(_))));
    }

    #[test]
    fn duplicate_keys_rejected() {
        let r = RegionFeatureSet::new(1, vec![0.0, 1.0], vec![RegionKey::new(1, 1, 0), RegionKey::new(1, 1, 3)]);
        assert!(matches!(r, Err(FmatError::IndexMismatch(_))));
    }

    #[test]
    fn concat_two_rows_elementwise() {
        let base = fixture();
        let vc = RegionFeatureSet::new(
            2,
            vec![9.0, 8.0, 7.0, 6.0],
            vec![RegionKey::new(7, 1, 0), RegionKey::new(7, 0, 2)],
        )
        .unwrap();
        let out = concat_features(&base, &vc).unwrap();
        assert_eq!(out.dim(), 5);
        assert_eq!(out.row_f32(0), &[1.0, 2.0, 3.0, 7.0, 6.0]);
        assert_eq!(out.row_f32(1), &[-0.5, f32::MIN_POSITIVE, 1e30, 9.0, 8.0]);
        assert_eq!(out.index(), base.index());
    }

    #[test]
    fn concat_zero_width_is_identity() {
        let base = fixture();
        let vc = RegionFeatureSet::new(0, vec![], base.index().to_vec()).unwrap();
        assert_eq!(concat_features(&base, &vc).unwrap(), base);
    }

    #[test]
    fn concat_missing_key_reports_it() {
        let base = fixture();
        let vc = RegionFeatureSet::new(1, vec![0.0, 0.0], vec![RegionKey::new(7, 0, 2), RegionKey::new(8, 1, 0)]).unwrap();
        let err = concat_features(&base, &vc).unwrap_err();
        assert!(err.to_string().contains("image 7, region 1"), "{err}");
    }

    #[test]
    fn synth_noise_free_rows_equal_prototypes() {
        let w = reference_world();
        let scenes = sample_scenes(&w, 200, 1);
        let cfg = SynthFeatureConfig { dim: 4, noise: 0.0, confounder_scale: 0.0, deconfound: false, seed: 9 };
        let f = synth_region_features(&w, &scenes, &cfg);
        let (protos, _) = synth_prototypes(&w, &cfg);
        for r in 0..f.len() {
            let c = f.key(r).category as usize;
            let want: Vec<f32> = protos.row(c).iter().map(|&v| v as f32).collect();
            assert_eq!(f.row_f32(r), &want[..]);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let w = reference_world();
        let scenes = sample_scenes(&w, 100, 1);
        let cfg = SynthFeatureConfig { seed: 3, ..Default::default() };
        assert_eq!(synth_region_features(&w, &scenes, &cfg), synth_region_features(&w, &scenes, &cfg));
    }

    #[test]
    fn synth_means_within_standard_error() {
        let w = reference_world();
        let scenes = sample_scenes(&w, 2000, 2);
        let cfg = SynthFeatureConfig { dim: 6, noise: 0.5, confounder_scale: 0.0, deconfound: false, seed: 4 };
        let f = synth_region_features(&w, &scenes, &cfg);
        let (protos, _) = synth_prototypes(&w, &cfg);
        for c in 0..w.n_categories {
            let rows: Vec<usize> = (0..f.len()).filter(|&r| f.key(r).category as usize == c).collect();
            let bound = 4.0 * cfg.noise / (rows.len() as f64).sqrt();
            for j in 0..cfg.dim {
                let mean: f64 = rows.iter().map(|&r| f.row(r)[j]).sum::<f64>() / rows.len() as f64;
                assert!((mean - protos[(c, j)]).abs() < bound + 1e-6, "c={c} j={j}");
            }
        }
    }
}
