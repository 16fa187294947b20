//! Confounder dictionary `Z` (one row per category) and its prior `P(z)`.
//!
//! The `fixed` variant averages region features per category and never
//! changes afterwards. `random` and `context` are ablations; `context`
//! rebuilds a dictionary per image and is known to make training unstable.
//! `expectation_only` keeps the fixed rows but tells the head to skip
//! attention and use `Σ_i P(z_i)·z_i`.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fmat::{self, FmatError, RegionFeatureSet};
use crate::linalg::Matrix;
use crate::rng::{stream_rng, Stream};

pub const CONTEXT_INSTABILITY_WARNING: &str = "warning: the context dictionary is rebuilt per image \
from that image's own regions; this variant is known to train unstably and is provided for ablation only";

#[derive(Debug, Error)]
pub enum DictError {
    #[error("category {0} has no feature rows")]
    EmptyCategory(usize),
    #[error("category {category} out of range for N = {n}")]
    CategoryOutOfRange { category: usize, n: usize },
    #[error("dictionary needs n >= 1 and d >= 1")]
    EmptyShape,
    #[error("invalid dictionary: {0}")]
    Invalid(String),
    #[error(transparent)]
    Fmat(#[from] FmatError),
    #[error("sidecar {path}: {message}")]
    Sidecar { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictVariant {
    Fixed,
    Random,
    Context,
    ExpectationOnly,
}

impl DictVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            DictVariant::Fixed => "fixed",
            DictVariant::Random => "random",
            DictVariant::Context => "context",
            DictVariant::ExpectationOnly => "expectation_only",
        }
    }
}

impl std::str::FromStr for DictVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "random" => Ok(Self::Random),
            "context" => Ok(Self::Context),
            "expectation" | "expectation_only" => Ok(Self::ExpectationOnly),
            other => Err(format!("unknown dictionary variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DictProvenance {
    pub settings: String,
    pub source_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderDictionary {
    z: Matrix,
    prior: Vec<f64>,
    variant: DictVariant,
    pub provenance: DictProvenance,
}

/// Per-category sums and counts; merging partial accumulators is exact up
/// to floating-point reassociation.
#[derive(Debug, Clone)]
pub struct MeanAccumulator {
    sums: Matrix,
    counts: Vec<u64>,
}

impl MeanAccumulator {
    pub fn new(n: usize, d: usize) -> Self {
        Self {
            sums: Matrix::zeros(n, d),
            counts: vec![0; n],
        }
    }

    pub fn add(&mut self, category: usize, row: &[f64]) -> Result<(), DictError> {
        let n = self.counts.len();
        if category >= n {
            return Err(DictError::CategoryOutOfRange { category, n });
        }
        crate::linalg::axpy(1.0, row, self.sums.row_mut(category));
        self.counts[category] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &MeanAccumulator) {
        self.sums.add_assign(&other.sums);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Means and instance-frequency prior over categories with rows; empty
    /// categories get zero rows and zero prior.
    fn finish(mut self) -> (Matrix, Vec<f64>, Vec<u64>) {
        let total: u64 = self.counts.iter().sum();
        let mut prior = vec![0.0; self.counts.len()];
        for (i, &c) in self.counts.iter().enumerate() {
            if c > 0 {
                let inv = 1.0 / c as f64;
                self.sums.row_mut(i).iter_mut().for_each(|v| *v *= inv);
                prior[i] = c as f64 / total as f64;
            }
        }
        (self.sums, prior, self.counts)
    }
}

impl ConfounderDictionary {
    pub fn new(z: Matrix, prior: Vec<f64>, variant: DictVariant) -> Result<Self, DictError> {
        let d = Self {
            z,
            prior,
            variant,
            provenance: DictProvenance::default(),
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<(), DictError> {
        if self.z.rows() != self.prior.len() {
            return Err(DictError::Invalid(format!(
                "{} rows but {} prior entries",
                self.z.rows(),
                self.prior.len()
            )));
        }
        if self.prior.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(DictError::Invalid("prior entries must be finite and non-negative".into()));
        }
        let s: f64 = self.prior.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(DictError::Invalid(format!("prior sums to {s}, not 1")));
        }
        if !self.z.is_finite() {
            return Err(DictError::Invalid("non-finite dictionary entry".into()));
        }
        Ok(())
    }

    /// `z_i` = mean of rows labeled `i`; `P(z_i)` = share of rows labeled `i`.
    pub fn build_fixed(features: &RegionFeatureSet, n: usize) -> Result<Self, DictError> {
        if n == 0 || features.dim() == 0 {
            return Err(DictError::EmptyShape);
        }
        let mut acc = MeanAccumulator::new(n, features.dim());
        for r in 0..features.len() {
            acc.add(features.key(r).category as usize, &features.row(r))?;
        }
        let (z, prior, counts) = acc.finish();
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(DictError::EmptyCategory(i));
        }
        let mut d = Self::new(z, prior, DictVariant::Fixed)?;
        d.provenance = DictProvenance {
            settings: format!("fixed n={n} d={} rows={}", features.dim(), features.len()),
            source_hash: hex::encode(Sha256::digest(features.to_bytes())),
        };
        Ok(d)
    }

    /// I.i.d. standard normal entries with a uniform prior.
    pub fn build_random(n: usize, d: usize, seed: u64) -> Result<Self, DictError> {
        if n == 0 || d == 0 {
            return Err(DictError::EmptyShape);
        }
        let mut rng = stream_rng(seed, Stream::DictRandom, 0);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut dict = Self::new(Matrix::from_vec(n, d, data), vec![1.0 / n as f64; n], DictVariant::Random)?;
        dict.provenance.settings = format!("random n={n} d={d} seed={seed}");
        Ok(dict)
    }

    /// Per-image dictionary from that image's regions: present categories
    /// get their mean row and within-image frequency, absent ones zero.
    pub fn build_context(regions: &[(usize, &[f64])], n: usize, d: usize) -> Result<Self, DictError> {
        if n == 0 || d == 0 || regions.is_empty() {
            return Err(DictError::EmptyShape);
        }
        let mut acc = MeanAccumulator::new(n, d);
        for &(c, row) in regions {
            if row.len() != d {
                return Err(DictError::Invalid(format!("region of width {} in a d={d} dictionary", row.len())));
            }
            acc.add(c, row)?;
        }
        let (z, prior, _) = acc.finish();
        let mut dict = Self::new(z, prior, DictVariant::Context)?;
        dict.provenance.settings = format!("context n={n} d={d} regions={}", regions.len());
        Ok(dict)
    }

    /// Same rows and prior, flagged to bypass attention.
    pub fn expectation_only(mut self) -> Self {
        self.variant = DictVariant::ExpectationOnly;
        self
    }

    pub fn n(&self) -> usize {
        self.z.rows()
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn entries(&self) -> &Matrix {
        &self.z
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        self.z.row(i)
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn variant(&self) -> DictVariant {
        self.variant
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes `Z` as FMAT at `path` and `{prior, variant, provenance}` to
    /// `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<(), DictError> {
        fmat::write_fmat(path, &RegionFeatureSet::from_matrix(&self.z))?;
        let side = Sidecar {
            n: self.n(),
            d: self.dim(),
            prior: self.prior.clone(),
            variant: self.variant,
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        fmat::write_atomic(&Self::sidecar_path(path), json.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DictError> {
        let set = fmat::read_fmat(path)?;
        let side_path = Self::sidecar_path(path);
        let sidecar_err = |message: String| DictError::Sidecar {
            path: side_path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(&side_path).map_err(|e| sidecar_err(e.to_string()))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| sidecar_err(e.to_string()))?;
        if side.n != set.len() || side.d != set.dim() {
            return Err(sidecar_err(format!(
                "shape {}x{} does not match matrix {}x{}",
                side.n,
                side.d,
                set.len(),
                set.dim()
            )));
        }
        let mut d = Self::new(set.to_matrix(), side.prior, side.variant)?;
        d.provenance = side.provenance;
        Ok(d)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    n: usize,
    d: usize,
    prior: Vec<f64>,
    variant: DictVariant,
    provenance: DictProvenance,
}
