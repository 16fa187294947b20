//! Neural causation coefficient: a small classifier on scalar pair
//! sequences that scores how strongly `u → v`, and the collider filter built
//! on it.
//!
//! Each pair `(u_j, v_j)` (after per-variable standardization) is embedded
//! by a 2→h→h ReLU MLP, embeddings are mean-pooled, and an h→1 logistic
//! layer gives the score. Pairs are sorted before embedding so the pooled
//! sum, and hence the score, does not depend on their order at all.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dict::DictVariant;
use crate::fmat::{self, RegionFeatureSet};
use crate::head::{attention_weights, DictSource, HeadError, HeadParams, PairBatch};
use crate::linalg::Matrix;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum NccError {
    #[error("NCC model has not been trained")]
    UntrainedModel,
    #[error("sequences must have equal length >= 2 (got {u} and {v})")]
    BadSequence { u: usize, v: usize },
    #[error("invalid NCC config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Fmat(#[from] fmat::FmatError),
    #[error("attention: {0}")]
    Head(Box<HeadError>),
}

/// Scores are kept strictly inside (0, 1).
const SCORE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// `v = f(u) + ε`, labeled causal.
    AdditiveNoise,
    /// An additive-noise pair presented as `(v, u)`, labeled non-causal.
    Reversed,
    /// `v` drawn independently of `u`, labeled non-causal.
    Independent,
}

impl PairKind {
    pub fn label(&self) -> bool {
        matches!(self, PairKind::AdditiveNoise)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CauseEffectSample {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub label: bool,
}

/// Monotone piecewise-linear map with random knots.
struct MonotoneSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl MonotoneSpline {
    fn random(rng: &mut crate::rng::Rng) -> Self {
        let knots = rng.gen_range(4..8);
        let mut xs: Vec<f64> = (0..knots).map(|_| rng.gen_range(-2.5..2.5)).collect();
        xs.extend([-6.0, 6.0]);
        xs.sort_by(f64::total_cmp);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let mut y = 0.0;
        let ys = xs
            .iter()
            .map(|_| {
                y += sign * rng.gen_range(0.05..2.0f64).powi(2);
                y
            })
            .collect();
        Self { xs, ys }
    }

    fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(self.xs[0], *self.xs.last().expect("knots"));
        let i = self.xs.partition_point(|&k| k < x).clamp(1, self.xs.len() - 1);
        let (x0, x1, y0, y1) = (self.xs[i - 1], self.xs[i], self.ys[i - 1], self.ys[i]);
        if x1 == x0 {
            y0
        } else {
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    }
}

/// Cause drawn from a random Gaussian mixture.
fn mixture(rng: &mut crate::rng::Rng, m: usize) -> Vec<f64> {
    let k = rng.gen_range(1..4);
    let comps: Vec<(f64, f64)> = (0..k).map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(0.2..1.0))).collect();
    (0..m)
        .map(|_| {
            let (mu, sd) = comps[rng.gen_range(0..k)];
            let e: f64 = StandardNormal.sample(rng);
            mu + sd * e
        })
        .collect()
}

fn std_dev(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// One synthetic pair sequence. `noise_scale` is relative to the spread of
/// `f(u)`; `None` draws it from [0.1, 0.6).
pub fn synth_pairs_with_noise(kind: PairKind, m: usize, noise_scale: Option<f64>, seed: u64) -> CauseEffectSample {
    assert!(m >= 2, "pair sequences need m >= 2");
    let mut rng = stream_rng(seed, Stream::NccData, 0);
    let u = mixture(&mut rng, m);
    let f = MonotoneSpline::random(&mut rng);
    let fu: Vec<f64> = u.iter().map(|&x| f.eval(x)).collect();
    let scale = noise_scale.unwrap_or_else(|| rng.gen_range(0.1..0.6)) * std_dev(&fu).max(1e-12);
    let v: Vec<f64> = fu
        .iter()
        .map(|&y| {
            if scale == 0.0 {
                y
            } else {
                let e: f64 = StandardNormal.sample(&mut rng);
                y + scale * e
            }
        })
        .collect();
    match kind {
        PairKind::AdditiveNoise => CauseEffectSample { u, v, label: true },
        PairKind::Reversed => CauseEffectSample { u: v, v: u, label: false },
        PairKind::Independent => {
            let mut v = v;
            v.shuffle(&mut rng);
            CauseEffectSample { u, v, label: false }
        }
    }
}

pub fn synth_pairs(kind: PairKind, m: usize, seed: u64) -> CauseEffectSample {
    synth_pairs_with_noise(kind, m, None, seed)
}

/// Balanced corpus: half causal, a quarter reversed, a quarter independent.
pub fn synth_corpus(count: usize, m: usize, seed: u64) -> Vec<CauseEffectSample> {
    (0..count)
        .map(|i| {
            let kind = match i % 4 {
                0 | 2 => PairKind::AdditiveNoise,
                1 => PairKind::Reversed,
                _ => PairKind::Independent,
            };
            synth_pairs(kind, m, crate::rng::derive_seed(seed, i as u64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NccTrainConfig {
    pub hidden: usize,
    pub samples: usize,
    pub sequence_len: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for NccTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 20,
            samples: 2000,
            sequence_len: 64,
            epochs: 30,
            batch: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NccModel {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: f64,
    trained: bool,
}

struct Embedded {
    points: Vec<[f64; 2]>,
    h1: Vec<Vec<f64>>,
    h2: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    logit: f64,
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    v.iter().map(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 }).collect()
}

fn sigmoid(t: f64) -> f64 {
    (1.0 / (1.0 + (-t).exp())).clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

impl NccModel {
    /// Untrained model with seeded fan-in uniform weights.
    pub fn new(hidden: usize, seed: u64) -> Self {
        assert!(hidden >= 1, "hidden width must be positive");
        let mut rng = stream_rng(seed, Stream::NccInit, 0);
        let mut fill = |rows: usize, cols: usize| {
            let b = 1.0 / (cols as f64).sqrt();
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-b..b)).collect())
        };
        let w1 = fill(hidden, 2);
        let w2 = fill(hidden, hidden);
        let wo = fill(1, hidden).into_vec();
        Self {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; hidden],
            wo,
            bo: 0.0,
            trained: false,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn embed(&self, u: &[f64], v: &[f64]) -> Embedded {
        let mut raw: Vec<(f64, f64)> = u.iter().copied().zip(v.iter().copied()).collect();
        raw.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let (su, sv): (Vec<f64>, Vec<f64>) = raw.into_iter().unzip();
        let points: Vec<[f64; 2]> = standardize(&su).into_iter().zip(standardize(&sv)).map(|(a, b)| [a, b]).collect();
        let h = self.hidden();
        let mut pooled = vec![0.0; h];
        let mut h1s = Vec::with_capacity(points.len());
        let mut h2s = Vec::with_capacity(points.len());
        for p in &points {
            let h1: Vec<f64> = (0..h)
                .map(|i| (self.w1[(i, 0)] * p[0] + self.w1[(i, 1)] * p[1] + self.b1[i]).max(0.0))
                .collect();
            let mut h2 = self.w2.matvec(&h1);
            for (x, b) in h2.iter_mut().zip(&self.b2) {
                *x = (*x + b).max(0.0);
            }
            crate::linalg::axpy(1.0, &h2, &mut pooled);
            h1s.push(h1);
            h2s.push(h2);
        }
        pooled.iter_mut().for_each(|x| *x /= points.len() as f64);
        let logit = crate::linalg::dot(&self.wo, &pooled) + self.bo;
        Embedded {
            points,
            h1: h1s,
            h2: h2s,
            pooled,
            logit,
        }
    }

    fn raw_score(&self, u: &[f64], v: &[f64]) -> f64 {
        sigmoid(self.embed(u, v).logit)
    }

    /// Score in (0, 1); higher means stronger `u → v` evidence.
    pub fn score(&self, u: &[f64], v: &[f64]) -> Result<f64, NccError> {
        if !self.trained {
            return Err(NccError::UntrainedModel);
        }
        if u.len() != v.len() || u.len() < 2 {
            return Err(NccError::BadSequence { u: u.len(), v: v.len() });
        }
        Ok(self.raw_score(u, v))
    }

    /// Adds the BCE gradient of one sample, scaled by `w`, into `g`.
    fn accumulate_grad(&self, s: &CauseEffectSample, w: f64, g: &mut NccModel) -> f64 {
        let e = self.embed(&s.u, &s.v);
        let p = sigmoid(e.logit);
        let y = if s.label { 1.0 } else { 0.0 };
        let dlogit = w * (p - y);
        crate::linalg::axpy(dlogit, &e.pooled, &mut g.wo);
        g.bo += dlogit;
        let m = e.points.len() as f64;
        let dpool: Vec<f64> = self.wo.iter().map(|&o| dlogit * o / m).collect();
        for ((pt, h1), h2) in e.points.iter().zip(&e.h1).zip(&e.h2) {
            let dh2: Vec<f64> = dpool.iter().zip(h2).map(|(&d, &a)| if a > 0.0 { d } else { 0.0 }).collect();
            g.w2.add_outer(1.0, &dh2, h1);
            crate::linalg::axpy(1.0, &dh2, &mut g.b2);
            let back = self.w2.matvec_t(&dh2);
            let dh1: Vec<f64> = back.iter().zip(h1).map(|(&d, &a)| if a > 0.0 { d } else { 0.0 }).collect();
            g.w1.add_outer(1.0, &dh1, pt);
            crate::linalg::axpy(1.0, &dh1, &mut g.b1);
        }
        let pc = p.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
        -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
    }

    fn zeros_like(&self) -> NccModel {
        let h = self.hidden();
        NccModel {
            w1: Matrix::zeros(h, 2),
            b1: vec![0.0; h],
            w2: Matrix::zeros(h, h),
            b2: vec![0.0; h],
            wo: vec![0.0; h],
            bo: 0.0,
            trained: false,
        }
    }

    fn params_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            &mut self.wo,
        ]
    }

    /// Mean BCE loss per epoch is returned alongside the model.
    pub fn train(samples: &[CauseEffectSample], cfg: &NccTrainConfig) -> Result<(NccModel, Vec<f64>), NccError> {
        if samples.is_empty() || cfg.batch == 0 || cfg.hidden == 0 || !(cfg.learning_rate > 0.0) {
            return Err(NccError::InvalidConfig("need samples, batch >= 1, hidden >= 1, rate > 0".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.u.len() != s.v.len() || s.u.len() < 2) {
            return Err(NccError::BadSequence { u: s.u.len(), v: s.v.len() });
        }
        let mut model = NccModel::new(cfg.hidden, cfg.seed);
        let mut vel = model.zeros_like();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.sort_unstable();
            order.shuffle(&mut stream_rng(cfg.seed, Stream::NccShuffle, epoch as u64));
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let mut g = model.zeros_like();
                let w = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    total += model.accumulate_grad(&samples[i], w, &mut g);
                }
                let gbo = g.bo;
                for (p, (v, gr)) in model.params_mut().into_iter().zip(vel.params_mut().into_iter().zip(g.params_mut())) {
                    for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(gr.iter()) {
                        *vi = cfg.momentum * *vi + gi;
                        *pi -= cfg.learning_rate * *vi;
                    }
                }
                vel.bo = cfg.momentum * vel.bo + gbo;
                model.bo -= cfg.learning_rate * vel.bo;
            }
            losses.push(total / samples.len() as f64);
        }
        model.trained = true;
        Ok((model, losses))
    }

    /// Fraction of samples with `score > 0.5` matching the label.
    pub fn accuracy(&self, samples: &[CauseEffectSample]) -> Result<f64, NccError> {
        let mut hit = 0usize;
        for s in samples {
            hit += usize::from((self.score(&s.u, &s.v)? > 0.5) == s.label);
        }
        Ok(hit as f64 / samples.len().max(1) as f64)
    }

    pub fn save(&self, dir: &Path, cfg: &NccTrainConfig) -> Result<(), NccError> {
        std::fs::create_dir_all(dir).map_err(|e| NccError::Checkpoint(format!("{}: {e}", dir.display())))?;
        let blocks: [(&str, Matrix); 6] = [
            ("w1", self.w1.clone()),
            ("b1", Matrix::from_vec(1, self.hidden(), self.b1.clone())),
            ("w2", self.w2.clone()),
            ("b2", Matrix::from_vec(1, self.hidden(), self.b2.clone())),
            ("wo", Matrix::from_vec(1, self.hidden(), self.wo.clone())),
            ("bo", Matrix::from_vec(1, 1, vec![self.bo])),
        ];
        for (name, m) in &blocks {
            fmat::write_fmat(&dir.join(format!("{name}.fmat")), &RegionFeatureSet::from_matrix(m))?;
        }
        let manifest = NccManifest {
            format: NCC_FORMAT.into(),
            hidden: self.hidden(),
            trained: self.trained,
            config: cfg.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fmat::write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, NccTrainConfig), NccError> {
        let path = dir.join("manifest.json");
        let err = |e: String| NccError::Checkpoint(format!("{}: {e}", path.display()));
        let text = std::fs::read_to_string(&path).map_err(|e| err(e.to_string()))?;
        let m: NccManifest = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if m.format != NCC_FORMAT {
            return Err(err(format!("unknown format `{}`", m.format)));
        }
        let h = m.hidden;
        let read = |name: &str, shape: (usize, usize)| -> Result<Matrix, NccError> {
            let mat = fmat::read_fmat(&dir.join(format!("{name}.fmat")))?.to_matrix();
            if mat.shape() != shape {
                return Err(NccError::Checkpoint(format!("{name} has shape {:?}, expected {shape:?}", mat.shape())));
            }
            Ok(mat)
        };
        let model = NccModel {
            w1: read("w1", (h, 2))?,
            b1: read("b1", (1, h))?.into_vec(),
            w2: read("w2", (h, h))?,
            b2: read("b2", (1, h))?.into_vec(),
            wo: read("wo", (1, h))?.into_vec(),
            bo: read("bo", (1, 1))?.as_slice()[0],
            trained: m.trained,
        };
        Ok((model, m.config))
    }
}

const NCC_FORMAT: &str = "vc-ncc/1";

#[derive(Debug, Serialize, Deserialize)]
struct NccManifest {
    format: String,
    hidden: usize,
    trained: bool,
    config: NccTrainConfig,
}

/// Indices of the `r` largest weights, ties broken by lower index.
pub fn top_r(weights: &[f64], r: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(r);
    idx
}

/// `min(NCC(x → z), NCC(y → z))`, with vectors read coordinate-wise as
/// pair sequences.
pub fn collider_intensity(model: &NccModel, x: &[f64], y: &[f64], z: &[f64]) -> Result<f64, NccError> {
    Ok(model.score(x, z)?.min(model.score(y, z)?))
}

/// Drops every (center, context) pair for which one of the `r` most
/// attended dictionary entries has collider intensity above `tau`. Centers
/// left without contexts are dropped.
pub fn filter_samples(
    batch: &PairBatch,
    dicts: DictSource<'_>,
    params: &HeadParams,
    model: &NccModel,
    tau: f64,
    r: usize,
) -> Result<PairBatch, NccError> {
    if !model.is_trained() {
        return Err(NccError::UntrainedModel);
    }
    let mut out = PairBatch::default();
    for c in &batch.centers {
        let dict = dicts.for_center(c);
        let mut kept = c.clone();
        kept.contexts.clear();
        for y in &c.contexts {
            let a = if dict.variant() == DictVariant::ExpectationOnly {
                dict.prior().to_vec()
            } else {
                attention_weights(&y.feature, dict, params).map_err(|e| NccError::Head(Box::new(e)))?
            };
            let mut collider = false;
            for i in top_r(&a, r) {
                if collider_intensity(model, &c.feature, &y.feature, dict.entry(i))? > tau {
                    collider = true;
                    break;
                }
            }
            if !collider {
                kept.contexts.push(y.clone());
            }
        }
        if !kept.contexts.is_empty() {
            out.centers.push(kept);
        }
    }
    Ok(out)
}
