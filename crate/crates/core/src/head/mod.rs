//! Self and context predictors with the confounder-dictionary intervention.
//!
//! For a center region `x` and a context region `y`:
//!
//! ```text
//! q     = W3 y                         (σ)
//! k_i   = W4 z_i                       (σ, one per dictionary entry)
//! a     = softmax(qᵀk / √σ)            (N attention weights)
//! ec    = Σ_i a_i P(z_i) z_i           (expected confounder, d)
//! p_ctx = softmax(W1 x + W2 ec)        (context class distribution)
//! p_self= softmax(Ws x)                (self class distribution)
//! ```
//!
//! The softmax of the expected logits stands in for the expected softmax
//! over `z`. Per center the loss is `−log p_self[x_c] + (1/K) Σ_k −log
//! p_ctx_k[y_k]`, averaged over the centers of a batch. Gradients are
//! analytic, including the path through the attention softmax.

mod grad;
mod train;

pub use grad::{backward, backward_with_workers, gradcheck, gradcheck_instance, GradcheckReport, GRADCHECK_FLOOR};
pub use train::{
    build_centers, evaluate, extract_features, lr_at, milestone_steps, train, Checkpoint, FeatureMode,
    LossPoint, NccFilterConfig, TrainConfig, TrainOutcome,
};

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dict::{ConfounderDictionary, DictVariant};
use crate::linalg::{self, Matrix};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("non-finite input or logits")]
    NonFiniteInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss diverged (non-finite) at step {step}")]
    DivergedLoss { step: usize },
    #[error("context dictionary variant requires allow_context_variant")]
    ContextVariantDisabled,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("ncc filter: {0}")]
    Ncc(String),
    #[error(transparent)]
    Fmat(#[from] crate::fmat::FmatError),
    #[error(transparent)]
    Dict(#[from] crate::dict::DictError),
}

/// The five trainable weight blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    W1,
    W2,
    W3,
    W4,
    Ws,
}

impl Block {
    pub const ALL: [Block; 5] = [Block::W1, Block::W2, Block::W3, Block::W4, Block::Ws];

    pub fn name(&self) -> &'static str {
        match self {
            Block::W1 => "w1",
            Block::W2 => "w2",
            Block::W3 => "w3",
            Block::W4 => "w4",
            Block::Ws => "ws",
        }
    }
}

/// Weights of the head. `W1`, `W2`, `Ws` are `N × d`; `W3`, `W4` are `σ × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Matrix,
    pub w4: Matrix,
    pub ws: Matrix,
}

impl HeadParams {
    pub fn zeros(n: usize, d: usize, sigma: usize) -> Self {
        Self {
            w1: Matrix::zeros(n, d),
            w2: Matrix::zeros(n, d),
            w3: Matrix::zeros(sigma, d),
            w4: Matrix::zeros(sigma, d),
            ws: Matrix::zeros(n, d),
        }
    }

    /// Uniform in `[−1/√d, 1/√d)`, drawn block by block from the init stream.
    pub fn init(n: usize, d: usize, sigma: usize, seed: u64) -> Self {
        Self::init_scaled(n, d, sigma, seed, 1.0 / (d as f64).sqrt())
    }

    pub fn init_scaled(n: usize, d: usize, sigma: usize, seed: u64, bound: f64) -> Self {
        let mut p = Self::zeros(n, d, sigma);
        let mut rng = stream_rng(seed, Stream::HeadInit, 0);
        for b in Block::ALL {
            for v in p.block_mut(b).as_mut_slice() {
                *v = if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 };
            }
        }
        p
    }

    pub fn n(&self) -> usize {
        self.w1.rows()
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    /// Shared first dimension of `W3` and `W4`.
    pub fn sigma(&self) -> usize {
        self.w3.rows()
    }

    pub fn block(&self, b: Block) -> &Matrix {
        match b {
            Block::W1 => &self.w1,
            Block::W2 => &self.w2,
            Block::W3 => &self.w3,
            Block::W4 => &self.w4,
            Block::Ws => &self.ws,
        }
    }

    pub fn block_mut(&mut self, b: Block) -> &mut Matrix {
        match b {
            Block::W1 => &mut self.w1,
            Block::W2 => &mut self.w2,
            Block::W3 => &mut self.w3,
            Block::W4 => &mut self.w4,
            Block::Ws => &mut self.ws,
        }
    }

    pub fn is_finite(&self) -> bool {
        Block::ALL.iter().all(|&b| self.block(b).is_finite())
    }

    fn check_shapes(&self) -> Result<(), HeadError> {
        let (n, d, s) = (self.n(), self.dim(), self.sigma());
        let ok = self.w2.shape() == (n, d)
            && self.ws.shape() == (n, d)
            && self.w3.shape() == (s, d)
            && self.w4.shape() == (s, d)
            && s >= 1;
        if ok {
            Ok(())
        } else {
            Err(HeadError::ShapeMismatch("weight blocks disagree on (N, d, σ)".into()))
        }
    }
}

/// How the context logits use the dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// `W1 x + W2 E[g(z)]`
    #[default]
    Intervention,
    /// `W1 x` alone: the plain likelihood `P(Y|X)` baseline.
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HeadOptions {
    pub mode: ContextMode,
    /// Treat attention weights as constants in backward.
    pub detach_attention: bool,
    /// Divide the expected confounder by `Σ_i a_i P(z_i)`.
    pub renormalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSample {
    pub feature: Vec<f64>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterSample {
    pub image_id: u64,
    pub region_id: u32,
    pub feature: Vec<f64>,
    pub class: usize,
    pub contexts: Vec<ContextSample>,
}

/// Center regions with their `K ≥ 1` context regions each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairBatch {
    pub centers: Vec<CenterSample>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn n_pairs(&self) -> usize {
        self.centers.iter().map(|c| c.contexts.len()).sum()
    }

    pub fn validate(&self, n: usize, d: usize) -> Result<(), HeadError> {
        for (i, c) in self.centers.iter().enumerate() {
            let bad = c.class >= n
                || c.feature.len() != d
                || c.contexts.is_empty()
                || c.contexts.iter().any(|y| y.class >= n || y.feature.len() != d);
            if bad {
                return Err(HeadError::ShapeMismatch(format!(
                    "center {i}: classes must be < {n}, features of width {d}, K >= 1"
                )));
            }
        }
        Ok(())
    }
}

/// Dictionary used for each center.
#[derive(Debug, Clone, Copy)]
pub enum DictSource<'a> {
    Shared(&'a ConfounderDictionary),
    /// One dictionary per image (the context-dictionary ablation).
    PerImage(&'a HashMap<u64, ConfounderDictionary>),
}

impl<'a> DictSource<'a> {
    pub fn for_center(&self, c: &CenterSample) -> &'a ConfounderDictionary {
        match self {
            DictSource::Shared(d) => d,
            DictSource::PerImage(m) => m
                .get(&c.image_id)
                .unwrap_or_else(|| panic!("no per-image dictionary for image {}", c.image_id)),
        }
    }
}

/// Keys `k_i = W4 z_i`, one row per dictionary entry.
pub fn dictionary_keys(dict: &ConfounderDictionary, params: &HeadParams) -> Matrix {
    let mut k = Matrix::zeros(dict.n(), params.sigma());
    for i in 0..dict.n() {
        let row = params.w4.matvec(dict.entry(i));
        k.row_mut(i).copy_from_slice(&row);
    }
    k
}

fn attention_from_keys(q: &[f64], keys: &Matrix) -> Result<Vec<f64>, HeadError> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let e: Vec<f64> = (0..keys.rows()).map(|i| linalg::dot(q, keys.row(i)) * scale).collect();
    linalg::softmax(&e).ok_or(HeadError::NonFiniteInput)
}

/// `a = softmax((W3 y)ᵀ (W4 Zᵀ) / √σ)`.
pub fn attention_weights(
    y: &[f64],
    dict: &ConfounderDictionary,
    params: &HeadParams,
) -> Result<Vec<f64>, HeadError> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(HeadError::NonFiniteInput);
    }
    check_dims(params, dict, &[y])?;
    let q = params.w3.matvec(y);
    attention_from_keys(&q, &dictionary_keys(dict, params))
}

/// `Σ_i a_i P(z_i) z_i` and the mass `Σ_i a_i P(z_i)`. With `renormalize`
/// the vector is divided by the mass.
pub fn expected_confounder(a: &[f64], dict: &ConfounderDictionary, renormalize: bool) -> (Vec<f64>, f64) {
    assert_eq!(a.len(), dict.n(), "attention length must equal dictionary size");
    let mut ec = vec![0.0; dict.dim()];
    let mut mass = 0.0;
    for (i, (&ai, &pi)) in a.iter().zip(dict.prior()).enumerate() {
        let m = ai * pi;
        mass += m;
        if m != 0.0 {
            linalg::axpy(m, dict.entry(i), &mut ec);
        }
    }
    if renormalize && mass > 0.0 {
        ec.iter_mut().for_each(|v| *v /= mass);
    }
    (ec, mass)
}

/// Attention-free expectation `Σ_i P(z_i) z_i`.
pub fn prior_expectation(dict: &ConfounderDictionary) -> Vec<f64> {
    let ones = vec![1.0; dict.n()];
    expected_confounder(&ones, dict, false).0
}

/// `W1 x + W2 ec`.
pub fn context_logits(x: &[f64], ec: &[f64], params: &HeadParams) -> Vec<f64> {
    let mut l = params.w1.matvec(x);
    let t = params.w2.matvec(ec);
    linalg::axpy(1.0, &t, &mut l);
    l
}

fn check_dims(params: &HeadParams, dict: &ConfounderDictionary, vecs: &[&[f64]]) -> Result<(), HeadError> {
    params.check_shapes()?;
    if dict.dim() != params.dim() {
        return Err(HeadError::ShapeMismatch(format!(
            "dictionary width {} vs head width {}",
            dict.dim(),
            params.dim()
        )));
    }
    if let Some(v) = vecs.iter().find(|v| v.len() != params.dim()) {
        return Err(HeadError::ShapeMismatch(format!(
            "feature of width {} vs head width {}",
            v.len(),
            params.dim()
        )));
    }
    Ok(())
}

/// Expected confounder for context `y` under the dictionary's variant.
fn confounder_term(
    y: &[f64],
    dict: &ConfounderDictionary,
    keys: &Matrix,
    params: &HeadParams,
    opts: &HeadOptions,
) -> Result<(Vec<f64>, Vec<f64>, f64), HeadError> {
    if dict.variant() == DictVariant::ExpectationOnly {
        let ec = prior_expectation(dict);
        return Ok((Vec::new(), ec, 1.0));
    }
    let q = params.w3.matvec(y);
    let a = attention_from_keys(&q, keys)?;
    let (ec, mass) = expected_confounder(&a, dict, opts.renormalize);
    Ok((a, ec, mass))
}

/// Context class distribution for center `x` and context `y`.
pub fn context_prob(
    x: &[f64],
    y: &[f64],
    dict: &ConfounderDictionary,
    params: &HeadParams,
    opts: &HeadOptions,
) -> Result<Vec<f64>, HeadError> {
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(HeadError::NonFiniteInput);
    }
    check_dims(params, dict, &[x, y])?;
    let logits = match opts.mode {
        ContextMode::Correlation => params.w1.matvec(x),
        ContextMode::Intervention => {
            let keys = dictionary_keys(dict, params);
            let (_, ec, _) = confounder_term(y, dict, &keys, params, opts)?;
            context_logits(x, &ec, params)
        }
    };
    linalg::softmax(&logits).ok_or(HeadError::NonFiniteInput)
}

/// `softmax(Ws x)`.
pub fn self_prob(x: &[f64], params: &HeadParams) -> Result<Vec<f64>, HeadError> {
    if x.len() != params.dim() {
        return Err(HeadError::ShapeMismatch(format!("feature width {}", x.len())));
    }
    linalg::softmax(&params.ws.matvec(x)).ok_or(HeadError::NonFiniteInput)
}

/// Mean loss over the centers of a batch, split into its two terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub self_term: f64,
    pub context_term: f64,
    pub centers: usize,
}

/// `−ln 1e−12`: reported losses treat probabilities below 1e−12 as 1e−12.
const LOSS_CAP: f64 = 27.631021115928547;

/// Cross-entropy `−log softmax(logits)[class]` via log-sum-exp, with the
/// largest term split off so confident predictions keep a positive loss.
fn cross_entropy(logits: &[f64], class: usize) -> f64 {
    let top = argmax(logits);
    let max = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &l)| (l - max).exp())
        .sum();
    ((max - logits[class]) + rest.ln_1p()).min(LOSS_CAP)
}

/// Cached forward quantities for one context of one center.
pub(crate) struct ContextForward {
    pub q: Vec<f64>,
    pub a: Vec<f64>,
    pub mass: f64,
    pub ec: Vec<f64>,
    pub p: Vec<f64>,
}

pub(crate) struct CenterForward {
    pub p_self: Vec<f64>,
    pub contexts: Vec<ContextForward>,
    pub self_loss: f64,
    pub context_loss: f64,
}

pub(crate) fn forward_center(
    c: &CenterSample,
    dict: &ConfounderDictionary,
    keys: &Matrix,
    params: &HeadParams,
    opts: &HeadOptions,
) -> Result<CenterForward, HeadError> {
    let s = params.ws.matvec(&c.feature);
    let self_loss = cross_entropy(&s, c.class);
    let p_self = linalg::softmax(&s).ok_or(HeadError::NonFiniteInput)?;
    let direct = params.w1.matvec(&c.feature);
    let mut contexts = Vec::with_capacity(c.contexts.len());
    let mut context_loss = 0.0;
    for y in &c.contexts {
        let (q, a, ec, mass, logits) = match opts.mode {
            ContextMode::Correlation => (Vec::new(), Vec::new(), Vec::new(), 0.0, direct.clone()),
            ContextMode::Intervention => {
                let (q, a, ec, mass) = if dict.variant() == DictVariant::ExpectationOnly {
                    (Vec::new(), Vec::new(), prior_expectation(dict), 1.0)
                } else {
                    let q = params.w3.matvec(&y.feature);
                    let a = attention_from_keys(&q, keys)?;
                    let (ec, mass) = expected_confounder(&a, dict, opts.renormalize);
                    (q, a, ec, mass)
                };
                let mut logits = direct.clone();
                linalg::axpy(1.0, &params.w2.matvec(&ec), &mut logits);
                (q, a, ec, mass, logits)
            }
        };
        context_loss += cross_entropy(&logits, y.class);
        let p = linalg::softmax(&logits).ok_or(HeadError::NonFiniteInput)?;
        contexts.push(ContextForward { q, a, mass, ec, p });
    }
    context_loss /= c.contexts.len() as f64;
    Ok(CenterForward {
        p_self,
        contexts,
        self_loss,
        context_loss,
    })
}

/// Mean per-center loss over the batch.
pub fn loss(
    batch: &PairBatch,
    dicts: DictSource<'_>,
    params: &HeadParams,
    opts: &HeadOptions,
) -> Result<LossBreakdown, HeadError> {
    params.check_shapes()?;
    batch.validate(params.n(), params.dim())?;
    let mut out = LossBreakdown::default();
    let mut cached: Option<(*const ConfounderDictionary, Matrix)> = None;
    for c in &batch.centers {
        let dict = dicts.for_center(c);
        let keys = match &cached {
            Some((ptr, k)) if std::ptr::eq(*ptr, dict) => k,
            _ => {
                check_dims(params, dict, &[])?;
                cached = Some((dict as *const _, dictionary_keys(dict, params)));
                &cached.as_ref().expect("just set").1
            }
        };
        let f = forward_center(c, dict, keys, params, opts)?;
        out.self_term += f.self_loss;
        out.context_term += f.context_loss;
    }
    let b = batch.len();
    if b > 0 {
        out.self_term /= b as f64;
        out.context_term /= b as f64;
    }
    out.total = out.self_term + out.context_term;
    out.centers = b;
    Ok(out)
}

/// Context top-1 accuracy over every (center, context) pair.
pub fn context_accuracy(
    batch: &PairBatch,
    dicts: DictSource<'_>,
    params: &HeadParams,
    opts: &HeadOptions,
) -> Result<f64, HeadError> {
    let (mut hit, mut total) = (0usize, 0usize);
    for c in &batch.centers {
        let dict = dicts.for_center(c);
        let keys = dictionary_keys(dict, params);
        let f = forward_center(c, dict, &keys, params, opts)?;
        for (y, cf) in c.contexts.iter().zip(&f.contexts) {
            total += 1;
            hit += usize::from(argmax(&cf.p) == y.class);
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}
