use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::grad::backward_with_workers;
use super::{
    loss, Block, CenterSample, ContextSample, DictSource, HeadError, HeadOptions, HeadParams, LossBreakdown,
    PairBatch,
};
use crate::dict::{ConfounderDictionary, DictVariant};
use crate::fmat::{self, RegionFeatureSet};
use crate::ncc::{self, NccModel};
use crate::rng::{stream_rng, Stream};
use crate::stats::fmt_sig6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `total_steps`, ascending in (0, 1).
    pub decay_milestones: Vec<f64>,
    pub decay_factor: f64,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub total_steps: Option<usize>,
    pub batch_images: usize,
    pub sigma: usize,
    pub seed: u64,
    pub log_every: usize,
    pub max_contexts: Option<usize>,
    pub workers: usize,
    pub allow_context_variant: bool,
    pub options: HeadOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_milestones: vec![160.0 / 220.0, 200.0 / 220.0],
            decay_factor: 0.1,
            epochs: 20,
            total_steps: None,
            batch_images: 16,
            sigma: 64,
            seed: 0,
            log_every: 10,
            max_contexts: None,
            workers: 1,
            allow_context_variant: false,
            options: HeadOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        let bad = |m: &str| Err(HeadError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !self.decay_milestones.iter().all(|&m| m > 0.0 && m < 1.0)
            || self.decay_milestones.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("decay milestones must be ascending in (0, 1)");
        }
        if self.batch_images == 0 || self.sigma == 0 || self.log_every == 0 {
            return bad("batch_images, sigma and log_every must be >= 1");
        }
        if self.max_contexts == Some(0) {
            return bad("max_contexts must be >= 1");
        }
        Ok(())
    }
}

/// Step indices at which the rate decays.
pub fn milestone_steps(cfg: &TrainConfig, total_steps: usize) -> Vec<usize> {
    cfg.decay_milestones
        .iter()
        .map(|f| (f * total_steps as f64).round() as usize)
        .collect()
}

/// Learning rate in effect at `step` (0-based).
pub fn lr_at(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let passed = milestone_steps(cfg, total_steps).iter().filter(|&&m| step >= m).count();
    let mut lr = cfg.learning_rate;
    for _ in 0..passed {
        lr *= cfg.decay_factor;
    }
    lr
}

/// Center samples grouped by image. Each region is a center whose contexts
/// are the image's other regions; single-region images contribute nothing.
pub fn build_centers(
    features: &RegionFeatureSet,
    max_contexts: Option<usize>,
    seed: u64,
) -> Vec<(u64, Vec<CenterSample>)> {
    let mut out = Vec::new();
    for (img_ord, (image_id, rows)) in features.rows_by_image().into_iter().enumerate() {
        if rows.len() < 2 {
            continue;
        }
        let feats: Vec<Vec<f64>> = rows.iter().map(|&r| features.row(r)).collect();
        let mut rng = stream_rng(seed, Stream::Shuffle, (1 << 31) | img_ord as u64);
        let centers = rows
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let key = features.key(r);
                let mut others: Vec<usize> = (0..rows.len()).filter(|&j| j != i).collect();
                if let Some(k) = max_contexts {
                    if others.len() > k {
                        others.shuffle(&mut rng);
                        others.truncate(k);
                        others.sort_unstable();
                    }
                }
                CenterSample {
                    image_id,
                    region_id: key.region_id,
                    feature: feats[i].clone(),
                    class: key.category as usize,
                    contexts: others
                        .into_iter()
                        .map(|j| ContextSample {
                            feature: feats[j].clone(),
                            class: features.key(rows[j]).category as usize,
                        })
                        .collect(),
                }
            })
            .collect();
        out.push((image_id, centers));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub total: f64,
    pub self_term: f64,
    pub context_term: f64,
    pub lr: f64,
}

/// NCC-based sample filtering applied to every training batch.
#[derive(Debug, Clone)]
pub struct NccFilterConfig {
    pub model: NccModel,
    pub tau: f64,
    pub top_r: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub steps: usize,
    pub curve: Vec<LossPoint>,
    /// Full-data loss before training, then after each epoch.
    pub epoch_losses: Vec<LossBreakdown>,
    pub dropped_pairs: usize,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,loss_total,loss_self,loss_cxt,lr\n");
        for p in &self.curve {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.step,
                fmt_sig6(p.total),
                fmt_sig6(p.self_term),
                fmt_sig6(p.context_term),
                fmt_sig6(p.lr)
            ));
        }
        s
    }
}

/// Per-image dictionaries for the context variant.
fn context_dictionaries(
    features: &RegionFeatureSet,
    n: usize,
) -> Result<HashMap<u64, ConfounderDictionary>, HeadError> {
    let mut out = HashMap::new();
    for (image_id, rows) in features.rows_by_image() {
        let feats: Vec<(usize, Vec<f64>)> =
            rows.iter().map(|&r| (features.key(r).category as usize, features.row(r))).collect();
        let refs: Vec<(usize, &[f64])> = feats.iter().map(|(c, f)| (*c, f.as_slice())).collect();
        out.insert(image_id, ConfounderDictionary::build_context(&refs, n, features.dim())?);
    }
    Ok(out)
}

/// Mean loss over all centers.
pub fn evaluate(
    groups: &[(u64, Vec<CenterSample>)],
    dicts: DictSource<'_>,
    params: &HeadParams,
    opts: &HeadOptions,
) -> Result<LossBreakdown, HeadError> {
    let batch = PairBatch {
        centers: groups.iter().flat_map(|(_, c)| c.iter().cloned()).collect(),
    };
    loss(&batch, dicts, params, opts)
}

/// SGD with momentum on the multi-task loss. `dict` is the shared
/// dictionary; with the context variant it only fixes `N` and per-image
/// dictionaries are built from `features`.
pub fn train(
    features: &RegionFeatureSet,
    dict: &ConfounderDictionary,
    cfg: &TrainConfig,
    filter: Option<&NccFilterConfig>,
) -> Result<TrainOutcome, HeadError> {
    cfg.validate()?;
    let n = dict.n();
    let d = features.dim();
    if dict.dim() != d {
        return Err(HeadError::ShapeMismatch(format!("dictionary width {} vs features {d}", dict.dim())));
    }
    if features.n_categories() > n {
        return Err(HeadError::ShapeMismatch(format!(
            "features use {} categories, dictionary has {n}",
            features.n_categories()
        )));
    }
    let per_image;
    let dicts = if dict.variant() == DictVariant::Context {
        if !cfg.allow_context_variant {
            return Err(HeadError::ContextVariantDisabled);
        }
        per_image = context_dictionaries(features, n)?;
        DictSource::PerImage(&per_image)
    } else {
        DictSource::Shared(dict)
    };

    let groups = build_centers(features, cfg.max_contexts, cfg.seed);
    let steps_per_epoch = groups.len().div_ceil(cfg.batch_images);
    let total_steps = cfg.total_steps.unwrap_or(cfg.epochs * steps_per_epoch);

    let mut params = HeadParams::init(n, d, cfg.sigma, cfg.seed);
    let mut velocity = HeadParams::zeros(n, d, cfg.sigma);
    let mut curve = Vec::new();
    let mut epoch_losses = vec![evaluate(&groups, dicts, &params, &cfg.options)?];
    let mut dropped_pairs = 0;
    let mut step = 0;
    let mut epoch = 0u64;
    let mut order: Vec<usize> = (0..groups.len()).collect();

    while step < total_steps && steps_per_epoch > 0 {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, epoch));
        for chunk in order.chunks(cfg.batch_images) {
            if step >= total_steps {
                break;
            }
            let mut batch = PairBatch {
                centers: chunk.iter().flat_map(|&g| groups[g].1.iter().cloned()).collect(),
            };
            if let Some(f) = filter {
                let before = batch.n_pairs();
                batch = ncc::filter_samples(&batch, dicts, &params, &f.model, f.tau, f.top_r)
                    .map_err(|e| HeadError::Ncc(e.to_string()))?;
                dropped_pairs += before - batch.n_pairs();
            }
            let lr = lr_at(cfg, step, total_steps);
            let (l, grads) = match backward_with_workers(&batch, dicts, &params, &cfg.options, cfg.workers) {
                Ok(r) => r,
                Err(HeadError::NonFiniteInput) => return Err(HeadError::DivergedLoss { step }),
                Err(e) => return Err(e),
            };
            if !l.total.is_finite() {
                return Err(HeadError::DivergedLoss { step });
            }
            for b in Block::ALL {
                let w = params.block_mut(b).as_mut_slice();
                let v = velocity.block_mut(b).as_mut_slice();
                for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(grads.block(b).as_slice()) {
                    *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *wi;
                    *wi -= lr * *vi;
                }
            }
            if !params.is_finite() {
                return Err(HeadError::DivergedLoss { step });
            }
            if step % cfg.log_every == 0 || step + 1 == total_steps {
                curve.push(LossPoint {
                    step,
                    total: l.total,
                    self_term: l.self_term,
                    context_term: l.context_term,
                    lr,
                });
            }
            step += 1;
        }
        epoch += 1;
        let eval = match evaluate(&groups, dicts, &params, &cfg.options) {
            Ok(e) if e.total.is_finite() => e,
            _ => return Err(HeadError::DivergedLoss { step }),
        };
        epoch_losses.push(eval);
    }
    Ok(TrainOutcome {
        params,
        steps: step,
        curve,
        epoch_losses,
        dropped_pairs,
    })
}

/// Which vector is exported per region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `W1 x`
    #[default]
    Direct,
    /// `x` unchanged
    Passthrough,
    /// `Ws x`
    Logits,
}

impl std::str::FromStr for FeatureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" | "w1x" => Ok(Self::Direct),
            "passthrough" | "x" => Ok(Self::Passthrough),
            "logits" => Ok(Self::Logits),
            _ => Err(format!("unknown feature mode `{s}` (direct, passthrough, logits)")),
        }
    }
}

/// One VC feature row per region, same index as the input.
pub fn extract_features(
    regions: &RegionFeatureSet,
    params: &HeadParams,
    mode: FeatureMode,
) -> Result<RegionFeatureSet, HeadError> {
    if regions.dim() != params.dim() {
        return Err(HeadError::ShapeMismatch(format!(
            "features of width {} vs head width {}",
            regions.dim(),
            params.dim()
        )));
    }
    let out_dim = match mode {
        FeatureMode::Passthrough => params.dim(),
        _ => params.n(),
    };
    let rows: Vec<Vec<f64>> = (0..regions.len())
        .map(|r| {
            let x = regions.row(r);
            match mode {
                FeatureMode::Direct => params.w1.matvec(&x),
                FeatureMode::Passthrough => x,
                FeatureMode::Logits => params.ws.matvec(&x),
            }
        })
        .collect();
    Ok(RegionFeatureSet::from_f64_rows(out_dim, &rows, regions.index().to_vec())?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    n: usize,
    d: usize,
    sigma: usize,
    step: usize,
    seed: u64,
    config: TrainConfig,
}

const CHECKPOINT_FORMAT: &str = "vc-head/1";

/// Weights plus the run settings, one FMAT file per block.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: HeadParams,
    pub step: usize,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<(), HeadError> {
        std::fs::create_dir_all(dir).map_err(|e| HeadError::Checkpoint(format!("{}: {e}", dir.display())))?;
        for b in Block::ALL {
            let set = RegionFeatureSet::from_matrix(self.params.block(b));
            fmat::write_fmat(&dir.join(format!("{}.fmat", b.name())), &set)?;
        }
        let m = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            n: self.params.n(),
            d: self.params.dim(),
            sigma: self.params.sigma(),
            step: self.step,
            seed: self.config.seed,
            config: self.config.clone(),
        };
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fmat::write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, HeadError> {
        let path = dir.join("manifest.json");
        let text =
            std::fs::read_to_string(&path).map_err(|e| HeadError::Checkpoint(format!("{}: {e}", path.display())))?;
        let m: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| HeadError::Checkpoint(format!("{}: {e}", path.display())))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(HeadError::Checkpoint(format!("unknown checkpoint format `{}`", m.format)));
        }
        let mut params = HeadParams::zeros(m.n, m.d, m.sigma);
        for b in Block::ALL {
            let set = fmat::read_fmat(&dir.join(format!("{}.fmat", b.name())))?;
            let mat = set.to_matrix();
            if mat.shape() != params.block(b).shape() {
                return Err(HeadError::Checkpoint(format!(
                    "{} has shape {:?}, manifest implies {:?}",
                    b.name(),
                    mat.shape(),
                    params.block(b).shape()
                )));
            }
            *params.block_mut(b) = mat;
        }
        Ok(Self {
            params,
            step: m.step,
            config: m.config,
        })
    }
}
