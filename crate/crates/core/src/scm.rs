//! Discrete structural causal model over object-presence variables.
//!
//! Hidden binary confounders `h_0..h_{H-1}` are drawn from their priors.
//! Each category `c` is then present with probability
//! `presence[c][s]`, where `s` packs the states of `c`'s confounder parents
//! (bit `i` = state of `parents[c][i]`). Optional direct effects add a logit
//! boost `δ[x][y]` to `y` whenever `x` is present; categories are sampled in
//! a topological order of those effects. Probabilities of exactly 0 or 1 are
//! left untouched by direct effects.
//!
//! Exact probabilities come from enumerating every confounder and category
//! assignment. An intervention `do(x present)` removes `x`'s own factor and
//! clamps it to present (graph surgery), keeping its outgoing effects.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annot::PresenceSet;
use crate::rng::{stream_rng, Stream};
use crate::stats::SceneMask;

/// Scenes drawn per sub-stream; each block has its own derived seed.
pub const SCENE_BLOCK: usize = 4096;

const MAX_CATEGORIES: usize = 20;
const MAX_CONFOUNDERS: usize = 8;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("P(category {0} present) = 0; conditioning is undefined")]
    UnreachableCondition(usize),
    #[error("category {0} out of range")]
    CategoryOutOfRange(usize),
    #[error("world file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("world file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectEffect {
    pub from: usize,
    pub to: usize,
    /// Additive logit boost on `to` when `from` is present.
    pub logit: f64,
}

/// World description; the JSON file form uses the same field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmWorld {
    pub n_categories: usize,
    pub n_confounders: usize,
    #[serde(default)]
    pub names: Vec<String>,
    pub confounder_priors: Vec<f64>,
    /// Confounder parents of each category.
    pub parents: Vec<Vec<usize>>,
    /// `presence[c]` has `2^parents[c].len()` entries.
    pub presence: Vec<Vec<f64>>,
    #[serde(default)]
    pub direct_effects: Vec<DirectEffect>,
    #[serde(skip)]
    order: Vec<usize>,
}

impl ScmWorld {
    pub fn new(
        n_categories: usize,
        confounder_priors: Vec<f64>,
        parents: Vec<Vec<usize>>,
        presence: Vec<Vec<f64>>,
        direct_effects: Vec<DirectEffect>,
    ) -> Result<Self, ScmError> {
        let mut w = Self {
            n_categories,
            n_confounders: confounder_priors.len(),
            names: Vec::new(),
            confounder_priors,
            parents,
            presence,
            direct_effects,
            order: Vec::new(),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn with_names<S: Into<String>>(mut self, names: Vec<S>) -> Result<Self, ScmError> {
        self.names = names.into_iter().map(Into::into).collect();
        self.validate()?;
        Ok(self)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ScmError> {
        let mut w: ScmWorld = serde_json::from_slice(bytes)?;
        w.validate()?;
        Ok(w)
    }

    pub fn load(path: &Path) -> Result<Self, ScmError> {
        let bytes = std::fs::read(path).map_err(|source| ScmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    /// Checks shapes and probabilities and computes the sampling order.
    pub fn validate(&mut self) -> Result<(), ScmError> {
        let bad = |m: String| Err(ScmError::InvalidWorld(m));
        let (n, h) = (self.n_categories, self.confounder_priors.len());
        if n == 0 || n > MAX_CATEGORIES {
            return bad(format!("n_categories must be in 1..={MAX_CATEGORIES}, got {n}"));
        }
        if h > MAX_CONFOUNDERS {
            return bad(format!("at most {MAX_CONFOUNDERS} confounders, got {h}"));
        }
        if self.n_confounders != h {
            return bad(format!(
                "n_confounders = {} but {h} priors given",
                self.n_confounders
            ));
        }
        if self.confounder_priors.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("confounder priors must lie in [0, 1]".into());
        }
        if self.parents.len() != n || self.presence.len() != n {
            return bad("parents and presence need one entry per category".into());
        }
        if !self.names.is_empty() {
            if self.names.len() != n {
                return bad(format!("{} names for {n} categories", self.names.len()));
            }
            let distinct: BTreeSet<&String> = self.names.iter().collect();
            if distinct.len() != n || self.names.iter().any(|s| s.is_empty() || s.contains(['\t', '\n'])) {
                return bad("category names must be unique, non-empty, without tabs".into());
            }
        }
        for c in 0..n {
            let ps = &self.parents[c];
            if ps.iter().any(|&p| p >= h) {
                return bad(format!("category {c} has an unknown confounder parent"));
            }
            if ps.iter().collect::<BTreeSet<_>>().len() != ps.len() {
                return bad(format!("category {c} lists a confounder parent twice"));
            }
            if self.presence[c].len() != 1 << ps.len() {
                return bad(format!(
                    "category {c}: presence table needs {} entries",
                    1 << ps.len()
                ));
            }
            if self.presence[c].iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("category {c}: probabilities must lie in [0, 1]"));
            }
        }
        for e in &self.direct_effects {
            if e.from >= n || e.to >= n || e.from == e.to || !e.logit.is_finite() {
                return bad(format!("invalid direct effect {} -> {}", e.from, e.to));
            }
        }
        // Kahn's algorithm, smallest index first for a stable order.
        let mut indeg = vec![0usize; n];
        for e in &self.direct_effects {
            indeg[e.to] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&c| indeg[c] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(c) = ready.pop_first() {
            order.push(c);
            for e in self.direct_effects.iter().filter(|e| e.from == c) {
                indeg[e.to] -= 1;
                if indeg[e.to] == 0 {
                    ready.insert(e.to);
                }
            }
        }
        if order.len() != n {
            return bad("direct effects contain a cycle".into());
        }
        self.order = order;
        Ok(())
    }

    pub fn category_name(&self, c: usize) -> String {
        self.names.get(c).cloned().unwrap_or_else(|| format!("c{c}"))
    }

    pub fn category_names(&self) -> Vec<String> {
        (0..self.n_categories).map(|c| self.category_name(c)).collect()
    }

    /// Categories acting as exact observable copies of one confounder:
    /// a single confounder parent, table `[0, 1]`, no incoming effects.
    pub fn proxy_categories(&self) -> Vec<usize> {
        (0..self.n_categories)
            .filter(|&c| {
                self.parents[c].len() == 1
                    && self.presence[c] == [0.0, 1.0]
                    && !self.direct_effects.iter().any(|e| e.to == c)
            })
            .collect()
    }

    /// Category parents of `c` through direct effects.
    pub fn category_parents(&self, c: usize) -> Vec<usize> {
        let s: BTreeSet<usize> = self
            .direct_effects
            .iter()
            .filter(|e| e.to == c)
            .map(|e| e.from)
            .collect();
        s.into_iter().collect()
    }

    /// Observed adjustment set for `do(x)`: every proxy plus `x`'s category
    /// parents, excluding `x`. Valid when every confounder parent of `x` has
    /// a proxy.
    pub fn backdoor_set(&self, x: usize) -> Vec<usize> {
        let s: BTreeSet<usize> = self
            .proxy_categories()
            .into_iter()
            .chain(self.category_parents(x))
            .filter(|&c| c != x)
            .collect();
        s.into_iter().collect()
    }

    /// Whether every confounder parent of `x` has a proxy category.
    pub fn confounders_proxied(&self, x: usize) -> bool {
        let proxied: BTreeSet<usize> = self
            .proxy_categories()
            .into_iter()
            .map(|c| self.parents[c][0])
            .collect();
        self.parents[x].iter().all(|h| proxied.contains(h))
    }

    /// Presence probability of `c` given confounder states and the
    /// categories already decided.
    fn presence_prob(&self, c: usize, confounders: u64, present: u64) -> f64 {
        let s = self.parents[c]
            .iter()
            .enumerate()
            .fold(0usize, |s, (i, &h)| s | (((confounders >> h) & 1) as usize) << i);
        let base = self.presence[c][s];
        if base <= 0.0 || base >= 1.0 {
            return base;
        }
        let boost: f64 = self
            .direct_effects
            .iter()
            .filter(|e| e.to == c && present >> e.from & 1 == 1)
            .map(|e| e.logit)
            .sum();
        if boost == 0.0 {
            return base;
        }
        let logit = (base / (1.0 - base)).ln() + boost;
        1.0 / (1.0 + (-logit).exp())
    }

    /// Calls `visit(confounders, present, weight)` for every full assignment
    /// of nonzero probability. With `clamp = Some(x)`, `x` is forced present
    /// and its own factor dropped.
    fn enumerate(&self, clamp: Option<usize>, visit: &mut dyn FnMut(u64, u64, f64)) {
        let h = self.n_confounders;
        for conf in 0u64..1 << h {
            let w: f64 = (0..h)
                .map(|i| {
                    let p = self.confounder_priors[i];
                    if conf >> i & 1 == 1 {
                        p
                    } else {
                        1.0 - p
                    }
                })
                .product();
            if w > 0.0 {
                self.enumerate_categories(conf, 0, 0, w, clamp, visit);
            }
        }
    }

    fn enumerate_categories(
        &self,
        conf: u64,
        depth: usize,
        present: u64,
        weight: f64,
        clamp: Option<usize>,
        visit: &mut dyn FnMut(u64, u64, f64),
    ) {
        if depth == self.n_categories {
            visit(conf, present, weight);
            return;
        }
        let c = self.order[depth];
        if clamp == Some(c) {
            self.enumerate_categories(conf, depth + 1, present | 1 << c, weight, clamp, visit);
            return;
        }
        let p = self.presence_prob(c, conf, present);
        if p > 0.0 {
            self.enumerate_categories(conf, depth + 1, present | 1 << c, weight * p, clamp, visit);
        }
        if p < 1.0 {
            self.enumerate_categories(conf, depth + 1, present, weight * (1.0 - p), clamp, visit);
        }
    }

    fn check(&self, c: usize) -> Result<(), ScmError> {
        if c < self.n_categories {
            Ok(())
        } else {
            Err(ScmError::CategoryOutOfRange(c))
        }
    }

    /// Exact `P(y present)`.
    pub fn oracle_marginal(&self, y: usize) -> Result<f64, ScmError> {
        self.check(y)?;
        let mut p = 0.0;
        self.enumerate(None, &mut |_, present, w| {
            if present >> y & 1 == 1 {
                p += w;
            }
        });
        Ok(p)
    }

    /// Exact `P(y present | x present)` by enumeration.
    pub fn oracle_conditional(&self, x: usize, y: usize) -> Result<f64, ScmError> {
        self.check(x)?;
        self.check(y)?;
        let (mut px, mut pxy) = (0.0, 0.0);
        self.enumerate(None, &mut |_, present, w| {
            if present >> x & 1 == 1 {
                px += w;
                if present >> y & 1 == 1 {
                    pxy += w;
                }
            }
        });
        if px <= 0.0 {
            return Err(ScmError::UnreachableCondition(x));
        }
        Ok(pxy / px)
    }

    /// Exact `P(y present | do(x present))` in the mutilated model.
    pub fn oracle_intervention(&self, x: usize, y: usize) -> Result<f64, ScmError> {
        self.check(x)?;
        self.check(y)?;
        let mut p = 0.0;
        self.enumerate(Some(x), &mut |_, present, w| {
            if present >> y & 1 == 1 {
                p += w;
            }
        });
        Ok(p)
    }

    /// Full `N × N` oracle tables `(conditional, interventional)`; rows for
    /// unreachable `x` are `None` in the conditional table.
    pub fn oracle_tables(&self) -> (Vec<Option<Vec<f64>>>, Vec<Vec<f64>>) {
        let n = self.n_categories;
        let cond = (0..n)
            .map(|x| {
                (0..n)
                    .map(|y| self.oracle_conditional(x, y).ok())
                    .collect::<Option<Vec<f64>>>()
            })
            .collect();
        let intv = (0..n)
            .map(|x| {
                (0..n)
                    .map(|y| self.oracle_intervention(x, y).expect("valid indices"))
                    .collect()
            })
            .collect();
        (cond, intv)
    }

    fn sample_one(&self, rng: &mut crate::rng::Rng) -> SceneSample {
        let mut conf = 0u64;
        for (i, &p) in self.confounder_priors.iter().enumerate() {
            if rng.gen::<f64>() < p {
                conf |= 1 << i;
            }
        }
        let mut present = 0u64;
        for &c in &self.order {
            let p = self.presence_prob(c, conf, present);
            if rng.gen::<f64>() < p {
                present |= 1 << c;
            }
        }
        SceneSample {
            present,
            confounders: conf,
        }
    }
}

/// One sampled scene. Confounder states are kept for feature synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneSample {
    pub present: SceneMask,
    pub confounders: u64,
}

impl SceneSample {
    pub fn is_present(&self, c: usize) -> bool {
        self.present >> c & 1 == 1
    }

    pub fn confounder(&self, h: usize) -> bool {
        self.confounders >> h & 1 == 1
    }

    pub fn presence_set(&self) -> PresenceSet {
        (0..64).filter(|&c| self.is_present(c)).collect()
    }
}

/// `m` i.i.d. ancestral samples. Block `b` of [`SCENE_BLOCK`] scenes draws
/// from sub-stream `b` of `seed`, so output is independent of `workers`.
pub fn sample_scenes(world: &ScmWorld, m: usize, seed: u64) -> Vec<SceneSample> {
    sample_scenes_parallel(world, m, seed, 1)
}

pub fn sample_scenes_parallel(
    world: &ScmWorld,
    m: usize,
    seed: u64,
    workers: usize,
) -> Vec<SceneSample> {
    let blocks = m.div_ceil(SCENE_BLOCK);
    let draw_block = |b: usize| -> Vec<SceneSample> {
        let len = SCENE_BLOCK.min(m - b * SCENE_BLOCK);
        let mut rng = stream_rng(seed, Stream::Scenes, b as u64);
        (0..len).map(|_| world.sample_one(&mut rng)).collect()
    };
    let workers = workers.max(1).min(blocks.max(1));
    if workers == 1 {
        return (0..blocks).flat_map(draw_block).collect();
    }
    let mut parts: Vec<Vec<SceneSample>> = vec![Vec::new(); blocks];
    std::thread::scope(|s| {
        let chunks: Vec<_> = parts
            .chunks_mut(blocks.div_ceil(workers))
            .enumerate()
            .map(|(ci, chunk)| {
                let draw_block = &draw_block;
                let first = ci * blocks.div_ceil(workers);
                s.spawn(move || {
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        *slot = draw_block(first + k);
                    }
                })
            })
            .collect();
        for h in chunks {
            h.join().expect("sampling worker panicked");
        }
    });
    parts.into_iter().flatten().collect()
}

/// Scenes in the annotation TSV form: `scene_index<TAB>category_name`.
pub fn scenes_to_tsv(world: &ScmWorld, scenes: &[SceneSample]) -> String {
    let names = world.category_names();
    let mut out = String::new();
    for (i, s) in scenes.iter().enumerate() {
        for c in (0..world.n_categories).filter(|&c| s.is_present(c)) {
            let _ = writeln!(out, "{i}\t{}", names[c]);
        }
    }
    out
}

/// The shipped 6-category, 2-confounder reference world.
///
/// `wall` and `road` are exact proxies of the confounders `indoor` and
/// `street`. `toilet` and `person` share the `indoor` confounder, and
/// `toilet` also raises `person` and `sink` directly.
pub fn reference_world() -> ScmWorld {
    ScmWorld::from_json(REFERENCE_WORLD_JSON.as_bytes()).expect("reference world is valid")
}

pub const REFERENCE_WORLD_JSON: &str = include_str!("../fixtures/reference_world.json");
