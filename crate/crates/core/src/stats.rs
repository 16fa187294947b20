//! Conditional versus interventional context distributions from presence
//! sets.
//!
//! The elementary event is `(image, ordered pair (x, y), context z)` with
//! `x`, `y`, `z` pairwise distinct categories present in the image. Every
//! probability below is a ratio of marginals of one triple tensor
//! `C[x][y][z]`, so the total-probability identity
//! `Σ_z P(y|x,z)·P(z|x) = P(y|x)` holds up to rounding:
//!
//! ```text
//! P(y|x)      = C(x,y) / C(x)
//! P(y|x,z)    = C[x][y][z] / C(x,z)
//! P(z|x)      = C(x,z) / C(x)
//! P(z)        = Σ_{x,y} C[x][y][z] / total
//! P(y|do(x))  = Σ_z P(y|x,z) · P(z)
//! ```
//!
//! [`label_backdoor`] is the pair-level variant over raw presence bit
//! vectors, adjusting for an explicit set of observed categories.

use std::fmt::Write as _;

use thiserror::Error;

use crate::annot::PresenceSet;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("presence set {index} has {size} categories; triple counting needs at least 3")]
    SetTooSmall { index: usize, size: usize },
    #[error("category {category} out of range for N = {n}")]
    CategoryOutOfRange { category: usize, n: usize },
    #[error("category {0} has no support (C(x) = 0)")]
    RowUnsupported(usize),
    #[error("tables disagree on shape or support mask")]
    TableMismatch,
    #[error("label-level estimation supports at most 64 categories, got {0}")]
    TooManyCategories(usize),
    #[error("adjustment set of {0} categories is too large to stratify")]
    AdjustmentTooLarge(usize),
    #[error("count tensor has {got} entries, expected {expected}")]
    BadTensorLength { got: usize, expected: usize },
    #[error("nonzero count at ({0}, {1}, {2}); x, y, z must be distinct")]
    RepeatedIndex(usize, usize, usize),
}

/// Triple co-occurrence counts `C[x][y][z]` over dense category indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoocCounts {
    n: usize,
    counts: Vec<u64>,
    total: u64,
}

impl CoocCounts {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n * n],
            total: 0,
        }
    }

    #[inline]
    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.n + y) * self.n + z
    }

    /// Builds counts from a dense row-major `[x][y][z]` tensor. Entries with
    /// repeated indices must be zero.
    pub fn from_dense(n: usize, counts: Vec<u64>) -> Result<Self, StatsError> {
        if counts.len() != n * n * n {
            return Err(StatsError::BadTensorLength {
                got: counts.len(),
                expected: n * n * n,
            });
        }
        for (i, &c) in counts.iter().enumerate() {
            let (x, y, z) = (i / (n * n), i / n % n, i % n);
            if c > 0 && (x == y || y == z || x == z) {
                return Err(StatsError::RepeatedIndex(x, y, z));
            }
        }
        let total = counts.iter().sum();
        Ok(Self { n, counts, total })
    }

    pub fn n_categories(&self) -> usize {
        self.n
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u64 {
        self.counts[self.idx(x, y, z)]
    }

    /// `C(x, y) = Σ_z C[x][y][z]`
    pub fn pair(&self, x: usize, y: usize) -> u64 {
        let base = self.idx(x, y, 0);
        self.counts[base..base + self.n].iter().sum()
    }

    /// `C(x) = Σ_{y,z} C[x][y][z]`
    pub fn row(&self, x: usize) -> u64 {
        let base = self.idx(x, 0, 0);
        self.counts[base..base + self.n * self.n].iter().sum()
    }

    /// `C(x, z) = Σ_y C[x][y][z]`
    pub fn center_context(&self, x: usize, z: usize) -> u64 {
        (0..self.n).map(|y| self.get(x, y, z)).sum()
    }

    /// `Σ_{x,y} C[x][y][z]`
    pub fn context(&self, z: usize) -> u64 {
        (0..self.n * self.n).map(|xy| self.counts[xy * self.n + z]).sum()
    }

    /// Adds every event of one presence set.
    pub fn add_set(&mut self, set: &PresenceSet) -> Result<(), StatsError> {
        if let Some(&c) = set.iter().find(|&&c| c >= self.n) {
            return Err(StatsError::CategoryOutOfRange {
                category: c,
                n: self.n,
            });
        }
        let items: Vec<usize> = set.iter().copied().collect();
        for &x in &items {
            for &y in &items {
                if y == x {
                    continue;
                }
                for &z in &items {
                    if z == x || z == y {
                        continue;
                    }
                    let i = self.idx(x, y, z);
                    self.counts[i] += 1;
                    self.total += 1;
                }
            }
        }
        Ok(())
    }

    /// Entrywise sum. Panics if the category counts differ.
    pub fn merge(&mut self, other: &CoocCounts) {
        assert_eq!(self.n, other.n, "merging counts over different taxonomies");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    /// Relabels categories: new index of old category `c` is `perm[c]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n);
        let mut out = Self::new(self.n);
        for x in 0..self.n {
            for y in 0..self.n {
                for z in 0..self.n {
                    let i = out.idx(perm[x], perm[y], perm[z]);
                    out.counts[i] = self.get(x, y, z);
                }
            }
        }
        out.total = self.total;
        out
    }

    /// `P(z|x)` for all `z`, or `None` if `C(x) = 0`.
    pub fn context_given_center(&self, x: usize) -> Option<Vec<f64>> {
        let cx = self.row(x);
        (cx > 0).then(|| {
            (0..self.n)
                .map(|z| self.center_context(x, z) as f64 / cx as f64)
                .collect()
        })
    }

    /// `P(z)` for all `z`; all zeros when there are no events.
    pub fn context_prior(&self) -> Vec<f64> {
        if self.total == 0 {
            return vec![0.0; self.n];
        }
        (0..self.n)
            .map(|z| self.context(z) as f64 / self.total as f64)
            .collect()
    }
}

/// Counts every `(x, y, z)` event over the presence sets.
pub fn count_triples(n: usize, sets: &[PresenceSet]) -> Result<CoocCounts, StatsError> {
    let mut counts = CoocCounts::new(n);
    for (index, s) in sets.iter().enumerate() {
        if s.len() < 3 {
            return Err(StatsError::SetTooSmall {
                index,
                size: s.len(),
            });
        }
        counts.add_set(s)?;
    }
    Ok(counts)
}

/// [`count_triples`] split over `workers` threads and merged in chunk order.
pub fn count_triples_parallel(
    n: usize,
    sets: &[PresenceSet],
    workers: usize,
) -> Result<CoocCounts, StatsError> {
    let workers = workers.max(1);
    if workers == 1 || sets.len() < 2 * workers {
        return count_triples(n, sets);
    }
    let chunk = sets.len().div_ceil(workers);
    let partials: Vec<Result<CoocCounts, StatsError>> = std::thread::scope(|s| {
        let handles: Vec<_> = sets
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                s.spawn(move || {
                    count_triples(n, part).map_err(|e| match e {
                        StatsError::SetTooSmall { index, size } => StatsError::SetTooSmall {
                            index: index + ci * chunk,
                            size,
                        },
                        other => other,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("counting worker panicked"))
            .collect()
    });
    let mut out = CoocCounts::new(n);
    for p in partials {
        out.merge(&p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Conditional,
    Interventional,
}

/// `N × N` table of `P(y | x)` or `P(y | do(x))`, rows indexed by `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTable {
    pub n: usize,
    pub kind: TableKind,
    values: Vec<f64>,
    /// `support[x]` is false when row `x` has no events; such rows hold zeros.
    pub support: Vec<bool>,
    /// Prior mass of context terms skipped for lack of support, per row.
    pub skipped_mass: Vec<f64>,
}

impl ProbTable {
    fn new(n: usize, kind: TableKind) -> Self {
        Self {
            n,
            kind,
            values: vec![0.0; n * n],
            support: vec![false; n],
            skipped_mass: vec![0.0; n],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x * self.n + y]
    }

    #[inline]
    fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[x * self.n + y] = v;
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.n..(x + 1) * self.n]
    }

    /// Largest absolute entry difference over rows supported in both.
    pub fn max_abs_diff(&self, other: &ProbTable) -> f64 {
        assert_eq!(self.n, other.n);
        let mut m: f64 = 0.0;
        for x in 0..self.n {
            if self.support[x] && other.support[x] {
                for y in 0..self.n {
                    m = m.max((self.get(x, y) - other.get(x, y)).abs());
                }
            }
        }
        m
    }
}

/// `P(y|x) = C(x,y) / C(x)`.
pub fn conditional(counts: &CoocCounts) -> ProbTable {
    let n = counts.n_categories();
    let mut t = ProbTable::new(n, TableKind::Conditional);
    for x in 0..n {
        let cx = counts.row(x);
        if cx == 0 {
            continue;
        }
        t.support[x] = true;
        for y in 0..n {
            t.set(x, y, counts.pair(x, y) as f64 / cx as f64);
        }
    }
    t
}

/// `P(y|x)` assembled through the adjustment route
/// `Σ_z P(y|x,z)·P(z|x)`; agrees with [`conditional`] up to rounding.
pub fn conditional_by_total_probability(counts: &CoocCounts) -> ProbTable {
    let n = counts.n_categories();
    let mut t = ProbTable::new(n, TableKind::Conditional);
    for x in 0..n {
        let Some(pzx) = counts.context_given_center(x) else {
            continue;
        };
        t.support[x] = true;
        for z in 0..n {
            let cxz = counts.center_context(x, z);
            if cxz == 0 {
                continue;
            }
            for y in 0..n {
                let v = t.get(x, y) + counts.get(x, y, z) as f64 / cxz as f64 * pzx[z];
                t.set(x, y, v);
            }
        }
    }
    t
}

/// Backdoor-adjusted `P(y|do(x)) = Σ_z P(y|x,z)·P(z)` without smoothing.
pub fn intervention(counts: &CoocCounts) -> ProbTable {
    intervention_smoothed(counts, 0.0)
}

/// [`intervention`] with Laplace smoothing of `P(y|x,z)`.
///
/// With `alpha > 0`, `P(y|x,z) = (C[x][y][z] + α) / (C(x,z) + α·(N−2))` over
/// the `N − 2` categories other than `x` and `z`, so only the structurally
/// impossible `z = x` term is skipped. With `alpha = 0`, every `z` with
/// `C(x,z) = 0` is skipped and its prior mass added to `skipped_mass[x]`.
pub fn intervention_smoothed(counts: &CoocCounts, alpha: f64) -> ProbTable {
    let n = counts.n_categories();
    let prior = counts.context_prior();
    let mut t = ProbTable::new(n, TableKind::Interventional);
    let alpha = if alpha.is_finite() && alpha > 0.0 && n >= 3 {
        alpha
    } else {
        0.0
    };
    for x in 0..n {
        if counts.row(x) == 0 {
            continue;
        }
        t.support[x] = true;
        let mut skipped = 0.0;
        for z in 0..n {
            if prior[z] == 0.0 {
                continue;
            }
            let cxz = counts.center_context(x, z);
            if z == x || (cxz == 0 && alpha == 0.0) {
                skipped += prior[z];
                continue;
            }
            let denom = cxz as f64 + alpha * (n - 2) as f64;
            for y in 0..n {
                if y == x || y == z {
                    continue;
                }
                let p_y_xz = (counts.get(x, y, z) as f64 + alpha) / denom;
                t.set(x, y, t.get(x, y) + p_y_xz * prior[z]);
            }
        }
        t.skipped_mass[x] = skipped;
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub x: usize,
    pub y: usize,
    pub p_cond: f64,
    pub p_do: f64,
    /// `p_do − p_cond`
    pub delta: f64,
    pub skipped_mass: f64,
}

/// Pairs ranked by `|P(y|do(x)) − P(y|x)|` descending, ties by `(x, y)`.
/// Unsupported rows and `y = x` are excluded.
pub fn delta_report(
    cond: &ProbTable,
    intv: &ProbTable,
    top_k: usize,
) -> Result<Vec<DeltaRow>, StatsError> {
    if cond.n != intv.n || cond.support != intv.support {
        return Err(StatsError::TableMismatch);
    }
    let n = cond.n;
    let mut rows = Vec::new();
    for x in (0..n).filter(|&x| cond.support[x]) {
        for y in (0..n).filter(|&y| y != x) {
            let (pc, pd) = (cond.get(x, y), intv.get(x, y));
            rows.push(DeltaRow {
                x,
                y,
                p_cond: pc,
                p_do: pd,
                delta: pd - pc,
                skipped_mass: intv.skipped_mass[x],
            });
        }
    }
    rows.sort_by(|a, b| {
        b.delta
            .abs()
            .total_cmp(&a.delta.abs())
            .then(a.x.cmp(&b.x))
            .then(a.y.cmp(&b.y))
    });
    rows.truncate(top_k);
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorGap {
    pub z: usize,
    pub prior: f64,
    pub given_x: f64,
}

impl PriorGap {
    pub fn gap(&self) -> f64 {
        self.given_x - self.prior
    }
}

/// `P(z)` next to `P(z|x)` for every supported `z`, sorted by
/// `P(z|x) − P(z)` descending.
pub fn prior_gap_report(counts: &CoocCounts, x: usize) -> Result<Vec<PriorGap>, StatsError> {
    let n = counts.n_categories();
    if x >= n {
        return Err(StatsError::CategoryOutOfRange { category: x, n });
    }
    let given = counts
        .context_given_center(x)
        .ok_or(StatsError::RowUnsupported(x))?;
    let prior = counts.context_prior();
    let mut out: Vec<PriorGap> = (0..n)
        .filter(|&z| prior[z] > 0.0)
        .map(|z| PriorGap {
            z,
            prior: prior[z],
            given_x: given[z],
        })
        .collect();
    out.sort_by(|a, b| b.gap().total_cmp(&a.gap()).then(a.z.cmp(&b.z)));
    Ok(out)
}

/// Presence bit vector: bit `c` set when category `c` is present.
pub type SceneMask = u64;

pub fn mask_of(set: &PresenceSet) -> SceneMask {
    set.iter().fold(0, |m, &c| m | 1u64 << c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackdoorEstimate {
    pub value: f64,
    /// Prior mass of strata in which `x` never occurs.
    pub skipped_mass: f64,
}

#[inline]
fn stratum(mask: SceneMask, adjust: &[usize]) -> usize {
    adjust
        .iter()
        .enumerate()
        .fold(0, |s, (i, &c)| s | (((mask >> c) & 1) as usize) << i)
}

/// Empirical `P(y present | x present)`, or `None` if `x` never occurs.
pub fn label_conditional(scenes: &[SceneMask], x: usize, y: usize) -> Option<f64> {
    let (mut nx, mut nxy) = (0u64, 0u64);
    for &m in scenes {
        if m >> x & 1 == 1 {
            nx += 1;
            nxy += m >> y & 1;
        }
    }
    (nx > 0).then(|| nxy as f64 / nx as f64)
}

/// Label-level backdoor estimate
/// `P(y|do(x)) = Σ_s P(y | x, S = s) · P(S = s)` where `S` ranges over the
/// joint presence configurations of the `adjust` categories.
pub fn label_backdoor(
    scenes: &[SceneMask],
    x: usize,
    y: usize,
    adjust: &[usize],
) -> Result<BackdoorEstimate, StatsError> {
    if adjust.len() > 20 {
        return Err(StatsError::AdjustmentTooLarge(adjust.len()));
    }
    if let Some(&c) = adjust.iter().chain([&x, &y]).find(|&&c| c >= 64) {
        return Err(StatsError::CategoryOutOfRange { category: c, n: 64 });
    }
    let strata = 1usize << adjust.len();
    let mut n_s = vec![0u64; strata];
    let mut n_xs = vec![0u64; strata];
    let mut n_xys = vec![0u64; strata];
    for &m in scenes {
        let s = stratum(m, adjust);
        n_s[s] += 1;
        if m >> x & 1 == 1 {
            n_xs[s] += 1;
            n_xys[s] += m >> y & 1;
        }
    }
    let total = scenes.len() as f64;
    let mut value = 0.0;
    let mut skipped = 0.0;
    for s in 0..strata {
        if n_s[s] == 0 {
            continue;
        }
        let p_s = n_s[s] as f64 / total;
        if n_xs[s] == 0 {
            skipped += p_s;
            continue;
        }
        value += n_xys[s] as f64 / n_xs[s] as f64 * p_s;
    }
    Ok(BackdoorEstimate {
        value,
        skipped_mass: skipped,
    })
}

/// Label-level conditional and backdoor tables over all `N` categories.
/// Row `x` adjusts for `adjust(x) \ {x}`; diagonals are 1 for supported rows.
pub fn label_tables(
    scenes: &[SceneMask],
    n: usize,
    adjust: impl Fn(usize) -> Vec<usize>,
) -> Result<(ProbTable, ProbTable), StatsError> {
    if n > 64 {
        return Err(StatsError::TooManyCategories(n));
    }
    let mut cond = ProbTable::new(n, TableKind::Conditional);
    let mut intv = ProbTable::new(n, TableKind::Interventional);
    for x in 0..n {
        let adj: Vec<usize> = adjust(x).into_iter().filter(|&c| c != x).collect();
        for y in 0..n {
            let Some(pc) = label_conditional(scenes, x, y) else {
                break;
            };
            cond.support[x] = true;
            intv.support[x] = true;
            cond.set(x, y, pc);
            let est = label_backdoor(scenes, x, y, &adj)?;
            intv.set(x, y, est.value);
            intv.skipped_mass[x] = est.skipped_mass;
        }
    }
    Ok((cond, intv))
}

/// `%.6g`-style formatting: six significant digits, trailing zeros trimmed.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-5..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn delta_csv(rows: &[DeltaRow], names: &[String]) -> String {
    let mut out = String::from("x_name,y_name,p_cond,p_do,delta,skipped_mass\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&names[r.x]),
            csv_field(&names[r.y]),
            fmt_sig6(r.p_cond),
            fmt_sig6(r.p_do),
            fmt_sig6(r.delta),
            fmt_sig6(r.skipped_mass)
        );
    }
    out
}

/// Long-form table: one line per supported `(x, y ≠ x)`.
pub fn table_csv(table: &ProbTable, names: &[String]) -> String {
    let col = match table.kind {
        TableKind::Conditional => "p_cond",
        TableKind::Interventional => "p_do",
    };
    let mut out = format!("x_name,y_name,{col},skipped_mass\n");
    for x in (0..table.n).filter(|&x| table.support[x]) {
        for y in (0..table.n).filter(|&y| y != x) {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                csv_field(&names[x]),
                csv_field(&names[y]),
                fmt_sig6(table.get(x, y)),
                fmt_sig6(table.skipped_mass[x])
            );
        }
    }
    out
}

pub fn prior_gap_csv(rows: &[PriorGap], names: &[String]) -> String {
    let mut out = String::from("z_name,p_z,p_z_given_x,gap\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            csv_field(&names[r.z]),
            fmt_sig6(r.prior),
            fmt_sig6(r.given_x),
            fmt_sig6(r.gap())
        );
    }
    out
}
