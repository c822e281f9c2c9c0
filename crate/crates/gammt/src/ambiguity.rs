//! Finite sets of sequence laws: one-step conditional sets, explicit path
//! measures, pasting, rectangularity checks, and the bridge from a trained
//! ensemble to such a set.
//!
//! Everything here is exhaustive over a finite outcome alphabet of size `K`
//! and horizon `T`. A [`PathMeasure`] carries its full one-step conditional
//! table at *every* history (zero-probability ones included), so membership
//! and pasting are total operations. The canonical set built from per-step
//! conditional sets is the rectangular hull: every measure obtainable by
//! choosing, independently for each history at each step, one element of
//! that step's set.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::GammtParams;

/// Default cap on exhaustively enumerated measures and on closure pastes.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1_000_000;

/// Componentwise tolerance for set membership and table comparisons.
pub const MEMBERSHIP_TOL: f64 = 1e-10;

/// Tolerance on the total probability of all `K^T` paths of a measure.
pub const PATH_SUM_TOL: f64 = 1e-10;

/// A probability mass function over a common outcome alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitePmf {
    probs: Vec<f64>,
}

impl FinitePmf {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Contract("pmf over empty alphabet".to_string()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::Contract(
                "pmf entries must be non-negative and finite".to_string(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("pmf sums to {sum}, not 1")));
        }
        Ok(FinitePmf { probs })
    }

    pub fn uniform(k: usize) -> Self {
        FinitePmf {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn approx_eq(&self, other: &FinitePmf, tol: f64) -> bool {
        self.k() == other.k()
            && self
                .probs
                .iter()
                .zip(&other.probs)
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    fn bit_key(&self, out: &mut Vec<u64>) {
        out.extend(self.probs.iter().map(|p| p.to_bits()));
    }
}

/// Rank of a history in the fixed lexicographic order (first symbol most
/// significant).
pub fn history_index(k: usize, history: &[usize]) -> usize {
    history.iter().fold(0, |acc, &s| acc * k + s)
}

/// Inverse of [`history_index`].
pub fn history_from_index(k: usize, len: usize, mut index: usize) -> Vec<usize> {
    let mut h = vec![0; len];
    for slot in (0..len).rev() {
        h[slot] = index % k;
        index /= k;
    }
    h
}

/// Per-step sets of plausible one-step laws: `sets()[n]` holds the
/// candidate conditionals for position `n + 1`, the same at every history.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFamily {
    k: usize,
    steps: Vec<Vec<FinitePmf>>,
}

impl KernelFamily {
    pub fn new(k: usize, steps: Vec<Vec<FinitePmf>>) -> Result<Self> {
        if k == 0 || steps.is_empty() {
            return Err(Error::Contract(
                "kernel family needs K >= 1 and T >= 1".to_string(),
            ));
        }
        for (n, set) in steps.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Contract(format!("step {} has an empty set", n + 1)));
            }
            if set.iter().any(|p| p.k() != k) {
                return Err(Error::Contract(format!(
                    "step {} has a pmf over the wrong alphabet",
                    n + 1
                )));
            }
        }
        Ok(KernelFamily { k, steps })
    }

    /// The position-independent special case: one set reused at every step.
    pub fn iid(k: usize, horizon: usize, set: Vec<FinitePmf>) -> Result<Self> {
        KernelFamily::new(k, vec![set; horizon])
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn sets(&self) -> &[Vec<FinitePmf>] {
        &self.steps
    }

    /// Closed-form count of the rectangular hull before deduplication:
    /// `prod_n |L_{n+1}| ^ (K^n)`.
    pub fn enumeration_count(&self) -> Result<u128> {
        let mut total: u128 = 1;
        let mut histories: u128 = 1;
        for set in &self.steps {
            let choices = (set.len() as u128)
                .checked_pow(u32::try_from(histories).map_err(|_| Error::BudgetExceeded {
                    required: u128::MAX,
                    budget: DEFAULT_ENUMERATION_BUDGET,
                })?)
                .ok_or(Error::BudgetExceeded {
                    required: u128::MAX,
                    budget: DEFAULT_ENUMERATION_BUDGET,
                })?;
            total = total.checked_mul(choices).ok_or(Error::BudgetExceeded {
                required: u128::MAX,
                budget: DEFAULT_ENUMERATION_BUDGET,
            })?;
            histories = histories.saturating_mul(self.k as u128);
        }
        Ok(total)
    }

    /// Parse the scenario file format: flat `key = value` lines with `#`
    /// comments; keys `K`, `T`, then `L<n>.<j> = p_0,...,p_{K-1}` for every
    /// step `n` in `[1, T]`.
    pub fn from_scenario_str(text: &str) -> Result<Self> {
        let mut k: Option<usize> = None;
        let mut t: Option<usize> = None;
        let mut entries: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "scenario line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config(format!("scenario line {}: {what}", lineno + 1));
            match key {
                "K" => k = Some(value.parse().map_err(|_| bad("K must be an integer"))?),
                "T" => t = Some(value.parse().map_err(|_| bad("T must be an integer"))?),
                _ => {
                    let rest = key
                        .strip_prefix('L')
                        .ok_or_else(|| bad("unknown key (expected K, T, or L<n>.<j>)"))?;
                    let (n, j) = rest
                        .split_once('.')
                        .ok_or_else(|| bad("set keys look like L<n>.<j>"))?;
                    let n: usize = n.parse().map_err(|_| bad("bad step number"))?;
                    let j: usize = j.parse().map_err(|_| bad("bad set index"))?;
                    if n == 0 || j == 0 {
                        return Err(bad("steps and set indices are 1-based"));
                    }
                    let probs = value
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<f64>, _>>()
                        .map_err(|_| bad("probabilities must be comma-separated reals"))?;
                    entries.push((n, j, probs));
                }
            }
        }
        let k = k.ok_or_else(|| Error::Config("scenario is missing K".to_string()))?;
        let t = t.ok_or_else(|| Error::Config("scenario is missing T".to_string()))?;
        if k == 0 || t == 0 {
            return Err(Error::Config("K and T must be positive".to_string()));
        }
        let mut steps: Vec<Vec<Option<FinitePmf>>> = vec![Vec::new(); t];
        for (n, j, probs) in entries {
            if n > t {
                return Err(Error::Config(format!("set L{n}.{j} is beyond T = {t}")));
            }
            if probs.len() != k {
                return Err(Error::Config(format!(
                    "set L{n}.{j} has {} probabilities, expected K = {k}",
                    probs.len()
                )));
            }
            let pmf =
                FinitePmf::new(probs).map_err(|e| Error::Config(format!("set L{n}.{j}: {e}")))?;
            let level = &mut steps[n - 1];
            if level.len() < j {
                level.resize(j, None);
            }
            if level[j - 1].is_some() {
                return Err(Error::Config(format!("set L{n}.{j} given twice")));
            }
            level[j - 1] = Some(pmf);
        }
        let steps = steps
            .into_iter()
            .enumerate()
            .map(|(n, level)| {
                level
                    .into_iter()
                    .enumerate()
                    .map(|(j, p)| {
                        p.ok_or_else(|| {
                            Error::Config(format!("set L{}.{} is missing", n + 1, j + 1))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        KernelFamily::new(k, steps)
    }
}

/// An explicit finite measure on paths of length `T`: for every step `n`
/// and every history of length `n`, the conditional law of the next
/// outcome. Path probabilities are products along the table.
#[derive(Debug, Clone, PartialEq)]
pub struct PathMeasure {
    k: usize,
    /// `levels[n]` has `k^n` entries, indexed by [`history_index`].
    levels: Vec<Vec<FinitePmf>>,
}

impl PathMeasure {
    pub fn from_conditionals(k: usize, levels: Vec<Vec<FinitePmf>>) -> Result<Self> {
        if k == 0 || levels.is_empty() {
            return Err(Error::Contract(
                "path measure needs K >= 1 and T >= 1".to_string(),
            ));
        }
        let mut expected = 1usize;
        for (n, level) in levels.iter().enumerate() {
            if level.len() != expected {
                return Err(Error::Contract(format!(
                    "level {n} has {} conditionals, expected {expected}",
                    level.len()
                )));
            }
            if level.iter().any(|p| p.k() != k) {
                return Err(Error::Contract(format!(
                    "level {n} has a pmf over the wrong alphabet"
                )));
            }
            expected = expected.saturating_mul(k);
        }
        let m = PathMeasure { k, levels };
        let total = m.total_mass();
        if (total - 1.0).abs() > PATH_SUM_TOL {
            return Err(Error::Contract(format!(
                "path probabilities sum to {total}, not 1"
            )));
        }
        Ok(m)
    }

    /// Product measure whose every conditional equals `pmf`.
    pub fn iid_product(pmf: &FinitePmf, horizon: usize) -> Result<Self> {
        let k = pmf.k();
        let levels = (0..horizon)
            .map(|n| vec![pmf.clone(); k.pow(n as u32)])
            .collect();
        PathMeasure::from_conditionals(k, levels)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn horizon(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Vec<FinitePmf>] {
        &self.levels
    }

    /// The conditional law of the next outcome given `history` (the table
    /// entry, defined at every history including null ones).
    pub fn one_step_conditional(&self, history: &[usize]) -> Result<&FinitePmf> {
        if history.len() >= self.horizon() {
            return Err(Error::Contract(format!(
                "history of length {} has no next step within horizon {}",
                history.len(),
                self.horizon()
            )));
        }
        if history.iter().any(|&s| s >= self.k) {
            return Err(Error::IdOutOfRange {
                id: *history.iter().find(|&&s| s >= self.k).unwrap(),
                vocab: self.k,
            });
        }
        Ok(&self.levels[history.len()][history_index(self.k, history)])
    }

    /// Probability of a full path or a prefix (the marginal of its first
    /// `path.len()` positions).
    pub fn path_probability(&self, path: &[usize]) -> Result<f64> {
        if path.len() > self.horizon() {
            return Err(Error::Contract(format!(
                "path of length {} exceeds horizon {}",
                path.len(),
                self.horizon()
            )));
        }
        let mut p = 1.0;
        for (n, &s) in path.iter().enumerate() {
            if s >= self.k {
                return Err(Error::IdOutOfRange {
                    id: s,
                    vocab: self.k,
                });
            }
            p *= self.levels[n][history_index(self.k, &path[..n])].probs()[s];
        }
        Ok(p)
    }

    fn total_mass(&self) -> f64 {
        // Level-by-level accumulation of prefix masses.
        let mut masses = vec![1.0f64];
        for level in &self.levels {
            let mut next = Vec::with_capacity(masses.len() * self.k);
            for (h, &m) in masses.iter().enumerate() {
                for &p in level[h].probs() {
                    next.push(m * p);
                }
            }
            masses = next;
        }
        masses.iter().sum()
    }

    fn bit_key(&self) -> Vec<u64> {
        let mut key = Vec::new();
        for level in &self.levels {
            for pmf in level {
                pmf.bit_key(&mut key);
            }
        }
        key
    }

    pub fn approx_eq(&self, other: &PathMeasure, tol: f64) -> bool {
        self.k == other.k
            && self.horizon() == other.horizon()
            && self
                .levels
                .iter()
                .zip(&other.levels)
                .all(|(a, b)| a.iter().zip(b).all(|(p, q)| p.approx_eq(q, tol)))
    }
}

/// A continuation law for steps after a split point: for every history at
/// every level `>= from`, the conditional of the next outcome. Built from a
/// single measure or drawn history-wise from members of a set.
#[derive(Debug, Clone)]
pub struct ContinuationKernel {
    k: usize,
    horizon: usize,
    from: usize,
    /// `levels[i]` covers level `from + i` with `k^(from+i)` entries.
    levels: Vec<Vec<FinitePmf>>,
}

impl ContinuationKernel {
    /// The continuation of one measure after step `from`.
    pub fn from_measure(q: &PathMeasure, from: usize) -> Result<Self> {
        if from > q.horizon() {
            return Err(Error::Contract(format!(
                "split {from} beyond horizon {}",
                q.horizon()
            )));
        }
        Ok(ContinuationKernel {
            k: q.k(),
            horizon: q.horizon(),
            from,
            levels: q.levels()[from..].to_vec(),
        })
    }

    /// A history-wise mix: for each history `h` of length `from`,
    /// `assignment[history_index(h)]` names the member whose continuation
    /// after `h` is used for the whole subtree rooted at `h`.
    pub fn from_members(
        members: &[PathMeasure],
        from: usize,
        assignment: &[usize],
    ) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Contract("no members to draw from".to_string()));
        };
        let (k, horizon) = (first.k(), first.horizon());
        if from > horizon {
            return Err(Error::Contract(format!(
                "split {from} beyond horizon {horizon}"
            )));
        }
        if assignment.len() != k.pow(from as u32) {
            return Err(Error::Contract(format!(
                "assignment covers {} histories, expected {}",
                assignment.len(),
                k.pow(from as u32)
            )));
        }
        if let Some(&bad) = assignment.iter().find(|&&m| m >= members.len()) {
            return Err(Error::Contract(format!(
                "assignment names member {bad}, only {} exist",
                members.len()
            )));
        }
        let mut levels = Vec::with_capacity(horizon - from);
        for level in from..horizon {
            let stride = k.pow((level - from) as u32);
            let total = k.pow(level as u32);
            let mut entries = Vec::with_capacity(total);
            for h in 0..total {
                let member = &members[assignment[h / stride]];
                entries.push(member.levels()[level][h].clone());
            }
            levels.push(entries);
        }
        Ok(ContinuationKernel {
            k,
            horizon,
            from,
            levels,
        })
    }

    pub fn split(&self) -> usize {
        self.from
    }
}

/// Paste a marginal with a continuation kernel: the result uses the
/// marginal's conditionals for steps before the kernel's split point and
/// the kernel's from there on.
pub fn paste(marginal: &PathMeasure, kernel: &ContinuationKernel) -> Result<PathMeasure> {
    if marginal.k() != kernel.k || marginal.horizon() != kernel.horizon {
        return Err(Error::ShapeMismatch {
            op: "paste",
            lhs: vec![marginal.k(), marginal.horizon()],
            rhs: vec![kernel.k, kernel.horizon],
        });
    }
    let mut levels = marginal.levels()[..kernel.from].to_vec();
    levels.extend(kernel.levels.iter().cloned());
    PathMeasure::from_conditionals(marginal.k(), levels)
}

/// Every measure obtainable by choosing, independently for each history at
/// each step, one element of that step's set: the rectangular hull of the
/// family, duplicates removed. Enumeration order is lexicographic in the
/// per-slot selection indices.
pub fn build_plm(family: &KernelFamily) -> Result<Vec<PathMeasure>> {
    build_plm_with_budget(family, DEFAULT_ENUMERATION_BUDGET)
}

pub fn build_plm_with_budget(family: &KernelFamily, budget: u128) -> Result<Vec<PathMeasure>> {
    let required = family.enumeration_count()?;
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    // Even a single-measure hull has K^(T-1) table entries per level; the
    // slot count is a resource in its own right.
    history_slots(family.k(), family.horizon(), budget)?;
    let options: Vec<Vec<&[FinitePmf]>> = (0..family.horizon())
        .map(|n| vec![family.sets()[n].as_slice(); family.k().pow(n as u32)])
        .collect();
    let measures = enumerate_hull(family.k(), &options)?;
    Ok(dedup_measures(measures))
}

/// Total number of (level, history) slots of a conditional table, checked
/// against the budget.
fn history_slots(k: usize, horizon: usize, budget: u128) -> Result<u128> {
    let mut slots: u128 = 0;
    let mut histories: u128 = 1;
    for _ in 0..horizon {
        slots = slots.saturating_add(histories);
        histories = histories.saturating_mul(k as u128);
    }
    if slots > budget {
        return Err(Error::BudgetExceeded {
            required: slots,
            budget,
        });
    }
    Ok(slots)
}

/// Odometer over one choice per (level, history) slot.
fn enumerate_hull(k: usize, options: &[Vec<&[FinitePmf]>]) -> Result<Vec<PathMeasure>> {
    let slot_sizes: Vec<usize> = options
        .iter()
        .flat_map(|level| level.iter().map(|set| set.len()))
        .collect();
    let mut selection = vec![0usize; slot_sizes.len()];
    let mut out = Vec::new();
    loop {
        let mut levels = Vec::with_capacity(options.len());
        let mut slot = 0;
        for level_options in options {
            let mut level = Vec::with_capacity(level_options.len());
            for set in level_options {
                level.push(set[selection[slot]].clone());
                slot += 1;
            }
            levels.push(level);
        }
        out.push(PathMeasure::from_conditionals(k, levels)?);

        // Advance the odometer, last slot fastest.
        let mut pos = selection.len();
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            selection[pos] += 1;
            if selection[pos] < slot_sizes[pos] {
                break;
            }
            selection[pos] = 0;
        }
    }
}

fn dedup_measures(measures: Vec<PathMeasure>) -> Vec<PathMeasure> {
    let mut seen: HashMap<Vec<u64>, ()> = HashMap::new();
    let mut out = Vec::new();
    for m in measures {
        if seen.insert(m.bit_key(), ()).is_none() {
            out.push(m);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipViolation {
    pub measure: usize,
    /// 0-based step level of the offending conditional.
    pub step: usize,
    pub history: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosureViolation {
    /// Member whose marginal was pasted.
    pub marginal_measure: usize,
    /// Steps before this level come from the marginal.
    pub split: usize,
    /// Member supplying the continuation after each length-`split` history.
    pub kernel_members: Vec<usize>,
}

/// Outcome of [`check_rectangular`]: which conditionals fall outside their
/// step sets, and which marginal/kernel pastes escape the measure set.
#[derive(Debug, Clone, Default)]
pub struct RectangularityReport {
    pub membership_violations: Vec<MembershipViolation>,
    pub closure_violations: Vec<ClosureViolation>,
    pub measures_checked: usize,
    pub pastes_checked: u128,
}

impl RectangularityReport {
    pub fn is_rectangular(&self) -> bool {
        self.membership_violations.is_empty() && self.closure_violations.is_empty()
    }
}

impl std::fmt::Display for RectangularityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "membership: {} ({} measures)",
            if self.membership_violations.is_empty() {
                "PASS"
            } else {
                "FAIL"
            },
            self.measures_checked
        )?;
        for v in &self.membership_violations {
            writeln!(
                f,
                "  measure {} step {} history {:?}: conditional outside its set",
                v.measure, v.step, v.history
            )?;
        }
        writeln!(
            f,
            "closure: {} ({} pastes)",
            if self.closure_violations.is_empty() {
                "PASS"
            } else {
                "FAIL"
            },
            self.pastes_checked
        )?;
        for v in &self.closure_violations {
            writeln!(
                f,
                "  marginal of measure {} at split {} with kernel members {:?}: paste not in set",
                v.marginal_measure, v.split, v.kernel_members
            )?;
        }
        Ok(())
    }
}

/// Check that a set of measures realizes the family: (a) every measure's
/// conditional at every history lies in that step's set; (b) the set is
/// closed under pasting any member's marginal with any member-derived
/// continuation kernel.
pub fn check_rectangular(
    measures: &[PathMeasure],
    family: &KernelFamily,
) -> Result<RectangularityReport> {
    check_rectangular_with(
        measures,
        |level, _| family.sets()[level].as_slice(),
        (family.k(), family.horizon()),
    )
}

fn check_rectangular_with<'s>(
    measures: &[PathMeasure],
    sets_at: impl Fn(usize, usize) -> &'s [FinitePmf],
    (k, horizon): (usize, usize),
) -> Result<RectangularityReport> {
    if measures.is_empty() {
        return Err(Error::Contract("no measures to check".to_string()));
    }
    for m in measures {
        if m.k() != k || m.horizon() != horizon {
            return Err(Error::ShapeMismatch {
                op: "check_rectangular",
                lhs: vec![m.k(), m.horizon()],
                rhs: vec![k, horizon],
            });
        }
    }
    let mut report = RectangularityReport {
        measures_checked: measures.len(),
        ..Default::default()
    };

    // (a) membership of every conditional in its step set.
    for (mi, m) in measures.iter().enumerate() {
        for (level, entries) in m.levels().iter().enumerate() {
            for (h, pmf) in entries.iter().enumerate() {
                let set = sets_at(level, h);
                if !set.iter().any(|c| c.approx_eq(pmf, MEMBERSHIP_TOL)) {
                    report.membership_violations.push(MembershipViolation {
                        measure: mi,
                        step: level,
                        history: history_from_index(k, level, h),
                    });
                }
            }
        }
    }

    // (b) closure under pasting marginals with member-derived kernels.
    let index: HashMap<Vec<u64>, usize> = measures
        .iter()
        .enumerate()
        .map(|(i, m)| (m.bit_key(), i))
        .collect();
    let in_set = |candidate: &PathMeasure| -> bool {
        index.contains_key(&candidate.bit_key())
            || measures
                .iter()
                .any(|m| m.approx_eq(candidate, MEMBERSHIP_TOL))
    };

    for split in 0..horizon {
        // Distinct marginals (prefix tables), represented by the first
        // member carrying each.
        let mut marginal_reps: Vec<usize> = Vec::new();
        let mut seen_marginals: HashMap<Vec<u64>, ()> = HashMap::new();
        for (mi, m) in measures.iter().enumerate() {
            let mut key = Vec::new();
            for level in &m.levels()[..split] {
                for pmf in level {
                    pmf.bit_key(&mut key);
                }
            }
            if seen_marginals.insert(key, ()).is_none() {
                marginal_reps.push(mi);
            }
        }

        // Distinct member continuations after each length-`split` history.
        let histories = k.pow(split as u32);
        let mut options: Vec<Vec<usize>> = Vec::with_capacity(histories);
        for h in 0..histories {
            let mut opts = Vec::new();
            let mut seen: HashMap<Vec<u64>, ()> = HashMap::new();
            for (mi, m) in measures.iter().enumerate() {
                let mut key = Vec::new();
                for level in split..horizon {
                    let stride = k.pow((level - split) as u32);
                    for hh in 0..k.pow(level as u32) {
                        if hh / stride == h {
                            m.levels()[level][hh].bit_key(&mut key);
                        }
                    }
                }
                if seen.insert(key, ()).is_none() {
                    opts.push(mi);
                }
            }
            options.push(opts);
        }

        let kernels: u128 = options.iter().map(|o| o.len() as u128).product();
        let pastes = kernels.saturating_mul(marginal_reps.len() as u128);
        if report.pastes_checked.saturating_add(pastes) > DEFAULT_ENUMERATION_BUDGET {
            return Err(Error::BudgetExceeded {
                required: report.pastes_checked.saturating_add(pastes),
                budget: DEFAULT_ENUMERATION_BUDGET,
            });
        }

        let mut choice = vec![0usize; histories];
        loop {
            let assignment: Vec<usize> = choice
                .iter()
                .enumerate()
                .map(|(h, &c)| options[h][c])
                .collect();
            let kernel = ContinuationKernel::from_members(measures, split, &assignment)?;
            for &rep in &marginal_reps {
                let pasted = paste(&measures[rep], &kernel)?;
                report.pastes_checked += 1;
                if !in_set(&pasted) {
                    report.closure_violations.push(ClosureViolation {
                        marginal_measure: rep,
                        split,
                        kernel_members: assignment.clone(),
                    });
                }
            }
            // Advance the per-history member choice.
            let mut pos = histories;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                choice[pos] += 1;
                if choice[pos] < options[pos].len() {
                    break;
                }
                choice[pos] = 0;
            }
            if choice.iter().all(|&c| c == 0) {
                break;
            }
        }
    }
    Ok(report)
}

/// The ambiguity structure a trained ensemble induces after a prompt: at
/// each continuation history the set of per-head conditionals, and the
/// exhaustive set of selection-path measures built from them.
#[derive(Debug, Clone)]
pub struct InducedSet {
    k: usize,
    horizon: usize,
    /// `sets[n][history_index]`: the M head conditionals at that history.
    sets: Vec<Vec<Vec<FinitePmf>>>,
    measures: Vec<PathMeasure>,
}

impl InducedSet {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Head conditionals at a continuation history.
    pub fn conditional_set(&self, history: &[usize]) -> &[FinitePmf] {
        &self.sets[history.len()][history_index(self.k, history)]
    }

    pub fn measures(&self) -> &[PathMeasure] {
        &self.measures
    }

    pub fn check_rectangular(&self) -> Result<RectangularityReport> {
        check_rectangular_with(
            &self.measures,
            |level, h| self.sets[level][h].as_slice(),
            (self.k, self.horizon),
        )
    }
}

/// Enumerate the selection-path measures of a trained ensemble: for every
/// continuation history of length `< horizon` after `prompt`, the plausible
/// conditionals are the M heads' next-token laws there, and the induced set
/// contains every product over history-dependent head choices.
pub fn induced_set(params: &GammtParams, prompt: &[usize], horizon: usize) -> Result<InducedSet> {
    induced_set_with_budget(params, prompt, horizon, DEFAULT_ENUMERATION_BUDGET)
}

pub fn induced_set_with_budget(
    params: &GammtParams,
    prompt: &[usize],
    horizon: usize,
    budget: u128,
) -> Result<InducedSet> {
    let k = params.vocab_size();
    if horizon == 0 {
        return Err(Error::Contract("horizon must be >= 1".to_string()));
    }
    if prompt.is_empty() || prompt.len() + horizon - 1 > params.max_len() {
        return Err(Error::BadLength {
            len: prompt.len() + horizon - 1,
            min: 1,
            max: params.max_len(),
        });
    }

    // Count head choices (one per history per level) before any forward.
    let slots = history_slots(k, horizon, budget)?;
    let required = (params.m() as u128)
        .checked_pow(u32::try_from(slots).map_err(|_| Error::BudgetExceeded {
            required: u128::MAX,
            budget,
        })?)
        .ok_or(Error::BudgetExceeded {
            required: u128::MAX,
            budget,
        })?;
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }

    let mut sets: Vec<Vec<Vec<FinitePmf>>> = Vec::with_capacity(horizon);
    for level in 0..horizon {
        let count = k.pow(level as u32);
        let mut level_sets = Vec::with_capacity(count);
        for h in 0..count {
            let history = history_from_index(k, level, h);
            let mut seq = prompt.to_vec();
            seq.extend_from_slice(&history);
            let probs = params.forward(&seq)?;
            let last = seq.len() - 1;
            let conditionals = probs
                .iter()
                .map(|pm| FinitePmf::new(pm.column(last).to_vec()))
                .collect::<Result<Vec<_>>>()?;
            level_sets.push(conditionals);
        }
        sets.push(level_sets);
    }

    let options: Vec<Vec<&[FinitePmf]>> = sets
        .iter()
        .map(|level| level.iter().map(|s| s.as_slice()).collect())
        .collect();
    let measures = dedup_measures(enumerate_hull(k, &options)?);
    Ok(InducedSet {
        k,
        horizon,
        sets,
        measures,
    })
}
