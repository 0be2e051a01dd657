//! Integer-grid search for the best `(n_layers, d_emb)` under a fitted
//! performance law, and side-by-side comparison of fitted laws.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laws::{eval_perf_law, perf_unchecked, PerfLawParams};

/// Grids above this many points are searched coarse-to-fine in `Auto` mode.
pub const EXHAUSTIVE_LIMIT: u64 = 1_000_000;
const COARSE_STRIDE: u64 = 8;
const FINE_RADIUS: u64 = 16;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetFunctional {
    NTimesD,
    NTimesDSquared,
}

impl BudgetFunctional {
    pub fn cost(self, n: u64, d: u64) -> f64 {
        match self {
            BudgetFunctional::NTimesD => n as f64 * d as f64,
            BudgetFunctional::NTimesDSquared => n as f64 * (d as f64).powi(2),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BudgetFunctional::NTimesD => "n_times_d",
            BudgetFunctional::NTimesDSquared => "n_times_d_squared",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub functional: BudgetFunctional,
    pub limit: f64,
}

impl Budget {
    pub fn allows(&self, n: u64, d: u64) -> bool {
        self.functional.cost(n, d) <= self.limit
    }
}

/// Parses `n_times_d:512` or `n_times_d_squared:1e6`.
impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (f, limit) = s
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("budget {s:?} is not functional:limit")))?;
        let functional = match f {
            "n_times_d" => BudgetFunctional::NTimesD,
            "n_times_d_squared" => BudgetFunctional::NTimesDSquared,
            other => return Err(Error::Invalid(format!("unknown budget functional {other:?}"))),
        };
        let limit: f64 = limit
            .parse()
            .map_err(|_| Error::Invalid(format!("budget limit {limit:?} is not a number")))?;
        let b = Budget { functional, limit };
        b.validate()?;
        Ok(b)
    }
}

impl Budget {
    fn validate(&self) -> Result<()> {
        if !(self.limit.is_finite() && self.limit > 0.0) {
            return Err(Error::Invalid(format!("budget limit {} must be positive", self.limit)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_range: (u64, u64),
    pub d_range: (u64, u64),
    pub budget: Option<Budget>,
}

impl SearchSpace {
    pub fn new(n_range: (u64, u64), d_range: (u64, u64)) -> Self {
        Self {
            n_range,
            d_range,
            budget: None,
        }
    }

    pub fn with_budget(mut self, budget: Budget) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("n", self.n_range), ("d", self.d_range)] {
            if lo < 1 || lo > hi {
                return Err(Error::Invalid(format!(
                    "{name} range [{lo}, {hi}] must satisfy 1 <= lo <= hi"
                )));
            }
        }
        if let Some(b) = &self.budget {
            b.validate()?;
        }
        Ok(())
    }

    pub fn grid_points(&self) -> u64 {
        (self.n_range.1 - self.n_range.0 + 1).saturating_mul(self.d_range.1 - self.d_range.0 + 1)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub n: u64,
    pub d: u64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub argmax_n: u64,
    pub argmax_d: u64,
    pub predicted: f64,
    pub evaluated_points: u64,
    pub frontier: Option<Vec<FrontierPoint>>,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum SearchMode {
    /// Exhaustive up to [`EXHAUSTIVE_LIMIT`] points, coarse-to-fine above.
    #[default]
    Auto,
    Exhaustive,
    CoarseToFine,
}

/// Candidate ordering: higher value wins, then smaller n, then smaller d.
/// NaN never wins.
fn better(a: (u64, u64, f64), b: (u64, u64, f64)) -> bool {
    match (a.2.is_nan(), b.2.is_nan()) {
        (true, _) => false,
        (false, true) => true,
        _ => match a.2.partial_cmp(&b.2).unwrap() {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => (a.0, a.1) < (b.0, b.1),
        },
    }
}

/// Best point over `ns × d_for(n)`, evaluating rows in parallel and
/// reducing in a fixed order.
fn argmax_rows<D>(params: &PerfLawParams, dp: f64, ns: &[u64], d_for: D) -> Option<((u64, u64, f64), u64)>
where
    D: Fn(u64) -> Vec<u64> + Sync,
{
    let rows: Vec<Option<((u64, u64, f64), u64)>> = ns
        .par_iter()
        .map(|&n| {
            let ds = d_for(n);
            let mut best: Option<(u64, u64, f64)> = None;
            for &d in &ds {
                let cand = (n, d, perf_unchecked(params, n as f64, d as f64, dp));
                if best.is_none_or(|b| better(cand, b)) {
                    best = Some(cand);
                }
            }
            best.map(|b| (b, ds.len() as u64))
        })
        .collect();
    let mut best: Option<(u64, u64, f64)> = None;
    let mut count = 0;
    for (cand, evaluated) in rows.into_iter().flatten() {
        count += evaluated;
        if best.is_none_or(|b| better(cand, b)) {
            best = Some(cand);
        }
    }
    best.map(|b| (b, count))
}

fn strided(lo: u64, hi: u64, stride: u64) -> Vec<u64> {
    let mut v: Vec<u64> = (lo..=hi).step_by(stride as usize).collect();
    if *v.last().unwrap() != hi {
        v.push(hi);
    }
    v
}

fn check_inputs(params: &PerfLawParams, d_prime: f64, space: &SearchSpace) -> Result<()> {
    space.validate()?;
    eval_perf_law(params, space.n_range.0 as f64, space.d_range.0 as f64, d_prime)?;
    Ok(())
}

fn to_result(best: (u64, u64, f64), evaluated: u64, frontier: Option<Vec<FrontierPoint>>) -> Result<OptResult> {
    if !best.2.is_finite() {
        return Err(Error::NonFinite(format!(
            "law is not finite anywhere on the grid (best value {})",
            best.2
        )));
    }
    Ok(OptResult {
        argmax_n: best.0,
        argmax_d: best.1,
        predicted: best.2,
        evaluated_points: evaluated,
        frontier,
    })
}

/// Unconstrained maximum over the integer grid.
///
/// The law separates into a function of `n` plus a function of `d`, each
/// of which has at most one turning point, so a stride-8 pass that includes
/// both range ends lands within one stride of the true argmax.
pub fn global_optimum(
    params: &PerfLawParams,
    d_prime: f64,
    space: &SearchSpace,
    mode: SearchMode,
) -> Result<OptResult> {
    check_inputs(params, d_prime, space)?;
    if space.budget.is_some() {
        return Err(Error::Invalid(
            "global search takes a space without budget; use constrained_optimum".into(),
        ));
    }
    let (n_lo, n_hi) = space.n_range;
    let (d_lo, d_hi) = space.d_range;
    let coarse = match mode {
        SearchMode::Exhaustive => false,
        SearchMode::CoarseToFine => true,
        SearchMode::Auto => space.grid_points() > EXHAUSTIVE_LIMIT,
    };
    if !coarse {
        let ns: Vec<u64> = (n_lo..=n_hi).collect();
        let (best, count) =
            argmax_rows(params, d_prime, &ns, |_| (d_lo..=d_hi).collect()).expect("non-empty grid");
        return to_result(best, count, None);
    }

    let ns = strided(n_lo, n_hi, COARSE_STRIDE);
    let ds = strided(d_lo, d_hi, COARSE_STRIDE);
    let (c, coarse_count) = argmax_rows(params, d_prime, &ns, |_| ds.clone()).expect("non-empty grid");
    let window = |x: u64, lo: u64, hi: u64| (x.saturating_sub(FINE_RADIUS).max(lo), (x + FINE_RADIUS).min(hi));
    let (wn_lo, wn_hi) = window(c.0, n_lo, n_hi);
    let (wd_lo, wd_hi) = window(c.1, d_lo, d_hi);
    let ns: Vec<u64> = (wn_lo..=wn_hi).collect();
    let (best, fine_count) =
        argmax_rows(params, d_prime, &ns, |_| (wd_lo..=wd_hi).collect()).expect("non-empty window");
    to_result(best, coarse_count + fine_count, None)
}

/// Feasible `d` values for one `n`, ascending.
fn feasible_ds(budget: &Budget, n: u64, d_lo: u64, d_hi: u64) -> Vec<u64> {
    // costs rise with d, so stop at the first violation
    (d_lo..=d_hi).take_while(|&d| budget.allows(n, d)).collect()
}

/// Maximum over grid points within the budget, with the budget frontier:
/// every feasible point whose `d + 1` neighbour would exceed the limit.
pub fn constrained_optimum(params: &PerfLawParams, d_prime: f64, space: &SearchSpace) -> Result<OptResult> {
    check_inputs(params, d_prime, space)?;
    let budget = space
        .budget
        .ok_or_else(|| Error::Invalid("constrained search needs a budget".into()))?;
    let (d_lo, d_hi) = space.d_range;
    let ns: Vec<u64> = (space.n_range.0..=space.n_range.1)
        .take_while(|&n| budget.allows(n, d_lo))
        .collect();
    let (best, count) = argmax_rows(params, d_prime, &ns, |n| feasible_ds(&budget, n, d_lo, d_hi))
        .ok_or_else(|| {
            Error::InfeasibleBudget(format!(
                "no grid point satisfies {} <= {}",
                budget.functional.as_str(),
                budget.limit
            ))
        })?;
    let frontier = ns
        .iter()
        .filter_map(|&n| {
            let d = *feasible_ds(&budget, n, d_lo, d_hi).last()?;
            (!budget.allows(n, d + 1)).then(|| FrontierPoint {
                n,
                d,
                predicted: perf_unchecked(params, n as f64, d as f64, d_prime),
            })
        })
        .collect();
    to_result(best, count, Some(frontier))
}

/// Dispatches on whether the space carries a budget.
pub fn optimize(params: &PerfLawParams, d_prime: f64, space: &SearchSpace, mode: SearchMode) -> Result<OptResult> {
    match space.budget {
        Some(_) => constrained_optimum(params, d_prime, space),
        None => global_optimum(params, d_prime, space, mode),
    }
}

/// One framework in a scaling-potential comparison. `w1`/`w2` may be
/// unknown when only the exponents were published.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialEntry {
    pub label: String,
    pub w1: Option<f64>,
    pub w2: Option<f64>,
    pub w3: f64,
    pub w4: f64,
    pub observed: Option<f64>,
}

impl PotentialEntry {
    pub fn from_params(label: impl Into<String>, p: &PerfLawParams, observed: Option<f64>) -> Self {
        Self {
            label: label.into(),
            w1: Some(p.w1),
            w2: Some(p.w2),
            w3: p.w3,
            w4: p.w4,
            observed,
        }
    }
}

/// Sign pattern of the coefficients multiplying the `n` and `d` groups.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientSigns {
    BothPositive,
    BothNegative,
    Mixed,
    Unknown,
}

impl CoefficientSigns {
    fn of(w1: Option<f64>, w2: Option<f64>) -> Self {
        match (w1, w2) {
            (Some(a), Some(b)) if a > 0.0 && b > 0.0 => Self::BothPositive,
            (Some(a), Some(b)) if a < 0.0 && b < 0.0 => Self::BothNegative,
            (Some(_), Some(_)) => Self::Mixed,
            _ => Self::Unknown,
        }
    }
}

/// How the exponent ordering reads under the sign of the coefficients.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialReading {
    /// Negative coefficients: lower `w3`, `w4` mean less headroom.
    LowerExponentsLessHeadroom,
    /// Positive coefficients: the reverse reading.
    LowerExponentsMoreHeadroom,
    /// Mixed or unknown signs; no reading applies.
    NotApplicable,
}

impl PotentialReading {
    fn of(signs: CoefficientSigns) -> Self {
        match signs {
            CoefficientSigns::BothNegative => Self::LowerExponentsLessHeadroom,
            CoefficientSigns::BothPositive => Self::LowerExponentsMoreHeadroom,
            _ => Self::NotApplicable,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Self::LowerExponentsLessHeadroom => "w1,w2<0: lower w3,w4 => less headroom",
            Self::LowerExponentsMoreHeadroom => "w1,w2>0: lower w3,w4 => more headroom",
            Self::NotApplicable => "signs mixed or unknown: no reading",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialRow {
    #[serde(flatten)]
    pub entry: PotentialEntry,
    pub signs: CoefficientSigns,
    pub reading: PotentialReading,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauStatus {
    Defined,
    /// Every pair is tied in one of the orderings.
    Tie,
    /// Some entry has no observed performance.
    NotRequested,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialReport {
    /// Sorted by `(w4, w3)` descending.
    pub rows: Vec<PotentialRow>,
    pub kendall_tau: Option<f64>,
    pub tau_status: TauStatus,
}

fn exponent_cmp(a: &PotentialEntry, b: &PotentialEntry) -> Ordering {
    a.w4.total_cmp(&b.w4).then(a.w3.total_cmp(&b.w3))
}

/// Kendall tau-b between two orderings given as pairwise comparators.
/// `None` when one ordering is all ties.
pub fn kendall_tau_b<T>(
    items: &[T],
    x: impl Fn(&T, &T) -> Ordering,
    y: impl Fn(&T, &T) -> Ordering,
) -> Option<f64> {
    let (mut concordant, mut discordant, mut tied_x, mut tied_y, mut pairs) = (0i64, 0i64, 0i64, 0i64, 0i64);
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            pairs += 1;
            let (cx, cy) = (x(&items[i], &items[j]), y(&items[i], &items[j]));
            if cx == Ordering::Equal {
                tied_x += 1;
            }
            if cy == Ordering::Equal {
                tied_y += 1;
            }
            if cx != Ordering::Equal && cy != Ordering::Equal {
                if cx == cy {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let denom = (((pairs - tied_x) * (pairs - tied_y)) as f64).sqrt();
    (denom > 0.0).then(|| (concordant - discordant) as f64 / denom)
}

pub fn scaling_potential(entries: &[PotentialEntry]) -> Result<PotentialReport> {
    if entries.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "comparison needs at least 2 fits, got {}",
            entries.len()
        )));
    }
    let mut sorted = entries.to_vec();
    // stable sort keeps input order among identical exponents
    sorted.sort_by(|a, b| exponent_cmp(b, a));
    let (kendall_tau, tau_status) = if sorted.iter().all(|e| e.observed.is_some()) {
        let tau = kendall_tau_b(&sorted, exponent_cmp, |a, b| {
            a.observed.unwrap().total_cmp(&b.observed.unwrap())
        });
        match tau {
            Some(t) => (Some(t), TauStatus::Defined),
            None => (None, TauStatus::Tie),
        }
    } else {
        (None, TauStatus::NotRequested)
    };
    let rows = sorted
        .into_iter()
        .map(|entry| {
            let signs = CoefficientSigns::of(entry.w1, entry.w2);
            PotentialRow {
                entry,
                signs,
                reading: PotentialReading::of(signs),
            }
        })
        .collect();
    Ok(PotentialReport {
        rows,
        kendall_tau,
        tau_status,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// Values print through `Display`, so published constants echo unchanged.
impl fmt::Display for PotentialReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        writeln!(out, "label\tw1\tw2\tw3\tw4\tobserved\treading").unwrap();
        for r in &self.rows {
            let e = &r.entry;
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.label,
                opt(e.w1),
                opt(e.w2),
                e.w3,
                e.w4,
                opt(e.observed),
                r.reading.describe()
            )
            .unwrap();
        }
        match (self.tau_status, self.kendall_tau) {
            (TauStatus::Defined, Some(t)) => write!(out, "kendall_tau\t{t}")?,
            (TauStatus::Tie, _) => write!(out, "kendall_tau\ttie")?,
            _ => write!(out, "kendall_tau\tnot requested")?,
        }
        f.write_str(&out)
    }
}
