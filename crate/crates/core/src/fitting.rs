//! Fitting law parameters to experiment run records.
//!
//! Every nonlinear fit is a deterministic multi-start: start `s` draws its
//! initial point from a ChaCha stream keyed by `(seed, s)`, runs
//! [`least_squares`], and the lowest-RSS result wins with ties going to the
//! lower start index. Starts run in parallel; the reduction is sequential in
//! start order, so the result does not depend on scheduling.
//!
//! Where the model is linear in some parameters once the exponents are
//! fixed, each start samples the exponents and solves for the linear part
//! before handing the point to Levenberg–Marquardt.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::laws::{
    grad_unchecked, loss_unchecked, perf_unchecked, LossForm, LossLawParams, MetricKind,
    MetricName, ParamMap, PerfLawParams,
};
use crate::lsq::{least_squares, LsqProblem, LsqSettings, LsqSolution};

/// One experiment observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset_id: String,
    pub n_layers: u32,
    pub d_emb: u32,
    pub metric: MetricName,
    pub k: Option<u32>,
    pub value: f64,
    pub d_prime: Option<f64>,
}

impl RunRecord {
    pub fn new(
        dataset_id: impl Into<String>,
        n_layers: u32,
        d_emb: u32,
        metric: MetricKind,
        value: f64,
        d_prime: Option<f64>,
    ) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            n_layers,
            d_emb,
            metric: metric.kind,
            k: metric.k,
            value,
            d_prime,
        }
    }

    pub fn metric_kind(&self) -> MetricKind {
        MetricKind {
            kind: self.metric,
            k: self.k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_id.is_empty() {
            return Err(Error::Invalid("empty dataset_id".into()));
        }
        if self.n_layers == 0 || self.d_emb == 0 {
            return Err(Error::Invalid("n_layers and d_emb must be positive".into()));
        }
        self.metric_kind().validate()?;
        if !self.value.is_finite() {
            return Err(Error::Invalid(format!("value {} is not finite", self.value)));
        }
        if self.metric.is_ranking() && !(0.0..=1.0).contains(&self.value) {
            return Err(Error::Invalid(format!(
                "{} value {} outside [0, 1]",
                self.metric_kind(),
                self.value
            )));
        }
        if let Some(dp) = self.d_prime {
            if !(dp.is_finite() && dp > 0.0) {
                return Err(Error::Invalid(format!("d_prime {dp} must be positive")));
            }
        }
        Ok(())
    }

    /// Identity used for duplicate detection and pairing.
    pub fn key(&self) -> (String, u32, u32, MetricKind) {
        (
            self.dataset_id.clone(),
            self.n_layers,
            self.d_emb,
            self.metric_kind(),
        )
    }
}

pub fn validate_runs(runs: &[RunRecord]) -> Result<()> {
    for (index, r) in runs.iter().enumerate() {
        r.validate().map_err(|e| Error::InvalidRecord {
            index,
            message: e.to_string(),
        })?;
    }
    Ok(())
}

/// Model-size covariate `n` of the loss law.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeCovariate {
    /// `n = n_layers`; runs must share one embedding width.
    #[default]
    Layers,
    /// `n = n_layers · d_emb²`, a parameter-count proxy.
    LayersDembSq,
}

impl SizeCovariate {
    pub fn size(self, run: &RunRecord) -> f64 {
        match self {
            SizeCovariate::Layers => run.n_layers as f64,
            SizeCovariate::LayersDembSq => run.n_layers as f64 * (run.d_emb as f64).powi(2),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SizeCovariate::Layers => "layers",
            SizeCovariate::LayersDembSq => "layers_demb_sq",
        }
    }
}

impl FromStr for SizeCovariate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(SizeCovariate::Layers),
            "layers_demb_sq" | "layers-demb-sq" => Ok(SizeCovariate::LayersDembSq),
            other => Err(Error::Invalid(format!("unknown size covariate {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSettings {
    pub starts: usize,
    pub seed: u64,
    pub lsq: LsqSettings,
    /// Parameters frozen at the given value.
    pub mask: BTreeMap<String, f64>,
    /// Replacement `(lo, hi)` bounds by parameter name.
    pub bounds: BTreeMap<String, (f64, f64)>,
    pub size_covariate: SizeCovariate,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            starts: 64,
            seed: 0,
            lsq: LsqSettings::default(),
            mask: BTreeMap::new(),
            bounds: BTreeMap::new(),
            size_covariate: SizeCovariate::Layers,
        }
    }
}

impl FitSettings {
    /// Defaults for performance-law fits: `w6` frozen at 1.
    pub fn perf_default() -> Self {
        let mut s = Self::default();
        s.mask.insert("w6".into(), 1.0);
        s
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum LawParams {
    Loss(LossLawParams),
    Perf(PerfLawParams),
}

impl LawParams {
    pub fn to_map(&self) -> ParamMap {
        match self {
            LawParams::Loss(p) => p.to_map(),
            LawParams::Perf(p) => p.to_map(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub params: LawParams,
    /// `None` when the observations have zero variance.
    pub r_squared: Option<f64>,
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub start_index: usize,
    pub points: usize,
    pub size_covariate: SizeCovariate,
}

impl FitResult {
    /// Prediction for one run. Performance-law fits need `d_prime`.
    pub fn predict(&self, run: &RunRecord) -> Result<f64> {
        match &self.params {
            LawParams::Loss(p) => {
                let d = run
                    .d_prime
                    .ok_or_else(|| Error::Invalid("run has no d_prime".into()))?;
                crate::laws::eval_loss_law(p, self.size_covariate.size(run), d)
            }
            LawParams::Perf(p) => {
                let d = run
                    .d_prime
                    .ok_or_else(|| Error::Invalid("run has no d_prime".into()))?;
                crate::laws::eval_perf_law(p, run.n_layers as f64, run.d_emb as f64, d)
            }
        }
    }

    /// Flat JSON document: law parameters by name plus fit diagnostics.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        let (law, form) = match &self.params {
            LawParams::Loss(p) => (
                "loss",
                match p.form() {
                    LossForm::Full => "full",
                    LossForm::Simplified => "simplified",
                },
            ),
            LawParams::Perf(_) => ("perf", "generalized"),
        };
        map.insert("law".into(), json!(law));
        map.insert("form".into(), json!(form));
        for (k, v) in self.params.to_map() {
            map.insert(k, json!(v));
        }
        map.insert("r_squared".into(), json!(self.r_squared));
        map.insert("rss".into(), json!(self.rss));
        map.insert("converged".into(), json!(self.converged));
        map.insert("iterations".into(), json!(self.iterations));
        map.insert("start_index".into(), json!(self.start_index));
        map.insert("points".into(), json!(self.points));
        map.insert("size_covariate".into(), json!(self.size_covariate.as_str()));
        Value::Object(map)
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Invalid("fit document must be a JSON object".into()))?;
        let law = obj.get("law").and_then(Value::as_str).unwrap_or("perf");
        let reserved = [
            "law",
            "form",
            "r_squared",
            "rss",
            "converged",
            "iterations",
            "start_index",
            "points",
            "size_covariate",
        ];
        let mut params = ParamMap::new();
        for (k, val) in obj {
            if reserved.contains(&k.as_str()) {
                continue;
            }
            let x = val
                .as_f64()
                .ok_or_else(|| Error::Invalid(format!("parameter {k} is not a number")))?;
            params.insert(k.clone(), x);
        }
        let params = match law {
            "loss" => LawParams::Loss(LossLawParams::from_map(&params)?),
            "perf" => LawParams::Perf(PerfLawParams::from_map(&params)?),
            other => return Err(Error::Invalid(format!("unknown law {other:?}"))),
        };
        let num = |k: &str| obj.get(k).and_then(Value::as_f64);
        Ok(Self {
            params,
            r_squared: num("r_squared"),
            rss: num("rss").unwrap_or(f64::NAN),
            iterations: num("iterations").unwrap_or(0.0) as usize,
            converged: obj.get("converged").and_then(Value::as_bool).unwrap_or(false),
            start_index: num("start_index").unwrap_or(0.0) as usize,
            points: num("points").unwrap_or(0.0) as usize,
            size_covariate: obj
                .get("size_covariate")
                .and_then(Value::as_str)
                .map(str::parse)
                .transpose()?
                .unwrap_or_default(),
        })
    }
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    if observed.len() != predicted.len() {
        return Err(Error::Invalid(format!(
            "{} observations but {} predictions",
            observed.len(),
            predicted.len()
        )));
    }
    if observed.is_empty() {
        return Err(Error::InsufficientData("no observations".into()));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::InsufficientData(
            "observations have zero variance".into(),
        ));
    }
    let ss_res: f64 = observed
        .iter()
        .zip(predicted)
        .map(|(y, p)| (y - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub pearson_r: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope · x + intercept`. When `ys` is constant
/// the correlation is reported as zero.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::Invalid("xs and ys differ in length".into()));
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientData("need at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all xs are equal".into()));
    }
    let slope = sxy / sxx;
    let pearson_r = if syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        pearson_r,
        r_squared: pearson_r * pearson_r,
    })
}

/// Slope `k` of `1 − performance = k · loss` through the origin, pairing
/// runs on `(dataset_id, n_layers, d_emb)`.
pub fn fit_k(loss_runs: &[RunRecord], perf_runs: &[RunRecord]) -> Result<f64> {
    let mut losses: BTreeMap<(&str, u32, u32), f64> = BTreeMap::new();
    for r in loss_runs.iter().filter(|r| r.metric == MetricName::Loss) {
        losses.insert((r.dataset_id.as_str(), r.n_layers, r.d_emb), r.value);
    }
    let (mut num, mut den, mut pairs) = (0.0, 0.0, 0usize);
    for p in perf_runs.iter().filter(|r| r.metric.is_ranking()) {
        if let Some(&l) = losses.get(&(p.dataset_id.as_str(), p.n_layers, p.d_emb)) {
            num += l * (1.0 - p.value);
            den += l * l;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::InsufficientData(
            "no (dataset_id, n_layers, d_emb) pairs with both loss and performance".into(),
        ));
    }
    if den == 0.0 {
        return Err(Error::InsufficientData("all paired losses are zero".into()));
    }
    Ok(num / den)
}

fn distinct<T: Ord>(it: impl Iterator<Item = T>) -> usize {
    it.collect::<BTreeSet<_>>().len()
}

fn distinct_f64(it: impl Iterator<Item = f64>) -> usize {
    distinct(it.map(f64::to_bits))
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn signed_log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let m = log_uniform(rng, lo, hi);
    if rng.random::<bool>() {
        m
    } else {
        -m
    }
}

/// Least-squares coefficients for `a · β ≈ b` via SVD.
fn linear_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.ncols() == 0 {
        return Some(DVector::zeros(0));
    }
    a.clone().svd(true, true).solve(b, 1e-12).ok()
}

struct StartOutcome {
    index: usize,
    solution: LsqSolution,
}

/// Runs `starts` independent fits and keeps the best.
fn multi_start<F>(settings: &FitSettings, run_one: F) -> Result<StartOutcome>
where
    F: Fn(&mut ChaCha8Rng) -> Result<LsqSolution> + Sync,
{
    if settings.starts == 0 {
        return Err(Error::Invalid("multi-start count must be at least 1".into()));
    }
    let outcomes: Vec<Result<LsqSolution>> = (0..settings.starts)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(s as u64);
            run_one(&mut rng)
        })
        .collect();

    let mut best: Option<StartOutcome> = None;
    let mut first_err = None;
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(solution) if solution.rss.is_finite() => {
                let better = match &best {
                    None => true,
                    Some(b) => solution.rss < b.solution.rss - 1e-12,
                };
                if better {
                    best = Some(StartOutcome { index, solution });
                }
            }
            Ok(_) => {}
            Err(e @ Error::Underdetermined { .. }) => return Err(e),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| {
        first_err.unwrap_or_else(|| Error::NonFinite("every start diverged".into()))
    })
}

fn bounds_for(names: &[&str], defaults: &[(f64, f64)], settings: &FitSettings) -> Result<Vec<(f64, f64)>> {
    for k in settings.bounds.keys() {
        if !names.contains(&k.as_str()) {
            return Err(Error::Invalid(format!("bounds given for unknown parameter {k}")));
        }
    }
    names
        .iter()
        .zip(defaults)
        .map(|(n, &d)| {
            let b = settings.bounds.get(*n).copied().unwrap_or(d);
            if b.0 > b.1 {
                Err(Error::Invalid(format!("empty bounds for {n}")))
            } else {
                Ok(b)
            }
        })
        .collect()
}

fn frozen_for(names: &[&str], settings: &FitSettings) -> Result<Vec<Option<f64>>> {
    for k in settings.mask.keys() {
        if !names.contains(&k.as_str()) {
            return Err(Error::Invalid(format!("mask names unknown parameter {k}")));
        }
    }
    Ok(names.iter().map(|n| settings.mask.get(*n).copied()).collect())
}

fn finish(
    params: LawParams,
    observed: &[f64],
    predicted: &[f64],
    best: StartOutcome,
    size_covariate: SizeCovariate,
) -> FitResult {
    FitResult {
        params,
        r_squared: r_squared(observed, predicted).ok(),
        rss: best.solution.rss,
        iterations: best.solution.iterations,
        converged: best.solution.converged,
        start_index: best.index,
        points: observed.len(),
        size_covariate,
    }
}

fn check_single_metric(runs: &[RunRecord]) -> Result<MetricKind> {
    let kinds: BTreeSet<MetricKind> = runs.iter().map(RunRecord::metric_kind).collect();
    if kinds.len() > 1 {
        let names: Vec<String> = kinds.iter().map(ToString::to_string).collect();
        return Err(Error::InsufficientData(format!(
            "runs mix metrics {}; fit one metric at a time",
            names.join(", ")
        )));
    }
    Ok(*kinds.iter().next().expect("runs are non-empty"))
}

fn check_size_covariate(runs: &[RunRecord], cov: SizeCovariate) -> Result<()> {
    if cov == SizeCovariate::Layers && distinct(runs.iter().map(|r| r.d_emb)) > 1 {
        return Err(Error::InsufficientData(
            "runs span several d_emb values; fit one d_emb line at a time or use the layers_demb_sq covariate"
                .into(),
        ));
    }
    Ok(())
}

const LOSS_EXPONENT_BOUNDS: (f64, f64) = (1e-6, 32.0);

/// Fits the loss law to loss runs, using `d_prime` as the data variable.
pub fn fit_loss_law(runs: &[RunRecord], form: LossForm, settings: &FitSettings) -> Result<FitResult> {
    validate_runs(runs)?;
    if runs.len() < 6 {
        return Err(Error::InsufficientData(format!(
            "loss-law fit needs at least 6 runs, got {}",
            runs.len()
        )));
    }
    if runs.iter().any(|r| r.metric != MetricName::Loss) {
        return Err(Error::InsufficientData("loss-law fit takes loss runs only".into()));
    }
    if runs.iter().any(|r| r.d_prime.is_none()) {
        return Err(Error::InsufficientData("every run needs d_prime".into()));
    }
    check_size_covariate(runs, settings.size_covariate)?;
    let ns: Vec<f64> = runs.iter().map(|r| settings.size_covariate.size(r)).collect();
    let ds: Vec<f64> = runs.iter().map(|r| r.d_prime.unwrap()).collect();
    let ys: Vec<f64> = runs.iter().map(|r| r.value).collect();
    if distinct_f64(ns.iter().copied()) < 2 || distinct_f64(ds.iter().copied()) < 2 {
        return Err(Error::InsufficientData(
            "loss-law fit needs at least 2 distinct model sizes and 2 distinct data scales".into(),
        ));
    }

    let (params, best) = match form {
        LossForm::Simplified => fit_simplified(&ns, &ds, &ys, settings)?,
        LossForm::Full => fit_full(&ns, &ds, &ys, settings)?,
    };
    let predicted: Vec<f64> = ns
        .iter()
        .zip(&ds)
        .map(|(&n, &d)| loss_unchecked(&params, n, d))
        .collect();
    Ok(finish(
        LawParams::Loss(params),
        &ys,
        &predicted,
        best,
        settings.size_covariate,
    ))
}

fn fit_simplified(
    ns: &[f64],
    ds: &[f64],
    ys: &[f64],
    settings: &FitSettings,
) -> Result<(LossLawParams, StartOutcome)> {
    let names = LossLawParams::SIMPLIFIED_NAMES;
    let bounds = bounds_for(
        &names,
        &[
            (-1e3, 1e3),
            (0.0, 1e6),
            (0.0, 1e6),
            LOSS_EXPONENT_BOUNDS,
            LOSS_EXPONENT_BOUNDS,
        ],
        settings,
    )?;
    let frozen = frozen_for(&names, settings)?;
    let model = |p: &[f64], i: usize| {
        loss_unchecked(&LossLawParams::from_slice(LossForm::Simplified, p), ns[i], ds[i])
    };
    let residuals = |p: &[f64]| -> Vec<f64> { (0..ys.len()).map(|i| model(p, i) - ys[i]).collect() };
    let jacobian = |p: &[f64]| -> DMatrix<f64> {
        DMatrix::from_fn(ys.len(), 5, |i, c| {
            let (n, d) = (ns[i], ds[i]);
            match c {
                0 => 1.0,
                1 => crate::laws::decay(1.0, n, p[3]),
                2 => crate::laws::decay(1.0, d, p[4]),
                3 => -crate::laws::decay(p[1], n, p[3]) * n.ln(),
                _ => -crate::laws::decay(p[2], d, p[4]) * d.ln(),
            }
        })
    };
    let problem = LsqProblem {
        residuals: &residuals,
        jacobian: Some(&jacobian),
        bounds: bounds.clone(),
        frozen: frozen.iter().map(Option::is_some).collect(),
    };

    let best = multi_start(settings, |rng| {
        let alpha = frozen[3].unwrap_or_else(|| log_uniform(rng, 1e-2, 2.0));
        let beta = frozen[4].unwrap_or_else(|| log_uniform(rng, 1e-2, 2.0));
        // E, A, B are linear given the exponents
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut rhs: Vec<f64> = ys.to_vec();
        let basis = |c: usize, i: usize| match c {
            0 => 1.0,
            1 => crate::laws::decay(1.0, ns[i], alpha),
            _ => crate::laws::decay(1.0, ds[i], beta),
        };
        let mut free_lin = Vec::new();
        for c in 0..3 {
            match frozen[c] {
                Some(v) => rhs.iter_mut().enumerate().for_each(|(i, y)| *y -= v * basis(c, i)),
                None => {
                    free_lin.push(c);
                    cols.push((0..ys.len()).map(|i| basis(c, i)).collect());
                }
            }
        }
        let a = DMatrix::from_fn(ys.len(), cols.len(), |i, c| cols[c][i]);
        let beta_lin = linear_solve(&a, &DVector::from_vec(rhs));
        let mut init = [0.0, 1.0, 1.0, alpha, beta];
        for c in 0..3 {
            init[c] = frozen[c].unwrap_or(if c == 0 { 0.0 } else { log_uniform(rng, 1e-3, 1e3) });
        }
        if let Some(sol) = beta_lin {
            for (pos, &c) in free_lin.iter().enumerate() {
                if sol[pos].is_finite() {
                    init[c] = sol[pos];
                }
            }
        }
        for (v, &(lo, hi)) in init.iter_mut().zip(&bounds) {
            *v = v.clamp(lo, hi);
        }
        least_squares(&problem, &init, &settings.lsq)
    })?;
    Ok((
        LossLawParams::from_slice(LossForm::Simplified, &best.solution.params),
        best,
    ))
}

/// Full form, fitted in `(ln Nc, ln Dc, alphaN, alphaD)`.
fn full_loss(ln_nc: f64, ln_dc: f64, alpha_n: f64, alpha_d: f64, n: f64, d: f64) -> f64 {
    let base = ((alpha_n / alpha_d) * (ln_nc - n.ln())).exp() + (ln_dc - d.ln()).exp();
    base.powf(alpha_d)
}

fn fit_full(
    ns: &[f64],
    ds: &[f64],
    ys: &[f64],
    settings: &FitSettings,
) -> Result<(LossLawParams, StartOutcome)> {
    let names = LossLawParams::FULL_NAMES;
    let natural_bounds = bounds_for(
        &names,
        &[(1e-20, 1e20), (1e-20, 1e20), LOSS_EXPONENT_BOUNDS, LOSS_EXPONENT_BOUNDS],
        settings,
    )?;
    if natural_bounds[0].0 <= 0.0 || natural_bounds[1].0 <= 0.0 {
        return Err(Error::Invalid("Nc and Dc bounds must be positive".into()));
    }
    let bounds: Vec<(f64, f64)> = natural_bounds
        .iter()
        .enumerate()
        .map(|(j, &(lo, hi))| if j < 2 { (lo.ln(), hi.ln()) } else { (lo, hi) })
        .collect();
    let frozen: Vec<Option<f64>> = frozen_for(&names, settings)?
        .into_iter()
        .enumerate()
        .map(|(j, v)| if j < 2 { v.map(f64::ln) } else { v })
        .collect();
    let residuals = |p: &[f64]| -> Vec<f64> {
        (0..ys.len())
            .map(|i| full_loss(p[0], p[1], p[2], p[3], ns[i], ds[i]) - ys[i])
            .collect()
    };
    let problem = LsqProblem {
        residuals: &residuals,
        jacobian: None,
        bounds: bounds.clone(),
        frozen: frozen.iter().map(Option::is_some).collect(),
    };
    let (n_lo, n_hi) = min_max(ns);
    let (d_lo, d_hi) = min_max(ds);

    let best = multi_start(settings, |rng| {
        let mut init = [
            frozen[0].unwrap_or_else(|| uniform(rng, n_lo.ln() - 3.0, n_hi.ln() + 3.0)),
            frozen[1].unwrap_or_else(|| uniform(rng, d_lo.ln() - 5.0, d_hi.ln() + 3.0)),
            frozen[2].unwrap_or_else(|| log_uniform(rng, 0.05, 2.0)),
            frozen[3].unwrap_or_else(|| log_uniform(rng, 0.05, 2.0)),
        ];
        for (v, &(lo, hi)) in init.iter_mut().zip(&bounds) {
            *v = v.clamp(lo, hi);
        }
        least_squares(&problem, &init, &settings.lsq)
    })?;
    let p = &best.solution.params;
    Ok((
        LossLawParams::Full {
            n_c: p[0].exp(),
            d_c: p[1].exp(),
            alpha_n: p[2],
            alpha_d: p[3],
        },
        best,
    ))
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Joint full-form loss fit with a free data parameter per dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataParameterFit {
    /// Shared law with `Dc` pinned to 1, so `Dc / D̄ = 1 / D̄`.
    pub law: LossLawParams,
    /// Fitted `D̄` by dataset id.
    pub data_parameters: BTreeMap<String, f64>,
    pub fit: FitResult,
}

/// Fits `L = [(Nc/n)^(αN/αD) + 1/D̄_j]^αD` across datasets, sharing
/// `Nc, αN, αD` and estimating one data parameter `D̄_j` per dataset.
pub fn fit_data_parameters(runs: &[RunRecord], settings: &FitSettings) -> Result<DataParameterFit> {
    validate_runs(runs)?;
    if runs.iter().any(|r| r.metric != MetricName::Loss) {
        return Err(Error::InsufficientData("data-parameter fit takes loss runs only".into()));
    }
    check_size_covariate(runs, settings.size_covariate)?;
    let datasets: Vec<String> = runs
        .iter()
        .map(|r| r.dataset_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if datasets.len() < 2 {
        return Err(Error::InsufficientData(
            "data-parameter fit needs at least 2 datasets".into(),
        ));
    }
    for ds in &datasets {
        let sizes = distinct_f64(
            runs.iter()
                .filter(|r| &r.dataset_id == ds)
                .map(|r| settings.size_covariate.size(r)),
        );
        if sizes < 2 {
            return Err(Error::InsufficientData(format!(
                "dataset {ds} needs at least 2 distinct model sizes"
            )));
        }
    }
    let index: Vec<usize> = runs
        .iter()
        .map(|r| datasets.binary_search(&r.dataset_id).expect("collected above"))
        .collect();
    let ns: Vec<f64> = runs.iter().map(|r| settings.size_covariate.size(r)).collect();
    let ys: Vec<f64> = runs.iter().map(|r| r.value).collect();
    let nparams = 3 + datasets.len();

    let residuals = |p: &[f64]| -> Vec<f64> {
        (0..ys.len())
            .map(|i| {
                let base =
                    ((p[1] / p[2]) * (p[0] - ns[i].ln())).exp() + p[3 + index[i]].exp();
                base.powf(p[2]) - ys[i]
            })
            .collect()
    };
    let mut bounds = vec![(-46.0, 46.0), LOSS_EXPONENT_BOUNDS, LOSS_EXPONENT_BOUNDS];
    bounds.extend(std::iter::repeat_n((-46.0, 46.0), datasets.len()));
    let problem = LsqProblem {
        residuals: &residuals,
        jacobian: None,
        bounds: bounds.clone(),
        frozen: vec![false; nparams],
    };
    let (n_lo, n_hi) = min_max(&ns);
    let best = multi_start(settings, |rng| {
        let mut init = vec![
            uniform(rng, n_lo.ln() - 3.0, n_hi.ln() + 3.0),
            log_uniform(rng, 0.05, 2.0),
            log_uniform(rng, 0.05, 2.0),
        ];
        // start each dataset near its large-model asymptote
        for j in 0..datasets.len() {
            let floor = runs
                .iter()
                .zip(&index)
                .filter(|(_, &k)| k == j)
                .map(|(r, _)| r.value)
                .fold(f64::INFINITY, f64::min)
                .max(1e-12);
            let jitter = uniform(rng, -1.0, 1.0);
            init.push((floor.ln() / init[2] + jitter).clamp(-46.0, 46.0));
        }
        for (v, &(lo, hi)) in init.iter_mut().zip(&bounds) {
            *v = v.clamp(lo, hi);
        }
        least_squares(&problem, &init, &settings.lsq)
    })?;

    let p = best.solution.params.clone();
    let law = LossLawParams::Full {
        n_c: p[0].exp(),
        d_c: 1.0,
        alpha_n: p[1],
        alpha_d: p[2],
    };
    let data_parameters: BTreeMap<String, f64> = datasets
        .iter()
        .enumerate()
        .map(|(j, ds)| (ds.clone(), (-p[3 + j]).exp()))
        .collect();
    let predicted: Vec<f64> = residuals(&p).iter().zip(&ys).map(|(r, y)| r + y).collect();
    let fit = finish(LawParams::Loss(law), &ys, &predicted, best, settings.size_covariate);
    Ok(DataParameterFit {
        law,
        data_parameters,
        fit,
    })
}

const COEF_BOUNDS: (f64, f64) = (-1e3, 1e3);
const EXPONENT_BOUNDS: (f64, f64) = (-32.0, 32.0);
const AMPLITUDE_BOUNDS: (f64, f64) = (-1e3, 1e3);

/// One `w (ln x + p x^-e)` group of the performance law.
struct Group {
    coef: usize,
    amp: usize,
    exp: usize,
}

const GROUPS: [Group; 3] = [
    Group { coef: 0, amp: 6, exp: 2 },
    Group { coef: 1, amp: 7, exp: 3 },
    Group { coef: 5, amp: 8, exp: 4 },
];
const INTERCEPT: usize = 9;

/// Fits the generalized performance law to one ranking metric.
pub fn fit_perf_law(runs: &[RunRecord], settings: &FitSettings) -> Result<FitResult> {
    validate_runs(runs)?;
    if runs.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "performance-law fit needs at least 10 runs, got {}",
            runs.len()
        )));
    }
    if runs.iter().any(|r| !r.metric.is_ranking()) {
        return Err(Error::InsufficientData(
            "performance-law fit takes hr, ndcg or mrr runs".into(),
        ));
    }
    check_single_metric(runs)?;
    if let Some(i) = runs.iter().position(|r| r.d_prime.is_none()) {
        return Err(Error::InsufficientData(format!("run {i} has no d_prime")));
    }
    if distinct(runs.iter().map(|r| r.n_layers)) < 3 || distinct(runs.iter().map(|r| r.d_emb)) < 3 {
        return Err(Error::InsufficientData(
            "performance-law fit needs at least 3 distinct n_layers and 3 distinct d_emb".into(),
        ));
    }

    let xs: Vec<[f64; 3]> = runs
        .iter()
        .map(|r| [r.n_layers as f64, r.d_emb as f64, r.d_prime.unwrap()])
        .collect();
    let ys: Vec<f64> = runs.iter().map(|r| r.value).collect();
    let names = PerfLawParams::NAMES;
    let bounds = bounds_for(
        &names,
        &[
            COEF_BOUNDS,
            COEF_BOUNDS,
            EXPONENT_BOUNDS,
            EXPONENT_BOUNDS,
            EXPONENT_BOUNDS,
            COEF_BOUNDS,
            AMPLITUDE_BOUNDS,
            AMPLITUDE_BOUNDS,
            AMPLITUDE_BOUNDS,
            COEF_BOUNDS,
        ],
        settings,
    )?;
    let frozen = frozen_for(&names, settings)?;
    for (j, v) in frozen.iter().enumerate() {
        if let Some(v) = v {
            if !(bounds[j].0 <= *v && *v <= bounds[j].1) {
                return Err(Error::Invalid(format!(
                    "mask value {v} for {} outside its bounds",
                    names[j]
                )));
            }
        }
    }

    let residuals = |p: &[f64]| -> Vec<f64> {
        let params = PerfLawParams::from_slice(p);
        xs.iter()
            .zip(&ys)
            .map(|(x, y)| perf_unchecked(&params, x[0], x[1], x[2]) - y)
            .collect()
    };
    let jacobian = |p: &[f64]| -> DMatrix<f64> {
        let params = PerfLawParams::from_slice(p);
        let mut jac = DMatrix::zeros(xs.len(), 10);
        for (i, x) in xs.iter().enumerate() {
            let g = grad_unchecked(&params, x[0], x[1], x[2]);
            for (c, v) in g.iter().enumerate() {
                jac[(i, c)] = *v;
            }
        }
        jac
    };
    let problem = LsqProblem {
        residuals: &residuals,
        jacobian: Some(&jacobian),
        bounds: bounds.clone(),
        frozen: frozen.iter().map(Option::is_some).collect(),
    };

    let best = multi_start(settings, |rng| {
        let mut start = perf_sample(rng, &frozen);
        for (v, &(lo, hi)) in start.iter_mut().zip(&bounds) {
            *v = v.clamp(lo, hi);
        }
        // variable projection over the free exponents first: the linear
        // coefficients are re-solved at every trial point
        let exps: Vec<usize> = GROUPS
            .iter()
            .map(|g| g.exp)
            .filter(|&j| frozen[j].is_none())
            .collect();
        if !exps.is_empty() {
            let point = |e: &[f64]| {
                let mut s = start.clone();
                for (&j, &v) in exps.iter().zip(e) {
                    s[j] = v;
                }
                perf_linear_part(&s, &xs, &ys, &frozen, &bounds)
            };
            let projected = |e: &[f64]| residuals(&point(e));
            let reduced = LsqProblem {
                residuals: &projected,
                jacobian: None,
                bounds: exps.iter().map(|&j| bounds[j]).collect(),
                frozen: vec![false; exps.len()],
            };
            let e0: Vec<f64> = exps.iter().map(|&j| start[j]).collect();
            if let Ok(sol) = least_squares(&reduced, &e0, &settings.lsq) {
                for (&j, &v) in exps.iter().zip(&sol.params) {
                    start[j] = v;
                }
            }
        }
        let init = perf_linear_part(&start, &xs, &ys, &frozen, &bounds);
        least_squares(&problem, &init, &settings.lsq)
    })?;
    let params = PerfLawParams::from_slice(&best.solution.params);
    let predicted: Vec<f64> = xs
        .iter()
        .map(|x| perf_unchecked(&params, x[0], x[1], x[2]))
        .collect();
    Ok(finish(
        LawParams::Perf(params),
        &ys,
        &predicted,
        best,
        settings.size_covariate,
    ))
}

/// Random starting point: exponents and fallback amplitudes are sampled,
/// coefficients start at zero. Frozen entries keep their values.
fn perf_sample(rng: &mut ChaCha8Rng, frozen: &[Option<f64>]) -> Vec<f64> {
    let mut init = vec![0.0; 10];
    for (g, group) in GROUPS.iter().enumerate() {
        init[group.exp] = frozen[group.exp].unwrap_or_else(|| {
            if g == 2 {
                signed_log_uniform(rng, 1e-3, 1.0)
            } else {
                signed_log_uniform(rng, 1e-3, 2.0)
            }
        });
        init[group.amp] = frozen[group.amp].unwrap_or_else(|| log_uniform(rng, 1e-3, 1e3));
        init[group.coef] = frozen[group.coef].unwrap_or(0.0);
    }
    init[INTERCEPT] = frozen[INTERCEPT].unwrap_or(0.0);
    init
}

/// Holding the exponents of `start` fixed, solves the coefficients that
/// enter linearly (`w`, `w·p` and `C`) and returns the completed point.
fn perf_linear_part(
    start: &[f64],
    xs: &[[f64; 3]],
    ys: &[f64],
    frozen: &[Option<f64>],
    bounds: &[(f64, f64)],
) -> Vec<f64> {
    let mut init = start.to_vec();
    enum Col {
        // (group, with amplitude folded in) for a free coefficient
        Coef(usize, bool),
        // w·p with both free
        Product(usize),
        // p with coefficient frozen
        Amp(usize),
        Intercept,
    }
    let mut cols: Vec<Col> = Vec::new();
    let mut rhs: Vec<f64> = ys.to_vec();
    for (g, group) in GROUPS.iter().enumerate() {
        let e = init[group.exp];
        let coef_free = frozen[group.coef].is_none();
        let amp_free = frozen[group.amp].is_none();
        match (coef_free, amp_free) {
            (true, true) => {
                cols.push(Col::Coef(g, false));
                cols.push(Col::Product(g));
            }
            (true, false) => cols.push(Col::Coef(g, true)),
            (false, true) => {
                let w = init[group.coef];
                for (i, x) in xs.iter().enumerate() {
                    rhs[i] -= w * x[g].ln();
                }
                cols.push(Col::Amp(g));
            }
            (false, false) => {
                let (w, p) = (init[group.coef], init[group.amp]);
                for (i, x) in xs.iter().enumerate() {
                    rhs[i] -= w * (x[g].ln() + crate::laws::decay(p, x[g], e));
                }
            }
        }
    }
    if frozen[INTERCEPT].is_none() {
        cols.push(Col::Intercept);
    } else {
        rhs.iter_mut().for_each(|y| *y -= init[INTERCEPT]);
    }

    let a = DMatrix::from_fn(xs.len(), cols.len(), |i, c| {
        let x = &xs[i];
        match cols[c] {
            Col::Coef(g, folded) => {
                let group = &GROUPS[g];
                let base = x[g].ln();
                if folded {
                    base + crate::laws::decay(init[group.amp], x[g], init[group.exp])
                } else {
                    base
                }
            }
            Col::Product(g) => crate::laws::decay(1.0, x[g], init[GROUPS[g].exp]),
            Col::Amp(g) => {
                let group = &GROUPS[g];
                init[group.coef] * crate::laws::decay(1.0, x[g], init[group.exp])
            }
            Col::Intercept => 1.0,
        }
    });
    if let Some(sol) = linear_solve(&a, &DVector::from_vec(rhs)) {
        if sol.iter().all(|v| v.is_finite()) {
            for (c, col) in cols.iter().enumerate() {
                match *col {
                    Col::Coef(g, _) => init[GROUPS[g].coef] = sol[c],
                    Col::Amp(g) => init[GROUPS[g].amp] = sol[c],
                    Col::Intercept => init[INTERCEPT] = sol[c],
                    Col::Product(_) => {}
                }
            }
            for (c, col) in cols.iter().enumerate() {
                if let Col::Product(g) = *col {
                    let w = init[GROUPS[g].coef];
                    if w.abs() > 1e-9 {
                        init[GROUPS[g].amp] = sol[c] / w;
                    }
                }
            }
        }
    }
    for (v, &(lo, hi)) in init.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
    init
}
