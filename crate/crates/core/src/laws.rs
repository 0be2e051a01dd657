//! Loss-law and performance-law function families.
//!
//! The performance law predicts a ranking metric from layer count `n`,
//! embedding width `d` and data parameter `D′`:
//!
//! ```text
//! perf = w1 (ln n  + p1 n^-w3)
//!      + w2 (ln d  + p2 d^-w4)
//!      + w6 (ln D′ + p3 D′^-w5)
//!      + C
//! ```
//!
//! The single-amplitude textbook form is the special case `w6 = 1`,
//! `C = 0`, `p1 = p2`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ParamMap = BTreeMap<String, f64>;

/// `p · x^-w`, evaluated in log space when the direct power over- or
/// underflows.
pub(crate) fn decay(p: f64, x: f64, w: f64) -> f64 {
    if p == 0.0 {
        return 0.0;
    }
    let t = x.powf(-w);
    if t.is_normal() {
        p * t
    } else {
        p.signum() * (p.abs().ln() - w * x.ln()).exp()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossForm {
    Full,
    Simplified,
}

impl FromStr for LossForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossForm::Full),
            "simplified" => Ok(LossForm::Simplified),
            other => Err(Error::Invalid(format!("unknown loss-law form {other:?}"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum LossLawParams {
    /// `[(n_c / n)^(alpha_n / alpha_d) + d_c / d]^alpha_d`
    Full {
        n_c: f64,
        d_c: f64,
        alpha_n: f64,
        alpha_d: f64,
    },
    /// `e + a / n^alpha + b / d^beta`
    Simplified {
        e: f64,
        a: f64,
        b: f64,
        alpha: f64,
        beta: f64,
    },
}

impl LossLawParams {
    /// Compute-optimal constants published for Chinchilla.
    pub const CHINCHILLA: LossLawParams = LossLawParams::Simplified {
        e: 1.61,
        a: 406.4,
        b: 410.7,
        alpha: 0.34,
        beta: 0.28,
    };

    pub fn form(&self) -> LossForm {
        match self {
            LossLawParams::Full { .. } => LossForm::Full,
            LossLawParams::Simplified { .. } => LossForm::Simplified,
        }
    }

    pub const FULL_NAMES: [&'static str; 4] = ["Nc", "Dc", "alphaN", "alphaD"];
    pub const SIMPLIFIED_NAMES: [&'static str; 5] = ["E", "A", "B", "alpha", "beta"];

    pub fn names(form: LossForm) -> &'static [&'static str] {
        match form {
            LossForm::Full => &Self::FULL_NAMES,
            LossForm::Simplified => &Self::SIMPLIFIED_NAMES,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            LossLawParams::Full {
                n_c,
                d_c,
                alpha_n,
                alpha_d,
            } => vec![n_c, d_c, alpha_n, alpha_d],
            LossLawParams::Simplified {
                e,
                a,
                b,
                alpha,
                beta,
            } => vec![e, a, b, alpha, beta],
        }
    }

    pub fn from_slice(form: LossForm, v: &[f64]) -> Self {
        match form {
            LossForm::Full => LossLawParams::Full {
                n_c: v[0],
                d_c: v[1],
                alpha_n: v[2],
                alpha_d: v[3],
            },
            LossForm::Simplified => LossLawParams::Simplified {
                e: v[0],
                a: v[1],
                b: v[2],
                alpha: v[3],
                beta: v[4],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("loss-law parameters must be finite".into()));
        }
        match *self {
            LossLawParams::Full {
                n_c,
                d_c,
                alpha_n,
                alpha_d,
            } => {
                if n_c <= 0.0 || d_c <= 0.0 || alpha_n <= 0.0 || alpha_d <= 0.0 {
                    return Err(Error::Invalid(
                        "full loss law needs Nc, Dc, alphaN, alphaD > 0".into(),
                    ));
                }
            }
            LossLawParams::Simplified { alpha, beta, .. } => {
                if alpha <= 0.0 || beta <= 0.0 {
                    return Err(Error::Invalid(
                        "simplified loss law needs alpha, beta > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_map(&self) -> ParamMap {
        Self::names(self.form())
            .iter()
            .zip(self.to_vec())
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Reads the form implied by the keys present.
    pub fn from_map(map: &ParamMap) -> Result<Self> {
        let form = if map.contains_key("E") {
            LossForm::Simplified
        } else if map.contains_key("Nc") {
            LossForm::Full
        } else {
            return Err(Error::Invalid(
                "loss-law map needs either E,A,B,alpha,beta or Nc,Dc,alphaN,alphaD".into(),
            ));
        };
        let v = Self::names(form)
            .iter()
            .map(|k| {
                map.get(*k)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("loss-law map is missing {k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_slice(form, &v))
    }
}

pub fn eval_loss_law(params: &LossLawParams, n: f64, d: f64) -> Result<f64> {
    if !(n > 0.0) || !(d > 0.0) {
        return Err(Error::Invalid(format!(
            "loss law needs n > 0 and d > 0, got n = {n}, d = {d}"
        )));
    }
    Ok(loss_unchecked(params, n, d))
}

pub(crate) fn loss_unchecked(params: &LossLawParams, n: f64, d: f64) -> f64 {
    match *params {
        LossLawParams::Full {
            n_c,
            d_c,
            alpha_n,
            alpha_d,
        } => ((n_c / n).powf(alpha_n / alpha_d) + d_c / d).powf(alpha_d),
        LossLawParams::Simplified {
            e,
            a,
            b,
            alpha,
            beta,
        } => e + decay(a, n, alpha) + decay(b, d, beta),
    }
}

/// Parameters of the generalized performance law. Decay exponents are
/// signed.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerfLawParams {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub w6: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

impl PerfLawParams {
    /// Order used by [`to_array`](Self::to_array), gradients and masks.
    pub const NAMES: [&'static str; 10] =
        ["w1", "w2", "w3", "w4", "w5", "w6", "p1", "p2", "p3", "C"];

    /// Single-amplitude form: `p` is shared by the layer and width groups,
    /// `p_data` drives the data decay, `w6 = 1` and `C = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn canonical(w1: f64, w2: f64, w3: f64, w4: f64, w5: f64, p: f64, p_data: f64) -> Self {
        Self {
            w1,
            w2,
            w3,
            w4,
            w5,
            w6: 1.0,
            p1: p,
            p2: p,
            p3: p_data,
            c: 0.0,
        }
    }

    pub fn to_array(&self) -> [f64; 10] {
        [
            self.w1, self.w2, self.w3, self.w4, self.w5, self.w6, self.p1, self.p2, self.p3,
            self.c,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            w1: v[0],
            w2: v[1],
            w3: v[2],
            w4: v[3],
            w5: v[4],
            w6: v[5],
            p1: v[6],
            p2: v[7],
            p3: v[8],
            c: v[9],
        }
    }

    pub fn index_of(name: &str) -> Option<usize> {
        Self::NAMES.iter().position(|n| *n == name)
    }

    pub fn to_map(&self) -> ParamMap {
        Self::NAMES
            .iter()
            .zip(self.to_array())
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Missing keys default to zero, except `w6` which defaults to one.
    pub fn from_map(map: &ParamMap) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| Self::index_of(k).is_none()) {
            return Err(Error::Invalid(format!("unknown performance-law key {k:?}")));
        }
        let mut v = [0.0; 10];
        v[5] = 1.0;
        for (k, &val) in map {
            if !val.is_finite() {
                return Err(Error::Invalid(format!("{k} is not finite")));
            }
            v[Self::index_of(k).expect("checked above")] = val;
        }
        Ok(Self::from_slice(&v))
    }
}

impl fmt::Display for PerfLawParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Self::NAMES
            .iter()
            .zip(self.to_array())
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

fn check_perf_args(n_layers: f64, d_emb: f64, d_prime: f64) -> Result<()> {
    if n_layers > 0.0 && d_emb > 0.0 && d_prime > 0.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "performance law needs positive arguments, got n = {n_layers}, d = {d_emb}, D' = {d_prime}"
        )))
    }
}

/// `ln x + p x^-w`
fn group(x: f64, p: f64, w: f64) -> f64 {
    x.ln() + decay(p, x, w)
}

pub fn eval_perf_law(params: &PerfLawParams, n_layers: f64, d_emb: f64, d_prime: f64) -> Result<f64> {
    check_perf_args(n_layers, d_emb, d_prime)?;
    Ok(perf_unchecked(params, n_layers, d_emb, d_prime))
}

pub(crate) fn perf_unchecked(p: &PerfLawParams, n: f64, d: f64, dp: f64) -> f64 {
    let layers = p.w1 * group(n, p.p1, p.w3);
    let width = p.w2 * group(d, p.p2, p.w4);
    let data = p.w6 * group(dp, p.p3, p.w5);
    (layers + width) + data + p.c
}

/// Partial derivatives with respect to the parameters, ordered as
/// [`PerfLawParams::NAMES`].
pub fn grad_perf_law(
    params: &PerfLawParams,
    n_layers: f64,
    d_emb: f64,
    d_prime: f64,
) -> Result<[f64; 10]> {
    check_perf_args(n_layers, d_emb, d_prime)?;
    Ok(grad_unchecked(params, n_layers, d_emb, d_prime))
}

pub(crate) fn grad_unchecked(p: &PerfLawParams, n: f64, d: f64, dp: f64) -> [f64; 10] {
    let (ln_n, ln_d, ln_dp) = (n.ln(), d.ln(), dp.ln());
    // x^-w, with the amplitude folded in afterwards
    let pow_n = decay(1.0, n, p.w3);
    let pow_d = decay(1.0, d, p.w4);
    let pow_dp = decay(1.0, dp, p.w5);
    let dec_n = decay(p.p1, n, p.w3);
    let dec_d = decay(p.p2, d, p.w4);
    let dec_dp = decay(p.p3, dp, p.w5);
    [
        ln_n + dec_n,
        ln_d + dec_d,
        -p.w1 * dec_n * ln_n,
        -p.w2 * dec_d * ln_d,
        -p.w6 * dec_dp * ln_dp,
        ln_dp + dec_dp,
        p.w1 * pow_n,
        p.w2 * pow_d,
        p.w6 * pow_dp,
        1.0,
    ]
}

/// `1 - k · loss`
pub fn loss_to_performance(k: f64, loss: f64) -> f64 {
    1.0 - k * loss
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Loss,
    Hr,
    Ndcg,
    Mrr,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Loss => "loss",
            MetricName::Hr => "hr",
            MetricName::Ndcg => "ndcg",
            MetricName::Mrr => "mrr",
        }
    }

    /// Ranking metrics live in `[0, 1]`.
    pub fn is_ranking(self) -> bool {
        !matches!(self, MetricName::Loss)
    }
}

impl FromStr for MetricName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "loss" => Ok(MetricName::Loss),
            "hr" => Ok(MetricName::Hr),
            "ndcg" | "ng" => Ok(MetricName::Ndcg),
            "mrr" => Ok(MetricName::Mrr),
            other => Err(Error::Invalid(format!("unknown metric {other:?}"))),
        }
    }
}

/// A metric with its optional rank cutoff, e.g. `hr@10`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MetricKind {
    pub kind: MetricName,
    pub k: Option<u32>,
}

impl MetricKind {
    pub fn new(kind: MetricName, k: Option<u32>) -> Result<Self> {
        let m = Self { kind, k };
        m.validate()?;
        Ok(m)
    }

    pub fn loss() -> Self {
        Self {
            kind: MetricName::Loss,
            k: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.k) {
            (MetricName::Hr | MetricName::Ndcg, None) => Err(Error::Invalid(format!(
                "{} requires a cutoff k",
                self.kind.as_str()
            ))),
            (_, Some(0)) => Err(Error::Invalid("cutoff k must be positive".into())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.k {
            Some(k) => write!(f, "{}@{k}", self.kind.as_str()),
            None => f.write_str(self.kind.as_str()),
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    /// Accepts `loss`, `mrr`, `hr@10`, `ndcg@10`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = match s.split_once('@') {
            Some((n, k)) => (
                n,
                Some(
                    k.parse::<u32>()
                        .map_err(|_| Error::Invalid(format!("bad cutoff in {s:?}")))?,
                ),
            ),
            None => (s, None),
        };
        Self::new(name.parse()?, k)
    }
}
