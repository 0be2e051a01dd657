//! Approximate Entropy over item sequences with exact-match tolerance.
//!
//! With `r = 0` two windows match only when every symbol is equal, so the
//! similarity count of a window is the multiplicity of its m-gram. Counting
//! goes through a hash multiset, which is linear in the number of windows.
//! Windows never cross from one user's sequence into the next.

use std::collections::HashMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_stats, sequence_distribution_entropy, InteractionSequence, ItemId};
use crate::error::{Error, Result};

/// ApEn values at or below this are treated as degenerate.
pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// All windows of all sequences form one population.
    #[default]
    Pooled,
    /// ApEn per sequence, averaged with token-count weights.
    PerSequenceWeighted,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Pooled => "pooled",
            Pooling::PerSequenceWeighted => "per_sequence_weighted",
        }
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Pooling::Pooled),
            "per_sequence_weighted" | "per-sequence-weighted" | "weighted" => {
                Ok(Pooling::PerSequenceWeighted)
            }
            other => Err(Error::Invalid(format!("unknown pooling mode {other:?}"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApEnConfig {
    /// Window length.
    pub m: usize,
    /// Match tolerance. Only `0` is supported.
    pub r: f64,
    pub pooling: Pooling,
}

impl Default for ApEnConfig {
    fn default() -> Self {
        Self {
            m: 1,
            r: 0.0,
            pooling: Pooling::Pooled,
        }
    }
}

impl ApEnConfig {
    pub fn with_m(m: usize) -> Self {
        Self {
            m,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Invalid("window length m must be at least 1".into()));
        }
        if self.r.is_nan() || self.r < 0.0 {
            return Err(Error::Invalid(format!("tolerance r must be >= 0, got {}", self.r)));
        }
        if self.r > 0.0 {
            return Err(Error::Invalid(format!(
                "tolerance r = {} unsupported; item ids only admit exact matching (r = 0)",
                self.r
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApEnResult {
    pub apen: f64,
    pub windows_m: u64,
    pub windows_m1: u64,
    pub phi_m: f64,
    pub phi_m1: f64,
}

fn windows<'a>(
    seqs: &'a [InteractionSequence],
    len: usize,
) -> impl Iterator<Item = &'a [ItemId]> + 'a {
    seqs.iter().flat_map(move |s| s.items().windows(len))
}

fn count_windows(seqs: &[InteractionSequence], len: usize) -> HashMap<&[ItemId], u64> {
    seqs.par_iter()
        .fold(HashMap::new, |mut acc: HashMap<&[ItemId], u64>, s| {
            for w in s.items().windows(len) {
                *acc.entry(w).or_default() += 1;
            }
            acc
        })
        .reduce(HashMap::new, |a, b| {
            let (mut big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
            for (k, v) in small {
                *big.entry(k).or_default() += v;
            }
            big
        })
}

/// For every window of length `len`, in sequence order then position order,
/// the number of windows in the pooled population equal to it (itself
/// included).
pub fn window_match_counts(seqs: &[InteractionSequence], len: usize) -> Vec<u64> {
    assert!(len >= 1, "window length must be positive");
    let counts = count_windows(seqs, len);
    windows(seqs, len).map(|w| counts[w]).collect()
}

/// Mean of `ln(count / total)` over windows, summed in window order.
fn phi(match_counts: &[u64]) -> f64 {
    let total = match_counts.len() as f64;
    let sum: f64 = match_counts
        .iter()
        .map(|&c| (c as f64 / total).ln())
        .sum();
    sum / total
}

fn pooled(seqs: &[InteractionSequence], m: usize) -> Option<ApEnResult> {
    let c_m1 = window_match_counts(seqs, m + 1);
    if c_m1.is_empty() {
        return None;
    }
    let c_m = window_match_counts(seqs, m);
    let phi_m = phi(&c_m);
    let phi_m1 = phi(&c_m1);
    Some(ApEnResult {
        apen: phi_m - phi_m1,
        windows_m: c_m.len() as u64,
        windows_m1: c_m1.len() as u64,
        phi_m,
        phi_m1,
    })
}

fn per_sequence_weighted(seqs: &[InteractionSequence], m: usize) -> Option<ApEnResult> {
    let parts: Vec<(f64, ApEnResult)> = seqs
        .par_iter()
        .filter(|s| s.len() > m)
        .map(|s| {
            let single = std::slice::from_ref(s);
            (s.len() as f64, pooled(single, m).expect("length checked"))
        })
        .collect();
    if parts.is_empty() {
        return None;
    }
    let weight: f64 = parts.iter().map(|(w, _)| w).sum();
    let phi_m = parts.iter().map(|(w, r)| w * r.phi_m).sum::<f64>() / weight;
    let phi_m1 = parts.iter().map(|(w, r)| w * r.phi_m1).sum::<f64>() / weight;
    Some(ApEnResult {
        apen: phi_m - phi_m1,
        windows_m: parts.iter().map(|(_, r)| r.windows_m).sum(),
        windows_m1: parts.iter().map(|(_, r)| r.windows_m1).sum(),
        phi_m,
        phi_m1,
    })
}

/// Approximate Entropy `Φ^m − Φ^{m+1}` in nats.
///
/// Small samples can give slightly negative values; they are returned as-is.
pub fn compute_apen(seqs: &[InteractionSequence], cfg: &ApEnConfig) -> Result<ApEnResult> {
    cfg.validate()?;
    let result = match cfg.pooling {
        Pooling::Pooled => pooled(seqs, cfg.m),
        Pooling::PerSequenceWeighted => per_sequence_weighted(seqs, cfg.m),
    };
    result.ok_or_else(|| {
        Error::InsufficientData(format!(
            "no sequence has length >= {} (m + 1)",
            cfg.m + 1
        ))
    })
}

/// Reciprocal `1 / ApEn`; rejects degenerate (near-zero or negative) values.
pub fn apen_prime(apen: f64, epsilon: f64) -> Result<f64> {
    if !apen.is_finite() {
        return Err(Error::NonFinite(format!("ApEn = {apen}")));
    }
    if apen <= epsilon {
        return Err(Error::DegenerateApEn { apen, epsilon });
    }
    Ok(1.0 / apen)
}

/// Quality-adjusted data scale `D′ = tokens / ApEn`.
pub fn data_parameter(tokens: u64, apen: f64, epsilon: f64) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::Invalid("token count must be positive".into()));
    }
    apen_prime(apen, epsilon)?;
    Ok(tokens as f64 / apen)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingBoundReport {
    /// `|U| · H(S)`, nats.
    pub lhs: f64,
    /// `tokens · ApEn′`; absent when degenerate.
    pub rhs: Option<f64>,
    /// `lhs >= rhs`; absent when degenerate.
    pub holds: Option<bool>,
    pub degenerate: bool,
    pub apen: f64,
    pub num_users: usize,
    pub s_max: usize,
    pub tokens: u64,
    pub sequence_entropy: f64,
    /// `|U| > S_max`, assumed by the encoding argument.
    pub users_exceed_s_max: bool,
}

/// Compares the summed sequence-code length `|U|·H(S)` against
/// `tokens / ApEn`. Reported, never asserted.
pub fn verify_encoding_bound(
    seqs: &[InteractionSequence],
    cfg: &ApEnConfig,
    epsilon: f64,
) -> Result<EncodingBoundReport> {
    let stats = compute_stats(seqs)?;
    let entropy = sequence_distribution_entropy(seqs);
    let lhs = stats.num_users as f64 * entropy;
    let apen = compute_apen(seqs, cfg)?.apen;
    let rhs = apen_prime(apen, epsilon)
        .ok()
        .map(|inv| stats.tokens as f64 * inv);
    Ok(EncodingBoundReport {
        lhs,
        rhs,
        holds: rhs.map(|r| lhs >= r),
        degenerate: rhs.is_none(),
        apen,
        num_users: stats.num_users,
        s_max: stats.s_max,
        tokens: stats.tokens,
        sequence_entropy: entropy,
        users_exceed_s_max: stats.num_users > stats.s_max,
    })
}
