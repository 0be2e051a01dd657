//! First-order discrete Markov chains: stationary distribution, entropy
//! rate, and a seeded sequence generator used for synthetic corpora.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionSequence;
use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-9;
const POWER_RESIDUAL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    transitions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stationary: Option<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(transitions: Vec<Vec<f64>>) -> Result<Self> {
        validate_stochastic(&transitions)?;
        Ok(Self {
            transitions,
            stationary: None,
        })
    }

    /// Builds a chain from a row-major flat list of `k * k` probabilities.
    pub fn from_flat(k: usize, probs: &[f64]) -> Result<Self> {
        if k == 0 || probs.len() != k * k {
            return Err(Error::Invalid(format!(
                "expected {} transition probabilities for {k} states, got {}",
                k * k,
                probs.len()
            )));
        }
        Self::new(probs.chunks(k).map(<[f64]>::to_vec).collect())
    }

    /// `k` states, every transition equally likely.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("chain needs at least one state".into()));
        }
        Self::new(vec![vec![1.0 / k as f64; k]; k])
    }

    /// Attaches a known stationary distribution instead of computing one.
    pub fn with_stationary(mut self, pi: Vec<f64>) -> Result<Self> {
        let k = self.states();
        if pi.len() != k {
            return Err(Error::Invalid(format!(
                "stationary vector has {} entries for {k} states",
                pi.len()
            )));
        }
        if pi.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Invalid("stationary entries must lie in [0, 1]".into()));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Invalid(format!("stationary vector sums to {total}")));
        }
        let next = step(&self.transitions, &pi);
        if let Some((x, (a, b))) = pi
            .iter()
            .zip(&next)
            .enumerate()
            .find(|(_, (a, b))| (*a - *b).abs() > STATIONARY_TOL)
        {
            return Err(Error::Invalid(format!(
                "vector is not stationary at state {x}: pi = {a}, (pi P) = {b}"
            )));
        }
        self.stationary = Some(pi);
        Ok(self)
    }

    pub fn states(&self) -> usize {
        self.transitions.len()
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    pub fn stationary(&self) -> Option<&[f64]> {
        self.stationary.as_deref()
    }

    /// Stored distribution if present, else computed.
    pub fn resolve_stationary(&self) -> Result<Vec<f64>> {
        match &self.stationary {
            Some(pi) => Ok(pi.clone()),
            None => stationary_distribution(&self.transitions),
        }
    }
}

fn validate_stochastic(p: &[Vec<f64>]) -> Result<()> {
    let k = p.len();
    if k == 0 {
        return Err(Error::Invalid("transition matrix is empty".into()));
    }
    for (x, row) in p.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Invalid(format!(
                "row {x} has {} entries, expected {k}",
                row.len()
            )));
        }
        if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Invalid(format!("row {x} has an entry outside [0, 1]")));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Invalid(format!("row {x} sums to {total}")));
        }
    }
    Ok(())
}

/// `pi P`.
fn step(p: &[Vec<f64>], pi: &[f64]) -> Vec<f64> {
    let k = p.len();
    let mut out = vec![0.0; k];
    for (x, row) in p.iter().enumerate() {
        for (y, &pxy) in row.iter().enumerate() {
            out[y] += pi[x] * pxy;
        }
    }
    out
}

/// Irreducible and aperiodic, i.e. some power of `P` is strictly positive.
/// Checked on the transition graph: strong connectivity plus a period of 1
/// (gcd of BFS level differences over all edges).
fn check_ergodic(p: &[Vec<f64>]) -> Result<()> {
    let k = p.len();
    let reach = |forward: bool| -> Vec<Option<usize>> {
        let mut level = vec![None; k];
        level[0] = Some(0);
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for v in 0..k {
                let edge = if forward { p[u][v] } else { p[v][u] };
                if edge > 0.0 && level[v].is_none() {
                    level[v] = Some(level[u].unwrap() + 1);
                    queue.push_back(v);
                }
            }
        }
        level
    };
    let fwd = reach(true);
    if fwd.iter().any(Option::is_none) || reach(false).iter().any(Option::is_none) {
        return Err(Error::NotErgodic("chain is reducible".into()));
    }
    let level: Vec<i64> = fwd.into_iter().map(|l| l.unwrap() as i64).collect();
    let mut period = 0i64;
    for u in 0..k {
        for v in 0..k {
            if p[u][v] > 0.0 {
                period = gcd(period, (level[u] + 1 - level[v]).abs());
            }
        }
    }
    if period != 1 {
        return Err(Error::NotErgodic(format!("chain is periodic (period {period})")));
    }
    Ok(())
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Stationary distribution `pi` with `pi P = pi` and unit mass.
///
/// Solves the linear system directly, then polishes by power iteration
/// until the max-norm residual `|pi P - pi|` is at most 1e-12.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Result<Vec<f64>> {
    validate_stochastic(p)?;
    check_ergodic(p)?;
    let k = p.len();

    // (P^T - I) pi = 0 with the last equation replaced by sum(pi) = 1
    let mut a = DMatrix::<f64>::zeros(k, k);
    for x in 0..k {
        for y in 0..k {
            a[(y, x)] = p[x][y];
        }
        a[(x, x)] -= 1.0;
    }
    for x in 0..k {
        a[(k - 1, x)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(k);
    b[k - 1] = 1.0;
    let mut pi: Vec<f64> = match a.lu().solve(&b) {
        Some(sol) => sol.iter().map(|v| v.max(0.0)).collect(),
        None => vec![1.0 / k as f64; k],
    };

    let normalize = |v: &mut Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
    };
    normalize(&mut pi);
    for _ in 0..1_000_000 {
        let mut next = step(p, &pi);
        normalize(&mut next);
        let residual = next
            .iter()
            .zip(&pi)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        pi = next;
        if residual <= POWER_RESIDUAL {
            return Ok(pi);
        }
    }
    Err(Error::NonFinite(
        "power iteration did not reach 1e-12 residual".into(),
    ))
}

/// Entropy rate `-Σ_x π(x) Σ_y p_xy ln p_xy` (nats), with `0 ln 0 = 0`.
pub fn markov_apen(chain: &MarkovChain) -> Result<f64> {
    let pi = chain.resolve_stationary()?;
    let rate = chain
        .transitions
        .iter()
        .zip(&pi)
        .map(|(row, &w)| {
            let h: f64 = row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            w * h
        })
        .sum::<f64>();
    Ok(rate.max(0.0))
}

fn sample(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

/// Draws `length` states (item ids `1..=k`) starting from the stationary
/// distribution. Deterministic for a given seed.
pub fn generate_markov(
    chain: &MarkovChain,
    length: usize,
    seed: u64,
    user_id: impl Into<String>,
) -> Result<InteractionSequence> {
    if length == 0 {
        return Err(Error::Invalid("sequence length must be at least 1".into()));
    }
    let pi = chain.resolve_stationary()?;
    let start = cumulative(&pi);
    let rows: Vec<Vec<f64>> = chain.transitions.iter().map(|r| cumulative(r)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = sample(&start, rng.random::<f64>() * start[start.len() - 1]);
    let mut items = Vec::with_capacity(length);
    items.push(state as u64 + 1);
    for _ in 1..length {
        let cdf = &rows[state];
        state = sample(cdf, rng.random::<f64>() * cdf[cdf.len() - 1]);
        items.push(state as u64 + 1);
    }
    InteractionSequence::new(user_id, items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> MarkovChain {
        MarkovChain::from_flat(2, &[0.9, 0.1, 0.5, 0.5]).unwrap()
    }

    #[test]
    fn stationary_examples() {
        let pi = stationary_distribution(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-12 && (pi[1] - 0.5).abs() < 1e-12);

        let pi = stationary_distribution(two_state().transitions()).unwrap();
        assert!((pi[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((pi[1] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn reducible_and_periodic_are_rejected() {
        let identity = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            stationary_distribution(&identity),
            Err(Error::NotErgodic(_))
        ));
        let swap = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(
            stationary_distribution(&swap),
            Err(Error::NotErgodic(_))
        ));
    }

    #[test]
    fn primitive_with_long_exponent_is_accepted() {
        // Wielandt-type matrix: P^k > 0 only for k >= (n-1)^2 + 1 = 5 > n
        let p = vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.5, 0.5, 0.0],
        ];
        let pi = stationary_distribution(&p).unwrap();
        let next = step(&p, &pi);
        for (a, b) in pi.iter().zip(&next) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_matrices() {
        assert!(MarkovChain::new(vec![vec![0.6, 0.6], vec![0.5, 0.5]]).is_err());
        assert!(MarkovChain::new(vec![vec![1.2, -0.2], vec![0.5, 0.5]]).is_err());
        assert!(MarkovChain::new(vec![vec![1.0], vec![0.5, 0.5]]).is_err());
        assert!(MarkovChain::from_flat(2, &[1.0, 0.0, 1.0]).is_err());
        assert!(two_state().with_stationary(vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn entropy_rate_examples() {
        let det = MarkovChain::new(vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]])
            .unwrap()
            .with_stationary(vec![1.0 / 3.0; 3])
            .unwrap();
        assert_eq!(markov_apen(&det).unwrap(), 0.0);
        assert_eq!(markov_apen(&MarkovChain::new(vec![vec![1.0]]).unwrap()).unwrap(), 0.0);

        let fair = MarkovChain::uniform(2).unwrap();
        assert!((markov_apen(&fair).unwrap() - 2f64.ln()).abs() < 1e-12);

        let h = |p: f64| -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
        let expected = 5.0 / 6.0 * h(0.9) + 1.0 / 6.0 * h(0.5);
        let got = markov_apen(&two_state()).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.3864).abs() < 1e-4);
    }

    #[test]
    fn generator_is_deterministic() {
        let c = two_state();
        let a = generate_markov(&c, 1000, 42, "u").unwrap();
        let b = generate_markov(&c, 1000, 42, "u").unwrap();
        assert_eq!(a, b);
        let other = generate_markov(&c, 1000, 43, "u").unwrap();
        assert_ne!(a, other);
        assert_eq!(generate_markov(&c, 1, 7, "u").unwrap().len(), 1);
        assert!(generate_markov(&c, 0, 7, "u").is_err());
        assert!(a.items().iter().all(|&i| i == 1 || i == 2));
    }
}
