//! Synthetic run records drawn from a known law, for generate-and-refit
//! checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{RunRecord, SizeCovariate};
use crate::laws::{eval_loss_law, eval_perf_law, LossLawParams, MetricKind, PerfLawParams};

/// A synthetic dataset: its id and data scale `D′`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub dataset_id: String,
    pub d_prime: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunGrid {
    pub datasets: Vec<SynthDataset>,
    pub n_layers: Vec<u32>,
    pub d_emb: Vec<u32>,
}

impl RunGrid {
    fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() || self.n_layers.is_empty() || self.d_emb.is_empty() {
            return Err(Error::Invalid("run grid has an empty axis".into()));
        }
        Ok(())
    }

    /// Grid points in dataset, then n, then d order.
    fn points(&self) -> impl Iterator<Item = (&SynthDataset, u32, u32)> {
        self.datasets.iter().flat_map(move |ds| {
            self.n_layers
                .iter()
                .flat_map(move |&n| self.d_emb.iter().map(move |&d| (ds, n, d)))
        })
    }
}

fn noise(sigma: f64) -> Result<Normal<f64>> {
    let bad = || Error::Invalid(format!("noise sigma {sigma} must be finite and >= 0"));
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(bad());
    }
    Normal::new(0.0, sigma).map_err(|_| bad())
}

/// Performance runs with additive Gaussian noise, clamped to `[0, 1]`.
pub fn perf_runs(
    params: &PerfLawParams,
    grid: &RunGrid,
    metric: MetricKind,
    sigma: f64,
    seed: u64,
) -> Result<Vec<RunRecord>> {
    grid.validate()?;
    metric.validate()?;
    if !metric.kind.is_ranking() {
        return Err(Error::Invalid("performance runs need a ranking metric".into()));
    }
    let normal = noise(sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grid.points()
        .map(|(ds, n, d)| {
            let clean = eval_perf_law(params, n as f64, d as f64, ds.d_prime)?;
            let value = (clean + normal.sample(&mut rng)).clamp(0.0, 1.0);
            Ok(RunRecord::new(ds.dataset_id.clone(), n, d, metric, value, Some(ds.d_prime)))
        })
        .collect()
}

/// Loss runs with additive Gaussian noise; the dataset `D′` is the data
/// variable of the law.
pub fn loss_runs(
    params: &LossLawParams,
    grid: &RunGrid,
    size_covariate: SizeCovariate,
    sigma: f64,
    seed: u64,
) -> Result<Vec<RunRecord>> {
    grid.validate()?;
    let normal = noise(sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grid.points()
        .map(|(ds, n, d)| {
            let mut run = RunRecord::new(ds.dataset_id.clone(), n, d, MetricKind::loss(), 0.0, Some(ds.d_prime));
            let clean = eval_loss_law(params, size_covariate.size(&run), ds.d_prime)?;
            run.value = clean + normal.sample(&mut rng);
            Ok(run)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laws::MetricName;

    fn grid() -> RunGrid {
        RunGrid {
            datasets: vec![
                SynthDataset { dataset_id: "a".into(), d_prime: 1e5 },
                SynthDataset { dataset_id: "b".into(), d_prime: 1e7 },
            ],
            n_layers: vec![1, 2, 4],
            d_emb: vec![16, 64],
        }
    }

    #[test]
    fn noiseless_runs_equal_the_law() {
        let p = PerfLawParams::canonical(0.05, 0.02, 0.5, 0.5, 0.1, 1.0, 1.0);
        let m = MetricKind::new(MetricName::Ndcg, Some(10)).unwrap();
        let runs = perf_runs(&p, &grid(), m, 0.0, 3).unwrap();
        assert_eq!(runs.len(), 12);
        assert_eq!((runs[0].dataset_id.as_str(), runs[0].n_layers, runs[0].d_emb), ("a", 1, 16));
        for r in &runs {
            let v = eval_perf_law(&p, r.n_layers as f64, r.d_emb as f64, r.d_prime.unwrap()).unwrap();
            assert_eq!(r.value, v.clamp(0.0, 1.0));
        }
    }

    #[test]
    fn same_seed_same_runs() {
        let runs = |seed| loss_runs(&LossLawParams::CHINCHILLA, &grid(), SizeCovariate::Layers, 0.01, seed).unwrap();
        assert_eq!(runs(9), runs(9));
        assert_ne!(runs(9), runs(10));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = PerfLawParams::canonical(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(perf_runs(&p, &grid(), MetricKind::loss(), 0.0, 1).is_err());
        let hr = MetricKind::new(MetricName::Hr, Some(10)).unwrap();
        assert!(perf_runs(&p, &grid(), hr, -1.0, 1).is_err());
        let mut g = grid();
        g.d_emb.clear();
        assert!(perf_runs(&p, &g, hr, 0.0, 1).is_err());
    }
}
