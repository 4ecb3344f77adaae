//! Seed x learning-rate ensembles, trimmed averaging, accuracy histograms and
//! the regularization-strength sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig};
use crate::parity::ParityDataset;
use crate::train::{train_run, RunRecord, TrainConfig, TrainError, TrainOutcome};

/// Default learning-rate grid. Six rates, each trained once per seed.
pub const DEFAULT_LR_GRID: [f64; 6] = [3e-3, 2e-3, 1e-3, 7e-4, 5e-4, 3e-4];

/// Upper edge of the leftmost histogram bin.
pub const HISTOGRAM_FLOOR: f64 = 0.55;
pub const HISTOGRAM_WIDTH: f64 = 0.05;
pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble configuration: {0}")]
    Config(String),
    #[error("run lr={lr} seed={seed}: {source}")]
    Run {
        lr: f64,
        seed: u64,
        #[source]
        source: TrainError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub lr_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub drop_k: usize,
    pub workers: usize,
    /// Epoch budget, optimizer settings and lambda; `learning_rate` and `seed`
    /// are overwritten per run.
    pub train: TrainConfig,
}

impl EnsembleConfig {
    /// `lr_grid.len() * seeds_per_lr` runs with seeds `seed_base..seed_base + seeds_per_lr`.
    pub fn new(lr_grid: Vec<f64>, seeds_per_lr: usize, seed_base: u64, drop_k: usize, train: TrainConfig) -> Self {
        Self {
            lr_grid,
            seeds: (0..seeds_per_lr as u64).map(|i| seed_base + i).collect(),
            drop_k,
            workers: 1,
            train,
        }
    }

    pub fn total_runs(&self) -> usize {
        self.lr_grid.len() * self.seeds.len()
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.total_runs() == 0 {
            return Err(EnsembleError::Config("the ensemble has no runs".into()));
        }
        if self.drop_k >= self.total_runs() {
            return Err(EnsembleError::Config(format!(
                "drop_k = {} leaves nothing of {} runs",
                self.drop_k,
                self.total_runs()
            )));
        }
        if self.workers == 0 {
            return Err(EnsembleError::Config("workers must be positive".into()));
        }
        for &lr in &self.lr_grid {
            TrainConfig {
                learning_rate: lr,
                ..self.train.clone()
            }
            .validate()
            .map_err(|e| EnsembleError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Bin counts: `(-inf, 0.55]`, then `(0.55, 0.60]`, ..., `(0.95, 1.0]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bin_index(accuracy: f64) -> usize {
        (0..HISTOGRAM_BINS - 1)
            .find(|&i| accuracy <= Self::upper_edge(i) + 1e-12)
            .unwrap_or(HISTOGRAM_BINS - 1)
    }

    pub fn upper_edge(bin: usize) -> f64 {
        HISTOGRAM_FLOOR + HISTOGRAM_WIDTH * bin as f64
    }

    /// Human-readable bin labels, e.g. `<=0.55`, `0.55-0.60`.
    pub fn labels() -> Vec<String> {
        (0..HISTOGRAM_BINS)
            .map(|i| {
                if i == 0 {
                    format!("<={HISTOGRAM_FLOOR:.2}")
                } else {
                    format!("{:.2}-{:.2}", Self::upper_edge(i - 1), Self::upper_edge(i))
                }
            })
            .collect()
    }

    pub fn from_accuracies(values: impl IntoIterator<Item = f64>) -> Self {
        let mut counts = vec![0; HISTOGRAM_BINS];
        for v in values {
            counts[Self::bin_index(v)] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Indices kept after discarding the `drop_k` lowest scores. Ties are broken by
/// position, so earlier entries are discarded first.
pub fn trimmed_indices(scores: &[f64], drop_k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().skip(drop_k).collect();
    kept.sort_unstable();
    kept
}

/// Mean of `scores` after discarding the `drop_k` lowest; `None` if nothing is left.
pub fn trimmed_mean(scores: &[f64], drop_k: usize) -> Option<f64> {
    let kept = trimmed_indices(scores, drop_k);
    (!kept.is_empty()).then(|| kept.iter().map(|&i| scores[i]).sum::<f64>() / kept.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    /// Sorted by learning-rate position, then seed.
    pub runs: Vec<RunRecord>,
    pub drop_k: usize,
    pub avg_accuracy: f64,
    pub avg_time_s: f64,
    pub avg_steps: Option<f64>,
    pub avg_reg_integral: f64,
    pub avg_params: f64,
    pub invalid_runs: usize,
    pub histogram: Histogram,
}

impl EnsembleSummary {
    /// Aggregates runs in the given order. Averages use the runs that survive
    /// trimming by effective accuracy; the histogram uses every run.
    pub fn from_runs(runs: Vec<RunRecord>, drop_k: usize, params: usize) -> Self {
        let scores: Vec<f64> = runs.iter().map(RunRecord::effective_accuracy).collect();
        let kept = trimmed_indices(&scores, drop_k);
        let n = kept.len().max(1) as f64;
        let mean = |f: &dyn Fn(&RunRecord) -> f64| kept.iter().map(|&i| f(&runs[i])).sum::<f64>() / n;
        let steps: Vec<f64> = kept.iter().filter_map(|&i| runs[i].mean_steps_per_block).collect();
        Self {
            drop_k,
            avg_accuracy: mean(&|r| r.effective_accuracy()),
            avg_time_s: mean(&|r| r.time_to_best_s),
            avg_steps: (!steps.is_empty()).then(|| steps.iter().sum::<f64>() / steps.len() as f64),
            avg_reg_integral: mean(&|r| r.final_reg_integral),
            avg_params: params as f64,
            invalid_runs: runs.iter().filter(|r| r.invalid).count(),
            histogram: Histogram::from_accuracies(scores),
            runs,
        }
    }

    pub fn all_invalid(&self) -> bool {
        self.invalid_runs == self.runs.len()
    }
}

/// Trains one model per `(lr, seed)` pair on up to `workers` threads.
pub fn run_ensemble(
    mcfg: &ModelConfig,
    ecfg: &EnsembleConfig,
    data: &ParityDataset,
) -> Result<EnsembleSummary, EnsembleError> {
    run_ensemble_with_models(mcfg, ecfg, data).map(|(summary, _)| summary)
}

/// [`run_ensemble`], also returning each run's best model in `summary.runs` order.
pub fn run_ensemble_with_models(
    mcfg: &ModelConfig,
    ecfg: &EnsembleConfig,
    data: &ParityDataset,
) -> Result<(EnsembleSummary, Vec<Model>), EnsembleError> {
    ecfg.validate()?;
    mcfg.validate().map_err(|e| EnsembleError::Config(e.to_string()))?;
    let jobs: Vec<TrainConfig> = ecfg
        .lr_grid
        .iter()
        .flat_map(|&lr| ecfg.seeds.iter().map(move |&seed| (lr, seed)))
        .map(|(learning_rate, seed)| TrainConfig {
            learning_rate,
            seed,
            ..ecfg.train.clone()
        })
        .collect();
    let run = |t: &TrainConfig| {
        train_run(mcfg, t, data).map_err(|source| EnsembleError::Run {
            lr: t.learning_rate,
            seed: t.seed,
            source,
        })
    };
    let outcomes: Vec<TrainOutcome> = if ecfg.workers == 1 {
        jobs.iter().map(run).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(ecfg.workers)
            .build()
            .map_err(|e| EnsembleError::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_, _>>())?
    };
    let params = Model::seeded(mcfg.clone(), 0)
        .map(|m| m.param_count())
        .map_err(|e| EnsembleError::Config(e.to_string()))?;
    let (runs, models) = outcomes.into_iter().map(|o| (o.record, o.best_model)).unzip();
    Ok((EnsembleSummary::from_runs(runs, ecfg.drop_k, params), models))
}

/// `[0, 4^1, 4^0, ..., 4^-13]`: zero, then `4^(2 - i)` for `i = 1..=15`.
pub fn default_lambda_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((1..=15).map(|i| 4f64.powi(2 - i))).collect()
}

/// One ensemble per lambda, in grid order.
pub fn lambda_sweep(
    mcfg: &ModelConfig,
    ecfg: &EnsembleConfig,
    data: &ParityDataset,
    lambdas: &[f64],
) -> Result<Vec<(f64, EnsembleSummary)>, EnsembleError> {
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = EnsembleConfig {
                train: TrainConfig {
                    lambda,
                    ..ecfg.train.clone()
                },
                ..ecfg.clone()
            };
            run_ensemble(mcfg, &cfg, data).map(|s| (lambda, s))
        })
        .collect()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either input is constant or the
/// lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parity::gen_dataset;
    use proptest::prelude::*;

    #[test]
    fn histogram_binning() {
        assert_eq!(Histogram::bin_index(0.0), 0);
        assert_eq!(Histogram::bin_index(0.54), 0);
        assert_eq!(Histogram::bin_index(0.55), 0);
        assert_eq!(Histogram::bin_index(0.5501), 1);
        assert_eq!(Histogram::bin_index(0.60), 1);
        assert_eq!(Histogram::bin_index(0.65), 2);
        assert_eq!(Histogram::bin_index(0.951), 9);
        assert_eq!(Histogram::bin_index(1.0), 9);
        let h = Histogram::from_accuracies(vec![0.5; 72]);
        assert_eq!(h.counts[0], 72);
        assert_eq!(h.total(), 72);
        assert_eq!(Histogram::labels()[0], "<=0.55");
        assert_eq!(Histogram::labels()[9], "0.95-1.00");
    }

    #[test]
    fn trimmed_mean_examples() {
        assert_eq!(trimmed_mean(&[0.5, 1.0, 0.9, 0.7], 2), Some(0.95));
        assert_eq!(trimmed_mean(&[0.5], 1), None);
        assert_eq!(trimmed_indices(&[0.6, 0.6, 0.9], 1), vec![1, 2]);
    }

    #[test]
    fn lambda_grid_endpoints() {
        let grid = default_lambda_grid();
        assert_eq!(grid.len(), 16);
        assert_eq!(grid[0], 0.0);
        assert_eq!(grid[1], 4.0);
        assert_eq!(grid[15], 4f64.powi(-13));
        assert!(grid[1..].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        // one adjacent swap away from strictly decreasing: -(1 - 6·2/60)
        let rho = spearman(&[0.0, 1.0, 2.0, 3.0], &[4.0, 2.0, 3.0, 1.0]).unwrap();
        assert!((rho + 0.8).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn ensemble_is_deterministic_and_order_independent() {
        let data = gen_dataset(3).unwrap();
        let mcfg = ModelConfig::vanilla(4, 1);
        let train = TrainConfig {
            max_epochs: 5,
            ..Default::default()
        };
        let mut ecfg = EnsembleConfig::new(vec![3e-3, 1e-3], 3, 10, 2, train);
        let a = run_ensemble(&mcfg, &ecfg, &data).unwrap();
        ecfg.workers = 2;
        let b = run_ensemble(&mcfg, &ecfg, &data).unwrap();
        let strip = |s: &EnsembleSummary| -> Vec<RunRecord> { s.runs.iter().map(|r| r.without_timing()).collect() };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.avg_accuracy, b.avg_accuracy);
        assert_eq!(a.runs.len(), 6);
        assert_eq!(a.histogram.total(), 6);
        assert_eq!(a.runs[0].seed, 10);
        assert_eq!(a.runs[3].learning_rate, 1e-3);

        let mut reversed = a.runs.clone();
        reversed.reverse();
        let r = EnsembleSummary::from_runs(reversed, 2, 0);
        assert!((r.avg_accuracy - a.avg_accuracy).abs() < 1e-15);
    }

    #[test]
    fn ensemble_validation() {
        let data = gen_dataset(2).unwrap();
        let bad = EnsembleConfig::new(vec![1e-3], 2, 0, 2, TrainConfig::default());
        assert!(run_ensemble(&ModelConfig::vanilla(4, 1), &bad, &data).is_err());
        let empty = EnsembleConfig::new(vec![], 2, 0, 0, TrainConfig::default());
        assert!(empty.validate().is_err());
    }

    proptest! {
        #[test]
        fn trimmed_mean_matches_sort_oracle(
            scores in proptest::collection::vec(0.0f64..1.0, 1..40),
            drop in 0usize..40,
        ) {
            let drop = drop % scores.len();
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            let oracle = sorted[drop..].iter().sum::<f64>() / (scores.len() - drop) as f64;
            let got = trimmed_mean(&scores, drop).unwrap();
            prop_assert!((got - oracle).abs() <= 1e-12);
        }

        #[test]
        fn trimmed_mean_is_permutation_invariant(
            scores in proptest::collection::vec(0.0f64..1.0, 2..30),
            drop in 0usize..10,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let drop = drop % scores.len();
            let mut shuffled = scores.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = trimmed_mean(&scores, drop).unwrap();
            let b = trimmed_mean(&shuffled, drop).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
