//! Experiment driver: model fitting stages, policy sweeps, accuracy/cost
//! operating points with bootstrap intervals, and the calibration and
//! degradation studies.
//!
//! All randomness is drawn from named streams derived from one base seed via
//! [`stream_seed`], so each stage is reproducible in isolation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{SampleRecord, SplitDataset};
use crate::discretizer::{compute_ece, fit, DiscretizerModel, EceReport, DEFAULT_ECE_BINS};
use crate::error::{invalid, Result};
use crate::path_space::{enumerate_paths, NetworkTopology, PathSet};
use crate::predictor::{build_training_rows, rmse, ErrorEstimator, GateModels, RmseReport, RowSampling, TrainConfig, TrainingRow};
use crate::router::{build_next_best_step_rows, DecisionTrace, FirstGate, NextBestStepModels, Router, RoutingPolicy};

pub const DEFAULT_BOOTSTRAP_SPLITS: usize = 10;
pub const CI_MULTIPLIER: f64 = 1.96;
pub const DEFAULT_FIT_FRACTION: f64 = 0.8;

type GateRows = BTreeMap<usize, Vec<TrainingRow>>;

/// Seed for the named stage `stage`: FNV-1a over the name, mixed with `seed`
/// through splitmix64.
pub fn stream_seed(seed: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

/// Mean of `outcomes` and a 95% interval from `num_splits` disjoint subsets.
///
/// With `shuffle_seed` the subsets are a seeded random partition, otherwise
/// contiguous chunks. Subset sizes differ by at most one (leading subsets
/// take the remainder); the half-width is `1.96 * sd / sqrt(num_splits)`
/// with `sd` the sample standard deviation of the subset means.
pub fn bootstrap_ci(outcomes: &[f64], num_splits: usize, shuffle_seed: Option<u64>) -> Result<Estimate> {
    if num_splits < 2 {
        return Err(invalid(format!("need at least 2 splits, got {num_splits}")));
    }
    if outcomes.len() < num_splits {
        return Err(invalid(format!(
            "{} outcomes cannot fill {num_splits} splits",
            outcomes.len()
        )));
    }
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let base = outcomes.len() / num_splits;
    let extra = outcomes.len() % num_splits;
    let mut means = Vec::with_capacity(num_splits);
    let mut start = 0;
    for s in 0..num_splits {
        let size = base + usize::from(s < extra);
        let sum: f64 = order[start..start + size].iter().map(|&i| outcomes[i]).sum();
        means.push(sum / size as f64);
        start += size;
    }
    let mean = outcomes.iter().sum::<f64>() / outcomes.len() as f64;
    // shifted by the first mean so identical subsets give exactly zero
    let k = num_splits as f64;
    let (s1, s2) = means.iter().fold((0.0, 0.0), |(s1, s2), x| {
        let d = x - means[0];
        (s1 + d, s2 + d * d)
    });
    let var = ((s2 - s1 * s1 / k) / (k - 1.0)).max(0.0);
    Ok(Estimate {
        mean,
        half_width: CI_MULTIPLIER * libm::sqrt(var) / libm::sqrt(num_splits as f64),
    })
}

/// 16 log-spaced values from 1e-3 (accuracy-dominant) to 10 (cost-dominant).
pub fn default_lambdas() -> Vec<f64> {
    (0..16).map(|i| libm::pow(10.0, -3.0 + 4.0 * i as f64 / 15.0)).collect()
}

/// 0.00, 0.05, ..., 1.00.
pub fn default_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// One point of an accuracy/cost curve.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub mode: String,
    /// Human-readable parameter: the lambda, threshold or fixed path key.
    pub label: String,
    pub parameter: f64,
    pub accuracy: f64,
    pub accuracy_ci: f64,
    /// Mean normalized cost.
    pub cost: f64,
    pub cost_ci: f64,
    /// Mean unnormalized cost (FLOPS x bits).
    pub bitops: f64,
    /// Mean number of scored candidates per sample.
    pub evaluations: f64,
}

/// Aggregates traces into an operating point; the partition of the records
/// into bootstrap subsets depends only on `seed`.
pub fn summarize(
    mode: &str,
    label: String,
    parameter: f64,
    traces: &[DecisionTrace],
    topology: &NetworkTopology,
    num_splits: usize,
    seed: u64,
) -> Result<OperatingPoint> {
    let correct: Vec<f64> = traces.iter().map(|t| f64::from(u8::from(t.correct))).collect();
    let costs: Vec<f64> = traces.iter().map(|t| t.cost).collect();
    let split_seed = Some(stream_seed(seed, "bootstrap"));
    let acc = bootstrap_ci(&correct, num_splits, split_seed)?;
    let cost = bootstrap_ci(&costs, num_splits, split_seed)?;
    let n = traces.len() as f64;
    Ok(OperatingPoint {
        mode: mode.to_string(),
        label,
        parameter,
        accuracy: acc.mean,
        accuracy_ci: acc.half_width,
        cost: cost.mean,
        cost_ci: cost.half_width,
        bitops: traces.iter().map(|t| topology.path_bitops(&t.final_path)).sum::<f64>() / n,
        evaluations: traces.iter().map(|t| t.evaluations() as f64).sum::<f64>() / n,
    })
}

/// Mean cost-based 0-1 loss `1[error] + lambda * cost` over traces.
pub fn mean_loss(traces: &[DecisionTrace], lambda: f64) -> f64 {
    traces.iter().map(|t| t.loss(lambda)).sum::<f64>() / traces.len() as f64
}

pub fn route_all(
    records: &[SampleRecord],
    router: &Router<'_>,
    policy: &RoutingPolicy,
    path_set: &PathSet,
    topology: &NetworkTopology,
) -> Result<Vec<DecisionTrace>> {
    records
        .iter()
        .map(|r| router.route(r, policy, path_set, topology))
        .collect()
}

fn fmt_param(x: f64) -> String {
    format!("{x}")
}

/// Everything a sweep needs besides the policy parameters.
#[derive(Clone, Copy)]
pub struct SweepContext<'a> {
    pub records: &'a [SampleRecord],
    pub path_set: &'a PathSet,
    pub topology: &'a NetworkTopology,
    pub num_splits: usize,
    pub seed: u64,
}

impl SweepContext<'_> {
    fn point(&self, router: &Router<'_>, policy: &RoutingPolicy, label: String, parameter: f64) -> Result<(OperatingPoint, Vec<DecisionTrace>)> {
        let traces = route_all(self.records, router, policy, self.path_set, self.topology)?;
        let p = summarize(policy.mode_name(), label, parameter, &traces, self.topology, self.num_splits, self.seed)?;
        Ok((p, traces))
    }

    pub fn quee(&self, estimator: &dyn ErrorEstimator, lambdas: &[f64], first_gate: FirstGate) -> Result<Vec<OperatingPoint>> {
        let router = Router {
            estimator: Some(estimator),
            next_best_step: None,
        };
        lambdas
            .iter()
            .map(|&lambda| {
                let policy = RoutingPolicy::Quee { lambda, first_gate };
                Ok(self.point(&router, &policy, fmt_param(lambda), lambda)?.0)
            })
            .collect()
    }

    /// Oracle points; the traces are returned for loss comparisons.
    pub fn oracle(&self, lambdas: &[f64]) -> Result<Vec<(OperatingPoint, Vec<DecisionTrace>)>> {
        let router = Router::default();
        lambdas
            .iter()
            .map(|&lambda| self.point(&router, &RoutingPolicy::Oracle { lambda }, fmt_param(lambda), lambda))
            .collect()
    }

    pub fn threshold(&self, thresholds: &[f64]) -> Result<Vec<OperatingPoint>> {
        let router = Router::default();
        thresholds
            .iter()
            .map(|&threshold| {
                Ok(self
                    .point(&router, &RoutingPolicy::Threshold { threshold }, fmt_param(threshold), threshold)?
                    .0)
            })
            .collect()
    }

    /// One point per active path; `parameter` is the path's normalized cost.
    pub fn fixed_paths(&self) -> Result<Vec<(OperatingPoint, Vec<DecisionTrace>)>> {
        let router = Router::default();
        self.path_set
            .iter()
            .map(|p| {
                let policy = RoutingPolicy::FixedPath { path: p.clone() };
                self.point(&router, &policy, p.key(), self.topology.path_cost(p))
            })
            .collect()
    }

    /// One point per trained step model, in the given order.
    pub fn next_best_step(&self, models: &[NextBestStepModels], first_gate: FirstGate) -> Result<Vec<OperatingPoint>> {
        models
            .iter()
            .map(|m| {
                let router = Router {
                    estimator: None,
                    next_best_step: Some(m),
                };
                let policy = RoutingPolicy::NextBestStep { first_gate };
                Ok(self.point(&router, &policy, fmt_param(m.lambda), m.lambda)?.0)
            })
            .collect()
    }
}

/// Upper-left staircase of a curve: points sorted by cost, keeping each
/// point that is strictly more accurate than every cheaper one.
pub fn frontier(points: &[OperatingPoint]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.cost, p.accuracy)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (c, a) in pts {
        if out.last().is_none_or(|&(_, best)| a > best) {
            out.push((c, a));
        }
    }
    out
}

/// Accuracy reachable at `cost` on a frontier: linear interpolation between
/// neighbouring frontier points, flat beyond the most expensive one, `None`
/// below the cheapest.
pub fn accuracy_at_cost(frontier: &[(f64, f64)], cost: f64) -> Option<f64> {
    let first = frontier.first()?;
    if cost < first.0 {
        return None;
    }
    for w in frontier.windows(2) {
        let ((c0, a0), (c1, a1)) = (w[0], w[1]);
        if cost <= c1 {
            return Some(if c1 > c0 { a0 + (a1 - a0) * (cost - c0) / (c1 - c0) } else { a1 });
        }
    }
    frontier.last().map(|&(_, a)| a)
}

/// `n` evenly spaced costs over the cost range shared by both curves, or
/// over its lower half when `lower_half` is set.
pub fn matched_costs(a: &[OperatingPoint], b: &[OperatingPoint], n: usize, lower_half: bool) -> Vec<f64> {
    let range = |pts: &[OperatingPoint]| {
        pts.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.cost), hi.max(p.cost)))
    };
    let (alo, ahi) = range(a);
    let (blo, bhi) = range(b);
    let lo = alo.max(blo);
    let mut hi = ahi.min(bhi);
    if !(hi >= lo) || n == 0 {
        return Vec::new();
    }
    if lower_half {
        hi = lo + 0.5 * (hi - lo);
    }
    if n == 1 {
        return alloc::vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Settings shared by every fitting and sweep stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub topology: NetworkTopology,
    pub path_cap: usize,
    pub seed: u64,
    pub k: usize,
    /// Share of validation records used to fit clusters; the rest drive early stopping.
    pub fit_fraction: f64,
    pub sampling: RowSampling,
    pub train: TrainConfig,
    pub lambdas: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub first_gate: FirstGate,
    pub bootstrap_splits: usize,
}

impl PipelineConfig {
    pub fn new(topology: NetworkTopology) -> Self {
        Self {
            topology,
            path_cap: 50,
            seed: 0,
            k: 40,
            fit_fraction: DEFAULT_FIT_FRACTION,
            sampling: RowSampling::default(),
            train: TrainConfig::default(),
            lambdas: default_lambdas(),
            thresholds: default_thresholds(),
            first_gate: FirstGate::Highest,
            bootstrap_splits: DEFAULT_BOOTSTRAP_SPLITS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(invalid("lambda list is empty"));
        }
        if self.lambdas.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid("lambda list must be sorted ascending"));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(invalid("lambdas must be nonnegative and finite"));
        }
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(invalid("thresholds must lie in [0, 1]"));
        }
        if self.k == 0 {
            return Err(invalid("K must be at least 1"));
        }
        if self.path_cap == 0 {
            return Err(invalid("path cap must be at least 1"));
        }
        if !(self.fit_fraction > 0.0 && self.fit_fraction < 1.0) {
            return Err(invalid(format!("fit fraction must lie in (0, 1), got {}", self.fit_fraction)));
        }
        Ok(())
    }

    fn sweep<'a>(&self, records: &'a [SampleRecord], path_set: &'a PathSet, topology: &'a NetworkTopology) -> SweepContext<'a> {
        SweepContext {
            records,
            path_set,
            topology,
            num_splits: self.bootstrap_splits,
            seed: self.seed,
        }
    }
}

/// Enumerate, drop non-monotone paths, then cap.
pub fn prepare_path_set(topology: &NetworkTopology, path_cap: usize, seed: u64) -> Result<PathSet> {
    enumerate_paths(topology)
        .filter_monotone()
        .sample_paths(topology, path_cap, stream_seed(seed, "paths"))
}

fn validation_parts(dataset: &SplitDataset, cfg: &PipelineConfig) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    dataset.validation_halves(cfg.fit_fraction, stream_seed(cfg.seed, "validation-split"))
}

/// Clusters on the cluster-fitting part of the validation split.
pub fn fit_discretizer(dataset: &SplitDataset, path_set: &PathSet, cfg: &PipelineConfig, k: usize) -> Result<DiscretizerModel> {
    let (fit_part, _) = validation_parts(dataset, cfg);
    fit(&fit_part, path_set, k, stream_seed(cfg.seed, "cluster"))
}

/// Training rows from the train split and early-stopping rows from the held
/// part of the validation split.
pub fn training_rows(dataset: &SplitDataset, path_set: &PathSet, discretizer: &DiscretizerModel, cfg: &PipelineConfig) -> Result<(GateRows, GateRows)> {
    let (_, held) = validation_parts(dataset, cfg);
    let build = |records: &[SampleRecord], stage: &str| {
        build_training_rows(
            records,
            path_set,
            discretizer,
            &cfg.topology,
            dataset.num_classes,
            cfg.sampling,
            stream_seed(cfg.seed, stage),
        )
    };
    Ok((build(&dataset.train, "rows-train")?, build(&held, "rows-holdout")?))
}

/// Rows over `records` used only for measuring predictor RMSE.
pub fn evaluation_rows(records: &[SampleRecord], num_classes: usize, path_set: &PathSet, discretizer: &DiscretizerModel, cfg: &PipelineConfig) -> Result<GateRows> {
    build_training_rows(
        records,
        path_set,
        discretizer,
        &cfg.topology,
        num_classes,
        cfg.sampling,
        stream_seed(cfg.seed, "rows-eval"),
    )
}

pub fn train_gates(rows: &GateRows, holdout: &GateRows, cfg: &PipelineConfig) -> Result<GateModels> {
    GateModels::train(rows, holdout, &cfg.train, stream_seed(cfg.seed, "train"))
}

/// Discretizer plus per-gate predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModels {
    pub discretizer: DiscretizerModel,
    pub gates: GateModels,
}

pub fn train_models(dataset: &SplitDataset, path_set: &PathSet, cfg: &PipelineConfig) -> Result<TrainedModels> {
    let discretizer = fit_discretizer(dataset, path_set, cfg, cfg.k)?;
    let (rows, holdout) = training_rows(dataset, path_set, &discretizer, cfg)?;
    let gates = train_gates(&rows, &holdout, cfg)?;
    Ok(TrainedModels { discretizer, gates })
}

/// RMSE of `estimator` against clustered targets on `records`.
pub fn predictor_rmse(
    estimator: &impl ErrorEstimator,
    records: &[SampleRecord],
    num_classes: usize,
    discretizer: &DiscretizerModel,
    path_set: &PathSet,
    cfg: &PipelineConfig,
) -> Result<RmseReport> {
    rmse(estimator, &evaluation_rows(records, num_classes, path_set, discretizer, cfg)?)
}

/// Step models for one lambda, trained on the same splits as the gates.
pub fn train_next_best_step(
    dataset: &SplitDataset,
    path_set: &PathSet,
    discretizer: &DiscretizerModel,
    cfg: &PipelineConfig,
    lambda: f64,
) -> Result<NextBestStepModels> {
    let (_, held) = validation_parts(dataset, cfg);
    let build = |records: &[SampleRecord], stage: &str| {
        build_next_best_step_rows(
            records,
            path_set,
            discretizer,
            &cfg.topology,
            dataset.num_classes,
            cfg.sampling,
            lambda,
            stream_seed(cfg.seed, stage),
        )
    };
    let rows = build(&dataset.train, "nbs-rows-train")?;
    let holdout = build(&held, "nbs-rows-holdout")?;
    NextBestStepModels::train(&rows, &holdout, &cfg.train, lambda, stream_seed(cfg.seed, "nbs-train"))
}

/// Output of a full pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub path_set: PathSet,
    pub models: TrainedModels,
    /// quee, oracle, threshold-exit and fixed-path points, in that order.
    pub points: Vec<OperatingPoint>,
}

/// Paths, clusters, gates, then test-split sweeps for every policy.
pub fn run_pipeline(dataset: &SplitDataset, cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let path_set = prepare_path_set(&cfg.topology, cfg.path_cap, cfg.seed)?;
    let models = train_models(dataset, &path_set, cfg)?;
    let points = sweep_all(dataset, &path_set, &models, cfg)?;
    Ok(PipelineReport { path_set, models, points })
}

/// Routes the test split under every policy of the configured sweep.
pub fn sweep_all(dataset: &SplitDataset, path_set: &PathSet, models: &TrainedModels, cfg: &PipelineConfig) -> Result<Vec<OperatingPoint>> {
    let ctx = cfg.sweep(&dataset.test, path_set, &cfg.topology);
    let mut points = ctx.quee(&models.gates, &cfg.lambdas, cfg.first_gate)?;
    points.extend(ctx.oracle(&cfg.lambdas)?.into_iter().map(|(p, _)| p));
    points.extend(ctx.threshold(&cfg.thresholds)?);
    points.extend(ctx.fixed_paths()?.into_iter().map(|(p, _)| p));
    Ok(points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EceStudyRow {
    pub k: usize,
    pub ece: EceReport,
    /// quee sweep with gates trained on this K; empty unless requested.
    pub curve: Vec<OperatingPoint>,
}

/// ECE on the test split for each distinct K (ascending), optionally with
/// a quee curve per K.
pub fn ece_study(dataset: &SplitDataset, path_set: &PathSet, cfg: &PipelineConfig, ks: &[usize], with_curves: bool) -> Result<Vec<EceStudyRow>> {
    let ks: BTreeSet<usize> = ks.iter().copied().collect();
    if ks.is_empty() {
        return Err(invalid("K list is empty"));
    }
    let mut out = Vec::with_capacity(ks.len());
    for k in ks {
        let discretizer = fit_discretizer(dataset, path_set, cfg, k)?;
        let ece = compute_ece(&discretizer, &dataset.test, path_set, DEFAULT_ECE_BINS)?;
        let curve = if with_curves {
            let (rows, holdout) = training_rows(dataset, path_set, &discretizer, cfg)?;
            let gates = train_gates(&rows, &holdout, cfg)?;
            cfg.sweep(&dataset.test, path_set, &cfg.topology)
                .quee(&gates, &cfg.lambdas, cfg.first_gate)?
        } else {
            Vec::new()
        };
        out.push(EceStudyRow { k, ece, curve });
    }
    Ok(out)
}

/// Adds `sigma * z` to every delegate, with one standard-normal `z` per
/// (path, cluster) drawn from `seed`; the same draws are reused for every
/// sigma so noise levels are nested.
pub fn perturb_delegates(discretizer: &DiscretizerModel, sigma: f64, seed: u64) -> DiscretizerModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    discretizer.map_delegates(|_, _, d| {
        let z: f64 = rng.sample(StandardNormal);
        d + sigma * z
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationRow {
    pub sigma: f64,
    /// Against clean targets on the test split.
    pub rmse: RmseReport,
    pub curve: Vec<OperatingPoint>,
}

/// Retrains the gates on noise-perturbed targets for each sigma.
pub fn degradation_study(dataset: &SplitDataset, path_set: &PathSet, cfg: &PipelineConfig, sigmas: &[f64]) -> Result<Vec<DegradationRow>> {
    if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(invalid("noise levels must be nonnegative and finite"));
    }
    let clean = fit_discretizer(dataset, path_set, cfg, cfg.k)?;
    let eval_rows = evaluation_rows(&dataset.test, dataset.num_classes, path_set, &clean, cfg)?;
    let ctx = cfg.sweep(&dataset.test, path_set, &cfg.topology);
    let mut out = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let noisy = perturb_delegates(&clean, sigma, stream_seed(cfg.seed, "noise"));
        let (rows, holdout) = training_rows(dataset, path_set, &noisy, cfg)?;
        let gates = train_gates(&rows, &holdout, cfg)?;
        out.push(DegradationRow {
            sigma,
            rmse: rmse(&gates, &eval_rows)?,
            curve: ctx.quee(&gates, &cfg.lambdas, cfg.first_gate)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use alloc::vec;

    #[test]
    fn ci_degenerate_cases() {
        let same = vec![0.7; 50];
        let e = bootstrap_ci(&same, 10, Some(3)).unwrap();
        assert!((e.mean - 0.7).abs() < 1e-12 && e.half_width == 0.0);
        let alt: Vec<f64> = (0..100).map(|i| f64::from(u8::from(i % 2 == 0))).collect();
        let e = bootstrap_ci(&alt, 10, None).unwrap();
        assert_eq!(e.mean, 0.5);
        assert_eq!(e.half_width, 0.0);
        assert!(bootstrap_ci(&[1.0; 9], 10, None).is_err());
    }

    #[test]
    fn ci_uneven_chunks() {
        // 12 values into 5 chunks: sizes 3,3,2,2,2
        let v: Vec<f64> = (0..12).map(f64::from).collect();
        let e = bootstrap_ci(&v, 5, None).unwrap();
        let means = [1.0, 4.0, 6.5, 8.5, 10.5];
        let m = means.iter().sum::<f64>() / 5.0;
        let sd = libm::sqrt(means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0);
        assert!((e.half_width - 1.96 * sd / libm::sqrt(5.0)).abs() < 1e-12);
        assert!((e.mean - 5.5).abs() < 1e-12);
    }

    #[test]
    fn lambdas_log_spaced() {
        let l = default_lambdas();
        assert_eq!(l.len(), 16);
        assert!((l[0] - 1e-3).abs() < 1e-15 && (l[15] - 10.0).abs() < 1e-12);
        let r = l[1] / l[0];
        assert!(l.windows(2).all(|w| (w[1] / w[0] - r).abs() < 1e-9));
    }

    #[test]
    fn stream_seeds_differ() {
        assert_ne!(stream_seed(1, "a"), stream_seed(1, "b"));
        assert_ne!(stream_seed(1, "a"), stream_seed(2, "a"));
        assert_eq!(stream_seed(5, "cluster"), stream_seed(5, "cluster"));
    }

    fn pt(cost: f64, accuracy: f64) -> OperatingPoint {
        OperatingPoint {
            mode: "x".into(),
            label: String::new(),
            parameter: 0.0,
            accuracy,
            accuracy_ci: 0.0,
            cost,
            cost_ci: 0.0,
            bitops: 0.0,
            evaluations: 0.0,
        }
    }

    #[test]
    fn frontier_and_interpolation() {
        let pts = vec![pt(0.5, 0.6), pt(0.2, 0.4), pt(0.4, 0.3), pt(1.0, 0.9), pt(0.8, 0.9)];
        let f = frontier(&pts);
        assert_eq!(f, vec![(0.2, 0.4), (0.5, 0.6), (0.8, 0.9)]);
        assert_eq!(accuracy_at_cost(&f, 0.1), None);
        assert!((accuracy_at_cost(&f, 0.35).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(accuracy_at_cost(&f, 0.95), Some(0.9));
        let g = matched_costs(&pts, &[pt(0.3, 0.0), pt(0.7, 0.0)], 5, true);
        assert_eq!(g.len(), 5);
        assert!((g[0] - 0.3).abs() < 1e-12 && (g[4] - 0.5).abs() < 1e-12);
    }

    fn small() -> (SplitDataset, PathSet, PipelineConfig) {
        let topo = NetworkTopology::uniform(3, vec![4, 8]).unwrap();
        let mut cfg = PipelineConfig::new(topo.clone());
        cfg.k = 5;
        cfg.train.max_epochs = 3;
        cfg.lambdas = vec![0.01, 0.1, 1.0];
        cfg.thresholds = vec![0.0, 0.5, 1.0];
        let set = prepare_path_set(&topo, cfg.path_cap, cfg.seed).unwrap();
        let synth = SyntheticConfig {
            num_samples: 400,
            ..SyntheticConfig::default()
        };
        (generate_synthetic(&synth, &topo, &set).unwrap(), set, cfg)
    }

    #[test]
    fn pipeline_structure_and_repeatability() {
        let (data, _, cfg) = small();
        let a = run_pipeline(&data, &cfg).unwrap();
        let b = run_pipeline(&data, &cfg).unwrap();
        assert_eq!(a, b);
        let set_len = a.path_set.len();
        assert_eq!(a.points.len(), 3 + 3 + 3 + set_len);
        for p in &a.points {
            assert!((0.0..=1.0).contains(&p.accuracy));
            assert!(p.cost > 0.0 && p.cost <= 1.0);
        }
        let thr = a.points.iter().filter(|p| p.mode == "threshold-exit").collect::<Vec<_>>();
        assert!((thr[0].cost - cfg.topology.path_cost(&"8".parse().unwrap())).abs() < 1e-12);
        assert!((thr[2].cost - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ece_study_dedupes() {
        let (data, set, cfg) = small();
        let rows = ece_study(&data, &set, &cfg, &[5, 1, 5], false).unwrap();
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 5]);
    }

    #[test]
    fn degradation_zero_noise_reproduces_baseline() {
        let (data, set, mut cfg) = small();
        cfg.train.max_epochs = 20;
        let rows = degradation_study(&data, &set, &cfg, &[0.0, 0.5]).unwrap();
        let models = train_models(&data, &set, &cfg).unwrap();
        let base = cfg.sweep(&data.test, &set, &cfg.topology).quee(&models.gates, &cfg.lambdas, cfg.first_gate).unwrap();
        assert_eq!(rows[0].curve, base);
        assert!(rows[1].rmse.overall > rows[0].rmse.overall, "{} vs {}", rows[1].rmse.overall, rows[0].rmse.overall);
    }
}
