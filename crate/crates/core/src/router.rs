//! Per-sample routing policies.
//!
//! The learned policy walks the network one block at a time. At gate `j`
//! (after evaluating the prefix `pi[:j-1]`) it scores every reachable path
//! `pi'` with `lambda * cost(pi') + predicted_error(pi')`, picks the argmin and
//! either exits (when the argmin is the prefix itself) or takes the argmin's
//! next step. The oracle, threshold and fixed-path policies serve as
//! references.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{argmax, SampleRecord};
use crate::discretizer::DiscretizerModel;
use crate::error::{invalid, Error, Result};
use crate::path_space::{tie_break, NetworkTopology, Path, PathSet};
use crate::predictor::{
    cap_sample, encode_path, gate_features, sample_prefixes, ErrorEstimator, GateModels, RowSampling, TrainConfig,
    TrainingRow,
};

/// Bit-width the first gate assigns to block 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FirstGate {
    #[default]
    Highest,
    Fixed(u32),
}

impl FirstGate {
    fn bits(self, topology: &NetworkTopology) -> u32 {
        match self {
            FirstGate::Highest => topology.max_bits(),
            FirstGate::Fixed(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoutingPolicy {
    Quee { lambda: f64, first_gate: FirstGate },
    /// The trade-off is baked into the step models at training time.
    NextBestStep { first_gate: FirstGate },
    Oracle { lambda: f64 },
    /// Walks the max-precision chain and exits once `max(p) > threshold`.
    Threshold { threshold: f64 },
    FixedPath { path: Path },
}

impl RoutingPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            RoutingPolicy::Quee { lambda, .. } | RoutingPolicy::Oracle { lambda } if !(*lambda >= 0.0 && lambda.is_finite()) => {
                Err(invalid(format!("lambda must be a nonnegative finite number, got {lambda}")))
            }
            RoutingPolicy::Threshold { threshold } if !(0.0..=1.0).contains(threshold) => {
                Err(invalid(format!("threshold must lie in [0, 1], got {threshold}")))
            }
            _ => Ok(()),
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            RoutingPolicy::Quee { .. } => "quee",
            RoutingPolicy::NextBestStep { .. } => "next-best-step",
            RoutingPolicy::Oracle { .. } => "oracle",
            RoutingPolicy::Threshold { .. } => "threshold-exit",
            RoutingPolicy::FixedPath { .. } => "fixed-path",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Exit,
    Continue(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub path: Path,
    pub cost: f64,
    /// Predicted error (or predicted loss for the next-best-step policy).
    pub predicted: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub gate: usize,
    pub candidates: Vec<ScoredCandidate>,
    pub step: Step,
}

/// Audit record of one routed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTrace {
    pub id: String,
    pub decisions: Vec<GateDecision>,
    pub final_path: Path,
    pub predicted_class: usize,
    pub label: usize,
    pub cost: f64,
    pub correct: bool,
}

impl DecisionTrace {
    fn finish(record: &SampleRecord, decisions: Vec<GateDecision>, final_path: Path, topology: &NetworkTopology) -> Result<Self> {
        let predicted_class = argmax(record.probs_for(&final_path)?);
        Ok(Self {
            id: record.id.clone(),
            decisions,
            cost: topology.path_cost(&final_path),
            final_path,
            predicted_class,
            label: record.label,
            correct: predicted_class == record.label,
        })
    }

    /// Number of scored candidates over all gates.
    pub fn evaluations(&self) -> usize {
        self.decisions.iter().map(|d| d.candidates.len()).sum()
    }

    /// `1[error] + lambda * cost`.
    pub fn loss(&self, lambda: f64) -> f64 {
        f64::from(u8::from(!self.correct)) + lambda * self.cost
    }
}

fn argmin(candidates: &[ScoredCandidate]) -> Option<&ScoredCandidate> {
    candidates.iter().min_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| tie_break(a.cost, &a.path, b.cost, &b.path))
    })
}

fn first_prefix(first_gate: FirstGate, path_set: &PathSet, topology: &NetworkTopology, record: &SampleRecord) -> Result<(Path, GateDecision)> {
    let b = first_gate.bits(topology);
    let prefix = Path::new(alloc::vec![b])?;
    if path_set.continuations_iter(prefix.bits()).next().is_none() {
        return Err(Error::Data(format!(
            "no active path starts with {b} bits (record `{}`)",
            record.id
        )));
    }
    Ok((
        prefix,
        GateDecision {
            gate: 1,
            candidates: Vec::new(),
            step: Step::Continue(b),
        },
    ))
}

/// Sequential learned routing of one sample.
pub fn route_sample(
    record: &SampleRecord,
    estimator: &impl ErrorEstimator,
    path_set: &PathSet,
    topology: &NetworkTopology,
    lambda: f64,
    first_gate: FirstGate,
) -> Result<DecisionTrace> {
    let num_exits = topology.num_exits();
    let (mut prefix, first) = first_prefix(first_gate, path_set, topology, record)?;
    let mut decisions = alloc::vec![first];
    loop {
        if prefix.len() == num_exits {
            break;
        }
        let gate = prefix.len() + 1;
        let current = record.probs_for(&prefix)?;
        let features = gate_features(record, &prefix, current.len())?;
        let mut candidates = Vec::new();
        for cand in path_set.continuations_iter(prefix.bits()) {
            let predicted = estimator.estimate(gate, &features, &encode_path(cand, num_exits)?)?;
            let cost = topology.path_cost(cand);
            candidates.push(ScoredCandidate {
                path: cand.clone(),
                cost,
                predicted,
                score: lambda * cost + predicted,
            });
        }
        let best = argmin(&candidates)
            .ok_or_else(|| Error::Data(format!("no active path continues {prefix}")))?
            .path
            .clone();
        if best == prefix {
            decisions.push(GateDecision {
                gate,
                candidates,
                step: Step::Exit,
            });
            break;
        }
        let next = best.bits()[prefix.len()];
        decisions.push(GateDecision {
            gate,
            candidates,
            step: Step::Continue(next),
        });
        prefix = prefix.extended(next);
    }
    if !path_set.contains(&prefix) {
        return Err(Error::Data(format!("routing ended on inactive path {prefix}")));
    }
    DecisionTrace::finish(record, decisions, prefix, topology)
}

/// Global per-sample argmin of `lambda * cost + 1[wrong]`.
pub fn route_oracle(record: &SampleRecord, path_set: &PathSet, topology: &NetworkTopology, lambda: f64) -> Result<DecisionTrace> {
    let mut candidates = Vec::with_capacity(path_set.len());
    for path in path_set {
        let cost = topology.path_cost(path);
        let wrong = f64::from(u8::from(!record.is_correct(path)?));
        candidates.push(ScoredCandidate {
            path: path.clone(),
            cost,
            predicted: wrong,
            score: lambda * cost + wrong,
        });
    }
    let best = argmin(&candidates)
        .ok_or_else(|| invalid("oracle routing over an empty path set"))?
        .path
        .clone();
    DecisionTrace::finish(record, Vec::new(), best, topology)
}

/// Confidence-threshold early exit along the max-precision chain.
pub fn route_threshold(record: &SampleRecord, topology: &NetworkTopology, threshold: f64) -> Result<DecisionTrace> {
    let chain = topology.max_path();
    let b = topology.max_bits();
    let mut decisions = alloc::vec![GateDecision {
        gate: 1,
        candidates: Vec::new(),
        step: Step::Continue(b),
    }];
    for depth in 1..=topology.num_exits() {
        let prefix = chain.prefix(depth).expect("depth within chain");
        let confident = record.probs_for(&prefix)?.iter().copied().fold(0.0, f64::max) > threshold;
        if confident || depth == topology.num_exits() {
            decisions.push(GateDecision {
                gate: depth + 1,
                candidates: Vec::new(),
                step: Step::Exit,
            });
            return DecisionTrace::finish(record, decisions, prefix, topology);
        }
        decisions.push(GateDecision {
            gate: depth + 1,
            candidates: Vec::new(),
            step: Step::Continue(b),
        });
    }
    unreachable!("the chain always ends at the last exit")
}

/// Every sample uses `path`.
pub fn route_fixed(record: &SampleRecord, path: &Path, topology: &NetworkTopology) -> Result<DecisionTrace> {
    topology.check_path(path)?;
    DecisionTrace::finish(record, Vec::new(), path.clone(), topology)
}

/// One-value-per-step models; the trade-off `lambda` is fixed at training.
#[derive(Debug, Clone, PartialEq)]
pub struct NextBestStepModels {
    pub lambda: f64,
    pub gates: GateModels,
}

/// One option at a gate: exit with `path == prefix`, or take step `b` with
/// `path == prefix -> b`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOption {
    pub step: Step,
    pub path: Path,
}

/// Exit (when the prefix is active) plus every step with a reachable active path.
pub fn step_options(prefix: &Path, path_set: &PathSet, topology: &NetworkTopology) -> Vec<StepOption> {
    let mut out = Vec::new();
    if path_set.contains(prefix) {
        out.push(StepOption {
            step: Step::Exit,
            path: prefix.clone(),
        });
    }
    if prefix.len() < topology.num_exits() {
        for &b in topology.bit_widths() {
            let ext = prefix.extended(b);
            if path_set.continuations_iter(ext.bits()).next().is_some() {
                out.push(StepOption {
                    step: Step::Continue(b),
                    path: ext,
                });
            }
        }
    }
    out
}

/// Best achievable clustered loss per option:
/// `min over pi' reachable through the option of lambda * c(pi') + pe~(pi')`.
pub fn next_best_step_targets(
    record: &SampleRecord,
    prefix: &Path,
    path_set: &PathSet,
    topology: &NetworkTopology,
    discretizer: &DiscretizerModel,
    lambda: f64,
) -> Result<Vec<(StepOption, f64)>> {
    let mut out = Vec::new();
    for option in step_options(prefix, path_set, topology) {
        let reachable: Vec<&Path> = match option.step {
            Step::Exit => alloc::vec![prefix],
            Step::Continue(_) => path_set.continuations_iter(option.path.bits()).collect(),
        };
        let mut best = f64::INFINITY;
        for p in reachable {
            let loss = lambda * topology.path_cost(p) + discretizer.assign_target(p, record.probs_for(p)?)?;
            best = best.min(loss);
        }
        out.push((option, best));
    }
    Ok(out)
}

/// Training rows for the step models: one row per record, gate, sampled
/// prefix and option, encoding the option's path.
#[allow(clippy::too_many_arguments)]
pub fn build_next_best_step_rows(
    records: &[SampleRecord],
    path_set: &PathSet,
    discretizer: &DiscretizerModel,
    topology: &NetworkTopology,
    num_classes: usize,
    sampling: RowSampling,
    lambda: f64,
    seed: u64,
) -> Result<BTreeMap<usize, Vec<TrainingRow>>> {
    let e = topology.num_exits();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: BTreeMap<usize, Vec<TrainingRow>> = (2..=e).map(|j| (j, Vec::new())).collect();
    for record in records {
        for gate in 2..=e {
            for prefix in sample_prefixes(path_set, gate, sampling.prefixes, &mut rng) {
                let features = gate_features(record, prefix, num_classes)?;
                let targets = next_best_step_targets(record, prefix, path_set, topology, discretizer, lambda)?;
                for (option, target) in cap_sample(targets, sampling.candidates, &mut rng) {
                    rows.get_mut(&gate).expect("gate initialized").push(TrainingRow {
                        gate,
                        features: features.clone(),
                        encoding: encode_path(&option.path, e)?,
                        target,
                    });
                }
            }
        }
    }
    Ok(rows)
}

impl NextBestStepModels {
    /// Fits identity-output step models for one `lambda`.
    pub fn train(
        rows: &BTreeMap<usize, Vec<TrainingRow>>,
        holdout: &BTreeMap<usize, Vec<TrainingRow>>,
        config: &TrainConfig,
        lambda: f64,
        seed: u64,
    ) -> Result<Self> {
        let config = TrainConfig {
            output: crate::predictor::OutputActivation::Identity,
            ..config.clone()
        };
        Ok(Self {
            lambda,
            gates: GateModels::train(rows, holdout, &config, seed)?,
        })
    }
}

/// Step-model routing: one prediction per option, argmin taken per gate.
pub fn route_next_best_step(
    record: &SampleRecord,
    models: &impl ErrorEstimator,
    path_set: &PathSet,
    topology: &NetworkTopology,
    first_gate: FirstGate,
) -> Result<DecisionTrace> {
    let num_exits = topology.num_exits();
    let (mut prefix, first) = first_prefix(first_gate, path_set, topology, record)?;
    let mut decisions = alloc::vec![first];
    while prefix.len() < num_exits {
        let gate = prefix.len() + 1;
        let current = record.probs_for(&prefix)?;
        let features = gate_features(record, &prefix, current.len())?;
        let options = step_options(&prefix, path_set, topology);
        let mut candidates = Vec::with_capacity(options.len());
        for option in &options {
            let predicted = models.estimate(gate, &features, &encode_path(&option.path, num_exits)?)?;
            candidates.push(ScoredCandidate {
                path: option.path.clone(),
                cost: topology.path_cost(&option.path),
                predicted,
                score: predicted,
            });
        }
        let best = argmin(&candidates)
            .ok_or_else(|| Error::Data(format!("no option at gate {gate} after {prefix}")))?
            .path
            .clone();
        if best == prefix {
            decisions.push(GateDecision {
                gate,
                candidates,
                step: Step::Exit,
            });
            break;
        }
        let next = best.bits()[prefix.len()];
        decisions.push(GateDecision {
            gate,
            candidates,
            step: Step::Continue(next),
        });
        prefix = prefix.extended(next);
    }
    if !path_set.contains(&prefix) {
        return Err(Error::Data(format!("routing ended on inactive path {prefix}")));
    }
    DecisionTrace::finish(record, decisions, prefix, topology)
}

/// Models a [`Router`] can draw on; each is required only by the policies using it.
#[derive(Clone, Copy, Default)]
pub struct Router<'a> {
    pub estimator: Option<&'a dyn ErrorEstimator>,
    pub next_best_step: Option<&'a NextBestStepModels>,
}

impl Router<'_> {
    pub fn route(&self, record: &SampleRecord, policy: &RoutingPolicy, path_set: &PathSet, topology: &NetworkTopology) -> Result<DecisionTrace> {
        policy.validate()?;
        match policy {
            RoutingPolicy::Quee { lambda, first_gate } => {
                let est = self.estimator.ok_or_else(|| invalid("quee routing needs trained gate predictors"))?;
                route_sample(record, &est, path_set, topology, *lambda, *first_gate)
            }
            RoutingPolicy::NextBestStep { first_gate } => {
                let m = self
                    .next_best_step
                    .ok_or_else(|| invalid("next-best-step routing needs trained step models"))?;
                route_next_best_step(record, &m.gates, path_set, topology, *first_gate)
            }
            RoutingPolicy::Oracle { lambda } => route_oracle(record, path_set, topology, *lambda),
            RoutingPolicy::Threshold { threshold } => route_threshold(record, topology, *threshold),
            RoutingPolicy::FixedPath { path } => route_fixed(record, path, topology),
        }
    }
}

/// Candidate preference used by every argmin in this module, exposed for
/// external oracles: lower score, then [`tie_break`].
pub fn candidate_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then_with(|| tie_break(a.cost, &a.path, b.cost, &b.path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_space::enumerate_paths;
    use crate::predictor::{GateFeatures, PathEncoding};
    use alloc::vec;

    fn path(s: &str) -> Path {
        s.parse().unwrap()
    }

    fn setup() -> (NetworkTopology, PathSet) {
        let t = NetworkTopology::uniform(3, vec![4, 8]).unwrap();
        (t.clone(), enumerate_paths(&t).filter_monotone())
    }

    /// Predicted error looked up by encoded path.
    struct Table(BTreeMap<Vec<u64>, f64>, f64);

    impl Table {
        fn new(entries: &[(&str, f64)], default: f64, e: usize) -> Self {
            let mut m = BTreeMap::new();
            for (k, v) in entries {
                let enc = encode_path(&path(k), e).unwrap();
                m.insert(enc.0.iter().map(|x| x.to_bits()).collect(), *v);
            }
            Self(m, default)
        }
    }

    impl ErrorEstimator for Table {
        fn estimate(&self, _: usize, _: &GateFeatures, enc: &PathEncoding) -> Result<f64> {
            let key: Vec<u64> = enc.0.iter().map(|x| x.to_bits()).collect();
            Ok(*self.0.get(&key).unwrap_or(&self.1))
        }
    }

    fn record(set: &PathSet, correct: &[&str]) -> SampleRecord {
        let mut probs = BTreeMap::new();
        for p in set {
            let ok = correct.contains(&p.key().as_str());
            probs.insert(p.clone(), if ok { vec![0.9, 0.1] } else { vec![0.3, 0.7] });
        }
        SampleRecord {
            id: "x".into(),
            label: 0,
            probs,
        }
    }

    #[test]
    fn exit_now_wins_worked_example() {
        // gate-2 candidates with (cost, pe): exit (1/3, 0.4), 8-8 (2/3, 0.1), 8-4 (1/2, 0.25)
        // at lambda 1: 0.733 / 0.767 / 0.75 -> exit
        let (t, set) = setup();
        let table = Table::new(&[("8", 0.4), ("8-8", 0.1), ("8-4", 0.25)], 1.0, 3);
        let trace = route_sample(&record(&set, &[]), &table, &set, &t, 1.0, FirstGate::Highest).unwrap();
        assert_eq!(trace.final_path, path("8"));
        assert_eq!(trace.decisions[1].step, Step::Exit);
        assert_eq!(trace.decisions[1].candidates.len(), 6);
    }

    #[test]
    fn lambda_zero_takes_min_error() {
        let (t, set) = setup();
        let table = Table::new(&[("8", 0.4), ("8-4", 0.05), ("8-4-4", 0.3), ("8-8", 0.2)], 0.5, 3);
        let trace = route_sample(&record(&set, &[]), &table, &set, &t, 0.0, FirstGate::Highest).unwrap();
        assert_eq!(trace.final_path, path("8-4"));
    }

    #[test]
    fn huge_lambda_takes_cheapest_and_constant_reduces_to_cost() {
        let (t, set) = setup();
        let table = Table::new(&[("8", 0.9)], 0.0, 3);
        let trace = route_sample(&record(&set, &[]), &table, &set, &t, 1e6, FirstGate::Highest).unwrap();
        assert_eq!(trace.final_path, path("8"));
        let constant = Table::new(&[], 0.3, 3);
        let trace = route_sample(&record(&set, &[]), &constant, &set, &t, 0.01, FirstGate::Highest).unwrap();
        assert_eq!(trace.final_path, path("8"));
    }

    #[test]
    fn last_gate_forces_exit() {
        let (t, set) = setup();
        let table = Table::new(&[("8-8-8", 0.0)], 1.0, 3);
        let trace = route_sample(&record(&set, &[]), &table, &set, &t, 0.0, FirstGate::Highest).unwrap();
        assert_eq!(trace.final_path, path("8-8-8"));
        assert_eq!(trace.decisions.len(), 3);
        assert!(trace.evaluations() <= set.len() * t.num_exits());
    }

    #[test]
    fn missing_vector_is_data_error() {
        let (t, set) = setup();
        let mut r = record(&set, &[]);
        r.probs.remove(&path("8-8"));
        let table = Table::new(&[("8-8-8", 0.0)], 1.0, 3);
        assert!(matches!(
            route_sample(&r, &table, &set, &t, 0.0, FirstGate::Highest),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn oracle_examples() {
        let t = NetworkTopology::new(vec![1.0, 4.0], vec![8]).unwrap();
        let set = enumerate_paths(&t);
        // costs 0.2 and 1.0
        let wrong_then_right = record(&set, &["8-8"]);
        assert_eq!(route_oracle(&wrong_then_right, &set, &t, 0.5).unwrap().final_path, path("8-8"));
        assert_eq!(route_oracle(&wrong_then_right, &set, &t, 1.1).unwrap().final_path, path("8-8"));
        // crossover where 1 + 0.2 lambda == lambda, i.e. lambda = 1.25
        assert_eq!(route_oracle(&wrong_then_right, &set, &t, 1.3).unwrap().final_path, path("8"));
        let both = record(&set, &["8", "8-8"]);
        assert_eq!(route_oracle(&both, &set, &t, 0.0).unwrap().final_path, path("8"));
        let (t3, set3) = setup();
        let r = record(&set3, &["8-4-4"]);
        let tr = route_oracle(&r, &set3, &t3, 0.0).unwrap();
        assert!(tr.correct);
    }

    #[test]
    fn threshold_limits() {
        let (t, set) = setup();
        let r = record(&set, &[]);
        assert_eq!(route_threshold(&r, &t, 0.0).unwrap().final_path, path("8"));
        assert_eq!(route_threshold(&r, &t, 1.0).unwrap().final_path, path("8-8-8"));
        assert_eq!(route_threshold(&r, &t, 0.75).unwrap().final_path, path("8-8-8"));
        let r = record(&set, &["8-8"]);
        assert_eq!(route_threshold(&r, &t, 0.75).unwrap().final_path, path("8-8"));
    }

    #[test]
    fn per_gate_decision_cost_monotone_in_lambda() {
        let (t, set) = setup();
        let table = Table::new(&[("8", 0.5), ("8-4", 0.3), ("8-8", 0.2), ("8-4-4", 0.25), ("8-8-4", 0.12), ("8-8-8", 0.1)], 1.0, 3);
        let r = record(&set, &[]);
        let mut last = f64::INFINITY;
        for lambda in [0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6] {
            let tr = route_sample(&r, &table, &set, &t, lambda, FirstGate::Highest).unwrap();
            let gate2 = &tr.decisions[1];
            let chosen = gate2.candidates.iter().min_by(|a, b| candidate_order(a, b)).unwrap();
            assert!(chosen.cost <= last);
            last = chosen.cost;
        }
    }

    #[test]
    fn step_options_and_targets() {
        let (t, set) = setup();
        let opts = step_options(&path("8"), &set, &t);
        let steps: Vec<Step> = opts.iter().map(|o| o.step).collect();
        assert_eq!(steps, vec![Step::Exit, Step::Continue(4), Step::Continue(8)]);
        let last = step_options(&path("8-8-8"), &set, &t);
        assert_eq!(last.len(), 1);
        assert_eq!(step_options(&path("4"), &set, &t).len(), 2);
    }

    #[test]
    fn policy_validation() {
        assert!(RoutingPolicy::Quee { lambda: -1.0, first_gate: FirstGate::Highest }.validate().is_err());
        assert!(RoutingPolicy::Threshold { threshold: 1.5 }.validate().is_err());
        assert!(RoutingPolicy::Oracle { lambda: 0.0 }.validate().is_ok());
        let r = Router::default();
        let (t, set) = setup();
        assert!(r
            .route(&record(&set, &[]), &RoutingPolicy::Quee { lambda: 1.0, first_gate: FirstGate::Highest }, &set, &t)
            .is_err());
    }
}
