//! Gate inputs and the per-gate error-probability regressors.
//!
//! At gate `j` the sample has been evaluated on prefix `pi[:j-1]`. The gate's
//! network reads the two most recent probability vectors plus summary
//! statistics, together with an encoding of a candidate path, and predicts
//! that candidate's probability of error.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{logistic, SampleRecord};
use crate::discretizer::DiscretizerModel;
use crate::error::{invalid, Result};
use crate::path_space::{NetworkTopology, Path, PathSet};

/// `current || previous || H(current) || H(previous) || max(previous) || max(current)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateFeatures(pub Vec<f64>);

impl GateFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Length of the feature vector for `num_classes` classes.
pub fn feature_len(num_classes: usize) -> usize {
    2 * num_classes + 4
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * libm::log(x)).sum::<f64>()
}

fn max_entry(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Builds the gate features; without a previous vector the current one fills
/// both slots.
pub fn build_features(current: &[f64], previous: Option<&[f64]>, num_classes: usize) -> Result<GateFeatures> {
    let previous = previous.unwrap_or(current);
    if current.len() != num_classes || previous.len() != num_classes {
        return Err(invalid(format!(
            "probability vectors of length {} and {} do not match {num_classes} classes",
            current.len(),
            previous.len()
        )));
    }
    let mut u = Vec::with_capacity(feature_len(num_classes));
    u.extend_from_slice(current);
    u.extend_from_slice(previous);
    u.push(entropy(current));
    u.push(entropy(previous));
    u.push(max_entry(previous));
    u.push(max_entry(current));
    Ok(GateFeatures(u))
}

/// `[b_1, .., b_e, 0, .., 0, e]`, of length `E + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEncoding(pub Vec<f64>);

impl PathEncoding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn encode_path(path: &Path, num_exits: usize) -> Result<PathEncoding> {
    if path.len() > num_exits {
        return Err(invalid(format!("path {path} is longer than {num_exits} exits")));
    }
    let mut p = alloc::vec![0.0; num_exits + 1];
    for (slot, &b) in p.iter_mut().zip(path.bits()) {
        *slot = f64::from(b);
    }
    p[num_exits] = path.len() as f64;
    Ok(PathEncoding(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    /// Probability of error in `(0, 1)`.
    Sigmoid,
    /// Unbounded output, used for loss-value targets.
    Identity,
}

/// Shapes of a gate network. Parameters live in one flat vector:
/// `[We, be]` (optional path embedding), `W1`, `b1`, `w2`, `b2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub feature_dim: usize,
    pub encoding_dim: usize,
    pub embedding_dim: Option<usize>,
    pub hidden_dim: usize,
}

impl Layout {
    fn path_dim(&self) -> usize {
        self.embedding_dim.unwrap_or(self.encoding_dim)
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + self.path_dim()
    }

    fn embed_len(&self) -> usize {
        self.embedding_dim.map_or(0, |d| d * self.encoding_dim + d)
    }

    fn w1(&self) -> usize {
        self.embed_len()
    }

    fn b1(&self) -> usize {
        self.w1() + self.hidden_dim * self.input_dim()
    }

    fn w2(&self) -> usize {
        self.b1() + self.hidden_dim
    }

    fn b2(&self) -> usize {
        self.w2() + self.hidden_dim
    }

    pub fn num_params(&self) -> usize {
        self.b2() + 1
    }
}

/// Two-layer rectifier network for one gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GatePredictor {
    pub gate: usize,
    pub layout: Layout,
    pub output: OutputActivation,
    pub params: Vec<f64>,
}

struct Activations {
    input: Vec<f64>,
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    output: f64,
}

impl GatePredictor {
    /// Weights drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer.
    pub fn initialize(gate: usize, layout: Layout, output: OutputActivation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = alloc::vec![0.0; layout.num_params()];
        let mut fill = |range: core::ops::Range<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            for p in &mut params[range] {
                *p = rng.random_range(-bound..bound);
            }
        };
        if layout.embedding_dim.is_some() {
            fill(0..layout.embed_len(), layout.encoding_dim, &mut rng);
        }
        fill(layout.w1()..layout.w2(), layout.input_dim(), &mut rng);
        fill(layout.w2()..layout.num_params(), layout.hidden_dim, &mut rng);
        Self {
            gate,
            layout,
            output,
            params,
        }
    }

    pub fn zeros(gate: usize, layout: Layout, output: OutputActivation) -> Self {
        Self {
            gate,
            layout,
            output,
            params: alloc::vec![0.0; layout.num_params()],
        }
    }

    fn check_dims(&self, features: &[f64], encoding: &[f64]) -> Result<()> {
        if features.len() != self.layout.feature_dim || encoding.len() != self.layout.encoding_dim {
            return Err(invalid(format!(
                "gate {} expects {} features and a length-{} encoding, got {} and {}",
                self.gate,
                self.layout.feature_dim,
                self.layout.encoding_dim,
                features.len(),
                encoding.len()
            )));
        }
        Ok(())
    }

    fn forward(&self, features: &[f64], encoding: &[f64]) -> Activations {
        let l = &self.layout;
        let mut input = Vec::with_capacity(l.input_dim());
        input.extend_from_slice(features);
        match l.embedding_dim {
            Some(d) => {
                let we = &self.params[..d * l.encoding_dim];
                let be = &self.params[d * l.encoding_dim..l.embed_len()];
                for (row, b) in we.chunks_exact(l.encoding_dim).zip(be) {
                    input.push(b + dot(row, encoding));
                }
            }
            None => input.extend_from_slice(encoding),
        }
        let w1 = &self.params[l.w1()..l.b1()];
        let b1 = &self.params[l.b1()..l.w2()];
        let pre_hidden: Vec<f64> = w1
            .chunks_exact(l.input_dim())
            .zip(b1)
            .map(|(row, b)| b + dot(row, &input))
            .collect();
        let hidden: Vec<f64> = pre_hidden.iter().map(|&a| a.max(0.0)).collect();
        let logit = self.params[l.b2()] + dot(&self.params[l.w2()..l.b2()], &hidden);
        let output = match self.output {
            OutputActivation::Sigmoid => logistic(logit),
            OutputActivation::Identity => logit,
        };
        Activations {
            input,
            pre_hidden,
            hidden,
            output,
        }
    }

    /// Forward pass.
    pub fn predict(&self, features: &GateFeatures, encoding: &PathEncoding) -> Result<f64> {
        self.check_dims(features.as_slice(), encoding.as_slice())?;
        Ok(self.forward(features.as_slice(), encoding.as_slice()).output)
    }

    /// Mean squared error over `rows` and its gradient w.r.t. `params`.
    pub fn loss_and_gradient(&self, rows: &[&TrainingRow]) -> (f64, Vec<f64>) {
        let l = &self.layout;
        let mut grad = alloc::vec![0.0; l.num_params()];
        let mut loss = 0.0;
        let n = rows.len() as f64;
        for row in rows {
            let act = self.forward(row.features.as_slice(), row.encoding.as_slice());
            let err = act.output - row.target;
            loss += err * err;
            let d_out = 2.0 * err / n;
            let d_logit = match self.output {
                OutputActivation::Sigmoid => d_out * act.output * (1.0 - act.output),
                OutputActivation::Identity => d_out,
            };
            grad[l.b2()] += d_logit;
            let w2 = &self.params[l.w2()..l.b2()];
            let mut d_pre = Vec::with_capacity(l.hidden_dim);
            for (h, ((&hv, &a), &w)) in act.hidden.iter().zip(&act.pre_hidden).zip(w2).enumerate() {
                grad[l.w2() + h] += d_logit * hv;
                d_pre.push(if a > 0.0 { d_logit * w } else { 0.0 });
            }
            let in_dim = l.input_dim();
            for (h, &dp) in d_pre.iter().enumerate() {
                if dp == 0.0 {
                    continue;
                }
                grad[l.b1() + h] += dp;
                let base = l.w1() + h * in_dim;
                for (g, &x) in grad[base..base + in_dim].iter_mut().zip(&act.input) {
                    *g += dp * x;
                }
            }
            if let Some(d) = l.embedding_dim {
                let w1 = &self.params[l.w1()..l.b1()];
                for e in 0..d {
                    let col = l.feature_dim + e;
                    let d_emb: f64 = d_pre
                        .iter()
                        .enumerate()
                        .map(|(h, &dp)| dp * w1[h * in_dim + col])
                        .sum();
                    grad[d * l.encoding_dim + e] += d_emb;
                    for (k, &p) in row.encoding.as_slice().iter().enumerate() {
                        grad[e * l.encoding_dim + k] += d_emb * p;
                    }
                }
            }
        }
        (loss / n, grad)
    }

    pub fn mse(&self, rows: &[TrainingRow]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter()
            .map(|r| {
                let e = self.forward(r.features.as_slice(), r.encoding.as_slice()).output - r.target;
                e * e
            })
            .sum::<f64>()
            / rows.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Free-function form of [`GatePredictor::predict`].
pub fn predict_pe(predictor: &GatePredictor, features: &GateFeatures, encoding: &PathEncoding) -> Result<f64> {
    predictor.predict(features, encoding)
}

/// One regression example for a gate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRow {
    pub gate: usize,
    pub features: GateFeatures,
    pub encoding: PathEncoding,
    pub target: f64,
}

/// Caps on row construction per sample and gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowSampling {
    /// Prefixes drawn per gate and sample.
    pub prefixes: usize,
    /// Candidate continuations per prefix.
    pub candidates: usize,
}

impl Default for RowSampling {
    fn default() -> Self {
        Self {
            prefixes: 2,
            candidates: 50,
        }
    }
}

/// Prefixes of length `gate - 1` for one sample, capped and seeded.
pub(crate) fn sample_prefixes<'a>(path_set: &'a PathSet, gate: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Path> {
    let all: Vec<&Path> = path_set.iter().filter(|p| p.len() == gate - 1).collect();
    cap_sample(all, cap, rng)
}

pub(crate) fn cap_sample<T>(mut items: Vec<T>, cap: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if items.len() <= cap {
        return items;
    }
    let mut keep: Vec<usize> = index::sample(rng, items.len(), cap).into_vec();
    keep.sort_unstable();
    let mut out = Vec::with_capacity(cap);
    for (i, item) in items.drain(..).enumerate() {
        if keep.binary_search(&i).is_ok() {
            out.push(item);
        }
    }
    out
}

/// Features seen at `gate` after evaluating `prefix` (of length `gate - 1`).
pub fn gate_features(record: &SampleRecord, prefix: &Path, num_classes: usize) -> Result<GateFeatures> {
    let current = record.probs_for(prefix)?;
    let previous = match prefix.prefix(prefix.len().saturating_sub(1)) {
        Some(p) => Some(record.probs_for(&p)?),
        None => None,
    };
    build_features(current, previous, num_classes)
}

/// Regression rows per gate `2..=E`, keyed by gate index.
///
/// For every record and gate, up to `sampling.prefixes` prefixes of length
/// `gate - 1` are drawn from `path_set`; every candidate continuation of a
/// prefix contributes one row whose target is the clustered error of the
/// candidate on this record.
pub fn build_training_rows(
    records: &[SampleRecord],
    path_set: &PathSet,
    discretizer: &DiscretizerModel,
    topology: &NetworkTopology,
    num_classes: usize,
    sampling: RowSampling,
    seed: u64,
) -> Result<BTreeMap<usize, Vec<TrainingRow>>> {
    let e = topology.num_exits();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: BTreeMap<usize, Vec<TrainingRow>> = (2..=e).map(|j| (j, Vec::new())).collect();
    let encodings: BTreeMap<&Path, PathEncoding> = path_set
        .iter()
        .map(|p| Ok((p, encode_path(p, e)?)))
        .collect::<Result<_>>()?;
    for record in records {
        for gate in 2..=e {
            for prefix in sample_prefixes(path_set, gate, sampling.prefixes, &mut rng) {
                let features = gate_features(record, prefix, num_classes)?;
                let candidates: Vec<&Path> = path_set.continuations_iter(prefix.bits()).collect();
                for cand in cap_sample(candidates, sampling.candidates, &mut rng) {
                    let target = discretizer.assign_target(cand, record.probs_for(cand)?)?;
                    rows.get_mut(&gate).expect("gate initialized").push(TrainingRow {
                        gate,
                        features: features.clone(),
                        encoding: encodings[cand].clone(),
                        target,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Optimizer and early-stopping settings for one gate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    /// Optional linear projection of the path encoding before concatenation.
    pub embedding_dim: Option<usize>,
    pub learning_rate: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub output: OutputActivation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            embedding_dim: None,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 128,
            max_epochs: 20,
            patience: 3,
            output: OutputActivation::Sigmoid,
        }
    }
}

/// Loss trajectory of a training run. Index 0 is the initialization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Trains with MSE and AdamW, keeping the weights with the best held-out
/// loss. When `holdout` is empty the training loss drives early stopping.
pub fn train_gate(rows: &[TrainingRow], holdout: &[TrainingRow], config: &TrainConfig, seed: u64) -> Result<(GatePredictor, TrainHistory)> {
    let first = rows.first().ok_or_else(|| invalid("cannot train a gate on zero rows"))?;
    if config.hidden_dim == 0 || config.batch_size == 0 {
        return Err(invalid("hidden_dim and batch_size must be positive"));
    }
    let layout = Layout {
        feature_dim: first.features.len(),
        encoding_dim: first.encoding.0.len(),
        embedding_dim: config.embedding_dim,
        hidden_dim: config.hidden_dim,
    };
    if let Some(bad) = rows.iter().chain(holdout).find(|r| {
        r.features.len() != layout.feature_dim || r.encoding.0.len() != layout.encoding_dim
    }) {
        return Err(invalid(format!("row for gate {} has mismatched dimensions", bad.gate)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = GatePredictor::initialize(first.gate, layout, config.output, rng.random());
    let stop_rows = if holdout.is_empty() { rows } else { holdout };

    let mut history = TrainHistory::default();
    history.train_loss.push(model.mse(rows));
    history.validation_loss.push(model.mse(stop_rows));
    let mut best = (model.params.clone(), history.validation_loss[0]);
    let mut since_best = 0;

    let mut m = alloc::vec![0.0; layout.num_params()];
    let mut v = alloc::vec![0.0; layout.num_params()];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingRow> = batch.iter().map(|&i| &rows[i]).collect();
            let (loss, grad) = model.loss_and_gradient(&batch);
            epoch_loss += loss * batch.len() as f64;
            step += 1;
            let c1 = 1.0 - libm::pow(config.beta1, f64::from(step));
            let c2 = 1.0 - libm::pow(config.beta2, f64::from(step));
            for (((p, g), mi), vi) in model.params.iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
                *mi = config.beta1 * *mi + (1.0 - config.beta1) * g;
                *vi = config.beta2 * *vi + (1.0 - config.beta2) * g * g;
                *p -= config.learning_rate * config.weight_decay * *p;
                *p -= config.learning_rate * (*mi / c1) / (libm::sqrt(*vi / c2) + config.epsilon);
            }
        }
        history.train_loss.push(epoch_loss / rows.len() as f64);
        let val = model.mse(stop_rows);
        history.validation_loss.push(val);
        if val < best.1 {
            best = (model.params.clone(), val);
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.params = best.0;
    Ok((model, history))
}

/// Anything that scores a candidate path at a gate.
pub trait ErrorEstimator {
    fn estimate(&self, gate: usize, features: &GateFeatures, encoding: &PathEncoding) -> Result<f64>;
}

impl<T: ErrorEstimator + ?Sized> ErrorEstimator for &T {
    fn estimate(&self, gate: usize, features: &GateFeatures, encoding: &PathEncoding) -> Result<f64> {
        (**self).estimate(gate, features, encoding)
    }
}

/// Trained predictors keyed by gate index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GateModels {
    pub gates: BTreeMap<usize, GatePredictor>,
}

impl GateModels {
    pub fn gate(&self, gate: usize) -> Result<&GatePredictor> {
        self.gates
            .get(&gate)
            .ok_or_else(|| invalid(format!("no predictor trained for gate {gate}")))
    }

    /// Trains one predictor per gate with its own seed stream.
    pub fn train(
        rows: &BTreeMap<usize, Vec<TrainingRow>>,
        holdout: &BTreeMap<usize, Vec<TrainingRow>>,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut gates = BTreeMap::new();
        for (&gate, gate_rows) in rows {
            if gate_rows.is_empty() {
                continue;
            }
            let held = holdout.get(&gate).map_or(&[][..], Vec::as_slice);
            let gate_seed = seed ^ (gate as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
            let (model, _) = train_gate(gate_rows, held, config, gate_seed)?;
            gates.insert(gate, model);
        }
        Ok(Self { gates })
    }
}

impl ErrorEstimator for GateModels {
    fn estimate(&self, gate: usize, features: &GateFeatures, encoding: &PathEncoding) -> Result<f64> {
        self.gate(gate)?.predict(features, encoding)
    }
}

/// Root mean squared error of `estimator` on `rows`, per gate and overall.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseReport {
    pub per_gate: BTreeMap<usize, f64>,
    pub overall: f64,
}

pub fn rmse(estimator: &impl ErrorEstimator, rows: &BTreeMap<usize, Vec<TrainingRow>>) -> Result<RmseReport> {
    let mut per_gate = BTreeMap::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for (&gate, gate_rows) in rows {
        if gate_rows.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for r in gate_rows {
            let e = estimator.estimate(gate, &r.features, &r.encoding)? - r.target;
            sum += e * e;
        }
        per_gate.insert(gate, libm::sqrt(sum / gate_rows.len() as f64));
        total += sum;
        count += gate_rows.len();
    }
    if count == 0 {
        return Err(invalid("RMSE over zero rows"));
    }
    Ok(RmseReport {
        per_gate,
        overall: libm::sqrt(total / count as f64),
    })
}
