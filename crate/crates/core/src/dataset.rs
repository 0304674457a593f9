//! Per-sample probability tables for every path, plus a synthetic generator.
//!
//! A [`SampleRecord`] stands in for running a real backbone: it carries the
//! predicted probability vector of every candidate classifier for one input.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::path_space::{NetworkTopology, Path, PathSet};

/// Allowed deviation of a probability vector's sum from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    pub probs: BTreeMap<Path, Vec<f64>>,
}

impl SampleRecord {
    /// Probability vector of `path`, or a data error naming the record.
    pub fn probs_for(&self, path: &Path) -> Result<&[f64]> {
        self.probs.get(path).map(Vec::as_slice).ok_or_else(|| {
            Error::Data(format!("record `{}` has no probabilities for path {path}", self.id))
        })
    }

    /// Whether the classifier on `path` predicts the label.
    pub fn is_correct(&self, path: &Path) -> Result<bool> {
        Ok(argmax(self.probs_for(path)?) == self.label)
    }

    /// Checks the label range, vector shapes, normalization and that every
    /// path of `required` is present.
    pub fn validate<'a>(
        &self,
        num_classes: usize,
        required: impl IntoIterator<Item = &'a Path>,
    ) -> Result<()> {
        let schema = |reason: String| Error::Schema {
            id: self.id.clone(),
            reason,
        };
        if self.label >= num_classes {
            return Err(schema(format!(
                "label {} is outside [0, {num_classes})",
                self.label
            )));
        }
        for path in required {
            if !self.probs.contains_key(path) {
                return Err(schema(format!("missing path {path}")));
            }
        }
        for (path, v) in &self.probs {
            if v.len() != num_classes {
                return Err(schema(format!(
                    "path {path} has {} probabilities, expected {num_classes}",
                    v.len()
                )));
            }
            if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(schema(format!("path {path} has a negative or non-finite entry")));
            }
            let sum: f64 = v.iter().sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(schema(format!("path {path} sums to {sum}, not 1")));
            }
        }
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Disjoint train / validation / test records sharing one path-key set.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<SampleRecord>,
    pub validation: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    pub num_classes: usize,
}

impl SplitDataset {
    /// Validates every record against `path_set` and the split invariants.
    pub fn new(
        train: Vec<SampleRecord>,
        validation: Vec<SampleRecord>,
        test: Vec<SampleRecord>,
        num_classes: usize,
        path_set: &PathSet,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(invalid("at least two classes are required"));
        }
        let mut ids = BTreeSet::new();
        let mut keys: Option<Vec<&Path>> = None;
        for r in train.iter().chain(&validation).chain(&test) {
            r.validate(num_classes, path_set)?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Schema {
                    id: r.id.clone(),
                    reason: "duplicate record id".into(),
                });
            }
            let these: Vec<&Path> = r.probs.keys().collect();
            match &keys {
                None => keys = Some(these),
                Some(k) if *k != these => {
                    return Err(Error::Schema {
                        id: r.id.clone(),
                        reason: "path-key set differs from the other records".into(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(Self {
            train,
            validation,
            test,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Splits the validation records by seeded shuffle into a cluster-fitting
    /// part (`fit_fraction`) and an early-stopping part.
    pub fn validation_halves(&self, fit_fraction: f64, seed: u64) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
        let mut order: Vec<usize> = (0..self.validation.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_fit = libm::round(self.validation.len() as f64 * fit_fraction) as usize;
        let n_fit = n_fit.min(self.validation.len());
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.validation[i].clone()).collect();
        (pick(&order[..n_fit]), pick(&order[n_fit..]))
    }
}

/// Fraction of records whose argmax on `path` equals the label.
pub fn empirical_accuracy(records: &[SampleRecord], path: &Path) -> Result<f64> {
    if records.is_empty() {
        return Err(invalid("empirical accuracy of an empty record set"));
    }
    let mut correct = 0usize;
    for r in records {
        if r.is_correct(path)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Parameters of the synthetic backbone.
///
/// Each sample draws a latent difficulty `d = difficulty_scale * z` with `z`
/// standard normal. A path of depth `e` and mean bit-width `b` has skill
/// `alpha * e + beta * b - skill_offset`, and is correct with probability
/// `q = logistic(skill - d)`. The predicted class gets mass
/// `clip(q, 1/|Y| + eps, 1 - eps)`; the remainder is spread over the other
/// classes with multiplicative jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub num_samples: usize,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub skill_offset: f64,
    pub difficulty_scale: f64,
    pub jitter: f64,
    pub sharpness_eps: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            num_samples: 10_000,
            train_fraction: 0.5,
            validation_fraction: 0.35,
            test_fraction: 0.15,
            seed: 0,
            alpha: 1.0,
            beta: 0.25,
            skill_offset: 2.0,
            difficulty_scale: 4.0,
            jitter: 0.05,
            sharpness_eps: 0.05,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("num_classes must be at least 2"));
        }
        if self.num_samples < 3 {
            return Err(invalid("num_samples must be at least 3"));
        }
        let fractions = [self.train_fraction, self.validation_fraction, self.test_fraction];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(invalid("split fractions must lie in [0, 1]"));
        }
        if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("split fractions must sum to 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(invalid("alpha must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(invalid("beta must be nonnegative"));
        }
        if !(self.difficulty_scale >= 0.0) || !(self.jitter >= 0.0) || !self.skill_offset.is_finite() {
            return Err(invalid("difficulty_scale and jitter must be nonnegative"));
        }
        let max_eps = 0.5 * (1.0 - 1.0 / self.num_classes as f64);
        if !(self.sharpness_eps > 0.0 && self.sharpness_eps < max_eps) {
            return Err(invalid(format!("sharpness_eps must lie in (0, {max_eps})")));
        }
        Ok(())
    }

    /// Probability that `path` classifies correctly at latent difficulty `d`.
    pub fn correctness_probability(&self, path: &Path, difficulty: f64) -> f64 {
        let skill = self.alpha * path.len() as f64 + self.beta * path.mean_bits() - self.skill_offset;
        logistic(skill - difficulty)
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Deterministic synthetic dataset covering every path of `path_set`.
pub fn generate_synthetic(
    config: &SyntheticConfig,
    topology: &NetworkTopology,
    path_set: &PathSet,
) -> Result<SplitDataset> {
    config.validate()?;
    for p in path_set {
        topology.check_path(p)?;
    }
    let classes = config.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.num_samples);
    for i in 0..config.num_samples {
        let label = rng.random_range(0..classes);
        let z: f64 = rng.sample(StandardNormal);
        let difficulty = config.difficulty_scale * z;
        let mut probs = BTreeMap::new();
        for path in path_set {
            let q = config.correctness_probability(path, difficulty);
            let predicted = if rng.random::<f64>() < q {
                label
            } else {
                let wrong = rng.random_range(0..classes - 1);
                if wrong >= label { wrong + 1 } else { wrong }
            };
            probs.insert(path.clone(), probability_vector(config, q, predicted, &mut rng));
        }
        records.push(SampleRecord {
            id: format!("s{i:06}"),
            label,
            probs,
        });
    }
    let n = config.num_samples;
    let n_train = libm::round(n as f64 * config.train_fraction) as usize;
    let n_val = (libm::round(n as f64 * config.validation_fraction) as usize).min(n - n_train);
    let test = records.split_off(n_train + n_val);
    let validation = records.split_off(n_train);
    SplitDataset::new(records, validation, test, classes, path_set)
}

fn probability_vector(config: &SyntheticConfig, q: f64, predicted: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let classes = config.num_classes;
    let eps = config.sharpness_eps;
    let top = q.clamp(1.0 / classes as f64 + eps, 1.0 - eps);
    let mut weights: Vec<f64> = (0..classes)
        .map(|_| 1.0 + config.jitter * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    weights[predicted] = 0.0;
    let total: f64 = weights.iter().sum();
    let rest = 1.0 - top;
    let mut v: Vec<f64> = weights.iter().map(|w| rest * w / total).collect();
    if v.iter().any(|&x| x >= top) {
        // jitter must never move the argmax
        v.iter_mut().for_each(|x| *x = rest / (classes - 1) as f64);
    }
    v[predicted] = top;
    let sum: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= sum);
    v
}
