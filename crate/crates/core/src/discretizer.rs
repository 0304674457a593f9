//! Clustered empirical-error targets.
//!
//! For each path the predicted probability vectors of the fitting records are
//! clustered with k-means. Each cluster's *delegate* is the fraction of its
//! members the path misclassifies; a new vector is mapped to the delegate of
//! its nearest centroid.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::SampleRecord;
use crate::error::{invalid, Result};
use crate::path_space::{Path, PathSet};

/// Independent k-means restarts; the lowest-inertia run wins.
pub const RESTARTS: usize = 10;
pub const MAX_ITERATIONS: usize = 300;
/// Lloyd stops once no centroid moves farther than this (Euclidean).
pub const SHIFT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_ECE_BINS: usize = 15;

/// Result of one k-means run over `n` points of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub dim: usize,
    /// `k * dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance, lowest index on ties.
fn nearest(point: &[f64], centroids: &[f64], dim: usize, allowed: Option<&[bool]>) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        if allowed.is_some_and(|a| !a[c]) {
            continue;
        }
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first centroid uniform, then proportional to the
/// squared distance to the closest chosen centroid.
fn seed_centroids(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut closest: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let new = &points[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(new);
        for (c, p) in closest.iter_mut().zip(points.chunks_exact(dim)) {
            *c = c.min(sq_dist(p, new));
        }
    }
    centroids
}

/// Lloyd iterations from the given centroids. Empty clusters keep their centroid.
pub fn lloyd(points: &[f64], dim: usize, mut centroids: Vec<f64>, max_iterations: usize, tolerance: f64) -> KMeansRun {
    let k = centroids.len() / dim;
    let n = points.len() / dim;
    let mut assignments = alloc::vec![0usize; n];
    let mut history = Vec::new();
    for _ in 0..max_iterations {
        let mut inertia = 0.0;
        for (a, p) in assignments.iter_mut().zip(points.chunks_exact(dim)) {
            let (c, d) = nearest(p, &centroids, dim, None);
            *a = c;
            inertia += d;
        }
        history.push(inertia);

        let mut sums = alloc::vec![0.0; k * dim];
        let mut counts = alloc::vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points.chunks_exact(dim)) {
            counts[a] += 1;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut max_shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let slot = &mut centroids[c * dim..(c + 1) * dim];
            let mut shift = 0.0;
            for (x, s) in slot.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                let new = s / counts[c] as f64;
                shift += (new - *x) * (new - *x);
                *x = new;
            }
            max_shift = max_shift.max(libm::sqrt(shift));
        }
        if max_shift < tolerance {
            break;
        }
    }
    // final assignment against the last centroids
    let mut inertia = 0.0;
    for (a, p) in assignments.iter_mut().zip(points.chunks_exact(dim)) {
        let (c, d) = nearest(p, &centroids, dim, None);
        *a = c;
        inertia += d;
    }
    history.push(inertia);
    KMeansRun {
        dim,
        centroids,
        assignments,
        inertia,
        inertia_history: history,
    }
}

/// Best of `restarts` seeded k-means++ / Lloyd runs.
pub fn kmeans(points: &[f64], dim: usize, k: usize, restarts: usize, seed: u64) -> Result<KMeansRun> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(invalid("point buffer does not match the dimension"));
    }
    let n = points.len() / dim;
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if k > n {
        return Err(invalid(format!("K = {k} exceeds the {n} fitting samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansRun> = None;
    for _ in 0..restarts.max(1) {
        let init = seed_centroids(points, dim, k, &mut rng);
        let run = lloyd(points, dim, init, MAX_ITERATIONS, SHIFT_TOLERANCE);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Clusters and delegates of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathClusterModel {
    pub path: Path,
    pub centroids: Vec<Vec<f64>>,
    /// Per-cluster error rate of the fitting members.
    pub delegates: Vec<f64>,
    pub member_counts: Vec<usize>,
    /// Error rate over all fitting samples; also the delegate of empty clusters.
    pub fallback_delegate: f64,
}

impl PathClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest non-empty cluster, lowest index on ties.
    pub fn assign(&self, probs: &[f64]) -> usize {
        let mut best = (usize::MAX, f64::INFINITY);
        for (c, centroid) in self.centroids.iter().enumerate() {
            if self.member_counts[c] == 0 {
                continue;
            }
            let d = sq_dist(probs, centroid);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }

    pub fn target(&self, probs: &[f64]) -> f64 {
        match self.assign(probs) {
            usize::MAX => self.fallback_delegate,
            c => self.delegates[c],
        }
    }

    /// `sum_Q m_Q * delegate_Q / sum_Q m_Q`; equals the global error rate.
    pub fn weighted_delegate_mean(&self) -> f64 {
        let n: usize = self.member_counts.iter().sum();
        self.delegates
            .iter()
            .zip(&self.member_counts)
            .map(|(d, &m)| d * m as f64)
            .sum::<f64>()
            / n as f64
    }
}

/// Per-path cluster models over an active path set.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizerModel {
    pub k: usize,
    pub seed: u64,
    pub paths: BTreeMap<Path, PathClusterModel>,
}

fn path_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fits one k-means model per path on `records`.
pub fn fit(records: &[SampleRecord], path_set: &PathSet, k: usize, seed: u64) -> Result<DiscretizerModel> {
    if records.is_empty() {
        return Err(invalid("cannot fit the discretizer on zero records"));
    }
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if k > records.len() {
        return Err(invalid(format!(
            "K = {k} exceeds the {} fitting samples",
            records.len()
        )));
    }
    let mut paths = BTreeMap::new();
    for (index, path) in path_set.iter().enumerate() {
        let first = records[0].probs_for(path)?;
        let dim = first.len();
        let mut points = Vec::with_capacity(records.len() * dim);
        let mut wrong = Vec::with_capacity(records.len());
        for r in records {
            let v = r.probs_for(path)?;
            if v.len() != dim {
                return Err(invalid(format!("record `{}` has a mismatched vector length", r.id)));
            }
            points.extend_from_slice(v);
            wrong.push(!r.is_correct(path)?);
        }
        let run = kmeans(&points, dim, k, RESTARTS, path_seed(seed, index))?;
        let mut member_counts = alloc::vec![0usize; k];
        let mut errors = alloc::vec![0usize; k];
        for (&a, &w) in run.assignments.iter().zip(&wrong) {
            member_counts[a] += 1;
            errors[a] += usize::from(w);
        }
        let fallback = wrong.iter().filter(|&&w| w).count() as f64 / records.len() as f64;
        let delegates = member_counts
            .iter()
            .zip(&errors)
            .map(|(&m, &e)| if m == 0 { fallback } else { e as f64 / m as f64 })
            .collect();
        paths.insert(
            path.clone(),
            PathClusterModel {
                path: path.clone(),
                centroids: run.centroids.chunks_exact(dim).map(<[f64]>::to_vec).collect(),
                delegates,
                member_counts,
                fallback_delegate: fallback,
            },
        );
    }
    Ok(DiscretizerModel { k, seed, paths })
}

impl DiscretizerModel {
    pub fn path_model(&self, path: &Path) -> Result<&PathClusterModel> {
        self.paths
            .get(path)
            .ok_or_else(|| invalid(format!("discretizer has no model for path {path}")))
    }

    /// Delegate of the nearest centroid: the clustered error target.
    pub fn assign_target(&self, path: &Path, probs: &[f64]) -> Result<f64> {
        Ok(self.path_model(path)?.target(probs))
    }

    /// Replaces every delegate by `f(path, cluster, delegate)`, clipped to `[0, 1]`.
    pub fn map_delegates(&self, mut f: impl FnMut(&Path, usize, f64) -> f64) -> DiscretizerModel {
        let mut out = self.clone();
        for (path, m) in out.paths.iter_mut() {
            for (c, d) in m.delegates.iter_mut().enumerate() {
                *d = f(path, c, *d).clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Free-function form of [`DiscretizerModel::assign_target`].
pub fn assign_target(model: &DiscretizerModel, path: &Path, probs: &[f64]) -> Result<f64> {
    model.assign_target(path, probs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EceReport {
    /// Unweighted mean of the per-path values.
    pub overall: f64,
    pub per_path: Vec<(Path, f64)>,
}

/// Expected calibration error of `1 - delegate` as a correctness probability.
///
/// Per path, the approximated probabilities are sorted ascending (stable) and
/// cut into `num_bins` equal-count bins, the first `n mod num_bins` bins taking
/// one extra sample. `ECE_path = sum_b |B_b|/n * |acc(B_b) - mean p(B_b)|`.
pub fn compute_ece(model: &DiscretizerModel, records: &[SampleRecord], path_set: &PathSet, num_bins: usize) -> Result<EceReport> {
    if num_bins == 0 {
        return Err(invalid("at least one bin is required"));
    }
    if records.len() < num_bins {
        return Err(invalid(format!(
            "{} test samples cannot fill {num_bins} bins",
            records.len()
        )));
    }
    if path_set.is_empty() {
        return Err(invalid("empty path set"));
    }
    let n = records.len();
    let mut per_path = Vec::with_capacity(path_set.len());
    for path in path_set {
        let m = model.path_model(path)?;
        let mut scored: Vec<(f64, bool)> = Vec::with_capacity(n);
        for r in records {
            let v = r.probs_for(path)?;
            scored.push((1.0 - m.target(v), r.is_correct(path)?));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        let base = n / num_bins;
        let extra = n % num_bins;
        let mut start = 0;
        let mut ece = 0.0;
        for b in 0..num_bins {
            let size = base + usize::from(b < extra);
            let bin = &scored[start..start + size];
            start += size;
            let conf = bin.iter().map(|s| s.0).sum::<f64>() / size as f64;
            let acc = bin.iter().filter(|s| s.1).count() as f64 / size as f64;
            ece += size as f64 / n as f64 * (acc - conf).abs();
        }
        per_path.push((path.clone(), ece));
    }
    let overall = per_path.iter().map(|p| p.1).sum::<f64>() / per_path.len() as f64;
    Ok(EceReport { overall, per_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn path(s: &str) -> Path {
        s.parse().unwrap()
    }

    fn rec(i: usize, label: usize, v: Vec<f64>) -> SampleRecord {
        let mut probs = BTreeMap::new();
        probs.insert(path("8"), v);
        SampleRecord {
            id: alloc::format!("r{i}"),
            label,
            probs,
        }
    }

    fn singleton() -> PathSet {
        PathSet::from_paths(vec![path("8")])
    }

    #[test]
    fn k_one_delegate_is_global_error() {
        let recs = vec![
            rec(0, 0, vec![0.9, 0.1]),
            rec(1, 0, vec![0.3, 0.7]),
            rec(2, 1, vec![0.2, 0.8]),
            rec(3, 1, vec![0.6, 0.4]),
        ];
        let m = fit(&recs, &singleton(), 1, 0).unwrap();
        let pm = m.path_model(&path("8")).unwrap();
        assert_eq!(pm.delegates, vec![0.5]);
        assert_eq!(pm.fallback_delegate, 0.5);
        assert_eq!(m.assign_target(&path("8"), &[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(m.assign_target(&path("8"), &[0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn separated_point_masses() {
        let recs = vec![
            rec(0, 0, vec![1.0, 0.0]),
            rec(1, 0, vec![1.0, 0.0]),
            rec(2, 0, vec![0.0, 1.0]),
            rec(3, 1, vec![0.0, 1.0]),
        ];
        let m = fit(&recs, &singleton(), 2, 7).unwrap();
        let pm = m.path_model(&path("8")).unwrap();
        let mut cs = pm.centroids.clone();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(m.assign_target(&path("8"), &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(m.assign_target(&path("8"), &[0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn toy_delegates_match_member_recount() {
        // two well-separated groups of four; errors: 1 of 4 and 3 of 4
        let recs = vec![
            rec(0, 0, vec![0.95, 0.05]),
            rec(1, 0, vec![0.9, 0.1]),
            rec(2, 0, vec![0.92, 0.08]),
            rec(3, 1, vec![0.97, 0.03]),
            rec(4, 1, vec![0.1, 0.9]),
            rec(5, 0, vec![0.2, 0.8]),
            rec(6, 0, vec![0.15, 0.85]),
            rec(7, 0, vec![0.05, 0.95]),
        ];
        let m = fit(&recs, &singleton(), 2, 3).unwrap();
        let pm = m.path_model(&path("8")).unwrap();
        let high = pm.assign(&[0.95, 0.05]);
        let low = pm.assign(&[0.1, 0.9]);
        assert_ne!(high, low);
        assert_eq!(pm.delegates[high], 0.25);
        assert_eq!(pm.delegates[low], 0.75);
        assert_eq!(pm.member_counts[high], 4);
        assert_eq!(pm.weighted_delegate_mean(), 0.5);
    }

    #[test]
    fn k_larger_than_samples_rejected() {
        let recs = vec![rec(0, 0, vec![1.0, 0.0])];
        assert!(fit(&recs, &singleton(), 2, 0).is_err());
        assert!(fit(&recs, &singleton(), 0, 0).is_err());
    }

    fn manual_model(centroids: Vec<Vec<f64>>, delegates: Vec<f64>, counts: Vec<usize>) -> DiscretizerModel {
        let mut paths = BTreeMap::new();
        paths.insert(
            path("8"),
            PathClusterModel {
                path: path("8"),
                centroids,
                delegates,
                member_counts: counts,
                fallback_delegate: 0.4,
            },
        );
        DiscretizerModel { k: 2, seed: 0, paths }
    }

    #[test]
    fn assignment_rules() {
        let m = manual_model(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.1, 0.7], vec![3, 5]);
        assert_eq!(m.assign_target(&path("8"), &[1.0, 0.0]).unwrap(), 0.1);
        assert_eq!(m.assign_target(&path("8"), &[0.5, 0.5]).unwrap(), 0.1);
        assert!(m.assign_target(&path("4"), &[0.5, 0.5]).unwrap_err().to_string().contains("4"));
        let empty = manual_model(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.4, 0.7], vec![0, 5]);
        assert_eq!(empty.assign_target(&path("8"), &[1.0, 0.0]).unwrap(), 0.7);
    }

    #[test]
    fn ece_zero_when_delegates_match_bins() {
        // [1,0] is always right (delegate 0), [0,1] always wrong (delegate 1)
        let m = manual_model(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 1.0], vec![1, 1]);
        let recs: Vec<SampleRecord> = (0..30)
            .map(|i| if i % 3 == 0 { rec(i, 0, vec![0.0, 1.0]) } else { rec(i, 0, vec![1.0, 0.0]) })
            .collect();
        let e = compute_ece(&m, &recs, &singleton(), 15).unwrap();
        assert_eq!(e.overall, 0.0);
    }

    #[test]
    fn ece_errors() {
        let m = manual_model(vec![vec![1.0, 0.0]], vec![0.0], vec![1]);
        let recs: Vec<SampleRecord> = (0..14).map(|i| rec(i, 0, vec![1.0, 0.0])).collect();
        assert!(compute_ece(&m, &recs, &singleton(), 15).is_err());
        let recs: Vec<SampleRecord> = (0..15).map(|i| rec(i, 0, vec![1.0, 0.0])).collect();
        assert_eq!(compute_ece(&m, &recs, &singleton(), 15).unwrap().overall, 0.0);
    }

    #[test]
    fn lloyd_keeps_empty_cluster_centroid() {
        let points = [0.0, 0.0, 0.1, 0.0];
        let run = lloyd(&points, 2, vec![0.0, 0.0, 5.0, 5.0], 10, 1e-9);
        assert_eq!(&run.centroids[2..], &[5.0, 5.0]);
        assert_eq!(run.assignments, vec![0, 0]);
    }
}
