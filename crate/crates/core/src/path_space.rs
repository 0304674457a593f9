//! Paths through a multi-exit, multi-precision network and their BitOPS costs.
//!
//! A network has `E` exits. The segment between two consecutive exits is a
//! *block*, and every block can be executed at one of `B` bit-widths. A
//! [`Path`] assigns a bit-width to each traversed block and ends at the exit
//! after its last block, so it identifies one candidate classifier.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Number of exits, per-block FLOPS and the available bit-widths.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    block_flops: Vec<f64>,
    bit_widths: Vec<u32>,
}

impl NetworkTopology {
    /// `block_flops[l]` is the FLOPS of the block feeding exit `l + 1`.
    /// `bit_widths` must be strictly increasing.
    pub fn new(block_flops: Vec<f64>, bit_widths: Vec<u32>) -> Result<Self> {
        if block_flops.is_empty() {
            return Err(Error::Topology("at least one exit is required".into()));
        }
        if let Some(f) = block_flops.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
            return Err(Error::Topology(alloc::format!(
                "block FLOPS must be positive and finite, got {f}"
            )));
        }
        if bit_widths.is_empty() {
            return Err(Error::Topology("at least one bit-width is required".into()));
        }
        if bit_widths[0] == 0 {
            return Err(Error::Topology("bit-widths must be positive".into()));
        }
        if bit_widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Topology(
                "bit-widths must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            block_flops,
            bit_widths,
        })
    }

    /// Uniform FLOPS per block.
    pub fn uniform(num_exits: usize, bit_widths: Vec<u32>) -> Result<Self> {
        Self::new(alloc::vec![1.0; num_exits], bit_widths)
    }

    pub fn num_exits(&self) -> usize {
        self.block_flops.len()
    }

    pub fn block_flops(&self) -> &[f64] {
        &self.block_flops
    }

    pub fn bit_widths(&self) -> &[u32] {
        &self.bit_widths
    }

    pub fn max_bits(&self) -> u32 {
        *self.bit_widths.last().expect("validated nonempty")
    }

    /// The full-depth path at maximum precision; its cost normalizes all others.
    pub fn max_path(&self) -> Path {
        Path(alloc::vec![self.max_bits(); self.num_exits()])
    }

    /// Whether `path` fits this topology.
    pub fn check_path(&self, path: &Path) -> Result<()> {
        if path.len() > self.num_exits() {
            return Err(invalid(alloc::format!(
                "path {path} is longer than the {} available blocks",
                self.num_exits()
            )));
        }
        if let Some(b) = path.bits().iter().find(|b| !self.bit_widths.contains(b)) {
            return Err(invalid(alloc::format!(
                "path {path} uses unavailable bit-width {b}"
            )));
        }
        Ok(())
    }

    /// Unnormalized BitOPS: `sum_l FLOPS(l) * b_l` over the traversed blocks.
    pub fn path_bitops(&self, path: &Path) -> f64 {
        path.bits()
            .iter()
            .zip(&self.block_flops)
            .map(|(&b, &f)| f * f64::from(b))
            .sum()
    }

    /// BitOPS normalized by the full-depth, maximum-precision path; in `(0, 1]`.
    pub fn path_cost(&self, path: &Path) -> f64 {
        self.path_bitops(path) / self.path_bitops(&self.max_path())
    }
}

/// Free-function form of [`NetworkTopology::path_cost`].
pub fn path_cost(path: &Path, topology: &NetworkTopology) -> f64 {
    topology.path_cost(path)
}

/// Bit-width per traversed block. Never empty.
///
/// Ordering is canonical: shorter paths first, then lexicographically
/// *descending* bits, so `8 < 4 < 8-8 < 8-4 < 4-8 < 4-4`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Path(Vec<u32>);

impl Path {
    pub fn new(bits: Vec<u32>) -> Result<Self> {
        if bits.is_empty() {
            return Err(invalid("a path traverses at least one block"));
        }
        Ok(Self(bits))
    }

    pub fn bits(&self) -> &[u32] {
        &self.0
    }

    /// Number of traversed blocks (the exit depth).
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// First `n` steps, or `None` if `n` is zero or exceeds the length.
    pub fn prefix(&self, n: usize) -> Option<Path> {
        (n >= 1 && n <= self.len()).then(|| Path(self.0[..n].to_vec()))
    }

    pub fn extended(&self, bits: u32) -> Path {
        let mut v = self.0.clone();
        v.push(bits);
        Path(v)
    }

    pub fn starts_with(&self, prefix: &[u32]) -> bool {
        self.0.starts_with(prefix)
    }

    /// Bits never increase along the path.
    pub fn is_monotone(&self) -> bool {
        self.0.windows(2).all(|w| w[0] >= w[1])
    }

    /// Canonical text key, e.g. `"8-6-6"`.
    pub fn key(&self) -> String {
        let mut s = String::new();
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                s.push('-');
            }
            s.push_str(&alloc::format!("{b}"));
        }
        s
    }

    pub fn mean_bits(&self) -> f64 {
        self.0.iter().map(|&b| f64::from(b)).sum::<f64>() / self.len() as f64
    }
}

impl Ord for Path {
    fn cmp(&self, other: &Self) -> Ordering {
        self.len()
            .cmp(&other.len())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Path {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for Path {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .split('-')
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| invalid(alloc::format!("malformed path key `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Path::new(bits)
    }
}

/// Preference between two candidates with equal score: the cheaper one, and
/// on equal cost the lexicographically greater bit sequence.
/// `Ordering::Less` means `a` is preferred.
pub fn tie_break(cost_a: f64, a: &Path, cost_b: f64, b: &Path) -> Ordering {
    cost_a
        .total_cmp(&cost_b)
        .then_with(|| b.bits().cmp(a.bits()))
}

/// Deduplicated set of paths kept in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PathSet {
    paths: Vec<Path>,
}

impl PathSet {
    pub fn from_paths(mut paths: Vec<Path>) -> Self {
        paths.sort();
        paths.dedup();
        Self { paths }
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Path> {
        self.paths.iter()
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn contains(&self, path: &Path) -> bool {
        self.paths.binary_search(path).is_ok()
    }

    pub fn position(&self, path: &Path) -> Option<usize> {
        self.paths.binary_search(path).ok()
    }

    /// Keeps the paths whose bit sequence never increases.
    pub fn filter_monotone(&self) -> PathSet {
        Self {
            paths: self.paths.iter().filter(|p| p.is_monotone()).cloned().collect(),
        }
    }

    /// Caps the set at `cap` paths by seeded random sampling.
    ///
    /// Single-block paths and every prefix of the maximum-precision path are
    /// always kept so that each gate retains an exit option and the
    /// max-precision chain stays walkable. If those alone exceed `cap` they
    /// are returned as is. Other paths are visited in a seeded random order
    /// and each is taken together with its prefixes from `self` when they
    /// all fit, so routing never passes through a prefix that was dropped.
    pub fn sample_paths(&self, topology: &NetworkTopology, cap: usize, seed: u64) -> Result<PathSet> {
        if cap == 0 {
            return Err(invalid("path cap must be at least 1"));
        }
        if self.len() <= cap {
            return Ok(self.clone());
        }
        let max_path = topology.max_path();
        let (forced, rest): (Vec<&Path>, Vec<&Path>) = self
            .paths
            .iter()
            .partition(|p| p.len() == 1 || max_path.starts_with(p.bits()));
        let mut chosen: BTreeSet<Path> = forced.into_iter().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in index::sample(&mut rng, rest.len(), rest.len()) {
            if chosen.len() >= cap {
                break;
            }
            let p = rest[i];
            let missing: Vec<Path> = (1..=p.len())
                .filter_map(|n| p.prefix(n))
                .filter(|q| !chosen.contains(q) && self.contains(q))
                .collect();
            if chosen.len() + missing.len() <= cap {
                chosen.extend(missing);
            }
        }
        Ok(PathSet::from_paths(chosen.into_iter().collect()))
    }

    /// Complete paths starting with `prefix`, including `prefix` itself when
    /// it is a member (the exit-now option). An empty prefix returns the set.
    pub fn continuations(&self, prefix: &[u32]) -> PathSet {
        Self {
            paths: self.continuations_iter(prefix).cloned().collect(),
        }
    }

    pub fn continuations_iter<'a>(&'a self, prefix: &'a [u32]) -> impl Iterator<Item = &'a Path> + 'a {
        self.paths.iter().filter(move |p| p.starts_with(prefix))
    }

    pub fn max_len(&self) -> usize {
        self.paths.last().map_or(0, Path::len)
    }
}

impl<'a> IntoIterator for &'a PathSet {
    type Item = &'a Path;
    type IntoIter = core::slice::Iter<'a, Path>;

    fn into_iter(self) -> Self::IntoIter {
        self.paths.iter()
    }
}

/// Every path of length `1..=E` over the topology's bit-widths.
pub fn enumerate_paths(topology: &NetworkTopology) -> PathSet {
    let mut paths: Vec<Path> = Vec::new();
    let mut frontier: Vec<Vec<u32>> = alloc::vec![Vec::new()];
    for _ in 0..topology.num_exits() {
        let mut next = Vec::with_capacity(frontier.len() * topology.bit_widths().len());
        for prefix in &frontier {
            for &b in topology.bit_widths() {
                let mut p = prefix.clone();
                p.push(b);
                paths.push(Path(p.clone()));
                next.push(p);
            }
        }
        frontier = next;
    }
    PathSet::from_paths(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn p(bits: &[u32]) -> Path {
        Path::new(bits.to_vec()).unwrap()
    }

    fn two_exit() -> NetworkTopology {
        NetworkTopology::new(vec![100.0, 300.0], vec![4, 8]).unwrap()
    }

    #[test]
    fn enumerate_two_exits_two_widths() {
        let set = enumerate_paths(&two_exit());
        let expected = PathSet::from_paths(vec![p(&[4]), p(&[8]), p(&[4, 4]), p(&[4, 8]), p(&[8, 4]), p(&[8, 8])]);
        assert_eq!(set, expected);
        assert_eq!(set.len(), 6);
    }

    #[test]
    fn enumerate_single_classifier() {
        let t = NetworkTopology::uniform(1, vec![8]).unwrap();
        assert_eq!(enumerate_paths(&t).paths(), &[p(&[8])]);
    }

    #[test]
    fn enumerate_three_exits() {
        let t = NetworkTopology::uniform(3, vec![4, 8]).unwrap();
        let set = enumerate_paths(&t);
        assert_eq!(set.len(), 14);
        assert_eq!(set.filter_monotone().len(), 9);
    }

    #[test]
    fn canonical_order() {
        let set = enumerate_paths(&two_exit());
        let keys: Vec<String> = set.iter().map(Path::key).collect();
        assert_eq!(keys, ["8", "4", "8-8", "8-4", "4-8", "4-4"]);
    }

    #[test]
    fn monotone_filter() {
        let set = enumerate_paths(&two_exit()).filter_monotone();
        let expected = PathSet::from_paths(vec![p(&[4]), p(&[8]), p(&[4, 4]), p(&[8, 4]), p(&[8, 8])]);
        assert_eq!(set, expected);
        let singles = PathSet::from_paths(vec![p(&[4]), p(&[8])]);
        assert_eq!(singles.filter_monotone(), singles);
    }

    #[test]
    fn costs_hand_checked() {
        let t = two_exit();
        assert_eq!(t.path_cost(&p(&[8])), 0.25);
        assert_eq!(t.path_cost(&p(&[8, 8])), 1.0);
        assert_eq!(t.path_cost(&p(&[8, 4])), 0.625);
        assert_eq!(t.path_bitops(&p(&[8, 4])), 2000.0);
    }

    #[test]
    fn continuations_by_prefix() {
        let set = enumerate_paths(&two_exit()).filter_monotone();
        assert_eq!(
            set.continuations(&[8]),
            PathSet::from_paths(vec![p(&[8]), p(&[8, 4]), p(&[8, 8])])
        );
        assert_eq!(set.continuations(&[4]), PathSet::from_paths(vec![p(&[4]), p(&[4, 4])]));
        assert_eq!(set.continuations(&[]), set);
    }

    #[test]
    fn sampling_under_cap_is_identity() {
        let t = NetworkTopology::uniform(3, vec![4, 8]).unwrap();
        let set = enumerate_paths(&t).filter_monotone();
        assert_eq!(set.sample_paths(&t, 50, 1).unwrap(), set);
    }

    #[test]
    fn sampling_is_reproducible_and_keeps_forced_paths() {
        let t = NetworkTopology::uniform(3, vec![4, 8]).unwrap();
        let set = enumerate_paths(&t);
        let a = set.sample_paths(&t, 5, 42).unwrap();
        let b = set.sample_paths(&t, 5, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        for forced in [p(&[4]), p(&[8]), p(&[8, 8]), p(&[8, 8, 8])] {
            assert!(a.contains(&forced), "{forced} missing");
        }
        assert!(a.iter().all(|x| set.contains(x)));
    }

    #[test]
    fn sampled_set_is_prefix_closed() {
        let t = NetworkTopology::uniform(4, vec![2, 4, 8]).unwrap();
        let set = enumerate_paths(&t);
        for seed in 0..20 {
            let s = set.sample_paths(&t, 20, seed).unwrap();
            assert_eq!(s.len(), 20);
            for q in &s {
                for n in 1..q.len() {
                    assert!(s.contains(&q.prefix(n).unwrap()), "{q} kept without its prefix");
                }
            }
        }
    }

    #[test]
    fn sampling_rejects_zero_cap() {
        let t = two_exit();
        assert!(matches!(
            enumerate_paths(&t).sample_paths(&t, 0, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn key_round_trip() {
        let path = p(&[8, 6, 6]);
        assert_eq!(path.key(), "8-6-6");
        assert_eq!("8-6-6".parse::<Path>().unwrap(), path);
        assert!("8--6".parse::<Path>().is_err());
        assert!("".parse::<Path>().is_err());
    }

    #[test]
    fn topology_validation() {
        assert!(NetworkTopology::new(vec![], vec![8]).is_err());
        assert!(NetworkTopology::new(vec![1.0, 0.0], vec![8]).is_err());
        assert!(NetworkTopology::new(vec![1.0], vec![8, 4]).is_err());
        assert!(NetworkTopology::new(vec![1.0], vec![8, 8]).is_err());
        assert!(NetworkTopology::new(vec![1.0], vec![]).is_err());
        let t = two_exit();
        assert!(t.check_path(&p(&[8, 4])).is_ok());
        assert!(t.check_path(&p(&[8, 5])).is_err());
        assert!(t.check_path(&p(&[8, 4, 4])).is_err());
    }

    #[test]
    fn tie_break_prefers_cheaper_then_greater_bits() {
        assert_eq!(tie_break(0.1, &p(&[4]), 0.2, &p(&[8])), Ordering::Less);
        assert_eq!(tie_break(0.5, &p(&[8, 4]), 0.5, &p(&[4, 8])), Ordering::Less);
        assert_eq!(tie_break(0.5, &p(&[4, 8]), 0.5, &p(&[8, 4])), Ordering::Greater);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn topology() -> impl Strategy<Value = NetworkTopology> {
            (
                proptest::collection::vec(1.0f64..1000.0, 1..=5),
                proptest::collection::btree_set(1u32..16, 1..=4),
            )
                .prop_map(|(f, b)| NetworkTopology::new(f, b.into_iter().collect()).unwrap())
        }

        fn topology_and_path() -> impl Strategy<Value = (NetworkTopology, Path)> {
            topology().prop_flat_map(|t| {
                let widths = t.bit_widths().to_vec();
                let e = t.num_exits();
                let bits = proptest::collection::vec(proptest::sample::select(widths), 1..=e);
                (Just(t), bits.prop_map(|b| Path::new(b).unwrap()))
            })
        }

        proptest! {
            #[test]
            fn filter_is_idempotent(t in topology()) {
                let f = enumerate_paths(&t).filter_monotone();
                prop_assert!(f.iter().all(Path::is_monotone));
                prop_assert_eq!(f.filter_monotone(), f.clone());
            }

            #[test]
            fn cost_in_unit_interval((t, path) in topology_and_path()) {
                let c = t.path_cost(&path);
                prop_assert!(c > 0.0 && c <= 1.0);
                prop_assert_eq!(t.path_cost(&t.max_path()), 1.0);
            }

            #[test]
            fn continuations_partition((t, path) in topology_and_path()) {
                let set = enumerate_paths(&t).filter_monotone();
                let prefix = path.bits();
                let all = set.continuations(prefix);
                let mut union: Vec<Path> = Vec::new();
                if set.contains(&path) {
                    union.push(path.clone());
                }
                for &b in t.bit_widths() {
                    let ext = path.extended(b);
                    let part = set.continuations(ext.bits());
                    for q in &part {
                        prop_assert!(!union.contains(q));
                        union.push(q.clone());
                    }
                }
                prop_assert_eq!(PathSet::from_paths(union), all);
            }

            #[test]
            fn sampling_is_deterministic(t in topology(), cap in 1usize..20, seed in any::<u64>()) {
                let set = enumerate_paths(&t);
                prop_assert_eq!(set.sample_paths(&t, cap, seed).unwrap(), set.sample_paths(&t, cap, seed).unwrap());
            }
        }
    }
}
