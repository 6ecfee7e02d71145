//! Rank and reciprocal-rank-feature (RRF) encodings.
//!
//! An RRF vector keeps the `k` best-ranked indices of an `N`-dimensional
//! score map. The index at position `p` (1-based) carries the implied value
//! `1/p`; every other coordinate is zero. RRF vectors are the common input
//! format of every teacher and student model and the payload of every query.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{DfrdError, Result};

/// Default number of retained ranks.
pub const DEFAULT_K: usize = 10;

/// Dense vector of finite scores (or probabilities).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DfrdError::invalid("score vector is empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DfrdError::invalid(format!(
                "score vector has non-finite value at index {i}"
            )));
        }
        Ok(ScoreVector(values))
    }

    /// Wraps values the caller already knows to be nonempty and finite.
    pub(crate) fn from_trusted(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty() && values.iter().all(|v| v.is_finite()));
        ScoreVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Smallest index attaining the maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Ranks of `N` items; `ranks[i]` is the 1-based rank of index `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankVector(Vec<u32>);

impl RankVector {
    /// Validates that `ranks` is a permutation of `1..=N`.
    pub fn new(ranks: Vec<u32>) -> Result<Self> {
        let n = ranks.len();
        if n == 0 {
            return Err(DfrdError::invalid("rank vector is empty"));
        }
        let mut seen = vec![false; n];
        for &r in &ranks {
            let r = r as usize;
            if r == 0 || r > n || seen[r - 1] {
                return Err(DfrdError::invalid("ranks are not a permutation of 1..=N"));
            }
            seen[r - 1] = true;
        }
        Ok(RankVector(ranks))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    /// Indices ordered best rank first.
    pub fn order(&self) -> Vec<usize> {
        let mut order = vec![0usize; self.0.len()];
        for (i, &r) in self.0.iter().enumerate() {
            order[r as usize - 1] = i;
        }
        order
    }

    /// Index holding rank 1.
    pub fn top1(&self) -> usize {
        self.0
            .iter()
            .position(|&r| r == 1)
            .expect("rank vector invariant: rank 1 present")
    }
}

/// Sparse k-hot reciprocal-rank encoding over `dim` coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RrfVector {
    dim: usize,
    k: usize,
    entries: Vec<u32>,
}

impl RrfVector {
    /// `entries` lists indices best-first and must hold exactly `min(k, dim)`
    /// distinct indices below `dim`.
    pub fn new(dim: usize, k: usize, entries: Vec<u32>) -> Result<Self> {
        if dim == 0 || k == 0 {
            return Err(DfrdError::invalid("RRF dim and k must be at least 1"));
        }
        if entries.len() != k.min(dim) {
            return Err(DfrdError::invalid(format!(
                "RRF vector needs {} entries, got {}",
                k.min(dim),
                entries.len()
            )));
        }
        check_indices(dim, &entries)?;
        Ok(RrfVector { dim, k, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Indices, best rank first.
    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    /// `(index, 1/p)` pairs in rank order.
    pub fn weighted(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(p, &i)| (i as usize, 1.0 / (p + 1) as f64))
    }

    /// Encodes the top `k` of a score map; same as `rrf_encode(&rank_of(s), k)`.
    pub fn from_scores(scores: &ScoreVector, k: usize) -> Result<Self> {
        rrf_encode(&rank_of(scores)?, k)
    }
}

/// Checks that indices are distinct and below `dim`.
pub(crate) fn check_indices(dim: usize, entries: &[u32]) -> Result<()> {
    let mut seen = vec![false; dim];
    for &i in entries {
        let i = i as usize;
        if i >= dim {
            return Err(DfrdError::invalid(format!("index {i} out of range for dim {dim}")));
        }
        if seen[i] {
            return Err(DfrdError::invalid(format!("duplicate index {i}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// A place-class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OneHotLabel(pub usize);

impl OneHotLabel {
    pub fn class_id(self) -> usize {
        self.0
    }

    pub fn checked(class_id: usize, n_classes: usize) -> Result<Self> {
        if class_id >= n_classes {
            return Err(DfrdError::invalid(format!(
                "class id {class_id} out of range for {n_classes} classes"
            )));
        }
        Ok(OneHotLabel(class_id))
    }
}

fn descending(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Ranks scores in descending order; ties go to the lower index.
pub fn rank_of(scores: &ScoreVector) -> Result<RankVector> {
    let s = scores.as_slice();
    if s.is_empty() {
        return Err(DfrdError::invalid("score vector is empty"));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(DfrdError::invalid("score vector has non-finite values"));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(descending(s));
    let mut ranks = vec![0u32; s.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos as u32 + 1;
    }
    Ok(RankVector(ranks))
}

/// Keeps the indices with ranks `1..=min(k, N)`, best first.
pub fn rrf_encode(ranks: &RankVector, k: usize) -> Result<RrfVector> {
    if k == 0 {
        return Err(DfrdError::invalid("k must be at least 1"));
    }
    let n = ranks.len();
    let mut order = ranks.order();
    order.truncate(k.min(n));
    Ok(RrfVector {
        dim: n,
        k,
        entries: order.into_iter().map(|i| i as u32).collect(),
    })
}

/// The rank-1 index of an RRF vector.
pub fn onehot_from_rrf(v: &RrfVector) -> Result<OneHotLabel> {
    v.entries
        .first()
        .map(|&i| OneHotLabel(i as usize))
        .ok_or_else(|| DfrdError::invalid("RRF vector has no entries"))
}

/// Top-`k` indices of `n` i.i.d. uniform [0,1) noise values.
pub fn sample_random_rrf<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<RrfVector> {
    if k == 0 || n == 0 {
        return Err(DfrdError::invalid("N and k must be at least 1"));
    }
    if k > n {
        return Err(DfrdError::invalid(format!("k={k} exceeds N={n}")));
    }
    let noise: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Ok(top_k(&noise, k))
}

/// Top-`k` encoding of raw finite scores without building the full rank
/// vector. Agrees with `rrf_encode(rank_of(s), k)` including tie-breaks.
pub(crate) fn top_k(scores: &[f64], k: usize) -> RrfVector {
    let n = scores.len();
    let keep = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let cmp = descending(scores);
    if keep < n {
        idx.select_nth_unstable_by(keep - 1, &cmp);
        idx.truncate(keep);
    }
    idx.sort_by(&cmp);
    RrfVector {
        dim: n,
        k,
        entries: idx.into_iter().map(|i| i as u32).collect(),
    }
}

/// Dense expansion: `1/p` at the index in position `p`, zero elsewhere.
pub fn rrf_to_dense(v: &RrfVector) -> ScoreVector {
    let mut out = vec![0.0; v.dim];
    for (i, w) in v.weighted() {
        out[i] = w;
    }
    ScoreVector(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of(&sv(&[0.5, 0.2, 0.9])).unwrap().as_slice(), &[2, 3, 1]);
        assert_eq!(rank_of(&sv(&[0.7, 0.7])).unwrap().as_slice(), &[1, 2]);
        assert_eq!(rank_of(&sv(&[3.0])).unwrap().as_slice(), &[1]);
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(ScoreVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ScoreVector::new(vec![f64::INFINITY]).is_err());
        assert!(ScoreVector::new(vec![]).is_err());
    }

    #[test]
    fn encode_examples() {
        let r = RankVector::new(vec![2, 3, 1]).unwrap();
        let v = rrf_encode(&r, 2).unwrap();
        assert_eq!(v.entries(), &[2, 0]);
        let w: Vec<f64> = v.weighted().map(|(_, w)| w).collect();
        assert_eq!(w, vec![1.0, 0.5]);

        let full = rrf_encode(&r, 7).unwrap();
        assert_eq!(full.entries(), &[2, 0, 1]);
        assert_eq!(full.k(), 7);
    }

    #[test]
    fn encode_hundred_dim_is_ten_hot() {
        let mut rng = seed::rng(3);
        let s: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let v = RrfVector::from_scores(&sv(&s), DEFAULT_K).unwrap();
        assert_eq!(v.entries().len(), 10);
        let dense = rrf_to_dense(&v);
        let mut nz: Vec<f64> = dense.as_slice().iter().copied().filter(|&x| x > 0.0).collect();
        nz.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let expected: Vec<f64> = (1..=10).map(|p| 1.0 / p as f64).collect();
        assert_eq!(nz, expected);
    }

    #[test]
    fn onehot_examples() {
        let v = RrfVector::new(10, 3, vec![7, 3, 0]).unwrap();
        assert_eq!(onehot_from_rrf(&v).unwrap(), OneHotLabel(7));
        let v = RrfVector::new(1, 1, vec![0]).unwrap();
        assert_eq!(onehot_from_rrf(&v).unwrap(), OneHotLabel(0));
    }

    #[test]
    fn rrf_vector_invariants_enforced() {
        assert!(RrfVector::new(4, 2, vec![1, 1]).is_err());
        assert!(RrfVector::new(4, 2, vec![1, 4]).is_err());
        assert!(RrfVector::new(4, 2, vec![1]).is_err());
        assert!(RrfVector::new(4, 2, vec![]).is_err());
        assert!(RrfVector::new(2, 5, vec![1, 0]).is_ok());
    }

    #[test]
    fn dense_expansion() {
        let v = RrfVector::new(4, 2, vec![2, 0]).unwrap();
        assert_eq!(rrf_to_dense(&v).as_slice(), &[0.5, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn dense_roundtrip_recovers_entries() {
        let v = RrfVector::new(6, 3, vec![4, 1, 5]).unwrap();
        let back = RrfVector::from_scores(&rrf_to_dense(&v), 3).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn random_rrf_shapes() {
        let mut rng = seed::rng(11);
        let v = sample_random_rrf(100, 10, &mut rng).unwrap();
        assert_eq!(v.entries().len(), 10);
        check_indices(100, v.entries()).unwrap();
        for _ in 0..20 {
            assert_eq!(sample_random_rrf(1, 1, &mut rng).unwrap().entries(), &[0]);
        }
        assert!(sample_random_rrf(3, 4, &mut rng).is_err());
    }

    #[test]
    fn random_rrf_is_reproducible() {
        let a = sample_random_rrf(50, 10, &mut seed::rng(5)).unwrap();
        let b = sample_random_rrf(50, 10, &mut seed::rng(5)).unwrap();
        assert_eq!(a, b);
    }

    // Oracle: i.i.d. continuous noise is exchangeable, so each of the N
    // indices is the maximum with probability exactly 1/N.
    #[test]
    fn random_rrf_top_index_is_uniform() {
        let mut rng = seed::rng(2024);
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let v = sample_random_rrf(10, 1, &mut rng).unwrap();
            counts[v.entries()[0] as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.1).abs() <= 0.01, "frequency {f}");
        }
    }

    #[test]
    fn top_k_matches_full_ranking_with_ties() {
        let s = [0.3, 0.9, 0.3, 0.9, 0.1, 0.3];
        for k in 1..=6 {
            let fast = top_k(&s, k);
            let slow = RrfVector::from_scores(&sv(&s), k).unwrap();
            assert_eq!(fast, slow, "k={k}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scores() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-5.0f64..5.0, 1..40)
        }

        proptest! {
            #[test]
            fn ranks_are_a_permutation(s in scores()) {
                let r = rank_of(&sv(&s)).unwrap();
                let mut sorted = r.as_slice().to_vec();
                sorted.sort_unstable();
                let expected: Vec<u32> = (1..=s.len() as u32).collect();
                prop_assert_eq!(sorted, expected);
            }

            #[test]
            fn argmax_is_preserved(s in scores(), k in 1usize..12) {
                let v = RrfVector::from_scores(&sv(&s), k).unwrap();
                prop_assert_eq!(onehot_from_rrf(&v).unwrap().0, sv(&s).argmax());
                prop_assert_eq!(v.entries().len(), k.min(s.len()));
            }

            #[test]
            fn encode_is_idempotent_on_support(s in scores(), k in 1usize..12) {
                let v = RrfVector::from_scores(&sv(&s), k).unwrap();
                let again = RrfVector::from_scores(&rrf_to_dense(&v), v.entries().len()).unwrap();
                prop_assert_eq!(again.entries(), v.entries());
            }
        }
    }
}
