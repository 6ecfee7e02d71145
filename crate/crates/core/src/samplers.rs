//! Query generators used to reconstruct a pseudo-dataset from a teacher.
//!
//! The oracle sampler replays the teacher's own training inputs, the random
//! samplers draw from the input space, and the mixed sampler combines
//! `100·m` oracle queries with `r·m` random ones.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DfrdError, Result};
use crate::rrf::{sample_random_rrf, top_k, RrfVector, ScoreVector};
use crate::seed;

/// A question sent to a teacher.
#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Rrf(RrfVector),
    /// Raw dense noise fed straight to the model input. Only produced by the
    /// naive sampler in its dense mode.
    Dense(ScoreVector),
}

impl Query {
    pub fn dim(&self) -> usize {
        match self {
            Query::Rrf(v) => v.dim(),
            Query::Dense(v) => v.len(),
        }
    }

    /// Model input for this query.
    pub fn to_input(&self) -> ScoreVector {
        match self {
            Query::Rrf(v) => crate::rrf::rrf_to_dense(v),
            Query::Dense(v) => v.clone(),
        }
    }

    pub fn as_rrf(&self) -> Option<&RrfVector> {
        match self {
            Query::Rrf(v) => Some(v),
            Query::Dense(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    Random,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuerySet {
    pub queries: Vec<Query>,
    pub provenance: Vec<Provenance>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn count(&self, tag: Provenance) -> usize {
        self.provenance.iter().filter(|&&p| p == tag).count()
    }

    pub(crate) fn push_all(&mut self, other: QuerySet) {
        self.queries.extend(other.queries);
        self.provenance.extend(other.provenance);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Oracle,
    NaiveRandom,
    RegularizedRandom,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomKind {
    Naive,
    Regularized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// Random queries per 100 oracle queries; mixed kind only.
    pub r: u32,
    pub random_kind: RandomKind,
    /// Naive sampler output: raw dense noise (`true`) or its RRF encoding.
    pub naive_dense: bool,
    pub seed: u64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            kind: SamplerKind::Oracle,
            r: 10,
            random_kind: RandomKind::Regularized,
            naive_dense: true,
            seed: 0,
        }
    }
}

impl SamplerSpec {
    pub fn oracle(seed: u64) -> Self {
        SamplerSpec {
            kind: SamplerKind::Oracle,
            seed,
            ..SamplerSpec::default()
        }
    }

    pub fn mixed(r: u32, random_kind: RandomKind, seed: u64) -> Self {
        SamplerSpec {
            kind: SamplerKind::Mixed,
            r,
            random_kind,
            seed,
            ..SamplerSpec::default()
        }
    }

    /// `r` as reported in result tables; zero for the pure kinds.
    pub fn effective_r(&self) -> u32 {
        match self.kind {
            SamplerKind::Mixed => self.r,
            _ => 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SamplerSpec {
            seed,
            ..self.clone()
        }
    }
}

/// Mixing ratios `10·2^i` for `i = 0..=10`.
pub fn default_r_list() -> Vec<u32> {
    (0..=10).map(|i| 10 << i).collect()
}

/// Uniform draws with replacement from `pool`.
pub fn oracle_sample<R: Rng + ?Sized>(pool: &[Query], count: usize, rng: &mut R) -> Result<QuerySet> {
    if pool.is_empty() {
        return Err(DfrdError::invalid("oracle pool is empty"));
    }
    let queries = (0..count)
        .map(|_| pool[rng.random_range(0..pool.len())].clone())
        .collect();
    Ok(QuerySet {
        queries,
        provenance: vec![Provenance::Oracle; count],
    })
}

/// Dense i.i.d. uniform noise; RRF-encoded with `k` unless `dense`.
pub fn naive_random_sample<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    count: usize,
    dense: bool,
    rng: &mut R,
) -> Result<QuerySet> {
    if n == 0 || k == 0 {
        return Err(DfrdError::invalid("N and k must be at least 1"));
    }
    let queries = (0..count)
        .map(|_| {
            let noise: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            if dense {
                Query::Dense(ScoreVector::from_trusted(noise))
            } else {
                Query::Rrf(top_k(&noise, k))
            }
        })
        .collect();
    Ok(QuerySet {
        queries,
        provenance: vec![Provenance::Random; count],
    })
}

pub fn regularized_random_sample<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    count: usize,
    rng: &mut R,
) -> Result<QuerySet> {
    let queries = (0..count)
        .map(|_| sample_random_rrf(n, k, rng).map(Query::Rrf))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuerySet {
        queries,
        provenance: vec![Provenance::Random; count],
    })
}

/// Builds the queries for one teacher encounter. `base_count` must be a
/// positive multiple of 100; with `m = base_count / 100` the mixed kind
/// yields `100·m` oracle plus `r·m` random queries in seeded shuffled order.
pub fn build_query_set(
    oracle_pool: &[Query],
    spec: &SamplerSpec,
    base_count: usize,
    n_dim: usize,
    k: usize,
) -> Result<QuerySet> {
    if base_count == 0 || !base_count.is_multiple_of(100) {
        return Err(DfrdError::invalid(format!(
            "base_count must be a positive multiple of 100, got {base_count}"
        )));
    }
    let m = base_count / 100;
    let mut rng = seed::rng(spec.seed);
    let random = |count: usize, rng: &mut seed::SimRng| match spec.random_kind {
        RandomKind::Regularized => regularized_random_sample(n_dim, k, count, rng),
        RandomKind::Naive => naive_random_sample(n_dim, k, count, spec.naive_dense, rng),
    };
    match spec.kind {
        SamplerKind::Oracle => oracle_sample(oracle_pool, base_count, &mut rng),
        SamplerKind::RegularizedRandom => regularized_random_sample(n_dim, k, base_count, &mut rng),
        SamplerKind::NaiveRandom => {
            naive_random_sample(n_dim, k, base_count, spec.naive_dense, &mut rng)
        }
        SamplerKind::Mixed => {
            let mut set = oracle_sample(oracle_pool, 100 * m, &mut rng)?;
            set.push_all(random(spec.r as usize * m, &mut rng)?);
            let mut pairs: Vec<(Query, Provenance)> =
                set.queries.into_iter().zip(set.provenance).collect();
            pairs.shuffle(&mut rng);
            let (queries, provenance) = pairs.into_iter().unzip();
            Ok(QuerySet {
                queries,
                provenance,
            })
        }
    }
}
