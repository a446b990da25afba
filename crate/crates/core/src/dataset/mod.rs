//! Candidate sets, ground-truth ranking, splitting and dataset files.

mod io;
mod synthetic;

pub use io::{
    candidate_set_from_json, candidate_set_to_json, read_candidate_set, read_dataset, read_split, write_dataset, write_split, SplitManifest,
    DATASET_FORMAT_VERSION,
};
pub use synthetic::{generate_shifted_queries, generate_synthetic_workload, oracle_latency_ms, WorkloadConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::plan_ir::PlanTree;

/// Largest candidate list the ranker accepts.
pub const MAX_PLANS: usize = 32;

/// One query's candidate plans with measured latencies and ground-truth ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    query_id: String,
    plans: Vec<PlanTree>,
    latency_runs_ms: Vec<Vec<f64>>,
    mean_latency_ms: Vec<f64>,
    true_ranks: Vec<usize>,
    cbo_index: usize,
}

impl CandidateSet {
    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn plans(&self) -> &[PlanTree] {
        &self.plans
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn latency_runs_ms(&self) -> &[Vec<f64>] {
        &self.latency_runs_ms
    }

    pub fn mean_latency_ms(&self) -> &[f64] {
        &self.mean_latency_ms
    }

    /// 1-based rank per plan; 1 is fastest.
    pub fn true_ranks(&self) -> &[usize] {
        &self.true_ranks
    }

    pub fn cbo_index(&self) -> usize {
        self.cbo_index
    }

    /// Index of the plan with true rank 1.
    pub fn best_index(&self) -> usize {
        self.true_ranks.iter().position(|&r| r == 1).expect("ranks are a permutation")
    }

    pub fn index_of(&self, plan_id: &str) -> Option<usize> {
        self.plans.iter().position(|p| p.plan_id() == plan_id)
    }

    /// Reorders plans so that new position `i` holds old plan `order[i]`.
    /// Ranks are recomputed, so exact latency ties may resolve differently.
    pub fn permuted(&self, order: &[usize]) -> Result<CandidateSet> {
        let n = self.len();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::LengthMismatch(format!("{order:?} is not a permutation of 0..{n}")));
        }
        let cbo = order.iter().position(|&i| i == self.cbo_index).expect("permutation");
        ingest_measurements(
            self.query_id.clone(),
            order.iter().map(|&i| self.plans[i].clone()).collect(),
            order.iter().map(|&i| self.latency_runs_ms[i].clone()).collect(),
            cbo,
        )
    }
}

/// Per-plan mean latency and 1-based ranks by ascending mean; exact ties
/// go to the lower plan index.
pub fn organize_ranking(latency_runs_ms: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut means = Vec::with_capacity(latency_runs_ms.len());
    for (i, runs) in latency_runs_ms.iter().enumerate() {
        if runs.is_empty() {
            return Err(Error::EmptyRuns(i));
        }
        if runs.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFiniteLatency(i));
        }
        means.push(runs.iter().sum::<f64>() / runs.len() as f64);
    }
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; means.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    Ok((means, ranks))
}

/// Builds a validated candidate set from externally measured latencies.
pub fn ingest_measurements(
    query_id: impl Into<String>,
    plans: Vec<PlanTree>,
    latency_runs_ms: Vec<Vec<f64>>,
    cbo_index: usize,
) -> Result<CandidateSet> {
    let query_id = query_id.into();
    if plans.len() != latency_runs_ms.len() {
        return Err(Error::LengthMismatch(format!(
            "{} plans but {} latency lists",
            plans.len(),
            latency_runs_ms.len()
        )));
    }
    if plans.len() < 2 {
        return Err(Error::LengthMismatch(format!(
            "query {query_id}: a candidate set needs at least 2 plans, got {}",
            plans.len()
        )));
    }
    if plans.len() > MAX_PLANS {
        return Err(Error::ListTooLong {
            len: plans.len(),
            max: MAX_PLANS,
        });
    }
    if cbo_index >= plans.len() {
        return Err(Error::LengthMismatch(format!(
            "cbo_index {cbo_index} out of range for {} plans",
            plans.len()
        )));
    }
    for (i, p) in plans.iter().enumerate() {
        if plans[..i].iter().any(|q| q.plan_id() == p.plan_id()) {
            return Err(Error::LengthMismatch(format!(
                "duplicate plan_id `{}` in query {query_id}",
                p.plan_id()
            )));
        }
    }
    let (mean_latency_ms, true_ranks) = organize_ranking(&latency_runs_ms)?;
    Ok(CandidateSet {
        query_id,
        plans,
        latency_runs_ms,
        mean_latency_ms,
        true_ranks,
        cbo_index,
    })
}

/// Query-level split: the first `ceil(ratio * N)` of a seeded shuffle train,
/// the rest test. Both halves keep input order.
pub fn split_dataset(
    data: &[CandidateSet],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<CandidateSet>, Vec<CandidateSet>)> {
    let (train_idx, test_idx) = split_indices(data.len(), ratio, seed)?;
    Ok((
        train_idx.iter().map(|&i| data[i].clone()).collect(),
        test_idx.iter().map(|&i| data[i].clone()).collect(),
    ))
}

pub(crate) fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    if n < 2 {
        return Err(Error::TooFewQueries(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
