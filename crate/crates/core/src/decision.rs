//! Hybrid top-k plan selection with cost-based fallback.

use serde::{Deserialize, Serialize};

use crate::dataset::CandidateSet;
use crate::error::{Error, Result};
use crate::ood::{plan_features, OodDetector, Thresholds};
use crate::ranker::{rank_with_scores, RankedList, ScoreMatrix};
use crate::training::ModelCheckpoint;

pub const DEFAULT_K: usize = 3;
/// Tie tolerance relative to the largest absolute score.
pub const DEFAULT_TIE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionSource {
    /// 1-based model rank of the chosen plan.
    ModelRank(usize),
    CboFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub rank: usize,
    pub plan_id: String,
    pub confidence: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub query_id: String,
    pub chosen_plan_id: String,
    pub chosen_index: usize,
    pub source: DecisionSource,
    pub tau_in: f64,
    pub k: usize,
    pub trace: Vec<TraceEntry>,
    /// Plan ids whose top-position scores are within epsilon of the leader.
    pub tie_group: Vec<String>,
}

/// Walks the first `k` ranked plans and returns the first whose confidence
/// reaches `tau_in`, otherwise the CBO plan. `confidence(i)` scores plan
/// index `i` of `cs`.
pub fn hybrid_select(
    ranked: &RankedList,
    cs: &CandidateSet,
    mut confidence: impl FnMut(usize) -> Result<f64>,
    th: &Thresholds,
    k: usize,
    force: bool,
) -> Result<DecisionOutcome> {
    let n = cs.len();
    if ranked.len() != n {
        return Err(Error::LengthMismatch(format!(
            "ranking covers {} plans, candidate set has {n}",
            ranked.len()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    if th.degraded && !force {
        return Err(Error::DegradedDetector);
    }
    let mut trace = Vec::with_capacity(k);
    let mut chosen = None;
    for i in 0..k {
        let plan = ranked.by_position[i];
        let g = confidence(plan)?;
        let passed = g >= th.tau_in;
        trace.push(TraceEntry {
            rank: i + 1,
            plan_id: cs.plans()[plan].plan_id().to_string(),
            confidence: g,
            passed,
        });
        if passed {
            chosen = Some((plan, DecisionSource::ModelRank(i + 1)));
            break;
        }
    }
    let (idx, source) = chosen.unwrap_or((cs.cbo_index(), DecisionSource::CboFallback));
    Ok(DecisionOutcome {
        query_id: cs.query_id().to_string(),
        chosen_plan_id: cs.plans()[idx].plan_id().to_string(),
        chosen_index: idx,
        source,
        tau_in: th.tau_in,
        k,
        trace,
        tie_group: Vec::new(),
    })
}

/// Plans whose top-position score lies within `epsilon` of the leading
/// plan's, in ranked order. The leader is always included.
pub fn resolve_ties(ranked: &RankedList, scores: &ScoreMatrix, epsilon: f64) -> Vec<usize> {
    let top = scores.at(ranked.top(), 0);
    ranked
        .by_position
        .iter()
        .copied()
        .filter(|&i| (scores.at(i, 0) - top).abs() <= epsilon)
        .collect()
}

/// Ranks `cs`, gates the top `k` through the detector and records ties.
pub fn decide(
    cs: &CandidateSet,
    checkpoint: &ModelCheckpoint,
    detector: &OodDetector,
    k: usize,
    tie_epsilon: f64,
    force: bool,
) -> Result<(DecisionOutcome, RankedList, ScoreMatrix)> {
    let (ranked, scores) = rank_with_scores(cs, checkpoint)?;
    let features = plan_features(checkpoint, cs.plans())?;
    let mut out = hybrid_select(
        &ranked,
        cs,
        |i| detector.confidence(&features[i]),
        &detector.thresholds,
        k,
        force,
    )?;
    let eps = tie_epsilon * scores.max_abs();
    out.tie_group = resolve_ties(&ranked, &scores, eps)
        .into_iter()
        .map(|i| cs.plans()[i].plan_id().to_string())
        .collect();
    Ok((out, ranked, scores))
}
