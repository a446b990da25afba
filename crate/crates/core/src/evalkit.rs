//! Selection metrics and policy comparison reports.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_shifted_queries, CandidateSet, WorkloadConfig};
use crate::decision::{decide, DecisionSource};
use crate::error::{Error, Result};
use crate::ood::OodDetector;
use crate::ranker::rank_plans;
use crate::training::ModelCheckpoint;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// The plan a policy picked for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub query_id: String,
    pub plan_id: String,
}

impl Choice {
    pub fn of(cs: &CandidateSet, index: usize) -> Choice {
        Choice {
            query_id: cs.query_id().to_string(),
            plan_id: cs.plans()[index].plan_id().to_string(),
        }
    }
}

fn index_truth(truth: &[CandidateSet]) -> HashMap<&str, &CandidateSet> {
    truth.iter().map(|cs| (cs.query_id(), cs)).collect()
}

/// Resolves every choice to `(candidate set, plan index)`.
fn resolve<'a>(decisions: &[Choice], truth: &'a [CandidateSet]) -> Result<Vec<(&'a CandidateSet, usize)>> {
    let by_id = index_truth(truth);
    decisions
        .iter()
        .map(|c| {
            let cs = by_id
                .get(c.query_id.as_str())
                .ok_or_else(|| Error::MissingQuery(c.query_id.clone()))?;
            let i = cs
                .index_of(&c.plan_id)
                .ok_or_else(|| Error::MissingQuery(format!("{}/{}", c.query_id, c.plan_id)))?;
            Ok((*cs, i))
        })
        .collect()
}

/// Percentage of decisions whose plan has tie-broken true rank `<= k`.
pub fn top_k_accuracy(decisions: &[Choice], truth: &[CandidateSet], k: usize) -> Result<f64> {
    let resolved = resolve(decisions, truth)?;
    if resolved.is_empty() {
        return Err(Error::EmptySet("decisions"));
    }
    let hits = resolved.iter().filter(|(cs, i)| cs.true_ranks()[*i] <= k).count();
    Ok(100.0 * hits as f64 / resolved.len() as f64)
}

/// Sum of the chosen plans' mean latencies.
pub fn cumulative_time(decisions: &[Choice], truth: &[CandidateSet]) -> Result<f64> {
    Ok(resolve(decisions, truth)?
        .iter()
        .map(|(cs, i)| cs.mean_latency_ms()[*i])
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: String,
    pub chosen_plan_id: String,
    pub chosen_rank: usize,
    pub chosen_latency_ms: f64,
    pub best_latency_ms: f64,
    pub regret_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: String,
    pub top_1: f64,
    pub top_2: f64,
    pub top_3: f64,
    pub cumulative_time_ms: f64,
    /// Queries where the hybrid policy fell back to the CBO plan.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fallbacks: Option<usize>,
    pub rows: Vec<QueryRow>,
}

impl PolicyReport {
    pub fn build(policy: &str, decisions: &[Choice], truth: &[CandidateSet]) -> Result<PolicyReport> {
        let rows = resolve(decisions, truth)?
            .iter()
            .map(|(cs, i)| {
                let chosen = cs.mean_latency_ms()[*i];
                let best = cs.mean_latency_ms()[cs.best_index()];
                QueryRow {
                    query_id: cs.query_id().to_string(),
                    chosen_plan_id: cs.plans()[*i].plan_id().to_string(),
                    chosen_rank: cs.true_ranks()[*i],
                    chosen_latency_ms: chosen,
                    best_latency_ms: best,
                    regret_ms: chosen - best,
                }
            })
            .collect();
        Ok(PolicyReport {
            policy: policy.to_string(),
            top_1: top_k_accuracy(decisions, truth, 1)?,
            top_2: top_k_accuracy(decisions, truth, 2)?,
            top_3: top_k_accuracy(decisions, truth, 3)?,
            cumulative_time_ms: cumulative_time(decisions, truth)?,
            fallbacks: None,
            rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub num_queries: usize,
    pub k: usize,
    pub policies: Vec<PolicyReport>,
    pub notes: Vec<String>,
}

pub const MODEL_TOP1: &str = "model-top-1";
pub const HYBRID: &str = "hybrid";
pub const CBO_SIM: &str = "cbo-sim";
pub const ORACLE_BEST: &str = "oracle-best";

impl EvalReport {
    pub fn policy(&self, name: &str) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    /// Fixed-width summary table with footnotes.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} test queries, hybrid k = {}", self.num_queries, self.k);
        let _ = writeln!(
            s,
            "{:<14} {:>8} {:>8} {:>8} {:>16}",
            "policy", "top-1 %", "top-2 %", "top-3 %", "total time ms"
        );
        for p in &self.policies {
            let _ = writeln!(
                s,
                "{:<14} {:>8.2} {:>8.2} {:>8.2} {:>16.2}",
                p.policy, p.top_1, p.top_2, p.top_3, p.cumulative_time_ms
            );
        }
        for (i, n) in self.notes.iter().enumerate() {
            let _ = writeln!(s, "[{}] {n}", i + 1);
        }
        s
    }
}

/// Evaluates model-top-1, hybrid, CBO-sim and oracle-best on `test_set`.
pub fn compare_policies(
    test_set: &[CandidateSet],
    checkpoint: &ModelCheckpoint,
    detector: &OodDetector,
    k: usize,
    force: bool,
) -> Result<EvalReport> {
    let mut model = Vec::with_capacity(test_set.len());
    let mut hybrid = Vec::with_capacity(test_set.len());
    let mut fallbacks = 0;
    for cs in test_set {
        model.push(Choice::of(cs, rank_plans(cs, checkpoint)?.top()));
        let kk = k.min(cs.len());
        let (out, _, _) = decide(cs, checkpoint, detector, kk, crate::decision::DEFAULT_TIE_EPSILON, force)?;
        if out.source == DecisionSource::CboFallback {
            fallbacks += 1;
        }
        hybrid.push(Choice::of(cs, out.chosen_index));
    }
    let mut hybrid_report = PolicyReport::build(HYBRID, &hybrid, test_set)?;
    hybrid_report.fallbacks = Some(fallbacks);
    report_from_policies(
        test_set,
        k,
        vec![PolicyReport::build(MODEL_TOP1, &model, test_set)?, hybrid_report],
    )
}

/// Replaces the first `round(fraction * n)` queries of `test` with queries
/// drawn from `workload` with its perturbation range doubled.
pub fn with_shifted_queries(
    test: &[CandidateSet],
    workload: &WorkloadConfig,
    fraction: f64,
) -> Result<Vec<CandidateSet>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!("shift fraction {fraction} must lie in [0, 1]")));
    }
    let count = (fraction * test.len() as f64).round() as usize;
    let mut mixed = generate_shifted_queries(workload, count)?;
    mixed.extend_from_slice(&test[count..]);
    Ok(mixed)
}

/// Appends the CBO-sim and oracle-best baselines to `policies`.
pub fn report_from_policies(
    test_set: &[CandidateSet],
    k: usize,
    mut policies: Vec<PolicyReport>,
) -> Result<EvalReport> {
    let cbo: Vec<Choice> = test_set.iter().map(|cs| Choice::of(cs, cs.cbo_index())).collect();
    let best: Vec<Choice> = test_set.iter().map(|cs| Choice::of(cs, cs.best_index())).collect();
    policies.push(PolicyReport::build(CBO_SIM, &cbo, test_set)?);
    policies.push(PolicyReport::build(ORACLE_BEST, &best, test_set)?);
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        num_queries: test_set.len(),
        k,
        policies,
        notes: vec![
            "cbo-sim top-k rates use the ground-truth ranks known for synthetic data.".into(),
            "hybrid clamps k to the candidate count of each query.".into(),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ingest_measurements;
    use crate::plan_ir::{OperatorKind, PlanNode, PlanTree};

    fn set(id: &str, lat: &[f64]) -> CandidateSet {
        let plans = (0..lat.len())
            .map(|i| PlanTree::new(format!("p{i}"), PlanNode::leaf(OperatorKind::SeqScan, 1.0, 1.0, &["t"])).unwrap())
            .collect();
        ingest_measurements(id, plans, lat.iter().map(|&l| vec![l]).collect(), 0).unwrap()
    }

    #[test]
    fn hand_counted_top_k() {
        let lat = [1.0, 2.0, 3.0, 4.0, 5.0];
        let truth = vec![set("a", &lat), set("b", &lat), set("c", &lat)];
        let picks = vec![
            Choice::of(&truth[0], 0),
            Choice::of(&truth[1], 2),
            Choice::of(&truth[2], 4),
        ];
        let r = top_k_accuracy(&picks, &truth, 3).unwrap();
        assert!((r - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(top_k_accuracy(&picks, &truth, 1).unwrap(), 100.0 / 3.0);
    }

    #[test]
    fn cumulative_time_adds_means() {
        let truth = vec![set("a", &[10.0, 30.0]), set("b", &[40.0, 20.0])];
        let picks = vec![Choice::of(&truth[0], 0), Choice::of(&truth[1], 1)];
        assert_eq!(cumulative_time(&picks, &truth).unwrap(), 30.0);
        let missing = vec![Choice {
            query_id: "z".into(),
            plan_id: "p0".into(),
        }];
        assert!(matches!(cumulative_time(&missing, &truth), Err(Error::MissingQuery(_))));
    }

    #[test]
    fn shifted_mix_keeps_size_and_unique_ids() {
        let cfg = WorkloadConfig {
            num_queries: 10,
            plans_per_query: [2, 4],
            ..WorkloadConfig::default()
        };
        let test = crate::dataset::generate_synthetic_workload(&cfg).unwrap();
        let mixed = with_shifted_queries(&test, &cfg, 0.3).unwrap();
        assert_eq!(mixed.len(), 10);
        assert_eq!(mixed.iter().filter(|c| c.query_id().starts_with('s')).count(), 3);
        assert_eq!(&mixed[3..], &test[3..]);
        assert!(with_shifted_queries(&test, &cfg, 1.5).is_err());
    }

    #[test]
    fn oracle_dominates_and_rates_are_monotone() {
        let truth = vec![set("a", &[3.0, 1.0, 2.0]), set("b", &[5.0, 6.0, 4.0])];
        let report = report_from_policies(&truth, 3, Vec::new()).unwrap();
        let best = report.policy(ORACLE_BEST).unwrap();
        assert_eq!(best.top_1, 100.0);
        assert_eq!(best.cumulative_time_ms, 5.0);
        for p in &report.policies {
            assert!(p.top_1 <= p.top_2 && p.top_2 <= p.top_3);
            assert!(p.cumulative_time_ms >= best.cumulative_time_ms);
        }
        assert!(report.to_table().contains("oracle-best"));
        let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
