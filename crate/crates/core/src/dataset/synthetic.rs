//! Seeded synthetic workload with an analytic latency oracle.
//!
//! Each query gets a random base join tree over a fixed table catalog with
//! true cardinalities. Candidates mimic statistics-perturbation exploration:
//! every candidate draws its own multiplicative estimation error per node,
//! picks the locally cheapest operators under those estimates, and then
//! occasionally flips an operator or join order. True latency is the cost
//! model applied to true cardinalities; `cbo_index` is the candidate whose
//! estimated root cost is lowest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{ingest_measurements, CandidateSet, MAX_PLANS};
use crate::error::{Error, Result};
use crate::plan_ir::{OperatorKind, PlanNode, PlanTree};

/// Milliseconds per cost unit.
const MS_PER_UNIT: f64 = 1e-3;
/// Probability that exploration flips an operator choice or join order.
const FLIP_PROB: f64 = 0.3;
const CATALOG_SIZE: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub num_queries: usize,
    /// Inclusive `[min, max]` candidates per query.
    pub plans_per_query: [usize; 2],
    /// Half-width `r` of the `exp(U(-r, r))` cardinality perturbation.
    pub perturbation_log_range: f64,
    /// Coefficient of variation of the multiplicative latency noise.
    pub noise_cv: f64,
    pub runs_per_plan: usize,
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            num_queries: 200,
            plans_per_query: [2, 16],
            perturbation_log_range: 1.0,
            noise_cv: 0.05,
            runs_per_plan: 3,
            seed: 42,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.plans_per_query;
        let problem = if self.num_queries == 0 {
            Some("num_queries must be positive".to_string())
        } else if lo < 2 || lo > hi || hi > MAX_PLANS {
            Some(format!("plans_per_query [{lo}, {hi}] must satisfy 2 <= min <= max <= {MAX_PLANS}"))
        } else if !(self.perturbation_log_range >= 0.0 && self.perturbation_log_range.is_finite()) {
            Some(format!("perturbation_log_range {} must be finite and >= 0", self.perturbation_log_range))
        } else if !(0.0..1.0).contains(&self.noise_cv) {
            Some(format!("noise_cv {} must lie in [0, 1)", self.noise_cv))
        } else if self.runs_per_plan == 0 {
            Some("runs_per_plan must be positive".to_string())
        } else {
            None
        };
        match problem {
            Some(p) => Err(Error::InvalidConfig(p)),
            None => Ok(()),
        }
    }
}

fn table_name(i: usize) -> String {
    format!("t{i:02}")
}

/// Row count of catalog table `i`, log-spaced from 1e3 to 1e7.
fn table_rows(i: usize) -> f64 {
    10f64.powf(3.0 + 4.0 * i as f64 / (CATALOG_SIZE - 1) as f64).round()
}

fn table_rows_by_name(name: &str) -> Option<f64> {
    let i: usize = name.strip_prefix('t')?.parse().ok()?;
    (i < CATALOG_SIZE).then(|| table_rows(i))
}

/// Cost of one operator, excluding its inputs' own cost.
///
/// `child_rows` is `[outer, inner]` for joins. Scans read `table_rows`.
fn local_cost(op: OperatorKind, rows: f64, child_rows: &[f64], table_rows: f64) -> f64 {
    let input: f64 = child_rows.iter().sum();
    let log2 = |x: f64| (x + 2.0).log2();
    match op {
        OperatorKind::SeqScan => table_rows + 0.2 * rows,
        OperatorKind::IndexScan => 3.0 * rows + 20.0 * log2(table_rows),
        OperatorKind::HashJoin => child_rows[0] + 2.0 * child_rows[1] + 0.5 * rows,
        OperatorKind::MergeJoin => {
            let (a, b) = (child_rows[0], child_rows[1]);
            0.05 * (a * log2(a) + b * log2(b)) + a + b + 0.5 * rows
        }
        OperatorKind::NestedLoop => 0.01 * child_rows[0] * child_rows[1] + child_rows[0] + 0.5 * rows,
        OperatorKind::Sort => 0.3 * input * log2(input),
        OperatorKind::Aggregate => 0.5 * input + rows,
        OperatorKind::Materialize => 0.3 * input,
        OperatorKind::Other => 0.1 * input,
    }
}

fn subtree_cost(node: &PlanNode) -> f64 {
    let child_rows: Vec<f64> = node.children.iter().map(|c| c.est_cardinality).collect();
    let table = node
        .table_ids
        .first()
        .and_then(|t| table_rows_by_name(t))
        .unwrap_or(node.est_cardinality);
    let own = local_cost(node.operator, node.est_cardinality, &child_rows, table);
    own + node.children.iter().map(subtree_cost).sum::<f64>()
}

/// Latency the cost model assigns to a plan, reading each node's
/// `est_cardinality` as its true row count. Catalog tables (`t00`..`t11`)
/// use their fixed sizes; other scans use their own row count.
pub fn oracle_latency_ms(root: &PlanNode) -> f64 {
    subtree_cost(root) * MS_PER_UNIT
}

#[derive(Debug, Clone)]
enum Shape {
    Scan(usize),
    Join,
    Sort,
    Aggregate,
}

#[derive(Debug, Clone)]
struct BaseNode {
    shape: Shape,
    rows: f64,
    children: Vec<BaseNode>,
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.random_range(lo..=hi))
}

fn base_join_tree<R: Rng>(depth: usize, rng: &mut R) -> BaseNode {
    if depth <= 1 {
        let t = rng.random_range(0..CATALOG_SIZE);
        let rows = (table_rows(t) * log_uniform(rng, -3.0, 0.0)).max(1.0).round();
        return BaseNode {
            shape: Shape::Scan(t),
            rows,
            children: Vec::new(),
        };
    }
    let left = base_join_tree(depth - 1, rng);
    let right_depth = rng.random_range(1..=(depth - 1).min(2));
    let right = base_join_tree(right_depth, rng);
    let (a, b) = (left.rows, right.rows);
    let rows = (a * b / a.max(b) * log_uniform(rng, -0.5, 0.5)).max(1.0).round();
    BaseNode {
        shape: Shape::Join,
        rows,
        children: vec![left, right],
    }
}

fn base_query<R: Rng>(rng: &mut R) -> BaseNode {
    let join_depth = rng.random_range(2..=4);
    let mut root = base_join_tree(join_depth, rng);
    let top: f64 = rng.random();
    if top < 0.5 {
        let rows = (root.rows * log_uniform(rng, -3.0, -1.0)).max(1.0).round();
        root = BaseNode {
            shape: Shape::Aggregate,
            rows,
            children: vec![root],
        };
    } else if top < 0.65 {
        root = BaseNode {
            shape: Shape::Sort,
            rows: root.rows,
            children: vec![root],
        };
    }
    root
}

/// One explored candidate: the plan as the optimizer sees it (estimated
/// rows, cumulative estimated cost) and the same plan with true rows.
fn explore<R: Rng>(node: &BaseNode, r: f64, flip: bool, rng: &mut R) -> (PlanNode, PlanNode) {
    let est_rows = if r > 0.0 {
        node.rows * rng.random_range(-r..=r).exp()
    } else {
        node.rows
    };
    let flip_p = if flip { FLIP_PROB } else { 0.0 };
    match node.shape {
        Shape::Scan(t) => {
            let size = table_rows(t);
            let cheapest = [OperatorKind::SeqScan, OperatorKind::IndexScan]
                .into_iter()
                .min_by(|&x, &y| {
                    local_cost(x, est_rows, &[], size).total_cmp(&local_cost(y, est_rows, &[], size))
                })
                .expect("nonempty");
            let op = if rng.random_bool(flip_p) {
                if cheapest == OperatorKind::SeqScan {
                    OperatorKind::IndexScan
                } else {
                    OperatorKind::SeqScan
                }
            } else {
                cheapest
            };
            let tables = [table_name(t)];
            let est = PlanNode {
                operator: op,
                est_cardinality: est_rows,
                est_cost: local_cost(op, est_rows, &[], size),
                table_ids: tables.to_vec(),
                children: Vec::new(),
            };
            let truth = PlanNode {
                operator: op,
                est_cardinality: node.rows,
                est_cost: local_cost(op, node.rows, &[], size),
                table_ids: tables.to_vec(),
                children: Vec::new(),
            };
            (est, truth)
        }
        Shape::Join => {
            let (el, tl) = explore(&node.children[0], r, flip, rng);
            let (er, tr) = explore(&node.children[1], r, flip, rng);
            let (a, b) = (el.est_cardinality, er.est_cardinality);
            let mut best = (OperatorKind::HashJoin, false, f64::INFINITY);
            for op in OperatorKind::JOINS {
                for swapped in [false, true] {
                    let rows = if swapped { [b, a] } else { [a, b] };
                    let c = local_cost(op, est_rows, &rows, 0.0);
                    if c < best.2 {
                        best = (op, swapped, c);
                    }
                }
            }
            let (mut op, mut swapped, _) = best;
            if rng.random_bool(flip_p) {
                let others: Vec<OperatorKind> =
                    OperatorKind::JOINS.into_iter().filter(|&k| k != op).collect();
                op = others[rng.random_range(0..others.len())];
            }
            if rng.random_bool(flip_p) {
                swapped = !swapped;
            }
            let (mut est_children, mut true_children) = (vec![el, er], vec![tl, tr]);
            if swapped {
                est_children.swap(0, 1);
                true_children.swap(0, 1);
            }
            (
                assemble(op, est_rows, est_children),
                assemble(op, node.rows, true_children),
            )
        }
        Shape::Sort | Shape::Aggregate => {
            let op = if matches!(node.shape, Shape::Sort) {
                OperatorKind::Sort
            } else {
                OperatorKind::Aggregate
            };
            let (ec, tc) = explore(&node.children[0], r, flip, rng);
            (assemble(op, est_rows, vec![ec]), assemble(op, node.rows, vec![tc]))
        }
    }
}

fn assemble(op: OperatorKind, rows: f64, children: Vec<PlanNode>) -> PlanNode {
    let mut node = PlanNode {
        operator: op,
        est_cardinality: rows,
        est_cost: 0.0,
        table_ids: Vec::new(),
        children,
    };
    let child_rows: Vec<f64> = node.children.iter().map(|c| c.est_cardinality).collect();
    node.est_cost = local_cost(op, rows, &child_rows, 0.0)
        + node.children.iter().map(|c| c.est_cost).sum::<f64>();
    node
}

/// Operators and table order in pre-order; equal iff two candidates make
/// the same physical choices.
fn signature(node: &PlanNode) -> String {
    let mut s = String::new();
    node.visit(&mut |n| {
        s.push_str(n.operator.as_str());
        for t in &n.table_ids {
            s.push(':');
            s.push_str(t);
        }
        s.push(';');
    });
    s
}

fn query_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn generate_query(cfg: &WorkloadConfig, index: usize, prefix: char) -> Result<CandidateSet> {
    let mut rng = query_rng(cfg.seed, index);
    let base = base_query(&mut rng);
    let [lo, hi] = cfg.plans_per_query;
    let n = rng.random_range(lo..=hi);
    let r = cfg.perturbation_log_range;

    let mut candidates: Vec<(PlanNode, PlanNode)> = Vec::with_capacity(n);
    if r == 0.0 {
        for _ in 0..n {
            candidates.push(explore(&base, r, false, &mut rng));
        }
    } else {
        let mut seen = std::collections::HashSet::new();
        let max_attempts = 40 * n;
        let mut attempts = 0;
        while candidates.len() < n && attempts < max_attempts {
            let c = explore(&base, r, true, &mut rng);
            if seen.insert(signature(&c.0)) {
                candidates.push(c);
            }
            attempts += 1;
        }
        while candidates.len() < lo {
            candidates.push(explore(&base, r, true, &mut rng));
        }
    }

    let query_id = format!("{prefix}{index:04}");
    let noise = if cfg.noise_cv > 0.0 {
        let sigma2 = (1.0 + cfg.noise_cv * cfg.noise_cv).ln();
        Some(LogNormal::new(-sigma2 / 2.0, sigma2.sqrt()).map_err(|e| Error::InvalidConfig(e.to_string()))?)
    } else {
        None
    };

    let mut plans = Vec::with_capacity(candidates.len());
    let mut runs = Vec::with_capacity(candidates.len());
    let mut best_est = (0, f64::INFINITY);
    for (j, (est, truth)) in candidates.into_iter().enumerate() {
        if est.est_cost < best_est.1 {
            best_est = (j, est.est_cost);
        }
        let latency = oracle_latency_ms(&truth);
        runs.push(
            (0..cfg.runs_per_plan)
                .map(|_| match &noise {
                    Some(d) => latency * d.sample(&mut rng),
                    None => latency,
                })
                .collect(),
        );
        plans.push(PlanTree::new(format!("{query_id}-p{j:02}"), est)?);
    }
    ingest_measurements(query_id, plans, runs, best_est.0)
}

/// Deterministic synthetic workload; query `i` draws from its own seeded
/// stream, so results do not depend on generation order.
pub fn generate_synthetic_workload(cfg: &WorkloadConfig) -> Result<Vec<CandidateSet>> {
    cfg.validate()?;
    (0..cfg.num_queries).map(|i| generate_query(cfg, i, 'q')).collect()
}

/// Seed offset separating shifted queries from the regular workload.
const SHIFT_SEED_OFFSET: u64 = 0x5348_4946_5400;

/// `count` queries drawn like `cfg` but with the perturbation range doubled,
/// for distribution-shift studies. Ids are `s0000`, `s0001`, ... so they never
/// collide with regular query ids.
pub fn generate_shifted_queries(cfg: &WorkloadConfig, count: usize) -> Result<Vec<CandidateSet>> {
    let shifted = WorkloadConfig {
        perturbation_log_range: 2.0 * cfg.perturbation_log_range,
        seed: cfg.seed.wrapping_add(SHIFT_SEED_OFFSET),
        num_queries: count.max(1),
        ..cfg.clone()
    };
    shifted.validate()?;
    (0..count).map(|i| generate_query(&shifted, i, 's')).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorkloadConfig {
        WorkloadConfig {
            num_queries: 1,
            plans_per_query: [2, 2],
            perturbation_log_range: 0.5,
            noise_cv: 0.0,
            runs_per_plan: 1,
            seed,
        }
    }

    #[test]
    fn smallest_workload_shape() {
        let data = generate_synthetic_workload(&small(7)).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].len(), 2);
        let mut r = data[0].true_ranks().to_vec();
        r.sort_unstable();
        assert_eq!(r, vec![1, 2]);
    }

    #[test]
    fn noiseless_generation_is_repeatable() {
        let cfg = WorkloadConfig {
            num_queries: 20,
            noise_cv: 0.0,
            runs_per_plan: 1,
            ..Default::default()
        };
        let a = generate_synthetic_workload(&cfg).unwrap();
        let b = generate_synthetic_workload(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_perturbation_degenerates() {
        let cfg = WorkloadConfig {
            num_queries: 5,
            plans_per_query: [3, 6],
            perturbation_log_range: 0.0,
            noise_cv: 0.0,
            runs_per_plan: 1,
            seed: 11,
        };
        for cs in generate_synthetic_workload(&cfg).unwrap() {
            let first = &cs.plans()[0];
            assert!(cs.plans().iter().all(|p| p.structurally_eq(first)));
            assert!(cs.mean_latency_ms().iter().all(|&m| m == cs.mean_latency_ms()[0]));
            assert_eq!(cs.true_ranks(), (1..=cs.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn candidates_are_distinct_and_valid() {
        let cfg = WorkloadConfig {
            num_queries: 30,
            ..Default::default()
        };
        for cs in generate_synthetic_workload(&cfg).unwrap() {
            assert!((2..=16).contains(&cs.len()));
            let sigs: std::collections::HashSet<_> =
                cs.plans().iter().map(|p| signature(p.root())).collect();
            assert_eq!(sigs.len(), cs.len());
            assert!(cs.plans().iter().all(|p| p.root().depth() <= 5));
            let cbo = cs.cbo_index();
            assert!(cs.plans().iter().all(|p| p.root().est_cost >= cs.plans()[cbo].root().est_cost));
        }
    }

    #[test]
    fn noiseless_ranks_sort_oracle_latency() {
        let cfg = WorkloadConfig {
            num_queries: 10,
            noise_cv: 0.0,
            runs_per_plan: 1,
            seed: 5,
            ..Default::default()
        };
        for cs in generate_synthetic_workload(&cfg).unwrap() {
            for i in 0..cs.len() {
                for j in 0..cs.len() {
                    if cs.true_ranks()[i] < cs.true_ranks()[j] {
                        assert!(cs.mean_latency_ms()[i] <= cs.mean_latency_ms()[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn estimated_cost_matches_cost_model() {
        let data = generate_synthetic_workload(&WorkloadConfig {
            num_queries: 5,
            ..Default::default()
        })
        .unwrap();
        for p in data.iter().flat_map(|cs| cs.plans()) {
            let direct = oracle_latency_ms(p.root()) / MS_PER_UNIT;
            let rel = (direct - p.root().est_cost).abs() / direct;
            assert!(rel < 1e-12, "{direct} vs {}", p.root().est_cost);
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let base = WorkloadConfig::default();
        for bad in [
            WorkloadConfig { num_queries: 0, ..base.clone() },
            WorkloadConfig { plans_per_query: [1, 4], ..base.clone() },
            WorkloadConfig { plans_per_query: [5, 4], ..base.clone() },
            WorkloadConfig { plans_per_query: [2, 33], ..base.clone() },
            WorkloadConfig { noise_cv: 1.0, ..base.clone() },
            WorkloadConfig { perturbation_log_range: -1.0, ..base.clone() },
            WorkloadConfig { runs_per_plan: 0, ..base.clone() },
        ] {
            assert!(matches!(generate_synthetic_workload(&bad), Err(Error::InvalidConfig(_))));
        }
    }
}
