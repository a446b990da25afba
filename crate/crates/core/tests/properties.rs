use planrank::dataset::{generate_synthetic_workload, organize_ranking, WorkloadConfig};
use planrank::plan_ir::{parse_plan, serialize_plan, OperatorKind, PlanNode, PlanTree};
use proptest::prelude::*;

fn estimate() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), 0.0..1e3, 0.0..1e12]
}

fn leaf() -> impl Strategy<Value = PlanNode> {
    (
        prop_oneof![Just(OperatorKind::SeqScan), Just(OperatorKind::IndexScan)],
        estimate(),
        estimate(),
        prop::collection::vec("[a-z_]{1,8}", 0..3),
    )
        .prop_map(|(op, rows, cost, tables)| {
            let tables: Vec<&str> = tables.iter().map(String::as_str).collect();
            PlanNode::leaf(op, rows, cost, &tables)
        })
}

fn tree() -> impl Strategy<Value = PlanNode> {
    leaf().prop_recursive(5, 32, 2, |inner| {
        prop_oneof![
            (prop::sample::select(OperatorKind::JOINS.to_vec()), estimate(), estimate(), inner.clone(), inner.clone())
                .prop_map(|(op, rows, cost, l, r)| PlanNode::with_children(op, rows, cost, vec![l, r])),
            (
                prop::sample::select(vec![
                    OperatorKind::Sort,
                    OperatorKind::Aggregate,
                    OperatorKind::Materialize,
                    OperatorKind::Other
                ]),
                estimate(),
                estimate(),
                inner
            )
                .prop_map(|(op, rows, cost, c)| PlanNode::with_children(op, rows, cost, vec![c])),
        ]
    })
}

/// Ranks from an independent stable sort over per-plan means.
fn stable_sort_ranks(runs: &[Vec<f64>]) -> Vec<usize> {
    let means: Vec<f64> = runs.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let mut order: Vec<usize> = (0..runs.len()).collect();
    // Vec::sort_by is stable, so equal means keep index order.
    order.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap());
    let mut ranks = vec![0; runs.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ranking_matches_stable_sort(
        runs in prop::collection::vec(
            prop::collection::vec(prop_oneof![Just(1.0), Just(2.0), 0.0..1e6], 1..4),
            1..16,
        )
    ) {
        let (_, ranks) = organize_ranking(&runs).unwrap();
        prop_assert_eq!(ranks, stable_sort_ranks(&runs));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn random_trees_round_trip(root in tree()) {
        let plan = PlanTree::new("p", root).unwrap();
        let back = parse_plan(&serialize_plan(&plan)).unwrap();
        prop_assert!(back.warnings.is_empty());
        prop_assert!(back.plan.structurally_eq(&plan));
    }
}

#[test]
fn generator_plans_round_trip() {
    let data = generate_synthetic_workload(&WorkloadConfig {
        num_queries: 10,
        seed: 9,
        ..WorkloadConfig::default()
    })
    .unwrap();
    let plans: Vec<&PlanTree> = data.iter().flat_map(|cs| cs.plans()).take(50).collect();
    assert_eq!(plans.len(), 50);
    for p in plans {
        let back = parse_plan(&serialize_plan(p)).unwrap().plan;
        assert!(back.structurally_eq(p), "{}", p.plan_id());
        assert_eq!(back.plan_id(), p.plan_id());
    }
}
