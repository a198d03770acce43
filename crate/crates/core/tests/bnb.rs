mod common;

use branchlab::bnb::*;
use branchlab::eval::PolicySpec;
use branchlab::milp::{Family, InstanceFamilySpec, generate_instance};
use proptest::prelude::*;

fn policies() -> Vec<PolicySpec> {
    ["most-infeasible", "pseudocost", "strong-branching", "active-constraint", "hybrid", "random"]
        .iter()
        .map(|n| n.parse().unwrap())
        .collect()
}

fn recorded() -> BnbConfig {
    BnbConfig { record_episode: true, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_policy_finds_the_brute_force_optimum(seed in any::<u64>(), n in 2usize..=10, m in 1usize..=4) {
        let inst = common::random_binary(seed, n, m);
        let opt = common::brute_force_binary(&inst).unwrap();
        for spec in policies() {
            let res = solve(&inst, spec.build(inst.name()).as_mut(), &BnbConfig::default()).unwrap();
            prop_assert_eq!(res.status, SolveStatus::Optimal);
            let v = res.incumbent_value.unwrap();
            prop_assert!((v - opt).abs() <= 1e-6, "{}: {} vs {}", spec.name(), v, opt);
            prop_assert!(inst.is_feasible(res.incumbent.as_ref().unwrap(), 1e-6, 1e-6));
        }
    }

    #[test]
    fn rewards_telescope_to_the_bound_area(seed in any::<u64>(), n in 4usize..=12, max_clock in prop::option::of(5.0f64..200.0)) {
        let inst = common::random_binary(seed, n, 3);
        let cfg = BnbConfig { budget: Budget { max_nodes: None, max_clock }, ..recorded() };
        let res = solve(&inst, &mut branchlab::branching::MostInfeasible, &cfg).unwrap();
        let ep = res.episode.unwrap();
        ep.validate().unwrap();
        let area = res.trace.area(0.0, res.trace.horizon);
        prop_assert!((ep.total_reward() - area).abs() <= 1e-9 * area.abs().max(1.0));
        let integral = dual_integral(&res.trace).unwrap();
        prop_assert_eq!(cumulative_reward(&res.trace, res.trace.reward_constant()).unwrap() + integral, res.trace.reward_constant());
        prop_assert!(integral >= -1e-9 * area.abs().max(1.0), "a lower bound cannot exceed the optimum");
    }

    #[test]
    fn dual_bound_is_monotone(seed in any::<u64>(), n in 4usize..=12) {
        let inst = common::random_binary(seed, n, 4);
        let res = solve(&inst, &mut branchlab::branching::RandomBranching::new(seed), &BnbConfig::default()).unwrap();
        res.trace.validate().unwrap();
        prop_assert!(res.trace.events.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        if let Some(&(_, last)) = res.trace.events.last() {
            prop_assert!(last <= res.incumbent_value.unwrap() + 1e-9);
        }
    }

    #[test]
    fn budget_is_respected(seed in any::<u64>(), nodes in 1usize..6) {
        let inst = generate_instance(&InstanceFamilySpec::new(Family::MultiKnapsack, 20, 5, 0.8, seed)).unwrap();
        let res = solve(&inst, &mut branchlab::branching::MostInfeasible, &BnbConfig { budget: Budget::nodes(nodes), ..recorded() }).unwrap();
        prop_assert!(res.nodes_processed <= nodes);
        prop_assert_eq!(res.episode.unwrap().transitions.len(), res.nodes_processed);
    }
}

#[test]
fn identical_inputs_serialize_identically() {
    let inst = generate_instance(&InstanceFamilySpec::new(Family::MultiKnapsack, 18, 4, 0.8, 9)).unwrap();
    for spec in policies() {
        let run = || serde_json::to_string(&solve(&inst, spec.build(inst.name()).as_mut(), &recorded()).unwrap()).unwrap();
        assert_eq!(run(), run(), "{}", spec.name());
    }
}

#[test]
fn clock_budget_fixes_the_horizon() {
    let inst = generate_instance(&InstanceFamilySpec::new(Family::MultiKnapsack, 20, 5, 0.8, 3)).unwrap();
    let res = solve(&inst, &mut branchlab::branching::MostInfeasible, &BnbConfig { budget: Budget::clock(40.0), ..Default::default() }).unwrap();
    assert_eq!(res.trace.horizon, 40.0);
    assert!(res.trace.events.iter().all(|e| e.0 <= 40.0));
}
