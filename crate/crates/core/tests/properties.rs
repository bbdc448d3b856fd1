//! Randomised invariants of the cost model, both game stages and the
//! metrics.

mod common;

use proptest::prelude::*;

use common::{toy_scenario, ToyFleet};
use evgame::cost::{deviation_cost, target_schedule};
use evgame::inner::{best_response, solve_subgame, ChargingProfile, Initialization, InnerOptions};
use evgame::metrics::{expected_outcome, savings_report, uncoordinated_baseline};
use evgame::outer::{
    expected_payoff, iterate_to_equilibrium, prelec_weight, pure_strategy_payoff, BehaviorModel,
    MixedStrategy, OuterOptions, PayoffTable,
};
use evgame::scenario::{generate_instance, GenerationConfig, Scenario};
use evgame::tensor::{build_tensor, PayoffTensor, TensorOptions};
use evgame::StartProfile;

fn normalized(raw: &[f64]) -> MixedStrategy {
    let total: f64 = raw.iter().sum();
    MixedStrategy { probs: raw.iter().map(|r| r / total).collect() }
}

/// Prelec weight written out directly. A player applies its own parameter
/// to every opponent's probabilities.
fn prelec(p: f64, alpha: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        (-(-p.ln()).powf(alpha)).exp()
    }
}

/// Random game: 2 or 3 players with 1 to 4 slots each, negative payoffs,
/// plus a random mixed strategy per player and a Prelec parameter per
/// player.
fn game() -> impl Strategy<Value = (PayoffTable, Vec<MixedStrategy>, Vec<f64>)> {
    prop::collection::vec(1usize..=4, 2..=3).prop_flat_map(|dims| {
        let k: usize = dims.iter().product();
        let n = dims.len();
        let strategies: Vec<_> = dims
            .iter()
            .map(|&d| prop::collection::vec(0.01f64..1.0, d))
            .collect();
        (
            Just(dims),
            prop::collection::vec(prop::collection::vec(-100.0f64..0.0, k), n),
            strategies,
            prop::collection::vec(0.05f64..=1.0, n),
        )
            .prop_map(|(dims, payoffs, raw, alphas)| {
                let table = PayoffTable::new(dims, payoffs, "test").unwrap();
                let strategies = raw.iter().map(|r| normalized(r)).collect();
                (table, strategies, alphas)
            })
    })
}

/// Lexicographic profiles for `dims`, last index fastest.
fn profiles(dims: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &d in dims {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..d).map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
    }
    out
}

fn small_scenario(seed: u64) -> Scenario {
    generate_instance(&GenerationConfig::small(), seed).unwrap()
}

fn random_starts(s: &Scenario, picks: &[f64]) -> StartProfile {
    StartProfile(
        s.start_set_sizes()
            .iter()
            .zip(picks)
            .map(|(&d, &u)| 1 + ((u * d as f64) as usize).min(d - 1))
            .collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prelec_is_increasing_with_fixed_point(alpha in 0.01f64..=1.0, p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let fixed = (-1.0f64).exp();
        prop_assert!((prelec_weight(fixed, alpha).unwrap() - fixed).abs() <= 1e-15);
        prop_assert_eq!(prelec_weight(1.0, alpha).unwrap(), 1.0);
        prop_assert_eq!(prelec_weight(0.0, alpha).unwrap(), 0.0);
        let (lo, hi) = if p < q { (p, q) } else { (q, p) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(prelec_weight(lo, alpha).unwrap() < prelec_weight(hi, alpha).unwrap());
        prop_assert!((prelec_weight(p, alpha).unwrap() - prelec(p, alpha)).abs() <= 1e-14);
    }

    #[test]
    fn expected_payoff_matches_direct_sum((table, strategies, alphas) in game()) {
        let n = table.num_players();
        let model = BehaviorModel::pt(alphas.clone()).unwrap();
        for i in 0..n {
            let mut direct = 0.0;
            for (k, sigma) in profiles(table.dims()).iter().enumerate() {
                let mut weight = strategies[i].probs[sigma[i]];
                for j in (0..n).filter(|&j| j != i) {
                    weight *= prelec(strategies[j].probs[sigma[j]], alphas[i]);
                }
                direct += weight * table.payoffs(i)[k];
            }
            let value = expected_payoff(&table, &strategies, &model, i).unwrap();
            prop_assert!((value - direct).abs() <= 1e-12 * direct.abs().max(1.0), "{} vs {}", value, direct);
        }
    }

    #[test]
    fn expectation_decomposes_over_own_slots((table, strategies, alphas) in game()) {
        for model in [BehaviorModel::eut(alphas.len()), BehaviorModel::pt(alphas.clone()).unwrap()] {
            for i in 0..table.num_players() {
                let q: f64 = (1..=table.dims()[i])
                    .map(|slot| {
                        strategies[i].probs[slot - 1]
                            * pure_strategy_payoff(&table, slot, &strategies, &model, i).unwrap()
                    })
                    .sum();
                let value = expected_payoff(&table, &strategies, &model, i).unwrap();
                prop_assert!((value - q).abs() <= 1e-12 * value.abs().max(1.0), "{} vs {}", value, q);
            }
        }
    }

    #[test]
    fn unit_alpha_prospect_theory_is_expected_utility((table, strategies, _a) in game()) {
        let n = table.num_players();
        let pt = BehaviorModel::pt_uniform(1.0, n).unwrap();
        let eut = BehaviorModel::eut(n);
        for i in 0..n {
            let a = expected_payoff(&table, &strategies, &pt, i).unwrap();
            let b = expected_payoff(&table, &strategies, &eut, i).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn outer_iterates_stay_distributions((table, _s, alphas) in game(), beta in 0.05f64..0.95) {
        let init: Vec<_> = table.dims().iter().map(|&d| MixedStrategy::uniform(d)).collect();
        let options = OuterOptions { beta, max_iters: 300, eps_target: Some(0.0), record_trajectory: true };
        let model = BehaviorModel::pt(alphas).unwrap();
        let sol = iterate_to_equilibrium(&table, &init, &model, &options).unwrap();
        prop_assert!(!sol.trajectory.is_empty());
        for step in &sol.trajectory {
            for a in step {
                prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(a.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn grid_cost_is_price_times_load(phi in 0.01f64..2.0, delta in 0.01f64..2.0, l in 0.0f64..200.0, h in 1e-3f64..10.0) {
        let s = toy_scenario(1.0, vec![1.0], phi, delta, &[ToyFleet { rate_kw: 1.0, demand_kwh: 0.5, efficiency: 1.0, weight: 1.0 }]);
        let g = &s.grid;
        let price = g.unit_price(0, l).unwrap();
        prop_assert!((price - (phi * l + delta)).abs() <= 1e-12 * price);
        prop_assert!((g.grid_cost(0, l).unwrap() - price * l).abs() <= 1e-12 * (price * l).max(1.0));
        // Strictly increasing and midpoint-convex.
        let (c0, c1, c2) = (g.grid_cost(0, l).unwrap(), g.grid_cost(0, l + h).unwrap(), g.grid_cost(0, l + 2.0 * h).unwrap());
        prop_assert!(c1 > c0);
        prop_assert!(2.0 * c1 < c0 + c2);
        prop_assert!(g.grid_cost(0, -1.0).is_err());
    }

    #[test]
    fn deviation_cost_is_continuous_and_nonincreasing(target in 0.0f64..20.0, g in 0.1f64..30.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        prop_assert_eq!(deviation_cost(target, target, g), 0.0);
        for h in [1e-3, 1e-6, 1e-9] {
            // `target - h` is rounded, so the shortfall is `h` up to a few ulps
            // of `target`.
            let short = h + 4.0 * f64::EPSILON * target;
            let below = deviation_cost(target - h, target, g);
            prop_assert!(below <= g * short * short);
            prop_assert_eq!(deviation_cost(target + h, target, g), 0.0);
        }
        let (x, y) = (a.min(b) * target, a.max(b) * target);
        prop_assert!(deviation_cost(x, target, g) >= deviation_cost(y, target, g));
    }

    #[test]
    fn targets_telescope(seed in 0u64..1000, start_pick in 0.0f64..1.0, mix in prop::collection::vec(0.0f64..1.0, 10)) {
        let s = small_scenario(seed);
        for agg in &s.aggregators {
            let horizon = s.horizon_slots;
            let latest = agg.latest_start(horizon);
            let start = 1 + ((start_pick * latest as f64) as usize).min(latest - 1);
            let window = horizon - start + 1;
            let budget = agg.grid_budget_kwh();
            // A reference that tracks its own targets has equal targets.
            let uniform = ChargingProfile::uniform(start, horizon, budget);
            let tracked = target_schedule(agg, horizon, start, &uniform).unwrap();
            let even = budget / window as f64;
            prop_assert!(tracked.targets.iter().all(|&t| (t - even).abs() <= 1e-12 * even.max(1.0)));
            // Any feasible reference: prior draws plus remaining slots times
            // the target recover the budget while the budget is not exhausted.
            let raw: f64 = mix[..window].iter().sum::<f64>().max(1e-9);
            let reference = ChargingProfile {
                start,
                values: mix[..window].iter().map(|m| m / raw * budget * 0.999).collect(),
            };
            let targets = target_schedule(agg, horizon, start, &reference).unwrap();
            let mut prior = 0.0;
            for (k, (&t, &x)) in targets.targets.iter().zip(&reference.values).enumerate() {
                let expected = ((budget - prior) / (window - k) as f64).max(0.0);
                prop_assert!((t - expected).abs() <= 1e-9 * budget.max(1.0));
                prior += x;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn best_response_respects_budget_and_box(
        seed in 0u64..1000,
        picks in prop::collection::vec(0.0f64..1.0, 3),
        others in prop::collection::vec(0.0f64..30.0, 10),
        shares in prop::collection::vec(0.0f64..1.0, 10),
    ) {
        let s = small_scenario(seed);
        let horizon = s.horizon_slots;
        let starts = random_starts(&s, &picks);
        for (i, agg) in s.aggregators.iter().enumerate() {
            let start = starts.0[i];
            let window = horizon - start + 1;
            let budget = agg.grid_budget_kwh();
            let raw: f64 = shares[..window].iter().sum::<f64>().max(1e-9);
            let reference = ChargingProfile {
                start,
                values: shares[..window].iter().map(|m| m / raw * budget * 0.5).collect(),
            };
            let targets = target_schedule(agg, horizon, start, &reference).unwrap();
            let x = best_response(&s, i, start, &others[start - 1..], &targets).unwrap();
            let upper = agg.max_draw_kwh(s.slot_hours);
            prop_assert_eq!(x.values.len(), window);
            prop_assert!(x.values.iter().all(|&v| v >= 0.0 && v <= upper * (1.0 + 1e-12)));
            let delivered = agg.efficiency * x.total();
            prop_assert!((delivered - agg.demand_kwh()).abs() <= 1e-8 * agg.demand_kwh().max(1.0));
        }
    }

    #[test]
    fn every_inner_iterate_is_feasible(seed in 0u64..1000, init_seed in 0u64..1000, picks in prop::collection::vec(0.0f64..1.0, 3)) {
        let s = small_scenario(seed);
        let starts = random_starts(&s, &picks);
        let options = InnerOptions {
            init: Initialization::Random { seed: init_seed },
            record_iterates: true,
            ..InnerOptions::default()
        };
        let sol = solve_subgame(&s, &starts, &options).unwrap();
        prop_assert!(sol.converged && sol.certified);
        prop_assert!(sol.iterates.len() >= 2);
        for profiles in &sol.iterates {
            for (agg, p) in s.aggregators.iter().zip(profiles) {
                let upper = agg.max_draw_kwh(s.slot_hours);
                prop_assert!(p.values.iter().all(|&v| v >= 0.0 && v <= upper * (1.0 + 1e-12)));
                let delivered = agg.efficiency * p.total();
                prop_assert!((delivered - agg.demand_kwh()).abs() <= 1e-8 * agg.demand_kwh().max(1.0));
            }
        }
    }

    #[test]
    fn payoff_falls_when_others_draw_more(
        seed in 0u64..1000,
        picks in prop::collection::vec(0.0f64..1.0, 3),
        others in prop::collection::vec(0.0f64..30.0, 10),
        bump in 0.01f64..5.0,
        slot_pick in 0.0f64..1.0,
    ) {
        let s = small_scenario(seed);
        let horizon = s.horizon_slots;
        let starts = random_starts(&s, &picks);
        for (i, agg) in s.aggregators.iter().enumerate() {
            let start = starts.0[i];
            let profile = ChargingProfile::uniform(start, horizon, agg.grid_budget_kwh());
            let targets = target_schedule(agg, horizon, start, &profile).unwrap();
            let window = horizon - start + 1;
            let mut more = others[start - 1..].to_vec();
            let k = ((slot_pick * window as f64) as usize).min(window - 1);
            more[k] += bump;
            let cost = |o: &[f64]| evgame::cost::aggregator_cost(&profile, o, &targets, &s.grid, &agg.deviation_weights).unwrap();
            prop_assert!(cost(&more) > cost(&others[start - 1..]));
        }
    }

    #[test]
    fn extra_base_load_never_helps(seed in 0u64..1000, picks in prop::collection::vec(0.0f64..1.0, 3), extra in prop::collection::vec(0.0f64..5.0, 10)) {
        let s = small_scenario(seed);
        let starts = random_starts(&s, &picks);
        let mut heavier = s.clone();
        heavier.grid.base_load_kwh.iter_mut().zip(&extra).for_each(|(b, e)| *b += e);
        let opts = InnerOptions::default();
        let light = solve_subgame(&s, &starts, &opts).unwrap();
        let heavy = solve_subgame(&heavier, &starts, &opts).unwrap();
        for (l, h) in light.payoffs.iter().zip(&heavy.payoffs) {
            prop_assert!(*h <= *l + 1e-9 * l.abs(), "{} > {}", h, l);
        }
    }
}

fn small_tensor(s: &Scenario) -> PayoffTensor {
    build_tensor(s, &TensorOptions::default()).unwrap()
}

fn solve_eut(tensor: &PayoffTensor, iters: usize) -> evgame::OuterSolution {
    let table = tensor.table().unwrap();
    let init: Vec<_> = table.dims().iter().map(|&d| MixedStrategy::uniform(d)).collect();
    let options = OuterOptions { max_iters: iters, eps_target: Some(0.0), ..OuterOptions::default() };
    iterate_to_equilibrium(&table, &init, &BehaviorModel::eut(table.num_players()), &options).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn savings_ignore_currency_rescaling(seed in 0u64..1000, scale in 0.1f64..10.0) {
        let s = small_scenario(seed);
        let mut scaled = s.clone();
        for v in scaled.grid.phi_cents_per_kwh2.iter_mut().chain(scaled.grid.delta_cents_per_kwh.iter_mut()) {
            *v *= scale;
        }
        for agg in &mut scaled.aggregators {
            agg.deviation_weights.iter_mut().for_each(|g| *g *= scale);
        }
        let report = |s: &Scenario| {
            let tensor = small_tensor(s);
            let sol = solve_eut(&tensor, 2000);
            let outcome = expected_outcome(s, &tensor, &sol).unwrap();
            savings_report(&uncoordinated_baseline(s).unwrap(), &outcome).unwrap()
        };
        let (a, b) = (report(&s), report(&scaled));
        for (x, y) in a.savings_pct.iter().zip(&b.savings_pct) {
            prop_assert!((x - y).abs() <= 1e-6, "{} vs {}", x, y);
        }
        for (x, y) in a.baseline_costs.iter().zip(&b.baseline_costs) {
            prop_assert!((x * scale - y).abs() <= 1e-9 * y.abs());
        }
        prop_assert!((a.par_reduction_pct - b.par_reduction_pct).abs() <= 1e-6);
    }

    #[test]
    fn expected_loads_are_convex_combinations(seed in 0u64..1000) {
        let s = small_scenario(seed);
        let tensor = small_tensor(&s);
        prop_assert!(tensor.iter().all(|(_, e)| e.payoffs.iter().all(|&f| f <= 0.0)));
        let sol = solve_eut(&tensor, 500);
        let outcome = expected_outcome(&s, &tensor, &sol).unwrap();
        let horizon = s.horizon_slots;
        for i in 0..s.num_aggregators() {
            for t in 0..horizon {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for (p, e) in tensor.iter() {
                    let supported = p.0.iter().zip(&sol.strategies).all(|(&st, a)| a.probs[st - 1] > 0.0);
                    if supported {
                        let x = e.aggregator_load(i, horizon)[t];
                        lo = lo.min(x);
                        hi = hi.max(x);
                    }
                }
                let v = outcome.expected_loads[i][t];
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
        prop_assert!(outcome.par >= 1.0);
    }
}
