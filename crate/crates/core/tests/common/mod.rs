#![allow(dead_code)]

use evgame::scenario::{Aggregator, EvSpec, GridModel, Scenario, RNG_ALGORITHM, SCHEMA_VERSION};

/// One single-EV aggregator of a hand-built scenario.
#[derive(Clone, Copy, Debug)]
pub struct ToyFleet {
    pub rate_kw: f64,
    pub demand_kwh: f64,
    pub efficiency: f64,
    pub weight: f64,
}

pub fn toy_scenario(
    slot_hours: f64,
    base: Vec<f64>,
    phi: f64,
    delta: f64,
    fleets: &[ToyFleet],
) -> Scenario {
    let horizon = base.len();
    let aggregators = fleets
        .iter()
        .enumerate()
        .map(|(id, f)| {
            let mut agg = Aggregator {
                id,
                efficiency: f.efficiency,
                deviation_weights: vec![f.weight; horizon],
                min_slots: 0,
                evs: vec![EvSpec::new("toy", f.rate_kw, f.demand_kwh, 0.0)],
            };
            agg.min_slots = agg.derived_min_slots(slot_hours);
            agg
        })
        .collect();
    Scenario {
        schema_version: SCHEMA_VERSION.to_string(),
        horizon_slots: horizon,
        slot_hours,
        seed: 0,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        grid: GridModel {
            phi_cents_per_kwh2: vec![phi; horizon],
            delta_cents_per_kwh: vec![delta; horizon],
            base_load_kwh: base,
        },
        aggregators,
    }
}

/// Two slots of one hour, unit price slope, no offset, no deviation
/// penalty, no base load; every aggregator needs 2 kWh and may draw up to
/// 2 kWh per slot.
pub fn two_slot_toy(n: usize) -> Scenario {
    let fleet = ToyFleet { rate_kw: 2.0, demand_kwh: 2.0, efficiency: 1.0, weight: 0.0 };
    toy_scenario(1.0, vec![0.0, 0.0], 1.0, 0.0, &vec![fleet; n])
}

/// Cost written out from the model definition: price `phi * L + delta` on
/// the total load times own draw, plus `g * (target - x)^2` below target.
pub fn hand_cost(x: &[f64], others: &[f64], targets: &[f64], phi: f64, delta: f64, g: f64) -> f64 {
    x.iter()
        .zip(others)
        .zip(targets)
        .map(|((&x, &o), &tgt)| {
            let short = (tgt - x).max(0.0);
            (phi * (o + x) + delta) * x + g * short * short
        })
        .sum()
}

/// Discretized feasible set: all but one draw on a grid of `step` (plus the
/// cap itself when it is off the grid), the remaining draw taking what is
/// left of the budget; draws in `[0, upper]`.
pub fn grid_profiles(window: usize, budget: f64, upper: f64, step: f64) -> Vec<Vec<f64>> {
    fn rec(
        window: usize,
        remaining: f64,
        upper: f64,
        step: f64,
        prefix: &mut Vec<f64>,
        out: &mut Vec<Vec<f64>>,
    ) {
        if prefix.len() + 1 == window {
            if remaining >= -1e-12 && remaining <= upper + 1e-12 {
                let mut p = prefix.clone();
                p.push(remaining.max(0.0));
                out.push(p);
            }
            return;
        }
        let cap = upper.min(remaining);
        let steps = (cap / step + 1e-9).floor() as usize;
        let mut values: Vec<f64> = (0..=steps).map(|k| k as f64 * step).collect();
        if cap - values[steps] > 1e-9 {
            values.push(cap);
        }
        for x in values {
            prefix.push(x);
            rec(window, remaining - x, upper, step, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(window, budget, upper, step, &mut Vec::new(), &mut out);
    // Let every slot in turn take the remainder, so that corners where a
    // box bound binds off the grid are represented for each slot.
    let base = out.clone();
    for r in 0..window.saturating_sub(1) {
        out.extend(base.iter().map(|p| {
            let mut q = p.clone();
            let last = q.pop().unwrap();
            q.insert(r, last);
            q
        }));
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Pure equilibria of the discretized two-aggregator game on a toy with no
/// deviation penalty: windows start at `starts` (1-based), each aggregator
/// spends `budget` with draws in `[0, upper]`, prices `phi * L + delta`
/// over `base`. Returns horizon-long profile pairs.
pub fn joint_grid_equilibria(
    base: &[f64],
    phi: f64,
    delta: f64,
    budget: f64,
    upper: f64,
    starts: [usize; 2],
    step: f64,
) -> Vec<[Vec<f64>; 2]> {
    let horizon = base.len();
    let pad = |start: usize, w: &[f64]| {
        let mut full = vec![0.0; horizon];
        full[start - 1..].copy_from_slice(w);
        full
    };
    let sets: Vec<Vec<Vec<f64>>> = starts
        .iter()
        .map(|&s| {
            grid_profiles(horizon - s + 1, budget, upper, step)
                .iter()
                .map(|w| pad(s, w))
                .collect()
        })
        .collect();
    let zero = vec![0.0; horizon];
    let cost = |own: &[f64], other: &[f64]| {
        let others: Vec<f64> = base.iter().zip(other).map(|(b, o)| b + o).collect();
        hand_cost(own, &others, &zero, phi, delta, 0.0)
    };
    let (n0, n1) = (sets[0].len(), sets[1].len());
    let mut c0 = vec![vec![0.0; n1]; n0];
    let mut c1 = vec![vec![0.0; n1]; n0];
    for a in 0..n0 {
        for b in 0..n1 {
            c0[a][b] = cost(&sets[0][a], &sets[1][b]);
            c1[a][b] = cost(&sets[1][b], &sets[0][a]);
        }
    }
    let tol = 1e-12;
    let mut out = Vec::new();
    for a in 0..n0 {
        for b in 0..n1 {
            let best0 = (0..n0).map(|k| c0[k][b]).fold(f64::INFINITY, f64::min);
            let best1 = c1[a].iter().copied().fold(f64::INFINITY, f64::min);
            if c0[a][b] <= best0 + tol && c1[a][b] <= best1 + tol {
                out.push([sets[0][a].clone(), sets[1][b].clone()]);
            }
        }
    }
    out
}
