//! Uncoordinated baseline, expected coordinated outcome and the savings
//! and peak-to-average figures derived from them.

use serde::{Deserialize, Serialize};

use crate::cost::{targets_from, window_cost};
use crate::error::{Error, Result};
use crate::outer::{BehaviorModel, OuterSolution};
use crate::scenario::Scenario;
use crate::tensor::PayoffTensor;

/// Peak over mean of a load profile.
pub fn peak_to_average(load: &[f64]) -> Result<f64> {
    if load.is_empty() {
        return Err(Error::Domain("empty load profile".into()));
    }
    let mean = load.iter().sum::<f64>() / load.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::Domain(format!("mean load {mean} must be positive")));
    }
    let peak = load.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(peak / mean)
}

/// Per-aggregator cost of a set of horizon-long draws, each aggregator's
/// targets following its own draws from slot 1.
fn horizon_costs(scenario: &Scenario, draws: &[Vec<f64>]) -> Vec<f64> {
    (0..draws.len())
        .map(|i| {
            let agg = &scenario.aggregators[i];
            let mut others = scenario.grid.base_load_kwh.clone();
            for (j, d) in draws.iter().enumerate() {
                if j != i {
                    others.iter_mut().zip(d).for_each(|(o, x)| *o += x);
                }
            }
            let targets = targets_from(agg.grid_budget_kwh(), &draws[i]);
            window_cost(0, &draws[i], &others, &targets, &scenario.grid, &agg.deviation_weights)
        })
        .collect()
}

fn aggregate(scenario: &Scenario, draws: &[Vec<f64>]) -> Vec<f64> {
    let mut total = scenario.grid.base_load_kwh.clone();
    for d in draws {
        total.iter_mut().zip(d).for_each(|(l, x)| *l += x);
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub scenario_digest: String,
    /// Grid-side draw per aggregator and slot.
    pub profiles: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    /// Base load plus every aggregator's draw.
    pub aggregate_load: Vec<f64>,
    pub par: f64,
}

/// Every EV charges at full rate from slot 1 until its battery is full.
pub fn uncoordinated_baseline(scenario: &Scenario) -> Result<BaselineResult> {
    let horizon = scenario.horizon_slots;
    let profiles: Vec<Vec<f64>> = scenario
        .aggregators
        .iter()
        .map(|agg| {
            let mut draw = vec![0.0; horizon];
            for ev in &agg.evs {
                let step = ev.max_rate_kw * scenario.slot_hours;
                let mut remaining = ev.demand_kwh;
                for slot in draw.iter_mut() {
                    if remaining <= 0.0 {
                        break;
                    }
                    let battery = step.min(remaining);
                    *slot += battery / agg.efficiency;
                    remaining -= battery;
                }
            }
            draw
        })
        .collect();
    let costs = horizon_costs(scenario, &profiles);
    let aggregate_load = aggregate(scenario, &profiles);
    Ok(BaselineResult {
        scenario_digest: scenario.digest(),
        par: peak_to_average(&aggregate_load)?,
        profiles,
        costs,
        aggregate_load,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOutcome {
    pub scenario_digest: String,
    pub tensor_digest: String,
    pub model: BehaviorModel,
    /// `E[x_{i,t}]` over the equilibrium start-time distribution.
    pub expected_loads: Vec<Vec<f64>>,
    pub expected_costs: Vec<f64>,
    pub aggregate_load: Vec<f64>,
    pub par: f64,
}

/// Expectations under the product of the equilibrium strategies (objective
/// probabilities, whatever model produced them).
pub fn expected_outcome(
    scenario: &Scenario,
    tensor: &PayoffTensor,
    solution: &OuterSolution,
) -> Result<ExpectedOutcome> {
    let scenario_digest = scenario.digest();
    if tensor.scenario_digest != scenario_digest {
        return Err(Error::DigestMismatch {
            expected: scenario_digest,
            found: tensor.scenario_digest.clone(),
        });
    }
    let tensor_digest = tensor.digest();
    if solution.tensor_digest != tensor_digest {
        return Err(Error::DigestMismatch {
            expected: tensor_digest,
            found: solution.tensor_digest.clone(),
        });
    }
    if !tensor.is_complete() {
        return Err(Error::IncompleteTensor {
            missing: tensor.num_profiles() - tensor.num_filled(),
            total: tensor.num_profiles(),
        });
    }
    let n = tensor.num_aggregators();
    let horizon = tensor.horizon;
    if solution.strategies.len() != n
        || solution.strategies.iter().zip(&tensor.dims).any(|(s, &d)| s.probs.len() != d)
    {
        return Err(Error::Domain("solution does not match the tensor's start sets".into()));
    }

    let mut expected_loads = vec![vec![0.0; horizon]; n];
    let mut expected_costs = vec![0.0; n];
    for (profile, entry) in tensor.iter() {
        let pr: f64 = profile
            .0
            .iter()
            .zip(&solution.strategies)
            .map(|(&s, a)| a.probs[s - 1])
            .product();
        if pr == 0.0 {
            continue;
        }
        for i in 0..n {
            expected_costs[i] -= pr * entry.payoffs[i];
            expected_loads[i]
                .iter_mut()
                .zip(entry.aggregator_load(i, horizon))
                .for_each(|(e, x)| *e += pr * x);
        }
    }
    let aggregate_load = aggregate(scenario, &expected_loads);
    Ok(ExpectedOutcome {
        scenario_digest,
        tensor_digest,
        model: solution.model.clone(),
        par: peak_to_average(&aggregate_load)?,
        expected_loads,
        expected_costs,
        aggregate_load,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub baseline_costs: Vec<f64>,
    pub expected_costs: Vec<f64>,
    /// `(C_base - E[C]) / C_base * 100` per aggregator.
    pub savings_pct: Vec<f64>,
    pub baseline_par: f64,
    pub coordinated_par: f64,
    pub par_reduction_pct: f64,
}

pub fn savings_report(baseline: &BaselineResult, coordinated: &ExpectedOutcome) -> Result<SavingsReport> {
    if baseline.scenario_digest != coordinated.scenario_digest {
        return Err(Error::DigestMismatch {
            expected: baseline.scenario_digest.clone(),
            found: coordinated.scenario_digest.clone(),
        });
    }
    let savings_pct = baseline
        .costs
        .iter()
        .zip(&coordinated.expected_costs)
        .enumerate()
        .map(|(i, (&base, &exp))| {
            if base == 0.0 {
                Err(Error::UndefinedPercentage { aggregator: i })
            } else {
                Ok((base - exp) / base * 100.0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SavingsReport {
        baseline_costs: baseline.costs.clone(),
        expected_costs: coordinated.expected_costs.clone(),
        savings_pct,
        baseline_par: baseline.par,
        coordinated_par: coordinated.par,
        par_reduction_pct: (baseline.par - coordinated.par) / baseline.par * 100.0,
    })
}
