//! Grid pricing, target schedules and aggregator cost.
//!
//! The grid charges `phi_t * L_t^2 + delta_t * L_t` for a total load `L_t`,
//! so every kWh in slot `t` is billed at the unit price `phi_t * L_t + delta_t`.
//! On top of that each aggregator pays a quadratic penalty when it draws
//! less than its target for the slot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inner::ChargingProfile;
use crate::scenario::{Aggregator, GridModel};

/// Relative slack allowed when checking that a reference profile does not
/// deliver more than the fleet demand.
pub const DELIVERY_TOLERANCE: f64 = 1e-9;

impl GridModel {
    /// Price per kWh in slot `t` (0-based) at total load `total_load`.
    pub fn unit_price(&self, t: usize, total_load: f64) -> Result<f64> {
        check_load(total_load)?;
        Ok(self.price_unchecked(t, total_load))
    }

    /// Grid cost `phi L^2 + delta L` in slot `t` (0-based).
    pub fn grid_cost(&self, t: usize, total_load: f64) -> Result<f64> {
        check_load(total_load)?;
        Ok(self.price_unchecked(t, total_load) * total_load)
    }

    #[inline]
    pub(crate) fn price_unchecked(&self, t: usize, total_load: f64) -> f64 {
        self.phi_cents_per_kwh2[t] * total_load + self.delta_cents_per_kwh[t]
    }
}

fn check_load(load: f64) -> Result<()> {
    if load >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("total load must be nonnegative, got {load}")))
    }
}

/// Load in one slot split into the part an aggregator controls and the rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadDecomposition {
    /// 1-based slot number.
    pub slot: usize,
    pub others_load: f64,
    pub own_load: f64,
}

impl LoadDecomposition {
    pub fn total(&self) -> f64 {
        self.others_load + self.own_load
    }

    /// What the aggregator pays the grid for its own draw in this slot.
    pub fn energy_cost(&self, grid: &GridModel) -> Result<f64> {
        Ok(grid.unit_price(self.slot - 1, self.total())? * self.own_load)
    }
}

/// Per-slot consumption targets over `[start, T]`, in grid-side kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSchedule {
    pub start: usize,
    pub targets: Vec<f64>,
}

/// Targets implied by a reference profile: in each slot, the grid energy
/// still owed (fleet demand over efficiency, minus what the reference drew
/// in earlier slots of the window) spread evenly over the remaining slots.
pub fn target_schedule(
    aggregator: &Aggregator,
    horizon: usize,
    start: usize,
    reference: &ChargingProfile,
) -> Result<TargetSchedule> {
    let window = window_len(horizon, start)?;
    if reference.start != start || reference.values.len() != window {
        return Err(Error::SpanMismatch {
            expected: window,
            found: reference.values.len(),
        });
    }
    let demand = aggregator.demand_kwh();
    let delivered = aggregator.efficiency * reference.values.iter().sum::<f64>();
    if delivered > demand + DELIVERY_TOLERANCE * demand.max(1.0) {
        return Err(Error::Domain(format!(
            "reference profile delivers {delivered} kWh, more than the demand {demand} kWh"
        )));
    }
    Ok(TargetSchedule {
        start,
        targets: targets_from(aggregator.grid_budget_kwh(), &reference.values),
    })
}

pub(crate) fn targets_from(budget: f64, reference: &[f64]) -> Vec<f64> {
    let n = reference.len();
    let mut drawn = 0.0;
    reference
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let target = (budget - drawn).max(0.0) / (n - k) as f64;
            drawn += x;
            target
        })
        .collect()
}

fn window_len(horizon: usize, start: usize) -> Result<usize> {
    if start == 0 || start > horizon {
        return Err(Error::Domain(format!("start slot {start} outside 1..={horizon}")));
    }
    Ok(horizon - start + 1)
}

/// Penalty for drawing `x` when the target is `target`: `weight * (target - x)^2`
/// below the target, zero at or above it.
#[inline]
pub fn deviation_cost(x: f64, target: f64, weight: f64) -> f64 {
    if x < target {
        let short = target - x;
        weight * short * short
    } else {
        0.0
    }
}

/// Total cost of an aggregator over its window: energy bought at the price
/// set by the full load plus the under-target penalty. The payoff is the
/// negation of this value.
///
/// `others_loads` and `targets` cover the profile's window; `weights` covers
/// the whole horizon.
pub fn aggregator_cost(
    profile: &ChargingProfile,
    others_loads: &[f64],
    targets: &TargetSchedule,
    grid: &GridModel,
    weights: &[f64],
) -> Result<f64> {
    let window = profile.values.len();
    for len in [others_loads.len(), targets.targets.len()] {
        if len != window {
            return Err(Error::SpanMismatch { expected: window, found: len });
        }
    }
    if targets.start != profile.start {
        return Err(Error::SpanMismatch {
            expected: profile.start,
            found: targets.start,
        });
    }
    let offset = profile.start - 1;
    if offset + window > weights.len() || offset + window > grid.base_load_kwh.len() {
        return Err(Error::SpanMismatch {
            expected: offset + window,
            found: weights.len().min(grid.base_load_kwh.len()),
        });
    }
    if let Some(&bad) = others_loads.iter().find(|&&o| !(o >= 0.0)) {
        return Err(Error::Domain(format!("others' load must be nonnegative, got {bad}")));
    }
    Ok(window_cost(
        offset,
        &profile.values,
        others_loads,
        &targets.targets,
        grid,
        weights,
    ))
}

/// Unchecked core of [`aggregator_cost`].
pub(crate) fn window_cost(
    offset: usize,
    x: &[f64],
    others: &[f64],
    targets: &[f64],
    grid: &GridModel,
    weights: &[f64],
) -> f64 {
    x.iter()
        .zip(others)
        .zip(targets)
        .enumerate()
        .map(|(k, ((&x, &o), &target))| {
            let t = offset + k;
            grid.price_unchecked(t, o + x) * x + deviation_cost(x, target, weights[t])
        })
        .sum()
}
