//! Second-stage charging game for a fixed start-time profile.
//!
//! Each aggregator's best response minimises a separable convex cost over
//! the slots of its window subject to box bounds and a fixed grid budget.
//! With the targets frozen, the optimum is `x_t(nu)` clipped to the box,
//! where `nu` is the budget multiplier; `nu` is found by bisection on the
//! (monotone, piecewise-linear) total draw and finished with an exact
//! interpolation once the bracket holds a single linear piece.
//!
//! The best responses are iterated synchronously: every aggregator answers
//! the loads of the previous sweep, and its targets are recomputed from its
//! own previous profile. A fixed point of this map has self-consistent
//! targets and is a Nash equilibrium of the subgame.
//!
//! Plain sweeps oscillate when several fleets chase the same cheap slots,
//! and the target recursion contracts slowly. Since the sweep map is affine
//! once each slot's regime is known, every sweep is followed by a Newton
//! step on the frozen-regime map; Anderson mixing of recent sweeps takes
//! over if those steps stop helping. Only sweep outputs are ever returned,
//! so every reported iterate is feasible.

use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::cost::{targets_from, window_cost, TargetSchedule};
use crate::error::{Error, Result};
use crate::rng::Draws;
use crate::scenario::Scenario;
use crate::tensor::StartProfile;

/// Width of the final multiplier bracket.
const LAMBDA_TOL: f64 = 1e-12;
const MAX_BISECTION: usize = 200;
/// Non-improving Newton steps tolerated before switching to mixing only.
const MAX_STALLS: usize = 8;

/// Absolute slack added to the relative best-response-gap threshold, so
/// zero-demand aggregators (payoff 0) can still be certified.
pub const CERT_ABS_FLOOR: f64 = 1e-9;

/// Energy an aggregator draws from the grid in each slot of `[start, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargingProfile {
    /// 1-based first slot of the window.
    pub start: usize,
    pub values: Vec<f64>,
}

impl ChargingProfile {
    /// Even spread of `budget` over `[start, horizon]`.
    pub fn uniform(start: usize, horizon: usize, budget: f64) -> Self {
        let n = horizon + 1 - start;
        Self {
            start,
            values: vec![budget / n as f64; n],
        }
    }

    /// 0-based index of the first slot.
    pub fn offset(&self) -> usize {
        self.start - 1
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// The profile over the whole horizon, zero before `start`.
    pub fn to_horizon(&self, horizon: usize) -> Vec<f64> {
        let mut full = vec![0.0; horizon];
        full[self.offset()..self.offset() + self.values.len()].copy_from_slice(&self.values);
        full
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Regime {
    Floor,
    Below,
    Above,
    Ceiling,
}

/// One slot of a best-response problem. Cost of drawing `x`:
/// `(phi (others + x) + delta) x + g (target - x)_+^2`.
#[derive(Debug, Clone, Copy)]
struct SlotModel {
    /// `phi * others + delta`, the marginal price at zero own draw.
    base: f64,
    phi2: f64,
    g2: f64,
    target: f64,
    upper: f64,
}

impl SlotModel {
    fn marginal(&self, x: f64) -> f64 {
        self.base + self.phi2 * x - self.g2 * (self.target - x).max(0.0)
    }

    /// Draw whose marginal cost equals `nu`, clipped to `[0, upper]`.
    fn draw(&self, nu: f64) -> (f64, Regime) {
        let kink = self.base + self.phi2 * self.target;
        let (x, regime) = if self.target > 0.0 && nu < kink {
            ((nu - self.base + self.g2 * self.target) / (self.phi2 + self.g2), Regime::Below)
        } else {
            ((nu - self.base) / self.phi2, Regime::Above)
        };
        if x <= 0.0 {
            (0.0, Regime::Floor)
        } else if x >= self.upper {
            (self.upper, Regime::Ceiling)
        } else {
            (x, regime)
        }
    }
}

fn total_draw(models: &[SlotModel], nu: f64) -> f64 {
    models.iter().map(|m| m.draw(nu).0).sum()
}

fn same_piece(models: &[SlotModel], lo: f64, hi: f64) -> bool {
    models.iter().all(|m| m.draw(lo).1 == m.draw(hi).1)
}

#[cfg(test)]
fn solve_window(models: &[SlotModel], budget: f64) -> Vec<f64> {
    solve_window_regimes(models, budget).0
}

/// Minimises the summed slot costs subject to `sum x = budget`, also
/// reporting which piece of its marginal each slot ends on.
/// Requires `0 <= budget <= sum upper`.
fn solve_window_regimes(models: &[SlotModel], budget: f64) -> (Vec<f64>, Vec<Regime>) {
    let capacity: f64 = models.iter().map(|m| m.upper).sum();
    if budget <= 0.0 {
        return (vec![0.0; models.len()], vec![Regime::Floor; models.len()]);
    }
    if budget >= capacity {
        return (
            models.iter().map(|m| m.upper).collect(),
            vec![Regime::Ceiling; models.len()],
        );
    }

    let mut lo = models.iter().map(|m| m.marginal(0.0)).fold(f64::INFINITY, f64::min);
    let mut hi = models
        .iter()
        .map(|m| m.marginal(m.upper))
        .fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..MAX_BISECTION {
        if hi - lo <= LAMBDA_TOL || same_piece(models, lo, hi) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if total_draw(models, mid) < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    // The total draw is affine on [lo, hi]; land on the budget exactly.
    let (s_lo, s_hi) = (total_draw(models, lo), total_draw(models, hi));
    let nu = if s_hi > s_lo {
        (lo + (budget - s_lo) / (s_hi - s_lo) * (hi - lo)).clamp(lo, hi)
    } else {
        hi
    };
    let (mut x, regimes): (Vec<f64>, Vec<Regime>) = models.iter().map(|m| m.draw(nu)).unzip();

    // Spread the rounding residue over the slots strictly inside the box.
    let residual = budget - x.iter().sum::<f64>();
    let free: Vec<usize> = (0..x.len())
        .filter(|&k| x[k] > 0.0 && x[k] < models[k].upper)
        .collect();
    if !free.is_empty() && residual != 0.0 {
        let share = residual / free.len() as f64;
        for k in free {
            x[k] = (x[k] + share).clamp(0.0, models[k].upper);
        }
    }
    (x, regimes)
}

fn respond(
    scenario: &Scenario,
    aggregator: usize,
    start: usize,
    others: &[f64],
    targets: &[f64],
) -> Result<Vec<f64>> {
    Ok(respond_regimes(scenario, aggregator, start, others, targets)?.0)
}

fn respond_regimes(
    scenario: &Scenario,
    aggregator: usize,
    start: usize,
    others: &[f64],
    targets: &[f64],
) -> Result<(Vec<f64>, Vec<Regime>)> {
    let agg = &scenario.aggregators[aggregator];
    let grid = &scenario.grid;
    let offset = start - 1;
    let upper = agg.max_draw_kwh(scenario.slot_hours);
    let budget = agg.grid_budget_kwh();
    let capacity = upper * others.len() as f64;
    if budget > capacity * (1.0 + 1e-12) {
        return Err(Error::InfeasibleBudget { aggregator, budget, capacity });
    }
    let models: Vec<SlotModel> = others
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(k, (&o, &target))| {
            let t = offset + k;
            let phi = grid.phi_cents_per_kwh2[t];
            SlotModel {
                base: phi * o + grid.delta_cents_per_kwh[t],
                phi2: 2.0 * phi,
                g2: 2.0 * agg.deviation_weights[t],
                target,
                upper,
            }
        })
        .collect();
    Ok(solve_window_regimes(&models, budget))
}

/// Payoff-maximising profile of one aggregator over `[start, T]` against
/// fixed loads of everyone else (`others_loads`, base load included) and
/// fixed targets.
pub fn best_response(
    scenario: &Scenario,
    aggregator: usize,
    start: usize,
    others_loads: &[f64],
    targets: &TargetSchedule,
) -> Result<ChargingProfile> {
    let horizon = scenario.horizon_slots;
    if aggregator >= scenario.num_aggregators() {
        return Err(Error::Domain(format!("no aggregator {aggregator}")));
    }
    if start == 0 || start > horizon {
        return Err(Error::Domain(format!("start slot {start} outside 1..={horizon}")));
    }
    let window = horizon - start + 1;
    for len in [others_loads.len(), targets.targets.len()] {
        if len != window {
            return Err(Error::SpanMismatch { expected: window, found: len });
        }
    }
    if targets.start != start {
        return Err(Error::SpanMismatch { expected: start, found: targets.start });
    }
    if let Some(&bad) = others_loads.iter().find(|&&o| !(o >= 0.0)) {
        return Err(Error::Domain(format!("others' load must be nonnegative, got {bad}")));
    }
    if scenario.grid.phi_cents_per_kwh2[start - 1..].iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Domain("price curvature must be positive".into()));
    }
    let values = respond(scenario, aggregator, start, others_loads, &targets.targets)?;
    Ok(ChargingProfile { start, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Initialization {
    /// Each aggregator spreads its budget evenly over its window.
    Uniform,
    /// A random point of each aggregator's feasible set.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerOptions {
    /// Stop once `|x_k - x_{k-1}| / |x_k| <= eps_alg`.
    pub eps_alg: f64,
    pub max_sweeps: usize,
    /// A solution is certified when every aggregator's best-response gap is
    /// at most `cert_rel_tol * |payoff| + CERT_ABS_FLOOR`.
    pub cert_rel_tol: f64,
    pub init: Initialization,
    /// Number of past sweeps mixed into the next evaluation point
    /// (Anderson acceleration); 0 gives plain synchronous sweeps.
    pub memory: usize,
    /// Keep every sweep's profiles in [`SubgameSolution::iterates`].
    pub record_iterates: bool,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            eps_alg: 1e-6,
            max_sweeps: 500,
            cert_rel_tol: 1e-6,
            init: Initialization::Uniform,
            memory: 8,
            record_iterates: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgameSolution {
    pub profiles: Vec<ChargingProfile>,
    pub payoffs: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Largest payoff any aggregator could gain by deviating unilaterally.
    pub br_gap: f64,
    pub converged: bool,
    pub certified: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iterates: Vec<Vec<ChargingProfile>>,
}

pub(crate) fn check_starts(scenario: &Scenario, starts: &StartProfile) -> Result<()> {
    if starts.0.len() != scenario.num_aggregators() {
        return Err(Error::InvalidStartProfile(format!(
            "{} starts for {} aggregators",
            starts.0.len(),
            scenario.num_aggregators()
        )));
    }
    for (i, (&s, agg)) in starts.0.iter().zip(&scenario.aggregators).enumerate() {
        if !agg.start_slots(scenario.horizon_slots).contains(&s) {
            return Err(Error::InvalidStartProfile(format!(
                "aggregator {i} cannot start in slot {s} (admissible 1..={})",
                agg.latest_start(scenario.horizon_slots)
            )));
        }
    }
    Ok(())
}

fn random_profile(budget: f64, upper: f64, n: usize, draws: &mut Draws) -> Vec<f64> {
    // Convex combination of the even spread and a few greedy vertices
    // (slots filled to the bound in random order), all feasible.
    const VERTICES: usize = 3;
    let mut weights: Vec<f64> = (0..=VERTICES).map(|_| draws.unit() + 1e-3).collect();
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);

    let mut x = vec![weights[0] * budget / n as f64; n];
    for &w in &weights[1..] {
        let mut remaining = budget;
        for k in draws.permutation(n) {
            let d = remaining.min(upper);
            x[k] += w * d;
            remaining -= d;
        }
    }
    x
}

fn initial_profiles(
    scenario: &Scenario,
    starts: &StartProfile,
    init: &Initialization,
) -> Vec<ChargingProfile> {
    let horizon = scenario.horizon_slots;
    let mut draws = match init {
        Initialization::Random { seed } => Some(Draws::new(*seed)),
        Initialization::Uniform => None,
    };
    starts
        .0
        .iter()
        .zip(&scenario.aggregators)
        .map(|(&start, agg)| {
            let budget = agg.grid_budget_kwh();
            match draws.as_mut() {
                None => ChargingProfile::uniform(start, horizon, budget),
                Some(d) => ChargingProfile {
                    start,
                    values: random_profile(
                        budget,
                        agg.max_draw_kwh(scenario.slot_hours),
                        horizon + 1 - start,
                        d,
                    ),
                },
            }
        })
        .collect()
}

/// Per-aggregator loads over the full horizon.
fn horizon_loads(scenario: &Scenario, profiles: &[ChargingProfile]) -> Vec<Vec<f64>> {
    profiles
        .iter()
        .map(|p| p.to_horizon(scenario.horizon_slots))
        .collect()
}

/// Base load plus every aggregator except `skip`, over the full horizon.
fn others_load(scenario: &Scenario, loads: &[Vec<f64>], skip: usize) -> Vec<f64> {
    let mut others = scenario.grid.base_load_kwh.clone();
    for (j, l) in loads.iter().enumerate() {
        if j != skip {
            others.iter_mut().zip(l).for_each(|(o, x)| *o += x);
        }
    }
    others
}

fn flatten(profiles: &[ChargingProfile]) -> Vec<f64> {
    profiles.iter().flat_map(|p| p.values.iter().copied()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One synchronous sweep: every aggregator answers the loads of `point` with
/// targets taken from its own profile in `point`.
fn sweep(
    scenario: &Scenario,
    point: &[ChargingProfile],
) -> Result<(Vec<ChargingProfile>, Vec<Vec<Regime>>)> {
    let loads = horizon_loads(scenario, point);
    let mut regimes = Vec::with_capacity(point.len());
    let profiles = point
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let agg = &scenario.aggregators[i];
            let others = others_load(scenario, &loads, i);
            let targets = targets_from(agg.grid_budget_kwh(), &p.values);
            let (values, r) = respond_regimes(scenario, i, p.start, &others[p.offset()..], &targets)?;
            regimes.push(r);
            Ok(ChargingProfile { start: p.start, values })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((profiles, regimes))
}

/// Fixed point of the sweep map with every slot's regime frozen.
///
/// With regimes fixed the sweep is affine, `z' = M z + c`: free slots sit
/// at `h (nu - base + 2 g b target)` with `h = 1 / (2 phi + 2 g b)`
/// (`b = 1` below target), the multiplier `nu` is pinned by the budget,
/// `base` is affine in the others' draws and `target` in the aggregator's
/// own earlier draws. Solves `(I - M) z = c`.
fn frozen_fixed_point(
    scenario: &Scenario,
    point: &[ChargingProfile],
    regimes: &[Vec<Regime>],
) -> Option<Vec<f64>> {
    let grid = &scenario.grid;
    let offsets: Vec<usize> = point
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.values.len();
            Some(o)
        })
        .collect();
    let dim: usize = point.iter().map(|p| p.values.len()).sum();
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    let mut c = DVector::<f64>::zeros(dim);

    for (i, p) in point.iter().enumerate() {
        let agg = &scenario.aggregators[i];
        let budget = agg.grid_budget_kwh();
        let upper = agg.max_draw_kwh(scenario.slot_hours);
        let n = p.values.len();
        let row0 = offsets[i];
        let free: Vec<usize> = (0..n)
            .filter(|&k| matches!(regimes[i][k], Regime::Below | Regime::Above))
            .collect();
        let ceiling = (0..n).filter(|&k| regimes[i][k] == Regime::Ceiling).count();
        for k in 0..n {
            if regimes[i][k] == Regime::Ceiling {
                c[row0 + k] = upper;
            }
        }
        if free.is_empty() {
            continue;
        }

        // Affine forms (constant, coefficients over z) for base and target.
        let base = |k: usize, coef: &mut DVector<f64>| -> f64 {
            let t = p.offset() + k;
            let phi = grid.phi_cents_per_kwh2[t];
            for (j, q) in point.iter().enumerate() {
                if j != i && t >= q.offset() {
                    coef[offsets[j] + t - q.offset()] += phi;
                }
            }
            phi * grid.base_load_kwh[t] + grid.delta_cents_per_kwh[t]
        };
        let mut drawn = 0.0;
        let mut positive = vec![false; n];
        for k in 0..n {
            positive[k] = budget - drawn > 0.0;
            drawn += p.values[k];
        }
        let target = |k: usize, coef: &mut DVector<f64>, scale: f64| -> f64 {
            if !positive[k] {
                return 0.0;
            }
            let rem = (n - k) as f64;
            for s in 0..k {
                coef[row0 + s] -= scale / rem;
            }
            scale * budget / rem
        };

        // nu = (B' + sum h base - sum h g2 b target) / H
        let mut nu = DVector::<f64>::zeros(dim);
        let mut nu_c = budget - ceiling as f64 * upper;
        let mut h_sum = 0.0;
        let slot_h = |k: usize| -> (f64, f64) {
            let t = p.offset() + k;
            let g2 = if regimes[i][k] == Regime::Below { 2.0 * agg.deviation_weights[t] } else { 0.0 };
            (1.0 / (2.0 * grid.phi_cents_per_kwh2[t] + g2), g2)
        };
        for &k in &free {
            let (h, g2) = slot_h(k);
            h_sum += h;
            let mut coef = DVector::zeros(dim);
            nu_c += h * base(k, &mut coef);
            nu += coef * h;
            if g2 > 0.0 {
                let mut coef = DVector::zeros(dim);
                nu_c -= target(k, &mut coef, h * g2);
                nu -= coef;
            }
        }
        nu /= h_sum;
        nu_c /= h_sum;

        for &k in &free {
            let (h, g2) = slot_h(k);
            let mut row = &nu * h;
            let mut coef = DVector::zeros(dim);
            let mut cst = h * nu_c - h * base(k, &mut coef);
            row -= coef * h;
            if g2 > 0.0 {
                let mut coef = DVector::zeros(dim);
                cst += target(k, &mut coef, h * g2);
                row += coef;
            }
            m.set_row(row0 + k, &row.transpose());
            c[row0 + k] = cst;
        }
    }

    let lhs = DMatrix::<f64>::identity(dim, dim) - m;
    lhs.lu().solve(&c).map(|z| z.iter().copied().collect())
}

/// Anderson mixing of the last few sweeps: the next evaluation point is the
/// combination of past sweep outputs whose residuals best cancel.
struct Mixer {
    memory: usize,
    d_out: Vec<Vec<f64>>,
    d_res: Vec<Vec<f64>>,
    last: Option<(Vec<f64>, Vec<f64>)>,
}

impl Mixer {
    fn new(memory: usize) -> Self {
        Self { memory, d_out: Vec::new(), d_res: Vec::new(), last: None }
    }

    fn reset(&mut self) {
        self.d_out.clear();
        self.d_res.clear();
        self.last = None;
    }

    /// Takes a sweep output and its residual (output minus input) and
    /// returns the next input.
    fn next(&mut self, out: Vec<f64>, res: Vec<f64>) -> Vec<f64> {
        if self.memory == 0 {
            return out;
        }
        if let Some((o, r)) = self.last.take() {
            self.d_out.push(out.iter().zip(&o).map(|(a, b)| a - b).collect());
            self.d_res.push(res.iter().zip(&r).map(|(a, b)| a - b).collect());
            if self.d_out.len() > self.memory {
                self.d_out.remove(0);
                self.d_res.remove(0);
            }
        }
        let mut point = out.clone();
        let m = self.d_res.len();
        if m > 0 {
            let dim = res.len();
            let a = DMatrix::from_fn(dim, m, |r, c| self.d_res[c][r]);
            let b = DVector::from_column_slice(&res);
            if let Ok(gamma) = a.svd(true, true).solve(&b, 1e-12) {
                for (c, g) in gamma.iter().enumerate() {
                    point.iter_mut().zip(&self.d_out[c]).for_each(|(p, d)| *p -= g * d);
                }
            }
        }
        self.last = Some((out, res));
        point
    }
}

fn unflatten(like: &[ChargingProfile], flat: &[f64]) -> Vec<ChargingProfile> {
    let mut at = 0;
    like.iter()
        .map(|p| {
            let n = p.values.len();
            let values = flat[at..at + n].to_vec();
            at += n;
            ChargingProfile { start: p.start, values }
        })
        .collect()
}

/// Payoffs `-C_i` of a profile set, with each aggregator's targets taken
/// from its own profile.
pub fn profile_payoffs(scenario: &Scenario, profiles: &[ChargingProfile]) -> Vec<f64> {
    let loads = horizon_loads(scenario, profiles);
    profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let agg = &scenario.aggregators[i];
            let others = others_load(scenario, &loads, i);
            let targets = targets_from(agg.grid_budget_kwh(), &p.values);
            -window_cost(
                p.offset(),
                &p.values,
                &others[p.offset()..],
                &targets,
                &scenario.grid,
                &agg.deviation_weights,
            )
        })
        .collect()
}

/// For each aggregator, the payoff gained by switching to its best response
/// against the others' profiles (targets held at their self-consistent values).
pub fn best_response_gaps(scenario: &Scenario, profiles: &[ChargingProfile]) -> Result<Vec<f64>> {
    let loads = horizon_loads(scenario, profiles);
    profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let agg = &scenario.aggregators[i];
            let others = &others_load(scenario, &loads, i)[p.offset()..];
            let targets = targets_from(agg.grid_budget_kwh(), &p.values);
            let br = respond(scenario, i, p.start, others, &targets)?;
            let cost = |x: &[f64]| {
                window_cost(p.offset(), x, others, &targets, &scenario.grid, &agg.deviation_weights)
            };
            Ok((cost(&p.values) - cost(&br)).max(0.0))
        })
        .collect()
}

/// Certified best-response gap of a solution: the largest unilateral payoff
/// improvement available to any aggregator.
pub fn verify_equilibrium(scenario: &Scenario, solution: &SubgameSolution) -> Result<f64> {
    Ok(best_response_gaps(scenario, &solution.profiles)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Runs synchronous best-response sweeps for the subgame induced by `starts`.
pub fn solve_subgame(
    scenario: &Scenario,
    starts: &StartProfile,
    options: &InnerOptions,
) -> Result<SubgameSolution> {
    check_starts(scenario, starts)?;
    let mut profiles = initial_profiles(scenario, starts, &options.init);
    let mut iterates = Vec::new();
    if options.record_iterates {
        iterates.push(profiles.clone());
    }

    // Each step evaluates one sweep at `point`. Sweep outputs are always
    // feasible and are what gets returned; `point` is an extrapolation: the
    // frozen-regime fixed point when it helps, Anderson mixing otherwise.
    let mut point = profiles.clone();
    let mut mixer = Mixer::new(options.memory);
    let mut previous = f64::INFINITY;
    let mut stalls = 0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_sweeps {
        let (next, regimes) = sweep(scenario, &point)?;
        iterations += 1;
        let out = flatten(&next);
        let res: Vec<f64> = out.iter().zip(flatten(&point)).map(|(a, b)| a - b).collect();
        let out_norm = norm(&out);
        residual = if out_norm > 0.0 { norm(&res) / out_norm } else { norm(&res) };
        profiles = next;
        if options.record_iterates {
            iterates.push(profiles.clone());
        }
        if residual <= options.eps_alg {
            converged = true;
            break;
        }
        if residual >= previous {
            stalls += 1;
        }
        previous = residual;
        let newton = if stalls < MAX_STALLS {
            frozen_fixed_point(scenario, &point, &regimes)
        } else {
            None
        };
        let flat = match newton {
            Some(z) if z.iter().all(|v| v.is_finite()) => {
                mixer.reset();
                z
            }
            _ => mixer.next(out, res),
        };
        point = unflatten(&profiles, &flat);
    }

    let payoffs = profile_payoffs(scenario, &profiles);
    let gaps = best_response_gaps(scenario, &profiles)?;
    let certified = gaps
        .iter()
        .zip(&payoffs)
        .all(|(g, u)| *g <= options.cert_rel_tol * u.abs() + CERT_ABS_FLOOR);
    Ok(SubgameSolution {
        profiles,
        payoffs,
        iterations,
        residual,
        br_gap: gaps.into_iter().fold(0.0, f64::max),
        converged,
        certified,
        iterates,
    })
}
