//! First-stage start-time game over a complete payoff table.
//!
//! Each aggregator mixes over its admissible start slots. Under expected
//! utility the value of a mixed profile is the plain expectation of the
//! table; under prospect theory each aggregator distorts its opponents'
//! probabilities with a Prelec weight (own probability untouched, no
//! renormalisation). Equilibria are approached by an inertia-weighted
//! best-reply iteration with step `beta / (k + 1)` and certified by the
//! largest pure-deviation gain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on `sum a = 1` when validating a strategy.
pub const PROB_TOL: f64 = 1e-12;
/// Relative tolerance under which two pure-strategy values count as tied.
pub const TIE_TOL: f64 = 1e-12;

/// Dense first-stage payoffs `F_i(sigma)`, one lexicographically ordered
/// array per aggregator (last aggregator's slot varies fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffTable {
    dims: Vec<usize>,
    payoffs: Vec<Vec<f64>>,
    /// `own_last[i]` holds `payoffs[i]` with axis `i` moved to the end, so
    /// that every contraction against the opponents is a contiguous axpy.
    own_last: Vec<Vec<f64>>,
    digest: String,
}

impl PayoffTable {
    pub fn new(dims: Vec<usize>, payoffs: Vec<Vec<f64>>, digest: impl Into<String>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Domain(format!("start-set sizes must be positive, got {dims:?}")));
        }
        if payoffs.len() != dims.len() {
            return Err(Error::Domain(format!(
                "{} payoff arrays for {} players",
                payoffs.len(),
                dims.len()
            )));
        }
        let k: usize = dims.iter().product();
        if let Some(bad) = payoffs.iter().find(|p| p.len() != k) {
            return Err(Error::SpanMismatch { expected: k, found: bad.len() });
        }
        let own_last = (0..dims.len()).map(|i| move_axis_last(&payoffs[i], &dims, i)).collect();
        Ok(Self { dims, payoffs, own_last, digest: digest.into() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_players(&self) -> usize {
        self.dims.len()
    }

    pub fn num_profiles(&self) -> usize {
        self.payoffs[0].len()
    }

    pub fn payoffs(&self, player: usize) -> &[f64] {
        &self.payoffs[player]
    }

    /// Digest of the tensor the table was read from.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Median of `|F_i(sigma)|` pooled over all players and profiles.
    pub fn median_abs_payoff(&self) -> f64 {
        let mut all: Vec<f64> = self.payoffs.iter().flatten().map(|f| f.abs()).collect();
        all.sort_by(f64::total_cmp);
        let n = all.len();
        if n % 2 == 1 {
            all[n / 2]
        } else {
            0.5 * (all[n / 2 - 1] + all[n / 2])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedStrategy {
    /// `probs[k]` is the probability of starting in slot `k + 1`.
    pub probs: Vec<f64>,
}

impl MixedStrategy {
    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    /// All mass on the 1-based `slot`.
    pub fn pure(n: usize, slot: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[slot - 1] = 1.0;
        Self { probs }
    }

    /// 1-based slot with the largest probability (smallest slot on ties).
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Domain(format!("probabilities outside [0,1]: {:?}", self.probs)));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL * self.probs.len().max(1) as f64 {
            return Err(Error::Domain(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn renormalize(&mut self) {
        let sum: f64 = self.probs.iter().sum();
        self.probs.iter_mut().for_each(|p| *p /= sum);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Eut,
    Pt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorModel {
    pub kind: ModelKind,
    /// Prelec parameter per aggregator; ignored under expected utility.
    pub alphas: Vec<f64>,
}

impl BehaviorModel {
    pub fn eut(n: usize) -> Self {
        Self { kind: ModelKind::Eut, alphas: vec![1.0; n] }
    }

    pub fn pt(alphas: Vec<f64>) -> Result<Self> {
        let m = Self { kind: ModelKind::Pt, alphas };
        m.validate()?;
        Ok(m)
    }

    pub fn pt_uniform(alpha: f64, n: usize) -> Result<Self> {
        Self::pt(vec![alpha; n])
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&a) = self.alphas.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Domain(format!("alpha {a} outside (0,1]")));
        }
        Ok(())
    }

    /// Probability as perceived by `player`.
    fn perceive(&self, player: usize, p: f64) -> f64 {
        match self.kind {
            ModelKind::Eut => p,
            ModelKind::Pt => prelec(p, self.alphas[player]),
        }
    }
}

/// Prelec weight `exp(-(-ln p)^alpha)`, with `w(0) = 0` and `w(1) = 1`.
pub fn prelec_weight(p: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0,1]")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} outside (0,1]")));
    }
    Ok(prelec(p, alpha))
}

fn prelec(p: f64, alpha: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else if p >= 1.0 {
        1.0
    } else if alpha == 1.0 {
        // Keeps the identity case bit-exact.
        p
    } else {
        (-(-p.ln()).powf(alpha)).exp()
    }
}

fn check_inputs(table: &PayoffTable, strategies: &[MixedStrategy], model: &BehaviorModel) -> Result<()> {
    if strategies.len() != table.num_players() {
        return Err(Error::Domain(format!(
            "{} strategies for {} players",
            strategies.len(),
            table.num_players()
        )));
    }
    for (s, &d) in strategies.iter().zip(table.dims()) {
        if s.probs.len() != d {
            return Err(Error::SpanMismatch { expected: d, found: s.probs.len() });
        }
        s.validate()?;
    }
    if model.kind == ModelKind::Pt && model.alphas.len() != table.num_players() {
        return Err(Error::Domain(format!(
            "{} alphas for {} players",
            model.alphas.len(),
            table.num_players()
        )));
    }
    model.validate()
}

/// Value of the mixed profile to `player`, summed directly over every
/// start-time profile.
pub fn expected_payoff(
    table: &PayoffTable,
    strategies: &[MixedStrategy],
    model: &BehaviorModel,
    player: usize,
) -> Result<f64> {
    check_inputs(table, strategies, model)?;
    let dims = table.dims();
    let mut digits = vec![0usize; dims.len()];
    let mut total = 0.0;
    for &f in table.payoffs(player) {
        let mut weight = 1.0;
        for (j, &d) in digits.iter().enumerate() {
            let p = strategies[j].probs[d];
            weight *= if j == player { p } else { model.perceive(player, p) };
        }
        total += f * weight;
        for pos in (0..digits.len()).rev() {
            digits[pos] += 1;
            if digits[pos] < dims[pos] {
                break;
            }
            digits[pos] = 0;
        }
    }
    Ok(total)
}

fn move_axis_last(data: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    let d = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer = data.len() / (d * inner);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for s in 0..d {
            for r in 0..inner {
                out[(o * inner + r) * d + s] = data[(o * d + s) * inner + r];
            }
        }
    }
    out
}

/// Contracts the leading axes of `data` (shape `dims` followed by a final
/// axis) against `vectors`, leaving a vector over the final axis.
fn contract_leading(data: &[f64], dims: &[usize], vectors: &[&[f64]]) -> Vec<f64> {
    let mut cur: Option<Vec<f64>> = None;
    for (&d, v) in dims.iter().zip(vectors) {
        let src = cur.as_deref().unwrap_or(data);
        let rest = src.len() / d;
        let mut next = vec![0.0; rest];
        for (s, &w) in v.iter().enumerate() {
            if w != 0.0 {
                next.iter_mut()
                    .zip(&src[s * rest..(s + 1) * rest])
                    .for_each(|(n, x)| *n += w * x);
            }
        }
        cur = Some(next);
    }
    cur.unwrap_or_else(|| data.to_vec())
}

/// `q_i(t, a_{-i})` for every slot of `player`, without input checks.
fn pure_values(table: &PayoffTable, strategies: &[MixedStrategy], model: &BehaviorModel, player: usize) -> Vec<f64> {
    let (dims, vectors): (Vec<usize>, Vec<Vec<f64>>) = strategies
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != player)
        .map(|(j, s)| {
            let v = s.probs.iter().map(|&p| model.perceive(player, p)).collect();
            (table.dims[j], v)
        })
        .unzip();
    let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
    contract_leading(&table.own_last[player], &dims, &refs)
}

/// Value to `player` of starting in the 1-based `slot` while the others play
/// `strategies`; the player's own entry in `strategies` is ignored.
pub fn pure_strategy_payoff(
    table: &PayoffTable,
    slot: usize,
    strategies: &[MixedStrategy],
    model: &BehaviorModel,
    player: usize,
) -> Result<f64> {
    check_inputs(table, strategies, model)?;
    let d = table.dims()[player];
    if slot == 0 || slot > d {
        return Err(Error::Domain(format!("slot {slot} outside 1..={d}")));
    }
    Ok(pure_values(table, strategies, model, player)[slot - 1])
}

/// Index of the largest value; an entry must beat the incumbent by more
/// than `TIE_TOL` (relative) to replace it.
fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v - values[best] > TIE_TOL * values[best].abs().max(v.abs()) {
            best = k;
        }
    }
    best
}

/// Pure best reply of `player`, as a degenerate strategy.
pub fn best_reply_vertex(
    table: &PayoffTable,
    strategies: &[MixedStrategy],
    model: &BehaviorModel,
    player: usize,
) -> Result<MixedStrategy> {
    check_inputs(table, strategies, model)?;
    let q = pure_values(table, strategies, model, player);
    Ok(MixedStrategy::pure(q.len(), argmax_first(&q) + 1))
}

fn gain(q: &[f64], own: &MixedStrategy) -> f64 {
    let value: f64 = q.iter().zip(&own.probs).map(|(q, a)| q * a).sum();
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (best - value).max(0.0)
}

/// Largest gain any player can get from a pure deviation.
pub fn epsilon_certificate(
    table: &PayoffTable,
    strategies: &[MixedStrategy],
    model: &BehaviorModel,
) -> Result<f64> {
    check_inputs(table, strategies, model)?;
    Ok((0..table.num_players())
        .map(|i| gain(&pure_values(table, strategies, model, i), &strategies[i]))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterOptions {
    /// Inertia weight, in (0,1).
    pub beta: f64,
    pub max_iters: usize,
    /// Stop once the certified epsilon is at most this; defaults to
    /// `1e-3 * median |F|`.
    pub eps_target: Option<f64>,
    pub record_trajectory: bool,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            beta: 0.7,
            max_iters: 100_000,
            eps_target: None,
            record_trajectory: false,
        }
    }
}

pub const DEFAULT_EPS_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterSolution {
    pub strategies: Vec<MixedStrategy>,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    pub eps_target: f64,
    pub beta: f64,
    pub model: BehaviorModel,
    pub tensor_digest: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<Vec<MixedStrategy>>,
}

/// Runs `a <- a + beta/(k+1) (z - a)` until the certified epsilon reaches the
/// target or `max_iters` steps have been taken.
///
/// The best-reply vertex `z` at step `k` answers the previous iterate
/// `a^(k-1)` (the initial point for `k = 0`).
pub fn iterate_to_equilibrium(
    table: &PayoffTable,
    init: &[MixedStrategy],
    model: &BehaviorModel,
    options: &OuterOptions,
) -> Result<OuterSolution> {
    check_inputs(table, init, model)?;
    if !(options.beta > 0.0 && options.beta < 1.0) {
        return Err(Error::Domain(format!("beta {} outside (0,1)", options.beta)));
    }
    let eps_target = options
        .eps_target
        .unwrap_or_else(|| DEFAULT_EPS_SCALE * table.median_abs_payoff());
    if !(eps_target >= 0.0) {
        return Err(Error::Domain(format!("eps_target {eps_target} must be nonnegative")));
    }

    let n = table.num_players();
    let mut a = init.to_vec();
    let mut trajectory = Vec::new();
    if options.record_trajectory {
        trajectory.push(a.clone());
    }
    let values = |a: &[MixedStrategy]| -> Vec<Vec<f64>> {
        (0..n).map(|i| pure_values(table, a, model, i)).collect()
    };

    let mut q_prev = values(&a);
    let mut q_cur = q_prev.clone();
    let mut epsilon = certificate(&q_cur, &a);
    let mut k = 0;
    while epsilon > eps_target && k < options.max_iters {
        let step = options.beta / (k + 1) as f64;
        for i in 0..n {
            let z = argmax_first(&q_prev[i]);
            let probs = &mut a[i].probs;
            for (t, p) in probs.iter_mut().enumerate() {
                let target = if t == z { 1.0 } else { 0.0 };
                *p += step * (target - *p);
            }
            a[i].renormalize();
        }
        k += 1;
        if options.record_trajectory {
            trajectory.push(a.clone());
        }
        q_prev = std::mem::replace(&mut q_cur, values(&a));
        epsilon = certificate(&q_cur, &a);
    }

    Ok(OuterSolution {
        strategies: a,
        epsilon,
        iterations: k,
        converged: epsilon <= eps_target,
        eps_target,
        beta: options.beta,
        model: model.clone(),
        tensor_digest: table.digest().to_string(),
        trajectory,
    })
}

fn certificate(q: &[Vec<f64>], a: &[MixedStrategy]) -> f64 {
    q.iter().zip(a).map(|(q, a)| gain(q, a)).fold(0.0, f64::max)
}
