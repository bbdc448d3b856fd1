//! Problem instances: EV fleets, aggregators, the grid tariff and base load.
//!
//! Units are fixed across the crate: energy in kWh, power in kW, time in
//! hours, money in tariff cents. Slot numbers exposed to users are 1-based
//! (`1..=horizon_slots`); vectors indexed by slot use 0-based positions.

use std::fmt;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Draws;

pub const SCHEMA_VERSION: &str = "evgame-scenario/1";

/// Identifies the random stream used by [`generate_instance`]. Any other
/// implementation reproducing this string reproduces the draws:
/// ChaCha20 seeded through `rand_core` 0.6 `seed_from_u64`, unit floats from
/// the top 53 bits of `next_u64`, bounded integers by rejection on `next_u64`.
pub const RNG_ALGORITHM: &str = "chacha20/rand_core-0.6-seed_from_u64/u53-unit/u64-rejection";

/// Relative slack applied before taking `ceil` of a slot count, so that
/// e.g. 9.9 / 1.65 counts as 6 slots rather than 7.
const SLOT_COUNT_SLACK: f64 = 1e-9;

/// Half-hourly base load (kWh per slot) of ~200 households on a spring
/// weekday between 08:00 and 16:00: a morning shoulder, a midday trough and
/// a steeper afternoon ramp toward the evening peak, averaging roughly
/// 0.38 kW per household.
pub const RESIDENTIAL_BASE_LOAD_KWH: [f64; 16] = [
    42.0, 40.0, 38.0, 36.0, 35.0, 34.0, 33.0, 33.0, 33.0, 34.0, 36.0, 38.0, 41.0, 44.0, 47.0, 50.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSpec {
    pub model: String,
    pub max_rate_kw: f64,
    pub capacity_kwh: f64,
    pub initial_soc_frac: f64,
    /// Battery-side energy still needed, `capacity * (1 - soc)`.
    pub demand_kwh: f64,
}

impl EvSpec {
    pub fn new(model: &str, max_rate_kw: f64, capacity_kwh: f64, initial_soc_frac: f64) -> Self {
        Self {
            model: model.to_string(),
            max_rate_kw,
            capacity_kwh,
            initial_soc_frac,
            demand_kwh: capacity_kwh * (1.0 - initial_soc_frac),
        }
    }

    /// Slots needed at full rate.
    pub fn slots_to_full(&self, slot_hours: f64) -> usize {
        slots_needed(self.demand_kwh, self.max_rate_kw, slot_hours)
    }
}

/// `ceil(demand / (rate * slot_hours))`, tolerant to floating-point noise.
pub fn slots_needed(demand_kwh: f64, max_rate_kw: f64, slot_hours: f64) -> usize {
    if demand_kwh <= 0.0 {
        return 0;
    }
    let ratio = demand_kwh / (max_rate_kw * slot_hours);
    (ratio * (1.0 - SLOT_COUNT_SLACK)).ceil() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregator {
    pub id: usize,
    /// Charger efficiency: a grid draw `x` delivers `efficiency * x` to batteries.
    pub efficiency: f64,
    /// Weight of the under-target penalty, one entry per slot.
    pub deviation_weights: Vec<f64>,
    /// Minimum number of slots to finish every EV at full rate.
    pub min_slots: usize,
    pub evs: Vec<EvSpec>,
}

impl Aggregator {
    /// Total battery-side demand of the fleet.
    pub fn demand_kwh(&self) -> f64 {
        self.evs.iter().map(|ev| ev.demand_kwh).sum()
    }

    /// Grid-side energy the aggregator must draw over its window.
    pub fn grid_budget_kwh(&self) -> f64 {
        self.demand_kwh() / self.efficiency
    }

    pub fn fleet_rate_kw(&self) -> f64 {
        self.evs.iter().map(|ev| ev.max_rate_kw).sum()
    }

    /// Upper bound on the grid draw in any single slot.
    pub fn max_draw_kwh(&self, slot_hours: f64) -> f64 {
        self.fleet_rate_kw() * slot_hours / self.efficiency
    }

    pub fn derived_min_slots(&self, slot_hours: f64) -> usize {
        self.evs
            .iter()
            .map(|ev| ev.slots_to_full(slot_hours))
            .max()
            .unwrap_or(0)
    }

    /// Latest admissible start slot. A fleet that needs no energy may start
    /// in any slot, so the value is capped at the horizon.
    pub fn latest_start(&self, horizon: usize) -> usize {
        (horizon + 1).saturating_sub(self.min_slots).clamp(1, horizon)
    }

    pub fn start_slots(&self, horizon: usize) -> RangeInclusive<usize> {
        1..=self.latest_start(horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    pub base_load_kwh: Vec<f64>,
    pub phi_cents_per_kwh2: Vec<f64>,
    pub delta_cents_per_kwh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: String,
    pub horizon_slots: usize,
    pub slot_hours: f64,
    pub seed: u64,
    pub rng_algorithm: String,
    pub grid: GridModel,
    pub aggregators: Vec<Aggregator>,
}

impl Scenario {
    pub fn num_aggregators(&self) -> usize {
        self.aggregators.len()
    }

    /// Sizes of the admissible start-slot sets, in aggregator order.
    pub fn start_set_sizes(&self) -> Vec<usize> {
        self.aggregators
            .iter()
            .map(|a| a.latest_start(self.horizon_slots))
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Peek at the version first so a schema bump reports cleanly instead
        // of as a missing-field error.
        #[derive(Deserialize)]
        struct Header {
            schema_version: String,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: header.schema_version,
                expected: SCHEMA_VERSION.to_string(),
            });
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// SHA-256 over a canonical binary encoding (little-endian integers,
    /// IEEE-754 bit patterns for floats, length-prefixed strings).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let put_str = |h: &mut Sha256, s: &str| {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        };
        let put_f64s = |h: &mut Sha256, v: &[f64]| {
            h.update((v.len() as u64).to_le_bytes());
            for x in v {
                h.update(x.to_bits().to_le_bytes());
            }
        };
        put_str(&mut h, &self.schema_version);
        h.update((self.horizon_slots as u64).to_le_bytes());
        h.update(self.slot_hours.to_bits().to_le_bytes());
        h.update(self.seed.to_le_bytes());
        put_str(&mut h, &self.rng_algorithm);
        put_f64s(&mut h, &self.grid.base_load_kwh);
        put_f64s(&mut h, &self.grid.phi_cents_per_kwh2);
        put_f64s(&mut h, &self.grid.delta_cents_per_kwh);
        h.update((self.aggregators.len() as u64).to_le_bytes());
        for agg in &self.aggregators {
            h.update((agg.id as u64).to_le_bytes());
            h.update(agg.efficiency.to_bits().to_le_bytes());
            put_f64s(&mut h, &agg.deviation_weights);
            h.update((agg.min_slots as u64).to_le_bytes());
            h.update((agg.evs.len() as u64).to_le_bytes());
            for ev in &agg.evs {
                put_str(&mut h, &ev.model);
                put_f64s(
                    &mut h,
                    &[ev.max_rate_kw, ev.capacity_kwh, ev.initial_soc_frac, ev.demand_kwh],
                );
            }
        }
        hex::encode(h.finalize())
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidScenario(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  {}: {}", v.location, v.message)?;
        }
        Ok(())
    }
}

/// Checks every structural invariant and reports all violations found.
pub fn validate(scenario: &Scenario) -> ValidationReport {
    let mut report = ValidationReport::default();
    let horizon = scenario.horizon_slots;

    if scenario.schema_version != SCHEMA_VERSION {
        report.push("schema_version", format!("unsupported version {:?}", scenario.schema_version));
    }
    if horizon == 0 {
        report.push("horizon_slots", "horizon must be at least one slot");
    }
    if !(scenario.slot_hours > 0.0 && scenario.slot_hours.is_finite()) {
        report.push("slot_hours", "slot length must be positive");
    }
    if scenario.aggregators.is_empty() {
        report.push("aggregators", "at least one aggregator is required");
    }

    let grid = &scenario.grid;
    for (name, values) in [
        ("grid.base_load_kwh", &grid.base_load_kwh),
        ("grid.phi_cents_per_kwh2", &grid.phi_cents_per_kwh2),
        ("grid.delta_cents_per_kwh", &grid.delta_cents_per_kwh),
    ] {
        if values.len() != horizon {
            report.push(
                name,
                format!("vector length mismatch: {} entries for {} slots", values.len(), horizon),
            );
        }
        for (t, &v) in values.iter().enumerate() {
            if !(v > 0.0 && v.is_finite()) {
                report.push(format!("{name}[{t}]"), format!("must be strictly positive, got {v}"));
            }
        }
    }

    for (i, agg) in scenario.aggregators.iter().enumerate() {
        let loc = format!("aggregators[{i}]");
        if agg.id != i {
            report.push(format!("{loc}.id"), format!("id {} does not match position {i}", agg.id));
        }
        if !(agg.efficiency > 0.0 && agg.efficiency <= 1.0) {
            report.push(format!("{loc}.efficiency"), "efficiency out of (0,1]");
        }
        if agg.deviation_weights.len() != horizon {
            report.push(
                format!("{loc}.deviation_weights"),
                format!(
                    "vector length mismatch: {} entries for {} slots",
                    agg.deviation_weights.len(),
                    horizon
                ),
            );
        }
        for (t, &g) in agg.deviation_weights.iter().enumerate() {
            if !(g > 0.0 && g.is_finite()) {
                report.push(format!("{loc}.deviation_weights[{t}]"), "deviation weight must be positive");
            }
        }
        for (v, ev) in agg.evs.iter().enumerate() {
            let evloc = format!("{loc}.evs[{v}]");
            if !(ev.max_rate_kw > 0.0) {
                report.push(format!("{evloc}.max_rate_kw"), "max rate must be positive");
            }
            if !(ev.capacity_kwh > 0.0) {
                report.push(format!("{evloc}.capacity_kwh"), "capacity must be positive");
            }
            if !(0.0..=1.0).contains(&ev.initial_soc_frac) {
                report.push(format!("{evloc}.initial_soc_frac"), "initial SOC out of [0,1]");
            }
            let expected = ev.capacity_kwh * (1.0 - ev.initial_soc_frac);
            if (ev.demand_kwh - expected).abs() > 1e-9 * ev.capacity_kwh.abs().max(1.0) {
                report.push(
                    format!("{evloc}.demand_kwh"),
                    format!("demand {} differs from capacity*(1-soc) = {expected}", ev.demand_kwh),
                );
            }
        }
        if scenario.slot_hours > 0.0 {
            let derived = agg.derived_min_slots(scenario.slot_hours);
            if agg.min_slots != derived {
                report.push(
                    format!("{loc}.min_slots"),
                    format!("min_slots {} differs from derived value {derived}", agg.min_slots),
                );
            }
        }
        if agg.min_slots > horizon {
            report.push(
                format!("{loc}.min_slots"),
                format!("min_slots {} exceeds horizon {horizon}: no feasible start slot", agg.min_slots),
            );
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvType {
    pub name: String,
    pub max_rate_kw: f64,
    pub capacity_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub horizon_slots: usize,
    pub slot_hours: f64,
    pub ev_types: Vec<EvType>,
    /// `fleets[i][k]` is the number of EVs of `ev_types[k]` at aggregator `i`.
    pub fleets: Vec<Vec<usize>>,
    pub efficiency: f64,
    pub phi_cents_per_kwh2: f64,
    pub delta_cents_per_kwh: f64,
    pub base_load_kwh: Vec<f64>,
    /// Inclusive integer range for the per-aggregator deviation weight.
    pub deviation_weight_range: (u32, u32),
    /// When set, each aggregator's SOC draws are repeated until its fleet
    /// needs exactly this many slots.
    #[serde(default)]
    pub target_min_slots: Option<Vec<usize>>,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u64,
}

fn default_max_attempts() -> u64 {
    1_000_000
}

impl GenerationConfig {
    /// Five workplace aggregators of ten EVs each over 08:00-16:00 in
    /// half-hour slots. Fleet start sets are conditioned to the sizes
    /// {5, 7, 10, 8, 11}.
    pub fn paper_default() -> Self {
        Self {
            horizon_slots: 16,
            slot_hours: 0.5,
            ev_types: vec![
                EvType { name: "Toyota Prius".into(), max_rate_kw: 3.8, capacity_kwh: 4.4 },
                EvType { name: "Chevrolet Volt".into(), max_rate_kw: 3.8, capacity_kwh: 16.0 },
                EvType { name: "Nissan Leaf".into(), max_rate_kw: 3.3, capacity_kwh: 24.0 },
            ],
            fleets: vec![vec![2, 3, 5], vec![2, 5, 3], vec![3, 2, 5], vec![3, 5, 2], vec![5, 3, 2]],
            efficiency: 0.864,
            phi_cents_per_kwh2: 0.2,
            delta_cents_per_kwh: 0.2,
            base_load_kwh: RESIDENTIAL_BASE_LOAD_KWH.to_vec(),
            deviation_weight_range: (10, 20),
            target_min_slots: Some(vec![12, 10, 7, 9, 6]),
            max_attempts: default_max_attempts(),
        }
    }

    /// A three-aggregator, ten-slot instance for quick experiments.
    pub fn small() -> Self {
        Self {
            horizon_slots: 10,
            slot_hours: 0.5,
            ev_types: vec![
                EvType { name: "Toyota Prius".into(), max_rate_kw: 3.8, capacity_kwh: 4.4 },
                EvType { name: "Chevrolet Volt".into(), max_rate_kw: 3.8, capacity_kwh: 16.0 },
            ],
            fleets: vec![vec![2, 1], vec![1, 2], vec![3, 0]],
            efficiency: 0.864,
            phi_cents_per_kwh2: 0.2,
            delta_cents_per_kwh: 0.2,
            base_load_kwh: vec![9.0, 8.5, 8.0, 7.5, 7.0, 6.8, 7.0, 7.4, 7.8, 8.4],
            deviation_weight_range: (10, 20),
            target_min_slots: None,
            max_attempts: default_max_attempts(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper-default" => Some(Self::paper_default()),
            "small" => Some(Self::small()),
            _ => None,
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.horizon_slots == 0 {
            return bad("horizon must be at least one slot".into());
        }
        if !(self.slot_hours > 0.0) {
            return bad(format!("slot length must be positive, got {}", self.slot_hours));
        }
        if !(self.phi_cents_per_kwh2 > 0.0) || !(self.delta_cents_per_kwh > 0.0) {
            return bad("tariff constants must be positive".into());
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return bad(format!("efficiency {} out of (0,1]", self.efficiency));
        }
        if self.base_load_kwh.len() != self.horizon_slots {
            return bad(format!(
                "base load has {} entries for {} slots",
                self.base_load_kwh.len(),
                self.horizon_slots
            ));
        }
        if self.base_load_kwh.iter().any(|&b| !(b > 0.0)) {
            return bad("base load must be strictly positive".into());
        }
        if self.fleets.is_empty() {
            return bad("at least one aggregator is required".into());
        }
        for (i, fleet) in self.fleets.iter().enumerate() {
            if fleet.len() != self.ev_types.len() {
                return bad(format!("fleet {i} lists {} counts for {} EV types", fleet.len(), self.ev_types.len()));
            }
        }
        for ty in &self.ev_types {
            if !(ty.max_rate_kw > 0.0) || !(ty.capacity_kwh > 0.0) {
                return bad(format!("EV type {:?} needs positive rate and capacity", ty.name));
            }
        }
        let (lo, hi) = self.deviation_weight_range;
        if lo == 0 || lo > hi {
            return bad(format!("deviation weight range ({lo}, {hi}) must be positive and ordered"));
        }
        if let Some(targets) = &self.target_min_slots {
            if targets.len() != self.fleets.len() {
                return bad("target_min_slots must list one entry per aggregator".into());
            }
        }
        Ok(())
    }
}

/// Builds a random instance. Draw order: for each aggregator, one SOC per
/// EV (fleet order, repeated while `target_min_slots` rejects the fleet),
/// then one deviation weight shared by all slots.
pub fn generate_instance(config: &GenerationConfig, seed: u64) -> Result<Scenario> {
    config.check()?;
    let horizon = config.horizon_slots;
    let mut rng = Draws::new(seed);
    let mut aggregators = Vec::with_capacity(config.fleets.len());

    for (i, fleet) in config.fleets.iter().enumerate() {
        let types: Vec<&EvType> = fleet
            .iter()
            .zip(&config.ev_types)
            .flat_map(|(&count, ty)| std::iter::repeat(ty).take(count))
            .collect();
        let wanted = config.target_min_slots.as_ref().map(|t| t[i]);

        let mut attempts = 0u64;
        let (evs, min_slots) = loop {
            attempts += 1;
            let evs: Vec<EvSpec> = types
                .iter()
                .map(|ty| EvSpec::new(&ty.name, ty.max_rate_kw, ty.capacity_kwh, rng.unit()))
                .collect();
            let min_slots = evs
                .iter()
                .map(|ev| ev.slots_to_full(config.slot_hours))
                .max()
                .unwrap_or(0);
            match wanted {
                Some(w) if w != min_slots => {
                    if attempts >= config.max_attempts {
                        return Err(Error::InvalidConfig(format!(
                            "aggregator {i}: no SOC draw reached {w} slots in {attempts} attempts"
                        )));
                    }
                }
                _ => break (evs, min_slots),
            }
        };
        if min_slots > horizon {
            return Err(Error::NoFeasibleStart { aggregator: i, min_slots, horizon });
        }

        let (lo, hi) = config.deviation_weight_range;
        let g = f64::from(rng.int_inclusive(lo, hi));
        aggregators.push(Aggregator {
            id: i,
            efficiency: config.efficiency,
            deviation_weights: vec![g; horizon],
            min_slots,
            evs,
        });
    }

    Ok(Scenario {
        schema_version: SCHEMA_VERSION.to_string(),
        horizon_slots: horizon,
        slot_hours: config.slot_hours,
        seed,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        grid: GridModel {
            base_load_kwh: config.base_load_kwh.clone(),
            phi_cents_per_kwh2: vec![config.phi_cents_per_kwh2; horizon],
            delta_cents_per_kwh: vec![config.delta_cents_per_kwh; horizon],
        },
        aggregators,
    })
}
