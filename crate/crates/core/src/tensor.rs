//! First-stage payoffs: one certified subgame equilibrium per start-time
//! profile, with an append-only cache file for resumable builds.
//!
//! Cache layout (all integers and floats little-endian, floats as raw
//! IEEE-754 bits):
//!
//! ```text
//! header  magic "EVGTENSR" | version u32 | N u32 | T u32 | K u64 | scenario sha256 [32]
//! record  starts N x u16 | payoffs N x f64 | loads N*T x f64 | sweeps u32 | residual f64 | br_gap f64
//! ```
//!
//! Loads are per-aggregator over the full horizon, aggregator-major. A
//! trailing partial record (an interrupted write) is ignored and
//! overwritten on resume.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inner::{solve_subgame, InnerOptions};
use crate::outer::PayoffTable;
use crate::scenario::Scenario;

pub const CACHE_MAGIC: [u8; 8] = *b"EVGTENSR";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8 + 32;

/// One start slot (1-based) per aggregator.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StartProfile(pub Vec<usize>);

/// Lexicographic walk over `{1..=d_1} x ... x {1..=d_N}`, last coordinate fastest.
#[derive(Debug, Clone)]
pub struct ProfileIter {
    dims: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl ProfileIter {
    pub fn new(dims: &[usize]) -> Self {
        let next = if dims.iter().all(|&d| d > 0) {
            Some(vec![1; dims.len()])
        } else {
            None
        };
        Self { dims: dims.to_vec(), next }
    }
}

impl Iterator for ProfileIter {
    type Item = StartProfile;

    fn next(&mut self) -> Option<StartProfile> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        for pos in (0..succ.len()).rev() {
            if succ[pos] < self.dims[pos] {
                succ[pos] += 1;
                self.next = Some(succ);
                break;
            }
            succ[pos] = 1;
        }
        Some(StartProfile(current))
    }
}

pub fn enumerate_profiles(scenario: &Scenario) -> ProfileIter {
    ProfileIter::new(&scenario.start_set_sizes())
}

/// Position of a profile in lexicographic order.
pub fn linear_index(dims: &[usize], profile: &StartProfile) -> Option<usize> {
    if profile.0.len() != dims.len() {
        return None;
    }
    let mut idx = 0;
    for (&s, &d) in profile.0.iter().zip(dims) {
        if s == 0 || s > d {
            return None;
        }
        idx = idx * d + (s - 1);
    }
    Some(idx)
}

pub fn profile_at(dims: &[usize], mut index: usize) -> StartProfile {
    let mut starts = vec![0; dims.len()];
    for (pos, &d) in dims.iter().enumerate().rev() {
        starts[pos] = index % d + 1;
        index /= d;
    }
    StartProfile(starts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub payoffs: Vec<f64>,
    /// Equilibrium draws, `loads[i * T + t]` for aggregator `i`, slot index `t`.
    pub loads: Vec<f64>,
    pub iterations: u32,
    pub residual: f64,
    pub br_gap: f64,
}

impl TensorEntry {
    pub fn aggregator_load(&self, aggregator: usize, horizon: usize) -> &[f64] {
        &self.loads[aggregator * horizon..(aggregator + 1) * horizon]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PayoffTensor {
    pub scenario_digest: String,
    pub dims: Vec<usize>,
    pub horizon: usize,
    entries: Vec<Option<TensorEntry>>,
}

impl PayoffTensor {
    fn empty(scenario: &Scenario) -> Self {
        let dims = scenario.start_set_sizes();
        let k = dims.iter().product();
        Self {
            scenario_digest: scenario.digest(),
            dims,
            horizon: scenario.horizon_slots,
            entries: vec![None; k],
        }
    }

    pub fn num_aggregators(&self) -> usize {
        self.dims.len()
    }

    /// `K`, the number of start-time profiles.
    pub fn num_profiles(&self) -> usize {
        self.entries.len()
    }

    pub fn num_filled(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.iter().all(Option::is_some)
    }

    pub fn get(&self, profile: &StartProfile) -> Option<&TensorEntry> {
        linear_index(&self.dims, profile).and_then(|k| self.entries[k].as_ref())
    }

    pub fn entry(&self, index: usize) -> Option<&TensorEntry> {
        self.entries.get(index).and_then(Option::as_ref)
    }

    /// Filled entries in lexicographic profile order.
    pub fn iter(&self) -> impl Iterator<Item = (StartProfile, &TensorEntry)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(k, e)| e.as_ref().map(|e| (profile_at(&self.dims, k), e)))
    }

    /// SHA-256 over the scenario digest and every entry's cache record.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.scenario_digest.as_bytes());
        for &d in &self.dims {
            h.update((d as u64).to_le_bytes());
        }
        let mut buf = Vec::new();
        for (k, e) in self.entries.iter().enumerate() {
            match e {
                Some(e) => {
                    buf.clear();
                    encode_record(&mut buf, &profile_at(&self.dims, k), e);
                    h.update([1u8]);
                    h.update(&buf);
                }
                None => h.update([0u8]),
            }
        }
        hex::encode(h.finalize())
    }

    /// Dense first-stage payoff table; fails unless every entry is present.
    pub fn table(&self) -> Result<PayoffTable> {
        let missing = self.num_profiles() - self.num_filled();
        if missing > 0 {
            return Err(Error::IncompleteTensor { missing, total: self.num_profiles() });
        }
        let n = self.num_aggregators();
        let mut payoffs = vec![Vec::with_capacity(self.num_profiles()); n];
        for e in self.entries.iter().flatten() {
            for (i, col) in payoffs.iter_mut().enumerate() {
                col.push(e.payoffs[i]);
            }
        }
        PayoffTable::new(self.dims.clone(), payoffs, self.digest())
    }
}

// ---------------------------------------------------------------------------
// Building

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorOptions {
    pub inner: InnerOptions,
    pub workers: usize,
    /// Profiles solved per parallel batch; cache records are appended after
    /// each batch.
    pub chunk_size: usize,
}

impl Default for TensorOptions {
    fn default() -> Self {
        Self {
            inner: InnerOptions::default(),
            workers: 1,
            chunk_size: 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorBuild {
    pub tensor: PayoffTensor,
    /// Subgames solved in this run (excludes entries read from the cache).
    pub computed: usize,
    /// Profiles whose subgame solution failed certification.
    pub uncertified: Vec<StartProfile>,
}

type ProgressFn<'a> = Box<dyn FnMut(usize, usize) + 'a>;

pub struct TensorBuilder<'a> {
    scenario: &'a Scenario,
    options: TensorOptions,
    cache: Option<PathBuf>,
    progress: Option<ProgressFn<'a>>,
}

impl<'a> TensorBuilder<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        Self {
            scenario,
            options: TensorOptions::default(),
            cache: None,
            progress: None,
        }
    }

    pub fn options(mut self, options: TensorOptions) -> Self {
        self.options = options;
        self
    }

    /// Resume from, and append to, a cache file.
    pub fn cache(mut self, path: impl Into<PathBuf>) -> Self {
        self.cache = Some(path.into());
        self
    }

    /// Called after each batch with `(entries filled, K)`.
    pub fn on_progress(mut self, f: impl FnMut(usize, usize) + 'a) -> Self {
        self.progress = Some(Box::new(f));
        self
    }

    pub fn build(mut self) -> Result<TensorBuild> {
        let scenario = self.scenario;
        if self.options.workers == 0 {
            return Err(Error::Domain("worker count must be at least 1".into()));
        }
        let (mut tensor, mut writer) = match &self.cache {
            Some(path) if path.exists() => {
                let (tensor, valid_len) = read_cache(path, scenario)?;
                let file = OpenOptions::new().write(true).open(path)?;
                file.set_len(valid_len as u64)?;
                drop(file);
                let file = OpenOptions::new().append(true).open(path)?;
                (tensor, Some(BufWriter::new(file)))
            }
            Some(path) => {
                let tensor = PayoffTensor::empty(scenario);
                let mut w = BufWriter::new(File::create(path)?);
                write_header(&mut w, &tensor)?;
                (tensor, Some(w))
            }
            None => (PayoffTensor::empty(scenario), None),
        };

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.options.workers)
            .build()
            .map_err(std::io::Error::other)?;
        let pending: Vec<usize> = (0..tensor.num_profiles())
            .filter(|&k| tensor.entries[k].is_none())
            .collect();
        let total = tensor.num_profiles();
        let mut filled = total - pending.len();
        let mut uncertified = Vec::new();
        let mut buf = Vec::new();
        let inner = &self.options.inner;
        let dims = tensor.dims.clone();

        for batch in pending.chunks(self.options.chunk_size.max(1)) {
            let solved: Vec<Result<Option<TensorEntry>>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&k| solve_entry(scenario, &profile_at(&dims, k), inner))
                    .collect()
            });
            for (&k, result) in batch.iter().zip(solved) {
                match result? {
                    Some(entry) => {
                        if let Some(w) = writer.as_mut() {
                            buf.clear();
                            encode_record(&mut buf, &profile_at(&dims, k), &entry);
                            w.write_all(&buf)?;
                        }
                        tensor.entries[k] = Some(entry);
                        filled += 1;
                    }
                    None => uncertified.push(profile_at(&dims, k)),
                }
            }
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            if let Some(f) = self.progress.as_mut() {
                f(filled, total);
            }
        }

        Ok(TensorBuild {
            tensor,
            computed: pending.len(),
            uncertified,
        })
    }
}

/// Builds the complete tensor in memory (no cache).
pub fn build_tensor(scenario: &Scenario, options: &TensorOptions) -> Result<PayoffTensor> {
    Ok(TensorBuilder::new(scenario)
        .options(options.clone())
        .build()?
        .tensor)
}

fn solve_entry(
    scenario: &Scenario,
    profile: &StartProfile,
    options: &InnerOptions,
) -> Result<Option<TensorEntry>> {
    let sol = solve_subgame(scenario, profile, options)?;
    if !sol.certified {
        return Ok(None);
    }
    let horizon = scenario.horizon_slots;
    let loads = sol.profiles.iter().flat_map(|p| p.to_horizon(horizon)).collect();
    Ok(Some(TensorEntry {
        payoffs: sol.payoffs,
        loads,
        iterations: sol.iterations as u32,
        residual: sol.residual,
        br_gap: sol.br_gap,
    }))
}

// ---------------------------------------------------------------------------
// Cache file

fn record_len(n: usize, horizon: usize) -> usize {
    2 * n + 8 * n + 8 * n * horizon + 4 + 8 + 8
}

fn write_header(w: &mut impl Write, tensor: &PayoffTensor) -> Result<()> {
    let digest = hex::decode(&tensor.scenario_digest)
        .map_err(|e| Error::CacheFormat(format!("scenario digest is not hex: {e}")))?;
    w.write_all(&CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(tensor.num_aggregators() as u32).to_le_bytes())?;
    w.write_all(&(tensor.horizon as u32).to_le_bytes())?;
    w.write_all(&(tensor.num_profiles() as u64).to_le_bytes())?;
    w.write_all(&digest)?;
    Ok(())
}

fn encode_record(buf: &mut Vec<u8>, profile: &StartProfile, e: &TensorEntry) {
    for &s in &profile.0 {
        buf.extend_from_slice(&(s as u16).to_le_bytes());
    }
    for x in e.payoffs.iter().chain(&e.loads) {
        buf.extend_from_slice(&x.to_bits().to_le_bytes());
    }
    buf.extend_from_slice(&e.iterations.to_le_bytes());
    buf.extend_from_slice(&e.residual.to_bits().to_le_bytes());
    buf.extend_from_slice(&e.br_gap.to_bits().to_le_bytes());
}

struct Cursor<'b>(&'b [u8]);

impl Cursor<'_> {
    fn take<const L: usize>(&mut self) -> [u8; L] {
        let (head, rest) = self.0.split_at(L);
        self.0 = rest;
        head.try_into().expect("split_at yields L bytes")
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_bits(self.u64())
    }
}

/// Returns the tensor held in the cache and the byte length of its valid
/// prefix (header plus complete records).
fn read_cache(path: &Path, scenario: &Scenario) -> Result<(PayoffTensor, usize)> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::CacheFormat("file shorter than header".into()));
    }
    let mut cur = Cursor(&bytes[..HEADER_LEN]);
    if cur.take::<8>() != CACHE_MAGIC {
        return Err(Error::CacheFormat("bad magic".into()));
    }
    let version = cur.u32();
    if version != CACHE_VERSION {
        return Err(Error::CacheFormat(format!(
            "format version {version}, expected {CACHE_VERSION}"
        )));
    }
    let n = cur.u32() as usize;
    let horizon = cur.u32() as usize;
    let k = cur.u64() as usize;
    let digest = hex::encode(cur.take::<32>());

    let mut tensor = PayoffTensor::empty(scenario);
    if digest != tensor.scenario_digest {
        return Err(Error::DigestMismatch { expected: tensor.scenario_digest, found: digest });
    }
    if n != tensor.num_aggregators() || horizon != tensor.horizon || k != tensor.num_profiles() {
        return Err(Error::CacheFormat(format!(
            "header shape N={n} T={horizon} K={k} does not match the scenario"
        )));
    }

    let rec = record_len(n, horizon);
    let count = (bytes.len() - HEADER_LEN) / rec;
    for r in 0..count {
        let start = HEADER_LEN + r * rec;
        let mut cur = Cursor(&bytes[start..start + rec]);
        let starts = StartProfile((0..n).map(|_| cur.u16() as usize).collect());
        let index = linear_index(&tensor.dims, &starts).ok_or_else(|| {
            Error::CacheFormat(format!("record {r} has inadmissible profile {:?}", starts.0))
        })?;
        let payoffs = (0..n).map(|_| cur.f64()).collect();
        let loads = (0..n * horizon).map(|_| cur.f64()).collect();
        let iterations = cur.u32();
        let residual = cur.f64();
        let br_gap = cur.f64();
        tensor.entries[index] = Some(TensorEntry { payoffs, loads, iterations, residual, br_gap });
    }
    Ok((tensor, HEADER_LEN + count * rec))
}

/// Writes every filled entry, in profile order, to a fresh cache file.
pub fn cache_store(tensor: &PayoffTensor, path: &Path) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_header(&mut w, tensor)?;
        let mut buf = Vec::new();
        for (profile, e) in tensor.iter() {
            buf.clear();
            encode_record(&mut buf, &profile, e);
            w.write_all(&buf)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a cache file written for `scenario`; rejects any other scenario.
pub fn cache_load(path: &Path, scenario: &Scenario) -> Result<PayoffTensor> {
    Ok(read_cache(path, scenario)?.0)
}
