//! Per-query cost and delay of three ways to give a model new knowledge:
//! fine-tuning (FT), in-context learning (IC) and KV-cache reuse (KV).
//!
//! The closed forms in [`per_query`] are cross-checked by an event-level
//! simulator, [`simulate_trace`], and the IC/KV break-even point is computed
//! both analytically and by bisection in [`threshold_r1`].

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("parameter {name} must be {requirement}, got {value}")]
    InvalidParam {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("invalid workload mix r1={r1}, r2={r2}: need r1, r2 >= 0 and r1 + r2 <= 1")]
    InvalidMix { r1: f64, r2: f64 },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("threshold closed form {closed:?} and bisection {bisection:?} disagree")]
    ThresholdMismatch { closed: Threshold, bisection: Threshold },
    #[error("invalid sweep spec {0:?}: expected VAR=START:STOP:STEP with VAR r1 or r2")]
    BadSweep(String),
}

/// Model inputs. Field names in JSON follow the usual symbols (`T`, `C_gpu`,
/// `S_kv`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Refresh period in seconds; the KV store is cleared at every boundary.
    #[serde(rename = "T")]
    pub period: f64,
    /// Price per GPU-second.
    #[serde(rename = "C_gpu")]
    pub c_gpu: f64,
    /// Price per byte stored for one refresh period.
    #[serde(rename = "C_store")]
    pub c_store: f64,
    /// Price per byte transmitted.
    #[serde(rename = "C_net")]
    pub c_net: f64,
    #[serde(rename = "S_model")]
    pub s_model: f64,
    #[serde(rename = "S_kv")]
    pub s_kv: f64,
    #[serde(rename = "S_text")]
    pub s_text: f64,
    #[serde(rename = "T_prefill")]
    pub t_prefill: f64,
    #[serde(rename = "T_Q")]
    pub t_q: f64,
    #[serde(rename = "T_finetune")]
    pub t_finetune: f64,
    /// Storage-to-GPU bandwidth in bytes/second.
    #[serde(rename = "B")]
    pub bandwidth: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        let positive = [
            ("T", self.period),
            ("S_model", self.s_model),
            ("S_kv", self.s_kv),
            ("S_text", self.s_text),
            ("T_prefill", self.t_prefill),
            ("T_finetune", self.t_finetune),
            ("B", self.bandwidth),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(CostError::InvalidParam {
                    name,
                    requirement: "positive and finite",
                    value,
                });
            }
        }
        // Zero prices are accepted so that a single resource can be isolated.
        let non_negative = [
            ("C_gpu", self.c_gpu),
            ("C_store", self.c_store),
            ("C_net", self.c_net),
            ("T_Q", self.t_q),
        ];
        for (name, value) in non_negative {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(CostError::InvalidParam {
                    name,
                    requirement: "non-negative and finite",
                    value,
                });
            }
        }
        Ok(())
    }
}

/// Fractions of queries whose context was already seen this refresh period
/// (`r1`) and whose context was never seen before (`r2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadMix {
    pub r1: f64,
    pub r2: f64,
}

impl WorkloadMix {
    pub fn new(r1: f64, r2: f64) -> Result<Self, CostError> {
        let m = Self { r1, r2 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CostError> {
        // A little slack on the sum so mixes computed from counts pass.
        if !(self.r1 >= 0.0 && self.r2 >= 0.0 && self.r1 + self.r2 <= 1.0 + 1e-12) {
            return Err(CostError::InvalidMix {
                r1: self.r1,
                r2: self.r2,
            });
        }
        Ok(())
    }
}

/// Modelling choices that the closed forms can be switched between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conventions {
    /// Charge the per-query prefill `T_Q` to GPU time and delay of every system.
    pub include_tq: bool,
    /// Use the KV delay row exactly as printed, `r1·T_prefill + (1−r1)·S_kv/B`,
    /// instead of the consistent `(1−r1)·T_prefill + r1·S_kv/B`.
    pub printed_delay_kv: bool,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            include_tq: true,
            printed_delay_kv: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "FT")]
    FineTune = 1,
    #[serde(rename = "IC")]
    InContext = 2,
    #[serde(rename = "KV")]
    KvCache = 3,
}

impl System {
    pub const ALL: [System; 3] = [System::FineTune, System::InContext, System::KvCache];

    pub fn short(self) -> &'static str {
        match self {
            System::FineTune => "FT",
            System::InContext => "IC",
            System::KvCache => "KV",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Money,
    Delay,
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "money" => Ok(Objective::Money),
            "delay" => Ok(Objective::Delay),
            other => Err(format!("unknown objective {other:?} (expected money|delay)")),
        }
    }
}

/// Resource use per query, plus the priced total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub gpu_seconds: f64,
    pub storage_bytes: f64,
    pub network_bytes: f64,
    pub delay_seconds: f64,
    pub money: f64,
}

impl CostBreakdown {
    fn priced(params: &CostParams, gpu: f64, storage: f64, network: f64, delay: f64) -> Self {
        Self {
            gpu_seconds: gpu,
            storage_bytes: storage,
            network_bytes: network,
            delay_seconds: delay,
            money: gpu * params.c_gpu + storage * params.c_store + network * params.c_net,
        }
    }

    pub fn objective(&self, objective: Objective) -> f64 {
        match objective {
            Objective::Money => self.money,
            Objective::Delay => self.delay_seconds,
        }
    }

    pub fn fields(&self) -> [(&'static str, f64); 5] {
        [
            ("gpu_seconds", self.gpu_seconds),
            ("storage_bytes", self.storage_bytes),
            ("network_bytes", self.network_bytes),
            ("delay_seconds", self.delay_seconds),
            ("money", self.money),
        ]
    }

    /// Largest relative difference over all fields (0 when both are 0).
    pub fn max_rel_diff(&self, other: &CostBreakdown) -> f64 {
        self.fields()
            .iter()
            .zip(other.fields())
            .map(|(&(_, a), (_, b))| rel_diff(a, b))
            .fold(0.0, f64::max)
    }
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Closed-form per-query cost of `system` under `mix`.
pub fn per_query(
    system: System,
    params: &CostParams,
    mix: WorkloadMix,
    conv: Conventions,
) -> Result<CostBreakdown, CostError> {
    params.validate()?;
    mix.validate()?;
    Ok(per_query_unchecked(system, params, mix, conv))
}

fn per_query_unchecked(system: System, p: &CostParams, mix: WorkloadMix, conv: Conventions) -> CostBreakdown {
    let WorkloadMix { r1, r2 } = mix;
    let tq = if conv.include_tq { p.t_q } else { 0.0 };
    let transfer = p.s_kv / p.bandwidth;
    let (gpu, storage, network, delay) = match system {
        System::FineTune => (
            r2 * p.t_finetune,
            r2 * p.s_model,
            r2 * p.s_model,
            r2 * p.t_finetune,
        ),
        System::InContext => (p.t_prefill, 0.0, p.s_text, p.t_prefill),
        System::KvCache => {
            let delay = if conv.printed_delay_kv {
                r1 * p.t_prefill + (1.0 - r1) * transfer
            } else {
                (1.0 - r1) * p.t_prefill + r1 * transfer
            };
            ((1.0 - r1) * p.t_prefill, (1.0 - r1) * p.s_kv, r1 * p.s_kv, delay)
        }
    };
    CostBreakdown::priced(p, gpu + tq, storage, network, delay + tq)
}

/// Cheapest system for `objective`; ties go to the lower system number.
/// The margin is how far the runner-up is behind.
pub fn best_system(
    params: &CostParams,
    mix: WorkloadMix,
    objective: Objective,
    conv: Conventions,
) -> Result<(System, f64), CostError> {
    let mut scored = Vec::with_capacity(3);
    for s in System::ALL {
        scored.push((s, per_query(s, params, mix, conv)?.objective(objective)));
    }
    // Stable sort keeps system order among equal values.
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok((scored[0].0, scored[1].1 - scored[0].1))
}

/// Where KV-cache reuse becomes at least as good as in-context learning, as a
/// function of `r1` over `[0, 1 − r2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "r1", rename_all = "lowercase")]
pub enum Threshold {
    /// KV ≤ IC exactly when `r1 ≥ x`.
    At(f64),
    /// KV ≤ IC exactly when `r1 ≤ x` (reuse makes KV worse, e.g. costly network).
    Until(f64),
    /// KV ≤ IC over the whole range, strictly better at `r1 = 0`.
    Always,
    /// KV > IC over the whole range.
    Never,
    /// KV and IC are equal for every `r1`.
    Indifferent,
}

impl Threshold {
    fn agrees(&self, other: &Threshold, tol: f64) -> bool {
        match (self, other) {
            (Threshold::At(a), Threshold::At(b)) | (Threshold::Until(a), Threshold::Until(b)) => {
                (a - b).abs() <= tol
            }
            _ => self == other,
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::At(x) => write!(f, "r1 >= {x:.6}"),
            Threshold::Until(x) => write!(f, "r1 <= {x:.6}"),
            Threshold::Always => f.write_str("always"),
            Threshold::Never => f.write_str("never"),
            Threshold::Indifferent => f.write_str("indifferent"),
        }
    }
}

pub const THRESHOLD_TOLERANCE: f64 = 1e-9;

/// Relative tolerance for deciding that KV and IC are equal at a point.
const EQ_TOL: f64 = 1e-12;

/// `KV − IC` as `a + b·r1`, derived by hand from the per-query rows. `T_Q`
/// is common to both systems and cancels.
fn kv_minus_ic(p: &CostParams, objective: Objective, conv: Conventions) -> (f64, f64) {
    let transfer = p.s_kv / p.bandwidth;
    match objective {
        Objective::Money => (
            p.c_store * p.s_kv - p.c_net * p.s_text,
            p.c_net * p.s_kv - p.c_gpu * p.t_prefill - p.c_store * p.s_kv,
        ),
        Objective::Delay if conv.printed_delay_kv => (transfer - p.t_prefill, p.t_prefill - transfer),
        Objective::Delay => (0.0, transfer - p.t_prefill),
    }
}

fn ic_scale(p: &CostParams, objective: Objective, conv: Conventions) -> f64 {
    per_query_unchecked(System::InContext, p, WorkloadMix { r1: 0.0, r2: 0.0 }, conv)
        .objective(objective)
        .abs()
}

fn classify(f0: f64, f1: f64, hi: f64, tol: f64, root: impl FnOnce() -> f64) -> Threshold {
    let z0 = f0.abs() <= tol;
    let z1 = f1.abs() <= tol;
    let le0 = f0 <= tol;
    let le1 = f1 <= tol;
    match (le0, le1) {
        _ if z0 && z1 => Threshold::Indifferent,
        (true, true) if z0 => Threshold::At(0.0),
        (true, true) => Threshold::Always,
        (false, false) => Threshold::Never,
        (false, true) => Threshold::At(root().clamp(0.0, hi)),
        (true, false) => Threshold::Until(root().clamp(0.0, hi)),
    }
}

fn domain_end(r2: f64) -> Result<f64, CostError> {
    WorkloadMix::new(0.0, r2)?;
    Ok((1.0 - r2).max(0.0))
}

/// Break-even from the analytic affine form.
pub fn threshold_closed_form(
    params: &CostParams,
    r2: f64,
    objective: Objective,
    conv: Conventions,
) -> Result<Threshold, CostError> {
    params.validate()?;
    let hi = domain_end(r2)?;
    let (a, b) = kv_minus_ic(params, objective, conv);
    let tol = EQ_TOL * ic_scale(params, objective, conv);
    Ok(classify(a, a + b * hi, hi, tol, || -a / b))
}

/// Break-even found numerically on [`per_query`], independent of the
/// hand-derived coefficients.
pub fn threshold_bisection(
    params: &CostParams,
    r2: f64,
    objective: Objective,
    conv: Conventions,
) -> Result<Threshold, CostError> {
    params.validate()?;
    let hi = domain_end(r2)?;
    let g = |r1: f64| {
        let mix = WorkloadMix { r1, r2 };
        per_query_unchecked(System::KvCache, params, mix, conv).objective(objective)
            - per_query_unchecked(System::InContext, params, mix, conv).objective(objective)
    };
    let tol = EQ_TOL * ic_scale(params, objective, conv);
    let (g0, g1) = (g(0.0), g(hi));
    Ok(classify(g0, g1, hi, tol, || {
        let (mut lo, mut up) = (0.0, hi);
        let rising = g1 > g0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + up);
            if mid <= lo || mid >= up {
                break;
            }
            if (g(mid) > 0.0) == rising {
                up = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + up)
    }))
}

/// Break-even point of KV versus IC, holding `r2` fixed. The closed form is
/// returned after confirming that bisection agrees to within
/// [`THRESHOLD_TOLERANCE`].
pub fn threshold_r1(
    params: &CostParams,
    r2: f64,
    objective: Objective,
    conv: Conventions,
) -> Result<Threshold, CostError> {
    let closed = threshold_closed_form(params, r2, objective, conv)?;
    let bisection = threshold_bisection(params, r2, objective, conv)?;
    if !closed.agrees(&bisection, THRESHOLD_TOLERANCE) {
        return Err(CostError::ThresholdMismatch { closed, bisection });
    }
    Ok(closed)
}

/// One query arrival.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    pub context: u64,
}

/// Query arrivals in nondecreasing time order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

/// How each query in a trace relates to what came before.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TraceCounts {
    pub queries: usize,
    /// Context already queried earlier in the same refresh period.
    pub seen_this_period: usize,
    /// Context never queried before.
    pub never_seen: usize,
}

impl TraceCounts {
    pub fn mix(&self) -> WorkloadMix {
        let n = self.queries as f64;
        WorkloadMix {
            r1: self.seen_this_period as f64 / n,
            r2: self.never_seen as f64 / n,
        }
    }
}

impl Trace {
    pub fn new(events: Vec<TraceEvent>) -> Result<Self, CostError> {
        if events.is_empty() {
            return Err(CostError::InvalidTrace("no queries".into()));
        }
        for (i, e) in events.iter().enumerate() {
            if !(e.time >= 0.0 && e.time.is_finite()) {
                return Err(CostError::InvalidTrace(format!(
                    "query {i} has invalid time {}",
                    e.time
                )));
            }
            if i > 0 && e.time < events[i - 1].time {
                return Err(CostError::InvalidTrace(format!(
                    "query {i} at {} precedes the previous query",
                    e.time
                )));
            }
        }
        Ok(Self { events })
    }

    /// Parses lines of `TIME CONTEXT_ID`; blank lines and `#` comments are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self, CostError> {
        let mut events = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty());
            let bad = || CostError::InvalidTrace(format!("line {}: expected TIME CONTEXT", no + 1));
            let time: f64 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let context: u64 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if it.next().is_some() {
                return Err(bad());
            }
            events.push(TraceEvent { time, context });
        }
        Self::new(events)
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn counts(&self, period: f64) -> TraceCounts {
        let mut c = TraceCounts {
            queries: self.events.len(),
            ..Default::default()
        };
        walk(&self.events, period, |q| match q {
            Arrival::New => c.never_seen += 1,
            Arrival::SeenThisPeriod => c.seen_this_period += 1,
            Arrival::SeenBefore => {}
        });
        c
    }
}

enum Arrival {
    New,
    SeenThisPeriod,
    SeenBefore,
}

fn walk(events: &[TraceEvent], period: f64, mut f: impl FnMut(Arrival)) {
    let mut ever: HashSet<u64> = HashSet::new();
    let mut this_period: HashSet<u64> = HashSet::new();
    let mut current = None;
    for e in events {
        let idx = (e.time / period).floor() as u64;
        if current != Some(idx) {
            // The store is cleared at every period boundary.
            this_period.clear();
            current = Some(idx);
        }
        let arrival = if this_period.contains(&e.context) {
            Arrival::SeenThisPeriod
        } else if ever.contains(&e.context) {
            Arrival::SeenBefore
        } else {
            Arrival::New
        };
        this_period.insert(e.context);
        ever.insert(e.context);
        f(arrival);
    }
}

/// Replays `trace` query by query and returns the average per-query cost.
///
/// - FT fine-tunes (and stores/ships the artifact once) on a context's first
///   ever appearance.
/// - IC prefills every context.
/// - KV prefills and stores a context on its first appearance in a period
///   (one object-period of storage) and ships the stored cache on later ones.
pub fn simulate_trace(
    params: &CostParams,
    trace: &Trace,
    system: System,
    conv: Conventions,
) -> Result<CostBreakdown, CostError> {
    params.validate()?;
    if trace.is_empty() {
        return Err(CostError::InvalidTrace("no queries".into()));
    }
    let p = params;
    let tq = if conv.include_tq { p.t_q } else { 0.0 };
    let transfer = p.s_kv / p.bandwidth;
    let (mut gpu, mut storage, mut network, mut delay) = (0.0, 0.0, 0.0, 0.0);
    walk(&trace.events, p.period, |arrival| {
        gpu += tq;
        delay += tq;
        match system {
            System::FineTune => {
                if let Arrival::New = arrival {
                    gpu += p.t_finetune;
                    delay += p.t_finetune;
                    storage += p.s_model;
                    network += p.s_model;
                }
            }
            System::InContext => {
                gpu += p.t_prefill;
                delay += p.t_prefill;
                network += p.s_text;
            }
            System::KvCache => {
                let hit = matches!(arrival, Arrival::SeenThisPeriod);
                if hit {
                    network += p.s_kv;
                } else {
                    gpu += p.t_prefill;
                    storage += p.s_kv;
                }
                delay += match (hit, conv.printed_delay_kv) {
                    (true, false) | (false, true) => transfer,
                    (false, false) | (true, true) => p.t_prefill,
                };
            }
        }
    });
    let n = trace.len() as f64;
    Ok(CostBreakdown::priced(
        p,
        gpu / n,
        storage / n,
        network / n,
        delay / n,
    ))
}

/// Measured figures for one system, as reported in a comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    /// Time to make new knowledge usable, in hours.
    pub inject_hours: f64,
    /// Money per query.
    pub cost: f64,
    /// Seconds per query.
    pub delay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonInput {
    pub fine_tune: Measured,
    pub in_context: Measured,
    pub kdn: Measured,
}

/// A ratio that may be infinite; serialized as `"inf"` in that case.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct Ratio(pub f64);

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{:.2}x", self.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub input: ComparisonInput,
    /// FT inject time over KDN inject time.
    pub inject_ratio: Ratio,
    /// IC cost over KDN cost.
    pub cost_ratio: Ratio,
    /// IC delay over KDN delay.
    pub delay_ratio: Ratio,
}

fn ratio(num: f64, den: f64) -> Ratio {
    if den == 0.0 {
        Ratio(if num == 0.0 { 1.0 } else { f64::INFINITY })
    } else {
        Ratio(num / den)
    }
}

pub fn comparison_report(input: ComparisonInput) -> Result<ComparisonReport, CostError> {
    let rows = [
        ("fine_tune", input.fine_tune),
        ("in_context", input.in_context),
        ("kdn", input.kdn),
    ];
    for (_, m) in rows {
        if !(m.inject_hours >= 0.0 && m.inject_hours.is_finite()) {
            return Err(CostError::InvalidParam {
                name: "inject_hours",
                requirement: "non-negative and finite",
                value: m.inject_hours,
            });
        }
        for (name, v) in [("cost", m.cost), ("delay", m.delay)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CostError::InvalidParam {
                    name,
                    requirement: "positive and finite",
                    value: v,
                });
            }
        }
    }
    Ok(ComparisonReport {
        input,
        inject_ratio: ratio(input.fine_tune.inject_hours, input.kdn.inject_hours),
        cost_ratio: ratio(input.in_context.cost, input.kdn.cost),
        delay_ratio: ratio(input.in_context.delay, input.kdn.delay),
    })
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>14} {:>12} {:>12}",
            "system", "inject (h)", "cost/query", "delay (s)"
        )?;
        for (name, m) in [
            ("fine-tune", self.input.fine_tune),
            ("in-context", self.input.in_context),
            ("kdn", self.input.kdn),
        ] {
            writeln!(
                f,
                "{:<12} {:>14.4} {:>12.6} {:>12.4}",
                name, m.inject_hours, m.cost, m.delay
            )?;
        }
        writeln!(f, "inject speedup vs fine-tune: {}", self.inject_ratio)?;
        writeln!(f, "cost saving vs in-context:   {}", self.cost_ratio)?;
        write!(f, "delay speedup vs in-context: {}", self.delay_ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepVar {
    R1,
    R2,
}

/// `VAR=START:STOP:STEP` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepSpec {
    pub var: SweepVar,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl FromStr for SweepSpec {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CostError::BadSweep(s.to_owned());
        let (var, range) = s.split_once('=').ok_or_else(bad)?;
        let var = match var.trim() {
            "r1" => SweepVar::R1,
            "r2" => SweepVar::R2,
            _ => return Err(bad()),
        };
        let parts: Vec<f64> = range
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        let [start, stop, step] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0 && start.is_finite() && stop.is_finite() && stop >= start) {
            return Err(bad());
        }
        Ok(Self {
            var,
            start,
            stop,
            step,
        })
    }
}

impl SweepSpec {
    /// Grid points from `start` to `stop` inclusive (within half a step).
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.start + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub r1: f64,
    pub r2: f64,
    pub ft: CostBreakdown,
    pub ic: CostBreakdown,
    pub kv: CostBreakdown,
    pub best_money: System,
    pub best_delay: System,
    /// The money break-even between IC and KV falls in `[r1, r1 + step)`.
    pub money_crossing: bool,
}

/// Evaluates all three systems on the grid. The other fraction is taken from
/// `base`; grid points that would violate `r1 + r2 ≤ 1` are skipped.
pub fn sweep(
    params: &CostParams,
    base: WorkloadMix,
    spec: &SweepSpec,
    conv: Conventions,
) -> Result<Vec<SweepRow>, CostError> {
    params.validate()?;
    let mut rows = Vec::new();
    for x in spec.points() {
        let mix = match spec.var {
            SweepVar::R1 => WorkloadMix { r1: x, r2: base.r2 },
            SweepVar::R2 => WorkloadMix { r1: base.r1, r2: x },
        };
        if mix.validate().is_err() {
            continue;
        }
        let crossing = match threshold_r1(params, mix.r2, Objective::Money, conv)? {
            Threshold::At(t) | Threshold::Until(t) => match spec.var {
                SweepVar::R1 => t >= x && t < x + spec.step,
                SweepVar::R2 => (t - mix.r1).abs() < spec.step / 2.0,
            },
            _ => false,
        };
        rows.push(SweepRow {
            r1: mix.r1,
            r2: mix.r2,
            ft: per_query(System::FineTune, params, mix, conv)?,
            ic: per_query(System::InContext, params, mix, conv)?,
            kv: per_query(System::KvCache, params, mix, conv)?,
            best_money: best_system(params, mix, Objective::Money, conv)?.0,
            best_delay: best_system(params, mix, Objective::Delay, conv)?.0,
            money_crossing: crossing,
        });
    }
    Ok(rows)
}
