use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use kdn_core::cost::{
    best_system, comparison_report, per_query, simulate_trace, sweep, threshold_r1, ComparisonInput,
    ComparisonReport, Conventions, CostBreakdown, CostParams, Objective, SweepRow, SweepSpec, System,
    Threshold, Trace, TraceCounts, TraceEvent, WorkloadMix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::read_json;
use crate::output::{Cell, Format, Report, Table};
use crate::usage;

const DEFAULT_MIX: WorkloadMix = WorkloadMix { r1: 0.5, r2: 0.0 };

#[derive(Debug, Subcommand)]
pub enum CostCommand {
    /// Per-query cost of each system, the winner and the break-even r1; with
    /// --measured, the comparison-table ratios.
    Report {
        #[command(flatten)]
        params: ParamsArgs,
        /// JSON {"fine_tune", "in_context", "kdn"}, each {"inject_hours", "cost", "delay"}.
        #[arg(long)]
        measured: Option<PathBuf>,
    },
    /// Evaluate all systems over a grid of r1 or r2.
    Sweep {
        #[command(flatten)]
        params: ParamsArgs,
        /// VAR=START:STOP:STEP with VAR in {r1, r2}.
        #[arg(long, default_value = "r1=0:1:0.1")]
        sweep: String,
    },
    /// Replay a query trace and compare against the closed form.
    Simulate {
        #[command(flatten)]
        params: ParamsArgs,
        /// Trace file: one "TIME CONTEXT" pair per line.
        #[arg(long, conflicts_with_all = ["queries", "contexts", "rate"])]
        trace: Option<PathBuf>,
        /// Length of the generated trace when no --trace is given.
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        /// Number of distinct contexts in the generated trace.
        #[arg(long, default_value_t = 50)]
        contexts: u64,
        /// Mean queries per refresh period in the generated trace.
        #[arg(long, default_value_t = 100.0)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Flat JSON of T, C_gpu, C_store, C_net, S_model, S_kv, S_text,
    /// T_prefill, T_Q, T_finetune, B, optionally r1, r2, include_tq and
    /// printed_delay_kv.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    r1: Option<f64>,
    #[arg(long)]
    r2: Option<f64>,
    /// Use the printed KV delay row (r1·T_prefill + (1−r1)·S_kv/B).
    #[arg(long)]
    printed_delay_kv: bool,
    /// Leave the per-query prefill T_Q out of every system.
    #[arg(long)]
    exclude_tq: bool,
}

#[derive(Debug, Deserialize)]
struct ParamsFile {
    #[serde(flatten)]
    params: CostParams,
    r1: Option<f64>,
    r2: Option<f64>,
    include_tq: Option<bool>,
    printed_delay_kv: Option<bool>,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct Setup {
    params: CostParams,
    mix: WorkloadMix,
    conventions: Conventions,
}

impl ParamsArgs {
    fn load(&self) -> Result<Option<Setup>> {
        let Some(path) = &self.params else {
            return Ok(None);
        };
        let file: ParamsFile = read_json(path)?;
        file.params
            .validate()
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let mut conventions = Conventions::default();
        if let Some(v) = file.include_tq {
            conventions.include_tq = v;
        }
        if let Some(v) = file.printed_delay_kv {
            conventions.printed_delay_kv = v;
        }
        conventions.include_tq &= !self.exclude_tq;
        conventions.printed_delay_kv |= self.printed_delay_kv;
        let mix = WorkloadMix {
            r1: self.r1.or(file.r1).unwrap_or(DEFAULT_MIX.r1),
            r2: self.r2.or(file.r2).unwrap_or(DEFAULT_MIX.r2),
        };
        mix.validate().map_err(|e| usage(e.to_string()))?;
        Ok(Some(Setup {
            params: file.params,
            mix,
            conventions,
        }))
    }

    fn require(&self) -> Result<Setup> {
        self.load()?.ok_or_else(|| usage("--params is required"))
    }
}

pub fn run(cmd: CostCommand, format: Format) -> Result<()> {
    match cmd {
        CostCommand::Report { params, measured } => report(&params, measured.as_deref(), format),
        CostCommand::Sweep { params, sweep } => run_sweep(&params, &sweep, format),
        CostCommand::Simulate {
            params,
            trace,
            queries,
            contexts,
            rate,
            seed,
        } => simulate(&params, trace.as_deref(), queries, contexts, rate, seed, format),
    }
}

fn breakdown_table(rows: &[(System, CostBreakdown)]) -> Table {
    let mut t = Table::new(vec![
        "system",
        "gpu_seconds",
        "storage_bytes",
        "network_bytes",
        "delay_seconds",
        "money",
    ]);
    for (s, b) in rows {
        let mut row: Vec<Cell> = vec![s.short().into()];
        row.extend(b.fields().iter().map(|&(_, v)| Cell::from(v)));
        t.push(row);
    }
    t
}

#[derive(Serialize)]
struct ModelReport {
    #[serde(flatten)]
    setup: Setup,
    systems: Vec<SystemCost>,
    best_money: System,
    best_money_margin: f64,
    best_delay: System,
    best_delay_margin: f64,
    threshold_money: Threshold,
    threshold_delay: Threshold,
}

#[derive(Serialize)]
struct SystemCost {
    system: System,
    #[serde(flatten)]
    cost: CostBreakdown,
}

#[derive(Serialize)]
struct ReportOutput {
    model: Option<ModelReport>,
    comparison: Option<ComparisonReport>,
}

fn model_report(setup: Setup) -> Result<ModelReport> {
    let Setup {
        params,
        mix,
        conventions,
    } = setup;
    let systems = System::ALL
        .into_iter()
        .map(|s| {
            Ok(SystemCost {
                system: s,
                cost: per_query(s, &params, mix, conventions)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (best_money, best_money_margin) = best_system(&params, mix, Objective::Money, conventions)?;
    let (best_delay, best_delay_margin) = best_system(&params, mix, Objective::Delay, conventions)?;
    Ok(ModelReport {
        setup,
        systems,
        best_money,
        best_money_margin,
        best_delay,
        best_delay_margin,
        threshold_money: threshold_r1(&params, mix.r2, Objective::Money, conventions)?,
        threshold_delay: threshold_r1(&params, mix.r2, Objective::Delay, conventions)?,
    })
}

fn comparison_tables(c: &ComparisonReport) -> Vec<Table> {
    let mut ratios = Table::new(vec!["metric", "baseline", "baseline_value", "kdn_value", "ratio"]);
    let i = &c.input;
    for (metric, base, bv, kv, r) in [
        (
            "inject_hours",
            "fine-tune",
            i.fine_tune.inject_hours,
            i.kdn.inject_hours,
            c.inject_ratio.0,
        ),
        (
            "cost",
            "in-context",
            i.in_context.cost,
            i.kdn.cost,
            c.cost_ratio.0,
        ),
        (
            "delay",
            "in-context",
            i.in_context.delay,
            i.kdn.delay,
            c.delay_ratio.0,
        ),
    ] {
        ratios.push(vec![metric.into(), base.into(), bv.into(), kv.into(), r.into()]);
    }
    let mut measured = Table::new(vec!["system", "inject_hours", "cost", "delay"]);
    for (name, m) in [
        ("fine-tune", i.fine_tune),
        ("in-context", i.in_context),
        ("kdn", i.kdn),
    ] {
        measured.push(vec![
            name.into(),
            m.inject_hours.into(),
            m.cost.into(),
            m.delay.into(),
        ]);
    }
    vec![ratios, measured]
}

fn report(args: &ParamsArgs, measured: Option<&Path>, format: Format) -> Result<()> {
    let setup = args.load()?;
    if setup.is_none() && measured.is_none() {
        return Err(usage("cost report needs --params, --measured or both"));
    }
    let comparison = match measured {
        Some(p) => {
            let input: ComparisonInput = read_json(p)?;
            Some(comparison_report(input).map_err(|e| usage(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let model = setup.map(model_report).transpose()?;

    let mut tables = Vec::new();
    let mut notes = Vec::new();
    if let Some(m) = &model {
        let rows: Vec<_> = m.systems.iter().map(|s| (s.system, s.cost)).collect();
        tables.push(breakdown_table(&rows));
        notes.push(format!(
            "mix r1={} r2={}; T_Q {}; KV delay {}",
            m.setup.mix.r1,
            m.setup.mix.r2,
            if m.setup.conventions.include_tq {
                "included"
            } else {
                "excluded"
            },
            if m.setup.conventions.printed_delay_kv {
                "as printed"
            } else {
                "corrected"
            },
        ));
        notes.push(format!(
            "cheapest: {} (margin {:.4e})",
            m.best_money.short(),
            m.best_money_margin
        ));
        notes.push(format!(
            "fastest:  {} (margin {:.4e})",
            m.best_delay.short(),
            m.best_delay_margin
        ));
        notes.push(format!("KV <= IC in money when {}", m.threshold_money));
        notes.push(format!("KV <= IC in delay when {}", m.threshold_delay));
    }
    if let Some(c) = &comparison {
        tables.extend(comparison_tables(c));
        notes.push(format!(
            "inject {} faster than fine-tuning, cost {} lower and delay {} lower than in-context",
            c.inject_ratio, c.cost_ratio, c.delay_ratio
        ));
    }
    Report {
        json: ReportOutput { model, comparison },
        tables,
        notes,
    }
    .emit(format)
}

#[derive(Serialize)]
struct SweepOutput {
    #[serde(flatten)]
    setup: Setup,
    spec: SweepSpec,
    threshold_money: Option<Threshold>,
    rows: Vec<SweepRow>,
}

fn run_sweep(args: &ParamsArgs, spec: &str, format: Format) -> Result<()> {
    let setup = args.require()?;
    let spec: SweepSpec = spec.parse().map_err(|e| usage(format!("{e}")))?;
    let rows = sweep(&setup.params, setup.mix, &spec, setup.conventions)?;
    // With r2 varying the break-even moves, so it is only marked per row.
    let threshold_money = match spec.var {
        kdn_core::cost::SweepVar::R1 => Some(threshold_r1(
            &setup.params,
            setup.mix.r2,
            Objective::Money,
            setup.conventions,
        )?),
        kdn_core::cost::SweepVar::R2 => None,
    };

    let mut table = Table::new(vec![
        "r1",
        "r2",
        "ft_money",
        "ic_money",
        "kv_money",
        "ft_delay",
        "ic_delay",
        "kv_delay",
        "best_money",
        "best_delay",
        "crossing",
    ]);
    for r in &rows {
        table.push(vec![
            r.r1.into(),
            r.r2.into(),
            r.ft.money.into(),
            r.ic.money.into(),
            r.kv.money.into(),
            r.ft.delay_seconds.into(),
            r.ic.delay_seconds.into(),
            r.kv.delay_seconds.into(),
            r.best_money.short().into(),
            r.best_delay.short().into(),
            if r.money_crossing { "*" } else { "" }.into(),
        ]);
    }
    let mut notes = Vec::new();
    if let Some(t) = threshold_money {
        notes.push(format!(
            "KV <= IC in money when {t}; '*' marks the grid cell holding the break-even"
        ));
    }
    Report {
        json: SweepOutput {
            setup,
            spec,
            threshold_money,
            rows,
        },
        tables: vec![table],
        notes,
    }
    .emit(format)
}

#[derive(Serialize)]
struct SimRow {
    system: System,
    closed_form: CostBreakdown,
    simulated: CostBreakdown,
    max_rel_diff: f64,
}

#[derive(Serialize)]
struct SimulateOutput {
    params: CostParams,
    conventions: Conventions,
    n_queries: usize,
    counts: TraceCounts,
    empirical_mix: WorkloadMix,
    rows: Vec<SimRow>,
}

/// Uniform contexts, arrival gaps uniform on `[0, 2T/rate)`.
fn random_trace(period: f64, queries: usize, contexts: u64, rate: f64, seed: u64) -> Result<Trace> {
    if queries == 0 || contexts == 0 || !(rate > 0.0 && rate.is_finite()) {
        return Err(usage("--queries, --contexts and --rate must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut time = 0.0;
    let events = (0..queries)
        .map(|_| {
            time += rng.gen::<f64>() * 2.0 * period / rate;
            TraceEvent {
                time,
                context: rng.gen_range(0..contexts),
            }
        })
        .collect();
    Ok(Trace::new(events)?)
}

fn simulate(
    args: &ParamsArgs,
    trace_path: Option<&Path>,
    queries: usize,
    contexts: u64,
    rate: f64,
    seed: u64,
    format: Format,
) -> Result<()> {
    let setup = args.require()?;
    let trace = match trace_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Trace::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => random_trace(setup.params.period, queries, contexts, rate, seed)?,
    };
    let counts = trace.counts(setup.params.period);
    let mix = counts.mix();
    let mut rows = Vec::new();
    for s in System::ALL {
        let closed_form = per_query(s, &setup.params, mix, setup.conventions)?;
        let simulated = simulate_trace(&setup.params, &trace, s, setup.conventions)?;
        rows.push(SimRow {
            system: s,
            closed_form,
            simulated,
            max_rel_diff: closed_form.max_rel_diff(&simulated),
        });
    }

    let mut table = Table::new(vec![
        "system",
        "money_closed",
        "money_sim",
        "delay_closed",
        "delay_sim",
        "max_rel_diff",
    ]);
    for r in &rows {
        table.push(vec![
            r.system.short().into(),
            r.closed_form.money.into(),
            r.simulated.money.into(),
            r.closed_form.delay_seconds.into(),
            r.simulated.delay_seconds.into(),
            r.max_rel_diff.into(),
        ]);
    }
    let notes = vec![format!(
        "{} queries: {} never seen, {} seen this period, rest seen earlier; empirical r1={:.6} r2={:.6}",
        trace.len(),
        counts.never_seen,
        counts.seen_this_period,
        mix.r1,
        mix.r2
    )];
    Report {
        json: SimulateOutput {
            params: setup.params,
            conventions: setup.conventions,
            n_queries: trace.len(),
            counts,
            empirical_mix: mix,
            rows,
        },
        tables: vec![table],
        notes,
    }
    .emit(format)
}
