use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use kdn_core::blender::{selective_blend, BlendReport, Segment};
use kdn_core::fixture::write_fixture;
use kdn_core::model::TokenId;
use kdn_core::{Model, ModelConfig};
use serde::{Deserialize, Serialize};

use super::read_json;
use crate::output::{Format, Report, Table};
use crate::usage;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlendRequest {
    model: ModelConfig,
    segments: Vec<Vec<TokenId>>,
    ratio: f64,
}

#[derive(Serialize)]
struct BlendOutput<'a> {
    cache_file: String,
    n_segments: usize,
    #[serde(flatten)]
    report: &'a BlendReport,
}

pub fn run(request: &Path, out: &Path, report_path: Option<&Path>, format: Format) -> Result<()> {
    let req: BlendRequest = read_json(request)?;
    if !(0.0..=1.0).contains(&req.ratio) {
        return Err(usage(format!("ratio must be within [0, 1], got {}", req.ratio)));
    }
    if req.segments.is_empty() || req.segments.iter().any(Vec::is_empty) {
        return Err(usage(
            "segments must be a non-empty list of non-empty token lists",
        ));
    }
    let model = Model::new(req.model.clone()).context("model config")?;
    let segments = req
        .segments
        .iter()
        .map(|t| Segment::prefill(&model, t))
        .collect::<Result<Vec<_>, _>>()?;
    let (cache, states, report) = selective_blend(&model, &segments, req.ratio)?;

    let bytes = write_fixture(&req.model, &cache, &states)?;
    fs::write(out, bytes).with_context(|| format!("writing {}", out.display()))?;
    let output = BlendOutput {
        cache_file: out.display().to_string(),
        n_segments: segments.len(),
        report: &report,
    };
    if let Some(p) = report_path {
        let json = serde_json::to_string_pretty(&output)?;
        fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?;
    }

    let rel = if report.oracle_max_abs > 0.0 {
        report.kv_error / report.oracle_max_abs
    } else {
        0.0
    };
    let mut table = Table::new(vec![
        "ratio",
        "tokens",
        "recomputed",
        "kv_error",
        "kv_error_rel",
        "final_state_error",
    ]);
    table.push(vec![
        report.recompute_ratio.into(),
        report.n_tokens.into(),
        report.selected.len().into(),
        report.kv_error.into(),
        rel.into(),
        report.final_state_error.into(),
    ]);
    Report {
        json: &output,
        tables: vec![table],
        notes: vec![format!("blended cache written to {}", out.display())],
    }
    .emit(format)
}
