use anyhow::Result;
use clap::{Args, ValueEnum};
use kdn_core::codec::{compress_cache, decompress_cache, smooth_cache, CodecProfile};
use kdn_core::model::{Geometry, KvCache};
use kdn_core::store::{make_key, KeyMode};
use kdn_core::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::output::{Format, Report, Table};
use crate::usage;

/// Profiles covered by `--profile all`.
const STANDARD_PROFILES: [&str; 7] = [
    "q4-deflate",
    "q4-varint",
    "q4-raw",
    "q8-deflate",
    "q8-varint",
    "q8-raw",
    "q8-raw-g1024",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureKind {
    /// Slowly varying sinusoids: the best case for delta coding.
    Smooth,
    /// A real prefill of the reference model over seeded random tokens.
    Model,
    /// Uniform noise: the worst case.
    Noise,
    All,
}

#[derive(Debug, Args)]
pub struct BenchCodecArgs {
    /// Profile name (e.g. q4-deflate, q8-raw-g1024), `raw` for the
    /// uncompressed baseline, or `all`.
    #[arg(long, default_value = "all")]
    profile: String,
    #[arg(long, value_enum, default_value = "all")]
    fixture: FixtureKind,
    #[arg(long, default_value_t = 1024)]
    tokens: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    d_head: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct BenchRow {
    fixture: FixtureKind,
    profile: String,
    n_tokens: usize,
    original_bytes: usize,
    compressed_bytes: usize,
    ratio: f64,
    max_abs_error: f64,
    rms_error: f64,
}

fn build_fixture(kind: FixtureKind, args: &BenchCodecArgs) -> Result<KvCache> {
    let geometry = Geometry {
        n_layers: args.layers,
        n_heads: args.heads,
        d_head: args.d_head,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    Ok(match kind {
        FixtureKind::Smooth => smooth_cache(geometry, args.tokens),
        FixtureKind::Model => {
            let model = Model::new(ModelConfig::new(args.layers, args.heads, args.d_head, 256))?;
            let tokens: Vec<u32> = (0..args.tokens).map(|_| rng.gen_range(0..256)).collect();
            model.prefill(&tokens)?.0
        }
        FixtureKind::Noise => {
            let len = geometry.elements_per_token() * args.tokens;
            let mut vals = || (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
            let (k, v) = (vals(), vals());
            KvCache::from_parts(geometry, args.tokens, 0, k, v)?
        }
        FixtureKind::All => unreachable!("expanded by the caller"),
    })
}

fn measure(kind: FixtureKind, cache: &KvCache, profile: Option<CodecProfile>) -> Result<BenchRow> {
    let original_bytes = 4 * (cache.k().len() + cache.v().len());
    let Some(profile) = profile else {
        return Ok(BenchRow {
            fixture: kind,
            profile: "raw".into(),
            n_tokens: cache.n_tokens(),
            original_bytes,
            compressed_bytes: original_bytes,
            ratio: 1.0,
            max_abs_error: 0.0,
            rms_error: 0.0,
        });
    };
    let chunk = compress_cache(cache, &profile, make_key(0, KeyMode::Standalone, None, &[]))?;
    let back = decompress_cache(&chunk)?;
    let (mut sq, mut n) = (0.0f64, 0usize);
    for (a, b) in cache
        .k()
        .iter()
        .chain(cache.v())
        .zip(back.k().iter().chain(back.v()))
    {
        let d = (*a as f64) - (*b as f64);
        sq += d * d;
        n += 1;
    }
    Ok(BenchRow {
        fixture: kind,
        profile: profile.to_string(),
        n_tokens: cache.n_tokens(),
        original_bytes,
        compressed_bytes: chunk.encoded_len(),
        ratio: chunk.compression_ratio(),
        max_abs_error: cache.max_abs_diff(&back),
        rms_error: if n == 0 { 0.0 } else { (sq / n as f64).sqrt() },
    })
}

pub fn codec(args: &BenchCodecArgs, format: Format) -> Result<()> {
    // `None` stands for the uncompressed baseline.
    let profiles: Vec<Option<CodecProfile>> = match args.profile.as_str() {
        "all" => std::iter::once(None)
            .chain(
                STANDARD_PROFILES
                    .iter()
                    .map(|p| Some(p.parse().expect("standard profile"))),
            )
            .collect(),
        "raw" => vec![None],
        name => vec![Some(name.parse().map_err(|e| usage(format!("{e}")))?)],
    };
    if args.tokens == 0 {
        return Err(usage("--tokens must be at least 1"));
    }
    let kinds = match args.fixture {
        FixtureKind::All => vec![FixtureKind::Smooth, FixtureKind::Model, FixtureKind::Noise],
        k => vec![k],
    };
    let mut rows = Vec::new();
    for kind in kinds {
        let cache = build_fixture(kind, args)?;
        for p in &profiles {
            rows.push(measure(kind, &cache, *p)?);
        }
    }

    let mut table = Table::new(vec![
        "fixture",
        "profile",
        "tokens",
        "original",
        "compressed",
        "ratio",
        "max_abs_err",
        "rms_err",
    ]);
    for r in &rows {
        table.push(vec![
            format!("{:?}", r.fixture).to_lowercase().into(),
            r.profile.clone().into(),
            r.n_tokens.into(),
            r.original_bytes.into(),
            r.compressed_bytes.into(),
            r.ratio.into(),
            r.max_abs_error.into(),
            r.rms_error.into(),
        ]);
    }
    Report {
        json: rows,
        tables: vec![table],
        notes: vec![],
    }
    .emit(format)
}
