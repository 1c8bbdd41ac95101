use clap::Args;
use refattn::bench::{
    check_ordering, run_bench, BenchResult, BenchSpec, OrderingCheck, ORDERING_MIN_LEN,
};
use refattn::{AttnConfig, GatingMode};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{emit, OutDir, Table};
use crate::settings::{CommonArgs, RunConfig};

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Sequence lengths, comma separated; source and reference share each.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Timed repetitions per point (at least 5).
    #[arg(long)]
    pub reps: Option<usize>,
    /// Untimed warmup runs per point (at least 1).
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Skip points whose L-src·L-ref·8 attention map exceeds this many bytes.
    #[arg(long = "memory-cap-bytes")]
    pub memory_cap_bytes: Option<u64>,
}

/// Ladder defaults: d=256, M=16, 4 heads.
pub fn defaults() -> AttnConfig {
    AttnConfig::new(256, 256, 256, 4, 16, GatingMode::Vanilla)
}

#[derive(Serialize)]
struct Ordering {
    checked: bool,
    min_len: usize,
    checks: Vec<OrderingCheck>,
}

#[derive(Serialize)]
struct BenchReport {
    spec: BenchSpec,
    results: Vec<BenchResult>,
    ordering: Ordering,
}

pub fn run(args: &BenchArgs, rc: &RunConfig) -> CliResult<()> {
    let file = &rc.file;
    let sizes = args
        .sizes
        .clone()
        .or(file.sizes.clone())
        .unwrap_or_else(|| vec![256, 1024, 4096]);
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(CliError::Usage(format!(
            "sizes must be positive, got {sizes:?}"
        )));
    }
    let a = rc.attn;
    let mut spec = BenchSpec::ladder(&sizes, a.d, a.m, a.heads, rc.seed);
    for c in &mut spec.configs {
        c.gate_placement = a.gate_placement;
        c.aggregation_mode = a.aggregation_mode;
    }
    spec.repetitions = args.reps.or(file.reps).unwrap_or(spec.repetitions);
    spec.warmup = args.warmup.or(file.warmup).unwrap_or(spec.warmup);
    spec.memory_cap_bytes = args
        .memory_cap_bytes
        .or(file.memory_cap_bytes)
        .unwrap_or(spec.memory_cap_bytes);

    let results = run_bench(&spec)?;
    let checks = check_ordering(&results, ORDERING_MIN_LEN);
    let checked = sizes.iter().any(|&l| l >= ORDERING_MIN_LEN);

    let mut table = Table::new(vec![
        "l_src",
        "l_ref",
        "d",
        "heads",
        "m",
        "mode",
        "median_ns",
        "mad_ns",
        "macs",
        "skipped",
    ]);
    for r in &results {
        let c = &r.config;
        table.push(vec![
            c.l_src.to_string(),
            c.l_ref.to_string(),
            c.d.to_string(),
            c.heads.to_string(),
            c.m.to_string(),
            r.mode.to_string(),
            format!("{:.0}", r.median_ns),
            format!("{:.0}", r.mad_ns),
            r.macs.to_string(),
            r.skipped.clone().unwrap_or_default(),
        ]);
    }
    let mut notes = Vec::new();
    if !checked {
        notes.push(format!(
            "ordering check skipped: no size is at least {ORDERING_MIN_LEN}, below that timing noise dominates"
        ));
    }
    for c in &checks {
        notes.push(format!(
            "L={}: aicg overhead {:.3} ms, explicit overhead {:.3} ms, ordering {}",
            c.config.l_src,
            c.aicg_overhead_ns / 1e6,
            c.explicit_overhead_ns / 1e6,
            if c.holds { "holds" } else { "VIOLATED" }
        ));
    }
    let violated: Vec<OrderingCheck> = checks.iter().filter(|c| !c.holds).cloned().collect();
    let report = BenchReport {
        spec,
        results,
        ordering: Ordering {
            checked,
            min_len: ORDERING_MIN_LEN,
            checks,
        },
    };
    let out = OutDir::create(&rc.out_dir)?;
    emit(&out, "bench", "bench", &report, &table, &notes, rc.format)?;

    if let Some(v) = violated.first() {
        return Err(CliError::Check(format!(
            "overhead ordering violated at L-src={} L-ref={} d={} M={}: aicg +{:.0} ns is not below explicit +{:.0} ns",
            v.config.l_src, v.config.l_ref, v.config.d, v.config.m, v.aicg_overhead_ns, v.explicit_overhead_ns
        )));
    }
    Ok(())
}
