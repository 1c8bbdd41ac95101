use refattn::block::forward;
use refattn::cost::{cost_for_mode, Convention, CostInputs};
use refattn::{AttnConfig, GatingMode, MacCounter};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{emit, num, OutDir, Table};
use crate::settings::RunConfig;

#[derive(Serialize)]
struct GateStats {
    min: f64,
    mean: f64,
    max: f64,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct ModeRecord {
    mode: GatingMode,
    macs: u128,
    /// Closed-form count for the mode under the instrumented convention.
    expected_macs: u128,
    final_norm: f64,
    /// ‖final_out − H_src‖, the fused reference contribution.
    branch_norm: f64,
    projected_norm: f64,
    gate: Option<GateStats>,
}

#[derive(Serialize)]
struct DemoReport {
    seed: u64,
    config: AttnConfig,
    zero_linear_scale: f64,
    records: Vec<ModeRecord>,
}

fn stats(values: &[f64]) -> GateStats {
    GateStats {
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        values: values.to_vec(),
    }
}

/// Runs every gating mode on one seeded problem and summarizes each.
pub fn run(rc: &RunConfig) -> CliResult<()> {
    let (h_src, h_ref, w) = rc.problem()?;
    let inputs = CostInputs::from_config(&rc.attn, Convention::Instrumented);
    let mut records = Vec::new();
    for mode in GatingMode::ALL {
        let cfg = rc.attn.with_mode(mode);
        let mut counter = MacCounter::new();
        let out = forward(&h_src, &h_ref, &w, &cfg, &mut counter)?;
        let t = &out.trace;
        records.push(ModeRecord {
            mode,
            macs: counter.count(),
            expected_macs: cost_for_mode(&inputs, mode)?,
            final_norm: t.final_out.frobenius_norm(),
            branch_norm: t.final_out.sub(&h_src)?.frobenius_norm(),
            projected_norm: t.projected_out.frobenius_norm(),
            gate: out.gate().map(stats),
        });
    }

    let mut table = Table::new(vec![
        "mode",
        "macs",
        "expected_macs",
        "final_norm",
        "branch_norm",
        "projected_norm",
        "gate_min",
        "gate_mean",
        "gate_max",
    ]);
    for r in &records {
        let g = |f: fn(&GateStats) -> f64| r.gate.as_ref().map(|s| num(f(s))).unwrap_or_default();
        table.push(vec![
            r.mode.to_string(),
            r.macs.to_string(),
            r.expected_macs.to_string(),
            num(r.final_norm),
            num(r.branch_norm),
            num(r.projected_norm),
            g(|s| s.min),
            g(|s| s.mean),
            g(|s| s.max),
        ]);
    }
    let report = DemoReport {
        seed: rc.seed,
        config: rc.attn,
        zero_linear_scale: rc.zero_linear_scale,
        records,
    };
    let out = OutDir::create(&rc.out_dir)?;
    emit(&out, "demo", "demo", &report, &table, &[], rc.format)?;

    if let Some(r) = report.records.iter().find(|r| r.macs != r.expected_macs) {
        return Err(CliError::Check(format!(
            "{} counted {} MACs, closed form gives {}",
            r.mode, r.macs, r.expected_macs
        )));
    }
    Ok(())
}
