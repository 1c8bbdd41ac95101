use clap::Args;
use refattn::block::forward;
use refattn::{AttnConfig, GatingMode, MacCounter};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{num, to_json, OutDir, Table};
use crate::settings::{CommonArgs, Format, RunConfig};

#[derive(Debug, Clone, Args)]
pub struct GateExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Require the PGM image; fails when L-src is not a perfect square.
    /// Without it the image is written only when L-src is square.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Serialize)]
struct ExportReport {
    seed: u64,
    config: AttnConfig,
    csv: String,
    pgm: Option<String>,
    gate_min: f64,
    gate_mean: f64,
    gate_max: f64,
}

fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// Binary 8-bit PGM of the gate laid out row-major on a `side×side` grid.
pub fn pgm(gate: &[f64], side: usize) -> Vec<u8> {
    let mut bytes = format!("P5 {side} {side} 255\n").into_bytes();
    bytes.extend(
        gate.iter()
            .map(|&g| (255.0 * g).round().clamp(0.0, 255.0) as u8),
    );
    bytes
}

pub fn run(args: &GateExportArgs, rc: &RunConfig) -> CliResult<()> {
    let cfg = rc.attn;
    if cfg.gating_mode == GatingMode::Vanilla {
        return Err(CliError::Usage(
            "vanilla mode has no gate to export; pick another --gating".into(),
        ));
    }
    let want_pgm = args.pgm || rc.file.pgm.unwrap_or(false);
    let side = square_side(cfg.l_src);
    if want_pgm && side.is_none() {
        return Err(CliError::Usage(format!(
            "PGM output needs L-src to be a perfect square, got {}",
            cfg.l_src
        )));
    }

    let (h_src, h_ref, w) = rc.problem()?;
    let result = forward(&h_src, &h_ref, &w, &cfg, &mut MacCounter::new())?;
    let gate = result.gate().expect("gated modes produce a gate");

    let out = OutDir::create(&rc.out_dir)?;
    let mut csv = Table::new(vec!["token", "gate"]);
    for (i, &g) in gate.iter().enumerate() {
        csv.push(vec![i.to_string(), num(g)]);
    }
    let csv_path = out.write("gate.csv", csv.to_csv().as_bytes())?;
    let pgm_path = side
        .map(|s| out.write("gate.pgm", &pgm(gate, s)))
        .transpose()?;

    let report = ExportReport {
        seed: rc.seed,
        config: cfg,
        csv: csv_path.display().to_string(),
        pgm: pgm_path.as_ref().map(|p| p.display().to_string()),
        gate_min: gate.iter().copied().fold(f64::INFINITY, f64::min),
        gate_mean: gate.iter().sum::<f64>() / gate.len() as f64,
        gate_max: gate.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let json = to_json("gate-export", &report);
    out.write("gate-export.json", json.as_bytes())?;

    match rc.format {
        Format::Json => print!("{json}"),
        Format::Csv => print!("{}", csv.to_csv()),
        Format::Table => {
            let mut t = Table::new(vec!["field", "value"]);
            t.push(vec!["mode".into(), cfg.gating_mode.to_string()]);
            t.push(vec!["tokens".into(), gate.len().to_string()]);
            t.push(vec!["gate_min".into(), num(report.gate_min)]);
            t.push(vec!["gate_mean".into(), num(report.gate_mean)]);
            t.push(vec!["gate_max".into(), num(report.gate_max)]);
            t.push(vec!["csv".into(), report.csv.clone()]);
            t.push(vec![
                "pgm".into(),
                report.pgm.clone().unwrap_or_else(|| "-".into()),
            ]);
            print!("{}", t.to_aligned());
        }
    }
    Ok(())
}
