use clap::Args;
use refattn::autodiff::{gradcheck, unit_problem, BackwardOptions, GradReport, Param};
use refattn::{AggregationMode, AttnConfig, GatingMode};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{emit, num, OutDir, Table};
use crate::settings::{CommonArgs, RunConfig};

/// `L_src·L_ref·d` above this makes finite differences too slow for a desk run.
pub const FD_BUDGET: u64 = 1_000_000;
pub const TOLERANCE: f64 = 1e-4;
/// Below this the summary-token gradient is treated as dead.
pub const DEAD_GRADIENT: f64 = 1e-10;

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Central-difference step.
    #[arg(long = "fd-step")]
    pub fd_step: Option<f64>,
    /// Flip the sign of one analytic gradient (checker self-test).
    #[arg(long = "inject-fault", hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Serialize)]
struct GradcheckReport<'a> {
    seed: u64,
    config: AttnConfig,
    fd_step: f64,
    tolerance: f64,
    passed: bool,
    params: &'a [GradReport],
    /// Norm of the summary-token gradient, which reaches the loss only through the gate.
    t_s_gate_gradient_norm: Option<f64>,
    /// Set when that norm is below 1e-10, as forced by softmax-output aggregation.
    dead_gate_gradient: bool,
}

fn parse_param(name: &str) -> CliResult<Param> {
    Param::ALL
        .into_iter()
        .find(|p| p.as_str() == name)
        .ok_or_else(|| {
            let names: Vec<_> = Param::ALL.iter().map(|p| p.as_str()).collect();
            CliError::Usage(format!(
                "unknown parameter `{name}`, expected one of: {}",
                names.join(", ")
            ))
        })
}

pub fn run(args: &GradcheckArgs, rc: &RunConfig) -> CliResult<()> {
    let cfg = rc.attn;
    let work = (cfg.l_src as u64)
        .saturating_mul(cfg.l_ref as u64)
        .saturating_mul(cfg.d as u64);
    if work > FD_BUDGET {
        return Err(CliError::Usage(format!(
            "L-src·L-ref·d = {work} exceeds the finite-difference budget of {FD_BUDGET}; \
             try e.g. --L-src 4 --L-ref 6 --d 8 --M 2"
        )));
    }
    let fd_step = args.fd_step.or(rc.file.fd_step).unwrap_or(1e-5);
    if !(fd_step > 0.0 && fd_step.is_finite()) {
        return Err(CliError::Usage(format!(
            "fd-step must be positive, got {fd_step}"
        )));
    }
    let opts = BackwardOptions {
        flip_sign: args.inject_fault.as_deref().map(parse_param).transpose()?,
    };

    let (mut h_src, mut h_ref, w) = unit_problem::<f64>(&cfg, rc.seed)?;
    if let Some(m) = &rc.src_features {
        h_src = m.clone();
    }
    if let Some(m) = &rc.ref_features {
        h_ref = m.clone();
    }
    let reports = gradcheck(&h_src, &h_ref, &w, &cfg, None, fd_step, opts)?;

    let t_s_norm = (cfg.gating_mode == GatingMode::Aicg)
        .then(|| {
            reports
                .iter()
                .find(|r| r.param == Param::TS)
                .map(|r| r.analytic_norm)
        })
        .flatten();
    let dead = t_s_norm.is_some_and(|n| n < DEAD_GRADIENT);
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("every parameter is checked");
    let passed = worst.max_rel_err < TOLERANCE;

    let mut table = Table::new(vec![
        "param",
        "max_rel_err",
        "max_abs_err",
        "analytic_norm",
        "fd_step",
    ]);
    for r in &reports {
        table.push(vec![
            r.param.as_str().into(),
            num(r.max_rel_err),
            num(r.max_abs_err),
            num(r.analytic_norm),
            num(r.fd_step),
        ]);
    }
    let mut notes = Vec::new();
    if let Some(n) = t_s_norm {
        notes.push(format!(
            "summary-token gradient through the gate has norm {n:e}{}",
            if dead {
                " (dead: the gate does not depend on T_S)"
            } else {
                ""
            }
        ));
        if cfg.aggregation_mode == AggregationMode::SoftmaxOutput && !dead {
            notes.push("softmax-output aggregation should leave that gradient dead".into());
        }
    }
    let report = GradcheckReport {
        seed: rc.seed,
        config: cfg,
        fd_step,
        tolerance: TOLERANCE,
        passed,
        params: &reports,
        t_s_gate_gradient_norm: t_s_norm,
        dead_gate_gradient: dead,
    };
    let out = OutDir::create(&rc.out_dir)?;
    emit(
        &out,
        "gradcheck",
        "gradcheck",
        &report,
        &table,
        &notes,
        rc.format,
    )?;

    if !passed {
        return Err(CliError::Check(format!(
            "gradient of {} is off: max relative error {:e} ≥ {TOLERANCE:e}",
            worst.param.as_str(),
            worst.max_rel_err
        )));
    }
    Ok(())
}
