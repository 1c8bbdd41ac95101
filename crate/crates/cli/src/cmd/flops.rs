use clap::Args;
use refattn::cost::{
    dominant_ratio, published_figure, Convention, CostInputs, CostReport, OverheadBase,
};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{emit, num, OutDir, Table};
use crate::settings::{CommonArgs, RunConfig};

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Divide added costs by this stated base total instead of the closed form.
    #[arg(long = "paper-base")]
    pub paper_base: Option<f64>,
    /// Also report the implicit/explicit cost ratio at sequence length --L.
    #[arg(long)]
    pub asymptotic: bool,
    /// Sequence length for --asymptotic (both source and reference).
    #[arg(long = "L")]
    pub l: Option<u64>,
}

#[derive(Serialize)]
struct Asymptotic {
    l: u64,
    d: u64,
    m: u64,
    dominant_ratio: f64,
    limit: f64,
}

#[derive(Serialize)]
struct FlopsReport {
    paper_literal: CostReport,
    instrumented: CostReport,
    asymptotic: Option<Asymptotic>,
    note: String,
}

/// Three significant figures, e.g. `3.44e10`.
fn sci(x: f64) -> String {
    format!("{:.2e}", published_figure(x))
}

pub fn run(args: &FlopsArgs, rc: &RunConfig) -> CliResult<()> {
    let stated = args.paper_base.or(rc.file.paper_base);
    let base = match stated {
        Some(v) if v > 0.0 && v.is_finite() => OverheadBase::Stated { value: v },
        Some(v) => {
            return Err(CliError::Usage(format!(
                "paper-base must be positive, got {v}"
            )))
        }
        None => OverheadBase::ClosedForm,
    };
    let inputs = CostInputs::from_config(&rc.attn, Convention::PaperLiteral);
    let paper_literal = CostReport::new(&inputs, base)?;
    let instrumented = CostReport::new(&inputs.with_convention(Convention::Instrumented), base)?;

    let asymptotic = if args.asymptotic || rc.file.asymptotic.unwrap_or(false) {
        let l = args.l.or(rc.file.l).unwrap_or(rc.attn.l_src as u64);
        if l == 0 {
            return Err(CliError::Usage("L must be at least 1".into()));
        }
        let at = CostInputs::new(l, l, inputs.d, inputs.m, Convention::PaperLiteral);
        Some(Asymptotic {
            l,
            d: inputs.d,
            m: inputs.m,
            dominant_ratio: dominant_ratio(&at)?,
            limit: 2.0 / 3.0,
        })
    } else {
        None
    };

    let c_base = paper_literal.c_base;
    let note = match stated {
        Some(v) => format!(
            "overheads use the stated base {v:e}; the closed-form base for these inputs is {c_base} ({}), \
             a factor of {:.3} apart; exact percentages of the closed-form base are {:.4}% / {:.4}%",
            sci(c_base as f64),
            v / c_base as f64,
            paper_literal.overhead_m1_pct_exact,
            paper_literal.overhead_m2_pct_exact
        ),
        None => format!(
            "overheads use the closed-form base {c_base} ({}); pass --paper-base to divide by an externally stated total",
            sci(c_base as f64)
        ),
    };

    let mut table = Table::new(vec![
        "convention",
        "module",
        "total",
        "added",
        "added_3sf",
        "overhead_pct",
    ]);
    for r in [&paper_literal, &instrumented] {
        let conv = r.inputs.convention.as_str().to_string();
        table.push(vec![
            conv.clone(),
            "ra-base".into(),
            r.c_base.to_string(),
            "0".into(),
            "0".into(),
            "0.00".into(),
        ]);
        table.push(vec![
            conv.clone(),
            "explicit".into(),
            r.c_m1.to_string(),
            r.added_m1.to_string(),
            sci(r.added_m1 as f64),
            format!("{:.2}", r.overhead_m1_pct),
        ]);
        table.push(vec![
            conv,
            "implicit".into(),
            r.c_m2.to_string(),
            r.added_m2.to_string(),
            sci(r.added_m2 as f64),
            format!("{:.2}", r.overhead_m2_pct),
        ]);
    }
    let mut notes = vec![
        note.clone(),
        format!(
            "efficiency factor added_explicit / added_implicit = {:.2}",
            paper_literal.efficiency_factor
        ),
    ];
    if let Some(a) = &asymptotic {
        notes.push(format!(
            "dominant ratio at L={}, d={}, M={}: {} (limit 2/3)",
            a.l,
            a.d,
            a.m,
            num(a.dominant_ratio)
        ));
    }
    let report = FlopsReport {
        paper_literal,
        instrumented,
        asymptotic,
        note,
    };
    let out = OutDir::create(&rc.out_dir)?;
    emit(&out, "flops", "flops", &report, &table, &notes, rc.format)
}
