//! Closed-form multiply-accumulate counts for reference attention and the
//! two per-token gating schemes, with reconciliation against the live
//! counter.
//!
//! ```text
//! C_base     = (3·L_src + 2·L_ref)·d² + 4·L_src·L_ref·d
//! C_explicit = C_base + 2·L_src·L_ref·d
//! C_implicit = C_base + P + 2·L_ref·M·d + 2·L_src·M·d
//! ```
//!
//! `P` is the summary-token projection. The published form charges it
//! `M·d` ([`Convention::PaperLiteral`]); projecting `M` tokens through a
//! `d×d` matrix actually costs `M·d²`, which is what the counter sees
//! ([`Convention::Instrumented`]).
//!
//! All arithmetic is checked `u128`.

use serde::Serialize;

use crate::attention::RAWeights;
use crate::block::forward;
use crate::config::{AttnConfig, GatingMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{rand_matrix, MacCounter, Rng};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    #[default]
    PaperLiteral,
    Instrumented,
}

impl Convention {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PaperLiteral => "paper-literal",
            Self::Instrumented => "instrumented",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostInputs {
    pub l_src: u64,
    pub l_ref: u64,
    pub d: u64,
    pub m: u64,
    pub convention: Convention,
}

impl CostInputs {
    pub fn new(l_src: u64, l_ref: u64, d: u64, m: u64, convention: Convention) -> Self {
        Self {
            l_src,
            l_ref,
            d,
            m,
            convention,
        }
    }

    pub fn from_config(cfg: &AttnConfig, convention: Convention) -> Self {
        Self::new(
            cfg.l_src as u64,
            cfg.l_ref as u64,
            cfg.d as u64,
            cfg.m as u64,
            convention,
        )
    }

    pub fn with_convention(mut self, convention: Convention) -> Self {
        self.convention = convention;
        self
    }

    fn validate(&self) -> Result<()> {
        for (field, v) in [("l_src", self.l_src), ("l_ref", self.l_ref), ("d", self.d)] {
            if v == 0 {
                return Err(Error::Config {
                    field,
                    reason: "must be at least 1".into(),
                });
            }
        }
        Ok(())
    }
}

fn mul(terms: &[u64], what: &'static str) -> Result<u128> {
    terms
        .iter()
        .try_fold(1u128, |acc, &t| acc.checked_mul(t as u128))
        .ok_or(Error::Overflow(what))
}

fn add(a: u128, b: u128, what: &'static str) -> Result<u128> {
    a.checked_add(b).ok_or(Error::Overflow(what))
}

pub fn cost_base(inputs: &CostInputs) -> Result<u128> {
    inputs.validate()?;
    let CostInputs {
        l_src, l_ref, d, ..
    } = *inputs;
    let tokens = add(mul(&[3, l_src], "base")?, mul(&[2, l_ref], "base")?, "base")?;
    let projections = tokens
        .checked_mul(mul(&[d, d], "base")?)
        .ok_or(Error::Overflow("base"))?;
    add(projections, mul(&[4, l_src, l_ref, d], "base")?, "base")
}

/// Cost the explicit similarity gate adds on top of the base.
pub fn added_explicit(inputs: &CostInputs) -> Result<u128> {
    inputs.validate()?;
    mul(&[2, inputs.l_src, inputs.l_ref, inputs.d], "explicit")
}

/// Cost the implicit gate adds on top of the base. Zero when `M = 0`.
pub fn added_implicit(inputs: &CostInputs) -> Result<u128> {
    inputs.validate()?;
    let CostInputs {
        l_src,
        l_ref,
        d,
        m,
        convention,
    } = *inputs;
    let projection = match convention {
        Convention::PaperLiteral => mul(&[m, d], "implicit")?,
        Convention::Instrumented => mul(&[m, d, d], "implicit")?,
    };
    let summarize = mul(&[2, l_ref, m, d], "implicit")?;
    let estimate = mul(&[2, l_src, m, d], "implicit")?;
    add(
        add(projection, summarize, "implicit")?,
        estimate,
        "implicit",
    )
}

pub fn cost_explicit(inputs: &CostInputs) -> Result<u128> {
    add(cost_base(inputs)?, added_explicit(inputs)?, "explicit")
}

pub fn cost_implicit(inputs: &CostInputs) -> Result<u128> {
    add(cost_base(inputs)?, added_implicit(inputs)?, "implicit")
}

/// Closed-form total for one gating mode. The global gate is a single
/// scalar and adds nothing.
pub fn cost_for_mode(inputs: &CostInputs, mode: GatingMode) -> Result<u128> {
    match mode {
        GatingMode::Vanilla | GatingMode::Global => cost_base(inputs),
        GatingMode::Explicit => cost_explicit(inputs),
        GatingMode::Aicg => cost_implicit(inputs),
    }
}

/// `C_implicit / C_explicit` for equal source and reference lengths.
///
/// Tends to 2/3 from above as `L` grows with `d` and `M` fixed.
pub fn dominant_ratio(inputs: &CostInputs) -> Result<f64> {
    if inputs.l_src != inputs.l_ref {
        return Err(Error::Config {
            field: "l_ref",
            reason: format!(
                "the asymptotic ratio assumes L_src == L_ref, got {} and {}",
                inputs.l_src, inputs.l_ref
            ),
        });
    }
    Ok(cost_implicit(inputs)? as f64 / cost_explicit(inputs)? as f64)
}

/// Rounds a non-negative value half-up to `places` decimals.
pub fn round_half_up(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f + 0.5).floor() / f
}

/// Brings a non-negative count to the precision of a published total:
/// three significant figures, rounded up (`34_359_738_368 → 3.44e10`,
/// `268_451_840 → 2.69e8`).
pub fn published_figure(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let exp = x.log10().floor() as i32;
    if exp >= 2 {
        let unit = 10f64.powi(exp - 2);
        (x / unit).ceil() * unit
    } else {
        let f = 10f64.powi(2 - exp);
        (x * f).ceil() / f
    }
}

/// Which denominator the overhead percentages use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OverheadBase {
    /// The exact closed-form base.
    ClosedForm,
    /// An externally stated base total given to three significant figures.
    /// Added costs are brought to the same precision with [`published_figure`]
    /// before dividing.
    Stated { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub inputs: CostInputs,
    pub c_base: u128,
    pub c_m1: u128,
    pub c_m2: u128,
    pub added_m1: u128,
    pub added_m2: u128,
    pub overhead_base: OverheadBase,
    /// Percent of the overhead base, half-up to 2 decimals.
    pub overhead_m1_pct: f64,
    pub overhead_m2_pct: f64,
    /// Unrounded percentages of the exact closed-form base.
    pub overhead_m1_pct_exact: f64,
    pub overhead_m2_pct_exact: f64,
    /// `C_implicit / C_explicit`, present when `L_src == L_ref`.
    pub dominant_ratio: Option<f64>,
    /// `added_m1 / added_m2`.
    pub efficiency_factor: f64,
}

impl CostReport {
    pub fn new(inputs: &CostInputs, overhead_base: OverheadBase) -> Result<Self> {
        let c_base = cost_base(inputs)?;
        let added_m1 = added_explicit(inputs)?;
        let added_m2 = added_implicit(inputs)?;
        let pct = |added: u128| match overhead_base {
            OverheadBase::ClosedForm => round_half_up(100.0 * added as f64 / c_base as f64, 2),
            OverheadBase::Stated { value } => {
                round_half_up(100.0 * published_figure(added as f64) / value, 2)
            }
        };
        let overhead_m1_pct = pct(added_m1);
        let overhead_m2_pct = pct(added_m2);
        Ok(Self {
            inputs: *inputs,
            c_base,
            c_m1: add(c_base, added_m1, "explicit")?,
            c_m2: add(c_base, added_m2, "implicit")?,
            added_m1,
            added_m2,
            overhead_base,
            overhead_m1_pct,
            overhead_m2_pct,
            overhead_m1_pct_exact: 100.0 * added_m1 as f64 / c_base as f64,
            overhead_m2_pct_exact: 100.0 * added_m2 as f64 / c_base as f64,
            dominant_ratio: (inputs.l_src == inputs.l_ref)
                .then(|| dominant_ratio(inputs))
                .transpose()?,
            efficiency_factor: added_m1 as f64 / added_m2 as f64,
        })
    }
}

/// Instrumented counts next to both closed-form conventions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconciliation {
    pub counted: Vec<(GatingMode, u128)>,
    pub paper_literal: CostReport,
    pub instrumented: CostReport,
}

/// Runs one counted forward per gating mode on seeded features and checks
/// each count against the [`Convention::Instrumented`] closed form.
pub fn reconcile<T: Scalar>(
    inputs: &CostInputs,
    cfg: &AttnConfig,
    weights: &RAWeights<T>,
    seed: u64,
) -> Result<Reconciliation> {
    let from_cfg = CostInputs::from_config(cfg, inputs.convention);
    if from_cfg != *inputs {
        return Err(Error::Config {
            field: "cost inputs",
            reason: format!("{inputs:?} does not describe {cfg:?}"),
        });
    }
    let instrumented = inputs.with_convention(Convention::Instrumented);
    let mut rng = Rng::new(seed);
    let h_src = rand_matrix::<T>(cfg.l_src, cfg.d, &mut rng, 1.0)?;
    let h_ref = rand_matrix::<T>(cfg.l_ref, cfg.d, &mut rng, 1.0)?;
    let base = cost_base(&instrumented)?;
    let mut counted = Vec::with_capacity(GatingMode::ALL.len());
    for mode in GatingMode::ALL {
        let mut counter = MacCounter::new();
        forward(&h_src, &h_ref, weights, &cfg.with_mode(mode), &mut counter)?;
        let got = counter.count();
        let expected = cost_for_mode(&instrumented, mode)?;
        if got != expected {
            // Blame the base when it already disagrees on its own.
            let (term, counted, expected) = if got < base {
                ("c_base", got, base)
            } else {
                match mode {
                    GatingMode::Explicit => ("added_m1", got - base, expected - base),
                    GatingMode::Aicg => ("added_m2", got - base, expected - base),
                    _ => ("c_base", got, expected),
                }
            };
            return Err(Error::Reconcile {
                mode: mode.to_string(),
                term,
                counted,
                expected,
            });
        }
        counted.push((mode, got));
    }
    Ok(Reconciliation {
        counted,
        paper_literal: CostReport::new(
            &inputs.with_convention(Convention::PaperLiteral),
            OverheadBase::ClosedForm,
        )?,
        instrumented: CostReport::new(&instrumented, OverheadBase::ClosedForm)?,
    })
}
