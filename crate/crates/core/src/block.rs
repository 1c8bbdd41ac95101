//! Single entry point over the four gating modes.

use serde::Serialize;

use crate::aicg::{aicg_forward, GateMap};
use crate::attention::{
    explicit_gate_forward, global_gate_forward, ra_forward, AttnTrace, RAWeights, SimilarityGate,
};
use crate::config::{AttnConfig, GatingMode};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{MacCounter, Matrix};

/// Result of one forward pass in any gating mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Forward<T> {
    pub mode: GatingMode,
    pub trace: AttnTrace<T>,
    /// Present in [`GatingMode::Aicg`].
    pub gate_map: Option<GateMap<T>>,
    /// Present in [`GatingMode::Explicit`].
    pub similarity: Option<SimilarityGate<T>>,
}

impl<T: Scalar> Forward<T> {
    /// Per-source-token gate, if the mode has one.
    pub fn gate(&self) -> Option<&[T]> {
        self.trace.gate.as_deref()
    }
}

/// Runs the block in `cfg.gating_mode`.
pub fn forward<T: Scalar>(
    h_src: &Matrix<T>,
    h_ref: &Matrix<T>,
    w: &RAWeights<T>,
    cfg: &AttnConfig,
    counter: &mut MacCounter,
) -> Result<Forward<T>> {
    let mut gate_map = None;
    let mut similarity = None;
    let trace = match cfg.gating_mode {
        GatingMode::Vanilla => ra_forward(h_src, h_ref, w, cfg, counter)?,
        GatingMode::Global => global_gate_forward(h_src, h_ref, w, cfg, counter)?,
        GatingMode::Explicit => {
            let (t, s) = explicit_gate_forward(h_src, h_ref, w, cfg, counter)?;
            similarity = Some(s);
            t
        }
        GatingMode::Aicg => {
            let (t, g) = aicg_forward(h_src, h_ref, w, cfg, counter)?;
            gate_map = Some(g);
            t
        }
    };
    Ok(Forward {
        mode: cfg.gating_mode,
        trace,
        gate_map,
        similarity,
    })
}
