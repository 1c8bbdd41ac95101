//! Reverse-mode gradients of a squared-error loss on the block output,
//! hand-derived over the fixed forward graph, and a central-difference
//! checker to hold them to account.
//!
//! The graph is static: projections, per-head attention, the gate (global
//! scalar, explicit similarity or implicit summary path), gated fusion and
//! the residual. [`record`] runs the forward and keeps what the backward
//! rules in [`ops`] need; [`backward`] walks the graph in reverse.

mod check;
pub mod ops;

use serde::Serialize;

pub use check::{finite_difference, gradcheck, relative_error, unit_problem, GradReport};

use crate::attention::RAWeights;
use crate::block::{forward, Forward};
use crate::config::{AggregationMode, AttnConfig, GatePlacement, GatingMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{MacCounter, Matrix};

use ops::{
    matmul_backward, matmul_nt_backward, mean_backward, scale_rows_backward, sigmoid_backward,
    softmax_backward,
};

/// A learnable parameter of [`RAWeights`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    WQ,
    WK,
    WV,
    ToOut,
    ZeroLinear,
    TS,
    GlobalGateLogit,
}

impl Param {
    pub const ALL: [Param; 7] = [
        Self::WQ,
        Self::WK,
        Self::WV,
        Self::ToOut,
        Self::ZeroLinear,
        Self::TS,
        Self::GlobalGateLogit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::WQ => "w_q",
            Self::WK => "w_k",
            Self::WV => "w_v",
            Self::ToOut => "to_out",
            Self::ZeroLinear => "zero_linear",
            Self::TS => "t_s",
            Self::GlobalGateLogit => "global_gate_logit",
        }
    }
}

impl<T: Scalar> RAWeights<T> {
    /// The parameter as a matrix; the scalar gate logit is `1×1`.
    pub fn param(&self, p: Param) -> Matrix<T> {
        match p {
            Param::WQ => self.w_q.clone(),
            Param::WK => self.w_k.clone(),
            Param::WV => self.w_v.clone(),
            Param::ToOut => self.to_out.clone(),
            Param::ZeroLinear => self.zero_linear.clone(),
            Param::TS => self.t_s.clone(),
            Param::GlobalGateLogit => Matrix::from_vec(1, 1, vec![self.global_gate_logit]).unwrap(),
        }
    }

    pub fn set_param(&mut self, p: Param, value: Matrix<T>) -> Result<()> {
        let current = self.param(p);
        if current.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_param",
                lhs: current.shape(),
                rhs: value.shape(),
            });
        }
        match p {
            Param::WQ => self.w_q = value,
            Param::WK => self.w_k = value,
            Param::WV => self.w_v = value,
            Param::ToOut => self.to_out = value,
            Param::ZeroLinear => self.zero_linear = value,
            Param::TS => self.t_s = value,
            Param::GlobalGateLogit => self.global_gate_logit = value.get(0, 0),
        }
        Ok(())
    }
}

/// Operation kinds appearing in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    MatMul,
    RowSoftmax,
    Sigmoid,
    BroadcastScale,
    Mean,
    ResidualAdd,
}

/// One node of the recorded graph: what it computes and from what.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffNode {
    pub kind: OpKind,
    pub output: &'static str,
    pub inputs: Vec<&'static str>,
}

fn node(kind: OpKind, output: &'static str, inputs: &[&'static str]) -> DiffNode {
    DiffNode {
        kind,
        output,
        inputs: inputs.to_vec(),
    }
}

fn graph(cfg: &AttnConfig) -> Vec<DiffNode> {
    use OpKind::*;
    let mut g = vec![
        node(MatMul, "q", &["h_src", "w_q"]),
        node(MatMul, "k", &["h_ref", "w_k"]),
        node(MatMul, "v", &["h_ref", "w_v"]),
        node(MatMul, "scores", &["q", "k"]),
        node(RowSoftmax, "attn", &["scores"]),
        node(MatMul, "raw", &["attn", "v"]),
    ];
    match cfg.gating_mode {
        GatingMode::Vanilla | GatingMode::Explicit => {}
        GatingMode::Global => g.push(node(Sigmoid, "gate", &["global_gate_logit"])),
        GatingMode::Aicg => {
            g.extend([
                node(MatMul, "s", &["t_s", "w_k"]),
                node(MatMul, "summary_scores", &["s", "k"]),
                node(RowSoftmax, "summary_weights", &["summary_scores"]),
                node(MatMul, "k_sum", &["summary_weights", "k"]),
                node(MatMul, "logits", &["q", "k_sum"]),
            ]);
            if cfg.aggregation_mode == AggregationMode::SoftmaxOutput {
                g.push(node(RowSoftmax, "s_map", &["logits"]));
                g.push(node(Mean, "gate_logit", &["s_map"]));
            } else {
                g.push(node(Mean, "gate_logit", &["logits"]));
            }
            g.push(node(Sigmoid, "gate", &["gate_logit"]));
        }
    }
    let gated = cfg.gating_mode != GatingMode::Vanilla;
    match (gated, cfg.gate_placement) {
        (true, GatePlacement::BeforeToOut) => {
            g.push(node(BroadcastScale, "gated_raw", &["gate", "raw"]));
            g.push(node(MatMul, "pre_zero_linear", &["gated_raw", "to_out"]));
        }
        (true, GatePlacement::BeforeZeroLinear) => {
            g.push(node(MatMul, "projected", &["raw", "to_out"]));
            g.push(node(
                BroadcastScale,
                "pre_zero_linear",
                &["gate", "projected"],
            ));
        }
        (false, _) => g.push(node(MatMul, "pre_zero_linear", &["raw", "to_out"])),
    }
    g.push(node(MatMul, "branch", &["pre_zero_linear", "zero_linear"]));
    g.push(node(ResidualAdd, "final_out", &["branch", "h_src"]));
    g
}

struct Cache<T> {
    h_src: Matrix<T>,
    h_ref: Matrix<T>,
    weights: RAWeights<T>,
}

/// A forward pass, optionally with the values the backward needs.
pub struct Recording<T> {
    pub cfg: AttnConfig,
    pub forward: Forward<T>,
    pub nodes: Vec<DiffNode>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Recording<T> {
    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }
}

/// Runs the forward for `cfg`. Without `caching` the recording cannot be
/// differentiated.
pub fn record<T: Scalar>(
    h_src: &Matrix<T>,
    h_ref: &Matrix<T>,
    w: &RAWeights<T>,
    cfg: &AttnConfig,
    caching: bool,
) -> Result<Recording<T>> {
    let forward = forward(h_src, h_ref, w, cfg, &mut MacCounter::new())?;
    Ok(Recording {
        cfg: *cfg,
        forward,
        nodes: graph(cfg),
        cache: caching.then(|| Cache {
            h_src: h_src.clone(),
            h_ref: h_ref.clone(),
            weights: w.clone(),
        }),
    })
}

/// `Σ (final_out − target)²`, with a zero target when `target` is `None`.
pub fn squared_error<T: Scalar>(out: &Matrix<T>, target: Option<&Matrix<T>>) -> Result<T> {
    Ok(residual(out, target)?
        .as_slice()
        .iter()
        .map(|&x| x * x)
        .sum())
}

fn residual<T: Scalar>(out: &Matrix<T>, target: Option<&Matrix<T>>) -> Result<Matrix<T>> {
    match target {
        Some(t) => out.sub(t),
        None => Ok(out.clone()),
    }
}

/// Gradient of the loss with respect to every [`Param`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gradients<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub to_out: Matrix<T>,
    pub zero_linear: Matrix<T>,
    pub t_s: Matrix<T>,
    pub global_gate_logit: T,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, p: Param) -> Matrix<T> {
        match p {
            Param::WQ => self.w_q.clone(),
            Param::WK => self.w_k.clone(),
            Param::WV => self.w_v.clone(),
            Param::ToOut => self.to_out.clone(),
            Param::ZeroLinear => self.zero_linear.clone(),
            Param::TS => self.t_s.clone(),
            Param::GlobalGateLogit => Matrix::from_vec(1, 1, vec![self.global_gate_logit]).unwrap(),
        }
    }

    fn flip(&mut self, p: Param) {
        match p {
            Param::WQ => self.w_q = self.w_q.scale(-T::one()),
            Param::WK => self.w_k = self.w_k.scale(-T::one()),
            Param::WV => self.w_v = self.w_v.scale(-T::one()),
            Param::ToOut => self.to_out = self.to_out.scale(-T::one()),
            Param::ZeroLinear => self.zero_linear = self.zero_linear.scale(-T::one()),
            Param::TS => self.t_s = self.t_s.scale(-T::one()),
            Param::GlobalGateLogit => self.global_gate_logit = -self.global_gate_logit,
        }
    }
}

/// Knobs for [`backward`]. `flip_sign` plants a sign error in one
/// parameter's gradient so the checker can be shown to catch it.
#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardOptions {
    pub flip_sign: Option<Param>,
}

/// Analytic gradients of [`squared_error`] for a cached recording.
pub fn backward<T: Scalar>(
    rec: &Recording<T>,
    target: Option<&Matrix<T>>,
    opts: BackwardOptions,
) -> Result<Gradients<T>> {
    let cache = rec.cache.as_ref().ok_or_else(|| {
        Error::Usage("backward needs a forward recorded with caching enabled".into())
    })?;
    let cfg = &rec.cfg;
    let w = &cache.weights;
    let t = &rec.forward.trace;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let inv_sqrt = T::one() / T::from_usize(dh).unwrap().sqrt();
    let two = T::one() + T::one();

    // Residual: ∂branch = ∂final.
    let d_final = residual(&t.final_out, target)?.scale(two);
    let (d_pre, d_zero_linear) = matmul_backward(&t.pre_zero_linear, &w.zero_linear, &d_final)?;

    let gate = t.gate.as_deref();
    let (d_raw, d_to_out, d_gate) = match (gate, cfg.gate_placement) {
        (None, _) => {
            let (d_raw, d_to_out) = matmul_backward(&t.raw_out, &w.to_out, &d_pre)?;
            (d_raw, d_to_out, None)
        }
        (Some(g), GatePlacement::BeforeZeroLinear) => {
            let (d_proj, d_g) = scale_rows_backward(&t.projected_out, g, &d_pre)?;
            let (d_raw, d_to_out) = matmul_backward(&t.raw_out, &w.to_out, &d_proj)?;
            (d_raw, d_to_out, Some(d_g))
        }
        (Some(g), GatePlacement::BeforeToOut) => {
            let gated_raw = t.raw_out.scale_rows(g)?;
            let (d_gated, d_to_out) = matmul_backward(&gated_raw, &w.to_out, &d_pre)?;
            let (d_raw, d_g) = scale_rows_backward(&t.raw_out, g, &d_gated)?;
            (d_raw, d_to_out, Some(d_g))
        }
    };

    // Attention core, head by head.
    let mut d_q = Matrix::zeros(cfg.l_src, cfg.d)?;
    let mut d_k = Matrix::zeros(cfg.l_ref, cfg.d)?;
    let mut d_v = Matrix::zeros(cfg.l_ref, cfg.d)?;
    for h in 0..heads {
        let a = &t.attn_weights[h];
        let vh = t.v.col_block(h * dh, dh)?;
        let (d_a, d_vh) = matmul_backward(a, &vh, &d_raw.col_block(h * dh, dh)?)?;
        let d_scores = softmax_backward(a, &d_a)?.scale(inv_sqrt);
        let (d_qh, d_kh) = matmul_nt_backward(
            &t.q.col_block(h * dh, dh)?,
            &t.k.col_block(h * dh, dh)?,
            &d_scores,
        )?;
        d_q.set_col_block(h * dh, &d_qh)?;
        d_k.set_col_block(h * dh, &d_kh)?;
        d_v.set_col_block(h * dh, &d_vh)?;
    }

    let mut d_global = T::zero();
    let mut d_t_s = Matrix::zeros(w.t_s.rows(), w.t_s.cols())?;
    let mut d_w_k_summary = Matrix::zeros(cfg.d, cfg.d)?;
    match (cfg.gating_mode, gate, d_gate) {
        (GatingMode::Global, Some(g), Some(d_g)) => {
            // One shared sigmoid: accumulate over tokens.
            let y = g[0];
            d_global = d_g.iter().map(|&dg| sigmoid_backward(y, dg)).sum();
        }
        (GatingMode::Aicg, Some(g), Some(d_g)) => {
            let map = rec.forward.gate_map.as_ref().ok_or_else(|| {
                Error::Usage("implicit gate recorded without its gate map".into())
            })?;
            let m = w.t_s.rows();
            let dz: Vec<T> = g
                .iter()
                .zip(&d_g)
                .map(|(&y, &dg)| sigmoid_backward(y, dg))
                .collect();
            let d_mean = mean_backward(&dz, heads, cfg.l_src, m)?;
            let mut d_s = Matrix::zeros(m, cfg.d)?;
            for h in 0..heads {
                let d_logits = match cfg.aggregation_mode {
                    AggregationMode::Logits => d_mean.clone(),
                    AggregationMode::SoftmaxOutput => softmax_backward(&map.s_map[h], &d_mean)?,
                }
                .scale(inv_sqrt);
                let qh = t.q.col_block(h * dh, dh)?;
                let kh = t.k.col_block(h * dh, dh)?;
                let (d_qh, d_ksum_h) =
                    matmul_nt_backward(&qh, &map.k_sum.col_block(h * dh, dh)?, &d_logits)?;
                let p = &map.summary_weights[h];
                let (d_p, d_kh_value) = matmul_backward(p, &kh, &d_ksum_h)?;
                let d_y = softmax_backward(p, &d_p)?.scale(inv_sqrt);
                let (d_sh, d_kh_score) =
                    matmul_nt_backward(&map.s.col_block(h * dh, dh)?, &kh, &d_y)?;

                let mut block = d_q.col_block(h * dh, dh)?;
                block.add_assign(&d_qh)?;
                d_q.set_col_block(h * dh, &block)?;
                let mut block = d_k.col_block(h * dh, dh)?;
                block.add_assign(&d_kh_value)?;
                block.add_assign(&d_kh_score)?;
                d_k.set_col_block(h * dh, &block)?;
                d_s.set_col_block(h * dh, &d_sh)?;
            }
            let (d_ts, d_wk) = matmul_backward(&w.t_s, &w.w_k, &d_s)?;
            d_t_s = d_ts;
            d_w_k_summary = d_wk;
        }
        // Vanilla has no gate; the explicit gate depends only on the inputs.
        _ => {}
    }

    let (_, d_w_q) = matmul_backward(&cache.h_src, &w.w_q, &d_q)?;
    let (_, mut d_w_k) = matmul_backward(&cache.h_ref, &w.w_k, &d_k)?;
    d_w_k.add_assign(&d_w_k_summary)?;
    let (_, d_w_v) = matmul_backward(&cache.h_ref, &w.w_v, &d_v)?;

    let mut grads = Gradients {
        w_q: d_w_q,
        w_k: d_w_k,
        w_v: d_w_v,
        to_out: d_to_out,
        zero_linear: d_zero_linear,
        t_s: d_t_s,
        global_gate_logit: d_global,
    };
    if let Some(p) = opts.flip_sign {
        grads.flip(p);
    }
    Ok(grads)
}
