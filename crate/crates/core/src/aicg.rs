//! Implicit correlation gating.
//!
//! `M` learnable summary tokens are projected into key space with the
//! attention block's own `W_K`, attend over the reference keys to form `M`
//! summarized keys, and the source queries are scored against those. The
//! per-token gate is the sigmoid of the mean score, taken jointly over the
//! `M` summary tokens and all heads:
//!
//! ```text
//! S      = T_S · W_K
//! K_sum  = softmax(S_h K_hᵀ / √d_h) K_h           per head
//! logits = Q_h K_sum,hᵀ / √d_h                    per head, L_src×M
//! G_i    = σ( mean_{h, j} logits_h[i, j] )
//! ```
//!
//! [`AggregationMode::SoftmaxOutput`] averages the softmax of the scores
//! instead. Each softmax row sums to one, so that gate is the constant
//! `σ(1/M)`; it is kept to exercise that degenerate reading.

use serde::Serialize;

use crate::attention::{attend, check_inputs, fuse, project_qkv, AttnTrace, RAWeights};
use crate::config::{AggregationMode, AttnConfig, GatingMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_nt, row_softmax, sigmoid_scalar, MacCounter, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateMap<T> {
    /// Summary tokens in key space, `M×d`.
    pub s: Matrix<T>,
    /// Summarized reference keys, `M×d`.
    pub k_sum: Matrix<T>,
    /// Per head, the `M×L_ref` weights each summary token puts on the references.
    pub summary_weights: Vec<Matrix<T>>,
    /// Per head, `L_src×M` query/summary scores.
    pub logit_map: Vec<Matrix<T>>,
    /// Per head, row-softmax of `logit_map`.
    pub s_map: Vec<Matrix<T>>,
    /// `L_src×1` gate values, each in `(0, 1)`.
    pub gate: Matrix<T>,
    pub aggregation: AggregationMode,
}

impl<T: Scalar> GateMap<T> {
    pub fn values(&self) -> &[T] {
        self.gate.as_slice()
    }
}

/// Summarizes the reference keys into `M` tokens.
///
/// Returns `(S, K_sum, per-head summary weights)`. Charges
/// `M·d² + 2·L_ref·M·d`.
#[allow(clippy::type_complexity)]
pub fn summarize_reference<T: Scalar>(
    t_s: &Matrix<T>,
    w_k: &Matrix<T>,
    k: &Matrix<T>,
    heads: usize,
    counter: &mut MacCounter,
) -> Result<(Matrix<T>, Matrix<T>, Vec<Matrix<T>>)> {
    let d = k.cols();
    if t_s.cols() != d || w_k.shape() != (d, d) {
        return Err(Error::Dimension {
            op: "summarize_reference",
            lhs: t_s.shape(),
            rhs: k.shape(),
        });
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config {
            field: "heads",
            reason: format!("d = {d} is not divisible by heads = {heads}"),
        });
    }
    let dh = d / heads;
    let inv_sqrt = T::one() / T::from_usize(dh).unwrap().sqrt();
    let s = matmul(t_s, w_k, Some(counter))?;
    let mut k_sum = Matrix::zeros(t_s.rows(), d)?;
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let sh = s.col_block(h * dh, dh)?;
        let kh = k.col_block(h * dh, dh)?;
        let p = row_softmax(&matmul_nt(&sh, &kh, Some(counter))?.scale(inv_sqrt));
        k_sum.set_col_block(h * dh, &matmul(&p, &kh, Some(counter))?)?;
        weights.push(p);
    }
    Ok((s, k_sum, weights))
}

/// Collapses per-head `L_src×M` maps to one gate per source token:
/// `σ` of the mean over every head and column.
pub fn aggregate_gate<T: Scalar>(maps: &[Matrix<T>]) -> Result<Matrix<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Usage("no head maps to aggregate".into()))?;
    let (rows, cols) = first.shape();
    let mut acc = vec![T::zero(); rows];
    for m in maps {
        if m.shape() != (rows, cols) {
            return Err(Error::Dimension {
                op: "aggregate_gate",
                lhs: (rows, cols),
                rhs: m.shape(),
            });
        }
        for (a, s) in acc.iter_mut().zip(m.row_sums()) {
            *a += s;
        }
    }
    let denom = T::from_usize(maps.len() * cols).unwrap();
    Matrix::from_vec(
        rows,
        1,
        acc.into_iter().map(|a| sigmoid_scalar(a / denom)).collect(),
    )
}

/// Scores queries against the summarized keys and derives the gate.
/// Charges `2·L_src·M·d`.
#[allow(clippy::type_complexity)]
pub fn compute_gate<T: Scalar>(
    q: &Matrix<T>,
    k_sum: &Matrix<T>,
    heads: usize,
    aggregation: AggregationMode,
    counter: &mut MacCounter,
) -> Result<(Vec<Matrix<T>>, Vec<Matrix<T>>, Matrix<T>)> {
    let d = q.cols();
    if k_sum.cols() != d {
        return Err(Error::Dimension {
            op: "compute_gate",
            lhs: q.shape(),
            rhs: k_sum.shape(),
        });
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config {
            field: "heads",
            reason: format!("d = {d} is not divisible by heads = {heads}"),
        });
    }
    let dh = d / heads;
    let inv_sqrt = T::one() / T::from_usize(dh).unwrap().sqrt();
    let before = counter.count();
    let mut logits = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.col_block(h * dh, dh)?;
        let kh = k_sum.col_block(h * dh, dh)?;
        let l = matmul_nt(&qh, &kh, Some(counter))?.scale(inv_sqrt);
        maps.push(row_softmax(&l));
        logits.push(l);
    }
    // The score pass is charged at two units per executed MAC.
    let executed = counter.count() - before;
    counter.add(executed);
    let gate = match aggregation {
        AggregationMode::Logits => aggregate_gate(&logits)?,
        AggregationMode::SoftmaxOutput => aggregate_gate(&maps)?,
    };
    Ok((logits, maps, gate))
}

/// Computes the full gate map for `cfg` from the projected queries and keys.
pub fn gate_map<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    w: &RAWeights<T>,
    cfg: &AttnConfig,
    counter: &mut MacCounter,
) -> Result<GateMap<T>> {
    let (s, k_sum, summary_weights) = summarize_reference(&w.t_s, &w.w_k, k, cfg.heads, counter)?;
    let (logit_map, s_map, gate) =
        compute_gate(q, &k_sum, cfg.heads, cfg.aggregation_mode, counter)?;
    Ok(GateMap {
        s,
        k_sum,
        summary_weights,
        logit_map,
        s_map,
        gate,
        aggregation: cfg.aggregation_mode,
    })
}

/// Reference attention gated by implicit correlation.
pub fn aicg_forward<T: Scalar>(
    h_src: &Matrix<T>,
    h_ref: &Matrix<T>,
    w: &RAWeights<T>,
    cfg: &AttnConfig,
    counter: &mut MacCounter,
) -> Result<(AttnTrace<T>, GateMap<T>)> {
    if cfg.gating_mode != GatingMode::Aicg {
        return Err(Error::Config {
            field: "gating_mode",
            reason: format!("expected aicg, got {}", cfg.gating_mode),
        });
    }
    check_inputs(h_src, h_ref, w, cfg)?;
    let start = counter.count();
    let (q, k, v) = project_qkv(h_src, h_ref, w, counter)?;
    let (attn_weights, raw_out) = attend(&q, &k, &v, cfg.heads, counter)?;
    let map = gate_map(&q, &k, w, cfg, counter)?;
    let (projected_out, pre_zero_linear, final_out) = fuse(
        h_src,
        &raw_out,
        w,
        cfg.gate_placement,
        Some(map.values()),
        counter,
    )?;
    let trace = AttnTrace {
        q,
        k,
        v,
        attn_weights,
        raw_out,
        projected_out,
        pre_zero_linear,
        final_out,
        gate: Some(map.values().to_vec()),
        mac_count: counter.count() - start,
    };
    Ok((trace, map))
}
