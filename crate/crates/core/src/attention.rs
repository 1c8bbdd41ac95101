//! Reference attention: source tokens query reference tokens, and the
//! attended features are fused back onto the source through `to_out`, an
//! optional per-token gate, a zero-initialized `zero_linear` and a
//! residual connection.
//!
//! ```text
//! Q = H_src·W_Q   K = H_ref·W_K   V = H_ref·W_V
//! raw       = concat_h softmax(Q_h K_hᵀ / √d_h) V_h
//! projected = raw · to_out
//! final     = (g ⊙ projected) · zero_linear + H_src
//! ```
//!
//! Heads split `d` into contiguous blocks of `d / heads` columns.
//!
//! MAC accounting: projections are charged at one unit per executed MAC.
//! The attention core (scores and value aggregation, `2·L_src·L_ref·d`
//! executed MACs) is charged twice over, giving the `4·L_src·L_ref·d`
//! interaction term of the closed-form base cost. The cosine-similarity
//! matrix of the explicit baseline is charged `2·L_src·L_ref·d`.

use serde::Serialize;

use crate::config::{AttnConfig, GatePlacement, GatingMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    matmul, matmul_nt, rand_matrix, row_softmax_mut, sigmoid_scalar, MacCounter, Matrix, Rng,
};

/// Parameters of one reference-attention block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RAWeights<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub to_out: Matrix<T>,
    pub zero_linear: Matrix<T>,
    /// Learnable summary tokens, `M×d`.
    pub t_s: Matrix<T>,
    /// Pre-sigmoid scalar used by [`GatingMode::Global`].
    pub global_gate_logit: T,
    /// Fixed weight of the explicit-similarity gate.
    pub explicit_weight: T,
}

impl<T: Scalar> RAWeights<T> {
    /// Seeded initialization: every learnable matrix uniform in
    /// `[-1/√d, 1/√d]`, `zero_linear` exactly zero, global gate logit 0,
    /// explicit weight 0.5.
    pub fn init(cfg: &AttnConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let s = 1.0 / (d as f64).sqrt();
        Ok(Self {
            w_q: rand_matrix(d, d, rng, s)?,
            w_k: rand_matrix(d, d, rng, s)?,
            w_v: rand_matrix(d, d, rng, s)?,
            to_out: rand_matrix(d, d, rng, s)?,
            zero_linear: Matrix::zeros(d, d)?,
            t_s: rand_matrix(cfg.m, d, rng, s)?,
            global_gate_logit: T::zero(),
            explicit_weight: T::from_f64_lossy(0.5),
        })
    }

    /// Replaces `zero_linear` with a uniform draw in `[-scale, scale]`.
    pub fn with_random_zero_linear(mut self, rng: &mut Rng, scale: f64) -> Result<Self> {
        let d = self.zero_linear.rows();
        self.zero_linear = rand_matrix(d, d, rng, scale)?;
        Ok(self)
    }

    pub fn check(&self, cfg: &AttnConfig) -> Result<()> {
        let d = cfg.d;
        let square = [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.to_out,
            &self.zero_linear,
        ];
        for w in square {
            if w.shape() != (d, d) {
                return Err(Error::Dimension {
                    op: "weights",
                    lhs: (d, d),
                    rhs: w.shape(),
                });
            }
        }
        if self.t_s.shape() != (cfg.m, d) {
            return Err(Error::Dimension {
                op: "summary tokens",
                lhs: (cfg.m, d),
                rhs: self.t_s.shape(),
            });
        }
        Ok(())
    }
}

/// Everything one forward pass produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttnTrace<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// One `L_src×L_ref` row-stochastic map per head.
    pub attn_weights: Vec<Matrix<T>>,
    pub raw_out: Matrix<T>,
    /// Output of `to_out`. Under [`GatePlacement::BeforeToOut`] this already carries the gate.
    pub projected_out: Matrix<T>,
    /// The tensor fed to `zero_linear`.
    pub pre_zero_linear: Matrix<T>,
    pub final_out: Matrix<T>,
    /// Per-source-token gate, absent for vanilla attention.
    pub gate: Option<Vec<T>>,
    pub mac_count: u128,
}

/// Per-token gate derived from explicit cosine similarity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityGate<T> {
    /// `L_src×L_ref` cosine similarities.
    pub similarity: Matrix<T>,
    pub gate: Vec<T>,
}

pub(crate) fn check_inputs<T: Scalar>(
    h_src: &Matrix<T>,
    h_ref: &Matrix<T>,
    w: &RAWeights<T>,
    cfg: &AttnConfig,
) -> Result<()> {
    cfg.validate()?;
    if h_src.shape() != (cfg.l_src, cfg.d) {
        return Err(Error::Dimension {
            op: "source features",
            lhs: (cfg.l_src, cfg.d),
            rhs: h_src.shape(),
        });
    }
    if h_ref.shape() != (cfg.l_ref, cfg.d) {
        return Err(Error::Dimension {
            op: "reference features",
            lhs: (cfg.l_ref, cfg.d),
            rhs: h_ref.shape(),
        });
    }
    w.check(cfg)
}

fn expect_mode(cfg: &AttnConfig, mode: GatingMode) -> Result<()> {
    if cfg.gating_mode != mode {
        return Err(Error::Config {
            field: "gating_mode",
            reason: format!("expected {mode}, got {}", cfg.gating_mode),
        });
    }
    Ok(())
}

pub fn project_qkv<T: Scalar>(
    h_src: &Matrix<T>,
    h_ref: &Matrix<T>,
    w: &RAWeights<T>,
    counter: &mut MacCounter,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let q = matmul(h_src, &w.w_q, Some(counter))?;
    let k = matmul(h_ref, &w.w_k, Some(counter))?;
    let v = matmul(h_ref, &w.w_v, Some(counter))?;
    Ok((q, k, v))
}

/// Multi-head scaled dot-product attention of `q` over `(k, v)`.
///
/// Returns the per-head weight maps and the concatenated head outputs.
pub fn attend<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    counter: &mut MacCounter,
) -> Result<(Vec<Matrix<T>>, Matrix<T>)> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::Dimension {
            op: "attend",
            lhs: q.shape(),
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
    let mut weights = Vec::with_capacity(heads);
    let mut raw = Matrix::zeros(q.rows(), d)?;
    let before = counter.count();
    for h in 0..heads {
        let qh = q.col_block(h * dh, dh)?;
        let kh = k.col_block(h * dh, dh)?;
        let vh = v.col_block(h * dh, dh)?;
        let mut a = matmul_nt(&qh, &kh, Some(counter))?;
        a.scale_mut(inv_sqrt);
        row_softmax_mut(&mut a);
        raw.set_col_block(h * dh, &matmul(&a, &vh, Some(counter))?)?;
        weights.push(a);
    }
    // Scores and aggregation are charged at two units per executed MAC.
    let executed = counter.count() - before;
    counter.add(executed);
    Ok((weights, raw))
}

/// Applies `to_out`, the optional gate, `zero_linear` and the residual.
///
/// Returns `(projected_out, pre_zero_linear, final_out)`.
pub fn fuse<T: Scalar>(
    h_src: &Matrix<T>,
    raw: &Matrix<T>,
    w: &RAWeights<T>,
    placement: GatePlacement,
    gate: Option<&[T]>,
    counter: &mut MacCounter,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let (projected, pre_zero) = match (gate, placement) {
        (None, _) => {
            let p = matmul(raw, &w.to_out, Some(counter))?;
            (p.clone(), p)
        }
        (Some(g), GatePlacement::BeforeZeroLinear) => {
            let p = matmul(raw, &w.to_out, Some(counter))?;
            let gated = p.scale_rows(g)?;
            (p, gated)
        }
        (Some(g), GatePlacement::BeforeToOut) => {
            let p = matmul(&raw.scale_rows(g)?, &w.to_out, Some(counter))?;
            (p.clone(), p)
        }
    };
    let mut out = matmul(&pre_zero, &w.zero_linear, Some(counter))?;
    out.add_assign(h_src)?;
    Ok((projected, pre_zero, out))
}

/// Reference attention with an externally supplied per-token gate.
///
/// `gate = None` is the ungated path. Ignores `cfg.gating_mode`.
pub fn forward_with_gate<T: Scalar>(
    h_src: &Matrix<T>,
    h_ref: &Matrix<T>,
    w: &RAWeights<T>,
    cfg: &AttnConfig,
    gate: Option<&[T]>,
    counter: &mut MacCounter,
) -> Result<AttnTrace<T>> {
    check_inputs(h_src, h_ref, w, cfg)?;
    let start = counter.count();
    let (q, k, v) = project_qkv(h_src, h_ref, w, counter)?;
    let (attn_weights, raw_out) = attend(&q, &k, &v, cfg.heads, counter)?;
    let (projected_out, pre_zero_linear, final_out) =
        fuse(h_src, &raw_out, w, cfg.gate_placement, gate, counter)?;
    Ok(AttnTrace {
        q,
        k,
        v,
        attn_weights,
        raw_out,
        projected_out,
        pre_zero_linear,
        final_out,
        gate: gate.map(<[T]>::to_vec),
        mac_count: counter.count() - start,
    })
}

/// Vanilla reference attention.
pub fn ra_forward<T: Scalar>(
    h_src: &Matrix<T>,
    h_ref: &Matrix<T>,
    w: &RAWeights<T>,
    cfg: &AttnConfig,
    counter: &mut MacCounter,
) -> Result<AttnTrace<T>> {
    expect_mode(cfg, GatingMode::Vanilla)?;
    forward_with_gate(h_src, h_ref, w, cfg, None, counter)
}

/// Reference attention scaled by one shared gate `σ(global_gate_logit)`.
pub fn global_gate_forward<T: Scalar>(
    h_src: &Matrix<T>,
    h_ref: &Matrix<T>,
    w: &RAWeights<T>,
    cfg: &AttnConfig,
    counter: &mut MacCounter,
) -> Result<AttnTrace<T>> {
    expect_mode(cfg, GatingMode::Global)?;
    let g = vec![sigmoid_scalar(w.global_gate_logit); cfg.l_src];
    forward_with_gate(h_src, h_ref, w, cfg, Some(&g), counter)
}

fn unit_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        // Zero rows stay zero: they match nothing.
        if norm > T::zero() {
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
    }
    out
}

/// Token-to-token cosine similarity, `a.rows × b.rows`, charged `2·a.rows·b.rows·d`.
///
/// Rows with zero norm have similarity 0 to everything.
pub fn cosine_similarity<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    counter: &mut MacCounter,
) -> Result<Matrix<T>> {
    let before = counter.count();
    let mut c = matmul_nt(&unit_rows(a), &unit_rows(b), Some(counter))?;
    let executed = counter.count() - before;
    counter.add(executed);
    for x in c.as_mut_slice() {
        *x = x.max(-T::one()).min(T::one());
    }
    Ok(c)
}

/// Gate `clamp(weight · max_j C_ij, 0, 1)` per source token.
pub fn similarity_gate<T: Scalar>(similarity: &Matrix<T>, weight: T) -> Vec<T> {
    (0..similarity.rows())
        .map(|i| {
            let best = similarity
                .row(i)
                .iter()
                .fold(T::neg_infinity(), |m, &c| m.max(c));
            (weight * best).max(T::zero()).min(T::one())
        })
        .collect()
}

/// Reference attention gated by explicit source/reference similarity.
pub fn explicit_gate_forward<T: Scalar>(
    h_src: &Matrix<T>,
    h_ref: &Matrix<T>,
    w: &RAWeights<T>,
    cfg: &AttnConfig,
    counter: &mut MacCounter,
) -> Result<(AttnTrace<T>, SimilarityGate<T>)> {
    expect_mode(cfg, GatingMode::Explicit)?;
    check_inputs(h_src, h_ref, w, cfg)?;
    let start = counter.count();
    let similarity = cosine_similarity(h_src, h_ref, counter)?;
    let gate = similarity_gate(&similarity, w.explicit_weight);
    let mut trace = forward_with_gate(h_src, h_ref, w, cfg, Some(&gate), counter)?;
    trace.mac_count = counter.count() - start;
    Ok((trace, SimilarityGate { similarity, gate }))
}
