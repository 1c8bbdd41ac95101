//! Shared fixtures and loop-based reference implementations.
//!
//! The oracles work on `Vec<Vec<f64>>` with explicit index loops and never
//! call into the crate's kernels, so they check the blocked gemm path and
//! the head-splitting logic independently.

#![allow(dead_code)]

use refattn::tensor::rand_matrix;
use refattn::{AggregationMode, AttnConfig, GatePlacement, GatingMode, Matrix, RAWeights, Rng};

pub type Rows = Vec<Vec<f64>>;

pub struct Fixture {
    pub cfg: AttnConfig,
    pub h_src: Matrix,
    pub h_ref: Matrix,
    pub w: RAWeights,
}

/// Seeded features in `[-1, 1]`, default-initialized weights, and a
/// `zero_linear` drawn from `[-zl_scale, zl_scale]`.
pub fn fixture(cfg: AttnConfig, seed: u64, zl_scale: f64) -> Fixture {
    let mut rng = Rng::new(seed);
    let h_src = rand_matrix(cfg.l_src, cfg.d, &mut rng, 1.0).unwrap();
    let h_ref = rand_matrix(cfg.l_ref, cfg.d, &mut rng, 1.0).unwrap();
    let mut w = RAWeights::init(&cfg, &mut rng).unwrap();
    w = w.with_random_zero_linear(&mut rng, zl_scale).unwrap();
    w.global_gate_logit = rng.symmetric(2.0);
    Fixture {
        cfg,
        h_src,
        h_ref,
        w,
    }
}

/// Every learnable parameter uniform in `[-1, 1]`.
pub fn unit_fixture(cfg: AttnConfig, seed: u64) -> Fixture {
    let (h_src, h_ref, w) = refattn::autodiff::unit_problem(&cfg, seed).unwrap();
    Fixture {
        cfg,
        h_src,
        h_ref,
        w,
    }
}

/// Small random configuration: lengths ≤ `max_len`, `d ≤ 8`, `M ≤ 3`, 1 or 2 heads.
pub fn random_config(rng: &mut Rng, max_len: usize, mode: GatingMode) -> AttnConfig {
    let l_src = 1 + rng.below(max_len);
    let l_ref = 1 + rng.below(max_len);
    let heads = 1 + rng.below(2);
    let dh = 1 + rng.below(8 / heads);
    let m = 1 + rng.below(3);
    let mut cfg = AttnConfig::new(l_src, l_ref, heads * dh, heads, m, mode);
    if rng.below(2) == 1 {
        cfg.gate_placement = GatePlacement::BeforeToOut;
    }
    cfg
}

pub fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn mm(a: &Rows, b: &Rows) -> Rows {
    let n = b[0].len();
    let mut out = vec![vec![0.0; n]; a.len()];
    for i in 0..a.len() {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..b.len() {
                acc += a[i][k] * b[k][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot_block(a: &[f64], b: &[f64], start: usize, width: usize) -> f64 {
    (start..start + width).map(|c| a[c] * b[c]).sum()
}

/// Per-head softmax(q kᵀ/√d_h) v, heads as contiguous column blocks.
pub fn attention(q: &Rows, k: &Rows, v: &Rows, heads: usize) -> (Vec<Rows>, Rows) {
    let d = q[0].len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut maps = Vec::new();
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let s = h * dh;
        let mut map = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| dot_block(qi, kj, s, dh) * scale)
                .collect();
            let a = softmax(&scores);
            for c in s..s + dh {
                out[i][c] = (0..k.len()).map(|j| a[j] * v[j][c]).sum();
            }
            map.push(a);
        }
        maps.push(map);
    }
    (maps, out)
}

pub fn cosine(a: &Rows, b: &Rows) -> Rows {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    a.iter()
        .map(|x| {
            b.iter()
                .map(|y| {
                    let (nx, ny) = (norm(x), norm(y));
                    if nx == 0.0 || ny == 0.0 {
                        0.0
                    } else {
                        x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny)
                    }
                })
                .collect()
        })
        .collect()
}

/// `(S, K_sum)` for the summary tokens.
pub fn summarize(t_s: &Rows, w_k: &Rows, k: &Rows, heads: usize) -> (Rows, Rows) {
    let s = mm(t_s, w_k);
    let (_, k_sum) = attention(&s, k, k, heads);
    (s, k_sum)
}

pub fn gate(q: &Rows, k_sum: &Rows, heads: usize, mode: AggregationMode) -> Vec<f64> {
    let d = q[0].len();
    let dh = d / heads;
    let m = k_sum.len();
    let scale = 1.0 / (dh as f64).sqrt();
    q.iter()
        .map(|qi| {
            let mut total = 0.0;
            for h in 0..heads {
                let logits: Vec<f64> = k_sum
                    .iter()
                    .map(|kj| dot_block(qi, kj, h * dh, dh) * scale)
                    .collect();
                total += match mode {
                    AggregationMode::Logits => logits.iter().sum::<f64>(),
                    AggregationMode::SoftmaxOutput => softmax(&logits).iter().sum::<f64>(),
                };
            }
            sigmoid(total / (heads * m) as f64)
        })
        .collect()
}

pub struct OracleOut {
    pub q: Rows,
    pub k: Rows,
    pub v: Rows,
    pub maps: Vec<Rows>,
    pub gate: Option<Vec<f64>>,
    pub k_sum: Option<Rows>,
    pub final_out: Rows,
}

/// End-to-end forward in any gating mode.
pub fn forward(f: &Fixture) -> OracleOut {
    let cfg = &f.cfg;
    let (h_src, h_ref) = (rows(&f.h_src), rows(&f.h_ref));
    let q = mm(&h_src, &rows(&f.w.w_q));
    let k = mm(&h_ref, &rows(&f.w.w_k));
    let v = mm(&h_ref, &rows(&f.w.w_v));
    let (maps, raw) = attention(&q, &k, &v, cfg.heads);
    let mut k_sum = None;
    let g: Option<Vec<f64>> = match cfg.gating_mode {
        GatingMode::Vanilla => None,
        GatingMode::Global => Some(vec![sigmoid(f.w.global_gate_logit); cfg.l_src]),
        GatingMode::Explicit => Some(
            cosine(&h_src, &h_ref)
                .iter()
                .map(|r| {
                    (f.w.explicit_weight * r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                        .clamp(0.0, 1.0)
                })
                .collect(),
        ),
        GatingMode::Aicg => {
            let (_, ks) = summarize(&rows(&f.w.t_s), &rows(&f.w.w_k), &k, cfg.heads);
            let g = gate(&q, &ks, cfg.heads, cfg.aggregation_mode);
            k_sum = Some(ks);
            Some(g)
        }
    };
    let scale_rows = |x: &Rows, g: &[f64]| -> Rows {
        x.iter()
            .zip(g)
            .map(|(r, &s)| r.iter().map(|v| v * s).collect())
            .collect()
    };
    let pre = match &g {
        None => mm(&raw, &rows(&f.w.to_out)),
        Some(g) => match cfg.gate_placement {
            GatePlacement::BeforeZeroLinear => scale_rows(&mm(&raw, &rows(&f.w.to_out)), g),
            GatePlacement::BeforeToOut => mm(&scale_rows(&raw, g), &rows(&f.w.to_out)),
        },
    };
    let branch = mm(&pre, &rows(&f.w.zero_linear));
    let final_out = branch
        .iter()
        .zip(&h_src)
        .map(|(b, s)| b.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect();
    OracleOut {
        q,
        k,
        v,
        maps,
        gate: g,
        k_sum,
        final_out,
    }
}

pub fn max_abs_diff(a: &Rows, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.shape());
    let mut worst = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            worst = worst.max((x - b.get(i, j)).abs());
        }
    }
    worst
}

pub fn max_abs_diff_vec(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Operations with a brute-force counterpart, for seeded sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleOp {
    RaForward,
    GlobalGateForward,
    ExplicitGateForward,
    SummarizeReference,
    ComputeGate,
    AicgForward,
}

impl OracleOp {
    pub const ALL: [OracleOp; 6] = [
        Self::RaForward,
        Self::GlobalGateForward,
        Self::ExplicitGateForward,
        Self::SummarizeReference,
        Self::ComputeGate,
        Self::AicgForward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::RaForward => "ra_forward",
            Self::GlobalGateForward => "global_gate_forward",
            Self::ExplicitGateForward => "explicit_gate_forward",
            Self::SummarizeReference => "summarize_reference",
            Self::ComputeGate => "compute_gate",
            Self::AicgForward => "aicg_forward",
        }
    }

    fn mode(self) -> GatingMode {
        match self {
            Self::RaForward => GatingMode::Vanilla,
            Self::GlobalGateForward => GatingMode::Global,
            Self::ExplicitGateForward => GatingMode::Explicit,
            _ => GatingMode::Aicg,
        }
    }
}

/// Max absolute error of `op` against its oracle on one fixture.
pub fn oracle_error(op: OracleOp, f: &Fixture) -> f64 {
    use refattn::aicg::{aicg_forward, compute_gate, summarize_reference};
    use refattn::attention::{explicit_gate_forward, global_gate_forward, project_qkv, ra_forward};
    use refattn::MacCounter;

    let mut c = MacCounter::new();
    let expected = forward(f);
    match op {
        OracleOp::RaForward => {
            let t = ra_forward(&f.h_src, &f.h_ref, &f.w, &f.cfg, &mut c).unwrap();
            let mut worst = max_abs_diff(&expected.final_out, &t.final_out);
            for (o, a) in expected.maps.iter().zip(&t.attn_weights) {
                worst = worst.max(max_abs_diff(o, a));
            }
            worst
        }
        OracleOp::GlobalGateForward => {
            let t = global_gate_forward(&f.h_src, &f.h_ref, &f.w, &f.cfg, &mut c).unwrap();
            max_abs_diff(&expected.final_out, &t.final_out)
        }
        OracleOp::ExplicitGateForward => {
            let (t, s) = explicit_gate_forward(&f.h_src, &f.h_ref, &f.w, &f.cfg, &mut c).unwrap();
            let sim = cosine(&rows(&f.h_src), &rows(&f.h_ref));
            max_abs_diff(&expected.final_out, &t.final_out)
                .max(max_abs_diff(&sim, &s.similarity))
                .max(max_abs_diff_vec(expected.gate.as_ref().unwrap(), &s.gate))
        }
        OracleOp::SummarizeReference => {
            let (_, k, _) = project_qkv(&f.h_src, &f.h_ref, &f.w, &mut c).unwrap();
            let (s, k_sum, _) =
                summarize_reference(&f.w.t_s, &f.w.w_k, &k, f.cfg.heads, &mut c).unwrap();
            let (os, ok) = summarize(&rows(&f.w.t_s), &rows(&f.w.w_k), &expected.k, f.cfg.heads);
            max_abs_diff(&os, &s).max(max_abs_diff(&ok, &k_sum))
        }
        OracleOp::ComputeGate => {
            let (q, _, _) = project_qkv(&f.h_src, &f.h_ref, &f.w, &mut c).unwrap();
            let k_sum = expected.k_sum.as_ref().unwrap();
            let ks = Matrix::from_rows(k_sum).unwrap();
            let (_, _, g) =
                compute_gate(&q, &ks, f.cfg.heads, f.cfg.aggregation_mode, &mut c).unwrap();
            let og = gate(&rows(&q), k_sum, f.cfg.heads, f.cfg.aggregation_mode);
            max_abs_diff_vec(&og, g.as_slice())
        }
        OracleOp::AicgForward => {
            let (t, map) = aicg_forward(&f.h_src, &f.h_ref, &f.w, &f.cfg, &mut c).unwrap();
            max_abs_diff(&expected.final_out, &t.final_out)
                .max(max_abs_diff_vec(
                    expected.gate.as_ref().unwrap(),
                    map.values(),
                ))
                .max(max_abs_diff(expected.k_sum.as_ref().unwrap(), &map.k_sum))
        }
    }
}

/// Worst error of `op` over `n` seeded random configurations.
pub fn oracle_sweep(op: OracleOp, n: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..n {
        let mut rng = Rng::new(10_000 + seed);
        let mut cfg = random_config(&mut rng, 8, op.mode());
        if op == OracleOp::ComputeGate && seed % 2 == 1 {
            cfg.aggregation_mode = AggregationMode::SoftmaxOutput;
        }
        let f = fixture(cfg, seed, 0.5);
        worst = worst.max(oracle_error(op, &f));
    }
    worst
}

/// Config for the gradient sweep: lengths ≤ 6, `d ≤ 8` with at least two
/// columns per head, `M ≤ 3`, random placement.
pub fn grad_config(seed: u64, mode: GatingMode) -> AttnConfig {
    let mut rng = Rng::new(seed);
    let l_src = 1 + rng.below(6);
    let l_ref = 1 + rng.below(6);
    let heads = 1 + rng.below(2);
    let dh = 2 + rng.below(8 / heads - 1);
    let m = 1 + rng.below(3);
    let mut cfg = AttnConfig::new(l_src, l_ref, heads * dh, heads, m, mode);
    if rng.below(2) == 1 {
        cfg.gate_placement = GatePlacement::BeforeToOut;
    }
    cfg
}

/// Worst relative error over every parameter for one seeded gradient check.
pub fn grad_error(seed: u64, mode: GatingMode) -> (AttnConfig, f64) {
    use refattn::autodiff::{gradcheck, BackwardOptions};
    let cfg = grad_config(seed, mode);
    let f = unit_fixture(cfg, seed);
    let reports = gradcheck(
        &f.h_src,
        &f.h_ref,
        &f.w,
        &cfg,
        None,
        1e-5,
        BackwardOptions::default(),
    )
    .unwrap();
    (
        cfg,
        reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
    )
}
