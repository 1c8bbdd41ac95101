use serde::Serialize;

use super::{backward, record, squared_error, BackwardOptions, Param};
use crate::attention::RAWeights;
use crate::block::forward;
use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{rand_matrix, MacCounter, Matrix, Rng};

/// Seeded features and weights for a gradient check, every entry uniform
/// in `[-1, 1]` so that finite differences stay well resolved.
///
/// `zero_linear` is drawn too: at its zero init most gradients vanish.
pub fn unit_problem<T: Scalar>(
    cfg: &AttnConfig,
    seed: u64,
) -> Result<(Matrix<T>, Matrix<T>, RAWeights<T>)> {
    cfg.validate()?;
    let d = cfg.d;
    let mut rng = Rng::new(seed);
    let h_src = rand_matrix(cfg.l_src, d, &mut rng, 1.0)?;
    let h_ref = rand_matrix(cfg.l_ref, d, &mut rng, 1.0)?;
    let w = RAWeights {
        w_q: rand_matrix(d, d, &mut rng, 1.0)?,
        w_k: rand_matrix(d, d, &mut rng, 1.0)?,
        w_v: rand_matrix(d, d, &mut rng, 1.0)?,
        to_out: rand_matrix(d, d, &mut rng, 1.0)?,
        zero_linear: rand_matrix(d, d, &mut rng, 1.0)?,
        t_s: rand_matrix(cfg.m, d, &mut rng, 1.0)?,
        global_gate_logit: T::from_f64_lossy(rng.symmetric(1.0)),
        explicit_weight: T::from_f64_lossy(0.5),
    };
    Ok((h_src, h_ref, w))
}

/// Central differences `(f(p + h·e_ij) − f(p − h·e_ij)) / 2h` for every entry.
pub fn finite_difference<T: Scalar, F>(mut loss_fn: F, param: &Matrix<T>, h: T) -> Result<Matrix<T>>
where
    F: FnMut(&Matrix<T>) -> Result<T>,
{
    if h.is_nan() || h <= T::zero() {
        return Err(Error::Usage(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let two_h = h + h;
    let mut probe = param.clone();
    let mut grad = Matrix::zeros(param.rows(), param.cols())?;
    for i in 0..param.rows() {
        for j in 0..param.cols() {
            let p = param.get(i, j);
            let mut eval = |x: T| -> Result<T> {
                probe.set(i, j, x);
                let v = loss_fn(&probe)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        param: "param".into(),
                        row: i,
                        col: j,
                        value: v.to_f64().unwrap_or(f64::NAN),
                    });
                }
                Ok(v)
            };
            let up = eval(p + h)?;
            let down = eval(p - h)?;
            probe.set(i, j, p);
            grad.set(i, j, (up - down) / two_h);
        }
    }
    Ok(grad)
}

/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

/// Analytic vs finite-difference comparison for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub param: Param,
    #[serde(skip)]
    pub analytic: Matrix<f64>,
    #[serde(skip)]
    pub finite_difference: Matrix<f64>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Frobenius norm of the analytic gradient.
    pub analytic_norm: f64,
    pub fd_step: f64,
}

impl GradReport {
    fn new(param: Param, analytic: Matrix<f64>, fd: Matrix<f64>, fd_step: f64) -> Self {
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for (&a, &f) in analytic.as_slice().iter().zip(fd.as_slice()) {
            max_rel = max_rel.max(relative_error(a, f));
            max_abs = max_abs.max((a - f).abs());
        }
        Self {
            param,
            analytic_norm: analytic.frobenius_norm(),
            analytic,
            finite_difference: fd,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            fd_step,
        }
    }
}

/// Compares [`backward`] against central differences for every parameter.
pub fn gradcheck<T: Scalar>(
    h_src: &Matrix<T>,
    h_ref: &Matrix<T>,
    w: &RAWeights<T>,
    cfg: &AttnConfig,
    target: Option<&Matrix<T>>,
    h: T,
    opts: BackwardOptions,
) -> Result<Vec<GradReport>> {
    let rec = record(h_src, h_ref, w, cfg, true)?;
    let grads = backward(&rec, target, opts)?;
    let mut reports = Vec::with_capacity(Param::ALL.len());
    for p in Param::ALL {
        let loss = |value: &Matrix<T>| -> Result<T> {
            let mut probe = w.clone();
            probe.set_param(p, value.clone())?;
            let out = forward(h_src, h_ref, &probe, cfg, &mut MacCounter::new())?;
            squared_error(&out.trace.final_out, target)
        };
        let fd = finite_difference(loss, &w.param(p), h).map_err(|e| match e {
            Error::NonFinite {
                row, col, value, ..
            } => Error::NonFinite {
                param: p.as_str().into(),
                row,
                col,
                value,
            },
            other => other,
        })?;
        reports.push(GradReport::new(
            p,
            grads.get(p).to_f64(),
            fd.to_f64(),
            h.to_f64().unwrap_or(f64::NAN),
        ));
    }
    Ok(reports)
}
