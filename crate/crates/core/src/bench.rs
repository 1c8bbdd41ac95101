//! Wall-clock comparison of the gating modes.
//!
//! For every configuration the inputs and weights are generated once from
//! the seed, then each mode is run `warmup` times untimed and
//! `repetitions` times timed, round-robin across modes. Timings are
//! summarized by median and median absolute deviation. Work runs on the
//! calling thread only.
//!
//! On glibc the harness also stops the allocator from returning freed memory
//! to the kernel. Attention maps at L=4096 are hundreds of megabytes, and
//! without this every forward pass page-faults them in afresh, which adds
//! kernel time that swings by more than the overheads being compared.

use std::time::Instant;

use serde::Serialize;

use crate::attention::RAWeights;
use crate::block::forward;
use crate::config::{AttnConfig, GatingMode};
use crate::error::{Error, Result};
use crate::tensor::{rand_matrix, MacCounter, Matrix, Rng};

/// Lengths at or above this are long enough for overhead ordering to rise above timing noise.
pub const ORDERING_MIN_LEN: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSpec {
    pub configs: Vec<AttnConfig>,
    pub modes: Vec<GatingMode>,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Upper bound on one `L_src×L_ref` attention map in bytes.
    pub memory_cap_bytes: u64,
}

impl BenchSpec {
    /// `L ∈ {256, 1024, 4096}` with `L_src = L_ref`, `d = 256`, `M = 16`, 4 heads, every mode.
    pub fn default_ladder(seed: u64) -> Self {
        Self::ladder(&[256, 1024, 4096], 256, 16, 4, seed)
    }

    pub fn ladder(sizes: &[usize], d: usize, m: usize, heads: usize, seed: u64) -> Self {
        Self {
            configs: sizes
                .iter()
                .map(|&l| AttnConfig::new(l, l, d, heads, m, GatingMode::Vanilla))
                .collect(),
            modes: GatingMode::ALL.to_vec(),
            repetitions: 5,
            warmup: 1,
            seed,
            memory_cap_bytes: 1 << 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 5 {
            return Err(Error::Config {
                field: "repetitions",
                reason: format!("need at least 5, got {}", self.repetitions),
            });
        }
        if self.warmup < 1 {
            return Err(Error::Config {
                field: "warmup",
                reason: "need at least 1 warmup iteration".into(),
            });
        }
        for cfg in &self.configs {
            cfg.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub config: AttnConfig,
    pub mode: GatingMode,
    pub median_ns: f64,
    pub mad_ns: f64,
    pub macs: u128,
    pub macs_per_sec: f64,
    /// Why the point was not timed, if it was not.
    pub skipped: Option<String>,
}

impl BenchResult {
    fn skipped(config: AttnConfig, mode: GatingMode, reason: String) -> Self {
        Self {
            config,
            mode,
            median_ns: 0.0,
            mad_ns: 0.0,
            macs: 0,
            macs_per_sec: 0.0,
            skipped: Some(reason),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation from the median.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

/// Times `f` once, retrying once if the clock appears to run backwards.
fn time_once(mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..2 {
        let start = Instant::now();
        f()?;
        let end = Instant::now();
        if let Some(d) = end.checked_duration_since(start) {
            return Ok(d.as_nanos() as f64);
        }
    }
    Err(Error::Clock(
        "end reading preceded start reading twice".into(),
    ))
}

/// Serves large allocations from the heap and never trims it, so freed
/// attention maps are reused instead of unmapped. Process-wide and one-way.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn keep_freed_memory() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        // SAFETY: mallopt only adjusts allocator tunables; both values are valid.
        unsafe {
            libc::mallopt(libc::M_MMAP_MAX, 0);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        }
    });
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn keep_freed_memory() {}

/// Warmup runs for one mode. Records the MAC count, and returns `false`
/// when the residual identity check fails.
fn warm_up(
    cfg: &AttnConfig,
    h_src: &Matrix<f64>,
    h_ref: &Matrix<f64>,
    w: &RAWeights<f64>,
    warmup: usize,
) -> Result<(u128, bool)> {
    let mut macs = 0;
    for i in 0..warmup {
        let mut counter = MacCounter::new();
        let out = forward(h_src, h_ref, w, cfg, &mut counter)?;
        if i == 0 {
            macs = counter.count();
            // zero_linear is at its zero init, so every mode must hand back the source untouched.
            if out.trace.final_out != *h_src {
                return Ok((macs, false));
            }
        }
    }
    Ok((macs, true))
}

/// Runs every `(config, mode)` point of the spec.
///
/// Within a config the modes are interleaved: each repetition times every
/// mode once, so slow drift in machine speed lands on all modes alike
/// instead of biasing whichever mode ran during it.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchResult>> {
    spec.validate()?;
    keep_freed_memory();
    let mut results = Vec::with_capacity(spec.configs.len() * spec.modes.len());
    for base in &spec.configs {
        let map_bytes = (base.l_src as u64)
            .saturating_mul(base.l_ref as u64)
            .saturating_mul(8);
        if map_bytes > spec.memory_cap_bytes {
            for &mode in &spec.modes {
                results.push(BenchResult::skipped(
                    base.with_mode(mode),
                    mode,
                    format!(
                        "attention map needs {map_bytes} bytes per head, cap is {}",
                        spec.memory_cap_bytes
                    ),
                ));
            }
            continue;
        }
        let mut rng = Rng::new(spec.seed);
        let h_src = rand_matrix(base.l_src, base.d, &mut rng, 1.0)?;
        let h_ref = rand_matrix(base.l_ref, base.d, &mut rng, 1.0)?;
        let w = RAWeights::init(base, &mut rng)?;

        let mut timed = Vec::new();
        let mut point = Vec::with_capacity(spec.modes.len());
        for &mode in &spec.modes {
            let cfg = base.with_mode(mode);
            let (macs, sane) = warm_up(&cfg, &h_src, &h_ref, &w, spec.warmup)?;
            if sane {
                timed.push(point.len());
            }
            point.push((cfg, macs, sane, Vec::with_capacity(spec.repetitions)));
        }
        for _ in 0..spec.repetitions {
            for &i in &timed {
                let (cfg, _, _, times) = &mut point[i];
                times.push(time_once(|| {
                    forward(&h_src, &h_ref, &w, cfg, &mut MacCounter::new()).map(|_| ())
                })?);
            }
        }
        for (cfg, macs, sane, times) in point {
            if !sane {
                results.push(BenchResult::skipped(
                    cfg,
                    cfg.gating_mode,
                    "residual identity check failed".into(),
                ));
                continue;
            }
            let median_ns = median(&times);
            results.push(BenchResult {
                config: cfg,
                mode: cfg.gating_mode,
                median_ns,
                mad_ns: mad(&times),
                macs,
                macs_per_sec: macs as f64 / (median_ns * 1e-9),
                skipped: None,
            });
        }
    }
    Ok(results)
}

/// Overhead comparison at one configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub config: AttnConfig,
    pub aicg_overhead_ns: f64,
    pub explicit_overhead_ns: f64,
    pub holds: bool,
}

/// For every timed configuration with `min(L_src, L_ref) ≥ min_len`, checks
/// `median(aicg) − median(vanilla) < median(explicit) − median(vanilla)`.
pub fn check_ordering(results: &[BenchResult], min_len: usize) -> Vec<OrderingCheck> {
    let shape = |c: &AttnConfig| (c.l_src, c.l_ref, c.d, c.heads, c.m);
    let timed = |r: &&BenchResult| r.skipped.is_none();
    let mut out = Vec::new();
    for v in results
        .iter()
        .filter(timed)
        .filter(|r| r.mode == GatingMode::Vanilla)
    {
        if v.config.l_src.min(v.config.l_ref) < min_len {
            continue;
        }
        let find = |mode| {
            results
                .iter()
                .filter(timed)
                .find(|r| r.mode == mode && shape(&r.config) == shape(&v.config))
        };
        if let (Some(a), Some(e)) = (find(GatingMode::Aicg), find(GatingMode::Explicit)) {
            let aicg_overhead_ns = a.median_ns - v.median_ns;
            let explicit_overhead_ns = e.median_ns - v.median_ns;
            out.push(OrderingCheck {
                config: v.config,
                aicg_overhead_ns,
                explicit_overhead_ns,
                holds: aicg_overhead_ns < explicit_overhead_ns,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn robust_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
    }

    #[test]
    fn spec_validation() {
        let mut spec = BenchSpec::ladder(&[8], 8, 2, 1, 0);
        spec.repetitions = 4;
        assert!(matches!(
            spec.validate(),
            Err(Error::Config {
                field: "repetitions",
                ..
            })
        ));
        spec.repetitions = 5;
        spec.warmup = 0;
        assert!(matches!(
            spec.validate(),
            Err(Error::Config {
                field: "warmup",
                ..
            })
        ));
    }

    #[test]
    fn one_point_one_result() {
        let mut spec = BenchSpec::ladder(&[16], 8, 2, 2, 3);
        spec.modes = vec![GatingMode::Vanilla];
        let r = run_bench(&spec).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].median_ns > 0.0);
        assert!(r[0].skipped.is_none());
    }

    #[test]
    fn memory_cap_skips_with_reason() {
        let mut spec = BenchSpec::ladder(&[64], 8, 2, 1, 3);
        spec.memory_cap_bytes = 1000;
        let r = run_bench(&spec).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r
            .iter()
            .all(|x| x.skipped.as_deref().unwrap().contains("cap")));
    }

    #[test]
    fn short_sequences_are_not_ordered() {
        let spec = BenchSpec::ladder(&[32], 8, 2, 1, 3);
        let r = run_bench(&spec).unwrap();
        assert!(check_ordering(&r, ORDERING_MIN_LEN).is_empty());
        assert_eq!(check_ordering(&r, 32).len(), 1);
    }
}
