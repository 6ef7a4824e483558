//! Self-check suites: vectorized losses against the loop oracle, and analytic
//! gradients against central finite differences.

use std::fmt;

use crate::encoder::{encoder_backward, encoder_init, forward_features, MlpParams};
use crate::error::Result;
use crate::gradcheck::{central_difference, relative_error, FD_STEP};
use crate::losses::{brute_force_loss, evaluate, LossConfig, LossKind};
use crate::numcore::{dot, row_l2_normalize, Matrix, NORM_EPS};
use crate::rng::{derive_seed, RngStream};
use crate::superpoint::SegmentAssignment;

pub const ORACLE_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-5;
pub const ALL_KINDS: [LossKind; 4] = [LossKind::Pc, LossKind::Ag, LossKind::Cc, LossKind::Ep];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub checks: usize,
    /// Largest relative error seen.
    pub worst: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            checks: 0,
            worst: 0.0,
            tolerance,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
        if !(err <= self.tolerance) {
            self.failures.push(format!("{}: relative error {err:.3e}", what()));
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checks > 0
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} checks, worst {:.3e} (tol {:.0e}), {}",
            self.name,
            self.checks,
            self.worst,
            self.tolerance,
            if self.passed() { "ok" } else { "FAILED" }
        )?;
        for msg in self.failures.iter().take(5) {
            write!(f, "\n  {msg}")?;
        }
        Ok(())
    }
}

pub fn random_matrix(rows: usize, cols: usize, stream: &mut RngStream) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| stream.standard_normal())
}

/// Random assignment of `n` points to `m` non-empty segments.
pub fn random_partition(n: usize, m: usize, stream: &mut RngStream) -> SegmentAssignment {
    let mut ids: Vec<usize> = (0..n).map(|i| if i < m { i } else { stream.below(m) }).collect();
    for i in (1..n).rev() {
        ids.swap(i, stream.below(i + 1));
    }
    SegmentAssignment::new(ids, m).expect("every segment is seeded")
}

fn variant(include: bool, normalize: bool) -> LossConfig {
    LossConfig {
        include_positive_in_denominator: include,
        normalize_rows: normalize,
        normalize_channels: normalize,
        ..LossConfig::default()
    }
}

fn scalar_rel(a: f64, b: f64) -> f64 {
    relative_error(&[a], &[b])
}

/// Vectorized value vs loop oracle on `instances` random problems
/// (N in [2,64], C in [2,8], M in [2,8]), every kind, both denominator
/// modes and both normalization modes.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("oracle equivalence", ORACLE_TOL);
    let mut sampling = RngStream::new(0);
    for i in 0..instances {
        let mut s = RngStream::new(derive_seed(seed, i as u64));
        let n = 2 + s.below(63);
        let c = 2 + s.below(7);
        let m = (2 + s.below(7)).min(n);
        let f1 = random_matrix(n, c, &mut s);
        let f2 = random_matrix(n, c, &mut s);
        let seg = random_partition(n, m, &mut s);
        for kind in ALL_KINDS {
            for include in [false, true] {
                for normalize in [false, true] {
                    let cfg = variant(include, normalize);
                    let fast = evaluate(kind, &f1, &f2, Some(&seg), &cfg, &mut sampling)?.value;
                    let slow = brute_force_loss(kind, &f1, &f2, Some(&seg), &cfg)?;
                    report.record(scalar_rel(fast, slow), || {
                        format!("instance {i} {kind} n={n} c={c} m={m} include={include} normalize={normalize}")
                    });
                }
            }
        }
    }
    Ok(report)
}

const KINK_MARGIN: f64 = 1e-2;
/// Normalization curvature grows like `1 / norm³`; below this the
/// central-difference truncation error alone exceeds the tolerance.
const NORM_MARGIN: f64 = 0.1;

fn min_row_norm(m: &Matrix) -> f64 {
    (0..m.rows()).fold(f64::INFINITY, |a, r| a.min(dot(m.row(r), m.row(r)).sqrt()))
}

/// Whether finite differences are trustworthy at this point: ReLU inputs,
/// normalized norms and cross-channel similarities are all clear of zero.
fn well_conditioned(kind: LossKind, cfg: &LossConfig, e1: &Matrix, e2: &Matrix, pre: &[&Matrix]) -> bool {
    let relu = pre
        .iter()
        .flat_map(|z| z.as_slice())
        .fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if relu < KINK_MARGIN {
        return false;
    }
    if cfg.normalize_rows && kind != LossKind::Cc && min_row_norm(e1).min(min_row_norm(e2)) < NORM_MARGIN {
        return false;
    }
    if !matches!(kind, LossKind::Cc | LossKind::Ep) {
        return true;
    }
    let (t1, t2) = (e1.transpose(), e2.transpose());
    if cfg.normalize_channels && min_row_norm(&t1).min(min_row_norm(&t2)) < NORM_MARGIN {
        return false;
    }
    let (s1, s2) = if cfg.normalize_channels {
        (row_l2_normalize(&t1, NORM_EPS), row_l2_normalize(&t2, NORM_EPS))
    } else {
        (t1, t2)
    };
    (0..s1.rows()).all(|i| {
        (0..s2.rows()).all(|j| i == j || dot(s1.row(i), s2.row(j)).abs() >= KINK_MARGIN)
    })
}

fn param_gradient_fd(
    params: &MlpParams,
    mut loss: impl FnMut(&MlpParams) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.num_params());
    let sizes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
    for (t, len) in sizes.into_iter().enumerate() {
        for k in 0..len {
            let orig = probe.slices()[t][k];
            probe.slices_mut()[t][k] = orig + FD_STEP;
            let plus = loss(&probe)?;
            probe.slices_mut()[t][k] = orig - FD_STEP;
            let minus = loss(&probe)?;
            probe.slices_mut()[t][k] = orig;
            out.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(out)
}

/// Analytic gradients vs central differences: w.r.t. both embeddings and,
/// through a small encoder, w.r.t. every encoder parameter.
pub fn gradient_suite(instances_per_kind: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gradient check", GRAD_TOL);
    let mut sampling = RngStream::new(0);
    for kind in ALL_KINDS {
        for i in 0..instances_per_kind {
            let mut s = RngStream::new(derive_seed(derive_seed(seed, kind as u64), i as u64));
            let n = 3 + s.below(10);
            let c = 2 + s.below(4);
            let m = (2 + s.below(3)).min(n);
            let cfg = variant(s.below(2) == 1, s.below(2) == 1);
            let seg = random_partition(n, m, &mut s);
            let label = || format!("{kind} instance {i} n={n} c={c} m={m}");

            let (f1, f2) = loop {
                let f1 = random_matrix(n, c, &mut s);
                let f2 = random_matrix(n, c, &mut s);
                if well_conditioned(kind, &cfg, &f1, &f2, &[]) {
                    break (f1, f2);
                }
            };
            let out = evaluate(kind, &f1, &f2, Some(&seg), &cfg, &mut sampling)?;
            let num1 = central_difference(&f1, FD_STEP, |x| {
                evaluate(kind, x, &f2, Some(&seg), &cfg, &mut RngStream::new(0)).map(|o| o.value)
            })?;
            let num2 = central_difference(&f2, FD_STEP, |x| {
                evaluate(kind, &f1, x, Some(&seg), &cfg, &mut RngStream::new(0)).map(|o| o.value)
            })?;
            report.record(relative_error(out.grad_f1.as_slice(), num1.as_slice()), || {
                format!("{} dL/dF1", label())
            });
            report.record(relative_error(out.grad_f2.as_slice(), num2.as_slice()), || {
                format!("{} dL/dF2", label())
            });

            // finite differences are meaningless near a kink, so redraw
            // until the point is well conditioned
            let (params, x1, x2) = loop {
                let mut params = encoder_init(4, 5, c, s.below(1 << 30) as u64)?;
                for layer in &mut params.layers {
                    layer.bias.iter_mut().for_each(|b| *b = s.uniform(-0.5, 0.5));
                }
                let x1 = random_matrix(n, 4, &mut s);
                let x2 = random_matrix(n, 4, &mut s);
                let (e1, c1) = forward_features(&params, &x1)?;
                let (e2, c2) = forward_features(&params, &x2)?;
                let pre: Vec<&Matrix> =
                    c1.pre_activations().iter().chain(c2.pre_activations()).collect();
                if well_conditioned(kind, &cfg, &e1, &e2, &pre) {
                    break (params, x1, x2);
                }
            };
            let loss = |p: &MlpParams| -> Result<f64> {
                let (e1, _) = forward_features(p, &x1)?;
                let (e2, _) = forward_features(p, &x2)?;
                Ok(evaluate(kind, &e1, &e2, Some(&seg), &cfg, &mut RngStream::new(0))?.value)
            };
            let (e1, cache1) = forward_features(&params, &x1)?;
            let (e2, cache2) = forward_features(&params, &x2)?;
            let out = evaluate(kind, &e1, &e2, Some(&seg), &cfg, &mut sampling)?;
            let mut analytic = encoder_backward(&params, &cache1, &out.grad_f1)?;
            analytic.add_scaled(&encoder_backward(&params, &cache2, &out.grad_f2)?, 1.0);
            let analytic: Vec<f64> = analytic.slices().concat();
            let numeric = param_gradient_fd(&params, loss)?;
            report.record(relative_error(&analytic, &numeric), || {
                format!("{} dL/dparams", label())
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suite_small_passes() {
        let r = oracle_suite(10, 1).unwrap();
        assert_eq!(r.checks, 10 * 16);
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn gradient_suite_small_passes() {
        let r = gradient_suite(2, 1).unwrap();
        assert_eq!(r.checks, 4 * 2 * 3);
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn failures_are_reported() {
        let mut r = SuiteReport::new("x", 1e-3);
        r.record(1e-4, || "fine".into());
        r.record(f64::NAN, || "nan".into());
        assert!(!r.passed());
        assert_eq!(r.failures.len(), 1);
        assert!(r.to_string().contains("FAILED"));
    }

    #[test]
    fn random_partition_covers_every_segment() {
        let mut s = RngStream::new(3);
        let p = random_partition(20, 7, &mut s);
        assert!(p.sizes().iter().all(|&k| k > 0));
    }
}
