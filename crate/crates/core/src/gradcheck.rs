//! Central finite differences, the relative-error measure and the gradient
//! check suites run by `spo gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{solve_fixed_iterations, solve_with_gradients_system, AdmmConfig};
use crate::error::Result;
use crate::predictor::{predict, predictor_vjp, Adjacency, HistoryWindow, PredictorWeights};
use crate::qp::{assemble_penalty_system, StandardQP};
use crate::relocation::{build_sparse_a, random_instance, required_dv_distribution, to_standard_qp};

/// Central-difference Jacobian of `f` at `x`, returned row-major as
/// `outputs × inputs`.
pub fn central_difference<F>(mut f: F, x: &[f64], eps: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut columns = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        columns.push(
            plus.iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * eps))
                .collect::<Vec<f64>>(),
        );
    }
    let outputs = columns.first().map_or(0, Vec::len);
    (0..outputs)
        .map(|r| columns.iter().map(|c| c[r]).collect())
        .collect()
}

/// Central-difference gradient of a scalar function.
pub fn central_difference_scalar<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    central_difference(|p| vec![f(p)], x, eps)
        .into_iter()
        .next()
        .unwrap_or_default()
}

/// `maxᵢ |aᵢ − bᵢ| / max(|aᵢ|, |bᵢ|, floor)`.
///
/// `floor` keeps entries that are zero on both sides from dividing by zero.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors differ in length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Outcome of one finite-difference suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub checked: usize,
    /// Cases sitting too close to a ReLU kink for finite differences.
    pub skipped_degenerate: usize,
    pub skipped_nonconverged: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }
}

/// Options shared by the suites.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Smallest distance of the final sweep's slacks to the kink for a case
    /// to count as non-degenerate.
    pub kink_margin: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: 1e-4,
            tolerance: 1e-3,
            kink_margin: 1e-3,
            floor: 1.0,
        }
    }
}

/// `∂y/∂D̂_f` of converged solves against central differences of the same
/// unrolled map, i.e. `K` sweeps with `K` fixed by the unperturbed solve.
/// Instances are row-equilibrated, as in training.
pub fn check_layer(n: usize, cases: usize, seed: u64, admm: &AdmmConfig, opts: &CheckOptions) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport {
        name: format!("relocation layer Jacobian, N = {n}"),
        cases,
        checked: 0,
        skipped_degenerate: 0,
        skipped_nonconverged: 0,
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
    };
    let dq = build_sparse_a(n).transpose().to_dense();
    for _ in 0..cases {
        let inst = random_instance(&mut rng, n);
        let forecast: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let qp_at = |f: &[f64]| -> Result<StandardQP> {
            Ok(to_standard_qp(&inst, &required_dv_distribution(&inst.target, f)?)?.equilibrated())
        };
        let qp = qp_at(&forecast)?;
        let system = assemble_penalty_system(&qp, admm.rho)?;
        let grad = solve_with_gradients_system(&qp, &system, admm, &dq)?;
        if !grad.solution.converged() {
            report.skipped_nonconverged += 1;
            continue;
        }
        if grad.solution.kink_margin < opts.kink_margin {
            report.skipped_degenerate += 1;
            continue;
        }
        let k = grad.solution.iterations;
        let mut failure = None;
        let mut fd_at = |eps: f64| {
            central_difference(
                |f| match qp_at(f).and_then(|q| solve_fixed_iterations(&q, &system, k)) {
                    Ok(s) => s.y,
                    Err(e) => {
                        failure = Some(e);
                        vec![0.0; n * n]
                    }
                },
                &forecast,
                eps,
            )
        };
        let fd = fd_at(opts.eps);
        let fd_half = fd_at(opts.eps / 2.0);
        if let Some(e) = failure {
            return Err(e);
        }
        // the final-sweep margin does not see an earlier sweep switching
        // its active set inside the probe; that shows up here
        if max_relative_error(&fd.concat(), &fd_half.concat(), opts.floor) > opts.tolerance / 10.0 {
            report.skipped_degenerate += 1;
            continue;
        }
        let fd_flat: Vec<f64> = (0..n).flat_map(|c| fd.iter().map(move |row| row[c])).collect();
        let err = max_relative_error(grad.jacobian.as_slice(), &fd_flat, opts.floor);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

/// Predictor VJP against central differences of `upstreamᵀ · predict`.
pub fn check_predictor(
    n: usize,
    hidden: usize,
    window: usize,
    cases: usize,
    seed: u64,
    opts: &CheckOptions,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adj = Adjacency::new((0..n).map(|i| if n > 1 { vec![(i + 1) % n, (i + n - 1) % n] } else { vec![] }).collect())?;
    let mut report = CheckReport {
        name: format!("predictor VJP, N = {n}, h = {hidden}, m = {window}"),
        cases,
        checked: 0,
        skipped_degenerate: 0,
        skipped_nonconverged: 0,
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
    };
    for case in 0..cases {
        let rows: Vec<Vec<f64>> = (0..window)
            .map(|_| (0..n).map(|_| rng.random_range(0.0..30.0)).collect())
            .collect();
        let hist = HistoryWindow::new(&rows)?;
        let w = PredictorWeights::init(hidden, window, 0.05, seed.wrapping_add(case as u64))?;
        let upstream: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |p: &[f64]| {
            let mut ww = w.clone();
            ww.set_flat(p).expect("same shape");
            predict(&hist, &adj, &ww)
                .expect("shapes checked")
                .iter()
                .zip(&upstream)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let analytic = predictor_vjp(&hist, &adj, &w, &upstream)?;
        let fd = central_difference_scalar(objective, &w.flat(), opts.eps);
        // a kink crossed by the probe shows up as a first-order mismatch
        // between the two step sizes; such points are skipped
        let fwd = central_difference_scalar(objective, &w.flat(), opts.eps / 2.0);
        if max_relative_error(&fd, &fwd, opts.floor) > opts.tolerance / 10.0 {
            report.skipped_degenerate += 1;
            continue;
        }
        report.max_rel_error = report.max_rel_error.max(max_relative_error(&analytic, &fd, opts.floor));
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn differences_of_a_polynomial() {
        let f = |x: &[f64]| vec![x[0] * x[0] * x[1], x[1].sin()];
        let j = central_difference(f, &[1.5, 0.3], 1e-5);
        assert!((j[0][0] - 2.0 * 1.5 * 0.3).abs() < 1e-8);
        assert!((j[0][1] - 2.25).abs() < 1e-8);
        assert!(j[1][0].abs() < 1e-12);
        assert!((j[1][1] - 0.3f64.cos()).abs() < 1e-8);
        let g = central_difference_scalar(|x| x[0] * x[1], &[2.0, 3.0], 1e-4);
        assert!((g[0] - 3.0).abs() < 1e-9 && (g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(max_relative_error(&[0.0], &[0.0], 1e-6), 0.0);
        assert!((max_relative_error(&[1.0, 2.0], &[1.0, 2.2], 1e-6) - 0.2 / 2.2).abs() < 1e-15);
        assert!((max_relative_error(&[1e-9], &[0.0], 1e-3) - 1e-6).abs() < 1e-18);
    }
}
