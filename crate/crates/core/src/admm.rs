//! Differentiable ADMM layer for [`StandardQP`].
//!
//! Each iteration performs
//!
//! ```text
//! y ← −M⁻¹ (q + Σ ρGₙᵀ(sₙ − hₙ) + Σ Gₙᵀμₙ)
//! sₙ ← max(0, −μₙ/ρ − (Gₙy − hₙ))
//! μₙ ← μₙ + ρ(Gₙy + sₙ − hₙ)
//! ```
//!
//! and stops once the objective `½yᵀPy + qᵀy` changes by less than `xi`
//! between sweeps and the largest KKT residual is at most `kkt_factor · xi`. Parameter Jacobians of the iterates are carried alongside
//! (forward mode) or recovered afterwards from a mask tape (reverse mode).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, SpoError};
use crate::qp::{assemble_penalty_system, kkt_residuals, ConstraintBlock, KktReport, PenaltySystem, StandardQP, BLOCKS};

/// Per-block vectors (slacks or duals).
pub type Blocks = [Vec<f64>; BLOCKS];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    /// Penalty parameter.
    pub rho: f64,
    /// Convergence threshold on the objective change between sweeps.
    pub xi: f64,
    /// Iteration cap.
    pub k_max: usize,
    /// The KKT residuals must also fall to `kkt_factor · xi` before stopping.
    /// Zero disables the check.
    pub kkt_factor: f64,
}

fn default_kkt_factor() -> f64 {
    0.2
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 2.0,
            xi: 0.05,
            k_max: 2000,
            kkt_factor: default_kkt_factor(),
        }
    }
}

impl AdmmConfig {
    fn stop(&self) -> Stop {
        Stop::Converge {
            xi: self.xi,
            k_max: self.k_max,
            kkt_tol: self.kkt_factor * self.xi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(SpoError::invalid("rho", format!("must be > 0, got {}", self.rho)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(SpoError::invalid("xi", format!("must be > 0, got {}", self.xi)));
        }
        if !(self.kkt_factor >= 0.0 && self.kkt_factor.is_finite()) {
            return Err(SpoError::invalid(
                "kkt_factor",
                format!("must be >= 0, got {}", self.kkt_factor),
            ));
        }
        if self.k_max < 1 {
            return Err(SpoError::invalid("k_max", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub y: Vec<f64>,
    pub s: Blocks,
    pub mu: Blocks,
    pub k: usize,
    /// Shifted objective of the current `y`.
    pub z: f64,
}

/// `y = 0`, `sₙ = max(0, hₙ)`, `μ = 0`.
pub fn init_state(qp: &StandardQP) -> AdmmState {
    AdmmState {
        y: vec![0.0; qp.n_flow()],
        s: std::array::from_fn(|k| qp.h()[k].iter().map(|v| v.max(0.0)).collect()),
        mu: std::array::from_fn(|k| vec![0.0; qp.h()[k].len()]),
        k: 0,
        z: 0.0,
    }
}

fn check_state(state: &AdmmState, qp: &StandardQP) -> Result<()> {
    check_len("y", qp.n_flow(), state.y.len())?;
    for k in 0..BLOCKS {
        check_len("s", qp.h()[k].len(), state.s[k].len())?;
        check_len("mu", qp.h()[k].len(), state.mu[k].len())?;
    }
    Ok(())
}

/// Minimizer of the augmented Lagrangian in `y` for the current slacks and duals.
pub fn primal_update(state: &AdmmState, system: &PenaltySystem, qp: &StandardQP) -> Result<Vec<f64>> {
    check_state(state, qp)?;
    check_len("penalty system", qp.n_flow(), system.dim())?;
    Ok(primal_update_unchecked(state, system, qp))
}

fn primal_update_unchecked(state: &AdmmState, system: &PenaltySystem, qp: &StandardQP) -> Vec<f64> {
    let rho = system.rho();
    let mut rhs = qp.q().to_vec();
    for k in 0..BLOCKS {
        let combined: Vec<f64> = state.s[k]
            .iter()
            .zip(&qp.h()[k])
            .zip(&state.mu[k])
            .map(|((s, h), m)| rho * (s - h) + m)
            .collect();
        qp.g()[k].apply_transpose_acc(1.0, &combined, &mut rhs);
    }
    let mut y = system.solve(&rhs);
    for v in &mut y {
        *v = -*v;
    }
    y
}

/// Slack update using `state.y` as the freshly computed primal iterate.
pub fn slack_update(state: &AdmmState, qp: &StandardQP, rho: f64) -> Blocks {
    let pre = pre_clamp(state, qp, rho);
    pre.map(|v| v.into_iter().map(|x| x.max(0.0)).collect())
}

/// `−μₙ/ρ − (Gₙy − hₙ)` before clamping.
fn pre_clamp(state: &AdmmState, qp: &StandardQP, rho: f64) -> Blocks {
    let residual = qp.constraint_values(&state.y);
    std::array::from_fn(|k| {
        residual[k]
            .iter()
            .zip(&state.mu[k])
            .map(|(r, m)| -m / rho - r)
            .collect()
    })
}

/// Dual ascent step using `state.y` and `state.s` from the current sweep.
pub fn dual_update(state: &AdmmState, qp: &StandardQP, rho: f64) -> Blocks {
    let residual = qp.constraint_values(&state.y);
    std::array::from_fn(|k| {
        state.mu[k]
            .iter()
            .zip(&residual[k])
            .zip(&state.s[k])
            .map(|((m, r), s)| m + rho * (r + s))
            .collect()
    })
}

/// One full sweep in place. Returns the smallest distance of any pre-clamp
/// slack value to the ReLU kink and the active masks of the new slacks.
fn sweep(state: &mut AdmmState, system: &PenaltySystem, qp: &StandardQP) -> (f64, [Vec<bool>; BLOCKS]) {
    let rho = system.rho();
    state.y = primal_update_unchecked(state, system, qp);
    let pre = pre_clamp(state, qp, rho);
    let mut margin = f64::INFINITY;
    for block in &pre {
        for v in block {
            margin = margin.min(v.abs());
        }
    }
    let masks: [Vec<bool>; BLOCKS] = std::array::from_fn(|k| pre[k].iter().map(|v| *v > 0.0).collect());
    state.s = pre.map(|v| v.into_iter().map(|x| x.max(0.0)).collect());
    state.mu = dual_update(state, qp, rho);
    state.k += 1;
    state.z = qp.objective(&state.y);
    (margin, masks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    /// The iteration cap was reached before the stopping test held. The
    /// returned iterate is the last one computed.
    NonConvergence,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub y: Vec<f64>,
    pub s: Blocks,
    pub mu: Blocks,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Shifted objective `½yᵀPy + qᵀy`.
    pub objective: f64,
    /// `|Z_K − Z_{K−1}|` at exit.
    pub last_change: f64,
    /// Objective changes of every sweep, in order.
    pub changes: Vec<f64>,
    pub kkt: KktReport,
    /// Distance of the final sweep's pre-clamp slack values to the kink.
    pub kink_margin: f64,
    /// Same, minimized over all sweeps.
    pub kink_margin_all: f64,
}

impl Solution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Objective including the constant offset of the QP.
    pub fn objective_unshifted(&self, qp: &StandardQP) -> f64 {
        self.objective + qp.objective_offset()
    }
}

#[derive(Debug, Clone, Copy)]
enum Stop {
    Converge { xi: f64, k_max: usize, kkt_tol: f64 },
    Fixed(usize),
}

/// Forward-mode Jacobians of the iterates with respect to the parameter `θ`
/// (one column per parameter component).
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianState {
    pub y: DMatrix<f64>,
    pub s: [DMatrix<f64>; BLOCKS],
    pub mu: [DMatrix<f64>; BLOCKS],
}

impl JacobianState {
    pub fn zeros(qp: &StandardQP, n_params: usize) -> Self {
        JacobianState {
            y: DMatrix::zeros(qp.n_flow(), n_params),
            s: std::array::from_fn(|k| DMatrix::zeros(qp.h()[k].len(), n_params)),
            mu: std::array::from_fn(|k| DMatrix::zeros(qp.h()[k].len(), n_params)),
        }
    }

    pub fn n_params(&self) -> usize {
        self.y.ncols()
    }
}

/// Advances the Jacobians by one sweep. `jacobians` hold the derivatives at
/// iteration `k`; `state` must already hold the iterates of `k + 1` (its
/// slacks supply the ReLU mask).
pub fn jacobian_step(
    jacobians: &JacobianState,
    state: &AdmmState,
    qp: &StandardQP,
    system: &PenaltySystem,
    dq_dtheta: &DMatrix<f64>,
) -> Result<JacobianState> {
    check_state(state, qp)?;
    check_len("dq_dtheta rows", qp.n_flow(), dq_dtheta.nrows())?;
    check_len("dq_dtheta columns", jacobians.n_params(), dq_dtheta.ncols())?;
    check_len("J_y rows", qp.n_flow(), jacobians.y.nrows())?;
    let masks: [Vec<bool>; BLOCKS] = std::array::from_fn(|k| state.s[k].iter().map(|v| *v > 0.0).collect());
    Ok(jacobian_step_masked(jacobians, &masks, qp, system, dq_dtheta))
}

fn jacobian_step_masked(
    j: &JacobianState,
    masks: &[Vec<bool>; BLOCKS],
    qp: &StandardQP,
    system: &PenaltySystem,
    dq_dtheta: &DMatrix<f64>,
) -> JacobianState {
    let rho = system.rho();
    let mut rhs = dq_dtheta.clone();
    for k in 0..BLOCKS {
        let combined = &j.s[k] * rho + &j.mu[k];
        qp.g()[k].apply_transpose_dense_acc(1.0, &combined, &mut rhs);
    }
    system.solve_matrix(&mut rhs);
    let jy = -rhs;
    let mut js: [DMatrix<f64>; BLOCKS] = std::array::from_fn(|_| DMatrix::zeros(0, 0));
    let mut jmu: [DMatrix<f64>; BLOCKS] = std::array::from_fn(|_| DMatrix::zeros(0, 0));
    for k in 0..BLOCKS {
        let gjy = qp.g()[k].apply_dense(&jy);
        let mut s_new = &j.mu[k] + &gjy * rho;
        for mut col in s_new.column_iter_mut() {
            for (v, active) in col.iter_mut().zip(&masks[k]) {
                *v = if *active { -*v / rho } else { 0.0 };
            }
        }
        jmu[k] = &j.mu[k] + (gjy + &s_new) * rho;
        js[k] = s_new;
    }
    JacobianState { y: jy, s: js, mu: jmu }
}

/// Forward-mode state in compact form. After any step each slack/dual row
/// has at most one nonzero Jacobian row, both given by
/// `w = J_μ(previous) + ρ G J_y`:
/// `J_s = −w/ρ` where the slack is active and `J_μ = w` elsewhere.
struct CompactJacobian {
    y: DMatrix<f64>,
    w: [DMatrix<f64>; BLOCKS],
    active: [Vec<bool>; BLOCKS],
}

impl CompactJacobian {
    fn zeros(qp: &StandardQP, p: usize) -> Self {
        CompactJacobian {
            y: DMatrix::zeros(qp.n_flow(), p),
            w: std::array::from_fn(|k| DMatrix::zeros(qp.h()[k].len(), p)),
            active: std::array::from_fn(|k| vec![false; qp.h()[k].len()]),
        }
    }

    /// One step, processed column by column so each column stays in cache.
    fn step(&mut self, masks: &[Vec<bool>; BLOCKS], qp: &StandardQP, system: &PenaltySystem, dq: &DMatrix<f64>) {
        let rho = system.rho();
        let g = qp.g();
        let mut gy: Vec<f64> = Vec::new();
        for c in 0..self.y.ncols() {
            let mut ycol = self.y.column_mut(c);
            let y = ycol.as_mut_slice();
            y.copy_from_slice(dq.column(c).as_slice());
            // ρ J_s + J_μ is −w on active rows and w elsewhere
            for k in 0..BLOCKS {
                let w = self.w[k].column(c);
                let w = w.as_slice();
                let act = &self.active[k];
                let signed = |i: usize| if act[i] { -w[i] } else { w[i] };
                match &g[k] {
                    ConstraintBlock::Diagonal(d) => {
                        for i in 0..y.len() {
                            y[i] += d[i] * signed(i);
                        }
                    }
                    ConstraintBlock::Row(r) => {
                        let v = signed(0);
                        if v != 0.0 {
                            for (yi, ri) in y.iter_mut().zip(r) {
                                *yi += ri * v;
                            }
                        }
                    }
                    ConstraintBlock::Sparse(m) => {
                        for row in 0..m.nrows() {
                            let v = signed(row);
                            if v != 0.0 {
                                for (col, a) in m.row(row) {
                                    y[col] += a * v;
                                }
                            }
                        }
                    }
                }
            }
            system.solve_in_place(y);
            for v in y.iter_mut() {
                *v = -*v;
            }
            for k in 0..BLOCKS {
                let act = &self.active[k];
                let mut w = self.w[k].column_mut(c);
                let w = w.as_mut_slice();
                match &g[k] {
                    ConstraintBlock::Diagonal(d) => {
                        for i in 0..w.len() {
                            let carry = if act[i] { 0.0 } else { w[i] };
                            w[i] = carry + rho * d[i] * y[i];
                        }
                    }
                    block => {
                        gy.clear();
                        gy.extend(block.apply(y));
                        for i in 0..w.len() {
                            let carry = if act[i] { 0.0 } else { w[i] };
                            w[i] = carry + rho * gy[i];
                        }
                    }
                }
            }
        }
        for k in 0..BLOCKS {
            self.active[k].clone_from(&masks[k]);
        }
    }
}

/// Runs ADMM to convergence.
pub fn solve(qp: &StandardQP, cfg: &AdmmConfig) -> Result<Solution> {
    cfg.validate()?;
    let system = assemble_penalty_system(qp, cfg.rho)?;
    solve_with_system(qp, &system, cfg)
}

/// Same as [`solve`] with a pre-factorized system (shared across problems
/// with the same `P`, `G` and `ρ`).
pub fn solve_with_system(qp: &StandardQP, system: &PenaltySystem, cfg: &AdmmConfig) -> Result<Solution> {
    cfg.validate()?;
    check_system(qp, system, cfg.rho)?;
    Ok(run(
        qp,
        system,
        cfg.stop(),
        |_, _| {},
    ))
}

/// Runs exactly `iterations` sweeps with no convergence test. The result is
/// the unrolled map whose derivative the gradient routines compute.
pub fn solve_fixed_iterations(qp: &StandardQP, system: &PenaltySystem, iterations: usize) -> Result<Solution> {
    if iterations == 0 {
        return Err(SpoError::invalid("iterations", "must be at least 1"));
    }
    check_system(qp, system, system.rho())?;
    Ok(run(qp, system, Stop::Fixed(iterations), |_, _| {}))
}

fn check_system(qp: &StandardQP, system: &PenaltySystem, rho: f64) -> Result<()> {
    check_len("penalty system", qp.n_flow(), system.dim())?;
    if system.rho() != rho {
        return Err(SpoError::invalid(
            "rho",
            format!("penalty system was built with rho = {}, config has {}", system.rho(), rho),
        ));
    }
    Ok(())
}

fn run(
    qp: &StandardQP,
    system: &PenaltySystem,
    stop: Stop,
    mut on_sweep: impl FnMut(&AdmmState, &[Vec<bool>; BLOCKS]),
) -> Solution {
    let mut state = init_state(qp);
    let (k_max, xi, kkt_tol) = match stop {
        Stop::Converge { xi, k_max, kkt_tol } => (k_max, Some(xi), kkt_tol),
        Stop::Fixed(k) => (k, None, 0.0),
    };
    let mut changes = Vec::new();
    let mut margin = f64::INFINITY;
    let mut margin_all = f64::INFINITY;
    let mut status = SolveStatus::NonConvergence;
    while state.k < k_max {
        let previous = state.z;
        let (m, masks) = sweep(&mut state, system, qp);
        on_sweep(&state, &masks);
        margin = m;
        margin_all = margin_all.min(m);
        let change = (state.z - previous).abs();
        changes.push(change);
        if let Some(xi) = xi {
            if change < xi
                && (kkt_tol <= 0.0
                    || kkt_residuals(qp, &state.y, &state.s, &state.mu)
                        .expect("dimensions checked")
                        .max()
                        <= kkt_tol)
            {
                status = SolveStatus::Converged;
                break;
            }
        }
    }
    if xi.is_none() {
        status = SolveStatus::Converged;
    }
    let kkt = kkt_residuals(qp, &state.y, &state.s, &state.mu).expect("dimensions checked");
    Solution {
        objective: state.z,
        last_change: changes.last().copied().unwrap_or(0.0),
        changes,
        iterations: state.k,
        status,
        kkt,
        kink_margin: margin,
        kink_margin_all: margin_all,
        y: state.y,
        s: state.s,
        mu: state.mu,
    }
}

#[derive(Debug, Clone)]
pub struct GradSolution {
    pub solution: Solution,
    /// `∂y*/∂θ`, shape `n_flow × n_params`.
    pub jacobian: DMatrix<f64>,
}

/// Runs the forward iterations and the Jacobian recursion in lockstep.
pub fn solve_with_gradients(qp: &StandardQP, cfg: &AdmmConfig, dq_dtheta: &DMatrix<f64>) -> Result<GradSolution> {
    cfg.validate()?;
    let system = assemble_penalty_system(qp, cfg.rho)?;
    solve_with_gradients_system(qp, &system, cfg, dq_dtheta)
}

pub fn solve_with_gradients_system(
    qp: &StandardQP,
    system: &PenaltySystem,
    cfg: &AdmmConfig,
    dq_dtheta: &DMatrix<f64>,
) -> Result<GradSolution> {
    cfg.validate()?;
    check_system(qp, system, cfg.rho)?;
    forward_mode(
        qp,
        system,
        cfg.stop(),
        dq_dtheta,
    )
}

/// Forward-mode Jacobian of exactly `iterations` unrolled sweeps.
pub fn solve_with_gradients_fixed(
    qp: &StandardQP,
    system: &PenaltySystem,
    iterations: usize,
    dq_dtheta: &DMatrix<f64>,
) -> Result<GradSolution> {
    if iterations == 0 {
        return Err(SpoError::invalid("iterations", "must be at least 1"));
    }
    check_system(qp, system, system.rho())?;
    forward_mode(qp, system, Stop::Fixed(iterations), dq_dtheta)
}

fn forward_mode(
    qp: &StandardQP,
    system: &PenaltySystem,
    stop: Stop,
    dq_dtheta: &DMatrix<f64>,
) -> Result<GradSolution> {
    check_len("dq_dtheta rows", qp.n_flow(), dq_dtheta.nrows())?;
    let mut jac = CompactJacobian::zeros(qp, dq_dtheta.ncols());
    let solution = run(qp, system, stop, |_, masks| {
        jac.step(masks, qp, system, dq_dtheta);
    });
    Ok(GradSolution {
        solution,
        jacobian: jac.y,
    })
}

/// ReLU masks of every sweep, enough to replay the derivative of the
/// unrolled iterations backwards.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    masks: Vec<[Vec<bool>; BLOCKS]>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Reverse-mode product `(∂y_K/∂θ)ᵀ · upstream`.
    pub fn vjp(
        &self,
        qp: &StandardQP,
        system: &PenaltySystem,
        dq_dtheta: &DMatrix<f64>,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        check_len("upstream", qp.n_flow(), upstream.len())?;
        check_len("dq_dtheta rows", qp.n_flow(), dq_dtheta.nrows())?;
        let rho = system.rho();
        let g = qp.g();
        let mut theta_bar = vec![0.0; dq_dtheta.ncols()];
        let mut y_bar = upstream.to_vec();
        let mut s_bar: Blocks = std::array::from_fn(|k| vec![0.0; qp.h()[k].len()]);
        let mut mu_bar: Blocks = s_bar.clone();
        for masks in self.masks.iter().rev() {
            // μ_k = μ_{k−1} + ρ(G y_k + s_k − h)
            let mut mu_prev = mu_bar.clone();
            for k in 0..BLOCKS {
                g[k].apply_transpose_acc(rho, &mu_bar[k], &mut y_bar);
                for (sb, mb) in s_bar[k].iter_mut().zip(&mu_bar[k]) {
                    *sb += rho * mb;
                }
            }
            // s_k = mask ⊙ (−μ_{k−1}/ρ − G y_k + h)
            for k in 0..BLOCKS {
                let z: Vec<f64> = s_bar[k]
                    .iter()
                    .zip(&masks[k])
                    .map(|(v, m)| if *m { *v } else { 0.0 })
                    .collect();
                for (mp, zv) in mu_prev[k].iter_mut().zip(&z) {
                    *mp -= zv / rho;
                }
                g[k].apply_transpose_acc(-1.0, &z, &mut y_bar);
            }
            // y_k = −M⁻¹(q(θ) + Σ ρGᵀ(s_{k−1} − h) + Σ Gᵀμ_{k−1})
            let w = system.solve(&y_bar);
            let qt_w = dq_dtheta.tr_mul(&nalgebra::DVector::from_column_slice(&w));
            for (t, v) in theta_bar.iter_mut().zip(qt_w.iter()) {
                *t -= v;
            }
            for k in 0..BLOCKS {
                let gw = g[k].apply(&w);
                s_bar[k] = gw.iter().map(|v| -rho * v).collect();
                for (mp, v) in mu_prev[k].iter_mut().zip(&gw) {
                    *mp -= v;
                }
            }
            mu_bar = mu_prev;
            y_bar.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(theta_bar)
    }
}

/// Runs ADMM and records the ReLU masks for a later [`Tape::vjp`].
pub fn solve_recorded(qp: &StandardQP, system: &PenaltySystem, cfg: &AdmmConfig) -> Result<(Solution, Tape)> {
    cfg.validate()?;
    check_system(qp, system, cfg.rho)?;
    let mut tape = Tape::default();
    let solution = run(
        qp,
        system,
        cfg.stop(),
        |_, masks| tape.masks.push(masks.clone()),
    );
    Ok((solution, tape))
}

/// `J_yᵀ · dL/dy`.
pub fn chain_loss_gradient(dl_dy: &[f64], jacobian: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_len("dL/dy", jacobian.nrows(), dl_dy.len())?;
    Ok(jacobian
        .tr_mul(&nalgebra::DVector::from_column_slice(dl_dy))
        .as_slice()
        .to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{assemble_penalty_system_with, penalty_matrix_dense, Factorization};
    use crate::relocation::{build_sparse_a, required_dv_distribution, to_standard_qp, RelocationInstance};
    use crate::sparse::CsrMatrix;
    use crate::test_support::random_instance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_grid_match() -> (RelocationInstance, Vec<f64>) {
        let inst = RelocationInstance {
            n_grids: 2,
            supply: vec![5.0, 5.0],
            target: vec![3.0, 7.0],
            travel_time: vec![vec![0.0, 10.0], vec![10.0, 0.0]],
            cost: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            budget: 100.0,
            interval: 15.0,
        };
        let req = inst.target.clone();
        (inst, req)
    }

    fn dq(n: usize) -> DMatrix<f64> {
        build_sparse_a(n).transpose().to_dense()
    }

    #[test]
    fn init_clamps_right_hand_sides() {
        let qp = StandardQP::new(
            CsrMatrix::from_triplets(1, 1, &[(0, 0, 1.0)]),
            vec![0.0],
            [
                ConstraintBlock::Sparse(CsrMatrix::from_triplets(1, 1, &[(0, 0, 1.0)])),
                ConstraintBlock::Diagonal(vec![0.0]),
                ConstraintBlock::Row(vec![1.0]),
                ConstraintBlock::Diagonal(vec![-1.0]),
            ],
            [vec![-1.0], vec![0.0], vec![3.0], vec![0.0]],
            0.0,
        )
        .unwrap();
        let st = init_state(&qp);
        assert_eq!(st.s[0], vec![0.0]);
        assert_eq!(st.s[2], vec![3.0]);
        assert_eq!(st.s[1], vec![0.0]);
        assert_eq!((st.k, st.z), (0, 0.0));
        assert!(st.mu.iter().all(|m| m.iter().all(|v| *v == 0.0)));

        let (inst, _) = two_grid_match();
        let qp = to_standard_qp(&inst, &[0.0, 0.0]).unwrap();
        assert_eq!(init_state(&qp).s[0], vec![5.0, 5.0]);
    }

    #[test]
    fn primal_update_zero_rhs_and_stationarity() {
        let (inst, _) = two_grid_match();
        let qp = to_standard_qp(&inst, &[0.0, 0.0]).unwrap();
        let sys = assemble_penalty_system(&qp, 2.0).unwrap();
        let mut st = init_state(&qp);
        st.s = qp.h().clone();
        assert!(primal_update(&st, &sys, &qp).unwrap().iter().all(|v| v.abs() < 1e-14));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = random_instance(&mut rng, 2);
        let req = vec![4.0, -1.0];
        let qp = to_standard_qp(&inst, &req).unwrap();
        let rho = 2.0;
        let sys = assemble_penalty_system(&qp, rho).unwrap();
        let mut st = init_state(&qp);
        for k in 0..BLOCKS {
            for v in st.s[k].iter_mut() {
                *v = rng.random_range(0.0..3.0);
            }
            for v in st.mu[k].iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        let y = primal_update(&st, &sys, &qp).unwrap();
        // gradient of the augmented Lagrangian in y
        let mut grad = qp.p_mul(&y);
        for (g, q) in grad.iter_mut().zip(qp.q()) {
            *g += q;
        }
        let res = qp.constraint_values(&y);
        for k in 0..BLOCKS {
            let v: Vec<f64> = st.mu[k]
                .iter()
                .zip(&res[k])
                .zip(&st.s[k])
                .map(|((m, r), s)| m + rho * (r + s))
                .collect();
            qp.g()[k].apply_transpose_acc(1.0, &v, &mut grad);
        }
        assert!(grad.iter().all(|g| g.abs() < 1e-8));

        // independent dense solve of the same system
        let m = penalty_matrix_dense(&qp, rho);
        let mut rhs = nalgebra::DVector::from_column_slice(qp.q());
        for k in 0..BLOCKS {
            let g = qp.g()[k].to_dense();
            let s = nalgebra::DVector::from_column_slice(&st.s[k]);
            let h = nalgebra::DVector::from_column_slice(&qp.h()[k]);
            let mu = nalgebra::DVector::from_column_slice(&st.mu[k]);
            rhs += g.tr_mul(&((s - h) * rho + mu));
        }
        let oracle = -m.lu().solve(&rhs).unwrap();
        for (a, b) in y.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    fn scalar_block_qp(h: f64) -> StandardQP {
        StandardQP::new(
            CsrMatrix::from_triplets(1, 1, &[(0, 0, 1.0)]),
            vec![0.0],
            [
                ConstraintBlock::Sparse(CsrMatrix::from_triplets(1, 1, &[(0, 0, 1.0)])),
                ConstraintBlock::Diagonal(vec![0.0]),
                ConstraintBlock::Row(vec![0.0]),
                ConstraintBlock::Diagonal(vec![-1.0]),
            ],
            [vec![h], vec![0.0], vec![0.0], vec![0.0]],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn slack_update_examples() {
        // G1 y − h1 = 0 − 2 = −2, μ = 0, ρ = 2 → s1 = 2
        let qp = scalar_block_qp(2.0);
        let mut st = init_state(&qp);
        st.s = std::array::from_fn(|_| vec![0.0]);
        assert_eq!(slack_update(&st, &qp, 2.0)[0], vec![2.0]);
        // Gy = h, μ = 0 → 0
        let qp0 = scalar_block_qp(0.0);
        let st0 = init_state(&qp0);
        assert_eq!(slack_update(&st0, &qp0, 2.0)[0], vec![0.0]);
        // μ = 4, Gy − h = 0, ρ = 2 → max(0, −2) = 0
        let mut st = init_state(&qp0);
        st.mu[0] = vec![4.0];
        assert_eq!(slack_update(&st, &qp0, 2.0)[0], vec![0.0]);
    }

    #[test]
    fn dual_update_examples() {
        // feasible point with s = h − Gy leaves μ unchanged
        let qp = scalar_block_qp(3.0);
        let mut st = init_state(&qp);
        st.y = vec![1.0];
        st.s = [vec![2.0], vec![0.0], vec![0.0], vec![1.0]];
        st.mu = [vec![0.7], vec![0.1], vec![0.0], vec![0.2]];
        assert_eq!(dual_update(&st, &qp, 2.0), st.mu);
        // μ = 0, ρ = 2, Gy + s − h = 1 → 2
        let mut st = init_state(&qp);
        st.y = vec![4.0];
        st.s = [vec![0.0], vec![0.0], vec![0.0], vec![0.0]];
        st.mu = std::array::from_fn(|_| vec![0.0]);
        assert_eq!(dual_update(&st, &qp, 2.0)[0], vec![2.0]);
    }

    #[test]
    fn dual_sequence_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inst = random_instance(&mut rng, 3);
        let qp = to_standard_qp(&inst, &[2.0, 5.0, 1.0]).unwrap();
        let rho = 2.0;
        let sys = assemble_penalty_system(&qp, rho).unwrap();
        let mut st = init_state(&qp);
        let mut reference = st.mu.clone();
        for _ in 0..20 {
            sweep(&mut st, &sys, &qp);
            // scalar recomputation from the new y and s
            let gd: Vec<nalgebra::DMatrix<f64>> = qp.g().iter().map(|g| g.to_dense()).collect();
            for k in 0..BLOCKS {
                for r in 0..reference[k].len() {
                    let mut gy = 0.0;
                    for c in 0..qp.n_flow() {
                        gy += gd[k][(r, c)] * st.y[c];
                    }
                    reference[k][r] += rho * (gy + st.s[k][r] - qp.h()[k][r]);
                }
            }
            for k in 0..BLOCKS {
                for (a, b) in st.mu[k].iter().zip(&reference[k]) {
                    assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
                }
            }
            assert!(st.s.iter().all(|b| b.iter().all(|v| *v >= 0.0)));
        }
    }

    #[test]
    fn solve_trivial_and_budget_cases() {
        let (inst, _) = two_grid_match();
        let qp = to_standard_qp(&inst, &[0.0, 0.0]).unwrap();
        let sol = solve(&qp, &AdmmConfig::default()).unwrap();
        assert!(sol.converged());
        assert!(sol.y.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(sol.objective, 0.0);

        // feasible exact match exists: objective goes to 0
        let (inst, req) = two_grid_match();
        let qp = to_standard_qp(&inst, &req).unwrap();
        let cfg = AdmmConfig {
            xi: 1e-9,
            k_max: 20_000,
            ..AdmmConfig::default()
        };
        let sol = solve(&qp, &cfg).unwrap();
        assert!(sol.converged());
        assert!(sol.objective_unshifted(&qp).abs() < 1e-4, "Z0 = {}", sol.objective_unshifted(&qp));

        // zero budget and positive costs force zero flow
        let mut inst = inst;
        inst.budget = 0.0;
        inst.cost = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let qp = to_standard_qp(&inst, &req).unwrap();
        let sol = solve(&qp, &cfg).unwrap();
        assert!(sol.y.iter().all(|v| v.abs() < 1e-4), "{:?}", sol.y);
        let half_norm = 0.5 * req.iter().map(|v| v * v).sum::<f64>();
        assert!((sol.objective_unshifted(&qp) - half_norm).abs() < 1e-3);
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inst = random_instance(&mut rng, 3);
        let qp = to_standard_qp(&inst, &[6.0, 1.0, 9.0]).unwrap();
        let cfg = AdmmConfig {
            xi: 1e-300,
            k_max: 3,
            ..AdmmConfig::default()
        };
        let sol = solve(&qp, &cfg).unwrap();
        assert_eq!(sol.status, SolveStatus::NonConvergence);
        assert_eq!(sol.iterations, 3);
        assert!(AdmmConfig { k_max: 0, ..cfg }.validate().is_err());
        assert!(AdmmConfig { rho: -1.0, ..cfg }.validate().is_err());
        assert!(AdmmConfig { xi: 0.0, ..cfg }.validate().is_err());
        assert!(AdmmConfig { kkt_factor: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn first_jacobian_step_is_minus_m_inverse_at() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inst = random_instance(&mut rng, 3);
        let qp = to_standard_qp(&inst, &[1.0, 2.0, 3.0]).unwrap();
        let sys = assemble_penalty_system_with(&qp, 2.0, Factorization::Dense).unwrap();
        let dq = dq(3);
        let j0 = JacobianState::zeros(&qp, 3);
        let mut st = init_state(&qp);
        sweep(&mut st, &sys, &qp);
        let j1 = jacobian_step(&j0, &st, &qp, &sys, &dq).unwrap();
        let m = penalty_matrix_dense(&qp, 2.0);
        let expected = -(m.lu().solve(&dq).unwrap());
        assert!((&j1.y - expected).abs().max() < 1e-12);
        for k in 0..BLOCKS {
            for (i, s) in st.s[k].iter().enumerate() {
                if *s == 0.0 {
                    assert!(j1.s[k].row(i).iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    fn fd_jacobian_fixed(
        inst: &RelocationInstance,
        theta: &[f64],
        sys: &PenaltySystem,
        iterations: usize,
        eps: f64,
    ) -> DMatrix<f64> {
        let n = inst.n_grids;
        let mut out = DMatrix::zeros(n * n, n);
        for c in 0..n {
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[c] += eps;
            minus[c] -= eps;
            let eval = |t: &[f64]| {
                let req = required_dv_distribution(&inst.target, t).unwrap();
                let qp = to_standard_qp(inst, &req).unwrap();
                solve_fixed_iterations(&qp, sys, iterations).unwrap().y
            };
            let yp = eval(&plus);
            let ym = eval(&minus);
            for r in 0..n * n {
                out[(r, c)] = (yp[r] - ym[r]) / (2.0 * eps);
            }
        }
        out
    }

    #[test]
    fn unrolled_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 3);
            let theta: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..4.0)).collect();
            let req = required_dv_distribution(&inst.target, &theta).unwrap();
            let qp = to_standard_qp(&inst, &req).unwrap();
            let sys = assemble_penalty_system(&qp, 2.0).unwrap();
            let grad = solve_with_gradients_fixed(&qp, &sys, 50, &dq(3)).unwrap();
            let fd = fd_jacobian_fixed(&inst, &theta, &sys, 50, 1e-4);
            let err = crate::gradcheck::max_relative_error(grad.jacobian.as_slice(), fd.as_slice(), 1e-6);
            if grad.solution.kink_margin < 1e-3 {
                continue;
            }
            assert!(err <= 1e-3, "relative error {err}");
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} non-degenerate instances");
    }

    #[test]
    fn reverse_mode_matches_forward_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for n in [2usize, 3, 4] {
            let inst = random_instance(&mut rng, n);
            let theta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
            let req = required_dv_distribution(&inst.target, &theta).unwrap();
            let qp = to_standard_qp(&inst, &req).unwrap();
            let cfg = AdmmConfig {
                xi: 1e-6,
                ..AdmmConfig::default()
            };
            let sys = assemble_penalty_system(&qp, cfg.rho).unwrap();
            let dq = dq(n);
            let fwd = solve_with_gradients_system(&qp, &sys, &cfg, &dq).unwrap();
            let (sol, tape) = solve_recorded(&qp, &sys, &cfg).unwrap();
            assert_eq!(tape.len(), sol.iterations);
            assert_eq!(sol.y, fwd.solution.y);
            let v: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rev = tape.vjp(&qp, &sys, &dq, &v).unwrap();
            let expected = chain_loss_gradient(&v, &fwd.jacobian).unwrap();
            for (a, b) in rev.iter().zip(&expected) {
                assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn chain_rule_examples() {
        let j = DMatrix::from_fn(4, 2, |i, k| if i == k { 1.0 } else { 0.0 });
        assert_eq!(chain_loss_gradient(&[0.0; 4], &j).unwrap(), vec![0.0, 0.0]);
        assert_eq!(chain_loss_gradient(&[3.0, -1.0, 7.0, 9.0], &j).unwrap(), vec![3.0, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let j = DMatrix::from_fn(9, 3, |_, _| rng.random_range(-1.0..1.0));
        let v: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = chain_loss_gradient(&v, &j).unwrap();
        for c in 0..3 {
            let mut acc = 0.0;
            for r in 0..9 {
                acc += j[(r, c)] * v[r];
            }
            assert!((got[c] - acc).abs() < 1e-14);
        }
        assert!(chain_loss_gradient(&[1.0; 3], &j).is_err());
    }

    #[test]
    fn theta_independent_problem_has_zero_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = random_instance(&mut rng, 2);
        let qp = to_standard_qp(&inst, &[1.0, 1.0]).unwrap();
        let zero_dq = DMatrix::zeros(4, 2);
        let g = solve_with_gradients(&qp, &AdmmConfig::default(), &zero_dq).unwrap();
        assert!(g.jacobian.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn larger_xi_never_needs_more_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let inst = random_instance(&mut rng, 3);
            let qp = to_standard_qp(&inst, &inst.target).unwrap();
            let mut previous = usize::MAX;
            for xi in [1e-6, 2e-6, 1e-3, 2e-3, 0.05, 0.1] {
                let cfg = AdmmConfig { xi, ..AdmmConfig::default() };
                let k = solve(&qp, &cfg).unwrap().iterations;
                assert!(k <= previous);
                previous = k;
            }
        }
    }

    #[test]
    fn iterates_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = random_instance(&mut rng, 4);
        let qp = to_standard_qp(&inst, &inst.target).unwrap();
        let cfg = AdmmConfig { xi: 1e-5, ..AdmmConfig::default() };
        let a = solve_with_gradients(&qp, &cfg, &dq(4)).unwrap();
        let b = solve_with_gradients(&qp, &cfg, &dq(4)).unwrap();
        assert_eq!(a.solution.y, b.solution.y);
        assert_eq!(a.jacobian, b.jacobian);
        assert_eq!(a.solution.changes, b.solution.changes);
    }

    #[test]
    fn equilibrated_form_keeps_the_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfg = AdmmConfig {
            xi: 1e-7,
            k_max: 200_000,
            ..AdmmConfig::default()
        };
        for n in [2usize, 3, 5] {
            let inst = random_instance(&mut rng, n);
            let theta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
            let req = required_dv_distribution(&inst.target, &theta).unwrap();
            let raw = to_standard_qp(&inst, &req).unwrap();
            let eq = raw.equilibrated();
            for k in 0..BLOCKS {
                let dense = eq.g()[k].to_dense();
                for r in 0..dense.nrows() {
                    let m = dense.row(r).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    assert!(m == 0.0 || (m - 1.0).abs() < 1e-12);
                }
            }
            let y: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..3.0)).collect();
            assert_eq!(raw.objective(&y), eq.objective(&y));
            let a = solve(&raw, &cfg).unwrap();
            let b = solve(&eq, &cfg).unwrap();
            assert!(a.converged() && b.converged());
            let (za, zb) = (a.objective_unshifted(&raw), b.objective_unshifted(&eq));
            assert!((za - zb).abs() <= 1e-4 * za.abs().max(1.0), "{za} vs {zb}");
            // duals mapped back satisfy the original stationarity condition
            let mu = eq.original_duals(&b.mu);
            let r = kkt_residuals(&raw, &b.y, &a.s, &mu).unwrap();
            assert!(r.stationarity < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn supply_update_respects_row_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let inst = random_instance(&mut rng, 3);
        let raw = to_standard_qp(&inst, &inst.target).unwrap();
        let mut scaled_cost = inst.clone();
        scaled_cost.cost.iter_mut().flatten().for_each(|c| *c *= 4.0);
        let eq = to_standard_qp(&scaled_cost, &inst.target).unwrap().equilibrated();
        let supply = vec![1.0, 2.0, 3.0];
        let a = raw.with_linear_and_supply(raw.q().to_vec(), supply.clone(), 0.0).unwrap();
        let b = eq.with_linear_and_supply(eq.q().to_vec(), supply.clone(), 0.0).unwrap();
        for (x, (h, f)) in b.h()[0].iter().zip(a.h()[0].iter().zip(&eq.row_scale()[0])) {
            assert_eq!(*x, h * f);
        }
    }
}
