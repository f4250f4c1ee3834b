//! Standardized quadratic program with four inequality blocks and the shared
//! penalized linear system used by every ADMM primal update.
//!
//! The problem is
//!
//! ```text
//! minimize   ½ yᵀ P y + qᵀ y
//! subject to Gₙ y ≤ hₙ,  n = 1..4
//! ```
//!
//! where `P = FᵀF` is stored through its Gram factor `F`.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{check_len, Result, SpoError};
use crate::sparse::CsrMatrix;

/// Number of inequality blocks in the standardized form.
pub const BLOCKS: usize = 4;

/// Display names of the blocks, used in error messages and reports.
pub const BLOCK_NAMES: [&str; BLOCKS] = ["G1", "G2", "G3", "G4"];

/// One inequality block `G y ≤ h`.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintBlock {
    /// General sparse block.
    Sparse(CsrMatrix),
    /// Square diagonal block, stored as its diagonal.
    Diagonal(Vec<f64>),
    /// A single dense row.
    Row(Vec<f64>),
}

impl ConstraintBlock {
    pub fn rows(&self) -> usize {
        match self {
            ConstraintBlock::Sparse(m) => m.nrows(),
            ConstraintBlock::Diagonal(d) => d.len(),
            ConstraintBlock::Row(_) => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            ConstraintBlock::Sparse(m) => m.ncols(),
            ConstraintBlock::Diagonal(d) => d.len(),
            ConstraintBlock::Row(r) => r.len(),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            ConstraintBlock::Sparse(m) => m.values().iter().all(|v| v.is_finite()),
            ConstraintBlock::Diagonal(v) | ConstraintBlock::Row(v) => v.iter().all(|v| v.is_finite()),
        }
    }

    /// `G y`
    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        match self {
            ConstraintBlock::Sparse(m) => m.mul_vec(y),
            ConstraintBlock::Diagonal(d) => d.iter().zip(y).map(|(a, b)| a * b).collect(),
            ConstraintBlock::Row(r) => vec![dot(r, y)],
        }
    }

    /// `out += alpha * Gᵀ v`
    pub fn apply_transpose_acc(&self, alpha: f64, v: &[f64], out: &mut [f64]) {
        match self {
            ConstraintBlock::Sparse(m) => m.tr_mul_vec_acc(alpha, v, out),
            ConstraintBlock::Diagonal(d) => {
                for ((o, a), b) in out.iter_mut().zip(d).zip(v) {
                    *o += alpha * a * b;
                }
            }
            ConstraintBlock::Row(r) => {
                let s = alpha * v[0];
                for (o, a) in out.iter_mut().zip(r) {
                    *o += s * a;
                }
            }
        }
    }

    /// `G X` for a dense `X` with one column per parameter.
    pub fn apply_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            ConstraintBlock::Sparse(m) => m.mul_dense(x),
            ConstraintBlock::Diagonal(d) => {
                let mut out = x.clone();
                for mut col in out.column_iter_mut() {
                    for (v, di) in col.iter_mut().zip(d) {
                        *v *= di;
                    }
                }
                out
            }
            ConstraintBlock::Row(r) => {
                let row = nalgebra::DVector::from_column_slice(r);
                let prod = x.tr_mul(&row);
                DMatrix::from_row_slice(1, prod.len(), prod.as_slice())
            }
        }
    }

    /// `out += alpha * Gᵀ X`
    pub fn apply_transpose_dense_acc(&self, alpha: f64, x: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        match self {
            ConstraintBlock::Sparse(m) => m.tr_mul_dense_acc(alpha, x, out),
            ConstraintBlock::Diagonal(d) => {
                for (src, mut dst) in x.column_iter().zip(out.column_iter_mut()) {
                    for ((o, v), di) in dst.iter_mut().zip(src.iter()).zip(d) {
                        *o += alpha * di * v;
                    }
                }
            }
            ConstraintBlock::Row(r) => {
                for (j, mut dst) in out.column_iter_mut().enumerate() {
                    let s = alpha * x[(0, j)];
                    for (o, ri) in dst.iter_mut().zip(r) {
                        *o += s * ri;
                    }
                }
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            ConstraintBlock::Sparse(m) => m.to_dense(),
            ConstraintBlock::Diagonal(d) => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)),
            ConstraintBlock::Row(r) => DMatrix::from_row_slice(1, r.len(), r),
        }
    }
}

/// The vectorized relocation QP.
#[derive(Debug, Clone)]
pub struct StandardQP {
    n_flow: usize,
    cost_factor: CsrMatrix,
    q: Vec<f64>,
    g: [ConstraintBlock; BLOCKS],
    h: [Vec<f64>; BLOCKS],
    objective_offset: f64,
    /// Factor each constraint row was multiplied by relative to the form the
    /// QP was built in. All ones unless [`StandardQP::equilibrated`] was used.
    row_scale: [Vec<f64>; BLOCKS],
}

impl StandardQP {
    /// Validates and assembles a QP. `cost_factor` is `F` with `P = FᵀF`;
    /// `objective_offset` is the constant added to `½yᵀPy + qᵀy` when
    /// reporting the un-shifted objective.
    pub fn new(
        cost_factor: CsrMatrix,
        q: Vec<f64>,
        g: [ConstraintBlock; BLOCKS],
        h: [Vec<f64>; BLOCKS],
        objective_offset: f64,
    ) -> Result<Self> {
        let n = cost_factor.ncols();
        check_len("q", n, q.len())?;
        for (k, block) in g.iter().enumerate() {
            check_len(BLOCK_NAMES[k], n, block.cols())?;
            check_len("h", block.rows(), h[k].len())?;
            if let ConstraintBlock::Diagonal(d) = block {
                check_len(BLOCK_NAMES[k], n, d.len())?;
            }
        }
        if !cost_factor.values().iter().all(|v| v.is_finite()) {
            return Err(SpoError::NonFinite { what: "P".into() });
        }
        if !q.iter().all(|v| v.is_finite()) {
            return Err(SpoError::NonFinite { what: "q".into() });
        }
        for k in 0..BLOCKS {
            if !g[k].is_finite() {
                return Err(SpoError::NonFinite {
                    what: BLOCK_NAMES[k].into(),
                });
            }
            if !h[k].iter().all(|v| v.is_finite()) {
                return Err(SpoError::NonFinite {
                    what: format!("h{}", k + 1),
                });
            }
        }
        let row_scale = std::array::from_fn(|k| vec![1.0; h[k].len()]);
        Ok(StandardQP {
            n_flow: n,
            cost_factor,
            q,
            g,
            h,
            objective_offset,
            row_scale,
        })
    }

    /// The same program with every constraint row divided by its largest
    /// absolute entry. Feasible set, objective and primal solution are
    /// unchanged; duals scale inversely (see [`StandardQP::original_duals`]).
    /// ADMM with a fixed penalty converges much faster on this form when row
    /// magnitudes differ widely.
    pub fn equilibrated(&self) -> StandardQP {
        let inv = |m: f64| if m > 0.0 { 1.0 / m } else { 1.0 };
        let factors: [Vec<f64>; BLOCKS] = std::array::from_fn(|k| match &self.g[k] {
            ConstraintBlock::Sparse(m) => (0..m.nrows())
                .map(|r| inv(m.row(r).fold(0.0, |a, (_, v)| a.max(v.abs()))))
                .collect(),
            ConstraintBlock::Diagonal(d) => d.iter().map(|v| inv(v.abs())).collect(),
            ConstraintBlock::Row(r) => vec![inv(r.iter().fold(0.0, |a, v| a.max(v.abs())))],
        });
        let g = std::array::from_fn(|k| match &self.g[k] {
            ConstraintBlock::Sparse(m) => ConstraintBlock::Sparse(m.scale_rows(&factors[k])),
            ConstraintBlock::Diagonal(d) => {
                ConstraintBlock::Diagonal(d.iter().zip(&factors[k]).map(|(v, f)| v * f).collect())
            }
            ConstraintBlock::Row(r) => ConstraintBlock::Row(r.iter().map(|v| v * factors[k][0]).collect()),
        });
        let scale = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, f)| x * f).collect::<Vec<f64>>();
        StandardQP {
            n_flow: self.n_flow,
            cost_factor: self.cost_factor.clone(),
            q: self.q.clone(),
            g,
            h: std::array::from_fn(|k| scale(&self.h[k], &factors[k])),
            objective_offset: self.objective_offset,
            row_scale: std::array::from_fn(|k| scale(&self.row_scale[k], &factors[k])),
        }
    }

    pub fn row_scale(&self) -> &[Vec<f64>; BLOCKS] {
        &self.row_scale
    }

    /// Maps duals of this form back to the rows the QP was built with.
    pub fn original_duals(&self, mu: &[Vec<f64>; BLOCKS]) -> [Vec<f64>; BLOCKS] {
        std::array::from_fn(|k| mu[k].iter().zip(&self.row_scale[k]).map(|(m, f)| m * f).collect())
    }

    pub fn n_flow(&self) -> usize {
        self.n_flow
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn g(&self) -> &[ConstraintBlock; BLOCKS] {
        &self.g
    }

    pub fn h(&self) -> &[Vec<f64>; BLOCKS] {
        &self.h
    }

    pub fn cost_factor(&self) -> &CsrMatrix {
        &self.cost_factor
    }

    pub fn objective_offset(&self) -> f64 {
        self.objective_offset
    }

    /// Returns a copy with a different linear term and first right-hand side,
    /// the only parts that change between time steps on a fixed topology.
    /// `h1` is given in the units of the unscaled rows.
    pub fn with_linear_and_supply(&self, q: Vec<f64>, h1: Vec<f64>, objective_offset: f64) -> Result<Self> {
        check_len("q", self.n_flow, q.len())?;
        check_len("h1", self.h[0].len(), h1.len())?;
        if !q.iter().chain(&h1).all(|v| v.is_finite()) {
            return Err(SpoError::NonFinite { what: "q or h1".into() });
        }
        let mut out = self.clone();
        out.q = q;
        out.h[0] = h1.iter().zip(&self.row_scale[0]).map(|(v, f)| v * f).collect();
        out.objective_offset = objective_offset;
        Ok(out)
    }

    /// `P y`
    pub fn p_mul(&self, y: &[f64]) -> Vec<f64> {
        self.cost_factor.tr_mul_vec(&self.cost_factor.mul_vec(y))
    }

    pub fn p_dense(&self) -> DMatrix<f64> {
        let f = self.cost_factor.to_dense();
        f.tr_mul(&f)
    }

    /// Shifted objective `½ yᵀPy + qᵀy`.
    pub fn objective(&self, y: &[f64]) -> f64 {
        let fy = self.cost_factor.mul_vec(y);
        0.5 * dot(&fy, &fy) + dot(&self.q, y)
    }

    /// Objective including the constant offset.
    pub fn objective_unshifted(&self, y: &[f64]) -> f64 {
        self.objective(y) + self.objective_offset
    }

    /// `Gₙ y − hₙ` for every block.
    pub fn constraint_values(&self, y: &[f64]) -> [Vec<f64>; BLOCKS] {
        std::array::from_fn(|k| {
            let mut v = self.g[k].apply(y);
            for (a, b) in v.iter_mut().zip(&self.h[k]) {
                *a -= b;
            }
            v
        })
    }
}

/// How the penalized system `M = P + ρ Σ GₙᵀGₙ` is factorized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Factorization {
    /// Low-rank path when the diagonal part is positive and the rank is small,
    /// dense Cholesky otherwise.
    #[default]
    Auto,
    /// Dense Cholesky of the assembled `M`.
    Dense,
    /// Woodbury form `M = D + UUᵀ` with a Cholesky of the capacitance matrix.
    LowRank,
}

#[derive(Debug, Clone)]
enum Backend {
    Dense(Cholesky<f64, Dyn>),
    LowRank {
        diag_inv: Vec<f64>,
        /// `Uᵀ`, sparse since each column of `U` comes from one constraint
        /// or factor row.
        ut: CsrMatrix,
        capacitance: Cholesky<f64, Dyn>,
    },
}

/// Factorization of `M = P + ρ Σₙ GₙᵀGₙ`, shared by every primal update and
/// every Jacobian step of problems with the same `P`, `G` and `ρ`.
///
/// Never forms `M⁻¹` explicitly.
#[derive(Debug, Clone)]
pub struct PenaltySystem {
    rho: f64,
    n: usize,
    backend: Backend,
}

impl PenaltySystem {
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_low_rank(&self) -> bool {
        matches!(self.backend, Backend::LowRank { .. })
    }

    /// Solves `M x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(b.len(), self.n);
        match &self.backend {
            Backend::Dense(chol) => {
                let rhs = nalgebra::DVector::from_column_slice(b);
                chol.solve(&rhs).as_slice().to_vec()
            }
            Backend::LowRank {
                diag_inv,
                ut,
                capacitance,
            } => {
                let db: Vec<f64> = b.iter().zip(diag_inv).map(|(x, d)| x * d).collect();
                let w = nalgebra::DVector::from_vec(ut.mul_vec(&db));
                let z = capacitance.solve(&w);
                let uz = ut.tr_mul_vec(z.as_slice());
                db.iter()
                    .zip(diag_inv)
                    .zip(uz.iter())
                    .map(|((x, d), c)| x - d * c)
                    .collect()
            }
        }
    }

    /// Solves `M x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        match &self.backend {
            Backend::Dense(chol) => {
                let mut v = nalgebra::DVectorViewMut::from_slice(b, self.n);
                chol.solve_mut(&mut v);
            }
            Backend::LowRank {
                diag_inv,
                ut,
                capacitance,
            } => {
                for (x, d) in b.iter_mut().zip(diag_inv) {
                    *x *= d;
                }
                let mut z = nalgebra::DVector::from_vec(ut.mul_vec(b));
                capacitance.solve_mut(&mut z);
                for (r, zr) in z.iter().enumerate() {
                    for (c, v) in ut.row(r) {
                        b[c] -= diag_inv[c] * v * zr;
                    }
                }
            }
        }
    }

    /// Solves `M X = B` column by column, in place.
    pub fn solve_matrix(&self, b: &mut DMatrix<f64>) {
        debug_assert_eq!(b.nrows(), self.n);
        match &self.backend {
            Backend::Dense(chol) => chol.solve_mut(b),
            Backend::LowRank {
                diag_inv,
                ut,
                capacitance,
            } => {
                for mut col in b.column_iter_mut() {
                    for (x, d) in col.iter_mut().zip(diag_inv) {
                        *x *= d;
                    }
                }
                let mut z = ut.mul_dense(b);
                capacitance.solve_mut(&mut z);
                for (mut col, zc) in b.column_iter_mut().zip(z.column_iter()) {
                    let col = col.as_mut_slice();
                    for (r, zr) in zc.iter().enumerate() {
                        for (c, v) in ut.row(r) {
                            col[c] -= diag_inv[c] * v * zr;
                        }
                    }
                }
            }
        }
    }
}

/// Dense `M = P + ρ Σ GₙᵀGₙ`, assembled entry by entry.
pub fn penalty_matrix_dense(qp: &StandardQP, rho: f64) -> DMatrix<f64> {
    let mut m = qp.p_dense();
    for block in qp.g() {
        let g = block.to_dense();
        m += g.tr_mul(&g) * rho;
    }
    m
}

/// Factorizes `M = P + ρ Σ GₙᵀGₙ` choosing the backend automatically.
pub fn assemble_penalty_system(qp: &StandardQP, rho: f64) -> Result<PenaltySystem> {
    assemble_penalty_system_with(qp, rho, Factorization::Auto)
}

pub fn assemble_penalty_system_with(qp: &StandardQP, rho: f64, kind: Factorization) -> Result<PenaltySystem> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(SpoError::invalid("rho", format!("must be positive and finite, got {rho}")));
    }
    let n = qp.n_flow();
    let (diag, ut) = low_rank_split(qp, rho);
    let rank = ut.nrows();
    let diag_ok = diag.iter().all(|d| *d > 0.0);
    let use_low_rank = match kind {
        Factorization::Dense => false,
        Factorization::LowRank => {
            if !diag_ok {
                return Err(SpoError::NotPositiveDefinite {
                    matrix: "diagonal part of M (some constraint column has no diagonal penalty)",
                });
            }
            true
        }
        Factorization::Auto => diag_ok && rank < n,
    };
    let backend = if use_low_rank {
        let diag_inv: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();
        let u = ut.transpose().to_dense();
        let mut scaled = u.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= diag_inv[i];
        }
        let mut cap = u.tr_mul(&scaled);
        for i in 0..rank {
            cap[(i, i)] += 1.0;
        }
        let capacitance = Cholesky::new(cap).ok_or(SpoError::NotPositiveDefinite {
            matrix: "capacitance I + UᵀD⁻¹U of M",
        })?;
        Backend::LowRank {
            diag_inv,
            ut,
            capacitance,
        }
    } else {
        let m = penalty_matrix_dense(qp, rho);
        let chol = Cholesky::new(m).ok_or(SpoError::NotPositiveDefinite {
            matrix: "M = P + rho * sum(Gn' Gn)",
        })?;
        Backend::Dense(chol)
    };
    Ok(PenaltySystem { rho, n, backend })
}

/// Splits `M` into a diagonal part `D` (from diagonal constraint blocks) and a
/// tall factor `U` with `M = D + UUᵀ`, returned as `Uᵀ`.
fn low_rank_split(qp: &StandardQP, rho: f64) -> (Vec<f64>, CsrMatrix) {
    let n = qp.n_flow();
    let mut diag = vec![0.0; n];
    let mut triplets = Vec::new();
    let mut rank = 0;
    let f = qp.cost_factor();
    for r in 0..f.nrows() {
        triplets.extend(f.row(r).map(|(c, v)| (rank, c, v)));
        rank += 1;
    }
    let sr = rho.sqrt();
    for block in qp.g() {
        match block {
            ConstraintBlock::Diagonal(d) => {
                for (acc, v) in diag.iter_mut().zip(d) {
                    *acc += rho * v * v;
                }
            }
            ConstraintBlock::Row(r) => {
                triplets.extend(r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(c, v)| (rank, c, sr * v)));
                rank += 1;
            }
            ConstraintBlock::Sparse(m) => {
                for r in 0..m.nrows() {
                    triplets.extend(m.row(r).map(|(c, v)| (rank, c, sr * v)));
                    rank += 1;
                }
            }
        }
    }
    (diag, CsrMatrix::from_triplets(rank, n, &triplets))
}

/// Optimality report for a candidate point of a [`StandardQP`]. All entries
/// are max-norms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KktReport {
    /// `‖Py + q + Σ Gₙᵀμₙ‖∞`
    pub stationarity: f64,
    /// `max(0, Gₙy − hₙ)`
    pub primal_infeasibility: f64,
    /// `‖μₙ ⊙ (Gₙy − hₙ)‖∞`
    pub complementarity: f64,
    /// `‖Gₙy + sₙ − hₙ‖∞`, the splitting residual of the slack reformulation.
    pub slack_residual: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_infeasibility)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(
    qp: &StandardQP,
    y: &[f64],
    s: &[Vec<f64>; BLOCKS],
    mu: &[Vec<f64>; BLOCKS],
) -> Result<KktReport> {
    check_len("y", qp.n_flow(), y.len())?;
    for k in 0..BLOCKS {
        check_len("s", qp.h()[k].len(), s[k].len())?;
        check_len("mu", qp.h()[k].len(), mu[k].len())?;
    }
    let mut grad = qp.p_mul(y);
    for (g, qi) in grad.iter_mut().zip(qp.q()) {
        *g += qi;
    }
    for k in 0..BLOCKS {
        qp.g()[k].apply_transpose_acc(1.0, &mu[k], &mut grad);
    }
    let stationarity = max_abs(&grad);

    let residual = qp.constraint_values(y);
    let mut primal_infeasibility: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    let mut slack_residual: f64 = 0.0;
    for k in 0..BLOCKS {
        for ((r, m), sv) in residual[k].iter().zip(&mu[k]).zip(&s[k]) {
            primal_infeasibility = primal_infeasibility.max(r.max(0.0));
            complementarity = complementarity.max((m * r).abs());
            slack_residual = slack_residual.max((r + sv).abs());
        }
    }
    Ok(KktReport {
        stationarity,
        primal_infeasibility,
        complementarity,
        slack_residual,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
