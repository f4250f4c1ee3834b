//! Relocation problem for dedicated vehicles and its vectorized QP form.
//!
//! Flows `x[i][j]` (origin `i`, destination `j`) are flattened origin-major:
//! `y = (x₁₁, x₁₂, …, x₁N, x₂₁, …, x_NN)`. This order is part of the stable
//! interface (JSON, C ABI, CSV exports).

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, SpoError};
use crate::qp::{ConstraintBlock, StandardQP};
use crate::sparse::CsrMatrix;

/// One time step of the relocation problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelocationInstance {
    pub n_grids: usize,
    /// Current dedicated-vehicle distribution, per grid.
    pub supply: Vec<f64>,
    /// Target all-vehicle distribution for the next interval, per grid.
    pub target: Vec<f64>,
    /// Travel time in minutes, `travel_time[i][j]` from `i` to `j`.
    pub travel_time: Vec<Vec<f64>>,
    /// Incentive cost, `cost[i][j]` from `i` to `j`.
    pub cost: Vec<Vec<f64>>,
    /// Total incentive budget.
    pub budget: f64,
    /// Relocation interval length in minutes.
    pub interval: f64,
}

impl RelocationInstance {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_grids;
        if n == 0 {
            return Err(SpoError::invalid("n_grids", "must be at least 1"));
        }
        check_len("supply", n, self.supply.len())?;
        check_len("target", n, self.target.len())?;
        check_len("travel_time", n, self.travel_time.len())?;
        check_len("cost", n, self.cost.len())?;
        for (i, v) in self.supply.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(SpoError::invalid(format!("supply[{i}]"), format!("must be finite and >= 0, got {v}")));
            }
        }
        for (i, v) in self.target.iter().enumerate() {
            if !v.is_finite() {
                return Err(SpoError::invalid(format!("target[{i}]"), "must be finite"));
            }
        }
        for (name, m) in [("travel_time", &self.travel_time), ("cost", &self.cost)] {
            for (i, row) in m.iter().enumerate() {
                if row.len() != n {
                    return Err(SpoError::invalid(
                        format!("{name}[{i}]"),
                        format!("expected {n} columns, got {}", row.len()),
                    ));
                }
                for (j, v) in row.iter().enumerate() {
                    if !v.is_finite() || *v < 0.0 {
                        return Err(SpoError::invalid(
                            format!("{name}[{i}][{j}]"),
                            format!("must be finite and >= 0, got {v}"),
                        ));
                    }
                }
            }
        }
        for i in 0..n {
            if self.travel_time[i][i] != 0.0 {
                return Err(SpoError::invalid(format!("travel_time[{i}][{i}]"), "diagonal must be 0"));
            }
        }
        if !self.budget.is_finite() || self.budget < 0.0 {
            return Err(SpoError::invalid("budget", format!("must be finite and >= 0, got {}", self.budget)));
        }
        if !self.interval.is_finite() || self.interval <= 0.0 {
            return Err(SpoError::invalid("interval", format!("must be > 0, got {}", self.interval)));
        }
        Ok(())
    }
}

/// Flattened relocation flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPlan(Vec<f64>);

impl FlowPlan {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        grids_from_flow_len(y.len())?;
        Ok(FlowPlan(y))
    }

    pub fn flatten(x: &[Vec<f64>]) -> Result<Self> {
        let n = x.len();
        let mut y = Vec::with_capacity(n * n);
        for (i, row) in x.iter().enumerate() {
            if row.len() != n {
                return Err(SpoError::invalid(format!("flows[{i}]"), format!("expected {n} columns")));
            }
            y.extend_from_slice(row);
        }
        Ok(FlowPlan(y))
    }

    pub fn unflatten(&self) -> Vec<Vec<f64>> {
        let n = self.n_grids();
        self.0.chunks(n.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn n_grids(&self) -> usize {
        grids_from_flow_len(self.0.len()).expect("validated on construction")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Flow from origin `i` to destination `j`.
    pub fn flow(&self, i: usize, j: usize) -> f64 {
        self.0[i * self.n_grids() + j]
    }
}

fn grids_from_flow_len(len: usize) -> Result<usize> {
    let n = (len as f64).sqrt().round() as usize;
    if n * n != len {
        return Err(SpoError::invalid("flows", format!("length {len} is not a perfect square")));
    }
    Ok(n)
}

/// Arrival operator: `(A y)_j = Σᵢ x_ij`.
pub fn build_sparse_a(n_grids: usize) -> CsrMatrix {
    let n = n_grids;
    let triplets: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|j| (0..n).map(move |i| (j, i * n + j, 1.0)))
        .collect();
    CsrMatrix::from_triplets(n, n * n, &triplets)
}

/// Departure operator: `(B y)_i = Σⱼ x_ij`.
pub fn build_sparse_b(n_grids: usize) -> CsrMatrix {
    let n = n_grids;
    let triplets: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, i * n + j, 1.0)))
        .collect();
    CsrMatrix::from_triplets(n, n * n, &triplets)
}

/// Required dedicated-vehicle distribution `T_a − D̂_f`. Negative entries are kept.
pub fn required_dv_distribution(target: &[f64], predicted_free: &[f64]) -> Result<Vec<f64>> {
    check_len("predicted_free", target.len(), predicted_free.len())?;
    Ok(target.iter().zip(predicted_free).map(|(t, f)| t - f).collect())
}

/// Builds the standardized QP:
///
/// * `P = AᵀA`, `q = −Aᵀ·required_dv`
/// * `G₁ = B`, `h₁ = supply`
/// * `G₂ = diag(m − δ)`, `h₂ = 0`
/// * `G₃ = costᵀ` (flattened), `h₃ = budget`
/// * `G₄ = −I`, `h₄ = 0`
///
/// The recorded objective offset is `½‖required_dv‖²`, so that
/// [`StandardQP::objective_unshifted`] returns the matching objective.
pub fn to_standard_qp(inst: &RelocationInstance, required_dv: &[f64]) -> Result<StandardQP> {
    inst.validate()?;
    let n = inst.n_grids;
    check_len("required_dv", n, required_dv.len())?;
    let a = build_sparse_a(n);
    let q: Vec<f64> = a.tr_mul_vec(required_dv).into_iter().map(|v| -v).collect();
    let g2: Vec<f64> = inst
        .travel_time
        .iter()
        .flat_map(|row| row.iter().map(|m| m - inst.interval))
        .collect();
    let g3: Vec<f64> = inst.cost.iter().flat_map(|row| row.iter().copied()).collect();
    let offset = 0.5 * required_dv.iter().map(|v| v * v).sum::<f64>();
    StandardQP::new(
        a,
        q,
        [
            ConstraintBlock::Sparse(build_sparse_b(n)),
            ConstraintBlock::Diagonal(g2),
            ConstraintBlock::Row(g3),
            ConstraintBlock::Diagonal(vec![-1.0; n * n]),
        ],
        [inst.supply.clone(), vec![0.0; n * n], vec![inst.budget], vec![0.0; n * n]],
        offset,
    )
}

/// Matching objective `½ Σⱼ (Σᵢ x_ij − D̂_c,j)²` evaluated directly on flows.
pub fn matching_objective(flows: &[Vec<f64>], required_dv: &[f64]) -> f64 {
    let n = flows.len();
    (0..n)
        .map(|j| {
            let arrivals: f64 = (0..n).map(|i| flows[i][j]).sum();
            let d = arrivals - required_dv[j];
            0.5 * d * d
        })
        .sum()
}

/// Random dense instance for tests and gradient checks: every arc has a
/// travel time in `[1, 25)` minutes (some beyond the 15-minute interval),
/// a cost in `[0.5, 3)` and the budget is drawn in `[5, 40)`.
pub fn random_instance<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> RelocationInstance {
    let mut tt = vec![vec![0.0; n]; n];
    let mut cost = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                tt[i][j] = rng.random_range(1.0..25.0);
                cost[i][j] = rng.random_range(0.5..3.0);
            }
        }
    }
    RelocationInstance {
        n_grids: n,
        supply: (0..n).map(|_| rng.random_range(0.0..10.0)).collect(),
        target: (0..n).map(|_| rng.random_range(0.0..12.0)).collect(),
        travel_time: tt,
        cost,
        budget: rng.random_range(5.0..40.0),
        interval: 15.0,
    }
}

/// Dedicated-vehicle arrivals `A y`.
pub fn aggregate_arrivals(y: &[f64]) -> Result<Vec<f64>> {
    let n = grids_from_flow_len(y.len())?;
    Ok(build_sparse_a(n).mul_vec(y))
}

/// Combined distribution `D_c + D_f`.
pub fn matching_distribution(dv: &[f64], free: &[f64]) -> Result<Vec<f64>> {
    check_len("free", dv.len(), free.len())?;
    Ok(dv.iter().zip(free).map(|(a, b)| a + b).collect())
}

/// Largest violation, in vehicles, of the supply, time, budget and
/// nonnegativity constraints by a flow vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub supply: f64,
    /// Largest flow on an arc that is not time-feasible (`m_ij > δ`).
    pub time: f64,
    /// Budget overrun expressed in currency units.
    pub budget: f64,
    pub nonnegativity: f64,
}

impl FeasibilityReport {
    pub fn max(&self) -> f64 {
        self.supply.max(self.time).max(self.budget).max(self.nonnegativity)
    }

    /// Per-constraint maximum of two reports.
    pub fn worst(&self, other: &FeasibilityReport) -> FeasibilityReport {
        FeasibilityReport {
            supply: self.supply.max(other.supply),
            time: self.time.max(other.time),
            budget: self.budget.max(other.budget),
            nonnegativity: self.nonnegativity.max(other.nonnegativity),
        }
    }
}

pub fn feasibility(inst: &RelocationInstance, y: &[f64]) -> Result<FeasibilityReport> {
    let n = inst.n_grids;
    check_len("flows", n * n, y.len())?;
    let departures = build_sparse_b(n).mul_vec(y);
    let supply = departures
        .iter()
        .zip(&inst.supply)
        .fold(0.0_f64, |m, (d, s)| m.max(d - s));
    let mut time: f64 = 0.0;
    let mut spend = 0.0;
    let mut nonnegativity: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = y[i * n + j];
            if inst.travel_time[i][j] > inst.interval {
                time = time.max(x);
            }
            spend += inst.cost[i][j] * x;
            nonnegativity = nonnegativity.max(-x);
        }
    }
    Ok(FeasibilityReport {
        supply: supply.max(0.0),
        time: time.max(0.0),
        budget: (spend - inst.budget).max(0.0),
        nonnegativity: nonnegativity.max(0.0),
    })
}
