//! Short-term demand predictor for free-moving vehicles.
//!
//! Two stacked graph blocks. Each mixes a grid's own features with the mean
//! over its 1-hop neighborhood, applies an affine map and a ReLU. The first
//! block maps the `m` window values of a grid to `h` hidden features, the
//! second maps those to one output per grid:
//!
//! ```text
//! X  = s · history                       (m × N)
//! Z₁ = W₁ X + V₁ (X Âᵀ) + b₁             (h × N)
//! H₁ = relu(Z₁)
//! z₂ = w₂ᵀ H₁ + v₂ᵀ (H₁ Âᵀ) + b₂         (1 × N)
//! ŷ  = relu(z₂) / s
//! ```
//!
//! `Â` is the row-normalized adjacency with self-loops and `s` a fixed input
//! scale that keeps the weights near unit magnitude. The separate self term
//! matters: averaging alone smears a busy grid into its quiet neighbors.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, SpoError};

/// Past `m` intervals of free-vehicle counts, oldest row first.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    demand: DMatrix<f64>,
}

impl HistoryWindow {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(SpoError::Empty("history window"));
        }
        let n = rows[0].len();
        if n == 0 {
            return Err(SpoError::Empty("history row"));
        }
        for (t, row) in rows.iter().enumerate() {
            check_len("history row", n, row.len())?;
            if let Some(g) = row.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(SpoError::invalid(
                    format!("history[{t}][{g}]"),
                    format!("must be finite and >= 0, got {}", row[g]),
                ));
            }
        }
        Ok(HistoryWindow {
            demand: DMatrix::from_fn(m, n, |t, g| rows[t][g]),
        })
    }

    pub fn window(&self) -> usize {
        self.demand.nrows()
    }

    pub fn n_grids(&self) -> usize {
        self.demand.ncols()
    }

    pub fn last(&self) -> Vec<f64> {
        self.demand.row(self.window() - 1).iter().copied().collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.demand
    }
}

/// Neighbor lists with self-loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    /// Builds from neighbor lists, adding self-loops and sorting. Fails if
    /// the relation is not symmetric.
    pub fn new(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        if n == 0 {
            return Err(SpoError::Empty("adjacency"));
        }
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.push(i);
            list.sort_unstable();
            list.dedup();
            if let Some(&j) = list.iter().find(|&&j| j >= n) {
                return Err(SpoError::invalid(format!("adjacency[{i}]"), format!("neighbor {j} out of range")));
            }
        }
        for i in 0..n {
            for &j in &neighbors[i] {
                if neighbors[j].binary_search(&i).is_err() {
                    return Err(SpoError::invalid(
                        format!("adjacency[{i}]"),
                        format!("{j} lists no edge back to {i}"),
                    ));
                }
            }
        }
        Ok(Adjacency { neighbors })
    }

    /// Self-loops only.
    pub fn isolated(n: usize) -> Result<Self> {
        Adjacency::new(vec![Vec::new(); n])
    }

    pub fn n_grids(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// `Â`, each row averaging over the neighborhood.
    pub fn averaging_matrix(&self) -> DMatrix<f64> {
        let n = self.n_grids();
        let mut a = DMatrix::zeros(n, n);
        for (i, list) in self.neighbors.iter().enumerate() {
            let w = 1.0 / list.len() as f64;
            for &j in list {
                a[(i, j)] = w;
            }
        }
        a
    }
}

/// Weights of the two-block predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorWeights {
    /// `h × m`, applied to the grid's own window
    pub w1: DMatrix<f64>,
    /// `h × m`, applied to the neighborhood mean
    pub v1: DMatrix<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub v2: Vec<f64>,
    pub b2: f64,
    /// Multiplies the history before the first block, divides the output.
    pub input_scale: f64,
}

impl PredictorWeights {
    /// Uniform in `±fan_in^(−1/2)` per layer, output bias 1.
    pub fn init(hidden: usize, window: usize, input_scale: f64, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(SpoError::invalid("hidden", "must be at least 1"));
        }
        if window == 0 {
            return Err(SpoError::invalid("window", "must be at least 1"));
        }
        check_scale(input_scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r1 = 1.0 / ((2 * window) as f64).sqrt();
        let r2 = 1.0 / ((2 * hidden) as f64).sqrt();
        let w1 = DMatrix::from_fn(hidden, window, |_, _| rng.random_range(-r1..=r1));
        let v1 = DMatrix::from_fn(hidden, window, |_, _| rng.random_range(-r1..=r1));
        let b1 = (0..hidden).map(|_| rng.random_range(-r1..=r1)).collect();
        let w2 = (0..hidden).map(|_| rng.random_range(-r2..=r2)).collect();
        let v2 = (0..hidden).map(|_| rng.random_range(-r2..=r2)).collect();
        // inputs are scaled to unit mean, so start the output at that level
        // instead of risking a dead output ReLU
        let b2 = 1.0;
        Ok(PredictorWeights {
            w1,
            v1,
            b1,
            w2,
            v2,
            b2,
            input_scale,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn window(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_params(&self) -> usize {
        2 * self.hidden() * self.window() + 3 * self.hidden() + 1
    }

    /// Flattened as `W₁`, `V₁` (row-major), `b₁`, `w₂`, `v₂`, `b₂`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(row_major(&self.w1));
        out.extend(row_major(&self.v1));
        out.extend(&self.b1);
        out.extend(&self.w2);
        out.extend(&self.v2);
        out.push(self.b2);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat weights", self.n_params(), flat.len())?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(SpoError::NonFinite {
                what: "predictor weights".into(),
            });
        }
        let (h, m) = (self.hidden(), self.window());
        let (rest, b2) = flat.split_at(flat.len() - 1);
        let (w1, rest) = rest.split_at(h * m);
        let (v1, rest) = rest.split_at(h * m);
        let (b1, rest) = rest.split_at(h);
        let (w2, v2) = rest.split_at(h);
        self.w1 = DMatrix::from_row_slice(h, m, w1);
        self.v1 = DMatrix::from_row_slice(h, m, v1);
        self.b1 = b1.to_vec();
        self.w2 = w2.to_vec();
        self.v2 = v2.to_vec();
        self.b2 = b2[0];
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        check_len("v1 rows", self.hidden(), self.v1.nrows())?;
        check_len("v1 columns", self.window(), self.v1.ncols())?;
        check_len("b1", self.hidden(), self.b1.len())?;
        check_len("w2", self.hidden(), self.w2.len())?;
        check_len("v2", self.hidden(), self.v2.len())?;
        check_scale(self.input_scale)?;
        if self.flat().iter().any(|v| !v.is_finite()) {
            return Err(SpoError::NonFinite {
                what: "predictor weights".into(),
            });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (h, m) = (self.hidden(), self.window());
        let entries = [
            ("block1.weight", vec![h, m], row_major(&self.w1)),
            ("block1.neighbor_weight", vec![h, m], row_major(&self.v1)),
            ("block1.bias", vec![h], self.b1.clone()),
            ("block2.weight", vec![1, h], self.w2.clone()),
            ("block2.neighbor_weight", vec![1, h], self.v2.clone()),
            ("block2.bias", vec![1], vec![self.b2]),
        ];
        Checkpoint {
            input_scale: self.input_scale,
            layers: entries
                .into_iter()
                .map(|(name, shape, data)| (name.to_string(), Layer { shape, data }))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let layer = |name: &str| -> Result<&Layer> {
            let l = ckpt.layers.get(name).ok_or_else(|| SpoError::Parse {
                what: "checkpoint".into(),
                message: format!("missing layer `{name}`"),
            })?;
            if l.shape.iter().product::<usize>() != l.data.len() {
                return Err(SpoError::Parse {
                    what: "checkpoint".into(),
                    message: format!("`{name}` shape does not match its data"),
                });
            }
            Ok(l)
        };
        let matrix = |name: &str| -> Result<DMatrix<f64>> {
            let l = layer(name)?;
            if l.shape.len() != 2 {
                return Err(SpoError::Parse {
                    what: "checkpoint".into(),
                    message: format!("`{name}` must be two-dimensional"),
                });
            }
            Ok(DMatrix::from_row_slice(l.shape[0], l.shape[1], &l.data))
        };
        let weights = PredictorWeights {
            w1: matrix("block1.weight")?,
            v1: matrix("block1.neighbor_weight")?,
            b1: layer("block1.bias")?.data.clone(),
            w2: layer("block2.weight")?.data.clone(),
            v2: layer("block2.neighbor_weight")?.data.clone(),
            b2: *layer("block2.bias")?.data.first().ok_or_else(|| SpoError::Parse {
                what: "checkpoint".into(),
                message: "`block2.bias` is empty".into(),
            })?,
            input_scale: ckpt.input_scale,
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| SpoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SpoError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| SpoError::Parse {
            what: path.display().to_string(),
            message: e.to_string(),
        })?;
        PredictorWeights::from_checkpoint(&ckpt)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn check_scale(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(SpoError::invalid("input_scale", format!("must be > 0, got {s}")))
    }
}

/// JSON checkpoint: layer name to shape and row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub input_scale: f64,
    pub layers: BTreeMap<String, Layer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

struct Forward {
    /// `s · history`, `m × N`
    x: DMatrix<f64>,
    /// `X Âᵀ`
    x_avg: DMatrix<f64>,
    /// `h × N`
    z1: DMatrix<f64>,
    h1: DMatrix<f64>,
    /// `H₁ Âᵀ`
    h1_avg: DMatrix<f64>,
    z2: Vec<f64>,
}

fn check_shapes(hist: &HistoryWindow, adj: &Adjacency, w: &PredictorWeights) -> Result<()> {
    check_len("adjacency grids", hist.n_grids(), adj.n_grids())?;
    check_len("history window", w.window(), hist.window())?;
    w.validate()
}

fn forward(hist: &HistoryWindow, a: &DMatrix<f64>, w: &PredictorWeights) -> Forward {
    let x = hist.matrix() * w.input_scale;
    let x_avg = &x * a.transpose();
    let mut z1 = &w.w1 * &x + &w.v1 * &x_avg;
    for mut col in z1.column_iter_mut() {
        for (v, b) in col.iter_mut().zip(&w.b1) {
            *v += b;
        }
    }
    let h1 = z1.map(|v| v.max(0.0));
    let h1_avg = &h1 * a.transpose();
    let w2 = nalgebra::DVector::from_column_slice(&w.w2);
    let v2 = nalgebra::DVector::from_column_slice(&w.v2);
    let z2 = (h1.tr_mul(&w2) + h1_avg.tr_mul(&v2)).iter().map(|z| z + w.b2).collect();
    Forward {
        x,
        x_avg,
        z1,
        h1,
        h1_avg,
        z2,
    }
}

/// Forecast of the next interval, nonnegative.
pub fn predict(hist: &HistoryWindow, adj: &Adjacency, w: &PredictorWeights) -> Result<Vec<f64>> {
    check_shapes(hist, adj, w)?;
    let f = forward(hist, &adj.averaging_matrix(), w);
    Ok(f.z2.iter().map(|z| z.max(0.0) / w.input_scale).collect())
}

/// `‖actual − pred‖²`, summed.
pub fn prediction_loss(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_len("actual", pred.len(), actual.len())?;
    Ok(pred.iter().zip(actual).map(|(p, a)| (a - p) * (a - p)).sum())
}

/// Gradient of `upstreamᵀ · predict(hist)` with respect to the flat weights.
pub fn predictor_vjp(hist: &HistoryWindow, adj: &Adjacency, w: &PredictorWeights, upstream: &[f64]) -> Result<Vec<f64>> {
    check_shapes(hist, adj, w)?;
    check_len("upstream", hist.n_grids(), upstream.len())?;
    let a = adj.averaging_matrix();
    let f = forward(hist, &a, w);
    let dz2 = nalgebra::DVector::from_iterator(
        upstream.len(),
        f.z2
            .iter()
            .zip(upstream)
            .map(|(z, u)| if *z > 0.0 { u / w.input_scale } else { 0.0 }),
    );
    let dw2 = &f.h1 * &dz2;
    let dv2 = &f.h1_avg * &dz2;
    let db2: f64 = dz2.sum();
    let w2 = nalgebra::DVector::from_column_slice(&w.w2);
    let v2 = nalgebra::DVector::from_column_slice(&w.v2);
    // the averaged path goes back through Â
    let dh1 = &w2 * dz2.transpose() + (&v2 * dz2.transpose()) * &a;
    let dz1 = dh1.zip_map(&f.z1, |d, z| if z > 0.0 { d } else { 0.0 });
    let dw1 = &dz1 * f.x.transpose();
    let dv1 = &dz1 * f.x_avg.transpose();
    let mut grad = Vec::with_capacity(w.n_params());
    grad.extend(row_major(&dw1));
    grad.extend(row_major(&dv1));
    grad.extend(dz1.row_iter().map(|r| r.sum()));
    grad.extend(dw2.iter());
    grad.extend(dv2.iter());
    grad.push(db2);
    Ok(grad)
}

/// Last observed interval, the naive forecast.
pub fn persistence_predict(hist: &HistoryWindow) -> Vec<f64> {
    hist.last()
}
