//! Integrated loss, end-to-end training and the evaluation regimes.
//!
//! Per sample the predictor forecasts free vehicles `D̂_f`, the relocation
//! layer places dedicated vehicles against `T_a − D̂_f`, and the matched
//! distribution `A y + D_f` (actual free vehicles) is scored against `T_a`.
//! Training backpropagates the matching loss through the unrolled solver
//! with a reverse-mode tape, so each sample costs one extra pass over the
//! recorded iterations instead of one per parameter.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{solve_recorded, solve_with_system, AdmmConfig, Solution};
use crate::datagen::Sample;
use crate::error::{check_len, Result, SpoError};
use crate::metrics::Metrics;
use crate::predictor::{
    persistence_predict, predict, prediction_loss, predictor_vjp, Adjacency, PredictorWeights,
};
use crate::qp::{assemble_penalty_system, PenaltySystem, StandardQP};
use crate::relocation::{
    aggregate_arrivals, build_sparse_a, feasibility, matching_distribution, required_dv_distribution, to_standard_qp,
    FeasibilityReport, RelocationInstance,
};

/// `‖target − matched‖²`
pub fn matching_loss(target: &[f64], matched: &[f64]) -> Result<f64> {
    check_len("matched", target.len(), matched.len())?;
    Ok(target.iter().zip(matched).map(|(t, d)| (t - d) * (t - d)).sum())
}

pub fn spo_loss(l1: f64, l2: f64, cfg: &SpoConfig) -> f64 {
    cfg.w1 * l1 + cfg.w2 * l2
}

/// What to do with an inner solve that hit `k_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonConvergencePolicy {
    /// Drop the sample and count it.
    Skip,
    /// Use the last iterate; the unrolled gradient is still exact for it.
    AcceptLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpoConfig {
    pub w1: f64,
    pub w2: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub seed: u64,
    pub train_nonconvergence: NonConvergencePolicy,
    pub eval_nonconvergence: NonConvergencePolicy,
}

impl Default for SpoConfig {
    fn default() -> Self {
        SpoConfig {
            w1: 1.0,
            w2: 1.0,
            learning_rate: 0.01,
            weight_decay: 0.001,
            batch_size: 64,
            epochs: 20,
            hidden: 16,
            seed: 0,
            train_nonconvergence: NonConvergencePolicy::AcceptLast,
            eval_nonconvergence: NonConvergencePolicy::Skip,
        }
    }
}

impl SpoConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w1", self.w1), ("w2", self.w2), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SpoError::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.w1 == 0.0 && self.w2 == 0.0 {
            return Err(SpoError::invalid("w1, w2", "must not both be 0"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(SpoError::invalid(
                "learning_rate",
                format!("must be finite and >= 0, got {}", self.learning_rate),
            ));
        }
        if self.batch_size == 0 {
            return Err(SpoError::invalid("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(SpoError::invalid("epochs", "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(SpoError::invalid("hidden", "must be at least 1"));
        }
        Ok(())
    }
}

/// Adagrad with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adagrad {
    learning_rate: f64,
    weight_decay: f64,
    accum: Vec<f64>,
}

impl Adagrad {
    const EPS: f64 = 1e-10;

    pub fn new(n_params: usize, learning_rate: f64, weight_decay: f64) -> Self {
        Adagrad {
            learning_rate,
            weight_decay,
            accum: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((p, g), a) in params.iter_mut().zip(grad).zip(&mut self.accum) {
            let g = g + self.weight_decay * *p;
            *a += g * g;
            *p -= self.learning_rate * g / (a.sqrt() + Self::EPS);
        }
    }
}

/// Everything about the city that does not change between samples.
#[derive(Debug, Clone)]
pub struct Network {
    pub adjacency: Adjacency,
    pub travel_time: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
    pub budget: f64,
    pub interval: f64,
}

impl Network {
    pub fn n_grids(&self) -> usize {
        self.adjacency.n_grids()
    }

    pub fn instance(&self, sample: &Sample) -> RelocationInstance {
        RelocationInstance {
            n_grids: self.n_grids(),
            supply: sample.supply.clone(),
            target: sample.target.clone(),
            travel_time: self.travel_time.clone(),
            cost: self.cost.clone(),
            budget: self.budget,
            interval: self.interval,
        }
    }
}

/// The relocation layer shared by every sample: the row-equilibrated QP
/// skeleton, its factorized penalty system and `∂q/∂D̂_f = Aᵀ`.
pub struct RelocationLayer {
    base: StandardQP,
    system: PenaltySystem,
    dq_dforecast: DMatrix<f64>,
    admm: AdmmConfig,
}

/// Result of one layer evaluation.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub solution: Solution,
    pub arrivals: Vec<f64>,
    pub qp: StandardQP,
}

impl RelocationLayer {
    pub fn new(net: &Network, admm: &AdmmConfig) -> Result<Self> {
        admm.validate()?;
        let n = net.n_grids();
        let probe = RelocationInstance {
            n_grids: n,
            supply: vec![0.0; n],
            target: vec![0.0; n],
            travel_time: net.travel_time.clone(),
            cost: net.cost.clone(),
            budget: net.budget,
            interval: net.interval,
        };
        let base = to_standard_qp(&probe, &vec![0.0; n])?.equilibrated();
        let system = assemble_penalty_system(&base, admm.rho)?;
        Ok(RelocationLayer {
            base,
            system,
            dq_dforecast: build_sparse_a(n).transpose().to_dense(),
            admm: *admm,
        })
    }

    pub fn admm(&self) -> &AdmmConfig {
        &self.admm
    }

    /// QP for one sample given the forecast of free vehicles.
    pub fn qp_for(&self, sample: &Sample, forecast: &[f64]) -> Result<StandardQP> {
        let required = required_dv_distribution(&sample.target, forecast)?;
        let n = required.len();
        check_len("supply", n, sample.supply.len())?;
        let mut q = vec![0.0; n * n];
        for qi in q.chunks_mut(n) {
            for (j, v) in qi.iter_mut().enumerate() {
                *v = -required[j];
            }
        }
        let offset = 0.5 * required.iter().map(|v| v * v).sum::<f64>();
        self.base.with_linear_and_supply(q, sample.supply.clone(), offset)
    }

    pub fn solve(&self, sample: &Sample, forecast: &[f64]) -> Result<LayerOutput> {
        let qp = self.qp_for(sample, forecast)?;
        let solution = solve_with_system(&qp, &self.system, &self.admm)?;
        let arrivals = aggregate_arrivals(&solution.y)?;
        Ok(LayerOutput { solution, arrivals, qp })
    }
}

/// One epoch of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample prediction loss on the training split.
    pub l1: f64,
    /// Mean per-sample matching loss on the training split (0 when not solved).
    pub l2: f64,
    pub l_spo: f64,
    /// Mean per-sample integrated loss on the validation split.
    pub val_l_spo: f64,
    pub val_rmse: f64,
    pub val_smape: f64,
    /// Mean ADMM iterations per training solve.
    pub mean_iterations: f64,
    pub nonconverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were returned.
    pub best_epoch: usize,
}

impl TrainRecord {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,l1,l2,l_spo,val_rmse,val_smape,val_l_spo,mean_iterations,nonconverged\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.epoch, e.l1, e.l2, e.l_spo, e.val_rmse, e.val_smape, e.val_l_spo, e.mean_iterations, e.nonconverged
            ));
        }
        write_text(path, &out)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| SpoError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| SpoError::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| SpoError::Parse {
        what: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_text(path, &text)
}

/// Loss terms and weight gradient of one sample.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub l1: f64,
    pub l2: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final-sweep distance of the slacks to the ReLU kink (∞ without a solve).
    pub kink_margin: f64,
}

/// `ℒ_SPO` of one sample and its gradient with respect to the flat
/// predictor weights. With `w₂ = 0` no solve is run.
pub fn sample_gradient(
    sample: &Sample,
    net: &Network,
    layer: &RelocationLayer,
    weights: &PredictorWeights,
    cfg: &SpoConfig,
) -> Result<SampleGradient> {
    let pred = predict(&sample.history, &net.adjacency, weights)?;
    let l1 = prediction_loss(&pred, &sample.actual_free)?;
    let mut upstream: Vec<f64> = pred
        .iter()
        .zip(&sample.actual_free)
        .map(|(p, a)| cfg.w1 * 2.0 * (p - a))
        .collect();
    let (mut l2, mut iterations, mut converged, mut kink_margin) = (0.0, 0, true, f64::INFINITY);
    if cfg.w2 != 0.0 {
        let qp = layer.qp_for(sample, &pred)?;
        let (solution, tape) = solve_recorded(&qp, &layer.system, &layer.admm)?;
        let arrivals = aggregate_arrivals(&solution.y)?;
        let matched = matching_distribution(&arrivals, &sample.actual_free)?;
        l2 = matching_loss(&sample.target, &matched)?;
        // ∂ℒ₂/∂y = Aᵀ · 2(D_a − T_a)
        let n = matched.len();
        let residual: Vec<f64> = matched.iter().zip(&sample.target).map(|(d, t)| 2.0 * (d - t)).collect();
        let dl_dy: Vec<f64> = (0..n * n).map(|k| residual[k % n]).collect();
        let dl_dforecast = tape.vjp(&qp, &layer.system, &layer.dq_dforecast, &dl_dy)?;
        for (u, g) in upstream.iter_mut().zip(&dl_dforecast) {
            *u += cfg.w2 * g;
        }
        iterations = solution.iterations;
        converged = solution.converged();
        kink_margin = solution.kink_margin;
    }
    let grad = predictor_vjp(&sample.history, &net.adjacency, weights, &upstream)?;
    Ok(SampleGradient {
        l1,
        l2,
        grad,
        iterations,
        converged,
        kink_margin,
    })
}

/// Input scale that brings the training history to unit mean.
pub fn fit_input_scale(train: &[Sample]) -> f64 {
    let (sum, count) = train.iter().fold((0.0, 0usize), |(s, c), smp| {
        (s + smp.actual_free.iter().sum::<f64>(), c + smp.actual_free.len())
    });
    if count == 0 || sum <= 0.0 {
        1.0
    } else {
        count as f64 / sum
    }
}

/// End-to-end training on `w₁ℒ₁ + w₂ℒ₂`. Returns the weights of the epoch
/// with the lowest validation `ℒ_SPO`.
pub fn train_spo(
    train: &[Sample],
    val: &[Sample],
    net: &Network,
    cfg: &SpoConfig,
    admm: &AdmmConfig,
) -> Result<(PredictorWeights, TrainRecord)> {
    cfg.validate()?;
    let first = train.first().ok_or(SpoError::Empty("training split"))?;
    if val.is_empty() {
        return Err(SpoError::Empty("validation split"));
    }
    check_len("history grids", net.n_grids(), first.history.n_grids())?;
    let layer = RelocationLayer::new(net, admm)?;
    let mut weights = PredictorWeights::init(cfg.hidden, first.history.window(), fit_input_scale(train), cfg.seed)?;
    let mut opt = Adagrad::new(weights.n_params(), cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut record = TrainRecord {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
    };
    let mut best = (f64::INFINITY, weights.clone());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut l1, mut l2, mut iters, mut solved, mut nonconverged, mut used) = (0.0, 0.0, 0usize, 0usize, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<SampleGradient>> = batch
                .par_iter()
                .map(|&i| sample_gradient(&train[i], net, &layer, &weights, cfg))
                .collect();
            let mut grad = vec![0.0; weights.n_params()];
            let mut in_batch = 0usize;
            for r in results {
                let r = r?;
                if cfg.w2 != 0.0 {
                    solved += 1;
                    iters += r.iterations;
                }
                if !r.converged {
                    nonconverged += 1;
                    if cfg.train_nonconvergence == NonConvergencePolicy::Skip {
                        continue;
                    }
                }
                l1 += r.l1;
                l2 += r.l2;
                for (g, v) in grad.iter_mut().zip(&r.grad) {
                    *g += v;
                }
                in_batch += 1;
            }
            if in_batch == 0 {
                continue;
            }
            used += in_batch;
            grad.iter_mut().for_each(|g| *g /= in_batch as f64);
            let mut flat = weights.flat();
            opt.step(&mut flat, &grad);
            weights.set_flat(&flat)?;
        }
        let n_used = used.max(1) as f64;
        let val_eval = validation(val, net, &layer, &weights, cfg)?;
        let entry = EpochRecord {
            epoch,
            l1: l1 / n_used,
            l2: l2 / n_used,
            l_spo: spo_loss(l1 / n_used, l2 / n_used, cfg),
            val_l_spo: val_eval.0,
            val_rmse: val_eval.1.rmse,
            val_smape: val_eval.1.smape,
            mean_iterations: if solved == 0 { 0.0 } else { iters as f64 / solved as f64 },
            nonconverged,
        };
        if entry.val_l_spo < best.0 {
            best = (entry.val_l_spo, weights.clone());
            record.best_epoch = epoch;
        }
        record.epochs.push(entry);
    }
    Ok((best.1, record))
}

/// Two-stage baseline: trains on `ℒ₁` alone, never calling the solver.
pub fn train_pto(
    train: &[Sample],
    val: &[Sample],
    net: &Network,
    cfg: &SpoConfig,
    admm: &AdmmConfig,
) -> Result<(PredictorWeights, TrainRecord)> {
    let cfg = SpoConfig {
        w1: 1.0,
        w2: 0.0,
        ..cfg.clone()
    };
    train_spo(train, val, net, &cfg, admm)
}

/// Mean validation `ℒ_SPO` plus matching metrics of the relocated fleet.
fn validation(
    val: &[Sample],
    net: &Network,
    layer: &RelocationLayer,
    weights: &PredictorWeights,
    cfg: &SpoConfig,
) -> Result<(f64, Metrics)> {
    let outcomes: Vec<Result<(f64, f64, Vec<f64>)>> = val
        .par_iter()
        .map(|s| {
            let pred = predict(&s.history, &net.adjacency, weights)?;
            let l1 = prediction_loss(&pred, &s.actual_free)?;
            let out = layer.solve(s, &pred)?;
            let matched = matching_distribution(&out.arrivals, &s.actual_free)?;
            let l2 = matching_loss(&s.target, &matched)?;
            Ok((l1, l2, matched))
        })
        .collect();
    let mut loss = 0.0;
    let mut matched = Vec::with_capacity(val.len());
    for o in outcomes {
        let (l1, l2, m) = o?;
        loss += spo_loss(l1, l2, cfg);
        matched.push(m);
    }
    let targets: Vec<Vec<f64>> = val.iter().map(|s| s.target.clone()).collect();
    let metrics = Metrics::from_rows(val.iter().map(|s| s.interval).collect(), &matched, &targets)?;
    Ok((loss / val.len() as f64, metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "SPO-A")]
    SpoA,
    #[serde(rename = "PTO")]
    Pto,
    #[serde(rename = "NOP")]
    Nop,
    #[serde(rename = "DON")]
    Don,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::SpoA, Regime::Pto, Regime::Nop, Regime::Don];

    pub fn label(self) -> &'static str {
        match self {
            Regime::SpoA => "SPO-A",
            Regime::Pto => "PTO",
            Regime::Nop => "NOP",
            Regime::Don => "DON",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Regime {
    type Err = SpoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('_', "-").as_str() {
            "SPO-A" | "SPO" => Ok(Regime::SpoA),
            "PTO" => Ok(Regime::Pto),
            "NOP" => Ok(Regime::Nop),
            "DON" => Ok(Regime::Don),
            _ => Err(SpoError::invalid("regime", format!("unknown regime `{s}`"))),
        }
    }
}

/// Where the forecast of free vehicles comes from.
#[derive(Debug, Clone, Copy)]
pub enum Forecast<'a> {
    Model(&'a PredictorWeights),
    Persistence,
    /// No relocation at all.
    None,
}

impl Forecast<'_> {
    fn predict(&self, sample: &Sample, adj: &Adjacency) -> Result<Option<Vec<f64>>> {
        match self {
            Forecast::Model(w) => predict(&sample.history, adj, w).map(Some),
            Forecast::Persistence => Ok(Some(persistence_predict(&sample.history))),
            Forecast::None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub regime: Regime,
    pub metrics: Metrics,
    /// Matched distribution per evaluated interval.
    pub matched: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    /// Worst constraint violation over all evaluated plans.
    pub feasibility: FeasibilityReport,
    pub skipped: usize,
    /// Plans spending at least 99.9% of the budget.
    pub budget_active: usize,
    pub mean_iterations: f64,
}

/// Matched distribution, plan feasibility, iterations, budget active.
type PlanOutcome = (Vec<f64>, FeasibilityReport, usize, bool);

/// Evaluates one regime over `samples`. The forecast for SPO-A and PTO is
/// the given model; NOP uses persistence and DON leaves the fleet in place.
pub fn evaluate_policy(
    regime: Regime,
    weights: Option<&PredictorWeights>,
    samples: &[Sample],
    net: &Network,
    layer: &RelocationLayer,
    policy: NonConvergencePolicy,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(SpoError::Empty("evaluation split"));
    }
    let forecast = match regime {
        Regime::SpoA | Regime::Pto => Forecast::Model(
            weights.ok_or_else(|| SpoError::invalid("weights", format!("{regime} needs trained weights")))?,
        ),
        Regime::Nop => Forecast::Persistence,
        Regime::Don => Forecast::None,
    };
    let outcomes: Vec<Result<Option<PlanOutcome>>> = samples
        .par_iter()
        .map(|s| {
            let Some(pred) = forecast.predict(s, &net.adjacency)? else {
                // dedicated vehicles stay where they are
                let matched = matching_distribution(&s.supply, &s.actual_free)?;
                return Ok(Some((matched, FeasibilityReport::default(), 0, false)));
            };
            let out = layer.solve(s, &pred)?;
            if !out.solution.converged() && policy == NonConvergencePolicy::Skip {
                return Ok(None);
            }
            let feas = feasibility(&net.instance(s), &out.solution.y)?;
            let matched = matching_distribution(&out.arrivals, &s.actual_free)?;
            let spend: f64 = net
                .cost
                .iter()
                .flatten()
                .zip(&out.solution.y)
                .map(|(c, y)| c * y)
                .sum();
            let active = spend >= 0.999 * net.budget;
            Ok(Some((matched, feas, out.solution.iterations, active)))
        })
        .collect();
    let mut matched = Vec::new();
    let mut targets = Vec::new();
    let mut intervals = Vec::new();
    let mut worst = FeasibilityReport::default();
    let (mut skipped, mut iters, mut solved, mut budget_active) = (0, 0usize, 0usize, 0usize);
    for (s, o) in samples.iter().zip(outcomes) {
        match o? {
            None => skipped += 1,
            Some((m, f, it, active)) => {
                worst = worst.worst(&f);
                budget_active += usize::from(active);
                iters += it;
                if it > 0 {
                    solved += 1;
                }
                matched.push(m);
                targets.push(s.target.clone());
                intervals.push(s.interval);
            }
        }
    }
    if matched.is_empty() {
        return Err(SpoError::Empty("converged evaluation intervals"));
    }
    let metrics = Metrics::from_rows(intervals, &matched, &targets)?;
    Ok(Evaluation {
        regime,
        metrics,
        matched,
        targets,
        feasibility: worst,
        skipped,
        budget_active,
        mean_iterations: if solved == 0 { 0.0 } else { iters as f64 / solved as f64 },
    })
}

/// Mean `ℒ_SPO` over `samples` with every inner solve run for exactly the
/// given number of sweeps.
fn unrolled_loss(
    samples: &[Sample],
    iterations: &[usize],
    net: &Network,
    layer: &RelocationLayer,
    weights: &PredictorWeights,
    cfg: &SpoConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (s, &k) in samples.iter().zip(iterations) {
        let pred = predict(&s.history, &net.adjacency, weights)?;
        let l1 = prediction_loss(&pred, &s.actual_free)?;
        let l2 = if cfg.w2 != 0.0 {
            let qp = layer.qp_for(s, &pred)?;
            let y = crate::admm::solve_fixed_iterations(&qp, &layer.system, k)?.y;
            let matched = matching_distribution(&aggregate_arrivals(&y)?, &s.actual_free)?;
            matching_loss(&s.target, &matched)?
        } else {
            0.0
        };
        total += spo_loss(l1, l2, cfg);
    }
    Ok(total / samples.len() as f64)
}

/// Gradient of the mean `ℒ_SPO` over `samples` against central differences
/// of the same unrolled computation.
pub fn check_spo_gradient(
    samples: &[Sample],
    net: &Network,
    weights: &PredictorWeights,
    cfg: &SpoConfig,
    admm: &AdmmConfig,
    opts: &crate::gradcheck::CheckOptions,
) -> Result<crate::gradcheck::CheckReport> {
    use crate::gradcheck::{central_difference_scalar, max_relative_error, CheckReport};
    if samples.is_empty() {
        return Err(SpoError::Empty("gradient check samples"));
    }
    let layer = RelocationLayer::new(net, admm)?;
    let mut report = CheckReport {
        name: format!("integrated loss gradient, N = {}, {} samples", net.n_grids(), samples.len()),
        cases: 1,
        checked: 0,
        skipped_degenerate: 0,
        skipped_nonconverged: 0,
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
    };
    let mut analytic = vec![0.0; weights.n_params()];
    let mut iterations = Vec::with_capacity(samples.len());
    for s in samples {
        let g = sample_gradient(s, net, &layer, weights, cfg)?;
        if !g.converged {
            report.skipped_nonconverged = 1;
            return Ok(report);
        }
        if g.kink_margin < opts.kink_margin {
            report.skipped_degenerate = 1;
            return Ok(report);
        }
        iterations.push(g.iterations);
        for (a, v) in analytic.iter_mut().zip(&g.grad) {
            *a += v / samples.len() as f64;
        }
    }
    let mut failure = None;
    let mut probe = weights.clone();
    let fd = central_difference_scalar(
        |p| {
            probe.set_flat(p).expect("same shape");
            unrolled_loss(samples, &iterations, net, &layer, &probe, cfg).unwrap_or_else(|e| {
                failure = Some(e);
                0.0
            })
        },
        &weights.flat(),
        opts.eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    report.max_rel_error = max_relative_error(&analytic, &fd, opts.floor);
    report.checked = 1;
    Ok(report)
}
