//! The four `spo` subcommands. Each returns a report; the binary prints it
//! and maps errors to exit codes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::admm::{solve, SolveStatus};
use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::datagen::{
    gen_target, incentive_cost_matrix, make_hex_grid, split_dataset, split_fleet, synth_demand, travel_time_matrix,
    DatasetSplit, DemandSeries, HexGrid, TargetSpec, INTERVALS_PER_DAY,
};
use crate::error::{Result, SpoError, StageContext};
use crate::gradcheck::{check_layer, check_predictor, CheckOptions, CheckReport};
use crate::metrics::write_divergence_csv;
use crate::predictor::{HistoryWindow, PredictorWeights};
use crate::qp::KktReport;
use crate::relocation::{feasibility, required_dv_distribution, to_standard_qp, FeasibilityReport, RelocationInstance};
use crate::spo::{
    check_spo_gradient, evaluate_policy, train_pto, train_spo, write_json, write_text, Evaluation, Network, Regime,
    RelocationLayer, SpoConfig,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Reads the configuration recorded in a run's `manifest.json`.
pub fn config_from_manifest(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| SpoError::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SpoError::Parse {
        what: path.display().to_string(),
        message: e.to_string(),
    })?;
    RunConfig::from_toml_str(&manifest.config)
}

/// Generated city and samples for one data seed.
pub struct Dataset {
    pub grid: HexGrid,
    /// Base days followed by the sample days.
    pub series: DemandSeries,
    /// Target per interval of the day.
    pub targets: Vec<Vec<f64>>,
    pub split: DatasetSplit,
    pub network: Network,
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let grid = make_hex_grid(cfg.grid.rows, cfg.grid.cols)?;
    let total_days = d.base_days + d.days;
    let all = synth_demand(&grid, total_days, cfg.data_seed, &d.profile)?;
    let series = split_fleet(&all, d.control_ratio, cfg.data_seed.wrapping_add(1))?;
    let base = series.days(0, d.base_days)?.daily_mean()?;
    let targets = gen_target(&TargetSpec::new(d.target, cfg.data_seed.wrapping_add(2)), &base, &grid)?;
    let split = split_dataset(&series.days(d.base_days, total_days)?, &targets, d.window, d.split)?;
    let network = Network {
        adjacency: grid.adjacency(),
        travel_time: travel_time_matrix(&grid, cfg.grid.speed_kmh)?,
        cost: incentive_cost_matrix(&grid, cfg.grid.unit_cost)?,
        budget: cfg.relocation.budget,
        interval: cfg.relocation.interval_minutes,
    };
    Ok(Dataset {
        grid,
        series,
        targets,
        split,
        network,
    })
}

/// Everything needed to reproduce a run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub spo_version: String,
    pub schema_version: u32,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    /// Resolved configuration, TOML.
    pub config: String,
    /// Output files relative to the run directory, sorted.
    pub files: Vec<String>,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| SpoError::io(path, e))
}

/// The written config records the output directory as `.`, so a run's
/// files do not depend on where it was written.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, mut files: Vec<String>) -> Result<PathBuf> {
    files.sort();
    let cfg = &RunConfig {
        output_dir: PathBuf::from("."),
        ..cfg.clone()
    };
    let manifest = Manifest {
        command: command.to_string(),
        spo_version: VERSION.to_string(),
        schema_version: SCHEMA_VERSION,
        data_seed: cfg.data_seed,
        seeds: cfg.seeds.clone(),
        config: cfg.to_toml(),
        files,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    Ok(path)
}

fn write_targets_csv(path: &Path, targets: &[Vec<f64>]) -> Result<()> {
    let mut out = String::from("slot,grid,target\n");
    for (slot, row) in targets.iter().enumerate() {
        for (g, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{slot},{g},{v}");
        }
    }
    write_text(path, &out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataReport {
    pub dir: PathBuf,
    pub n_grids: usize,
    pub intervals: usize,
    pub rows: usize,
    pub files: Vec<String>,
}

impl std::fmt::Display for GenDataReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "wrote {} grids x {} intervals ({} rows) to {}",
            self.n_grids,
            self.intervals,
            self.rows,
            self.dir.display()
        )?;
        for file in &self.files {
            writeln!(f, "  {file}")?;
        }
        Ok(())
    }
}

/// Writes `demand.csv`, `grid.json` and `target.csv` under the output
/// directory. Same config, same bytes.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenDataReport> {
    cfg.validate()?;
    let data = build_dataset(cfg).stage("generating data")?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    data.series.write_csv(&dir.join("demand.csv"))?;
    data.grid.write_json(&dir.join("grid.json"))?;
    write_targets_csv(&dir.join("target.csv"), &data.targets)?;
    let files: Vec<String> = ["config.toml", "demand.csv", "grid.json", "manifest.json", "target.csv"]
        .map(String::from)
        .to_vec();
    write_manifest(&dir, "gen-data", cfg, files.clone())?;
    Ok(GenDataReport {
        dir,
        n_grids: data.grid.n_grids(),
        intervals: data.series.len(),
        rows: data.series.len() * data.grid.n_grids(),
        files,
    })
}

/// Input of `solve-once`: an instance plus an optional free-vehicle forecast
/// (zero when absent, so the layer aims at the full target).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveInput {
    #[serde(flatten)]
    pub instance: RelocationInstance,
    #[serde(default)]
    pub predicted_free: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    /// Matching objective `½‖A y − (T_a − D̂_f)‖²`.
    pub objective: f64,
    pub last_change: f64,
    /// Residuals of the row-equilibrated problem the solver iterates on.
    pub kkt: KktReport,
    /// Constraint violation per block, in the instance's own units.
    pub feasibility: FeasibilityReport,
    pub spend: f64,
    pub budget: f64,
    /// `flows[i][j]`, origin `i` to destination `j`.
    pub flows: Vec<Vec<f64>>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

impl std::fmt::Display for SolveReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "status       {:?}", self.status)?;
        writeln!(f, "iterations   {}", self.iterations)?;
        writeln!(f, "objective    {:.6e}", self.objective)?;
        writeln!(f, "last change  {:.3e}", self.last_change)?;
        writeln!(
            f,
            "kkt          stationarity {:.3e}  primal {:.3e}  complementarity {:.3e}",
            self.kkt.stationarity, self.kkt.primal_infeasibility, self.kkt.complementarity
        )?;
        writeln!(
            f,
            "violation    supply {:.3e}  time {:.3e}  budget {:.3e}  nonnegativity {:.3e}",
            self.feasibility.supply, self.feasibility.time, self.feasibility.budget, self.feasibility.nonnegativity
        )?;
        writeln!(f, "spend        {:.6} of {}", self.spend, self.budget)?;
        writeln!(f, "flows")?;
        for row in &self.flows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:10.4}")).collect();
            writeln!(f, "  {}", cells.join(" "))?;
        }
        Ok(())
    }
}

pub fn read_solve_input(path: &Path) -> Result<SolveInput> {
    let text = std::fs::read_to_string(path).map_err(|e| SpoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SpoError::Parse {
        what: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Solves one instance with the configured ADMM settings.
pub fn cmd_solve_once(cfg: &RunConfig, input: &SolveInput) -> Result<SolveReport> {
    cfg.admm.validate()?;
    let inst = &input.instance;
    inst.validate()?;
    let forecast = input.predicted_free.clone().unwrap_or_else(|| vec![0.0; inst.n_grids]);
    let required = required_dv_distribution(&inst.target, &forecast)?;
    let raw = to_standard_qp(inst, &required)?;
    let qp = raw.equilibrated();
    let sol = solve(&qp, &cfg.admm)?;
    let spend = inst.cost.iter().flatten().zip(&sol.y).map(|(c, y)| c * y).sum();
    let n = inst.n_grids;
    Ok(SolveReport {
        status: sol.status,
        iterations: sol.iterations,
        objective: raw.objective_unshifted(&sol.y),
        last_change: sol.last_change,
        kkt: sol.kkt,
        feasibility: feasibility(inst, &sol.y)?,
        spend,
        budget: inst.budget,
        flows: sol.y.chunks(n).map(<[f64]>::to_vec).collect(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckReport::passed)
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {}: max rel err {:.3e} (tol {:.0e}), {} of {} checked, {} near a kink, {} not converged",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_error,
                c.tolerance,
                c.checked,
                c.cases,
                c.skipped_degenerate,
                c.skipped_nonconverged
            )?;
        }
        Ok(())
    }
}

/// Finite-difference checks of the layer Jacobian, the predictor VJP and the
/// integrated loss gradient on a random two-grid toy set.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let g = &cfg.gradcheck;
    let opts = CheckOptions {
        eps: g.eps,
        tolerance: g.tolerance,
        ..CheckOptions::default()
    };
    let layer = check_layer(g.n_grids, g.instances, g.seed, &cfg.admm, &opts).stage("layer check")?;
    let predictor =
        check_predictor(g.n_grids, g.hidden, g.window, g.instances, g.seed, &opts).stage("predictor check")?;
    let e2e = toy_gradient_check(cfg, &opts).stage("integrated loss check")?;
    Ok(GradcheckReport {
        checks: vec![layer, predictor, e2e],
    })
}

/// Two-grid, three-sample sets with random counts, one per case. Cases
/// where a solve ends near a kink are skipped.
fn toy_gradient_check(cfg: &RunConfig, opts: &CheckOptions) -> Result<CheckReport> {
    use rand::{Rng, SeedableRng};
    let g = &cfg.gradcheck;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(g.seed);
    let net = Network {
        adjacency: crate::predictor::Adjacency::new(vec![vec![1], vec![0]])?,
        travel_time: vec![vec![0.0, 10.0], vec![10.0, 0.0]],
        cost: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        budget: 8.0,
        interval: 15.0,
    };
    let spo_cfg = SpoConfig {
        hidden: g.hidden,
        ..cfg.train.clone()
    };
    let admm = crate::admm::AdmmConfig {
        xi: cfg.admm.xi.min(1e-6),
        ..cfg.admm
    };
    let mut combined: Option<CheckReport> = None;
    for case in 0..g.instances {
        let mut samples = Vec::new();
        for interval in 0..3 {
            let rows: Vec<Vec<f64>> = (0..g.window)
                .map(|_| (0..2).map(|_| rng.random_range(2.0..20.0)).collect())
                .collect();
            samples.push(crate::datagen::Sample {
                interval,
                history: HistoryWindow::new(&rows)?,
                supply: (0..2).map(|_| rng.random_range(0.0..15.0)).collect(),
                actual_free: (0..2).map(|_| rng.random_range(2.0..20.0)).collect(),
                target: (0..2).map(|_| rng.random_range(5.0..30.0)).collect(),
            });
        }
        let w = PredictorWeights::init(g.hidden, g.window, 0.1, g.seed.wrapping_add(case as u64))?;
        let r = check_spo_gradient(&samples, &net, &w, &spo_cfg, &admm, opts)?;
        combined = Some(match combined {
            None => r,
            Some(mut acc) => {
                acc.cases += r.cases;
                acc.checked += r.checked;
                acc.skipped_degenerate += r.skipped_degenerate;
                acc.skipped_nonconverged += r.skipped_nonconverged;
                acc.max_rel_error = acc.max_rel_error.max(r.max_rel_error);
                acc
            }
        });
    }
    let mut report = combined.expect("at least one case");
    report.name = "integrated loss gradient, N = 2, 3 samples".into();
    Ok(report)
}

/// One regime's test metrics for one training seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeResult {
    pub seed: u64,
    pub regime: Regime,
    pub rmse: f64,
    pub smape: f64,
    pub feasibility: FeasibilityReport,
    pub skipped: usize,
    pub budget_active: usize,
    pub evaluated: usize,
    pub mean_iterations: f64,
}

/// Regime × {RMSE, SMAPE}, averaged over training seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub regime: Regime,
    pub rmse: f64,
    pub smape: f64,
    pub rmse_std: f64,
    pub smape_std: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    #[serde(skip)]
    pub dir: PathBuf,
    pub table: Vec<ComparisonRow>,
    pub runs: Vec<RegimeResult>,
    pub test_intervals: usize,
}

impl ExperimentReport {
    pub fn row(&self, regime: Regime) -> Option<&ComparisonRow> {
        self.table.iter().find(|r| r.regime == regime)
    }
}

impl std::fmt::Display for ExperimentReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let seeds = self.runs.iter().map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().len();
        writeln!(f, "{} test intervals, {} seed(s)", self.test_intervals, seeds)?;
        writeln!(f, "{:<8} {:>10} {:>10} {:>10}", "regime", "RMSE", "SMAPE", "violation")?;
        for r in &self.table {
            writeln!(f, "{:<8} {:>10.4} {:>10.3} {:>10.2e}", r.regime.label(), r.rmse, r.smape, r.max_violation)?;
        }
        write!(f, "results in {}", self.dir.display())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains SPO-A and PTO for every seed, evaluates the configured regimes on
/// the test split and writes the comparison table, training curves and
/// divergence tables. Seeds run one after another; each writes into its
/// own `seed_<s>` directory.
pub fn cmd_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = build_dataset(cfg).stage("generating data")?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    let mut files = vec!["comparison.csv".to_string(), "config.toml".into(), "manifest.json".into(), "runs.csv".into(), "summary.json".into()];
    let eval_layer = RelocationLayer::new(&data.network, &cfg.eval_admm).stage("building evaluation layer")?;
    let split = &data.split;
    let needs_spo = cfg.regimes.contains(&Regime::SpoA);
    let needs_pto = cfg.regimes.contains(&Regime::Pto);
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir_name = format!("seed_{seed}");
        let seed_dir = dir.join(&seed_dir_name);
        create_dir(&seed_dir)?;
        let train_cfg = SpoConfig {
            seed,
            ..cfg.train.clone()
        };
        let mut trained: Vec<(Regime, PredictorWeights)> = Vec::new();
        for (regime, needed) in [(Regime::SpoA, needs_spo), (Regime::Pto, needs_pto)] {
            if !needed {
                continue;
            }
            let stage = format!("training {regime} (seed {seed})");
            let (weights, record) = match regime {
                Regime::SpoA => train_spo(&split.train, &split.val, &data.network, &train_cfg, &cfg.admm),
                _ => train_pto(&split.train, &split.val, &data.network, &train_cfg, &cfg.admm),
            }
            .stage(&stage)?;
            let tag = regime_tag(regime);
            record.write_csv(&seed_dir.join(format!("train_{tag}.csv")))?;
            record.write_json(&seed_dir.join(format!("train_{tag}.json")))?;
            weights.save(&seed_dir.join(format!("weights_{tag}.json")))?;
            for ext in ["csv", "json"] {
                files.push(format!("{seed_dir_name}/train_{tag}.{ext}"));
            }
            files.push(format!("{seed_dir_name}/weights_{tag}.json"));
            trained.push((regime, weights));
        }
        let mut evaluations: Vec<Evaluation> = Vec::new();
        for &regime in &cfg.regimes {
            let weights = trained.iter().find(|(r, _)| *r == regime).map(|(_, w)| w);
            let eval = evaluate_policy(
                regime,
                weights,
                &split.test,
                &data.network,
                &eval_layer,
                cfg.train.eval_nonconvergence,
            )
            .stage(&format!("evaluating {regime} (seed {seed})"))?;
            let name = format!("divergence_{}.csv", regime_tag(regime));
            write_divergence_csv(&seed_dir.join(&name), &eval.metrics.intervals, &eval.matched, &eval.targets)?;
            files.push(format!("{seed_dir_name}/{name}"));
            runs.push(RegimeResult {
                seed,
                regime,
                rmse: eval.metrics.rmse,
                smape: eval.metrics.smape,
                feasibility: eval.feasibility,
                skipped: eval.skipped,
                budget_active: eval.budget_active,
                evaluated: eval.matched.len(),
                mean_iterations: eval.mean_iterations,
            });
            evaluations.push(eval);
        }
        let metrics: Vec<_> = evaluations.iter().map(|e| (e.regime, &e.metrics)).collect();
        write_json(&seed_dir.join("metrics.json"), &metrics)?;
        files.push(format!("{seed_dir_name}/metrics.json"));
    }
    let table: Vec<ComparisonRow> = cfg
        .regimes
        .iter()
        .map(|&regime| {
            let rows: Vec<&RegimeResult> = runs.iter().filter(|r| r.regime == regime).collect();
            let (rmse, rmse_std) = mean_std(&rows.iter().map(|r| r.rmse).collect::<Vec<_>>());
            let (smape, smape_std) = mean_std(&rows.iter().map(|r| r.smape).collect::<Vec<_>>());
            ComparisonRow {
                regime,
                rmse,
                smape,
                rmse_std,
                smape_std,
                max_violation: rows.iter().map(|r| r.feasibility.max()).fold(0.0, f64::max),
            }
        })
        .collect();
    let mut csv = String::from("regime,rmse,smape,rmse_std,smape_std,max_violation\n");
    for r in &table {
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.regime, r.rmse, r.smape, r.rmse_std, r.smape_std, r.max_violation);
    }
    write_text(&dir.join("comparison.csv"), &csv)?;
    let mut per_run = String::from("seed,regime,rmse,smape,max_violation,skipped,budget_active,evaluated,mean_iterations\n");
    for r in &runs {
        let _ = writeln!(
            per_run,
            "{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.regime,
            r.rmse,
            r.smape,
            r.feasibility.max(),
            r.skipped,
            r.budget_active,
            r.evaluated,
            r.mean_iterations
        );
    }
    write_text(&dir.join("runs.csv"), &per_run)?;
    let report = ExperimentReport {
        dir: dir.clone(),
        table,
        runs,
        test_intervals: split.test.len(),
    };
    write_json(&dir.join("summary.json"), &report)?;
    write_manifest(&dir, "experiment", cfg, files)?;
    Ok(report)
}

fn regime_tag(regime: Regime) -> &'static str {
    match regime {
        Regime::SpoA => "spo_a",
        Regime::Pto => "pto",
        Regime::Nop => "nop",
        Regime::Don => "don",
    }
}

/// Rows of a generated demand file: one per interval and grid.
pub fn expected_rows(cfg: &RunConfig) -> usize {
    (cfg.data.base_days + cfg.data.days) * INTERVALS_PER_DAY * cfg.grid.rows * cfg.grid.cols
}
