//! Run configuration: a TOML file with an explicit schema version, overridden
//! by `key.path=value` pairs from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::admm::AdmmConfig;
use crate::datagen::{DemandProfile, TargetKind, INTERVAL_MINUTES};
use crate::error::{Result, SpoError};
use crate::spo::{Regime, SpoConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    /// Seeds demand, fleet split and target. Fixed across training seeds.
    pub data_seed: u64,
    /// One training run per seed.
    pub seeds: Vec<u64>,
    pub regimes: Vec<Regime>,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub relocation: RelocationConfig,
    pub train: SpoConfig,
    /// Inner solver during training and validation.
    pub admm: AdmmConfig,
    /// Inner solver for the reported test plans.
    pub eval_admm: AdmmConfig,
    pub gradcheck: GradcheckConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    pub speed_kmh: f64,
    /// Incentive per hexagon step moved.
    pub unit_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Leading days whose daily mean shapes the target; not used as samples.
    pub base_days: usize,
    /// Days turned into train/validation/test samples.
    pub days: usize,
    /// Share γ of dedicated vehicles.
    pub control_ratio: f64,
    pub window: usize,
    pub split: [f64; 3],
    pub target: TargetKind,
    pub profile: DemandProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelocationConfig {
    /// Incentive budget R per interval.
    pub budget: f64,
    pub interval_minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub n_grids: usize,
    pub instances: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub hidden: usize,
    pub window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            output_dir: PathBuf::from("runs/reference"),
            data_seed: 0,
            seeds: vec![0, 1, 2],
            regimes: Regime::ALL.to_vec(),
            grid: GridConfig::default(),
            data: DataConfig::default(),
            relocation: RelocationConfig::default(),
            train: SpoConfig {
                epochs: 40,
                ..SpoConfig::default()
            },
            admm: AdmmConfig::default(),
            eval_admm: AdmmConfig {
                xi: 1e-4,
                k_max: 20_000,
                ..AdmmConfig::default()
            },
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            rows: 4,
            cols: 4,
            speed_kmh: 20.0,
            unit_cost: 1.0,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            base_days: 7,
            days: 14,
            control_ratio: 0.6,
            window: 12,
            split: [0.8, 0.1, 0.1],
            target: TargetKind::Uniform,
            profile: DemandProfile::default(),
        }
    }
}

impl Default for RelocationConfig {
    fn default() -> Self {
        RelocationConfig {
            budget: 400.0,
            interval_minutes: INTERVAL_MINUTES,
        }
    }
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            n_grids: 4,
            instances: 10,
            eps: 1e-4,
            tolerance: 1e-3,
            seed: 0,
            hidden: 6,
            window: 4,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| SpoError::io(p, e))?;
                parse_table(&text, &p.display().to_string())?
            }
            None => toml::Table::try_from(RunConfig::default()).expect("default config serializes"),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        Self::from_table(table)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text, "config")?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        match table.get("schema_version") {
            None => return Err(SpoError::invalid("schema_version", "missing")),
            Some(toml::Value::Integer(v)) if *v == i64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(SpoError::invalid(
                    "schema_version",
                    format!("expected {SCHEMA_VERSION}, got {v}"),
                ))
            }
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| SpoError::Parse {
            what: "config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.grid.rows == 0 || self.grid.cols == 0 {
            return Err(SpoError::invalid("grid", "rows and cols must be at least 1"));
        }
        positive("grid.speed_kmh", self.grid.speed_kmh)?;
        if !(self.grid.unit_cost >= 0.0 && self.grid.unit_cost.is_finite()) {
            return Err(SpoError::invalid("grid.unit_cost", "must be >= 0"));
        }
        if !(self.data.control_ratio > 0.0 && self.data.control_ratio < 1.0) {
            return Err(SpoError::invalid(
                "data.control_ratio",
                format!("must be in (0, 1), got {}", self.data.control_ratio),
            ));
        }
        if self.data.base_days == 0 || self.data.days == 0 {
            return Err(SpoError::invalid("data", "base_days and days must be at least 1"));
        }
        if self.data.window == 0 {
            return Err(SpoError::invalid("data.window", "must be at least 1"));
        }
        crate::datagen::split_ranges(self.data.days * crate::datagen::INTERVALS_PER_DAY, self.data.split)?;
        self.data.profile.validate()?;
        if !(self.relocation.budget >= 0.0 && self.relocation.budget.is_finite()) {
            return Err(SpoError::invalid("relocation.budget", "must be >= 0"));
        }
        positive("relocation.interval_minutes", self.relocation.interval_minutes)?;
        self.train.validate()?;
        self.admm.validate()?;
        self.eval_admm.validate()?;
        if self.seeds.is_empty() {
            return Err(SpoError::invalid("seeds", "need at least one"));
        }
        if self.regimes.is_empty() {
            return Err(SpoError::invalid("regimes", "need at least one"));
        }
        let g = &self.gradcheck;
        if g.n_grids == 0 || g.instances == 0 || g.hidden == 0 || g.window == 0 {
            return Err(SpoError::invalid("gradcheck", "sizes must be at least 1"));
        }
        positive("gradcheck.eps", g.eps)?;
        positive("gradcheck.tolerance", g.tolerance)?;
        Ok(())
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SpoError::invalid(field, format!("must be > 0, got {v}")))
    }
}

fn parse_table(text: &str, what: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| SpoError::Parse {
        what: what.to_string(),
        message: e.to_string(),
    })
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one, otherwise as a bare string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| SpoError::invalid("--set", format!("expected key=value, got `{item}`")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(SpoError::invalid("--set", format!("bad key `{key}`")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| SpoError::invalid("--set", format!("`{p}` in `{key}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str("schema_version = 1\n[grid]\nrows = 2\n").unwrap();
        assert_eq!(cfg.grid.rows, 2);
        assert_eq!(cfg.grid.cols, 4);
        assert_eq!(cfg.train.learning_rate, 0.01);
    }

    #[test]
    fn schema_version_is_required() {
        assert!(RunConfig::from_toml_str("[grid]\nrows = 2\n").is_err());
        assert!(RunConfig::from_toml_str("schema_version = 9\n").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("schema_version = 1\n[grid]\nrowz = 2\n").unwrap_err();
        assert!(err.to_string().contains("rowz"), "{err}");
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = RunConfig::load(
            None,
            &[
                "relocation.budget=900".into(),
                "data.target=gaussian".into(),
                "seeds=[4, 5]".into(),
                "regimes=[\"DON\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.relocation.budget, 900.0);
        assert_eq!(cfg.data.target, TargetKind::Gaussian);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.regimes, vec![Regime::Don]);
        assert!(RunConfig::load(None, &["grid.rows".into()]).is_err());
        assert!(RunConfig::load(None, &["seeds.x=1".into()]).is_err());
    }

    #[test]
    fn invariants_are_checked() {
        for bad in [
            "data.control_ratio=1.0",
            "grid.rows=0",
            "train.learning_rate=-1",
            "admm.rho=0",
            "seeds=[]",
            "relocation.budget=-5",
        ] {
            assert!(RunConfig::load(None, &[bad.into()]).is_err(), "{bad}");
        }
    }
}
