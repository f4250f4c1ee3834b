//! Synthetic city: hexagonal grid, vehicle demand series, fleet split,
//! target distributions, travel times and incentive costs.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, SpoError};
use crate::predictor::{Adjacency, HistoryWindow};

pub const INTERVALS_PER_DAY: usize = 96;
pub const INTERVAL_MINUTES: f64 = 15.0;
pub const DEFAULT_EDGE_LENGTH: f64 = 531.41;

const AXIAL_DIRECTIONS: [(i64, i64); 6] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1)];

/// Parallelogram of hexagons in axial coordinates `(q, r)`. Cell `r·cols + q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexGrid {
    pub rows: usize,
    pub cols: usize,
    /// Meters.
    pub edge_length: f64,
    pub coords: Vec<(i64, i64)>,
    pub neighbors: Vec<Vec<usize>>,
}

pub fn make_hex_grid(rows: usize, cols: usize) -> Result<HexGrid> {
    if rows == 0 || cols == 0 {
        return Err(SpoError::invalid("grid", format!("{rows}x{cols} has no cells")));
    }
    let coords: Vec<(i64, i64)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |q| (q as i64, r as i64)))
        .collect();
    let neighbors = coords
        .iter()
        .map(|&(q, r)| {
            AXIAL_DIRECTIONS
                .iter()
                .filter_map(|&(dq, dr)| {
                    let (nq, nr) = (q + dq, r + dr);
                    (nq >= 0 && nr >= 0 && (nq as usize) < cols && (nr as usize) < rows)
                        .then(|| nr as usize * cols + nq as usize)
                })
                .collect()
        })
        .collect();
    Ok(HexGrid {
        rows,
        cols,
        edge_length: DEFAULT_EDGE_LENGTH,
        coords,
        neighbors,
    })
}

impl HexGrid {
    pub fn n_grids(&self) -> usize {
        self.coords.len()
    }

    /// Number of hexagon steps between two cells.
    pub fn distance(&self, i: usize, j: usize) -> usize {
        let (a, b) = (self.coords[i], self.coords[j]);
        let dq = a.0 - b.0;
        let dr = a.1 - b.1;
        ((dq.abs() + dr.abs() + (dq + dr).abs()) / 2) as usize
    }

    pub fn adjacency(&self) -> Adjacency {
        Adjacency::new(self.neighbors.clone()).expect("hex neighborhoods are symmetric")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("grid serializes");
        std::fs::write(path, text + "\n").map_err(|e| SpoError::io(path, e))
    }
}

/// Minutes between cell centers at `speed_kmh`. Adjacent centers are
/// `edge_length · √3` apart.
pub fn travel_time_matrix(grid: &HexGrid, speed_kmh: f64) -> Result<Vec<Vec<f64>>> {
    if !(speed_kmh > 0.0 && speed_kmh.is_finite()) {
        return Err(SpoError::invalid("speed_kmh", format!("must be > 0, got {speed_kmh}")));
    }
    let step_minutes = grid.edge_length * 3f64.sqrt() / 1000.0 / speed_kmh * 60.0;
    let n = grid.n_grids();
    Ok((0..n)
        .map(|i| (0..n).map(|j| grid.distance(i, j) as f64 * step_minutes).collect())
        .collect())
}

/// `unit_cost` per hexagon step; staying is free.
pub fn incentive_cost_matrix(grid: &HexGrid, unit_cost: f64) -> Result<Vec<Vec<f64>>> {
    if !(unit_cost >= 0.0 && unit_cost.is_finite()) {
        return Err(SpoError::invalid("unit_cost", format!("must be >= 0, got {unit_cost}")));
    }
    let n = grid.n_grids();
    Ok((0..n)
        .map(|i| (0..n).map(|j| grid.distance(i, j) as f64 * unit_cost).collect())
        .collect())
}

/// Shape of the synthetic demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandProfile {
    /// Mean vehicles per interval in an ordinary cell.
    pub base_rate: f64,
    /// Hotspot intensity relative to an ordinary cell.
    pub hotspot_factor: f64,
    /// Number of hotspot cells; `None` picks one per twelve cells.
    pub hotspots: Option<usize>,
    /// Height of the morning, noon and late-night peaks. Zero is flat.
    pub peak_amplitude: f64,
    /// Relative weekend dip.
    pub weekly_amplitude: f64,
    /// Standard deviation of the multiplicative noise.
    pub noise: f64,
}

impl Default for DemandProfile {
    fn default() -> Self {
        DemandProfile {
            base_rate: 30.0,
            hotspot_factor: 5.0,
            hotspots: None,
            peak_amplitude: 1.0,
            weekly_amplitude: 0.15,
            noise: 0.1,
        }
    }
}

impl DemandProfile {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("base_rate", self.base_rate),
            ("peak_amplitude", self.peak_amplitude),
            ("noise", self.noise),
        ];
        for (field, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SpoError::invalid(field, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.hotspot_factor >= 1.0 && self.hotspot_factor.is_finite()) {
            return Err(SpoError::invalid(
                "hotspot_factor",
                format!("must be >= 1, got {}", self.hotspot_factor),
            ));
        }
        if !(0.0..1.0).contains(&self.weekly_amplitude) {
            return Err(SpoError::invalid(
                "weekly_amplitude",
                format!("must be in [0, 1), got {}", self.weekly_amplitude),
            ));
        }
        Ok(())
    }

    /// Multiplier of interval `t` within a day, averaging 1 over the day.
    pub fn daily_factor(&self, t: usize) -> f64 {
        let raw = |t: usize| {
            let hour = (t as f64 + 0.5) * 24.0 / INTERVALS_PER_DAY as f64;
            let bump = |center: f64, width: f64, height: f64| {
                let d = (hour - center).abs();
                let d = d.min(24.0 - d);
                height * (-d * d / (2.0 * width * width)).exp()
            };
            0.4 + self.peak_amplitude * (bump(8.5, 1.2, 1.0) + bump(12.5, 1.0, 0.8) + bump(23.0, 1.3, 0.9))
        };
        let mean = (0..INTERVALS_PER_DAY).map(raw).sum::<f64>() / INTERVALS_PER_DAY as f64;
        raw(t % INTERVALS_PER_DAY) / mean
    }

    pub fn weekly_factor(&self, day: usize) -> f64 {
        if day % 7 >= 5 {
            1.0 - self.weekly_amplitude
        } else {
            1.0
        }
    }
}

/// Vehicle counts per interval and cell, in three classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSeries {
    pub n_grids: usize,
    /// Absolute index of the first row (intervals since midnight of day 0).
    pub start_interval: usize,
    pub all: Vec<Vec<f64>>,
    pub dedicated: Vec<Vec<f64>>,
    pub free: Vec<Vec<f64>>,
    /// Mean intensity per cell before temporal modulation.
    pub intensity: Vec<f64>,
    pub hotspots: Vec<usize>,
}

impl DemandSeries {
    pub fn len(&self) -> usize {
        self.all.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all.is_empty()
    }

    /// Rows of whole days `[from, to)` counted from the first row.
    pub fn days(&self, from: usize, to: usize) -> Result<DemandSeries> {
        let (a, b) = (from * INTERVALS_PER_DAY, to * INTERVALS_PER_DAY);
        if from >= to || b > self.len() {
            return Err(SpoError::invalid(
                "days",
                format!("[{from}, {to}) outside a series of {} intervals", self.len()),
            ));
        }
        Ok(DemandSeries {
            n_grids: self.n_grids,
            start_interval: self.start_interval + a,
            all: self.all[a..b].to_vec(),
            dedicated: self.dedicated[a..b].to_vec(),
            free: self.free[a..b].to_vec(),
            intensity: self.intensity.clone(),
            hotspots: self.hotspots.clone(),
        })
    }

    /// Mean of the `all` class by time of day.
    pub fn daily_mean(&self) -> Result<Vec<Vec<f64>>> {
        if self.len() < INTERVALS_PER_DAY {
            return Err(SpoError::invalid("series", "shorter than one day"));
        }
        let mut sum = vec![vec![0.0; self.n_grids]; INTERVALS_PER_DAY];
        let mut count = [0usize; INTERVALS_PER_DAY];
        for (t, row) in self.all.iter().enumerate() {
            let slot = (self.start_interval + t) % INTERVALS_PER_DAY;
            count[slot] += 1;
            for (s, v) in sum[slot].iter_mut().zip(row) {
                *s += v;
            }
        }
        for (row, c) in sum.iter_mut().zip(count) {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
        Ok(sum)
    }

    /// Writes `interval,grid,all,dedicated,free` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| SpoError::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let csv_err = |e: csv::Error| SpoError::Parse {
            what: path.display().to_string(),
            message: e.to_string(),
        };
        w.write_record(["interval", "grid", "all", "dedicated", "free"])
            .map_err(csv_err)?;
        for t in 0..self.len() {
            for g in 0..self.n_grids {
                w.write_record([
                    (self.start_interval + t).to_string(),
                    g.to_string(),
                    self.all[t][g].to_string(),
                    self.dedicated[t][g].to_string(),
                    self.free[t][g].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        let mut inner = w.into_inner().map_err(|e| SpoError::io(path, e.into_error()))?;
        inner.flush().map_err(|e| SpoError::io(path, e))
    }
}

/// Integer vehicle counts over `days` whole days. All vehicles are in the
/// `all` class; see [`split_fleet`].
pub fn synth_demand(grid: &HexGrid, days: usize, seed: u64, profile: &DemandProfile) -> Result<DemandSeries> {
    if days == 0 {
        return Err(SpoError::invalid("days", "must be at least 1"));
    }
    profile.validate()?;
    let n = grid.n_grids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_hot = profile.hotspots.unwrap_or(((n as f64) / 12.0).round().max(1.0) as usize);
    if n_hot > n {
        return Err(SpoError::invalid("hotspots", format!("{n_hot} exceeds {n} cells")));
    }
    let mut hotspots = rand::seq::index::sample(&mut rng, n, n_hot).into_vec();
    hotspots.sort_unstable();
    let intensity: Vec<f64> = (0..n)
        .map(|i| {
            if hotspots.binary_search(&i).is_ok() {
                profile.base_rate * profile.hotspot_factor
            } else {
                profile.base_rate
            }
        })
        .collect();
    let mut all = Vec::with_capacity(days * INTERVALS_PER_DAY);
    for day in 0..days {
        let weekly = profile.weekly_factor(day);
        for t in 0..INTERVALS_PER_DAY {
            let level = profile.daily_factor(t) * weekly;
            let row = intensity
                .iter()
                .map(|lambda| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (lambda * level * (1.0 + profile.noise * z).max(0.0)).round()
                })
                .collect();
            all.push(row);
        }
    }
    let zeros = vec![vec![0.0; n]; all.len()];
    Ok(DemandSeries {
        n_grids: n,
        start_interval: 0,
        dedicated: zeros,
        free: all.clone(),
        all,
        intensity,
        hotspots,
    })
}

/// Each vehicle is dedicated with probability `gamma`.
pub fn split_fleet(series: &DemandSeries, gamma: f64, seed: u64) -> Result<DemandSeries> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(SpoError::invalid("gamma", format!("must be in (0, 1), got {gamma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dedicated = Vec::with_capacity(series.len());
    let mut free = Vec::with_capacity(series.len());
    for row in &series.all {
        let mut d_row = Vec::with_capacity(row.len());
        let mut f_row = Vec::with_capacity(row.len());
        for &count in row {
            if !(count >= 0.0 && count.fract() == 0.0) {
                return Err(SpoError::invalid("all", format!("counts must be nonnegative integers, got {count}")));
            }
            let d = Binomial::new(count as u64, gamma)
                .expect("valid binomial parameters")
                .sample(&mut rng) as f64;
            d_row.push(d);
            f_row.push(count - d);
        }
        dedicated.push(d_row);
        free.push(f_row);
    }
    Ok(DemandSeries {
        dedicated,
        free,
        ..series.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Uniform,
    Gaussian,
    GaussianMixture,
}

impl std::str::FromStr for TargetKind {
    type Err = SpoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TargetKind::Uniform),
            "gaussian" => Ok(TargetKind::Gaussian),
            "gaussian_mixture" => Ok(TargetKind::GaussianMixture),
            other => Err(SpoError::invalid(
                "target",
                format!("unknown kind `{other}` (uniform | gaussian | gaussian_mixture)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub factor_range: (f64, f64),
    /// Spatial variance of the Gaussian target, in squared hexagon steps.
    pub variance: f64,
    pub mixture_variances: (f64, f64),
    pub seed: u64,
}

impl TargetSpec {
    pub fn new(kind: TargetKind, seed: u64) -> Self {
        TargetSpec {
            kind,
            factor_range: (0.9, 1.1),
            variance: 15.0,
            mixture_variances: (10.0, 20.0),
            seed,
        }
    }
}

/// Target distribution of all vehicles for each interval of a day, derived
/// from the mean day of a base period.
pub fn gen_target(spec: &TargetSpec, base_mean: &[Vec<f64>], grid: &HexGrid) -> Result<Vec<Vec<f64>>> {
    let n = grid.n_grids();
    for (t, row) in base_mean.iter().enumerate() {
        check_len("base mean row", n, row.len())?;
        if let Some(g) = row.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(SpoError::invalid(
                format!("base_mean[{t}][{g}]"),
                format!("must be finite and >= 0, got {}", row[g]),
            ));
        }
    }
    let (lo, hi) = spec.factor_range;
    if !(lo <= hi && lo >= 0.0) {
        return Err(SpoError::invalid("factor_range", format!("[{lo}, {hi}] is not a valid range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bump = |center: usize, variance: f64| -> Vec<f64> {
        let w: Vec<f64> = (0..n)
            .map(|i| {
                let d = grid.distance(i, center) as f64;
                (-d * d / (2.0 * variance)).exp()
            })
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    };
    let pick_center = |row: &[f64], rng: &mut ChaCha8Rng| -> usize {
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return rng.random_range(0..n);
        }
        let mut u = rng.random_range(0.0..total);
        for (i, v) in row.iter().enumerate() {
            if u < *v {
                return i;
            }
            u -= v;
        }
        n - 1
    };
    let mut out = Vec::with_capacity(base_mean.len());
    for row in base_mean {
        let total: f64 = row.iter().sum();
        let target: Vec<f64> = match spec.kind {
            TargetKind::Uniform => row
                .iter()
                .map(|v| v * if lo == hi { lo } else { rng.random_range(lo..=hi) })
                .collect(),
            TargetKind::Gaussian => {
                let c = pick_center(row, &mut rng);
                bump(c, spec.variance).into_iter().map(|w| w * total).collect()
            }
            TargetKind::GaussianMixture => {
                let c1 = pick_center(row, &mut rng);
                let c2 = pick_center(row, &mut rng);
                let (v1, v2) = spec.mixture_variances;
                bump(c1, v1)
                    .into_iter()
                    .zip(bump(c2, v2))
                    .map(|(a, b)| 0.5 * (a + b) * total)
                    .collect()
            }
        };
        out.push(target.into_iter().map(|v| v.max(0.0)).collect());
    }
    Ok(out)
}

/// One prediction-and-relocation step at interval `τ + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Absolute index of `τ + 1`.
    pub interval: usize,
    /// Free vehicles over `τ − m + 1 ..= τ`.
    pub history: HistoryWindow,
    /// Dedicated vehicles at `τ`.
    pub supply: Vec<f64>,
    /// Free vehicles at `τ + 1`.
    pub actual_free: Vec<f64>,
    /// Target distribution of all vehicles at `τ + 1`.
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Chronological index ranges for `n` samples with the given ratios.
pub fn split_ranges(n: usize, ratios: [f64; 3]) -> Result<[std::ops::Range<usize>; 3]> {
    if ratios.iter().any(|r| r.is_nan() || *r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SpoError::invalid(
            "ratios",
            format!("must be positive and sum to 1, got {ratios:?}"),
        ));
    }
    if n < 3 {
        return Err(SpoError::invalid("samples", format!("need at least 3, got {n}")));
    }
    let n_train = ((n as f64 * ratios[0]).round() as usize).clamp(1, n - 2);
    let n_val = ((n as f64 * ratios[1]).round() as usize).clamp(1, n - 1 - n_train);
    Ok([0..n_train, n_train..n_train + n_val, n_train + n_val..n])
}

/// Builds one sample per interval after the first `window` rows and cuts
/// them chronologically. `targets` holds one row per interval of the day.
pub fn split_dataset(
    series: &DemandSeries,
    targets: &[Vec<f64>],
    window: usize,
    ratios: [f64; 3],
) -> Result<DatasetSplit> {
    check_len("target rows", INTERVALS_PER_DAY, targets.len())?;
    if window == 0 {
        return Err(SpoError::invalid("window", "must be at least 1"));
    }
    if series.len() < window + 3 {
        return Err(SpoError::invalid(
            "series",
            format!("{} intervals cannot hold a window of {window} plus 3 samples", series.len()),
        ));
    }
    let mut samples = Vec::with_capacity(series.len() - window);
    for t in window..series.len() {
        let interval = series.start_interval + t;
        samples.push(Sample {
            interval,
            history: HistoryWindow::new(&series.free[t - window..t])?,
            supply: series.dedicated[t - 1].clone(),
            actual_free: series.free[t].clone(),
            target: targets[interval % INTERVALS_PER_DAY].clone(),
        });
    }
    let [train, val, test] = split_ranges(samples.len(), ratios)?;
    let test = samples[test].to_vec();
    let val = samples[val].to_vec();
    samples.truncate(train.end);
    Ok(DatasetSplit {
        train: samples,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let g = make_hex_grid(1, 1).unwrap();
        assert!(g.neighbors[0].is_empty());
        let g = make_hex_grid(3, 3).unwrap();
        assert_eq!(g.neighbors[4].len(), 6);
        for rows in 1..5 {
            for cols in 1..5 {
                let g = make_hex_grid(rows, cols).unwrap();
                for (i, list) in g.neighbors.iter().enumerate() {
                    for &j in list {
                        assert!(g.neighbors[j].contains(&i));
                        assert_eq!(g.distance(i, j), 1);
                    }
                }
            }
        }
        assert!(make_hex_grid(0, 3).is_err());
    }

    #[test]
    fn grid_is_connected() {
        let g = make_hex_grid(4, 6).unwrap();
        let mut seen = vec![false; g.n_grids()];
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            if !std::mem::replace(&mut seen[i], true) {
                stack.extend(&g.neighbors[i]);
            }
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn hex_distance_triangle_inequality() {
        let g = make_hex_grid(5, 5).unwrap();
        let n = g.n_grids();
        for i in 0..n {
            assert_eq!(g.distance(i, i), 0);
            for j in 0..n {
                assert_eq!(g.distance(i, j), g.distance(j, i));
                for k in 0..n {
                    assert!(g.distance(i, k) <= g.distance(i, j) + g.distance(j, k));
                }
            }
        }
    }

    #[test]
    fn travel_time_and_cost() {
        let g = make_hex_grid(2, 3).unwrap();
        let m = travel_time_matrix(&g, 20.0).unwrap();
        let w = incentive_cost_matrix(&g, 2.0).unwrap();
        let step = DEFAULT_EDGE_LENGTH * 3f64.sqrt() / 1000.0 / 20.0 * 60.0;
        for i in 0..g.n_grids() {
            assert_eq!(m[i][i], 0.0);
            assert_eq!(w[i][i], 0.0);
            for &j in &g.neighbors[i] {
                assert!((m[i][j] - step).abs() < 1e-12);
                assert_eq!(w[i][j], 2.0);
            }
        }
        assert!(travel_time_matrix(&g, 0.0).is_err());
        assert!(incentive_cost_matrix(&g, -1.0).is_err());
    }

    #[test]
    fn flat_noiseless_demand_is_constant() {
        let g = make_hex_grid(2, 2).unwrap();
        let p = DemandProfile {
            hotspots: Some(0),
            peak_amplitude: 0.0,
            weekly_amplitude: 0.0,
            noise: 0.0,
            ..DemandProfile::default()
        };
        let s = synth_demand(&g, 2, 1, &p).unwrap();
        assert!(s.all.iter().flatten().all(|v| *v == 30.0));
    }

    #[test]
    fn demand_is_seeded_and_counts_are_integers() {
        let g = make_hex_grid(3, 3).unwrap();
        let p = DemandProfile::default();
        let a = synth_demand(&g, 1, 5, &p).unwrap();
        assert_eq!(a, synth_demand(&g, 1, 5, &p).unwrap());
        assert_ne!(a, synth_demand(&g, 1, 6, &p).unwrap());
        assert!(a.all.iter().flatten().all(|v| *v >= 0.0 && v.fract() == 0.0));
        assert_eq!(a.len(), INTERVALS_PER_DAY);
        assert!(synth_demand(&g, 0, 5, &p).is_err());
    }

    #[test]
    fn hotspot_ratio_within_bounds() {
        for (rows, cols) in [(3, 3), (4, 4), (5, 9), (6, 6)] {
            let g = make_hex_grid(rows, cols).unwrap();
            let s = synth_demand(&g, 1, 2, &DemandProfile::default()).unwrap();
            let mean = s.intensity.iter().sum::<f64>() / s.intensity.len() as f64;
            for &h in &s.hotspots {
                let ratio = s.intensity[h] / mean;
                assert!((3.0..=6.0).contains(&ratio), "{rows}x{cols}: {ratio}");
            }
        }
    }

    #[test]
    fn daily_profile_has_three_peaks() {
        let p = DemandProfile::default();
        let f: Vec<f64> = (0..INTERVALS_PER_DAY).map(|t| p.daily_factor(t)).collect();
        let peaks = (0..INTERVALS_PER_DAY)
            .filter(|&t| {
                let prev = f[(t + INTERVALS_PER_DAY - 1) % INTERVALS_PER_DAY];
                let next = f[(t + 1) % INTERVALS_PER_DAY];
                f[t] > prev && f[t] > next
            })
            .count();
        assert_eq!(peaks, 3);
        assert!((f.iter().sum::<f64>() / INTERVALS_PER_DAY as f64 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fleet_split_properties() {
        let g = make_hex_grid(10, 10).unwrap();
        let s = synth_demand(&g, 1, 3, &DemandProfile::default()).unwrap();
        let split = split_fleet(&s, 0.6, 4).unwrap();
        let mut total = 0.0;
        let mut ded = 0.0;
        for t in 0..s.len() {
            for i in 0..s.n_grids {
                assert_eq!(split.all[t][i], split.dedicated[t][i] + split.free[t][i]);
                total += split.all[t][i];
                ded += split.dedicated[t][i];
            }
        }
        assert!((ded / total - 0.6).abs() < 0.01);
        let nearly_all = split_fleet(&s, 0.999, 4).unwrap();
        let free: f64 = nearly_all.free.iter().flatten().sum();
        assert!(free / total < 0.005);
        let mut empty = s.clone();
        empty.all = vec![vec![0.0; s.n_grids]; 2];
        let e = split_fleet(&empty, 0.5, 1).unwrap();
        assert!(e.dedicated.iter().chain(&e.free).flatten().all(|v| *v == 0.0));
        assert!(split_fleet(&s, 1.0, 1).is_err());
        assert!(split_fleet(&s, 0.0, 1).is_err());
    }

    #[test]
    fn targets() {
        let g = make_hex_grid(4, 4).unwrap();
        let s = synth_demand(&g, 7, 1, &DemandProfile::default()).unwrap();
        let base = s.daily_mean().unwrap();
        let mut spec = TargetSpec::new(TargetKind::Uniform, 3);
        spec.factor_range = (1.0, 1.0);
        assert_eq!(gen_target(&spec, &base, &g).unwrap(), base);
        for kind in [TargetKind::Uniform, TargetKind::Gaussian, TargetKind::GaussianMixture] {
            let t = gen_target(&TargetSpec::new(kind, 3), &base, &g).unwrap();
            assert_eq!(t.len(), INTERVALS_PER_DAY);
            assert!(t.iter().flatten().all(|v| *v >= 0.0));
            for (row, b) in t.iter().zip(&base) {
                let (tt, bt): (f64, f64) = (row.iter().sum(), b.iter().sum());
                match kind {
                    TargetKind::Uniform => assert!(tt >= 0.9 * bt - 1e-9 && tt <= 1.1 * bt + 1e-9),
                    _ => assert!((tt - bt).abs() < 1e-9 * bt.max(1.0)),
                }
            }
        }
        let mut bad = base.clone();
        bad[0][0] = -1.0;
        assert!(gen_target(&TargetSpec::new(TargetKind::Uniform, 1), &bad, &g).is_err());
    }

    #[test]
    fn chronological_split() {
        let [a, b, c] = split_ranges(100, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        assert_eq!((a.end, b.end), (b.start, c.start));
        assert!(split_ranges(2, [0.8, 0.1, 0.1]).is_err());
        assert!(split_ranges(10, [0.5, 0.1, 0.1]).is_err());

        let g = make_hex_grid(2, 2).unwrap();
        let s = split_fleet(&synth_demand(&g, 1, 1, &DemandProfile::default()).unwrap(), 0.6, 1).unwrap();
        let targets = s.daily_mean().unwrap();
        let d = split_dataset(&s, &targets, 12, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!(d.train.len() + d.val.len() + d.test.len(), INTERVALS_PER_DAY - 12);
        assert_eq!(d.train[0].interval, 12);
        assert_eq!(d.train[0].history.last(), s.free[11]);
        assert_eq!(d.train[0].supply, s.dedicated[11]);
        assert_eq!(d.train.last().unwrap().interval + 1, d.val[0].interval);
        assert_eq!(d.val.last().unwrap().interval + 1, d.test[0].interval);

        let short = DemandSeries {
            all: s.all[..14].to_vec(),
            dedicated: s.dedicated[..14].to_vec(),
            free: s.free[..14].to_vec(),
            ..s.clone()
        };
        assert!(split_dataset(&short, &targets, 12, [0.8, 0.1, 0.1]).is_err());
    }

    #[test]
    fn csv_rows() {
        let g = make_hex_grid(1, 1).unwrap();
        let s = split_fleet(&synth_demand(&g, 1, 1, &DemandProfile::default()).unwrap(), 0.6, 1).unwrap();
        let dir = std::env::temp_dir().join(format!("spo-series-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.csv");
        s.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + INTERVALS_PER_DAY);
        assert!(text.starts_with("interval,grid,all,dedicated,free\n"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
