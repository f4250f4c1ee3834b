//! Divergence between matched and target distributions.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, SpoError};

/// `√((1/N) Σ (d − t)²)`
pub fn rmse(matched: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(matched, target)?;
    let sq: f64 = matched.iter().zip(target).map(|(d, t)| (d - t) * (d - t)).sum();
    Ok((sq / matched.len() as f64).sqrt())
}

/// Symmetric percentage error in `[0, 200]`. A term whose matched and target
/// values are both zero counts as zero.
pub fn smape(matched: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(matched, target)?;
    let total: f64 = matched
        .iter()
        .zip(target)
        .map(|(d, t)| {
            let denom = (d.abs() + t.abs()) / 2.0;
            if denom == 0.0 {
                0.0
            } else {
                (d - t).abs() / denom
            }
        })
        .sum();
    Ok(100.0 * total / matched.len() as f64)
}

fn check_pair(matched: &[f64], target: &[f64]) -> Result<()> {
    if matched.is_empty() {
        return Err(SpoError::Empty("matched distribution"));
    }
    check_len("target", matched.len(), target.len())
}

/// Elementwise `|matched − target|` over an interval × grid table.
pub fn divergence_table(matched: &[Vec<f64>], target: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_len("target rows", matched.len(), target.len())?;
    matched
        .iter()
        .zip(target)
        .map(|(m, t)| {
            check_len("target row", m.len(), t.len())?;
            Ok(m.iter().zip(t).map(|(a, b)| (a - b).abs()).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean over intervals of the per-interval RMSE.
    pub rmse: f64,
    /// Mean over intervals of the per-interval SMAPE, percent.
    pub smape: f64,
    /// `|matched − target|`, one row per evaluated interval.
    pub per_grid_abs_divergence: Vec<Vec<f64>>,
    /// Interval indices of the rows above.
    pub intervals: Vec<usize>,
}

impl Metrics {
    /// Aggregates per-interval rows. Every interval weighs the same.
    pub fn from_rows(intervals: Vec<usize>, matched: &[Vec<f64>], target: &[Vec<f64>]) -> Result<Self> {
        if matched.is_empty() {
            return Err(SpoError::Empty("evaluated intervals"));
        }
        check_len("intervals", matched.len(), intervals.len())?;
        let table = divergence_table(matched, target)?;
        let mut r = 0.0;
        let mut s = 0.0;
        for (m, t) in matched.iter().zip(target) {
            r += rmse(m, t)?;
            s += smape(m, t)?;
        }
        let k = matched.len() as f64;
        Ok(Metrics {
            rmse: r / k,
            smape: s / k,
            per_grid_abs_divergence: table,
            intervals,
        })
    }
}

/// Writes `interval,grid,matched,target,abs_divergence` rows.
pub fn write_divergence_csv(
    path: &Path,
    intervals: &[usize],
    matched: &[Vec<f64>],
    target: &[Vec<f64>],
) -> Result<()> {
    check_len("intervals", matched.len(), intervals.len())?;
    let table = divergence_table(matched, target)?;
    let file = std::fs::File::create(path).map_err(|e| SpoError::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let csv_err = |e: csv::Error| SpoError::Parse {
        what: path.display().to_string(),
        message: e.to_string(),
    };
    w.write_record(["interval", "grid", "matched", "target", "abs_divergence"])
        .map_err(csv_err)?;
    for (row, &interval) in intervals.iter().enumerate() {
        for grid in 0..table[row].len() {
            w.write_record([
                interval.to_string(),
                grid.to_string(),
                matched[row][grid].to_string(),
                target[row][grid].to_string(),
                table[row][grid].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let mut inner = w.into_inner().map_err(|e| SpoError::io(path, e.into_error()))?;
    inner.flush().map_err(|e| SpoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_fixtures() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            rmse(&[3.0, 4.0, 9.0], &[1.0, 0.0, 5.0]).unwrap(),
            rmse(&[9.0, 3.0, 4.0], &[5.0, 1.0, 0.0]).unwrap()
        );
        assert!(matches!(rmse(&[], &[]), Err(SpoError::Empty(_))));
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn smape_fixtures() {
        assert_eq!(smape(&[2.0, 7.0], &[2.0, 7.0]).unwrap(), 0.0);
        assert_eq!(smape(&[5.0], &[15.0]).unwrap(), 100.0);
        assert_eq!(smape(&[0.0], &[10.0]).unwrap(), 200.0);
        assert_eq!(smape(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(smape(&[0.0, 5.0], &[0.0, 15.0]).unwrap(), 50.0);
        assert!(smape(&[], &[]).is_err());
    }

    #[test]
    fn divergence_fixtures() {
        let a = vec![vec![7.0, 1.0], vec![2.0, 2.0]];
        let b = vec![vec![3.0, 1.0], vec![5.0, 2.0]];
        let t = divergence_table(&a, &b).unwrap();
        assert_eq!(t, vec![vec![4.0, 0.0], vec![3.0, 0.0]]);
        assert_eq!(t, divergence_table(&b, &a).unwrap());
        assert!(divergence_table(&a, &a).unwrap().iter().flatten().all(|v| *v == 0.0));
        assert!(divergence_table(&a, &b[..1]).is_err());
    }

    #[test]
    fn interval_average() {
        let m = Metrics::from_rows(vec![4, 5], &[vec![3.0, 4.0], vec![1.0, 1.0]], &[vec![0.0, 0.0], vec![1.0, 1.0]])
            .unwrap();
        assert!((m.rmse - 12.5f64.sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(m.smape, 100.0);
        assert_eq!(m.intervals, vec![4, 5]);
    }
}
