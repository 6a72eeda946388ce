//! Error statistics over test trajectories.

use std::fmt::Write as _;

use crate::{Error, Result};

/// `sqrt((1/T) Σ_t (ŝ_t − s_t)²)`.
pub fn rmse(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    Ok(mse(estimates, truth)?.sqrt())
}

pub fn mse(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::Validation(format!(
            "estimate/truth length mismatch: {} vs {}",
            estimates.len(),
            truth.len()
        )));
    }
    let sse: f64 = estimates.iter().zip(truth).map(|(e, t)| (e - t) * (e - t)).sum();
    Ok(sse / truth.len() as f64)
}

/// Mean over trajectories of `|ŝ_t − s_t|` at each step.
pub fn per_step_mae(runs: &[(&[f64], &[f64])]) -> Result<Vec<f64>> {
    let Some(first) = runs.first() else {
        return Ok(Vec::new());
    };
    let t_max = first.0.len();
    let mut acc = vec![0.0; t_max];
    for (est, truth) in runs {
        if est.len() != t_max || truth.len() != t_max {
            return Err(Error::Validation("trajectories have different horizons".into()));
        }
        for ((a, e), t) in acc.iter_mut().zip(*est).zip(*truth) {
            *a += (e - t).abs();
        }
    }
    let n = runs.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Average, best and worst of per-trajectory RMSEs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub average: f64,
    pub best: f64,
    pub worst: f64,
}

impl ErrorSummary {
    pub fn from_rmses(rmses: &[f64]) -> Result<Self> {
        if rmses.is_empty() {
            return Err(Error::Validation("no trajectories to summarise".into()));
        }
        let average = rmses.iter().sum::<f64>() / rmses.len() as f64;
        let best = rmses.iter().copied().fold(f64::INFINITY, f64::min);
        let worst = rmses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { average, best, worst })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub label: String,
    pub summary: ErrorSummary,
    pub per_traj_rmse: Vec<(u64, f64)>,
    pub per_step_mae: Vec<f64>,
}

impl ResultsRow {
    /// Builds a row from `(traj_id, estimates, truth)` triples.
    pub fn from_runs(label: &str, runs: &[(u64, &[f64], &[f64])]) -> Result<Self> {
        let per_traj_rmse = runs
            .iter()
            .map(|(id, est, truth)| Ok((*id, rmse(est, truth)?)))
            .collect::<Result<Vec<_>>>()?;
        let rmses: Vec<f64> = per_traj_rmse.iter().map(|(_, r)| *r).collect();
        let pairs: Vec<(&[f64], &[f64])> = runs.iter().map(|(_, e, t)| (*e, *t)).collect();
        Ok(Self {
            label: label.to_string(),
            summary: ErrorSummary::from_rmses(&rmses)?,
            per_traj_rmse,
            per_step_mae: per_step_mae(&pairs)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsTable {
    pub title: String,
    pub rows: Vec<ResultsRow>,
}

impl ResultsTable {
    pub fn row(&self, label: &str) -> Option<&ResultsRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}\n", self.title);
        let _ = writeln!(s, "| | Average | Best | Worst |");
        let _ = writeln!(s, "|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.4} |",
                r.label, r.summary.average, r.summary.best, r.summary.worst
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("filter,average,best,worst\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.label, r.summary.average, r.summary.best, r.summary.worst
            );
        }
        s
    }

    /// One row per step, one column per filter.
    pub fn per_step_mae_csv(&self) -> String {
        let mut s = String::from("t");
        for r in &self.rows {
            s.push(',');
            s.push_str(&r.label);
        }
        s.push('\n');
        let t_max = self.rows.iter().map(|r| r.per_step_mae.len()).max().unwrap_or(0);
        for t in 0..t_max {
            let _ = write!(s, "{}", t + 1);
            for r in &self.rows {
                match r.per_step_mae.get(t) {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn per_traj_rmse_csv(&self) -> String {
        let mut s = String::from("filter,traj_id,rmse\n");
        for r in &self.rows {
            for (id, v) in &r.per_traj_rmse {
                let _ = writeln!(s, "{},{id},{v}", r.label);
            }
        }
        s
    }
}
