use serde::Serialize;

use crate::error::{Error, Result};

/// Accuracy of every (training step, task) pair. Row 0 is the pre-training
/// zero-shot row; row r holds accuracies measured after training task r.
/// Columns are tasks in training order, so a matrix for N tasks is
/// `(N+1) x N`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(cells: Vec<Vec<f64>>) -> Result<Self> {
        let n = cells.len().saturating_sub(1);
        if n == 0 {
            return Err(Error::contract(
                "accuracy matrix needs a zero-shot row plus one row per task".to_string(),
            ));
        }
        for (r, row) in cells.iter().enumerate() {
            if row.len() != n {
                return Err(Error::contract(format!(
                    "row {r} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if let Some(&bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::contract(format!(
                    "row {r} holds out-of-range accuracy {bad}"
                )));
            }
        }
        Ok(AccuracyMatrix { cells })
    }

    pub fn n_tasks(&self) -> usize {
        self.cells.len() - 1
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.cells
    }

    /// Accuracy after training step `row` (0 = before any task) on task
    /// `col + 1`.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row][col]
    }

    pub fn zero_shot_row(&self) -> &[f64] {
        &self.cells[0]
    }

    /// Mean over all cells measured after some training step but before the
    /// column's own task was trained: rows 1..=N, columns with c + 1 > r.
    /// Absent for a single task, which has no such cells.
    pub fn transfer(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in 1..=self.n_tasks() {
            for c in r..self.n_tasks() {
                sum += self.cells[r][c];
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    /// Per-task transfer: mean over the rows where the task was still
    /// untrained (rows 1..=c for column c). The first task has none.
    pub fn transfer_per_dataset(&self) -> Vec<Option<f64>> {
        (0..self.n_tasks())
            .map(|c| {
                let vals: Vec<f64> = (1..=c).map(|r| self.cells[r][c]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    }

    /// Mean of the final row: end-state accuracy per task, averaged.
    pub fn last(&self) -> f64 {
        let row = &self.cells[self.n_tasks()];
        row.iter().sum::<f64>() / row.len() as f64
    }

    pub fn last_per_dataset(&self) -> Vec<f64> {
        self.cells[self.n_tasks()].clone()
    }

    /// Grand mean over every trained-step cell (rows 1..=N, all columns).
    pub fn avg_full_matrix(&self) -> f64 {
        let n = self.n_tasks();
        let sum: f64 = self.cells[1..].iter().flatten().sum();
        sum / (n * n) as f64
    }

    /// Per-task mean over trained-step rows 1..=N.
    pub fn avg_per_dataset(&self) -> Vec<f64> {
        let n = self.n_tasks();
        (0..n)
            .map(|c| self.cells[1..].iter().map(|row| row[c]).sum::<f64>() / n as f64)
            .collect()
    }

    /// Mean of per-task averages taken only over steps at or after the
    /// task's own training (rows c+1..=N for column c).
    pub fn avg_seen_tasks(&self) -> f64 {
        let n = self.n_tasks();
        let per: Vec<f64> = (0..n)
            .map(|c| {
                let vals: Vec<f64> = (c + 1..=n).map(|r| self.cells[r][c]).collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect();
        per.iter().sum::<f64>() / n as f64
    }
}

/// Everything a run reports, serialized deterministically (stable field
/// order, no timestamps) so identical runs write identical files.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_digest: String,
    pub config: serde_json::Value,
    pub task_ids: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub transfer: Option<f64>,
    pub transfer_per_dataset: Vec<Option<f64>>,
    pub avg_full_matrix: f64,
    pub avg_seen_tasks: f64,
    pub avg_per_dataset: Vec<f64>,
    pub last: f64,
    pub last_per_dataset: Vec<f64>,
    pub zero_shot: Vec<f64>,
}

impl MetricsReport {
    pub fn new(
        matrix: &AccuracyMatrix,
        task_ids: Vec<String>,
        seed: u64,
        digest: &[u8; 32],
        config: serde_json::Value,
    ) -> Result<Self> {
        if task_ids.len() != matrix.n_tasks() {
            return Err(Error::contract(format!(
                "{} task ids for a {}-task matrix",
                task_ids.len(),
                matrix.n_tasks()
            )));
        }
        Ok(MetricsReport {
            seed,
            config_digest: digest_hex(digest),
            config,
            task_ids,
            matrix: matrix.rows().to_vec(),
            transfer: matrix.transfer(),
            transfer_per_dataset: matrix.transfer_per_dataset(),
            avg_full_matrix: matrix.avg_full_matrix(),
            avg_seen_tasks: matrix.avg_seen_tasks(),
            avg_per_dataset: matrix.avg_per_dataset(),
            last: matrix.last(),
            last_per_dataset: matrix.last_per_dataset(),
            zero_shot: matrix.zero_shot_row().to_vec(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: f64| v.to_string();
        let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
        let mut out = String::new();
        out.push_str(&format!("section,row,{}\n", self.task_ids.join(",")));
        for (r, row) in self.matrix.iter().enumerate() {
            let label = if r == 0 {
                "zero_shot".to_string()
            } else {
                format!("after_task_{r}")
            };
            let cells: Vec<String> = row.iter().map(|&v| fmt(v)).collect();
            out.push_str(&format!("matrix,{label},{}\n", cells.join(",")));
        }
        let per = |vals: Vec<String>| vals.join(",");
        out.push_str(&format!(
            "per_dataset,transfer,{}\n",
            per(self.transfer_per_dataset.iter().map(|&v| opt(v)).collect())
        ));
        out.push_str(&format!(
            "per_dataset,avg,{}\n",
            per(self.avg_per_dataset.iter().map(|&v| fmt(v)).collect())
        ));
        out.push_str(&format!(
            "per_dataset,last,{}\n",
            per(self.last_per_dataset.iter().map(|&v| fmt(v)).collect())
        ));
        out.push_str(&format!("aggregate,transfer,{}\n", opt(self.transfer)));
        out.push_str(&format!(
            "aggregate,avg_full_matrix,{}\n",
            fmt(self.avg_full_matrix)
        ));
        out.push_str(&format!(
            "aggregate,avg_seen_tasks,{}\n",
            fmt(self.avg_seen_tasks)
        ));
        out.push_str(&format!("aggregate,last,{}\n", fmt(self.last)));
        out
    }
}

pub fn digest_hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
