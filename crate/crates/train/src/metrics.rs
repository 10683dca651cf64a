//! Evaluation summaries and the per-run metrics file.

use std::fs::File;
use std::path::{Path, PathBuf};

use afa_core::Outcome;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result, TrainError};

/// One greedy evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub task_reward: f64,
    pub cost: f64,
    pub acquisitions: usize,
    pub length: usize,
    pub outcome: Outcome,
}

impl EpisodeSummary {
    /// Undiscounted task reward minus acquisition cost.
    pub fn cost_adjusted_return(&self) -> f64 {
        self.task_reward - self.cost
    }
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: Vec<EpisodeSummary>,
    /// Whether outcome rates are meaningful for the environment.
    pub clinical: bool,
}

impl EvalSummary {
    fn collect(&self, f: impl Fn(&EpisodeSummary) -> f64) -> Vec<f64> {
        self.episodes.iter().map(f).collect()
    }

    pub fn task_reward(&self) -> (f64, f64) {
        mean_stderr(&self.collect(|e| e.task_reward))
    }

    pub fn cost_adjusted_return(&self) -> (f64, f64) {
        mean_stderr(&self.collect(|e| e.cost_adjusted_return()))
    }

    pub fn acquisitions(&self) -> (f64, f64) {
        mean_stderr(&self.collect(|e| e.acquisitions as f64))
    }

    pub fn mean_length(&self) -> f64 {
        mean_stderr(&self.collect(|e| e.length as f64)).0
    }

    fn rate(&self, outcome: Outcome) -> f64 {
        if !self.clinical || self.episodes.is_empty() {
            return f64::NAN;
        }
        self.episodes.iter().filter(|e| e.outcome == outcome).count() as f64 / self.episodes.len() as f64
    }

    pub fn discharge_rate(&self) -> f64 {
        self.rate(Outcome::Discharge)
    }

    pub fn mortality_rate(&self) -> f64 {
        self.rate(Outcome::Mortality)
    }
}

/// One evaluation point of a training run. Outcome rates are `NaN` for
/// environments without clinical outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_steps: u64,
    pub updates: u64,
    pub mean_task_reward: f64,
    pub mean_cost_adjusted_return: f64,
    pub mean_episodic_acquisitions: f64,
    pub discharge_rate: f64,
    pub mortality_rate: f64,
    pub wall_seconds: f64,
    pub stderr_task_reward: f64,
    pub stderr_cost_adjusted_return: f64,
    pub unit_cost: f64,
    /// Acquisition cost paid by all training workers so far.
    pub total_acquisition_cost: f64,
}

pub const METRIC_COLUMNS: [&str; 12] = [
    "env_steps",
    "updates",
    "mean_task_reward",
    "mean_cost_adjusted_return",
    "mean_episodic_acquisitions",
    "discharge_rate",
    "mortality_rate",
    "wall_seconds",
    "stderr_task_reward",
    "stderr_cost_adjusted_return",
    "unit_cost",
    "total_acquisition_cost",
];

impl MetricsRow {
    pub fn from_eval(
        env_steps: u64,
        updates: u64,
        unit_cost: f64,
        total_acquisition_cost: f64,
        wall_seconds: f64,
        e: &EvalSummary,
    ) -> Self {
        let (tr, tr_se) = e.task_reward();
        let (car, car_se) = e.cost_adjusted_return();
        Self {
            env_steps,
            updates,
            mean_task_reward: tr,
            mean_cost_adjusted_return: car,
            mean_episodic_acquisitions: e.acquisitions().0,
            discharge_rate: e.discharge_rate(),
            mortality_rate: e.mortality_rate(),
            wall_seconds,
            stderr_task_reward: tr_se,
            stderr_cost_adjusted_return: car_se,
            unit_cost,
            total_acquisition_cost,
        }
    }
}

/// Append-only CSV that is flushed after every row.
pub struct CsvSink<T> {
    path: PathBuf,
    writer: csv::Writer<File>,
    _row: std::marker::PhantomData<T>,
}

impl<T: Serialize> CsvSink<T> {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
            _row: std::marker::PhantomData,
        })
    }

    pub fn push(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row).map_err(|e| self.csv_err(e))?;
        self.writer.flush().map_err(io_err(&self.path))
    }

    fn csv_err(&self, e: csv::Error) -> TrainError {
        TrainError::Csv {
            path: self.path.clone(),
            reason: e.to_string(),
        }
    }
}

/// Writes all rows of `rows` to `path`.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut sink = CsvSink::create(path)?;
    for r in rows {
        sink.push(r)?;
    }
    Ok(())
}

/// Reads a metrics file, requiring every column and a number in every cell.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let schema = |reason: String| TrainError::Schema {
        path: path.to_path_buf(),
        reason,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| TrainError::Csv {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| schema(e.to_string()))?
        .clone();
    let mut index = Vec::with_capacity(METRIC_COLUMNS.len());
    for col in METRIC_COLUMNS {
        let i = headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| schema(format!("missing column `{col}`")))?;
        index.push(i);
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| schema(e.to_string()))?;
        let mut vals = [0f64; METRIC_COLUMNS.len()];
        for (k, (&i, col)) in index.iter().zip(METRIC_COLUMNS).enumerate() {
            let cell = rec.get(i).unwrap_or("").trim();
            if cell.is_empty() {
                return Err(schema(format!("column `{col}` is empty in row {}", line + 1)));
            }
            vals[k] = cell
                .parse()
                .map_err(|_| schema(format!("column `{col}` holds `{cell}` in row {}", line + 1)))?;
        }
        rows.push(MetricsRow {
            env_steps: vals[0] as u64,
            updates: vals[1] as u64,
            mean_task_reward: vals[2],
            mean_cost_adjusted_return: vals[3],
            mean_episodic_acquisitions: vals[4],
            discharge_rate: vals[5],
            mortality_rate: vals[6],
            wall_seconds: vals[7],
            stderr_task_reward: vals[8],
            stderr_cost_adjusted_return: vals[9],
            unit_cost: vals[10],
            total_acquisition_cost: vals[11],
        });
    }
    if rows.is_empty() {
        return Err(schema("no rows".into()));
    }
    Ok(rows)
}
