//! Threshold sweeps: one full train/evaluate run per value of `tau_iou` or
//! `tau_l`, reported as a table with val, test and averaged errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{RunResult, Workbench};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "tau_iou")]
    TauIou,
    #[serde(rename = "tau_l")]
    TauL,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::TauIou => "tau_iou",
            SweepParam::TauL => "tau_l",
        }
    }

    /// The standard grids: 0.1..=0.9 for `tau_iou`, 0.01..=0.05 for `tau_l`.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::TauIou => (1..=9).map(|i| i as f64 / 10.0).collect(),
            SweepParam::TauL => (1..=5).map(|i| i as f64 / 100.0).collect(),
        }
    }

    pub fn apply(self, config: &mut TrainConfig, value: f64) {
        match self {
            SweepParam::TauIou => config.pipeline.tau_iou = value,
            SweepParam::TauL => config.pipeline.tau_l = value,
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau_iou" | "tau-iou" => Ok(SweepParam::TauIou),
            "tau_l" | "tau-l" => Ok(SweepParam::TauL),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?}; expected tau_iou or tau_l"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub test_mae: f64,
    pub test_rmse: f64,
    pub avg_mae: f64,
    pub avg_rmse: f64,
    pub config_hash: String,
}

impl SweepRow {
    pub fn from_run(value: f64, run: &RunResult) -> Self {
        Self {
            value,
            val_mae: run.val.mae,
            val_rmse: run.val.rmse,
            test_mae: run.test.mae,
            test_rmse: run.test.rmse,
            avg_mae: (run.val.mae + run.test.mae) / 2.0,
            avg_rmse: (run.val.rmse + run.test.rmse) / 2.0,
            config_hash: run.outcome.checkpoint.config_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Highlight {
    Best,
    Second,
    Plain,
}

impl SweepTable {
    /// Row indices ordered by average MAE, then average RMSE, then position.
    fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        idx.sort_by(|&a, &b| {
            let (ra, rb) = (&self.rows[a], &self.rows[b]);
            ra.avg_mae
                .total_cmp(&rb.avg_mae)
                .then(ra.avg_rmse.total_cmp(&rb.avg_rmse))
                .then(a.cmp(&b))
        });
        idx
    }

    pub fn best(&self) -> Option<usize> {
        self.ranking().first().copied()
    }

    pub fn highlights(&self) -> Vec<Highlight> {
        let mut h = vec![Highlight::Plain; self.rows.len()];
        let rank = self.ranking();
        if let Some(&i) = rank.first() {
            h[i] = Highlight::Best;
        }
        if let Some(&i) = rank.get(1) {
            h[i] = Highlight::Second;
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},val_mae,val_rmse,test_mae,test_rmse,avg_mae,avg_rmse,highlight,config_hash\n",
            self.param.name()
        );
        for (r, h) in self.rows.iter().zip(self.highlights()) {
            let mark = match h {
                Highlight::Best => "best",
                Highlight::Second => "second",
                Highlight::Plain => "",
            };
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{},{}\n",
                r.value, r.val_mae, r.val_rmse, r.test_mae, r.test_rmse, r.avg_mae, r.avg_rmse, mark, r.config_hash
            ));
        }
        s
    }

    /// Markdown table; the best row is bold, the runner-up underlined.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "| {} | Val MAE | Val RMSE | Test MAE | Test RMSE | Avg MAE | Avg RMSE |\n|---|---|---|---|---|---|---|\n",
            self.param.name()
        );
        for (r, h) in self.rows.iter().zip(self.highlights()) {
            let cells = [
                format!("{}", r.value),
                format!("{:.2}", r.val_mae),
                format!("{:.2}", r.val_rmse),
                format!("{:.2}", r.test_mae),
                format!("{:.2}", r.test_rmse),
                format!("{:.2}", r.avg_mae),
                format!("{:.2}", r.avg_rmse),
            ];
            let cells: Vec<String> = match h {
                Highlight::Best => cells.iter().map(|c| format!("**{c}**")).collect(),
                Highlight::Second => cells.iter().map(|c| format!("<u>{c}</u>")).collect(),
                Highlight::Plain => cells.to_vec(),
            };
            s.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        s
    }
}

/// Train and evaluate once per value; `on_row` sees each row as it lands.
pub fn run_sweep(
    bench: &Workbench,
    param: SweepParam,
    values: &[f64],
    base: &TrainConfig,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config(format!("sweep over {} needs at least one value", param.name())));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut config = base.clone();
        param.apply(&mut config, v);
        config.validate()?;
        let run = bench.run(&config)?;
        let row = SweepRow::from_run(v, &run);
        log::info!("{}={} avg_mae={:.4}", param.name(), v, row.avg_mae);
        on_row(&row);
        rows.push(row);
    }
    Ok(SweepTable { param, rows })
}
