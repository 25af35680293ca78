use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;

use super::config::ExperimentConfig;
use super::tasks::{run_task, Task, TaskSpec};
use super::train::train;

pub const SWEEP_FILE: &str = "sweep.csv";

const COLUMNS: [&str; 7] = ["recall", "map", "distance_m", "acc@1", "acc@3", "acc@5", "acc@10"];

/// Reports of one mixture setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub weights: [f64; 5],
    pub recover: EvalReport,
    pub predict_next: EvalReport,
}

/// Train and evaluate one model per mixture in the config's grid.
///
/// Each point writes its checkpoints and reports under `point_<i>/`, and the
/// combined table goes to `sweep.csv`.
pub fn sweep_mask_ratio(cfg: &ExperimentConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    if cfg.sweep_grid.is_empty() {
        return Err(Error::Config("sweep_grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(cfg.sweep_grid.len());
    for (i, &weights) in cfg.sweep_grid.iter().enumerate() {
        let mut point = cfg.clone();
        point.set_mixture_weights(weights);
        point.validate()?;
        let dir = out_dir.map(|d| d.join(format!("point_{i}")));
        let trained = train(&point, dataset, dir.as_deref())?;
        let mut reports = Vec::with_capacity(2);
        for task in [Task::Recover, Task::PredictNext] {
            let outcome = run_task(&TaskSpec::from_config(task, &point), &point, &trained.artifacts, dataset)?;
            if let Some(d) = &dir {
                outcome.write(d.join(task.as_str()))?;
            }
            reports.push(outcome.report);
        }
        let predict_next = reports.pop().expect("two reports");
        let recover = reports.pop().expect("two reports");
        rows.push(SweepRow {
            weights,
            recover,
            predict_next,
        });
    }
    if let Some(d) = out_dir {
        write_sweep_csv(d.join(SWEEP_FILE), &rows)?;
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "point,w_random,w_terminal,w_complete,w_sequential,w_circadian,{}",
        COLUMNS.join(",")
    )?;
    for (i, row) in rows.iter().enumerate() {
        let weights: Vec<String> = row.weights.iter().map(|v| v.to_string()).collect();
        let values: Vec<String> = COLUMNS
            .iter()
            .map(|k| {
                row.recover
                    .get(k)
                    .or_else(|| row.predict_next.get(k))
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            })
            .collect();
        writeln!(w, "{i},{},{}", weights.join(","), values.join(","))?;
    }
    w.flush()?;
    Ok(())
}
