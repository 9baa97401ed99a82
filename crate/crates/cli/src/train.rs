//! Training loop: batches, validation, CSV loss log and periodic checkpoints.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use log::{info, warn};

use diffnca_core::optim::{train_step, validation_loss, TrainState};
use diffnca_core::Model;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{ingest, Split};
use crate::error::{CliError, Result};

pub const LOG_HEADER: [&str; 4] = ["step", "train_loss", "val_loss", "lr"];

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

impl LogRow {
    fn record(&self) -> [String; 4] {
        [
            self.step.to_string(),
            self.train_loss.to_string(),
            self.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            self.lr.to_string(),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> Option<Self> {
        let val = rec.get(2)?;
        Some(LogRow {
            step: rec.get(0)?.parse().ok()?,
            train_loss: rec.get(1)?.parse().ok()?,
            val_loss: if val.is_empty() { None } else { Some(val.parse().ok()?) },
            lr: rec.get(3)?.parse().ok()?,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        rows.push(
            LogRow::parse(&rec).ok_or_else(|| CliError::Dataset(format!("{}: malformed log row", path.display())))?,
        );
    }
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e.to_string()))
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(LOG_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r.record()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn append_row(path: &Path, row: &LogRow) -> Result<()> {
    let file = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(row.record()).map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_step: u64,
    pub log_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// Rows written by this invocation.
    pub rows: Vec<LogRow>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:08}.ckpt"))
}

/// Whether two runs describe the same experiment up to its length and output folder.
fn same_experiment(a: &RunConfig, b: &RunConfig) -> bool {
    let strip = |c: &RunConfig| {
        let mut c = c.clone();
        c.train.steps = 0;
        c.out_dir = PathBuf::new();
        c
    };
    strip(a) == strip(b)
}

/// Trains `config`, optionally continuing from `resume`. `on_row` sees every log row.
pub fn train(config: &RunConfig, resume: Option<&Path>, mut on_row: impl FnMut(&LogRow)) -> Result<TrainSummary> {
    config.validate()?;
    let schedule = config.noise_schedule()?;
    let tc = config.train_config();
    let dataset = ingest(&config.data)?;
    let val = match dataset.eval_batch(Split::Val, config.train.val_batch) {
        Some(v) => v,
        None => {
            warn!("validation split is empty; validating on training patches");
            dataset
                .eval_batch(Split::Train, config.train.val_batch)
                .expect("training split is non-empty")
        }
    };
    info!(
        "{} train / {} val / {} test images, {} skipped",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        dataset.skipped
    );

    let out = &config.out_dir;
    std::fs::create_dir_all(out.join("checkpoints")).map_err(|e| CliError::io(out, e))?;
    let log_path = out.join("loss.csv");
    let mut state = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if !same_experiment(&ck.config, config) {
                return Err(CliError::Config(format!(
                    "{} was trained with a different configuration",
                    path.display()
                )));
            }
            let kept: Vec<LogRow> = if log_path.exists() {
                read_log(&log_path)?
                    .into_iter()
                    .filter(|r| r.step < ck.state.step)
                    .collect()
            } else {
                Vec::new()
            };
            write_log(&log_path, &kept)?;
            info!("resuming at step {}", ck.state.step);
            ck.state
        }
        None => {
            write_log(&log_path, &[])?;
            TrainState::new(Model::new(config.model_config(), tc.seed)?, &tc)
        }
    };

    let mut summary = TrainSummary {
        final_step: state.step,
        log_path: log_path.clone(),
        checkpoints: Vec::new(),
        rows: Vec::new(),
    };
    while state.step < tc.steps {
        let batch = dataset.draw_batch(tc.batch, tc.seed, state.step);
        let report = train_step(&mut state, &batch, &schedule, &tc)?;
        let done = state.step;
        let last = done == tc.steps;
        let val_loss = if done % config.train.val_every == 0 || last {
            Some(validation_loss(&state.ema.shadow, &val, &schedule, tc.seed)?)
        } else {
            None
        };
        let row = LogRow {
            step: report.step,
            train_loss: report.loss,
            val_loss,
            lr: report.lr,
        };
        append_row(&log_path, &row)?;
        on_row(&row);
        summary.rows.push(row);
        if done % config.train.checkpoint_every == 0 || last {
            let path = checkpoint_path(out, done);
            save_checkpoint(&path, config, &state)?;
            summary.checkpoints.push(path);
        }
    }
    summary.final_step = state.step;
    Ok(summary)
}
