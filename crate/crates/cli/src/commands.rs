use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use atd_core::data::{
    gen_synthetic_bimodal, load_dataset_dir, load_series_csv, split, windowize, write_dataset_dir, BimodalSample,
    Target, WINDOW_INPUTS,
};
use atd_core::gradsuite::{run_suite, ComponentCheck, TOLERANCE};
use atd_core::graph::{with_backward_fault, OpKind};
use atd_core::model::{BimodalModel, ModelConfig};
use atd_core::params::{load_params, save_params};
use atd_core::training::{evaluate, train, MetricsReport, Task};
use atd_core::AtdError;

use crate::config::{DataSource, EvalSplit, LoadError, RunConfig};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_SHAPE: u8 = 5;
pub const EXIT_GRADCHECK: u8 = 6;

pub const DATA_SUBDIR: &str = "data";
pub const PARAMS_SUBDIR: &str = "params";
pub const TRAIN_METRICS: &str = "metrics.txt";
pub const EVAL_METRICS: &str = "eval_metrics.txt";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

fn fail(code: u8, msg: impl Into<String>) -> CliError {
    CliError { code, msg: msg.into() }
}

/// Exit code for an error raised while handling data (not parameters).
fn data_error(e: AtdError) -> CliError {
    let code = match e {
        AtdError::Divergence { .. } => EXIT_DIVERGENCE,
        AtdError::Shape { .. } => EXIT_SHAPE,
        _ => EXIT_IO,
    };
    fail(code, e.to_string())
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    RunConfig::load(path).map_err(|e| match e {
        LoadError::Io(msg) => fail(EXIT_IO, msg),
        LoadError::Config(c) => fail(EXIT_CONFIG, c.to_string()),
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))
}

/// Samples plus the dimensions the model must be built with.
pub struct Dataset {
    pub samples: Vec<BimodalSample>,
    pub model: ModelConfig,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let samples = match &cfg.source {
        DataSource::Synthetic => gen_synthetic_bimodal(&cfg.synth).map_err(|e| fail(EXIT_CONFIG, e.to_string()))?,
        DataSource::Dir(dir) => load_dataset_dir(dir).map_err(data_error)?,
        DataSource::SeriesCsv(path) => {
            let series = load_series_csv(path).map_err(data_error)?;
            windowize(&series, cfg.window, cfg.horizon)
                .map_err(|e| fail(EXIT_CONFIG, format!("config key `data.window`: {e}")))?
                .into_iter()
                .map(|(window, y)| {
                    let image = window.reshaped(&[1, cfg.window, WINDOW_INPUTS])?;
                    Ok(BimodalSample {
                        series: window,
                        image,
                        target: Target::Value(y),
                    })
                })
                .collect::<Result<Vec<_>, AtdError>>()
                .map_err(data_error)?
        }
    };
    let first = samples
        .first()
        .ok_or_else(|| fail(EXIT_IO, "dataset holds no samples"))?;
    for s in &samples {
        if s.series.shape()[1..] != first.series.shape()[1..] || s.image.shape() != first.image.shape() {
            return Err(fail(
                EXIT_IO,
                format!(
                    "inconsistent sample shapes: {:?}/{:?} vs {:?}/{:?}",
                    s.series.shape(),
                    s.image.shape(),
                    first.series.shape(),
                    first.image.shape()
                ),
            ));
        }
    }
    let outputs = match cfg.task() {
        Task::Regression => {
            if !samples.iter().all(|s| matches!(s.target, Target::Value(_))) {
                return Err(fail(EXIT_CONFIG, "config key `task`: regression, but the dataset holds class labels"));
            }
            1
        }
        Task::Classification => {
            let mut top = 0;
            for s in &samples {
                match s.target {
                    Target::Class(c) => top = top.max(c),
                    Target::Value(_) => {
                        return Err(fail(
                            EXIT_CONFIG,
                            "config key `task`: classification, but the dataset holds real targets",
                        ))
                    }
                }
            }
            (top + 1).max(2)
        }
    };
    let model = cfg
        .model
        .model_config(first.series.shape()[1], first.image.shape()[0], outputs);
    Ok(Dataset { samples, model })
}

/// `(train, eval)` portions under the configured split.
pub fn split_dataset(cfg: &RunConfig, samples: &[BimodalSample]) -> Result<(Vec<BimodalSample>, Vec<BimodalSample>), CliError> {
    let (train, test) = split(samples, cfg.train_fraction, cfg.split_seed).map_err(|e| fail(EXIT_CONFIG, e.to_string()))?;
    let eval = match cfg.eval_split {
        EvalSplit::Train => train.clone(),
        EvalSplit::Test => test,
        EvalSplit::All => samples.to_vec(),
    };
    Ok((train, eval))
}

pub fn cmd_synth(config: &Path) -> Result<PathBuf, CliError> {
    let cfg = load_config(config)?;
    if cfg.synth.input_dim != WINDOW_INPUTS {
        return Err(fail(
            EXIT_CONFIG,
            format!(
                "config key `synth.input_dim`: the series CSV layout holds {WINDOW_INPUTS} columns per step, got {}",
                cfg.synth.input_dim
            ),
        ));
    }
    let samples = gen_synthetic_bimodal(&cfg.synth).map_err(|e| fail(EXIT_CONFIG, e.to_string()))?;
    let dir = cfg.output_dir.join(DATA_SUBDIR);
    create_dir(&dir)?;
    write_dataset_dir(&dir, &samples).map_err(|e| fail(EXIT_IO, e.to_string()))?;
    println!("wrote {} samples to {}", samples.len(), dir.display());
    Ok(dir)
}

pub fn cmd_train(config: &Path) -> Result<MetricsReport, CliError> {
    let cfg = load_config(config)?;
    let data = load_dataset(&cfg)?;
    let (train_set, eval_set) = split_dataset(&cfg, &data.samples)?;
    let mut model = BimodalModel::new(data.model, cfg.model.seed).map_err(|e| fail(EXIT_CONFIG, e.to_string()))?;

    let trained = train(&mut model, &train_set, &cfg.train).map_err(|e| match e {
        AtdError::Divergence { epoch, batch, loss } => fail(
            EXIT_DIVERGENCE,
            format!("training diverged: loss {loss} at epoch {epoch}, batch {batch}"),
        ),
        other => data_error(other),
    })?;
    // Evaluate exactly what is persisted.
    model.params_mut().quantize_f32();
    let mut report = evaluate(&model, &eval_set, cfg.task()).map_err(data_error)?;
    report.loss_trace = trained.loss_trace;

    create_dir(&cfg.output_dir)?;
    save_params(cfg.output_dir.join(PARAMS_SUBDIR), model.params()).map_err(|e| fail(EXIT_IO, e.to_string()))?;
    write_file(&cfg.output_dir.join(TRAIN_METRICS), &report.to_text())?;
    eprintln!("metrics on the {} split ({} samples)", cfg.eval_split.name(), eval_set.len());
    print!("{}", report.to_text());
    Ok(report)
}

pub fn cmd_eval(config: &Path, params_index: &Path) -> Result<MetricsReport, CliError> {
    let cfg = load_config(config)?;
    let data = load_dataset(&cfg)?;
    let (_, eval_set) = split_dataset(&cfg, &data.samples)?;
    let params = load_params(params_index).map_err(|e| match e {
        AtdError::Io { .. } => fail(EXIT_IO, e.to_string()),
        other => fail(EXIT_SHAPE, format!("unreadable parameters: {other}")),
    })?;
    let model = BimodalModel::from_params(data.model, params)
        .map_err(|e| fail(EXIT_SHAPE, format!("parameters do not match the configured model: {e}")))?;
    let report = evaluate(&model, &eval_set, cfg.task()).map_err(data_error)?;
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join(EVAL_METRICS), &report.to_text())?;
    eprintln!("metrics on the {} split ({} samples)", cfg.eval_split.name(), eval_set.len());
    print!("{}", report.to_text());
    Ok(report)
}

pub fn gradcheck_table(checks: &[ComponentCheck]) -> String {
    let mut out = format!("{:<28} {:>14}  status\n", "component", "max_rel_error");
    for c in checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        out.push_str(&format!("{:<28} {:>14.3e}  {status}\n", c.component, c.max_rel_error));
    }
    out
}

pub fn cmd_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<Vec<ComponentCheck>, CliError> {
    let checks = match corrupt {
        None => run_suite(seed),
        Some(name) => {
            let kind = OpKind::parse(name).ok_or_else(|| fail(EXIT_CONFIG, format!("unknown op {name:?}")))?;
            with_backward_fault(kind, || run_suite(seed))
        }
    }
    .map_err(|e| fail(EXIT_GRADCHECK, format!("gradient check could not run: {e}")))?;
    print!("{}", gradcheck_table(&checks));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.component).collect();
    if failed.is_empty() {
        Ok(checks)
    } else {
        Err(fail(
            EXIT_GRADCHECK,
            format!("gradient check over tolerance {TOLERANCE:e}: {}", failed.join(", ")),
        ))
    }
}
