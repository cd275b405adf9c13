//! Run configuration: a flat `key=value` file, one key per line, `#` starts a
//! comment. Every key has a default; unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use atd_core::atd::AtdConfig;
use atd_core::data::SyntheticSpec;
use atd_core::encoders::{ImageEncoderConfig, SeriesEncoderConfig};
use atd_core::model::{ModelConfig, ModelVariant};
use atd_core::training::{Task, TrainConfig};

/// Where samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated in memory from `synth.*`.
    Synthetic,
    /// A directory written by `atd synth`.
    Dir(PathBuf),
    /// An ETT-style CSV; each window doubles as a `1 x T x 7` image.
    SeriesCsv(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
    All,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Test => "test",
            EvalSplit::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    pub variant: ModelVariant,
    /// Seed for parameter initialization.
    pub seed: u64,
    pub d: usize,
    pub d_h: usize,
    pub rounds: usize,
    pub epsilon: f64,
    pub hidden: usize,
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
}

impl ModelDims {
    pub fn model_config(&self, input_dim: usize, in_channels: usize, outputs: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            series: SeriesEncoderConfig {
                input_dim,
                hidden: self.hidden,
                d: self.d,
            },
            image: ImageEncoderConfig {
                in_channels,
                channels: self.channels,
                kernel_size: self.kernel,
                blocks: self.blocks,
                d: self.d,
            },
            atd: AtdConfig {
                d: self.d,
                d_h: self.d_h,
                rounds: self.rounds,
                epsilon: self.epsilon,
            },
            outputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: DataSource,
    pub window: usize,
    pub horizon: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub synth: SyntheticSpec,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub eval_split: EvalSplit,
    pub output_dir: PathBuf,
}

/// Every accepted key with its default, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("task", "regression"),
    ("data.source", "synthetic"),
    ("data.dir", ""),
    ("data.csv", ""),
    ("data.window", "8"),
    ("data.horizon", "1"),
    ("data.train_fraction", "0.8"),
    ("data.split_seed", "0"),
    ("synth.seed", "0"),
    ("synth.samples", "1000"),
    ("synth.window", "8"),
    ("synth.input_dim", "7"),
    ("synth.channels", "1"),
    ("synth.height", "8"),
    ("synth.width", "8"),
    ("synth.a", "1"),
    ("synth.b", "1"),
    ("synth.noise_std", "0.05"),
    ("synth.classes", "0"),
    ("model.variant", "fused"),
    ("model.seed", "0"),
    ("model.d", "16"),
    ("model.d_h", "16"),
    ("model.rounds", "2"),
    ("model.epsilon", "1e-5"),
    ("model.hidden", "16"),
    ("model.channels", "4"),
    ("model.blocks", "2"),
    ("model.kernel", "3"),
    ("train.lr", "0.01"),
    ("train.momentum", "0.9"),
    ("train.epochs", "200"),
    ("train.batch_size", "16"),
    ("train.seed", "0"),
    ("eval.split", "test"),
    ("output.dir", "out"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "config key `{k}`: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError {
        key: Some(key.to_string()),
        msg: msg.into(),
    }
}

/// Raw values, defaults first, overridden by the file.
struct Values {
    entries: Vec<(&'static str, String)>,
}

impl Values {
    fn raw(&self, key: &str) -> &str {
        &self.entries.iter().find(|(k, _)| *k == key).expect("known key").1
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| err(key, format!("cannot parse {raw:?} as {}", std::any::type_name::<T>())))
    }
}

fn parse_values(text: &str) -> Result<Values, ConfigError> {
    let mut entries: Vec<(&'static str, String)> = KEYS.iter().map(|&(k, v)| (k, v.to_string())).collect();
    let mut seen = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
            key: None,
            msg: format!("line {}: expected key=value, got {line:?}", i + 1),
        })?;
        let key = key.trim();
        let slot = entries
            .iter_mut()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| err(key, format!("unknown key on line {}", i + 1)))?;
        if seen.contains(&slot.0) {
            return Err(err(key, format!("set twice (line {})", i + 1)));
        }
        seen.push(slot.0);
        slot.1 = value.trim().to_string();
    }
    Ok(Values { entries })
}

impl RunConfig {
    /// Parses `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let v = parse_values(text)?;
        let path = |key: &str| -> Result<PathBuf, ConfigError> {
            let raw = v.raw(key);
            if raw.is_empty() {
                return Err(err(key, "must be set for this data.source"));
            }
            Ok(base.join(raw))
        };

        let task = Task::parse(v.raw("task")).ok_or_else(|| err("task", "expected regression or classification"))?;
        let source = match v.raw("data.source") {
            "synthetic" => DataSource::Synthetic,
            "dir" => DataSource::Dir(path("data.dir")?),
            "series_csv" => DataSource::SeriesCsv(path("data.csv")?),
            _ => return Err(err("data.source", "expected synthetic, dir or series_csv")),
        };
        let synth = SyntheticSpec {
            seed: v.parse("synth.seed")?,
            samples: v.parse("synth.samples")?,
            window: v.parse("synth.window")?,
            input_dim: v.parse("synth.input_dim")?,
            channels: v.parse("synth.channels")?,
            height: v.parse("synth.height")?,
            width: v.parse("synth.width")?,
            a: v.parse("synth.a")?,
            b: v.parse("synth.b")?,
            noise_std: v.parse("synth.noise_std")?,
            classes: v.parse("synth.classes")?,
        };
        for (key, value) in [
            ("synth.samples", synth.samples),
            ("synth.window", synth.window),
            ("synth.input_dim", synth.input_dim),
            ("synth.channels", synth.channels),
            ("synth.height", synth.height),
            ("synth.width", synth.width),
        ] {
            if value == 0 {
                return Err(err(key, "must be >= 1"));
            }
        }
        for (key, value) in [("synth.a", synth.a), ("synth.b", synth.b), ("synth.noise_std", synth.noise_std)] {
            if !value.is_finite() {
                return Err(err(key, "must be finite"));
            }
        }
        if synth.noise_std < 0.0 {
            return Err(err("synth.noise_std", "must be >= 0"));
        }
        if synth.classes == 1 {
            return Err(err("synth.classes", "must be 0 (regression) or >= 2"));
        }
        if task == Task::Classification && source == DataSource::Synthetic && synth.classes < 2 {
            return Err(err("synth.classes", "classification needs synth.classes >= 2"));
        }
        if task == Task::Regression && synth.classes != 0 && source == DataSource::Synthetic {
            return Err(err("synth.classes", "regression needs synth.classes = 0"));
        }
        if task == Task::Classification && matches!(source, DataSource::SeriesCsv(_)) {
            return Err(err("task", "series_csv data only supports regression"));
        }

        let model = ModelDims {
            variant: ModelVariant::parse(v.raw("model.variant"))
                .ok_or_else(|| err("model.variant", "expected fused, series or image"))?,
            seed: v.parse("model.seed")?,
            d: v.parse("model.d")?,
            d_h: v.parse("model.d_h")?,
            rounds: v.parse("model.rounds")?,
            epsilon: v.parse("model.epsilon")?,
            hidden: v.parse("model.hidden")?,
            channels: v.parse("model.channels")?,
            blocks: v.parse("model.blocks")?,
            kernel: v.parse("model.kernel")?,
        };
        for (key, value) in [
            ("model.hidden", model.hidden),
            ("model.channels", model.channels),
            ("model.kernel", model.kernel),
        ] {
            if value == 0 {
                return Err(err(key, "must be >= 1"));
            }
        }
        if model.kernel.is_multiple_of(2) {
            return Err(err("model.kernel", "must be odd"));
        }
        if model.d < 2 {
            return Err(err("model.d", "must be >= 2"));
        }
        if model.d_h == 0 {
            return Err(err("model.d_h", "must be >= 1"));
        }
        if model.rounds == 0 {
            return Err(err("model.rounds", "must be >= 1"));
        }
        if !(model.epsilon > 0.0 && model.epsilon.is_finite()) {
            return Err(err("model.epsilon", "must be finite and > 0"));
        }

        let train = TrainConfig {
            learning_rate: v.parse("train.lr")?,
            momentum: v.parse("train.momentum")?,
            epochs: v.parse("train.epochs")?,
            batch_size: v.parse("train.batch_size")?,
            seed: v.parse("train.seed")?,
            task,
        };
        if !(train.learning_rate >= 0.0 && train.learning_rate.is_finite()) {
            return Err(err("train.lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&train.momentum) {
            return Err(err("train.momentum", "must lie in [0, 1)"));
        }
        if train.batch_size == 0 {
            return Err(err("train.batch_size", "must be >= 1"));
        }

        let train_fraction: f64 = v.parse("data.train_fraction")?;
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(err("data.train_fraction", "must lie strictly between 0 and 1"));
        }
        let window: usize = v.parse("data.window")?;
        let horizon: usize = v.parse("data.horizon")?;
        if window == 0 || horizon == 0 {
            let key = if window == 0 { "data.window" } else { "data.horizon" };
            return Err(err(key, "must be >= 1"));
        }
        let eval_split = match v.raw("eval.split") {
            "train" => EvalSplit::Train,
            "test" => EvalSplit::Test,
            "all" => EvalSplit::All,
            _ => return Err(err("eval.split", "expected train, test or all")),
        };
        let output = v.raw("output.dir");
        if output.is_empty() {
            return Err(err("output.dir", "must not be empty"));
        }

        Ok(Self {
            source,
            window,
            horizon,
            train_fraction,
            split_seed: v.parse("data.split_seed")?,
            synth,
            model,
            train,
            eval_split,
            output_dir: base.join(output),
        })
    }

    pub fn load(path: &Path) -> Result<Self, LoadError> {
        let text = fs::read_to_string(path).map_err(|e| LoadError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(LoadError::Config)
    }

    pub fn task(&self) -> Task {
        self.train.task
    }
}

#[derive(Debug)]
pub enum LoadError {
    Io(String),
    Config(ConfigError),
}
