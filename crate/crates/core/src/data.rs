//! Datasets: ETT-style CSV series, sliding windows, synthetic bimodal
//! samples and seeded train/test splits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{AtdError, Result};
use crate::rng::Rng;
use crate::tensor::{Fill, Tensor};
use crate::tensor_file::{read_tensor_file, write_tensor_file};

/// Number of load features per series row.
pub const SERIES_FEATURES: usize = 6;
/// Inputs per window step: the target column followed by the features.
pub const WINDOW_INPUTS: usize = SERIES_FEATURES + 1;

pub const CSV_HEADER: &str = "date,target,f1,f2,f3,f4,f5,f6";

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub timestamp: String,
    pub target: f64,
    pub features: [f64; SERIES_FEATURES],
}

/// Rows in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeriesDataset {
    pub rows: Vec<SeriesRow>,
}

impl SeriesDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Parses a header line followed by `timestamp,target,f1..f6` rows.
pub fn parse_series_csv(text: &str, path: &Path) -> Result<SeriesDataset> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + SERIES_FEATURES {
            return Err(AtdError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                column: None,
                msg: format!("expected {} fields, found {}", 2 + SERIES_FEATURES, fields.len()),
            });
        }
        let num = |col: usize| -> Result<f64> {
            let raw = fields[col].trim();
            raw.parse::<f64>().map_err(|_| AtdError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                column: Some(col + 1),
                msg: format!("cannot parse {raw:?} as a number"),
            })
        };
        let target = num(1)?;
        let mut features = [0.0; SERIES_FEATURES];
        for (k, f) in features.iter_mut().enumerate() {
            *f = num(2 + k)?;
        }
        rows.push(SeriesRow {
            timestamp: fields[0].trim().to_string(),
            target,
            features,
        });
    }
    Ok(SeriesDataset { rows })
}

pub fn load_series_csv(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| AtdError::io(path, e))?;
    parse_series_csv(&text, path)
}

/// Shortest round-trip decimal form of every value.
pub fn series_csv_string(dataset: &SeriesDataset) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &dataset.rows {
        write!(out, "{},{}", row.timestamp, row.target).unwrap();
        for f in &row.features {
            write!(out, ",{f}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_series_csv(path: impl AsRef<Path>, dataset: &SeriesDataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, series_csv_string(dataset)).map_err(|e| AtdError::io(path, e))
}

/// Sliding windows of `window` rows (target column + 6 features per row),
/// each paired with the target `horizon` rows after the window's last row.
pub fn windowize(dataset: &SeriesDataset, window: usize, horizon: usize) -> Result<Vec<(Tensor, f64)>> {
    if window < 1 || horizon < 1 {
        return Err(AtdError::contract("windowize", "window and horizon must be >= 1"));
    }
    let need = window + horizon;
    if dataset.len() < need {
        return Err(AtdError::contract(
            "windowize",
            format!("dataset has {} rows, needs at least {need}", dataset.len()),
        ));
    }
    (0..=dataset.len() - need)
        .map(|start| {
            let mut values = Vec::with_capacity(window * WINDOW_INPUTS);
            for row in &dataset.rows[start..start + window] {
                values.push(row.target);
                values.extend_from_slice(&row.features);
            }
            let target = dataset.rows[start + window - 1 + horizon].target;
            Ok((Tensor::from_vec(&[window, WINDOW_INPUTS], values)?, target))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Value(f64),
    Class(usize),
}

/// One sample with both modalities present.
#[derive(Debug, Clone, PartialEq)]
pub struct BimodalSample {
    /// `T x input_dim`
    pub series: Tensor,
    /// `C x H x W`
    pub image: Tensor,
    pub target: Target,
}

/// Parameters of the synthetic bimodal task.
///
/// Each sample draws latents `u, v ~ N(0, 1)`. The series sits at level `u`,
/// the image is a fixed seeded pattern scaled by `v`, and the target is
/// `a u + b v` plus noise. `noise_std` is used for the observation noise on
/// both inputs and on the target. With `classes >= 2` the target is
/// replaced by its empirical quantile bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub samples: usize,
    pub window: usize,
    pub input_dim: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub a: f64,
    pub b: f64,
    pub noise_std: f64,
    pub classes: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 1000,
            window: 8,
            input_dim: WINDOW_INPUTS,
            channels: 1,
            height: 8,
            width: 8,
            a: 1.0,
            b: 1.0,
            noise_std: 0.05,
            classes: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.samples, self.window, self.input_dim, self.channels, self.height, self.width];
        if dims.contains(&0) {
            return Err(AtdError::contract("SyntheticSpec", "sizes must all be >= 1"));
        }
        if !(self.noise_std >= 0.0) || !self.a.is_finite() || !self.b.is_finite() {
            return Err(AtdError::contract("SyntheticSpec", "coefficients must be finite, noise_std >= 0"));
        }
        if self.classes == 1 {
            return Err(AtdError::contract("SyntheticSpec", "classes must be 0 (regression) or >= 2"));
        }
        Ok(())
    }
}

/// Latent draws behind a synthetic sample, exposed for analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latents {
    pub u: f64,
    pub v: f64,
}

pub fn gen_synthetic_with_latents(spec: &SyntheticSpec) -> Result<(Vec<BimodalSample>, Vec<Latents>)> {
    spec.validate()?;
    let mut root = Rng::new(spec.seed);
    let mut pattern_rng = root.fork();
    let mut rng = root.fork();
    let image_shape = [spec.channels, spec.height, spec.width];
    let pattern = Tensor::create(
        &image_shape,
        Fill::Uniform {
            rng: &mut pattern_rng,
            lo: 0.0,
            hi: 1.0,
        },
    )?;

    let mut samples = Vec::with_capacity(spec.samples);
    let mut latents = Vec::with_capacity(spec.samples);
    let mut targets = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let u = rng.gaussian(0.0, 1.0);
        let v = rng.gaussian(0.0, 1.0);
        let series: Vec<f64> = (0..spec.window * spec.input_dim)
            .map(|_| u + rng.gaussian(0.0, spec.noise_std))
            .collect();
        let image: Vec<f64> = pattern
            .data()
            .iter()
            .map(|&p| v * p + rng.gaussian(0.0, spec.noise_std))
            .collect();
        let target = spec.a * u + spec.b * v + rng.gaussian(0.0, spec.noise_std);
        samples.push(BimodalSample {
            series: Tensor::from_vec(&[spec.window, spec.input_dim], series)?,
            image: Tensor::from_vec(&image_shape, image)?,
            target: Target::Value(target),
        });
        latents.push(Latents { u, v });
        targets.push(target);
    }

    if spec.classes >= 2 {
        let thresholds = quantile_thresholds(&targets, spec.classes);
        for (s, &y) in samples.iter_mut().zip(&targets) {
            s.target = Target::Class(thresholds.iter().filter(|&&t| y > t).count());
        }
    }
    Ok((samples, latents))
}

pub fn gen_synthetic_bimodal(spec: &SyntheticSpec) -> Result<Vec<BimodalSample>> {
    gen_synthetic_with_latents(spec).map(|(s, _)| s)
}

/// `classes - 1` cut points at the empirical `k / classes` quantiles.
fn quantile_thresholds(values: &[f64], classes: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..classes)
        .map(|k| sorted[(k * sorted.len() / classes).min(sorted.len() - 1)])
        .collect()
}

/// Seeded shuffle followed by a prefix split.
pub fn split<T: Clone>(samples: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(AtdError::contract(
            "split",
            format!("train fraction must lie in (0, 1), got {train_fraction}"),
        ));
    }
    if samples.len() < 2 {
        return Err(AtdError::contract("split", "need at least 2 samples"));
    }
    let order = split_order(samples.len(), seed);
    let cut = ((samples.len() as f64 * train_fraction).round() as usize).clamp(1, samples.len() - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

/// The permutation [`split`] applies.
pub fn split_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    order
}

pub const SERIES_FILE: &str = "series.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const IMAGE_DIR: &str = "images";

/// Writes samples as a dataset directory:
///
/// * `series.csv`: every sample's window rows back to back, the first
///   window column in `target` and the rest in `f1..f6`;
/// * `images/NNNNN.atdt`: one image per sample;
/// * `manifest.txt`: `index,image,first_row,rows,target|class` lines.
///
/// Series must be `T x 7`. Images are stored in single precision.
pub fn write_dataset_dir(dir: impl AsRef<Path>, samples: &[BimodalSample]) -> Result<()> {
    let dir = dir.as_ref();
    let first = samples
        .first()
        .ok_or_else(|| AtdError::contract("write_dataset_dir", "no samples"))?;
    let classification = matches!(first.target, Target::Class(_));
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| AtdError::io(&images, e))?;

    let digits = samples.len().to_string().len().max(5);
    let mut rows = Vec::new();
    let mut manifest = String::from(if classification {
        "index,image,first_row,rows,class\n"
    } else {
        "index,image,first_row,rows,target\n"
    });
    for (i, s) in samples.iter().enumerate() {
        let (t, width) = match s.series.shape() {
            &[t, w] => (t, w),
            other => return Err(AtdError::shape("write_dataset_dir", other, &[0, WINDOW_INPUTS])),
        };
        if width != WINDOW_INPUTS {
            return Err(AtdError::shape("write_dataset_dir", s.series.shape(), &[t, WINDOW_INPUTS]));
        }
        let first_row = rows.len();
        for step in 0..t {
            let r = s.series.row(step);
            let mut features = [0.0; SERIES_FEATURES];
            features.copy_from_slice(&r[1..]);
            rows.push(SeriesRow {
                timestamp: format!("{i}:{step}"),
                target: r[0],
                features,
            });
        }
        let image = format!("{IMAGE_DIR}/{i:0digits$}.atdt");
        write_tensor_file(dir.join(&image), &s.image)?;
        let target = match (s.target, classification) {
            (Target::Value(v), false) => v.to_string(),
            (Target::Class(c), true) => c.to_string(),
            _ => return Err(AtdError::contract("write_dataset_dir", "mixed target kinds")),
        };
        writeln!(manifest, "{i},{image},{first_row},{t},{target}").unwrap();
    }
    write_series_csv(dir.join(SERIES_FILE), &SeriesDataset { rows })?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| AtdError::io(&path, e))
}

/// Reads a directory written by [`write_dataset_dir`].
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<Vec<BimodalSample>> {
    let dir = dir.as_ref();
    let series = load_series_csv(dir.join(SERIES_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| AtdError::io(&path, e))?;
    let parse_err = |line: usize, column: Option<usize>, msg: String| AtdError::Parse {
        path: path.clone(),
        line,
        column,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let classification = match lines.next() {
        Some((_, "index,image,first_row,rows,target")) => false,
        Some((_, "index,image,first_row,rows,class")) => true,
        _ => return Err(parse_err(1, None, "unrecognised manifest header".into())),
    };
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(parse_err(line_no, None, format!("expected 5 fields, found {}", fields.len())));
        }
        let int = |col: usize| {
            fields[col]
                .parse::<usize>()
                .map_err(|_| parse_err(line_no, Some(col + 1), format!("bad integer {:?}", fields[col])))
        };
        let (first_row, count) = (int(2)?, int(3)?);
        if count == 0 || first_row + count > series.len() {
            return Err(parse_err(
                line_no,
                Some(3),
                format!("rows {first_row}..{} outside the series file", first_row + count),
            ));
        }
        let mut values = Vec::with_capacity(count * WINDOW_INPUTS);
        for row in &series.rows[first_row..first_row + count] {
            values.push(row.target);
            values.extend_from_slice(&row.features);
        }
        let target = if classification {
            Target::Class(int(4)?)
        } else {
            Target::Value(
                fields[4]
                    .parse()
                    .map_err(|_| parse_err(line_no, Some(5), format!("bad number {:?}", fields[4])))?,
            )
        };
        samples.push(BimodalSample {
            series: Tensor::from_vec(&[count, WINDOW_INPUTS], values)?,
            image: read_tensor_file(dir.join(fields[1]))?,
            target,
        });
    }
    Ok(samples)
}
