//! Losses, metrics, SGD with momentum, and the train/evaluate loops.

use std::fmt::Write as _;

use crate::data::{BimodalSample, Target};
use crate::error::{AtdError, Result};
use crate::graph::{Graph, Var};
use crate::model::BimodalModel;
use crate::params::ParamStore;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "regression" => Some(Task::Regression),
            "classification" => Some(Task::Classification),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub task: Task,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 200,
            batch_size: 16,
            seed: 0,
            task: Task::Regression,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(AtdError::contract("TrainConfig", "learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AtdError::contract("TrainConfig", "momentum must lie in [0, 1)"));
        }
        if self.batch_size < 1 {
            return Err(AtdError::contract("TrainConfig", "batch size must be >= 1"));
        }
        Ok(())
    }
}

/// `(1/n) sum (y - yhat)^2` over two equally shaped tensors.
pub fn mse_loss(g: &mut Graph, y: Var, yhat: Var) -> Result<Var> {
    let diff = g.sub(yhat, y)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    g.cross_entropy(logits, label)
}

fn check_lengths(op: &'static str, y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(AtdError::shape(op, &[y.len()], &[yhat.len()]));
    }
    if y.is_empty() {
        return Err(AtdError::contract(op, "need at least one value"));
    }
    Ok(())
}

pub fn mae_metric(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths("mae_metric", y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn mse_metric(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths("mse_metric", y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Accuracy and macro-averaged F1. A class whose precision and recall are
/// both zero (or undefined) contributes an F1 of 0.
pub fn classification_metrics(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<(f64, f64)> {
    if predictions.len() != labels.len() {
        return Err(AtdError::shape("classification_metrics", &[predictions.len()], &[labels.len()]));
    }
    if labels.is_empty() || n_classes == 0 {
        return Err(AtdError::contract("classification_metrics", "need at least one sample and one class"));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(AtdError::contract(
            "classification_metrics",
            format!("class {bad} out of range for {n_classes} classes"),
        ));
    }
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut actual = vec![0usize; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        predicted[p] += 1;
        actual[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    let accuracy = tp.iter().sum::<usize>() as f64 / labels.len() as f64;
    let f1_sum: f64 = (0..n_classes)
        .map(|c| {
            // 2PR/(P+R) simplifies to 2TP/(predicted + actual)
            let denom = predicted[c] + actual[c];
            if tp[c] == 0 || denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok((accuracy, f1_sum / n_classes as f64))
}

/// Velocity buffers, one per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            velocity: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v <- momentum v + g; w <- w - lr v` for every parameter.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(AtdError::contract(
            "sgd_step",
            format!(
                "{} parameters, {} gradients, {} velocity buffers",
                params.len(),
                grads.len(),
                state.velocity.len()
            ),
        ));
    }
    for (((name, w), g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if g.len() != w.len() || v.len() != w.len() {
            return Err(AtdError::contract(
                "sgd_step",
                format!("gradient for {name} has {} entries, parameter has {}", g.len(), w.len()),
            ));
        }
        for ((w, &g), v) in w.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub task: Option<Task>,
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

impl MetricsReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }

    /// Flat `key=value` text, one entry per line, in a fixed key order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(task) = self.task {
            writeln!(out, "task={}", task.name()).unwrap();
        }
        let metrics = [
            ("mae", self.mae),
            ("mse", self.mse),
            ("accuracy", self.accuracy),
            ("macro_f1", self.macro_f1),
        ];
        for (key, value) in metrics {
            if let Some(v) = value {
                writeln!(out, "{key}={v:?}").unwrap();
            }
        }
        if self.macro_f1.is_some() {
            out.push_str("f1_average=macro\n");
        }
        if let Some(v) = self.final_loss() {
            writeln!(out, "final_loss={v:?}").unwrap();
        }
        let trace: Vec<String> = self.loss_trace.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "loss_trace={}", trace.join(",")).unwrap();
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |detail: String| AtdError::contract("MetricsReport::parse", detail);
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
        let mut report = MetricsReport::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("no '=' in {line:?}")))?;
            match key {
                "task" => report.task = Some(Task::parse(value).ok_or_else(|| bad(format!("unknown task {value}")))?),
                "mae" => report.mae = Some(num(value)?),
                "mse" => report.mse = Some(num(value)?),
                "accuracy" => report.accuracy = Some(num(value)?),
                "macro_f1" => report.macro_f1 = Some(num(value)?),
                "final_loss" | "f1_average" => {}
                "loss_trace" if value.is_empty() => report.loss_trace.clear(),
                "loss_trace" => report.loss_trace = value.split(',').map(num).collect::<Result<_>>()?,
                other => return Err(bad(format!("unknown key {other}"))),
            }
        }
        Ok(report)
    }
}

fn sample_loss(g: &mut Graph, model: &BimodalModel, out: Var, target: Target, task: Task) -> Result<Var> {
    match (task, target) {
        (Task::Regression, Target::Value(y)) => {
            let y = g.constant(crate::tensor::Tensor::from_vec(&[1], vec![y])?);
            if model.config().outputs != 1 {
                return Err(AtdError::contract("train", "regression needs a single output"));
            }
            mse_loss(g, y, out)
        }
        (Task::Classification, Target::Class(label)) => cross_entropy(g, out, label),
        (task, target) => Err(AtdError::contract(
            "train",
            format!("{} task given target {target:?}", task.name()),
        )),
    }
}

/// Mean loss over a batch plus the gradient of every parameter.
pub fn batch_loss_and_grads(
    model: &BimodalModel,
    batch: &[&BimodalSample],
    task: Task,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g);
    let mut losses = Vec::with_capacity(batch.len());
    for sample in batch {
        let out = model.forward(&mut g, &bound, sample)?;
        losses.push(sample_loss(&mut g, model, out, sample.target, task)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let loss = g.scale(total, 1.0 / batch.len() as f64);
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(model.params().iter())
        .map(|(&v, (_, t))| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Trains in place. Each epoch reshuffles the data with a generator seeded
/// from `config.seed`, runs mini-batch SGD and records the epoch's mean loss.
/// The returned report carries the loss trace and metrics on `dataset`.
pub fn train(model: &mut BimodalModel, dataset: &[BimodalSample], config: &TrainConfig) -> Result<MetricsReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(AtdError::contract("train", "dataset is empty"));
    }
    let mut rng = Rng::new(config.seed);
    let mut state = OptimizerState::new(model.params());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut weighted = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&BimodalSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = batch_loss_and_grads(model, &batch, config.task)?;
            if !loss.is_finite() {
                return Err(AtdError::Divergence { epoch, batch: b + 1, loss });
            }
            debug_assert!(grads.iter().flatten().all(|g| g.is_finite()), "non-finite gradient");
            sgd_step(model.params_mut(), &grads, &mut state, config.learning_rate, config.momentum)?;
            weighted += loss * batch.len() as f64;
        }
        trace.push(weighted / dataset.len() as f64);
    }

    let mut report = evaluate(model, dataset, config.task)?;
    report.loss_trace = trace;
    Ok(report)
}

/// Metrics on `dataset`; parameters are only read.
pub fn evaluate(model: &BimodalModel, dataset: &[BimodalSample], task: Task) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(AtdError::contract("evaluate", "dataset is empty"));
    }
    let mut report = MetricsReport {
        task: Some(task),
        ..Default::default()
    };
    match task {
        Task::Regression => {
            let mut y = Vec::with_capacity(dataset.len());
            let mut yhat = Vec::with_capacity(dataset.len());
            for s in dataset {
                let Target::Value(t) = s.target else {
                    return Err(AtdError::contract("evaluate", "regression needs real-valued targets"));
                };
                y.push(t);
                yhat.push(model.predict(s)?[0]);
            }
            report.mae = Some(mae_metric(&y, &yhat)?);
            report.mse = Some(mse_metric(&y, &yhat)?);
        }
        Task::Classification => {
            let n_classes = model.config().outputs;
            let mut labels = Vec::with_capacity(dataset.len());
            let mut preds = Vec::with_capacity(dataset.len());
            for s in dataset {
                let Target::Class(c) = s.target else {
                    return Err(AtdError::contract("evaluate", "classification needs class targets"));
                };
                labels.push(c);
                preds.push(argmax(&model.predict(s)?));
            }
            let (acc, f1) = classification_metrics(&preds, &labels, n_classes)?;
            report.accuracy = Some(acc);
            report.macro_f1 = Some(f1);
        }
    }
    Ok(report)
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mse_loss_examples() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let yhat = g.param(Tensor::from_vec(&[2], vec![1.0, 3.0]).unwrap());
        let l = mse_loss(&mut g, y, yhat).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.5);
        let same = mse_loss(&mut g, y, y).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);

        let mut g = Graph::new();
        let y = g.constant(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let yhat = g.param(Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let l = mse_loss(&mut g, y, yhat).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(yhat).unwrap(), &[6.0]);

        let short = g.constant(Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap());
        assert!(matches!(mse_loss(&mut g, short, yhat), Err(AtdError::Shape { .. })));
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae_metric(&[1.0, 2.0], &[1.0, 3.0]).unwrap(), 0.5);
        assert_eq!(mae_metric(&[4.0, -1.0], &[4.0, -1.0]).unwrap(), 0.0);
        assert_eq!(mae_metric(&[0.0, 0.0], &[-1.0, 1.0]).unwrap(), 1.0);
        assert!(mae_metric(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(&[2], vec![30.0, 0.0]).unwrap());
        let l = cross_entropy(&mut g, z, 0).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-9);
    }

    #[test]
    fn classification_metric_examples() {
        assert_eq!(classification_metrics(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), (1.0, 1.0));
        let (acc, f1) = classification_metrics(&[0, 0], &[0, 1], 2).unwrap();
        assert_eq!(acc, 0.5);
        assert!((f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(classification_metrics(&[1, 0], &[0, 1], 2).unwrap(), (0.0, 0.0));
        assert!(classification_metrics(&[0], &[2], 2).is_err());
    }

    fn one_param(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[1], vec![w]).unwrap()).unwrap();
        s
    }

    #[test]
    fn sgd_examples() {
        let mut p = one_param(1.0);
        let mut st = OptimizerState::new(&p);
        sgd_step(&mut p, &[vec![2.0]], &mut st, 0.1, 0.0).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);

        let mut p = one_param(1.0);
        let mut st = OptimizerState::new(&p);
        sgd_step(&mut p, &[vec![0.0]], &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);

        let mut p = one_param(0.0);
        let mut st = OptimizerState::new(&p);
        sgd_step(&mut p, &[vec![1.0]], &mut st, 1.0, 0.9).unwrap();
        sgd_step(&mut p, &[vec![1.0]], &mut st, 1.0, 0.9).unwrap();
        assert!((p.get("w").unwrap().data()[0] + 2.9).abs() < 1e-15);

        assert!(sgd_step(&mut p, &[vec![1.0, 2.0]], &mut st, 1.0, 0.9).is_err());
        assert!(sgd_step(&mut p, &[], &mut st, 1.0, 0.9).is_err());
    }

    #[test]
    fn report_text_round_trip() {
        let r = MetricsReport {
            task: Some(Task::Regression),
            mae: Some(0.125),
            mse: Some(1.0 / 3.0),
            loss_trace: vec![2.0, 0.5],
            ..Default::default()
        };
        let text = r.to_text();
        assert!(text.contains("final_loss=0.5\n"));
        assert_eq!(MetricsReport::parse(&text).unwrap(), r);
    }

    #[test]
    fn argmax_takes_first_of_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
