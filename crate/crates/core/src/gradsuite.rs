//! Per-component gradient checks at small random shapes.
//!
//! Every component is reduced to a scalar by a fixed random probe
//! (`sum(out * probe)`), not a plain mean: a uniform upstream gradient is
//! annihilated by softmax and row shifts and would hide broken rules.

use crate::atd::{
    alternate_fuse, atd_fuse, atd_weights, guidance_matrix, integrate, normalize, telescopic_displace, AtdConfig,
    AtdParams, NormalizedFeature,
};
use crate::data::{BimodalSample, Target};
use crate::encoders::{
    conv2d, encode_image, encode_series, lstm_step, residual_block, ConvParams, ConvSpec, ImageEncoderConfig,
    LstmParams, ResidualBlockParams, SeriesEncoderConfig,
};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_inputs, DEFAULT_STEP};
use crate::graph::{Graph, Var};
use crate::model::{BimodalModel, ModelConfig, ModelVariant};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Fill, Tensor};
use crate::training::mse_loss;

/// Maximum relative error a component may show.
pub const TOLERANCE: f64 = 1e-4;

/// Fusion width used by the suite.
pub const SUITE_D: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub max_rel_error: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub const COMPONENTS: [&str; 12] = [
    "conv2d",
    "residual_block",
    "lstm_step",
    "normalize",
    "guidance_weights_integrate",
    "telescopic_displace",
    "atd_fuse",
    "alternate_fuse_r3",
    "series_encoder",
    "image_encoder",
    "full_model",
    "full_model_classifier",
];

fn uniform(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::create(
        shape,
        Fill::Uniform {
            rng,
            lo: -scale,
            hi: scale,
        },
    )
    .expect("suite shapes are valid")
}

fn probe_loss(g: &mut Graph, out: Var, probe: &Tensor) -> Result<Var> {
    let p = g.constant(probe.reshaped(g.shape(out))?);
    let weighted = g.mul(out, p)?;
    Ok(g.sum(weighted))
}

fn worst(errors: Vec<f64>) -> f64 {
    errors.into_iter().fold(0.0, f64::max)
}

fn conv_spec_check(rng: &mut Rng) -> Result<f64> {
    let spec = ConvSpec {
        kernel_size: 3,
        stride: 2,
        padding: 1,
        in_channels: 2,
        out_channels: 3,
    };
    let inputs = vec![uniform(rng, &[2, 5, 5], 1.0), uniform(rng, &[3, 2, 3, 3], 0.5), uniform(rng, &[3], 0.5)];
    let probe = uniform(rng, &[3 * 3 * 3], 1.0);
    grad_check_inputs(
        |g, v| {
            let layer = ConvParams::new(g, spec, v[1], v[2])?;
            let y = conv2d(g, v[0], &layer)?;
            probe_loss(g, y, &probe)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .map(worst)
}

fn residual_check(rng: &mut Rng) -> Result<f64> {
    let spec = ConvSpec::same(2, 2, 3);
    let inputs = vec![
        uniform(rng, &[2, 4, 4], 1.0),
        uniform(rng, &[2, 2, 3, 3], 0.5),
        uniform(rng, &[2], 0.5),
        uniform(rng, &[2, 2, 3, 3], 0.5),
        uniform(rng, &[2], 0.5),
    ];
    let probe = uniform(rng, &[32], 1.0);
    grad_check_inputs(
        |g, v| {
            let a = ConvParams::new(g, spec, v[1], v[2])?;
            let b = ConvParams::new(g, spec, v[3], v[4])?;
            let y = residual_block(g, v[0], &ResidualBlockParams::new(a, b)?)?;
            probe_loss(g, y, &probe)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .map(worst)
}

fn lstm_check(rng: &mut Rng) -> Result<f64> {
    let (hidden, input) = (3, 2);
    let mut inputs = vec![
        uniform(rng, &[input], 1.0),
        uniform(rng, &[hidden], 1.0),
        uniform(rng, &[hidden], 1.0),
    ];
    for _ in 0..4 {
        inputs.push(uniform(rng, &[hidden, hidden + input], 0.8));
    }
    for _ in 0..4 {
        inputs.push(uniform(rng, &[hidden], 0.5));
    }
    let probe_h = uniform(rng, &[hidden], 1.0);
    let probe_c = uniform(rng, &[hidden], 1.0);
    grad_check_inputs(
        |g, v| {
            let p = LstmParams::new(g, [v[3], v[4], v[5], v[6]], [v[7], v[8], v[9], v[10]])?;
            let (h, c) = lstm_step(g, v[0], v[1], v[2], &p)?;
            let lh = probe_loss(g, h, &probe_h)?;
            let lc = probe_loss(g, c, &probe_c)?;
            g.add(lh, lc)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .map(worst)
}

fn suite_atd_config(rounds: usize) -> AtdConfig {
    AtdConfig {
        d: SUITE_D,
        d_h: SUITE_D,
        rounds,
        epsilon: 1e-5,
    }
}

fn normalize_check(rng: &mut Rng) -> Result<f64> {
    let x = uniform(rng, &[3, SUITE_D], 1.0);
    let probe = uniform(rng, &[3 * SUITE_D], 1.0);
    grad_check(
        |g, x| {
            let n = normalize(g, x, 1e-5)?;
            probe_loss(g, n.var(), &probe)
        },
        &x,
        DEFAULT_STEP,
    )
}

fn attention_chain_check(rng: &mut Rng) -> Result<f64> {
    let (m, n, d) = (3, 4, SUITE_D);
    let inputs = vec![uniform(rng, &[m, d], 1.5), uniform(rng, &[n, d], 1.5), uniform(rng, &[d, d], 0.5)];
    let probe = uniform(rng, &[m * d], 1.0);
    grad_check_inputs(
        |g, v| {
            let a = NormalizedFeature::assume(g, v[0])?;
            let b = NormalizedFeature::assume(g, v[1])?;
            let gm = guidance_matrix(g, &a, &b)?;
            let w = atd_weights(g, gm, 2)?;
            let o = integrate(g, w, &b, v[2])?;
            probe_loss(g, o, &probe)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .map(worst)
}

fn atd_param_tensors(rng: &mut Rng) -> Vec<Tensor> {
    let d = SUITE_D;
    vec![
        uniform(rng, &[d, d], 0.6),
        uniform(rng, &[d, d], 0.6),
        uniform(rng, &[d], 0.3),
        uniform(rng, &[1], 1.0),
    ]
}

fn bind_atd(g: &Graph, cfg: AtdConfig, v: &[Var]) -> Result<AtdParams> {
    AtdParams::new(g, cfg, v[0], v[1], v[2], v[3])
}

fn displacement_check(rng: &mut Rng) -> Result<f64> {
    let d = SUITE_D;
    let mut inputs = vec![uniform(rng, &[2, d], 1.0), uniform(rng, &[2, d], 1.0), uniform(rng, &[2, d], 1.0)];
    inputs.extend(atd_param_tensors(rng));
    let probe = uniform(rng, &[2 * d], 1.0);
    grad_check_inputs(
        |g, v| {
            let p = bind_atd(g, suite_atd_config(1), &v[3..])?;
            let a = NormalizedFeature::assume(g, v[1])?;
            let b = NormalizedFeature::assume(g, v[2])?;
            let out = telescopic_displace(g, v[0], &a, &b, &p)?;
            probe_loss(g, out, &probe)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .map(worst)
}

fn fuse_check(rng: &mut Rng, rounds: usize) -> Result<f64> {
    let d = SUITE_D;
    let rows = 3;
    let mut inputs = vec![uniform(rng, &[rows, d], 1.5), uniform(rng, &[rows, d], 1.5)];
    inputs.extend(atd_param_tensors(rng));
    let probe = uniform(rng, &[rows * d], 1.0);
    let cfg = suite_atd_config(rounds);
    grad_check_inputs(
        |g, v| {
            let p = bind_atd(g, cfg, &v[2..])?;
            let out = if rounds == 1 {
                atd_fuse(g, v[0], v[1], &p)?
            } else {
                alternate_fuse(g, v[0], v[1], &p)?
            };
            probe_loss(g, out, &probe)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .map(worst)
}

/// Checks every parameter of `store` through `objective`, which receives the
/// bound parameter set with one entry swapped for the perturbed leaf.
fn store_check<F>(store: &ParamStore, objective: F) -> Result<f64>
where
    F: Fn(&mut Graph, &crate::params::Bound) -> Result<Var>,
{
    let mut errs = Vec::with_capacity(store.len());
    for (name, tensor) in store.iter() {
        let e = grad_check(
            |g, x| {
                let mut bound = store.bind(g);
                bound.set(name, x)?;
                objective(g, &bound)
            },
            tensor,
            DEFAULT_STEP,
        )?;
        errs.push(e);
    }
    Ok(worst(errs))
}

fn series_config() -> SeriesEncoderConfig {
    SeriesEncoderConfig {
        input_dim: 3,
        hidden: 4,
        d: SUITE_D,
    }
}

fn image_config() -> ImageEncoderConfig {
    ImageEncoderConfig {
        in_channels: 1,
        channels: 2,
        kernel_size: 3,
        blocks: 2,
        d: SUITE_D,
    }
}

/// Gives biases nonzero values so their gradient paths are exercised.
fn jitter(store: &mut ParamStore, rng: &mut Rng) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.uniform(-0.2, 0.2);
        }
    }
}

fn series_encoder_check(rng: &mut Rng) -> Result<f64> {
    let cfg = series_config();
    let mut store = ParamStore::new();
    cfg.init(&mut store, "s", rng)?;
    jitter(&mut store, rng);
    let seq = uniform(rng, &[4, cfg.input_dim], 1.0);
    let probe = uniform(rng, &[SUITE_D], 1.0);
    store_check(&store, |g, bound| {
        let p = cfg.bind(g, bound, "s")?;
        let f = encode_series(g, &seq, &p)?;
        probe_loss(g, f.var(), &probe)
    })
}

fn image_encoder_check(rng: &mut Rng) -> Result<f64> {
    let cfg = image_config();
    let mut store = ParamStore::new();
    cfg.init(&mut store, "v", rng)?;
    jitter(&mut store, rng);
    let image = uniform(rng, &[1, 8, 8], 1.0);
    let probe = uniform(rng, &[SUITE_D], 1.0);
    store_check(&store, |g, bound| {
        let p = cfg.bind(g, bound, "v")?;
        let f = encode_image(g, &image, &p)?;
        probe_loss(g, f.var(), &probe)
    })
}

fn suite_model(outputs: usize, rng: &mut Rng) -> Result<BimodalModel> {
    let cfg = ModelConfig {
        variant: ModelVariant::Fused,
        series: series_config(),
        image: image_config(),
        atd: suite_atd_config(2),
        outputs,
    };
    let mut model = BimodalModel::new(cfg, rng.next_u64())?;
    jitter(model.params_mut(), rng);
    Ok(model)
}

fn suite_sample(rng: &mut Rng, target: Target) -> BimodalSample {
    BimodalSample {
        series: uniform(rng, &[4, 3], 1.0),
        image: uniform(rng, &[1, 8, 8], 1.0),
        target,
    }
}

fn full_model_check(rng: &mut Rng) -> Result<f64> {
    let model = suite_model(1, rng)?;
    let samples: Vec<BimodalSample> = (0..2)
        .map(|_| {
            let y = rng.uniform(-1.0, 1.0);
            suite_sample(rng, Target::Value(y))
        })
        .collect();
    store_check(model.params(), |g, bound| {
        let mut outs = Vec::new();
        let mut ys = Vec::new();
        for s in &samples {
            outs.push(model.forward(g, bound, s)?);
            if let Target::Value(y) = s.target {
                ys.push(y);
            }
        }
        let yhat = g.concat(&outs)?;
        let y = g.constant(Tensor::from_vec(&[ys.len()], ys.clone())?);
        mse_loss(g, y, yhat)
    })
}

fn classifier_check(rng: &mut Rng) -> Result<f64> {
    let model = suite_model(3, rng)?;
    let sample = suite_sample(rng, Target::Class(1));
    store_check(model.params(), |g, bound| {
        let logits = model.forward(g, bound, &sample)?;
        g.cross_entropy(logits, 1)
    })
}

/// Runs every component check with inputs drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut root = Rng::new(seed);
    let mut out = Vec::with_capacity(COMPONENTS.len());
    for component in COMPONENTS {
        let mut rng = root.fork();
        let max_rel_error = match component {
            "conv2d" => conv_spec_check(&mut rng)?,
            "residual_block" => residual_check(&mut rng)?,
            "lstm_step" => lstm_check(&mut rng)?,
            "normalize" => normalize_check(&mut rng)?,
            "guidance_weights_integrate" => attention_chain_check(&mut rng)?,
            "telescopic_displace" => displacement_check(&mut rng)?,
            "atd_fuse" => fuse_check(&mut rng, 1)?,
            "alternate_fuse_r3" => fuse_check(&mut rng, 3)?,
            "series_encoder" => series_encoder_check(&mut rng)?,
            "image_encoder" => image_encoder_check(&mut rng)?,
            "full_model" => full_model_check(&mut rng)?,
            "full_model_classifier" => classifier_check(&mut rng)?,
            _ => unreachable!(),
        };
        out.push(ComponentCheck {
            component,
            max_rel_error,
        });
    }
    Ok(out)
}
