//! The bimodal regressor/classifier: two encoders, the fusion module and a
//! fully connected output head.

use crate::atd::{alternate_fuse, AtdConfig};
use crate::data::BimodalSample;
use crate::encoders::{encode_image, encode_series, ImageEncoderConfig, SeriesEncoderConfig};
use crate::error::{AtdError, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_weight, Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which inputs feed the head. The unimodal variants skip fusion and read
/// their encoder's feature directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    Fused,
    SeriesOnly,
    ImageOnly,
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Fused => "fused",
            ModelVariant::SeriesOnly => "series",
            ModelVariant::ImageOnly => "image",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fused" => Some(ModelVariant::Fused),
            "series" => Some(ModelVariant::SeriesOnly),
            "image" => Some(ModelVariant::ImageOnly),
            _ => None,
        }
    }

    fn uses_series(self) -> bool {
        self != ModelVariant::ImageOnly
    }

    fn uses_image(self) -> bool {
        self != ModelVariant::SeriesOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub series: SeriesEncoderConfig,
    pub image: ImageEncoderConfig,
    pub atd: AtdConfig,
    /// 1 for regression, the class count for classification.
    pub outputs: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.atd.validate()?;
        let d = self.atd.d;
        if self.series.d != d || self.image.d != d {
            return Err(AtdError::contract(
                "ModelConfig",
                format!(
                    "encoder widths ({}, {}) must equal the fusion width {d}",
                    self.series.d, self.image.d
                ),
            ));
        }
        if self.outputs < 1 {
            return Err(AtdError::contract("ModelConfig", "outputs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BimodalModel {
    config: ModelConfig,
    params: ParamStore,
}

impl BimodalModel {
    /// Initializes every parameter from `seed`. Each component draws from its
    /// own forked stream, so variants share identical encoder and head
    /// initializations.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut root = Rng::new(seed);
        let mut series_rng = root.fork();
        let mut image_rng = root.fork();
        let mut atd_rng = root.fork();
        let mut head_rng = root.fork();

        let mut params = ParamStore::new();
        if config.variant.uses_series() {
            config.series.init(&mut params, "series", &mut series_rng)?;
        }
        if config.variant.uses_image() {
            config.image.init(&mut params, "image", &mut image_rng)?;
        }
        if config.variant == ModelVariant::Fused {
            config.atd.init(&mut params, "atd", &mut atd_rng)?;
        }
        let d = config.atd.d;
        params.insert("head.w", init_weight(&[d, config.outputs], d, &mut head_rng)?)?;
        params.insert("head.b", Tensor::zeros(&[config.outputs])?)?;
        Ok(Self { config, params })
    }

    /// Wraps an existing parameter set after checking it matches the
    /// architecture name for name and shape for shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        reference.check_compatible(&params)?;
        Ok(Self { config, params })
    }

    /// Verifies `other` has exactly this model's parameter names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.params.iter() {
            match other.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => return Err(AtdError::shape("parameter shape", t.shape(), o.shape())),
                None => {
                    return Err(AtdError::contract("parameter set", format!("missing parameter {name}")))
                }
            }
        }
        if other.len() != self.params.len() {
            let extra: Vec<&str> = other.names().filter(|n| self.params.get(n).is_none()).collect();
            return Err(AtdError::contract(
                "parameter set",
                format!("unexpected parameters {extra:?}"),
            ));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Head outputs for one sample as a vector of length `outputs`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, sample: &BimodalSample) -> Result<Var> {
        let cfg = &self.config;
        let series = if cfg.variant.uses_series() {
            let p = cfg.series.bind(g, bound, "series")?;
            Some(encode_series(g, &sample.series, &p)?)
        } else {
            None
        };
        let image = if cfg.variant.uses_image() {
            let p = cfg.image.bind(g, bound, "image")?;
            Some(encode_image(g, &sample.image, &p)?)
        } else {
            None
        };
        let features = match (series, image) {
            (Some(x1), Some(x2)) => {
                let p = cfg.atd.bind(g, bound, "atd")?;
                alternate_fuse(g, x1.var(), x2.var(), &p)?
            }
            (Some(x), None) | (None, Some(x)) => x.var(),
            (None, None) => unreachable!("every variant uses at least one modality"),
        };
        let w = bound.get("head.w")?;
        let b = bound.get("head.b")?;
        let out = g.matmul(features, w)?;
        let out = g.add_row_bias(out, b)?;
        g.reshape(out, &[cfg.outputs])
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, sample: &BimodalSample) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let out = self.forward(&mut g, &bound, sample)?;
        Ok(g.value(out).data().to_vec())
    }
}
