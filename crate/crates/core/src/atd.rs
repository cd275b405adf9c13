//! Alternating telescopic displacement fusion.
//!
//! One fusion pass over features `x1` (guiding) and `x2` (guided):
//!
//! 1. standardize each row of both inputs,
//! 2. similarity `S = X1 X2^T / sqrt(d)` shifted so each row peaks at 0 (`G`),
//! 3. weights `W = softmax_rows(G / sqrt(d_h))`,
//! 4. integration `O = W (X2 V)`,
//! 5. displacement `tanh(O W_F + b_F) + a X1 + (1 - a) X2` with
//!    `a = sigmoid(alpha_raw)`.
//!
//! [`alternate_fuse`] repeats the pass, swapping which side the previous
//! result stands in for on each round.

use crate::error::{AtdError, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_weight, Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtdConfig {
    /// Fusion width.
    pub d: usize,
    /// Temperature dimension of the weight softmax.
    pub d_h: usize,
    pub rounds: usize,
    pub epsilon: f64,
}

impl Default for AtdConfig {
    fn default() -> Self {
        Self {
            d: 16,
            d_h: 16,
            rounds: 2,
            epsilon: 1e-5,
        }
    }
}

impl AtdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(AtdError::contract("AtdConfig", format!("d must be >= 2, got {}", self.d)));
        }
        if self.d_h < 1 || self.rounds < 1 {
            return Err(AtdError::contract(
                "AtdConfig",
                format!("d_h and rounds must be >= 1, got {} and {}", self.d_h, self.rounds),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(AtdError::contract("AtdConfig", format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// `V` and `W_F` uniform in `+-1/sqrt(d)`, `b_F = 0`, `alpha_raw = 0`.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<()> {
        self.validate()?;
        let d = self.d;
        store.insert(format!("{prefix}.v_proj"), init_weight(&[d, d], d, rng)?)?;
        store.insert(format!("{prefix}.w_f"), init_weight(&[d, d], d, rng)?)?;
        store.insert(format!("{prefix}.b_f"), Tensor::zeros(&[d])?)?;
        store.insert(format!("{prefix}.alpha_raw"), Tensor::zeros(&[1])?)
    }

    pub fn bind(&self, g: &Graph, bound: &Bound, prefix: &str) -> Result<AtdParams> {
        AtdParams::new(
            g,
            *self,
            bound.get(&format!("{prefix}.v_proj"))?,
            bound.get(&format!("{prefix}.w_f"))?,
            bound.get(&format!("{prefix}.b_f"))?,
            bound.get(&format!("{prefix}.alpha_raw"))?,
        )
    }
}

/// Fusion parameters bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct AtdParams {
    pub config: AtdConfig,
    /// `d x d` value projection.
    pub v_proj: Var,
    /// `d x d` weight of the non-linear transform.
    pub w_f: Var,
    /// length-`d` bias of the non-linear transform.
    pub b_f: Var,
    /// One-element blend logit.
    pub alpha_raw: Var,
}

impl AtdParams {
    pub fn new(g: &Graph, config: AtdConfig, v_proj: Var, w_f: Var, b_f: Var, alpha_raw: Var) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        for (what, v, want) in [("v_proj", v_proj, vec![d, d]), ("w_f", w_f, vec![d, d]), ("b_f", b_f, vec![d])] {
            if g.shape(v) != want.as_slice() {
                return Err(AtdError::contract(
                    "AtdParams",
                    format!("{what} must have shape {want:?}, got {:?}", g.shape(v)),
                ));
            }
        }
        if g.value(alpha_raw).len() != 1 {
            return Err(AtdError::contract("AtdParams", "alpha_raw must hold one value"));
        }
        Ok(Self {
            config,
            v_proj,
            w_f,
            b_f,
            alpha_raw,
        })
    }
}

/// `sigmoid(alpha_raw)`, the effective blend coefficient.
pub fn effective_alpha(alpha_raw: f64) -> f64 {
    1.0 / (1.0 + (-alpha_raw).exp())
}

/// A row-standardized feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizedFeature {
    var: Var,
    rows: usize,
    d: usize,
}

impl NormalizedFeature {
    pub fn var(&self) -> Var {
        self.var
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.d
    }

    /// Treats an arbitrary matrix as already normalized. Used to probe later
    /// stages with hand-built inputs.
    pub fn assume(g: &Graph, var: Var) -> Result<Self> {
        match g.shape(var) {
            &[rows, d] => Ok(Self { var, rows, d }),
            s => Err(AtdError::contract("NormalizedFeature", format!("expected a matrix, got {s:?}"))),
        }
    }
}

/// Standardizes each row over its `d` entries with the population variance.
pub fn normalize(g: &mut Graph, feature: Var, epsilon: f64) -> Result<NormalizedFeature> {
    let (rows, d) = match g.shape(feature) {
        &[r, d] => (r, d),
        s => return Err(AtdError::contract("normalize", format!("expected rows x d, got {s:?}"))),
    };
    if d < 2 {
        return Err(AtdError::contract("normalize", format!("need d >= 2 to standardize, got {d}")));
    }
    let var = g.normalize_rows(feature, epsilon)?;
    Ok(NormalizedFeature { var, rows, d })
}

/// Scaled similarity `S = X1 X2^T / sqrt(d)` before the row shift.
pub fn similarity(g: &mut Graph, x1: &NormalizedFeature, x2: &NormalizedFeature) -> Result<Var> {
    if x1.d != x2.d {
        return Err(AtdError::shape("guidance_matrix", g.shape(x1.var), g.shape(x2.var)));
    }
    let x2t = g.transpose(x2.var)?;
    let s = g.matmul(x1.var, x2t)?;
    Ok(g.scale(s, 1.0 / (x1.d as f64).sqrt()))
}

/// `G = S - rowmax(S)`; every row of `G` has maximum exactly 0.
pub fn guidance_matrix(g: &mut Graph, x1: &NormalizedFeature, x2: &NormalizedFeature) -> Result<Var> {
    let s = similarity(g, x1, x2)?;
    g.sub_row_max(s)
}

/// `softmax_rows(G / sqrt(d_h))`.
pub fn atd_weights(g: &mut Graph, guidance: Var, d_h: usize) -> Result<Var> {
    if d_h < 1 {
        return Err(AtdError::contract("atd_weights", "d_h must be >= 1"));
    }
    let scaled = g.scale(guidance, 1.0 / (d_h as f64).sqrt());
    g.softmax_rows(scaled)
}

/// `O = W (X2 V)`.
pub fn integrate(g: &mut Graph, weights: Var, x2: &NormalizedFeature, v_proj: Var) -> Result<Var> {
    let values = g.matmul(x2.var, v_proj)?;
    g.matmul(weights, values)
}

/// `tanh(O W_F + b_F) + a X1 + (1 - a) X2`, `a = sigmoid(alpha_raw)`.
pub fn telescopic_displace(
    g: &mut Graph,
    integrated: Var,
    x1: &NormalizedFeature,
    x2: &NormalizedFeature,
    p: &AtdParams,
) -> Result<Var> {
    let o_shape = g.shape(integrated).to_vec();
    for x in [x1, x2] {
        if g.shape(x.var) != o_shape.as_slice() {
            return Err(AtdError::shape("telescopic_displace", &o_shape, g.shape(x.var)));
        }
    }
    let lin = g.matmul(integrated, p.w_f)?;
    let lin = g.add_row_bias(lin, p.b_f)?;
    let transformed = g.tanh(lin);

    let alpha = g.sigmoid(p.alpha_raw);
    let neg = g.scale(alpha, -1.0);
    let one_minus = g.shift(neg, 1.0);
    let a = g.mul_scalar(x1.var, alpha)?;
    let b = g.mul_scalar(x2.var, one_minus)?;
    let blend = g.add(a, b)?;
    g.add(transformed, blend)
}

/// One full fusion pass; `x1` guides, `x2` supplies values.
pub fn atd_fuse(g: &mut Graph, x1: Var, x2: Var, p: &AtdParams) -> Result<Var> {
    let d = p.config.d;
    match (g.shape(x1), g.shape(x2)) {
        (&[m, d1], &[n, d2]) if d1 == d && d2 == d && m == n => {}
        (a, b) => return Err(AtdError::shape("atd_fuse", a, b)),
    }
    let n1 = normalize(g, x1, p.config.epsilon)?;
    let n2 = normalize(g, x2, p.config.epsilon)?;
    let guidance = guidance_matrix(g, &n1, &n2)?;
    let weights = atd_weights(g, guidance, p.config.d_h)?;
    let integrated = integrate(g, weights, &n2, p.v_proj)?;
    telescopic_displace(g, integrated, &n1, &n2, p)
}

/// `R` fusion rounds with shared parameters. Round 1 fuses `(x1, x2)`; after
/// that the previous result replaces `x1` on even rounds and `x2` on odd ones.
pub fn alternate_fuse(g: &mut Graph, x1: Var, x2: Var, p: &AtdParams) -> Result<Var> {
    if p.config.rounds < 1 {
        return Err(AtdError::contract("alternate_fuse", "rounds must be >= 1"));
    }
    let mut z = atd_fuse(g, x1, x2, p)?;
    for round in 2..=p.config.rounds {
        z = if round % 2 == 0 {
            atd_fuse(g, z, x2, p)?
        } else {
            atd_fuse(g, x1, z, p)?
        };
    }
    Ok(z)
}
