//! Modality encoders: a small residual convolutional network for images and
//! an LSTM for numerical sequences. Both emit a `1 x d` [`ModalFeature`].

use crate::error::{AtdError, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_weight, Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Numerical,
    Visual,
}

/// Encoded features of one modality: a `rows x d` matrix of finite values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalFeature {
    var: Var,
    modality: Modality,
    rows: usize,
    d: usize,
}

impl ModalFeature {
    pub fn new(g: &Graph, var: Var, modality: Modality) -> Result<Self> {
        let (rows, d) = match g.shape(var) {
            &[r, d] => (r, d),
            s => {
                return Err(AtdError::contract(
                    "ModalFeature",
                    format!("features must be rows x d, got {s:?}"),
                ))
            }
        };
        if !g.value(var).is_finite() {
            return Err(AtdError::NumericDomain {
                op: "ModalFeature",
                detail: "feature contains non-finite entries".into(),
            });
        }
        Ok(Self { var, modality, rows, d })
    }

    pub fn var(&self) -> Var {
        self.var
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.d
    }
}

/// Output size of a convolution: `floor((H1 - F + 2P) / S) + 1` per axis.
pub fn conv_out_dims(h1: usize, w1: usize, f: usize, s: usize, p: usize) -> Result<(usize, usize)> {
    if h1 == 0 || w1 == 0 || f == 0 || s == 0 {
        return Err(AtdError::Geometry(format!(
            "input {h1}x{w1}, kernel {f} and stride {s} must all be >= 1"
        )));
    }
    if f > h1 + 2 * p || f > w1 + 2 * p {
        return Err(AtdError::Geometry(format!(
            "kernel {f} exceeds padded input {}x{}",
            h1 + 2 * p,
            w1 + 2 * p
        )));
    }
    Ok(((h1 + 2 * p - f) / s + 1, (w1 + 2 * p - f) / s + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Stride 1 with padding `(F - 1) / 2`, which keeps `H x W` for odd `F`.
    pub fn same(channels_in: usize, channels_out: usize, kernel_size: usize) -> Self {
        Self {
            kernel_size,
            stride: 1,
            padding: (kernel_size - 1) / 2,
            in_channels: channels_in,
            out_channels: channels_out,
        }
    }

    fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    fn preserves_shape(&self) -> bool {
        self.stride == 1
            && self.kernel_size % 2 == 1
            && self.padding == (self.kernel_size - 1) / 2
            && self.in_channels == self.out_channels
    }

    fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<()> {
        let fan_in = self.in_channels * self.kernel_size * self.kernel_size;
        store.insert(format!("{prefix}.kernel"), init_weight(&self.kernel_shape(), fan_in, rng)?)?;
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[self.out_channels])?)
    }
}

/// A convolution layer bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub spec: ConvSpec,
    pub kernel: Var,
    pub bias: Var,
}

impl ConvParams {
    pub fn new(g: &Graph, spec: ConvSpec, kernel: Var, bias: Var) -> Result<Self> {
        if g.shape(kernel) != spec.kernel_shape() {
            return Err(AtdError::shape("ConvParams", &spec.kernel_shape(), g.shape(kernel)));
        }
        if g.shape(bias) != [spec.out_channels] {
            return Err(AtdError::shape("ConvParams", &[spec.out_channels], g.shape(bias)));
        }
        Ok(Self { spec, kernel, bias })
    }

    fn bind(g: &Graph, spec: ConvSpec, bound: &Bound, prefix: &str) -> Result<Self> {
        Self::new(g, spec, bound.get(&format!("{prefix}.kernel"))?, bound.get(&format!("{prefix}.bias"))?)
    }
}

/// Convolution of a `C_in x H1 x W1` input, one bias per output channel.
pub fn conv2d(g: &mut Graph, x: Var, layer: &ConvParams) -> Result<Var> {
    match g.shape(x) {
        &[c, _, _] if c == layer.spec.in_channels => {}
        s => {
            let expected = [layer.spec.in_channels];
            return Err(AtdError::shape("conv2d", s, &expected));
        }
    }
    g.conv2d(x, layer.kernel, layer.bias, layer.spec.stride, layer.spec.padding)
}

/// The two same-padded convolutions forming the residual mapping.
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlockParams {
    pub first: ConvParams,
    pub second: ConvParams,
}

impl ResidualBlockParams {
    pub fn new(first: ConvParams, second: ConvParams) -> Result<Self> {
        if !first.spec.preserves_shape() || !second.spec.preserves_shape() {
            return Err(AtdError::contract(
                "residual_block",
                "both convolutions must keep channel count and spatial size (S = 1, P = (F - 1) / 2)",
            ));
        }
        if first.spec.out_channels != second.spec.in_channels {
            return Err(AtdError::contract("residual_block", "inner channel counts disagree"));
        }
        Ok(Self { first, second })
    }
}

/// The residual mapping alone: conv -> tanh -> conv.
pub fn residual_mapping(g: &mut Graph, x: Var, p: &ResidualBlockParams) -> Result<Var> {
    let a = conv2d(g, x, &p.first)?;
    let a = g.tanh(a);
    conv2d(g, a, &p.second)
}

/// `x + F(x)`.
pub fn residual_block(g: &mut Graph, x: Var, p: &ResidualBlockParams) -> Result<Var> {
    let fx = residual_mapping(g, x, p)?;
    g.add(x, fx)
}

/// Gate weights act on the concatenation `[h_prev, x_t]`; each weight matrix
/// is `hidden x (hidden + input)`, each bias has length `hidden`.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_f: Var,
    pub w_i: Var,
    pub w_c: Var,
    pub w_o: Var,
    pub b_f: Var,
    pub b_i: Var,
    pub b_c: Var,
    pub b_o: Var,
    pub hidden: usize,
    pub input: usize,
}

const GATES: [&str; 4] = ["f", "i", "c", "o"];

impl LstmParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) -> Result<()> {
        let fan_in = hidden + input;
        for gate in GATES {
            store.insert(format!("{prefix}.w_{gate}"), init_weight(&[hidden, fan_in], fan_in, rng)?)?;
        }
        for gate in GATES {
            store.insert(format!("{prefix}.b_{gate}"), Tensor::zeros(&[hidden])?)?;
        }
        Ok(())
    }

    pub fn bind(g: &Graph, bound: &Bound, prefix: &str) -> Result<Self> {
        let w = |gate: &str| bound.get(&format!("{prefix}.w_{gate}"));
        let b = |gate: &str| bound.get(&format!("{prefix}.b_{gate}"));
        Self::new(g, [w("f")?, w("i")?, w("c")?, w("o")?], [b("f")?, b("i")?, b("c")?, b("o")?])
    }

    /// Validates shapes; weights and biases are in gate order f, i, C, o.
    pub fn new(g: &Graph, weights: [Var; 4], biases: [Var; 4]) -> Result<Self> {
        let (hidden, cols) = match g.shape(weights[0]) {
            &[h, c] if c > h => (h, c),
            s => return Err(AtdError::contract("LstmParams", format!("bad gate weight shape {s:?}"))),
        };
        for w in &weights[1..] {
            if g.shape(*w) != [hidden, cols] {
                return Err(AtdError::shape("LstmParams", g.shape(weights[0]), g.shape(*w)));
            }
        }
        for b in &biases {
            if g.shape(*b) != [hidden] {
                return Err(AtdError::shape("LstmParams", &[hidden], g.shape(*b)));
            }
        }
        let [w_f, w_i, w_c, w_o] = weights;
        let [b_f, b_i, b_c, b_o] = biases;
        Ok(Self {
            w_f,
            w_i,
            w_c,
            w_o,
            b_f,
            b_i,
            b_c,
            b_o,
            hidden,
            input: cols - hidden,
        })
    }
}

fn as_column(g: &mut Graph, v: Var, len: usize, what: &'static str) -> Result<Var> {
    if g.value(v).len() != len {
        return Err(AtdError::shape(what, g.shape(v), &[len, 1]));
    }
    if g.shape(v) == [len, 1] {
        Ok(v)
    } else {
        g.reshape(v, &[len, 1])
    }
}

/// One LSTM time step. Inputs may be vectors or columns; outputs are
/// `hidden x 1` columns `(h_t, C_t)`.
pub fn lstm_step(g: &mut Graph, x_t: Var, h_prev: Var, c_prev: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let x = as_column(g, x_t, p.input, "lstm_step input")?;
    let h = as_column(g, h_prev, p.hidden, "lstm_step hidden")?;
    let c = as_column(g, c_prev, p.hidden, "lstm_step cell")?;
    let z = g.concat(&[h, x])?;

    let gate = |g: &mut Graph, w: Var, b: Var| -> Result<Var> {
        let wz = g.matmul(w, z)?;
        let b = g.reshape(b, &[p.hidden, 1])?;
        g.add(wz, b)
    };
    let f_pre = gate(g, p.w_f, p.b_f)?;
    let f = g.sigmoid(f_pre);
    let i_pre = gate(g, p.w_i, p.b_i)?;
    let i = g.sigmoid(i_pre);
    let cand_pre = gate(g, p.w_c, p.b_c)?;
    let cand = g.tanh(cand_pre);
    let o_pre = gate(g, p.w_o, p.b_o)?;
    let o = g.sigmoid(o_pre);

    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_t = g.add(keep, write)?;
    let squashed = g.tanh(c_t);
    let h_t = g.mul(o, squashed)?;
    Ok((h_t, c_t))
}

/// `W v + b` for a column `v`, returned as a `1 x d` row.
fn project_to_row(g: &mut Graph, column: Var, w: Var, b: Var) -> Result<Var> {
    let d = g.shape(w)[0];
    let wv = g.matmul(w, column)?;
    let b = g.reshape(b, &[d, 1])?;
    let out = g.add(wv, b)?;
    g.reshape(out, &[1, d])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeriesEncoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub d: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SeriesEncoderParams {
    pub lstm: LstmParams,
    /// `d x hidden`
    pub proj_w: Var,
    /// length `d`
    pub proj_b: Var,
}

impl SeriesEncoderConfig {
    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<()> {
        LstmParams::init(store, &format!("{prefix}.lstm"), self.input_dim, self.hidden, rng)?;
        store.insert(format!("{prefix}.proj_w"), init_weight(&[self.d, self.hidden], self.hidden, rng)?)?;
        store.insert(format!("{prefix}.proj_b"), Tensor::zeros(&[self.d])?)
    }

    pub fn bind(&self, g: &Graph, bound: &Bound, prefix: &str) -> Result<SeriesEncoderParams> {
        let lstm = LstmParams::bind(g, bound, &format!("{prefix}.lstm"))?;
        let proj_w = bound.get(&format!("{prefix}.proj_w"))?;
        let proj_b = bound.get(&format!("{prefix}.proj_b"))?;
        if g.shape(proj_w) != [self.d, lstm.hidden] {
            return Err(AtdError::shape("series projection", &[self.d, lstm.hidden], g.shape(proj_w)));
        }
        Ok(SeriesEncoderParams { lstm, proj_w, proj_b })
    }
}

/// Runs the LSTM over the rows of a `T x input_dim` sequence from a zero
/// state and projects the final hidden state to width `d`.
pub fn encode_series(g: &mut Graph, sequence: &Tensor, p: &SeriesEncoderParams) -> Result<ModalFeature> {
    let (steps, width) = match sequence.shape() {
        &[t, w] => (t, w),
        s => return Err(AtdError::contract("encode_series", format!("sequence must be T x input_dim, got {s:?}"))),
    };
    if width != p.lstm.input {
        return Err(AtdError::shape("encode_series", sequence.shape(), &[steps, p.lstm.input]));
    }
    let hidden = p.lstm.hidden;
    let mut h = g.constant(Tensor::zeros(&[hidden, 1])?);
    let mut c = g.constant(Tensor::zeros(&[hidden, 1])?);
    for t in 0..steps {
        let x_t = g.constant(Tensor::from_vec(&[width, 1], sequence.row(t).to_vec())?);
        (h, c) = lstm_step(g, x_t, h, c, &p.lstm)?;
    }
    let out = project_to_row(g, h, p.proj_w, p.proj_b)?;
    ModalFeature::new(g, out, Modality::Numerical)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageEncoderConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub blocks: usize,
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct ImageEncoderParams {
    pub stem: ConvParams,
    pub blocks: Vec<ResidualBlockParams>,
    /// `d x channels`
    pub proj_w: Var,
    /// length `d`
    pub proj_b: Var,
}

impl ImageEncoderConfig {
    fn stem_spec(&self) -> ConvSpec {
        ConvSpec::same(self.in_channels, self.channels, self.kernel_size)
    }

    fn block_spec(&self) -> ConvSpec {
        ConvSpec::same(self.channels, self.channels, self.kernel_size)
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(AtdError::Geometry(format!(
                "same-padded convolutions need an odd kernel, got {}",
                self.kernel_size
            )));
        }
        self.stem_spec().init(store, &format!("{prefix}.stem"), rng)?;
        for b in 0..self.blocks {
            self.block_spec().init(store, &format!("{prefix}.block{b}.conv1"), rng)?;
            self.block_spec().init(store, &format!("{prefix}.block{b}.conv2"), rng)?;
        }
        store.insert(format!("{prefix}.proj_w"), init_weight(&[self.d, self.channels], self.channels, rng)?)?;
        store.insert(format!("{prefix}.proj_b"), Tensor::zeros(&[self.d])?)
    }

    pub fn bind(&self, g: &Graph, bound: &Bound, prefix: &str) -> Result<ImageEncoderParams> {
        let stem = ConvParams::bind(g, self.stem_spec(), bound, &format!("{prefix}.stem"))?;
        let blocks = (0..self.blocks)
            .map(|b| {
                let first = ConvParams::bind(g, self.block_spec(), bound, &format!("{prefix}.block{b}.conv1"))?;
                let second = ConvParams::bind(g, self.block_spec(), bound, &format!("{prefix}.block{b}.conv2"))?;
                ResidualBlockParams::new(first, second)
            })
            .collect::<Result<_>>()?;
        let proj_w = bound.get(&format!("{prefix}.proj_w"))?;
        let proj_b = bound.get(&format!("{prefix}.proj_b"))?;
        if g.shape(proj_w) != [self.d, self.channels] {
            return Err(AtdError::shape("image projection", &[self.d, self.channels], g.shape(proj_w)));
        }
        Ok(ImageEncoderParams {
            stem,
            blocks,
            proj_w,
            proj_b,
        })
    }
}

/// Arithmetic mean over `H x W` for each channel of a `C x H x W` map;
/// returns a `C x 1` column.
pub fn spatial_mean_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let (c, h, w) = match g.shape(x) {
        &[c, h, w] => (c, h, w),
        s => return Err(AtdError::contract("spatial_mean_pool", format!("expected C x H x W, got {s:?}"))),
    };
    let flat = g.reshape(x, &[c, h * w])?;
    let means = g.row_means(flat)?;
    g.reshape(means, &[c, 1])
}

/// Stem conv -> tanh -> residual blocks -> spatial mean pool -> projection.
pub fn encode_image(g: &mut Graph, image: &Tensor, p: &ImageEncoderParams) -> Result<ModalFeature> {
    if image.rank() != 3 {
        return Err(AtdError::contract(
            "encode_image",
            format!("image must be C x H x W, got {:?}", image.shape()),
        ));
    }
    let x = g.constant(image.clone());
    let stem = conv2d(g, x, &p.stem)?;
    let mut a = g.tanh(stem);
    for block in &p.blocks {
        a = residual_block(g, a, block)?;
    }
    let pooled = spatial_mean_pool(g, a)?;
    let out = project_to_row(g, pooled, p.proj_w, p.proj_b)?;
    ModalFeature::new(g, out, Modality::Visual)
}
