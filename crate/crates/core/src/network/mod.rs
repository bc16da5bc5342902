//! Mirrored convolutional autoencoder with per-level connection layers.
//!
//! The encoder stacks stride-2 convolutions with ReLU; the decoder mirrors
//! it with stride-2 transposed convolutions (ReLU everywhere except the
//! final, linear reconstruction layer). Connection layers sit between each
//! encoder level and its symmetric decoder level: the flattened level
//! features are multiplied by `C + D^l` and the result re-enters the
//! decoder, summed elementwise with the running decoder activation
//! (residual-style skip combination). Single-connection ablations keep only
//! the bottleneck connection and no shallower skips.

pub mod conv;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio;
use crate::error::{Error, Result};
use crate::selfexpress::{
    self, CRegularizer, LossBreakdown, LossWeights, MembershipMatrix, SelfExpressionParams,
};
use conv::{conv2d, conv2d_backward, conv2d_transpose, conv2d_transpose_backward};

/// All convolutions use stride 2 in both spatial dimensions.
pub const STRIDE: usize = 2;

/// One encoder layer: number of filters and (odd, square) kernel size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: usize,
}

impl ConvLayerSpec {
    pub fn new(filters: usize, kernel: usize) -> Self {
        Self { filters, kernel }
    }
}

/// Which encoder levels get a connection layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionScheme {
    /// A connection layer at every encoder level (the multi-level model).
    MultiLevel,
    /// A single connection layer at the deepest level and no shallower
    /// skips (the classic single-self-expression topology).
    BottleneckOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub layers: Vec<ConvLayerSpec>,
    /// `(height, width, channels)` of the input images.
    pub input_shape: (usize, usize, usize),
    pub connections: ConnectionScheme,
}

impl ArchitectureSpec {
    pub fn new(
        layers: Vec<ConvLayerSpec>,
        input_shape: (usize, usize, usize),
        connections: ConnectionScheme,
    ) -> Result<Self> {
        let spec = Self {
            layers,
            input_shape,
            connections,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument(
                "architecture needs at least one encoder layer".into(),
            ));
        }
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidArgument(format!(
                "input shape ({h}, {w}, {c}) has a zero dimension"
            )));
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.filters == 0 {
                return Err(Error::InvalidArgument(format!(
                    "encoder layer {} has zero filters",
                    idx + 1
                )));
            }
            if layer.kernel == 0 || layer.kernel % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "encoder layer {} kernel must be odd, got {}",
                    idx + 1,
                    layer.kernel
                )));
            }
        }
        for (level, &(h, w)) in self.level_spatial().iter().enumerate() {
            if h == 0 || w == 0 {
                return Err(Error::InvalidArgument(format!(
                    "level {level} collapses to zero spatial size"
                )));
            }
        }
        Ok(())
    }

    /// Number of encoder (and decoder) layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Channel counts per level, index 0 being the input.
    pub fn channels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.depth() + 1);
        out.push(self.input_shape.2);
        out.extend(self.layers.iter().map(|l| l.filters));
        out
    }

    /// Spatial dims per level, index 0 being the input. Stride-2 with
    /// symmetric padding `k/2` halves each dimension with ceiling.
    pub fn level_spatial(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.depth() + 1);
        let (mut h, mut w, _) = (self.input_shape.0, self.input_shape.1, ());
        out.push((h, w));
        for layer in &self.layers {
            let pad = layer.kernel / 2;
            h = conv::conv_out_dim(h, layer.kernel, STRIDE, pad);
            w = conv::conv_out_dim(w, layer.kernel, STRIDE, pad);
            out.push((h, w));
        }
        out
    }

    /// `(channels, height, width)` of encoder level `level` (1-based).
    pub fn level_shape(&self, level: usize) -> (usize, usize, usize) {
        let (h, w) = self.level_spatial()[level];
        (self.channels()[level], h, w)
    }

    /// Flattened feature dimension of encoder level `level` (1-based).
    pub fn level_dim(&self, level: usize) -> usize {
        let (c, h, w) = self.level_shape(level);
        c * h * w
    }

    /// 1-based encoder levels that carry a connection layer, ascending.
    pub fn connected_levels(&self) -> Vec<usize> {
        match self.connections {
            ConnectionScheme::MultiLevel => (1..=self.depth()).collect(),
            ConnectionScheme::BottleneckOnly => vec![self.depth()],
        }
    }
}

/// Kernel and bias of one encoder convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `(c_out, c_in, k, k)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

/// Kernel, bias and output padding of one decoder transposed convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TconvParams {
    /// `(c_in, c_out, k, k)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub out_pad: (usize, usize),
}

/// Everything the optimizer trains: encoder, decoder, and the connection
/// matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchitectureSpec,
    pub encoder: Vec<ConvParams>,
    pub decoder: Vec<TconvParams>,
    pub selfexpr: SelfExpressionParams,
}

struct DecoderLayerSpec {
    c_in: usize,
    c_out: usize,
    kernel: usize,
    out_pad: (usize, usize),
}

fn decoder_layout(arch: &ArchitectureSpec) -> Result<Vec<DecoderLayerSpec>> {
    let depth = arch.depth();
    let channels = arch.channels();
    let spatial = arch.level_spatial();
    let mut out = Vec::with_capacity(depth);
    for j in 1..=depth {
        let enc = depth + 1 - j; // mirrored encoder layer
        let kernel = arch.layers[enc - 1].kernel;
        let pad = kernel / 2;
        let (ih, iw) = spatial[enc];
        let (th, tw) = spatial[enc - 1];
        let base_h = conv::tconv_out_dim(ih, kernel, STRIDE, pad, 0);
        let base_w = conv::tconv_out_dim(iw, kernel, STRIDE, pad, 0);
        if th < base_h || th - base_h >= STRIDE || tw < base_w || tw - base_w >= STRIDE {
            return Err(Error::Shape(format!(
                "decoder layer {j} cannot reach {th}x{tw} from {ih}x{iw} with kernel {kernel}"
            )));
        }
        out.push(DecoderLayerSpec {
            c_in: channels[enc],
            c_out: channels[enc - 1],
            kernel,
            out_pad: (th - base_h, tw - base_w),
        });
    }
    Ok(out)
}

impl ModelParams {
    /// Number of samples the connection matrices are sized for.
    pub fn n(&self) -> usize {
        self.selfexpr.n()
    }

    /// Forces every distinctive matrix to zero (single-connection ablations
    /// train with `D` frozen at zero).
    pub fn zero_distinctive(&mut self) {
        for d in &mut self.selfexpr.d {
            d.fill(0.0);
        }
    }

    /// Every trainable tensor as a mutable slice, in a fixed order matching
    /// [`Gradients::flat_tensors`]: encoder kernels/biases, decoder
    /// kernels/biases, `C`, then each `D^l`.
    pub fn flat_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.encoder {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        for layer in &mut self.decoder {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.selfexpr.c.as_slice_mut().expect("standard layout"));
        for d in &mut self.selfexpr.d {
            out.push(d.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// Post-ReLU feature tensors of every encoder level.
#[derive(Debug, Clone)]
pub struct LevelFeatures {
    /// `tensors[l-1]` has shape `(n, c_l, h_l, w_l)`.
    pub tensors: Vec<Array4<f64>>,
}

impl LevelFeatures {
    pub fn depth(&self) -> usize {
        self.tensors.len()
    }

    /// Flattened `d_l x n` matrix of level `level` (1-based). Column `i` is
    /// sample `i` in channel-major `(c, h, w)` order.
    pub fn flat(&self, level: usize) -> Array2<f64> {
        flatten_samples(&self.tensors[level - 1])
    }
}

/// `(n, c, h, w)` tensor to `(c*h*w, n)` matrix; column `i` is sample `i`
/// flattened in `(c, h, w)` order.
pub fn flatten_samples(t: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = t.dim();
    let flat = t
        .view()
        .into_shape_with_order((n, c * h * w))
        .expect("standard layout");
    flat.t().as_standard_layout().into_owned()
}

/// Inverse of [`flatten_samples`]; exact round-trip.
pub fn unflatten_samples(m: &Array2<f64>, c: usize, h: usize, w: usize) -> Result<Array4<f64>> {
    let (d, n) = m.dim();
    if d != c * h * w {
        return Err(Error::Shape(format!(
            "cannot unflatten {d} rows into ({c}, {h}, {w})"
        )));
    }
    Ok(m.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c, h, w))
        .expect("standard layout"))
}

/// Draws convolution weights from a symmetric uniform with fan-in scaling
/// and fills the connection matrices with 1e-4 before diagonal masking.
/// Deterministic in `seed`.
pub fn init_params(arch: &ArchitectureSpec, n: usize, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples for self-expression, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = arch.channels();
    let mut encoder = Vec::with_capacity(arch.depth());
    for (idx, layer) in arch.layers.iter().enumerate() {
        let c_in = channels[idx];
        let k = layer.kernel;
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = Array4::from_shape_fn((layer.filters, c_in, k, k), |_| {
            rng.random_range(-bound..bound)
        });
        encoder.push(ConvParams {
            weight,
            bias: Array1::zeros(layer.filters),
        });
    }
    let mut decoder = Vec::with_capacity(arch.depth());
    for spec in decoder_layout(arch)? {
        let k = spec.kernel;
        let bound = 1.0 / ((spec.c_in * k * k) as f64).sqrt();
        let weight = Array4::from_shape_fn((spec.c_in, spec.c_out, k, k), |_| {
            rng.random_range(-bound..bound)
        });
        decoder.push(TconvParams {
            weight,
            bias: Array1::zeros(spec.c_out),
            out_pad: spec.out_pad,
        });
    }
    let selfexpr = SelfExpressionParams::init(n, arch.connected_levels().len());
    Ok(ModelParams {
        arch: arch.clone(),
        encoder,
        decoder,
        selfexpr,
    })
}

fn relu(mut t: Array4<f64>) -> Array4<f64> {
    t.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
    t
}

/// Zeroes gradient entries where the forward activation was clipped.
fn relu_backward(mut d: Array4<f64>, post: &Array4<f64>) -> Array4<f64> {
    Zip::from(&mut d).and(post).for_each(|g, &y| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

fn check_input_shape(x: &Array4<f64>, arch: &ArchitectureSpec) -> Result<()> {
    let (_, c, h, w) = x.dim();
    let (eh, ew, ec) = arch.input_shape;
    if (h, w, c) != (eh, ew, ec) {
        return Err(Error::Shape(format!(
            "input tensor is {h}x{w}x{c} but the architecture expects {eh}x{ew}x{ec}"
        )));
    }
    Ok(())
}

/// Runs the encoder, returning the post-ReLU features of every level.
pub fn encode(x: &Array4<f64>, params: &ModelParams) -> Result<LevelFeatures> {
    check_input_shape(x, &params.arch)?;
    let mut tensors: Vec<Array4<f64>> = Vec::with_capacity(params.arch.depth());
    for (idx, layer) in params.encoder.iter().enumerate() {
        let pad = params.arch.layers[idx].kernel / 2;
        let pre = {
            let input = tensors.last().unwrap_or(x);
            conv2d(input, &layer.weight, &layer.bias, STRIDE, pad)?
        };
        tensors.push(relu(pre));
    }
    Ok(LevelFeatures { tensors })
}

struct DecodeCache {
    xhat: Array4<f64>,
    /// Inputs to each transposed convolution, shallowest-decoder-layer last.
    dec_inputs: Vec<Array4<f64>>,
    /// Post-ReLU outputs of decoder layers 1..L-1.
    dec_hidden: Vec<Array4<f64>>,
}

/// `modified` holds one tensor per connected level, ordered by level
/// ascending (shallowest first); the deepest level is always connected and
/// seeds the decoder.
fn decode_cached(modified: &[Array4<f64>], params: &ModelParams) -> Result<DecodeCache> {
    let arch = &params.arch;
    let depth = arch.depth();
    let conn = arch.connected_levels();
    if modified.len() != conn.len() {
        return Err(Error::Shape(format!(
            "expected {} modified level tensors, got {}",
            conn.len(),
            modified.len()
        )));
    }
    let n = modified[0].dim().0;
    for (pos, &level) in conn.iter().enumerate() {
        let (c, h, w) = arch.level_shape(level);
        if modified[pos].dim() != (n, c, h, w) {
            return Err(Error::Shape(format!(
                "level {level}: modified features are {:?}, expected ({n}, {c}, {h}, {w})",
                modified[pos].dim()
            )));
        }
    }
    let conn_pos = |level: usize| conn.iter().position(|&l| l == level);

    let mut dec_inputs = Vec::with_capacity(depth);
    let mut dec_hidden = Vec::with_capacity(depth.saturating_sub(1));
    let deepest = conn_pos(depth).expect("deepest level always carries a connection");
    let mut current = modified[deepest].clone();
    for j in 1..=depth {
        let layer = &params.decoder[j - 1];
        let kernel = arch.layers[depth - j].kernel;
        let pad = kernel / 2;
        dec_inputs.push(current.clone());
        let pre = conv2d_transpose(&current, &layer.weight, &layer.bias, STRIDE, pad, layer.out_pad)?;
        if j < depth {
            let y = relu(pre);
            dec_hidden.push(y.clone());
            current = match conn_pos(depth - j) {
                Some(pos) => y + &modified[pos],
                None => y,
            };
        } else {
            return Ok(DecodeCache {
                xhat: pre,
                dec_inputs,
                dec_hidden,
            });
        }
    }
    unreachable!("decoder loop always returns at the final layer")
}

/// Decodes modified level features into a reconstruction. `modified` is
/// ordered by level ascending; see [`decode_cached`] internals for the skip
/// combination.
pub fn decode(modified: &[Array4<f64>], params: &ModelParams) -> Result<Array4<f64>> {
    Ok(decode_cached(modified, params)?.xhat)
}

/// Forward pass with every connection layer shortcut to identity; used for
/// pretraining on the reconstruction loss alone.
pub fn forward_pretrain(x: &Array4<f64>, params: &ModelParams) -> Result<Array4<f64>> {
    Ok(forward_pretrain_cached(x, params)?.xhat)
}

/// [`forward_pretrain`] keeping every intermediate needed for backprop.
pub struct PretrainForward {
    pub xhat: Array4<f64>,
    pub levels: LevelFeatures,
    pub recon: f64,
    cache: DecodeCache,
}

pub fn forward_pretrain_cached(x: &Array4<f64>, params: &ModelParams) -> Result<PretrainForward> {
    let levels = encode(x, params)?;
    let conn = params.arch.connected_levels();
    let modified: Vec<Array4<f64>> = conn
        .iter()
        .map(|&level| levels.tensors[level - 1].clone())
        .collect();
    let cache = decode_cached(&modified, params)?;
    let recon = squared_distance(x, &cache.xhat);
    Ok(PretrainForward {
        xhat: cache.xhat.clone(),
        levels,
        recon,
        cache,
    })
}

fn squared_distance(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}

/// Full forward pass: encode, apply every connection layer, decode, and
/// compute the objective on the unmodified level features.
pub struct FullForward {
    pub xhat: Array4<f64>,
    pub levels: LevelFeatures,
    pub breakdown: LossBreakdown,
    /// Flattened features per connected level.
    pub(crate) flats: Vec<Array2<f64>>,
    /// Self-expression residuals `Z - Z(C + D^l)` per connected level.
    pub(crate) residuals: Vec<Array2<f64>>,
    cache: DecodeCache,
}

pub fn forward_full(
    x: &Array4<f64>,
    params: &ModelParams,
    q: &MembershipMatrix,
    w: &LossWeights,
) -> Result<FullForward> {
    forward_full_regularized(x, params, q, w, CRegularizer::MembershipL1)
}

pub fn forward_full_regularized(
    x: &Array4<f64>,
    params: &ModelParams,
    q: &MembershipMatrix,
    w: &LossWeights,
    reg: CRegularizer,
) -> Result<FullForward> {
    let n = x.dim().0;
    if params.n() != n {
        return Err(Error::Shape(format!(
            "model holds {}x{} connection matrices but the batch has {} samples",
            params.n(),
            params.n(),
            n
        )));
    }
    if q.n() != n {
        return Err(Error::Shape(format!(
            "membership matrix has {} rows but the batch has {n} samples",
            q.n()
        )));
    }
    let levels = encode(x, params)?;
    let conn = params.arch.connected_levels();
    if params.selfexpr.levels() != conn.len() {
        return Err(Error::Shape(format!(
            "parameters hold {} connection layers but the architecture wires {}",
            params.selfexpr.levels(),
            conn.len()
        )));
    }

    let mut flats = Vec::with_capacity(conn.len());
    let mut residuals = Vec::with_capacity(conn.len());
    let mut modified = Vec::with_capacity(conn.len());
    let mut exp = 0.0;
    for (pos, &level) in conn.iter().enumerate() {
        let z = levels.flat(level);
        let a = params.selfexpr.connection(pos + 1)?;
        let m = z.dot(&a);
        let r = &z - &m;
        exp += selfexpress::frobenius_sq(&r);
        let (c, h, wd) = params.arch.level_shape(level);
        modified.push(unflatten_samples(&m, c, h, wd)?);
        flats.push(z);
        residuals.push(r);
    }

    let cache = decode_cached(&modified, params)?;
    let recon = squared_distance(x, &cache.xhat);
    let lc = selfexpress::loss_c_regularized(reg, q, &params.selfexpr.c)?;
    let ld = selfexpress::loss_d(&params.selfexpr);
    let breakdown = LossBreakdown::compose(recon, exp, lc, ld, w);

    Ok(FullForward {
        xhat: cache.xhat.clone(),
        levels,
        breakdown,
        flats,
        residuals,
        cache,
    })
}

/// Gradients for every trainable tensor, shaped like [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub encoder_w: Vec<Array4<f64>>,
    pub encoder_b: Vec<Array1<f64>>,
    pub decoder_w: Vec<Array4<f64>>,
    pub decoder_b: Vec<Array1<f64>>,
    pub c: Array2<f64>,
    pub d: Vec<Array2<f64>>,
}

impl Gradients {
    /// Used by the single-connection ablations that keep `D` frozen.
    pub fn zero_distinctive(&mut self) {
        for d in &mut self.d {
            d.fill(0.0);
        }
    }

    /// Gradient tensors in the order of [`ModelParams::flat_tensors_mut`].
    pub fn flat_tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (w, b) in self.encoder_w.iter().zip(self.encoder_b.iter()) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        for (w, b) in self.decoder_w.iter().zip(self.decoder_b.iter()) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out.push(self.c.as_slice().expect("standard layout"));
        for d in &self.d {
            out.push(d.as_slice().expect("standard layout"));
        }
        out
    }
}

/// Walks the decoder backwards. Returns per-layer gradients plus the
/// gradient flowing into each connected level's modified features.
fn decoder_backward(
    params: &ModelParams,
    cache: &DecodeCache,
    d_xhat: Array4<f64>,
) -> (Vec<Array4<f64>>, Vec<Array1<f64>>, Vec<Array4<f64>>) {
    let arch = &params.arch;
    let depth = arch.depth();
    let conn = arch.connected_levels();
    let conn_pos = |level: usize| conn.iter().position(|&l| l == level);

    let mut dec_w = vec![Array4::zeros((0, 0, 0, 0)); depth];
    let mut dec_b = vec![Array1::zeros(0); depth];
    let mut d_modified: Vec<Array4<f64>> = conn
        .iter()
        .map(|&level| {
            let (c, h, w) = arch.level_shape(level);
            Array4::zeros((cache.xhat.dim().0, c, h, w))
        })
        .collect();

    let mut g = d_xhat;
    for j in (1..=depth).rev() {
        let layer = &params.decoder[j - 1];
        let kernel = arch.layers[depth - j].kernel;
        let pad = kernel / 2;
        let (du, dw, db) = conv2d_transpose_backward(&cache.dec_inputs[j - 1], &layer.weight, &g, STRIDE, pad);
        dec_w[j - 1] = dw;
        dec_b[j - 1] = db;
        if j > 1 {
            // dec input j-1 is y_{j-1} + skip at level depth-j+1
            if let Some(pos) = conn_pos(depth - j + 1) {
                d_modified[pos] += &du;
            }
            g = relu_backward(du, &cache.dec_hidden[j - 2]);
        } else {
            let pos = conn_pos(depth).expect("deepest level always connected");
            d_modified[pos] += &du;
        }
    }
    (dec_w, dec_b, d_modified)
}

/// Backpropagates through the encoder given per-level upstream gradients.
fn encoder_backward(
    x: &Array4<f64>,
    params: &ModelParams,
    levels: &LevelFeatures,
    mut d_levels: Vec<Option<Array4<f64>>>,
) -> (Vec<Array4<f64>>, Vec<Array1<f64>>) {
    let arch = &params.arch;
    let depth = arch.depth();
    let mut enc_w = vec![Array4::zeros((0, 0, 0, 0)); depth];
    let mut enc_b = vec![Array1::zeros(0); depth];

    let mut acc = d_levels[depth]
        .take()
        .unwrap_or_else(|| Array4::zeros(levels.tensors[depth - 1].raw_dim()));
    for l in (1..=depth).rev() {
        let dpre = relu_backward(acc, &levels.tensors[l - 1]);
        let pad = arch.layers[l - 1].kernel / 2;
        let input = if l == 1 { x } else { &levels.tensors[l - 2] };
        let (dx, dw, db) = conv2d_backward(input, &params.encoder[l - 1].weight, &dpre, STRIDE, pad);
        enc_w[l - 1] = dw;
        enc_b[l - 1] = db;
        acc = dx;
        if l > 1 {
            if let Some(extra) = d_levels[l - 1].take() {
                acc += &extra;
            }
        }
    }
    (enc_w, enc_b)
}

/// Gradients of the reconstruction loss alone, with identity connections.
pub fn backward_pretrain(
    x: &Array4<f64>,
    params: &ModelParams,
    fwd: &PretrainForward,
) -> Result<Gradients> {
    let arch = &params.arch;
    let depth = arch.depth();
    let conn = arch.connected_levels();
    let d_xhat = (&fwd.xhat - x) * 2.0;
    let (dec_w, dec_b, d_modified) = decoder_backward(params, &fwd.cache, d_xhat);

    // Identity connections: skip gradients flow straight into the levels.
    let mut d_levels: Vec<Option<Array4<f64>>> = vec![None; depth + 1];
    for (pos, &level) in conn.iter().enumerate() {
        d_levels[level] = Some(d_modified[pos].clone());
    }
    let (enc_w, enc_b) = encoder_backward(x, params, &fwd.levels, d_levels);

    let n = params.n();
    Ok(Gradients {
        encoder_w: enc_w,
        encoder_b: enc_b,
        decoder_w: dec_w,
        decoder_b: dec_b,
        c: Array2::zeros((n, n)),
        d: vec![Array2::zeros((n, n)); params.selfexpr.levels()],
    })
}

pub fn backward_full(
    x: &Array4<f64>,
    params: &ModelParams,
    q: &MembershipMatrix,
    w: &LossWeights,
    fwd: &FullForward,
) -> Result<Gradients> {
    backward_full_regularized(x, params, q, w, CRegularizer::MembershipL1, fwd)
}

pub fn backward_full_regularized(
    x: &Array4<f64>,
    params: &ModelParams,
    q: &MembershipMatrix,
    w: &LossWeights,
    reg: CRegularizer,
    fwd: &FullForward,
) -> Result<Gradients> {
    let arch = &params.arch;
    let depth = arch.depth();
    let conn = arch.connected_levels();

    let d_xhat = (&fwd.xhat - x) * 2.0;
    let (dec_w, dec_b, d_modified) = decoder_backward(params, &fwd.cache, d_xhat);

    let mut g_c = selfexpress::loss_c_grad(reg, q, &params.selfexpr.c)? * w.lambda2;
    let mut g_d = Vec::with_capacity(conn.len());
    let mut d_levels: Vec<Option<Array4<f64>>> = vec![None; depth + 1];

    for (pos, &level) in conn.iter().enumerate() {
        let z = &fwd.flats[pos];
        let r = &fwd.residuals[pos];
        let a = params.selfexpr.connection(pos + 1)?;
        let dm = flatten_samples(&d_modified[pos]);
        // E = dM - 2*lambda1*R combines the decoder path with the
        // self-expression residual term in a single GEMM pair:
        //   dA = Z^T E,   dZ = E A^T + 2*lambda1*R
        let e = &dm - &(r * (2.0 * w.lambda1));
        let mut da = z.t().dot(&e);
        da.diag_mut().fill(0.0);
        let dz = e.dot(&a.t()) + &(r * (2.0 * w.lambda1));

        g_c += &da;
        let mut gd = da;
        gd += &(&params.selfexpr.d[pos] * (2.0 * w.lambda3));
        gd.diag_mut().fill(0.0);
        g_d.push(gd);

        let (c, h, wd) = arch.level_shape(level);
        d_levels[level] = Some(unflatten_samples(&dz, c, h, wd)?);
    }

    let (enc_w, enc_b) = encoder_backward(x, params, &fwd.levels, d_levels);

    Ok(Gradients {
        encoder_w: enc_w,
        encoder_b: enc_b,
        decoder_w: dec_w,
        decoder_b: dec_b,
        c: g_c,
        d: g_d,
    })
}

const MODEL_MAGIC: &[u8; 8] = b"MLRDSCM1";
const MODEL_VERSION: u8 = 1;

fn write_arch<W: std::io::Write>(w: &mut W, arch: &ArchitectureSpec) -> Result<()> {
    binio::write_usize(w, arch.layers.len())?;
    for layer in &arch.layers {
        binio::write_usize(w, layer.filters)?;
        binio::write_usize(w, layer.kernel)?;
    }
    binio::write_usize(w, arch.input_shape.0)?;
    binio::write_usize(w, arch.input_shape.1)?;
    binio::write_usize(w, arch.input_shape.2)?;
    binio::write_u8(
        w,
        match arch.connections {
            ConnectionScheme::MultiLevel => 0,
            ConnectionScheme::BottleneckOnly => 1,
        },
    )?;
    Ok(())
}

fn read_arch<R: std::io::Read>(r: &mut R) -> Result<ArchitectureSpec> {
    let depth = binio::read_usize(r)?;
    if depth == 0 || depth > 64 {
        return Err(Error::Format(format!("implausible encoder depth {depth}")));
    }
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let filters = binio::read_usize(r)?;
        let kernel = binio::read_usize(r)?;
        layers.push(ConvLayerSpec { filters, kernel });
    }
    let h = binio::read_usize(r)?;
    let w = binio::read_usize(r)?;
    let c = binio::read_usize(r)?;
    let connections = match binio::read_u8(r)? {
        0 => ConnectionScheme::MultiLevel,
        1 => ConnectionScheme::BottleneckOnly,
        other => {
            return Err(Error::Format(format!(
                "unknown connection scheme tag {other}"
            )))
        }
    };
    ArchitectureSpec::new(layers, (h, w, c), connections)
}

fn write_tensor4<W: std::io::Write>(w: &mut W, t: &Array4<f64>) -> Result<()> {
    binio::write_f64_slice(w, t.as_slice().expect("standard layout"))
}

fn read_tensor4<R: std::io::Read>(r: &mut R, dim: (usize, usize, usize, usize)) -> Result<Array4<f64>> {
    let data = binio::read_f64_vec(r)?;
    Array4::from_shape_vec(dim, data)
        .map_err(|e| Error::Format(format!("tensor shape mismatch: {e}")))
}

fn write_matrix<W: std::io::Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    binio::write_f64_slice(w, m.as_slice().expect("standard layout"))
}

fn read_matrix<R: std::io::Read>(r: &mut R, dim: (usize, usize)) -> Result<Array2<f64>> {
    let data = binio::read_f64_vec(r)?;
    Array2::from_shape_vec(dim, data)
        .map_err(|e| Error::Format(format!("matrix shape mismatch: {e}")))
}

fn write_vector<W: std::io::Write>(w: &mut W, v: &Array1<f64>) -> Result<()> {
    binio::write_f64_slice(w, v.as_slice().expect("standard layout"))
}

fn read_vector<R: std::io::Read>(r: &mut R, len: usize) -> Result<Array1<f64>> {
    let data = binio::read_f64_vec(r)?;
    if data.len() != len {
        return Err(Error::Format(format!(
            "vector length mismatch: expected {len}, found {}",
            data.len()
        )));
    }
    Ok(Array1::from_vec(data))
}

pub(crate) fn write_model<W: std::io::Write>(
    w: &mut W,
    params: &ModelParams,
    seed: u64,
) -> Result<()> {
    write_arch(w, &params.arch)?;
    binio::write_u64(w, seed)?;
    binio::write_usize(w, params.n())?;
    binio::write_usize(w, params.selfexpr.levels())?;
    for layer in &params.encoder {
        write_tensor4(w, &layer.weight)?;
        write_vector(w, &layer.bias)?;
    }
    for layer in &params.decoder {
        write_tensor4(w, &layer.weight)?;
        write_vector(w, &layer.bias)?;
    }
    write_matrix(w, &params.selfexpr.c)?;
    for d in &params.selfexpr.d {
        write_matrix(w, d)?;
    }
    Ok(())
}

pub(crate) fn read_model<R: std::io::Read>(r: &mut R) -> Result<(ModelParams, u64)> {
    let arch = read_arch(r)?;
    let seed = binio::read_u64(r)?;
    let n = binio::read_usize(r)?;
    let levels = binio::read_usize(r)?;
    if levels != arch.connected_levels().len() {
        return Err(Error::Format(format!(
            "container holds {levels} connection matrices but the architecture wires {}",
            arch.connected_levels().len()
        )));
    }
    let channels = arch.channels();
    let mut encoder = Vec::with_capacity(arch.depth());
    for (idx, layer) in arch.layers.iter().enumerate() {
        let k = layer.kernel;
        let weight = read_tensor4(r, (layer.filters, channels[idx], k, k))?;
        let bias = read_vector(r, layer.filters)?;
        encoder.push(ConvParams { weight, bias });
    }
    let mut decoder = Vec::with_capacity(arch.depth());
    for spec in decoder_layout(&arch)? {
        let weight = read_tensor4(r, (spec.c_in, spec.c_out, spec.kernel, spec.kernel))?;
        let bias = read_vector(r, spec.c_out)?;
        decoder.push(TconvParams {
            weight,
            bias,
            out_pad: spec.out_pad,
        });
    }
    let c = read_matrix(r, (n, n))?;
    let mut d = Vec::with_capacity(levels);
    for _ in 0..levels {
        d.push(read_matrix(r, (n, n))?);
    }
    let selfexpr = SelfExpressionParams::new(c, d)?;
    Ok((
        ModelParams {
            arch,
            encoder,
            decoder,
            selfexpr,
        },
        seed,
    ))
}

/// Writes the model container: architecture, seed, and every tensor,
/// bit-exact on round-trip.
pub fn save_model(params: &ModelParams, seed: u64, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    binio::write_magic(&mut w, MODEL_MAGIC, MODEL_VERSION)?;
    write_model(&mut w, params, seed)
}

pub fn load_model(path: &Path) -> Result<(ModelParams, u64)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let version = binio::read_magic(&mut r, MODEL_MAGIC)?;
    binio::expect_version(version, MODEL_VERSION)?;
    read_model(&mut r)
}
