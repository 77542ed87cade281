//! Attention-gated UNet with a hand-written backward pass.
//!
//! Layout for `depth = D` and `base_filters = B` (level `l` has `B * 2^l` channels):
//!
//! ```text
//! enc0 ─pool─ enc1 ─pool─ ... ─pool─ encD (bottleneck)
//!  │            │                      │
//!  gate ◄─────── dec1 ◄── ... ◄─────────┘   gate(skip_l, g = coarser decoder output)
//!  │
//! dec0 ── 1x1 conv ── sigmoid
//! ```
//!
//! Every encoder level is two `3x3 conv -> batch norm -> ReLU` layers. A decoder
//! level upsamples the coarser output 2x (nearest), applies `3x3 conv -> BN -> ReLU`,
//! concatenates it with the gated skip connection, and runs two more conv layers.
//! Convolutions followed by batch norm carry no bias.
//!
//! All learnable values live in one flat vector addressed by stable names
//! (`enc0.conv1.weight`, `dec0.gate.psi.bias`, ...), which keeps the optimizer,
//! checkpoints and gradient checks simple.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    add_inplace, bn_backward, bn_forward_eval, bn_forward_train, concat_channels, conv_backward, conv_forward,
    maxpool2, maxpool2_backward, relu_backward, relu_inplace, sigmoid, split_channels, upsample2, upsample2_backward,
    BnCache, ConvGeom, Tensor,
};
use crate::{Error, Image, RasterTile, Result, Sample};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Number of 2x down-sampling steps; the bottleneck sits at level `depth`.
    pub depth: usize,
    pub base_filters: usize,
}

impl ModelConfig {
    pub fn new(in_channels: usize) -> Self {
        Self { in_channels, depth: 4, base_filters: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.depth == 0 || self.base_filters == 0 {
            return Err(Error::InvalidConfig(format!(
                "in_channels, depth and base_filters must be at least 1, got {self:?}"
            )));
        }
        if self.depth > 12 {
            return Err(Error::InvalidConfig(format!("depth {} is unreasonably deep", self.depth)));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Intermediate width of the attention gate at `level`.
    pub fn gate_channels(&self, level: usize) -> usize {
        (self.channels(level) / 2).max(1)
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }
}

/// Name, shape and position of one parameter block in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    geom: ConvGeom,
    weight: usize,
    bias: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct BnSlot {
    channels: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBnRelu {
    conv: ConvSlot,
    bn: BnSlot,
}

#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    first: ConvBnRelu,
    second: ConvBnRelu,
}

#[derive(Debug, Clone, Copy)]
struct GateSlots {
    theta: ConvSlot,
    phi: ConvSlot,
    psi: ConvSlot,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLevel {
    up: ConvBnRelu,
    gate: GateSlots,
    block: DoubleConv,
}

#[derive(Debug, Clone)]
struct Architecture {
    encoders: Vec<DoubleConv>,
    /// Indexed by level, `0..depth`.
    decoders: Vec<DecoderLevel>,
    head: ConvSlot,
}

#[derive(Default)]
struct LayoutBuilder {
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
    param_len: usize,
    buffer_len: usize,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.param_len;
        let spec = ParamSpec { name, shape, offset };
        self.param_len += spec.len();
        self.params.push(spec);
        offset
    }

    fn buffer(&mut self, name: String, len: usize) -> usize {
        let offset = self.buffer_len;
        self.buffers.push(ParamSpec { name, shape: vec![len], offset });
        self.buffer_len += len;
        offset
    }

    fn conv(&mut self, prefix: &str, geom: ConvGeom, bias: bool) -> ConvSlot {
        let weight = self.param(format!("{prefix}.weight"), vec![geom.cout, geom.cin, geom.k, geom.k]);
        let bias = bias.then(|| self.param(format!("{prefix}.bias"), vec![geom.cout]));
        ConvSlot { geom, weight, bias }
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> BnSlot {
        BnSlot {
            channels,
            gamma: self.param(format!("{prefix}.gamma"), vec![channels]),
            beta: self.param(format!("{prefix}.beta"), vec![channels]),
            mean: self.buffer(format!("{prefix}.running_mean"), channels),
            var: self.buffer(format!("{prefix}.running_var"), channels),
        }
    }

    fn conv_bn_relu(&mut self, conv: &str, bn: &str, cin: usize, cout: usize) -> ConvBnRelu {
        ConvBnRelu { conv: self.conv(conv, ConvGeom::same(cin, cout, 3), false), bn: self.bn(bn, cout) }
    }

    fn double_conv(&mut self, prefix: &str, cin: usize, cout: usize) -> DoubleConv {
        DoubleConv {
            first: self.conv_bn_relu(&format!("{prefix}.conv1"), &format!("{prefix}.bn1"), cin, cout),
            second: self.conv_bn_relu(&format!("{prefix}.conv2"), &format!("{prefix}.bn2"), cout, cout),
        }
    }
}

fn build_layout(config: &ModelConfig) -> (Architecture, LayoutBuilder) {
    let mut b = LayoutBuilder::default();
    let mut encoders = Vec::with_capacity(config.depth + 1);
    let mut cin = config.in_channels;
    for level in 0..=config.depth {
        let cout = config.channels(level);
        encoders.push(b.double_conv(&format!("enc{level}"), cin, cout));
        cin = cout;
    }
    let mut decoders = Vec::with_capacity(config.depth);
    for level in 0..config.depth {
        let f = config.channels(level);
        let coarse = config.channels(level + 1);
        let inter = config.gate_channels(level);
        let p = format!("dec{level}");
        let up = b.conv_bn_relu(&format!("{p}.up"), &format!("{p}.up_bn"), coarse, f);
        let gate = GateSlots {
            theta: b.conv(&format!("{p}.gate.theta"), ConvGeom::patch(f, inter, 2), false),
            phi: b.conv(&format!("{p}.gate.phi"), ConvGeom::same(coarse, inter, 1), true),
            psi: b.conv(&format!("{p}.gate.psi"), ConvGeom::same(inter, 1, 1), true),
        };
        let block = b.double_conv(&p, 2 * f, f);
        decoders.push(DecoderLevel { up, gate, block });
    }
    let head = b.conv("head", ConvGeom::same(config.channels(0), 1, 1), true);
    (Architecture { encoders, decoders, head }, b)
}

/// Weights, biases and batch-norm statistics of one model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    seed: u64,
    specs: Vec<ParamSpec>,
    values: Vec<f64>,
    buffer_specs: Vec<ParamSpec>,
    buffers: Vec<f64>,
    arch: Architecture,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values && self.buffers == other.buffers
    }
}

/// Builds a freshly initialized attention UNet.
///
/// Convolution weights are drawn from `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`
/// in layout order from a ChaCha8 stream seeded with `seed`; biases and
/// batch-norm shifts start at 0, batch-norm scales at 1.
pub fn build_attention_unet(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let (arch, layout) = build_layout(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.param_len];
    for spec in &layout.params {
        let block = &mut values[spec.range()];
        if spec.name.ends_with(".weight") {
            let fan_in: usize = spec.shape[1..].iter().product();
            let bound = libm::sqrt(6.0 / fan_in as f64);
            block.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        } else if spec.name.ends_with(".gamma") {
            block.fill(1.0);
        }
    }
    let mut buffers = vec![0.0; layout.buffer_len];
    for spec in &layout.buffers {
        if spec.name.ends_with(".running_var") {
            buffers[spec.range()].fill(1.0);
        }
    }
    Ok(ModelParams {
        config,
        seed,
        specs: layout.params,
        values,
        buffer_specs: layout.buffers,
        buffers,
        arch,
    })
}

impl ModelParams {
    /// Rebuilds a model from stored values, validating lengths against the layout.
    pub fn from_parts(config: ModelConfig, seed: u64, values: Vec<f64>, buffers: Vec<f64>) -> Result<Self> {
        let mut model = build_attention_unet(config, seed)?;
        if values.len() != model.values.len() || buffers.len() != model.buffers.len() {
            return Err(Error::shape(
                "model parameters",
                format!("{} values and {} buffers", model.values.len(), model.buffers.len()),
                format!("{} values and {} buffers", values.len(), buffers.len()),
            ));
        }
        if let Some((index, &value)) = values.iter().chain(&buffers).enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { value, index });
        }
        model.values = values;
        model.buffers = buffers;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Learnable parameter blocks in layout order.
    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Non-learnable running statistics in layout order.
    pub fn buffer_specs(&self) -> &[ParamSpec] {
        &self.buffer_specs
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.specs.iter().find(|s| s.name == name).map(|s| &self.values[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.specs.iter().find(|s| s.name == name)?.range();
        Some(&mut self.values[range])
    }

    /// Weights of the attention gate on the skip connection at `level`.
    pub fn gate_weights(&self, level: usize) -> Option<GateWeights<'_>> {
        let gate = self.arch.decoders.get(level)?.gate;
        Some(GateWeights::from_slots(&gate, &self.values))
    }

    /// Blends batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &BatchStatistics, momentum: f64) {
        for entry in &stats.entries {
            let mean = &mut self.buffers[entry.mean..entry.mean + entry.batch_mean.len()];
            mean.iter_mut()
                .zip(&entry.batch_mean)
                .for_each(|(r, b)| *r = (1.0 - momentum) * *r + momentum * b);
            let var = &mut self.buffers[entry.var..entry.var + entry.batch_var.len()];
            var.iter_mut()
                .zip(&entry.batch_var)
                .for_each(|(r, b)| *r = (1.0 - momentum) * *r + momentum * b);
        }
    }

    fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let d = self.config.divisor();
        if c != self.config.in_channels || h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::shape(
                "model input",
                format!("{} channels with height and width divisible by {d}", self.config.in_channels),
                format!("{c}x{h}x{w}"),
            ));
        }
        Ok(())
    }

    /// Probability mask for one image, using running batch-norm statistics.
    pub fn forward(&self, image: &Image) -> Result<RasterTile> {
        let batch = Tensor::from_images([image])?;
        let probs = self.forward_batch(&batch)?;
        RasterTile::new(image.height(), image.width(), probs.into_data())
    }

    /// Batched inference; returns `N x 1 x H x W` probabilities.
    pub fn forward_batch(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.shape();
        self.check_input(c, h, w)?;
        let mut run = Run { params: self, train: false, stats: Vec::new() };
        Ok(run.forward(images).probs)
    }

    /// Loss under training-mode batch statistics, without gradients.
    pub fn training_loss(&self, images: &Tensor, labels: &[f64], loss: &dyn PixelLoss) -> Result<f64> {
        let (_, c, h, w) = images.shape();
        self.check_input(c, h, w)?;
        let mut run = Run { params: self, train: true, stats: Vec::new() };
        let trace = run.forward(images);
        check_labels(&trace.probs, labels)?;
        Ok(loss.evaluate(trace.probs.data(), labels).0)
    }

    /// Training-mode forward and backward pass over a batch.
    pub fn loss_and_gradients(&self, images: &Tensor, labels: &[f64], loss: &dyn PixelLoss) -> Result<GradientResult> {
        let (_, c, h, w) = images.shape();
        self.check_input(c, h, w)?;
        let mut run = Run { params: self, train: true, stats: Vec::new() };
        let trace = run.forward(images);
        check_labels(&trace.probs, labels)?;
        let (value, dprobs) = loss.evaluate(trace.probs.data(), labels);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { value, batch: String::new() });
        }
        let mut grads = vec![0.0; self.values.len()];
        run.backward(&trace, dprobs, &mut grads);
        if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite { value, index });
        }
        Ok(GradientResult {
            loss: value,
            gradients: Gradients { values: grads },
            stats: BatchStatistics { entries: run.stats },
            probs: trace.probs,
        })
    }

    /// [`loss_and_gradients`](Self::loss_and_gradients) over samples; a
    /// non-finite loss reports the keys of the offending batch.
    pub fn forward_with_gradients(&self, batch: &[Sample], loss: &dyn PixelLoss) -> Result<GradientResult> {
        let images = Tensor::from_images(batch.iter().map(|s| &s.image))?;
        let labels: Vec<f64> = batch.iter().flat_map(|s| s.label.to_f64()).collect();
        self.loss_and_gradients(&images, &labels, loss).map_err(|e| match e {
            Error::NonFiniteLoss { value, .. } => Error::NonFiniteLoss { value, batch: describe_batch(batch) },
            other => other,
        })
    }
}

pub(crate) fn describe_batch(batch: &[Sample]) -> String {
    let mut out = String::new();
    for (i, s) in batch.iter().enumerate() {
        if i > 0 {
            out.push_str("; ");
        }
        out.push_str(&format!("{}", s.key));
    }
    out
}

fn check_labels(probs: &Tensor, labels: &[f64]) -> Result<()> {
    if probs.data().len() != labels.len() {
        return Err(Error::shape("labels", format!("{} pixels", probs.data().len()), format!("{} pixels", labels.len())));
    }
    Ok(())
}

/// A differentiable per-pixel objective on probabilities.
pub trait PixelLoss {
    /// Loss value and its gradient with respect to each probability.
    fn evaluate(&self, probs: &[f64], targets: &[f64]) -> (f64, Vec<f64>);
}

/// Gradients laid out like [`ModelParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn get<'a>(&'a self, params: &ModelParams, name: &str) -> Option<&'a [f64]> {
        params.specs.iter().find(|s| s.name == name).map(|s| &self.values[s.range()])
    }
}

#[derive(Debug, Clone)]
struct StatEntry {
    mean: usize,
    var: usize,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Per-layer batch statistics observed during a training pass.
#[derive(Debug, Clone, Default)]
pub struct BatchStatistics {
    entries: Vec<StatEntry>,
}

#[derive(Debug, Clone)]
pub struct GradientResult {
    pub loss: f64,
    pub gradients: Gradients,
    pub stats: BatchStatistics,
    /// `N x 1 x H x W` probabilities from the training-mode pass.
    pub probs: Tensor,
}

/// Borrowed attention-gate weights.
#[derive(Debug, Clone, Copy)]
pub struct GateWeights<'a> {
    /// `inter x x_channels x 2 x 2`, stride 2, no bias.
    pub theta: &'a [f64],
    /// `inter x g_channels` pointwise map of the gating signal.
    pub phi_weight: &'a [f64],
    pub phi_bias: &'a [f64],
    /// `1 x inter` pointwise map to the attention logit.
    pub psi_weight: &'a [f64],
    pub psi_bias: &'a [f64],
    pub x_channels: usize,
    pub g_channels: usize,
    pub inter_channels: usize,
}

impl<'a> GateWeights<'a> {
    fn from_slots(slots: &GateSlots, values: &'a [f64]) -> Self {
        let slice = |off: usize, len: usize| &values[off..off + len];
        Self {
            theta: slice(slots.theta.weight, slots.theta.geom.weight_len()),
            phi_weight: slice(slots.phi.weight, slots.phi.geom.weight_len()),
            phi_bias: slice(slots.phi.bias.expect("phi has bias"), slots.phi.geom.cout),
            psi_weight: slice(slots.psi.weight, slots.psi.geom.weight_len()),
            psi_bias: slice(slots.psi.bias.expect("psi has bias"), 1),
            x_channels: slots.theta.geom.cin,
            g_channels: slots.phi.geom.cin,
            inter_channels: slots.theta.geom.cout,
        }
    }

    fn geoms(&self) -> (ConvGeom, ConvGeom, ConvGeom) {
        (
            ConvGeom::patch(self.x_channels, self.inter_channels, 2),
            ConvGeom::same(self.g_channels, self.inter_channels, 1),
            ConvGeom::same(self.inter_channels, 1, 1),
        )
    }
}

/// Output of [`attention_gate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// `alpha * x`, same shape as `x`.
    pub gated: Tensor,
    /// Attention coefficients at full resolution, `N x 1 x H x W`, each in `[0, 1]`.
    pub alpha: Tensor,
}

/// Additive attention gate.
///
/// `alpha = up2(sigmoid(psi(relu(theta(x) + phi(g)))))`, output `alpha * x`,
/// where `theta` is a stride-2 2x2 convolution bringing `x` to the gating
/// resolution and `phi`, `psi` are pointwise maps.
pub fn attention_gate(x: &Tensor, g: &Tensor, weights: &GateWeights<'_>) -> Result<GateOutput> {
    let (xn, xc, xh, xw) = x.shape();
    let (gn, gc, gh, gw) = g.shape();
    if xn != gn || xc != weights.x_channels || gc != weights.g_channels || xh != 2 * gh || xw != 2 * gw || gh == 0 || gw == 0 {
        return Err(Error::shape(
            "attention gate",
            format!("x {xn}x{}x{}x{} with g {xn}x{}x{}x{}", weights.x_channels, 2 * gh, 2 * gw, weights.g_channels, gh, gw),
            format!("x {xn}x{xc}x{xh}x{xw} with g {gn}x{gc}x{gh}x{gw}"),
        ));
    }
    let (theta, phi, psi) = weights.geoms();
    if weights.theta.len() != theta.weight_len()
        || weights.phi_weight.len() != phi.weight_len()
        || weights.phi_bias.len() != phi.cout
        || weights.psi_weight.len() != psi.weight_len()
        || weights.psi_bias.len() != 1
    {
        return Err(Error::shape("attention gate weights", "lengths matching channel counts", "mismatched slices"));
    }
    let (gated, cache) = gate_forward(x, g, weights);
    Ok(GateOutput { gated, alpha: upsample2(&cache.alpha) })
}

struct GateCache {
    x: Tensor,
    g: Tensor,
    hidden: Tensor,
    /// Coarse attention map `N x 1 x H/2 x W/2`.
    alpha: Tensor,
}

fn gate_forward(x: &Tensor, g: &Tensor, w: &GateWeights<'_>) -> (Tensor, GateCache) {
    let (theta, phi, psi) = w.geoms();
    let mut hidden = conv_forward(x, w.theta, None, &theta);
    add_inplace(&mut hidden, &conv_forward(g, w.phi_weight, Some(w.phi_bias), &phi));
    relu_inplace(&mut hidden);
    let mut alpha = conv_forward(&hidden, w.psi_weight, Some(w.psi_bias), &psi);
    alpha.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    let up = upsample2(&alpha);
    let gated = broadcast_scale(x, &up);
    (gated, GateCache { x: x.clone(), g: g.clone(), hidden, alpha })
}

/// Multiplies every channel of `x` by the single-channel map `scale`.
fn broadcast_scale(x: &Tensor, scale: &Tensor) -> Tensor {
    let (n, c, h, w) = x.shape();
    let plane = h * w;
    let mut out = x.clone();
    let data = out.data_mut();
    for i in 0..n {
        let s = scale.sample(i);
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            data[off..off + plane].iter_mut().zip(s).for_each(|(v, a)| *v *= a);
        }
    }
    out
}

/// Returns `(dx, dg)`.
fn gate_backward(w: &GateWeights<'_>, slots: &GateSlots, cache: &GateCache, dout: &Tensor, grads: &mut [f64]) -> (Tensor, Tensor) {
    let (theta, phi, psi) = w.geoms();
    let (n, c, h, wd) = cache.x.shape();
    let plane = h * wd;
    let up = upsample2(&cache.alpha);
    let mut dx = broadcast_scale(dout, &up);
    // d(alpha_up) = sum over channels of dout * x
    let mut dup = Tensor::zeros(n, 1, h, wd);
    {
        let dup_data = dup.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let xs = &cache.x.data()[off..off + plane];
                let ds = &dout.data()[off..off + plane];
                for p in 0..plane {
                    dup_data[i * plane + p] += ds[p] * xs[p];
                }
            }
        }
    }
    let mut dlogit = upsample2_backward(&dup);
    dlogit.data_mut().iter_mut().zip(cache.alpha.data()).for_each(|(d, &a)| *d *= a * (1.0 - a));

    let (psi_w, psi_b) = split_grad(grads, &slots.psi);
    let mut dhidden = conv_backward(&cache.hidden, w.psi_weight, &psi, &dlogit, psi_w, psi_b);
    relu_backward(&mut dhidden, &cache.hidden);
    let (phi_w, phi_b) = split_grad(grads, &slots.phi);
    let dg = conv_backward(&cache.g, w.phi_weight, &phi, &dhidden, phi_w, phi_b);
    let (theta_w, _) = split_grad(grads, &slots.theta);
    add_inplace(&mut dx, &conv_backward(&cache.x, w.theta, &theta, &dhidden, theta_w, None));
    (dx, dg)
}

/// Disjoint mutable views of a convolution's weight and bias gradients.
fn split_grad<'g>(grads: &'g mut [f64], slot: &ConvSlot) -> (&'g mut [f64], Option<&'g mut [f64]>) {
    let wlen = slot.geom.weight_len();
    match slot.bias {
        Some(b) => {
            debug_assert!(b >= slot.weight + wlen);
            let (head, tail) = grads.split_at_mut(b);
            (&mut head[slot.weight..slot.weight + wlen], Some(&mut tail[..slot.geom.cout]))
        }
        None => (&mut grads[slot.weight..slot.weight + wlen], None),
    }
}

struct CbrCache {
    input: Tensor,
    bn: Option<BnCache>,
    out: Tensor,
}

struct DoubleCache {
    first: CbrCache,
    second: CbrCache,
}

struct DecoderCache {
    up: CbrCache,
    gate: GateCache,
    block: DoubleCache,
}

struct Trace {
    encoders: Vec<DoubleCache>,
    pools: Vec<(Vec<u32>, (usize, usize, usize, usize))>,
    /// Indexed by level.
    decoders: Vec<Option<DecoderCache>>,
    head_input: Tensor,
    probs: Tensor,
}

struct Run<'p> {
    params: &'p ModelParams,
    train: bool,
    stats: Vec<StatEntry>,
}

impl Run<'_> {
    fn slice(&self, off: usize, len: usize) -> &[f64] {
        &self.params.values[off..off + len]
    }

    fn conv(&self, slot: &ConvSlot, x: &Tensor) -> Tensor {
        let w = self.slice(slot.weight, slot.geom.weight_len());
        let b = slot.bias.map(|b| self.slice(b, slot.geom.cout));
        conv_forward(x, w, b, &slot.geom)
    }

    fn cbr(&mut self, layer: &ConvBnRelu, x: Tensor) -> (Tensor, CbrCache) {
        let z = self.conv(&layer.conv, &x);
        let bn = layer.bn;
        let gamma = self.slice(bn.gamma, bn.channels);
        let beta = self.slice(bn.beta, bn.channels);
        let (mut y, cache) = if self.train {
            let (y, cache, mean, var) = bn_forward_train(&z, gamma, beta);
            self.stats.push(StatEntry { mean: bn.mean, var: bn.var, batch_mean: mean, batch_var: var });
            (y, Some(cache))
        } else {
            let buffers = &self.params.buffers;
            let mean = &buffers[bn.mean..bn.mean + bn.channels];
            let var = &buffers[bn.var..bn.var + bn.channels];
            (bn_forward_eval(&z, gamma, beta, mean, var), None)
        };
        relu_inplace(&mut y);
        (y.clone(), CbrCache { input: x, bn: cache, out: y })
    }

    fn double(&mut self, block: &DoubleConv, x: Tensor) -> (Tensor, DoubleCache) {
        let (a, first) = self.cbr(&block.first, x);
        let (b, second) = self.cbr(&block.second, a);
        (b, DoubleCache { first, second })
    }

    fn forward(&mut self, x: &Tensor) -> Trace {
        let arch = &self.params.arch;
        let depth = self.params.config.depth;
        let mut encoders = Vec::with_capacity(depth + 1);
        let mut pools = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut current = x.clone();
        for level in 0..=depth {
            let (out, cache) = self.double(&arch.encoders[level], current);
            encoders.push(cache);
            if level < depth {
                let (pooled, arg) = maxpool2(&out);
                pools.push((arg, out.shape()));
                skips.push(out);
                current = pooled;
            } else {
                current = out;
            }
        }
        let mut decoders: Vec<Option<DecoderCache>> = (0..depth).map(|_| None).collect();
        for level in (0..depth).rev() {
            let dec = arch.decoders[level];
            let (up, up_cache) = self.cbr(&dec.up, upsample2(&current));
            let weights = GateWeights::from_slots(&dec.gate, &self.params.values);
            let (gated, gate_cache) = gate_forward(&skips[level], &current, &weights);
            let (out, block_cache) = self.double(&dec.block, concat_channels(&gated, &up));
            decoders[level] = Some(DecoderCache { up: up_cache, gate: gate_cache, block: block_cache });
            current = out;
        }
        let mut probs = self.conv(&arch.head, &current);
        probs.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        Trace { encoders, pools, decoders, head_input: current, probs }
    }

    fn cbr_backward(&self, layer: &ConvBnRelu, cache: &CbrCache, mut dout: Tensor, grads: &mut [f64]) -> Tensor {
        relu_backward(&mut dout, &cache.out);
        let bn = layer.bn;
        let gamma = self.slice(bn.gamma, bn.channels);
        let (head, tail) = grads.split_at_mut(bn.beta);
        let dgamma = &mut head[bn.gamma..bn.gamma + bn.channels];
        let dbeta = &mut tail[..bn.channels];
        let dz = bn_backward(&dout, cache.bn.as_ref().expect("training pass caches batch norm"), gamma, dgamma, dbeta);
        let (dw, _) = split_grad(grads, &layer.conv);
        let w = self.slice(layer.conv.weight, layer.conv.geom.weight_len());
        conv_backward(&cache.input, w, &layer.conv.geom, &dz, dw, None)
    }

    fn double_backward(&self, block: &DoubleConv, cache: &DoubleCache, dout: Tensor, grads: &mut [f64]) -> Tensor {
        let d = self.cbr_backward(&block.second, &cache.second, dout, grads);
        self.cbr_backward(&block.first, &cache.first, d, grads)
    }

    fn backward(&self, trace: &Trace, dprobs: Vec<f64>, grads: &mut [f64]) {
        let arch = &self.params.arch;
        let config = self.params.config;
        let depth = config.depth;
        let (n, _, h, w) = trace.probs.shape();
        let mut dlogits = Tensor::new(n, 1, h, w, dprobs).expect("loss gradient matches output");
        dlogits
            .data_mut()
            .iter_mut()
            .zip(trace.probs.data())
            .for_each(|(d, &p)| *d *= p * (1.0 - p));
        let head_w = self.slice(arch.head.weight, arch.head.geom.weight_len());
        let (hw, hb) = split_grad(grads, &arch.head);
        let mut dcurrent = conv_backward(&trace.head_input, head_w, &arch.head.geom, &dlogits, hw, hb);

        let mut dskips: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        for level in 0..depth {
            let dec = &arch.decoders[level];
            let cache = trace.decoders[level].as_ref().expect("decoder cache");
            let dcat = self.double_backward(&dec.block, &cache.block, dcurrent, grads);
            let (dgated, dup) = split_channels(&dcat, config.channels(level));
            let dup_in = self.cbr_backward(&dec.up, &cache.up, dup, grads);
            let mut dcoarse = upsample2_backward(&dup_in);
            let weights = GateWeights::from_slots(&dec.gate, &self.params.values);
            let (dskip, dg) = gate_backward(&weights, &dec.gate, &cache.gate, &dgated, grads);
            add_inplace(&mut dcoarse, &dg);
            dskips[level] = Some(dskip);
            dcurrent = dcoarse;
        }
        for level in (0..=depth).rev() {
            if level < depth {
                let (arg, shape) = &trace.pools[level];
                let mut d = maxpool2_backward(&dcurrent, arg, *shape);
                add_inplace(&mut d, dskips[level].as_ref().expect("skip gradient"));
                dcurrent = d;
            }
            dcurrent = self.double_backward(&arch.encoders[level], &trace.encoders[level], dcurrent, grads);
        }
    }
}
