//! Bias-free CNN denoiser architectures, receptive-field arithmetic and
//! Jacobian rows ("adaptive filters").

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, NormMode};
use crate::error::{Error, Result};
use crate::ops::{self, BN_EPSILON, BN_MOMENTUM};
use crate::tensor::{Scalar, Tensor};
use crate::wavelet::DETAIL_CHANNELS;

/// One layer of a bias-free network. Convolutions carry no additive term and
/// batch normalization carries a per-channel scale but no shift.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
    },
    Relu,
    BatchNorm {
        channels: usize,
        epsilon: f64,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel_size,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            epsilon: BN_EPSILON,
        }
    }

    /// Learnable scalars in this layer.
    pub fn parameter_count(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel_size,
            } => in_channels * out_channels * kernel_size * kernel_size,
            LayerSpec::Relu => 0,
            LayerSpec::BatchNorm { channels, .. } => channels,
        }
    }
}

/// Layer-by-layer architecture description.
///
/// With `residual` set the network predicts the noise and the model output
/// is `input[..out_channels] - net(input)`; the map stays bias-free.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub residual: bool,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks channel chaining, odd kernels, conv at both ends and the
    /// conv → relu → batchnorm pattern of intermediate layers.
    pub fn validate(&self) -> Result<()> {
        let convs: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect();
        if convs.first() != Some(&0) || convs.last() != Some(&(self.layers.len() - 1)) {
            return Err(Error::config(format!(
                "network `{}` must start and end with a convolution",
                self.name
            )));
        }
        if self.residual && self.out_channels > self.in_channels {
            return Err(Error::config(format!(
                "residual network `{}` cannot output more channels than it reads",
                self.name
            )));
        }
        let mut channels = self.in_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel_size,
                } => {
                    if in_channels != channels {
                        return Err(Error::config(format!(
                            "layer {i}: conv expects {in_channels} channels, receives {channels}"
                        )));
                    }
                    if kernel_size % 2 == 0 || out_channels == 0 {
                        return Err(Error::config(format!(
                            "layer {i}: kernel size must be odd and width non-zero"
                        )));
                    }
                    let intermediate = i != 0 && i != self.layers.len() - 1;
                    if intermediate
                        && (self.layers.get(i + 1) != Some(&LayerSpec::Relu)
                            || !matches!(self.layers.get(i + 2), Some(LayerSpec::BatchNorm { .. })))
                    {
                        return Err(Error::config(format!(
                            "layer {i}: intermediate conv must be followed by relu and batchnorm"
                        )));
                    }
                    channels = out_channels;
                }
                LayerSpec::Relu => {}
                LayerSpec::BatchNorm { channels: c, epsilon } => {
                    if c != channels {
                        return Err(Error::config(format!(
                            "layer {i}: batchnorm over {c} channels, receives {channels}"
                        )));
                    }
                    if !(epsilon > 0.0) {
                        return Err(Error::config(format!("layer {i}: epsilon must be > 0")));
                    }
                }
            }
        }
        if channels != self.out_channels {
            return Err(Error::config(format!(
                "network `{}` ends with {channels} channels, declared {}",
                self.name, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::Conv { kernel_size, .. } => Some(kernel_size),
                _ => None,
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::parameter_count).sum()
    }

    /// Plain-text form used by config files and checkpoints.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "out_channels = {}", self.out_channels);
        let _ = writeln!(s, "residual = {}", self.residual);
        for l in &self.layers {
            match *l {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel_size,
                } => {
                    let _ = writeln!(s, "layer = conv {in_channels} {out_channels} {kernel_size}");
                }
                LayerSpec::Relu => {
                    let _ = writeln!(s, "layer = relu");
                }
                LayerSpec::BatchNorm { channels, epsilon } => {
                    let _ = writeln!(s, "layer = batchnorm {channels} {epsilon:e}");
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            location: format!("network spec line {line}"),
            message,
        };
        let mut name = None;
        let mut in_channels = None;
        let mut out_channels = None;
        let mut residual = None;
        let mut layers = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| perr(n + 1, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|e| perr(n + 1, format!("`{v}`: {e}")))
            };
            match key {
                "name" => name = Some(value.to_string()),
                "in_channels" => in_channels = Some(num(value)?),
                "out_channels" => out_channels = Some(num(value)?),
                "residual" => {
                    residual = Some(
                        value
                            .parse::<bool>()
                            .map_err(|e| perr(n + 1, format!("`{value}`: {e}")))?,
                    )
                }
                "layer" => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    let layer = match parts.as_slice() {
                        ["conv", i, o, k] => LayerSpec::conv(num(i)?, num(o)?, num(k)?),
                        ["relu"] => LayerSpec::Relu,
                        ["batchnorm", c, e] => LayerSpec::BatchNorm {
                            channels: num(c)?,
                            epsilon: e
                                .parse()
                                .map_err(|err| perr(n + 1, format!("`{e}`: {err}")))?,
                        },
                        _ => return Err(perr(n + 1, format!("unknown layer `{value}`"))),
                    };
                    layers.push(layer);
                }
                other => return Err(perr(n + 1, format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| perr(0, format!("missing `{k}`"));
        let spec = NetworkSpec {
            name: name.ok_or_else(|| missing("name"))?,
            in_channels: in_channels.ok_or_else(|| missing("in_channels"))?,
            out_channels: out_channels.ok_or_else(|| missing("out_channels"))?,
            residual: residual.unwrap_or(false),
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Side of the square input region one output element depends on, for unit
/// stride and "same" padding: `1 + Σ (k - 1)` over convolutions.
pub fn receptive_field(spec: &NetworkSpec) -> usize {
    1 + spec.kernel_sizes().iter().map(|k| k - 1).sum::<usize>()
}

/// Assembles `conv, (conv, relu, batchnorm)*, conv` from per-layer kernel sizes.
pub fn plain_network(
    name: &str,
    in_channels: usize,
    out_channels: usize,
    width: usize,
    kernels: &[usize],
    residual: bool,
) -> Result<NetworkSpec> {
    if kernels.len() < 2 {
        return Err(Error::config("a network needs at least two convolutions"));
    }
    if width == 0 {
        return Err(Error::config("channel width must be positive"));
    }
    let last = kernels.len() - 1;
    let mut layers = Vec::with_capacity(3 * kernels.len());
    for (i, &k) in kernels.iter().enumerate() {
        let cin = if i == 0 { in_channels } else { width };
        let cout = if i == last { out_channels } else { width };
        layers.push(LayerSpec::conv(cin, cout, k));
        if i != 0 && i != last {
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::batchnorm(width));
        }
    }
    let spec = NetworkSpec {
        name: name.to_string(),
        in_channels,
        out_channels,
        residual,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Kernel sizes (1 or 3) for `layers` convolutions reaching receptive field
/// `rf`: the `(rf-1)/2` 3×3 kernels are spread evenly, first and last
/// layers included.
pub fn kernel_pattern(layers: usize, rf: usize) -> Result<Vec<usize>> {
    if layers < 2 {
        return Err(Error::config("need at least two convolution layers"));
    }
    if rf == 0 || rf % 2 == 0 {
        return Err(Error::config(format!("receptive field {rf} must be odd")));
    }
    let n3 = (rf - 1) / 2;
    if n3 > layers {
        return Err(Error::config(format!(
            "receptive field {rf} needs more than {layers} 3×3 layers (max {})",
            2 * layers + 1
        )));
    }
    let mut pattern = vec![1; layers];
    match n3 {
        0 => {}
        1 => pattern[0] = 3,
        _ => {
            let span = layers - 1;
            for i in 0..n3 {
                let pos = (i * span + (n3 - 1) / 2) / (n3 - 1);
                pattern[pos] = 3;
            }
        }
    }
    debug_assert_eq!(pattern.iter().filter(|&&k| k == 3).count(), n3);
    Ok(pattern)
}

/// Architecture of the global low-pass denoiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowpassConfig {
    pub conv_layers: usize,
    pub width: usize,
    pub kernel_size: usize,
    pub residual: bool,
    pub seed: u64,
}

impl Default for LowpassConfig {
    /// 20 convolutions of width 64 with 3×3 kernels: 665,856 parameters.
    fn default() -> Self {
        LowpassConfig {
            conv_layers: 20,
            width: 64,
            kernel_size: 3,
            residual: true,
            seed: 0,
        }
    }
}

impl LowpassConfig {
    /// The 21-convolution variant (receptive field 43).
    pub fn deep() -> Self {
        LowpassConfig {
            conv_layers: 21,
            ..Self::default()
        }
    }
}

/// Architecture of a local conditional (or pixel-domain) denoiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub rf: usize,
    pub conv_layers: usize,
    pub width: usize,
    pub residual: bool,
    pub seed: u64,
}

impl LocalConfig {
    pub fn new(rf: usize) -> Self {
        LocalConfig {
            rf,
            conv_layers: 21,
            width: 64,
            residual: true,
            seed: 0,
        }
    }
}

pub fn build_lowpass_denoiser(cfg: &LowpassConfig) -> Result<Model> {
    if cfg.kernel_size % 2 == 0 {
        return Err(Error::config("low-pass kernel size must be odd"));
    }
    let kernels = vec![cfg.kernel_size; cfg.conv_layers];
    let spec = plain_network("lowpass", 1, 1, cfg.width, &kernels, cfg.residual)?;
    Model::init(spec, cfg.seed)
}

/// Conditional CNN with the full-size defaults (21 layers, width 64).
pub fn build_conditional_denoiser(rf: usize) -> Result<Model> {
    build_conditional_denoiser_with(&LocalConfig::new(rf))
}

/// Conditional CNN: input is the three noisy detail channels followed by the
/// conditioning low-pass channel; output is the three denoised details.
pub fn build_conditional_denoiser_with(cfg: &LocalConfig) -> Result<Model> {
    let kernels = kernel_pattern(cfg.conv_layers, cfg.rf)?;
    let spec = plain_network(
        &format!("conditional-rf{}", cfg.rf),
        DETAIL_CHANNELS + 1,
        DETAIL_CHANNELS,
        cfg.width,
        &kernels,
        cfg.residual,
    )?;
    Model::init(spec, cfg.seed)
}

/// Conventional single-scale denoiser with a controlled receptive field.
pub fn build_pixel_denoiser(cfg: &LocalConfig) -> Result<Model> {
    let kernels = kernel_pattern(cfg.conv_layers, cfg.rf)?;
    let spec = plain_network(
        &format!("pixel-rf{}", cfg.rf),
        1,
        1,
        cfg.width,
        &kernels,
        cfg.residual,
    )?;
    Model::init(spec, cfg.seed)
}

/// Initial batch-norm scale. Unit scales make a deep residual network start
/// far from the identity and stall there once it shrinks its residual; small
/// scales start near the identity and train reliably.
pub const BN_INIT_SCALE: f64 = 0.025;

/// Nodes created by [`Model::forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphForward {
    pub output: NodeId,
    /// One node per parameter tensor, in [`Model::params`] order.
    pub params: Vec<NodeId>,
    /// One node per batch-norm layer.
    pub norms: Vec<NodeId>,
}

/// A network specification with weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub spec: NetworkSpec,
    /// Conv kernels and batch-norm scales in layer order.
    params: Vec<Tensor<T>>,
    /// Running per-channel second moments, one vector per batch-norm layer.
    running: Vec<Vec<T>>,
    /// Noise standard deviations the model was trained on.
    pub noise_range: (f64, f64),
}

impl<T: Scalar> Model<T> {
    /// Kaiming fan-in initialization for kernels, batch-norm scales of
    /// [`BN_INIT_SCALE`] and unit running statistics.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut running = Vec::new();
        for l in &spec.layers {
            match *l {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel_size,
                } => {
                    let fan_in = (in_channels * kernel_size * kernel_size) as f64;
                    params.push(Tensor::randn(
                        &[out_channels, in_channels, kernel_size, kernel_size],
                        (2.0 / fan_in).sqrt(),
                        &mut rng,
                    ));
                }
                LayerSpec::BatchNorm { channels, .. } => {
                    params.push(Tensor::full(&[channels], T::lit(BN_INIT_SCALE)));
                    running.push(vec![T::one(); channels]);
                }
                LayerSpec::Relu => {}
            }
        }
        Ok(Model {
            spec,
            params,
            running,
            noise_range: (0.0, 1.0),
        })
    }

    /// Rebuilds a model from stored tensors, checking every shape.
    pub fn from_parts(
        spec: NetworkSpec,
        params: Vec<Tensor<T>>,
        running: Vec<Vec<T>>,
        noise_range: (f64, f64),
    ) -> Result<Self> {
        let template = Model::<T>::init(spec, 0)?;
        if params.len() != template.params.len() || running.len() != template.running.len() {
            return Err(Error::dim(format!(
                "spec needs {} parameter tensors and {} norm statistics, got {} and {}",
                template.params.len(),
                template.running.len(),
                params.len(),
                running.len()
            )));
        }
        for (a, b) in params.iter().zip(&template.params) {
            a.same_shape(b)?;
        }
        for (a, b) in running.iter().zip(&template.running) {
            if a.len() != b.len() {
                return Err(Error::dim("running statistics length mismatch"));
            }
        }
        Ok(Model {
            spec: template.spec,
            params,
            running,
            noise_range,
        })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[Vec<T>] {
        &self.running
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.spec)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self
                .running
                .iter()
                .map(|r| r.iter().map(|&v| U::lit(v.as_f64())).collect())
                .collect(),
            noise_range: self.noise_range,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::dim(format!(
                "model `{}` reads {} channels, input has {c}",
                self.spec.name, self.spec.in_channels
            )));
        }
        Ok(())
    }

    /// Eval-mode forward pass on a `B×C×H×W` batch.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut params = self.params.iter();
        let mut running = self.running.iter();
        let mut h = x.clone();
        for l in &self.spec.layers {
            h = match *l {
                LayerSpec::Conv { .. } => {
                    ops::conv2d_forward(&h, params.next().expect("validated spec"))?
                }
                LayerSpec::Relu => ops::relu_forward(&h),
                LayerSpec::BatchNorm { epsilon, .. } => {
                    let scale = params.next().expect("validated spec");
                    let stats = running.next().expect("validated spec");
                    ops::batchnorm_forward(&h, scale, stats, epsilon)?.0
                }
            };
        }
        let out = if self.spec.residual {
            residual_output(x, &h, self.spec.out_channels)?
        } else {
            h
        };
        out.check_finite("model output")?;
        Ok(out)
    }

    /// Forward pass recorded on `graph` so it can be differentiated.
    pub fn forward_graph(
        &self,
        graph: &mut Graph<T>,
        input: NodeId,
        mode: NormMode,
        params_require_grad: bool,
    ) -> Result<GraphForward> {
        self.check_input(graph.value(input))?;
        let mut param_nodes = Vec::with_capacity(self.params.len());
        let mut norms = Vec::new();
        let mut params = self.params.iter();
        let mut running = self.running.iter();
        let mut h = input;
        for l in &self.spec.layers {
            h = match *l {
                LayerSpec::Conv { .. } => {
                    let k = graph.leaf(
                        params.next().expect("validated spec").clone(),
                        params_require_grad,
                    )?;
                    param_nodes.push(k);
                    graph.conv2d(h, k)?
                }
                LayerSpec::Relu => graph.relu(h)?,
                LayerSpec::BatchNorm { epsilon, .. } => {
                    let s = graph.leaf(
                        params.next().expect("validated spec").clone(),
                        params_require_grad,
                    )?;
                    param_nodes.push(s);
                    let stats = running.next().expect("validated spec");
                    let n = graph.batchnorm(h, s, stats, epsilon, mode)?;
                    norms.push(n);
                    n
                }
            };
        }
        let output = if self.spec.residual {
            let head = if self.spec.out_channels == self.spec.in_channels {
                input
            } else {
                graph.slice_channels(input, self.spec.out_channels)?
            };
            graph.sub(head, h)?
        } else {
            h
        };
        Ok(GraphForward {
            output,
            params: param_nodes,
            norms,
        })
    }

    /// Folds the batch statistics seen by a train-mode pass into the running
    /// statistics.
    pub fn update_running_stats(&mut self, graph: &Graph<T>, norms: &[NodeId]) -> Result<()> {
        if norms.len() != self.running.len() {
            return Err(Error::dim("norm node count does not match the model"));
        }
        let m = T::lit(BN_MOMENTUM);
        for (stats, &node) in self.running.iter_mut().zip(norms) {
            let batch = graph
                .batch_mean_square(node)
                .ok_or_else(|| Error::Graph("node carries no batch statistics".into()))?;
            for (r, &b) in stats.iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
        Ok(())
    }

    /// Evaluates on a single `C×H×W` image.
    pub fn apply(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(&image.clone().unsqueeze0())?.squeeze0()
    }
}

fn residual_output<T: Scalar>(x: &Tensor<T>, net: &Tensor<T>, out_channels: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = net.clone();
    let nd = net.data();
    let xd = x.data();
    for item in 0..b {
        let dst = &mut out.data_mut()[item * out_channels * hw..][..out_channels * hw];
        let src = &xd[item * c * hw..][..out_channels * hw];
        let n = &nd[item * out_channels * hw..][..out_channels * hw];
        for ((d, &s), &v) in dst.iter_mut().zip(src).zip(n) {
            *d = s - v;
        }
    }
    Ok(out)
}

/// Gradient of one output element with respect to every input element, in
/// eval mode. For a bias-free network this is the adaptive linear filter the
/// network applies at that output location.
pub fn jacobian_row<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    coordinate: (usize, usize, usize),
) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    let (oc, r, col) = coordinate;
    if oc >= model.spec.out_channels || r >= h || col >= w {
        return Err(Error::Index(format!(
            "output coordinate {coordinate:?} outside [{}, {h}, {w}]",
            model.spec.out_channels
        )));
    }
    let mut g = Graph::new();
    let x = g.leaf(input.clone().unsqueeze0(), true)?;
    let fwd = model.forward_graph(&mut g, x, NormMode::Eval, false)?;
    let mut seed = Tensor::zeros(g.value(fwd.output).shape());
    seed.set(&[0, oc, r, col], T::one())?;
    let mut grads = g.backward_seeded(fwd.output, seed)?;
    let row = grads
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(&[1, c, h, w]));
    row.squeeze0()
}
