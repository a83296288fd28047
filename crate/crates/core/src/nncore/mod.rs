//! Deterministic feedforward/conv network with explicit activation tracing,
//! one dense head per task, and mask-aware evaluation. The trace exists so
//! relevance propagation can replay the exact forward pass later.

mod train;

pub use train::{
    backward_sample, backward_sample_joint, cross_entropy, sgd_step, train_joint, train_task,
    GradBuffer, NetGrads, TrainConfig, TrainData, TrainStats,
};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freezer::SubnetworkMask;
use crate::rng;
use crate::tensor::Tensor;

pub type TaskId = usize;

/// One labeled sample; `label` is task-local (0..classes of that task).
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

/// Architecture description before parameters exist; this is what config
/// files contain. Shapes are inferred from the network input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDef {
    Dense { output: usize },
    Conv2d { out_channels: usize, kernel: usize, stride: usize },
    MaxPool { size: usize },
    Relu,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub input: usize,
    pub output: usize,
    /// Row-major `[output][input]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out_ch][in_ch][k][k]` row-major, no padding.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.input * self.output || self.bias.len() != self.output {
            return Err(Error::dim(format!(
                "dense {}x{} carries {} weights / {} biases",
                self.input,
                self.output,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite dense parameter".into()));
        }
        Ok(())
    }
}

impl ConvLayer {
    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.weight_count() || self.bias.len() != self.out_channels {
            return Err(Error::dim(format!(
                "conv {}->{} k{} carries {} weights / {} biases",
                self.in_channels,
                self.out_channels,
                self.kernel,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::dim("conv kernel and stride must be positive"));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite conv parameter".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense(DenseLayer),
    Conv2d(ConvLayer),
    MaxPool { size: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn is_freezable(&self) -> bool {
        matches!(self, LayerSpec::Dense(_) | LayerSpec::Conv2d(_))
    }

    /// Number of freezable units: dense output neurons or conv output channels.
    pub fn unit_count(&self) -> Option<usize> {
        match self {
            LayerSpec::Dense(d) => Some(d.output),
            LayerSpec::Conv2d(c) => Some(c.out_channels),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense(d) => {
                if input != [d.input] {
                    return Err(Error::dim(format!(
                        "dense expects [{}], got {:?} (insert an explicit flatten)",
                        d.input, input
                    )));
                }
                Ok(vec![d.output])
            }
            LayerSpec::Conv2d(c) => {
                let [ch, h, w] = three(input, "conv2d")?;
                if ch != c.in_channels {
                    return Err(Error::dim(format!(
                        "conv expects {} input channels, got {}",
                        c.in_channels, ch
                    )));
                }
                if h < c.kernel || w < c.kernel {
                    return Err(Error::dim(format!(
                        "conv kernel {} exceeds input {}x{}",
                        c.kernel, h, w
                    )));
                }
                let oh = (h - c.kernel) / c.stride + 1;
                let ow = (w - c.kernel) / c.stride + 1;
                Ok(vec![c.out_channels, oh, ow])
            }
            LayerSpec::MaxPool { size } => {
                let [ch, h, w] = three(input, "maxpool")?;
                if *size == 0 || h < *size || w < *size {
                    return Err(Error::dim(format!(
                        "pool window {} does not fit input {}x{}",
                        size, h, w
                    )));
                }
                Ok(vec![ch, h / size, w / size])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn three(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(Error::dim(format!("{what} expects [c,h,w], got {other:?}"))),
    }
}

/// He-uniform bound for ReLU nets.
fn init_dense(input: usize, output: usize, rng: &mut ChaCha20Rng) -> DenseLayer {
    let bound = (6.0 / input as f64).sqrt();
    let weights = (0..input * output)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    DenseLayer {
        input,
        output,
        weights,
        bias: vec![0.0; output],
    }
}

fn init_conv(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    rng: &mut ChaCha20Rng,
) -> ConvLayer {
    let fan_in = in_channels * kernel * kernel;
    let bound = (6.0 / fan_in as f64).sqrt();
    let count = out_channels * fan_in;
    let weights = (0..count).map(|_| rng.random_range(-bound..bound)).collect();
    ConvLayer {
        in_channels,
        out_channels,
        kernel,
        stride,
        weights,
        bias: vec![0.0; out_channels],
    }
}

/// Multi-head network: shared backbone plus one dense head per seen task.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    backbone: Vec<LayerSpec>,
    /// Activation shapes at every boundary: `[0]` is the input shape,
    /// `[l + 1]` the output shape of backbone layer `l`.
    boundary_shapes: Vec<Vec<usize>>,
    heads: BTreeMap<TaskId, DenseLayer>,
    rng_seed: u64,
}

impl Network {
    /// Build from an architecture description with seeded He-uniform weights
    /// and zero biases. Heads are added later, one per task.
    pub fn seeded(input_shape: Vec<usize>, defs: &[LayerDef], seed: u64) -> Result<Network> {
        let mut rng = rng::rng_from(seed, rng::stream::BACKBONE_INIT);
        let mut backbone = Vec::with_capacity(defs.len());
        let mut shape = input_shape.clone();
        for def in defs {
            let spec = match *def {
                LayerDef::Dense { output } => {
                    let input = match shape.as_slice() {
                        [n] => *n,
                        other => {
                            return Err(Error::dim(format!(
                                "dense expects rank-1 input, got {other:?} (insert an explicit flatten)"
                            )))
                        }
                    };
                    LayerSpec::Dense(init_dense(input, output, &mut rng))
                }
                LayerDef::Conv2d { out_channels, kernel, stride } => {
                    let [ch, _, _] = three(&shape, "conv2d")?;
                    LayerSpec::Conv2d(init_conv(ch, out_channels, kernel, stride, &mut rng))
                }
                LayerDef::MaxPool { size } => LayerSpec::MaxPool { size },
                LayerDef::Relu => LayerSpec::Relu,
                LayerDef::Flatten => LayerSpec::Flatten,
            };
            shape = spec.output_shape(&shape)?;
            backbone.push(spec);
        }
        Network::from_parts(input_shape, backbone, BTreeMap::new(), seed)
    }

    /// Assemble from existing parameters (checkpoint load); validates shapes.
    pub fn from_parts(
        input_shape: Vec<usize>,
        backbone: Vec<LayerSpec>,
        heads: BTreeMap<TaskId, DenseLayer>,
        rng_seed: u64,
    ) -> Result<Network> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("bad input shape {input_shape:?}")));
        }
        let mut boundary_shapes = vec![input_shape.clone()];
        let mut shape = input_shape.clone();
        for spec in &backbone {
            match spec {
                LayerSpec::Dense(d) => d.validate()?,
                LayerSpec::Conv2d(c) => c.validate()?,
                _ => {}
            }
            shape = spec.output_shape(&shape)?;
            boundary_shapes.push(shape.clone());
        }
        let out_dim: usize = shape.iter().product();
        for (task, head) in &heads {
            head.validate()?;
            if head.input != out_dim {
                return Err(Error::dim(format!(
                    "head {} input {} vs backbone output {}",
                    task, head.input, out_dim
                )));
            }
        }
        Ok(Network {
            input_shape,
            backbone,
            boundary_shapes,
            heads,
            rng_seed,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn backbone(&self) -> &[LayerSpec] {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.backbone
    }

    pub fn boundary_shape(&self, boundary: usize) -> &[usize] {
        &self.boundary_shapes[boundary]
    }

    /// Flattened backbone output dimension (head input width).
    pub fn output_dim(&self) -> usize {
        self.boundary_shapes.last().unwrap().iter().product()
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn heads(&self) -> &BTreeMap<TaskId, DenseLayer> {
        &self.heads
    }

    pub fn head(&self, task: TaskId) -> Result<&DenseLayer> {
        self.heads.get(&task).ok_or(Error::MissingTask(task))
    }

    pub fn head_mut(&mut self, task: TaskId) -> Result<&mut DenseLayer> {
        self.heads.get_mut(&task).ok_or(Error::MissingTask(task))
    }

    /// Add a seeded head for a new task. The head seed derives from
    /// (network seed, task), so earlier training does not shift it.
    pub fn add_head(&mut self, task: TaskId, classes: usize) -> Result<()> {
        if self.heads.contains_key(&task) {
            return Err(Error::Input(format!("task {task} already has a head")));
        }
        if classes < 2 {
            return Err(Error::Input(format!("head needs >= 2 classes, got {classes}")));
        }
        if self.boundary_shapes.last().unwrap().len() != 1 {
            return Err(Error::dim(
                "backbone output must be rank-1 before attaching heads",
            ));
        }
        let mut rng = rng::rng_from(
            self.rng_seed,
            rng::tagged(rng::stream::HEAD_INIT, &[task as u64]),
        );
        let head = init_dense(self.output_dim(), classes, &mut rng);
        self.heads.insert(task, head);
        Ok(())
    }

    pub fn insert_head_raw(&mut self, task: TaskId, head: DenseLayer) -> Result<()> {
        head.validate()?;
        if head.input != self.output_dim() {
            return Err(Error::dim(format!(
                "head {} input {} vs backbone output {}",
                task,
                head.input,
                self.output_dim()
            )));
        }
        self.heads.insert(task, head);
        Ok(())
    }

    /// Backbone indices of freezable layers (dense or conv), in order.
    pub fn freezable_layers(&self) -> Vec<usize> {
        self.backbone
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_freezable())
            .map(|(i, _)| i)
            .collect()
    }

    /// Unit counts per freezable layer (dense outputs / conv channels).
    pub fn freezable_widths(&self) -> Vec<usize> {
        self.backbone
            .iter()
            .filter_map(|l| l.unit_count())
            .collect()
    }

    pub fn forward(&self, x: &Tensor, head: TaskId) -> Result<(Tensor, ForwardTrace)> {
        self.forward_masked(x, head, None)
    }

    /// Forward pass with optional subnetwork masking. Masked units have their
    /// activations zeroed at the layer output, after the bias.
    pub fn forward_masked(
        &self,
        x: &Tensor,
        head: TaskId,
        mask: Option<&SubnetworkMask>,
    ) -> Result<(Tensor, ForwardTrace)> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::dim(format!(
                "input shape {:?} vs network {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let head_layer = self.head(head)?;
        if let Some(m) = mask {
            m.check_widths(&self.freezable_widths())?;
        }

        let mut layers = Vec::with_capacity(self.backbone.len());
        let mut current: Vec<f64> = x.values().to_vec();
        let mut freezable_idx = 0usize;
        for (li, spec) in self.backbone.iter().enumerate() {
            let in_shape = &self.boundary_shapes[li];
            let mut winners = None;
            let mut out = match spec {
                LayerSpec::Dense(d) => dense_forward(d, &current),
                LayerSpec::Conv2d(c) => conv_forward(c, &current, in_shape),
                LayerSpec::MaxPool { size } => {
                    let (o, w) = maxpool_forward(*size, &current, in_shape);
                    winners = Some(w);
                    o
                }
                LayerSpec::Relu => current.iter().map(|v| v.max(0.0)).collect(),
                LayerSpec::Flatten => current.clone(),
            };
            if spec.is_freezable() {
                if let Some(m) = mask {
                    apply_unit_mask(spec, m.keep(freezable_idx), &mut out, &self.boundary_shapes[li + 1]);
                }
                freezable_idx += 1;
            }
            layers.push(LayerTrace {
                output: out.clone(),
                winners,
            });
            current = out;
        }

        let logits = dense_forward(head_layer, &current);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let trace = ForwardTrace {
            input: x.clone(),
            layers,
            logits: logits.clone(),
            head,
        };
        Ok((Tensor::from_vec(logits)?, trace))
    }
}

fn dense_forward(d: &DenseLayer, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(d.output);
    for o in 0..d.output {
        let row = &d.weights[o * d.input..(o + 1) * d.input];
        let mut acc = d.bias[o];
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        out.push(acc);
    }
    out
}

fn conv_forward(c: &ConvLayer, x: &[f64], in_shape: &[usize]) -> Vec<f64> {
    let (ic, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h - c.kernel) / c.stride + 1;
    let ow = (w - c.kernel) / c.stride + 1;
    let mut out = vec![0.0; c.out_channels * oh * ow];
    for oc in 0..c.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = c.bias[oc];
                for ci in 0..ic {
                    for ky in 0..c.kernel {
                        let iy = oy * c.stride + ky;
                        let in_row = (ci * h + iy) * w + ox * c.stride;
                        let w_row = ((oc * ic + ci) * c.kernel + ky) * c.kernel;
                        for kx in 0..c.kernel {
                            acc += c.weights[w_row + kx] * x[in_row + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Non-overlapping max pooling (stride == window). Returns outputs plus the
/// flat input index of each window winner; ties go to the first maximum in
/// row-major order so relevance and gradient routing agree.
fn maxpool_forward(size: usize, x: &[f64], in_shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (ch, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = h / size;
    let ow = w / size;
    let mut out = Vec::with_capacity(ch * oh * ow);
    let mut winners = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = (c * h + oy * size + ky) * w + ox * size + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                winners.push(best_idx);
            }
        }
    }
    (out, winners)
}

fn apply_unit_mask(spec: &LayerSpec, keep: &[bool], out: &mut [f64], out_shape: &[usize]) {
    match spec {
        LayerSpec::Dense(_) => {
            for (v, k) in out.iter_mut().zip(keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
        LayerSpec::Conv2d(_) => {
            let plane: usize = out_shape[1] * out_shape[2];
            for (oc, k) in keep.iter().enumerate() {
                if !k {
                    out[oc * plane..(oc + 1) * plane].fill(0.0);
                }
            }
        }
        _ => {}
    }
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub output: Vec<f64>,
    /// MaxPool only: flat input index of each output's winner.
    pub winners: Option<Vec<usize>>,
}

/// Cached activations of one forward pass: network input, every backbone
/// layer output, and the selected head's logits.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Tensor,
    layers: Vec<LayerTrace>,
    logits: Vec<f64>,
    head: TaskId,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn layer(&self, l: usize) -> &LayerTrace {
        &self.layers[l]
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Input activations of backbone layer `l`.
    pub fn input_of(&self, l: usize) -> &[f64] {
        if l == 0 {
            self.input.values()
        } else {
            &self.layers[l - 1].output
        }
    }

    pub fn output_of(&self, l: usize) -> &[f64] {
        &self.layers[l].output
    }

    /// Backbone output feeding the head.
    pub fn head_input(&self) -> &[f64] {
        match self.layers.last() {
            Some(t) => &t.output,
            None => self.input.values(),
        }
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn head(&self) -> TaskId {
        self.head
    }
}

/// Fraction of `samples` classified correctly (percentage points, 0..100)
/// under an optional mask, using the given head with task-local labels.
pub fn accuracy(
    net: &Network,
    samples: &[Sample],
    head: TaskId,
    mask: Option<&SubnetworkMask>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("accuracy over empty sample set".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        let (logits, _) = net.forward_masked(&s.input, head, mask)?;
        if argmax(logits.values()) == s.label {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

/// First index of the maximum value (ties to the lowest index).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
