//! Cross-entropy training with momentum SGD, plateau learning-rate decay,
//! and per-neuron update masks so frozen neurons stay bit-identical.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freezer::FreezeState;
use crate::nncore::{argmax, ConvLayer, DenseLayer, ForwardTrace, LayerSpec, Network, Sample, TaskId};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Multiply the learning rate by this factor when the monitored loss has
    /// not improved for `lr_plateau_patience` epochs.
    pub lr_decay_factor: f64,
    pub lr_plateau_patience: usize,
    /// Stop after this many epochs without improvement; None trains the full
    /// epoch budget.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 64,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_plateau_patience: 5,
            early_stop_patience: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must lie in (0,1], got {}",
                self.lr_decay_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainStats {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub final_lr: f64,
    pub epochs_run: usize,
}

/// Numerically stable −log softmax(logits)[label].
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let v = logits.values();
    if label >= v.len() {
        return Err(Error::Input(format!(
            "label {} out of range for {} logits",
            label,
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logits in cross_entropy".into()));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(lse - v[label])
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Weight/bias gradient (or velocity) buffer congruent with one layer.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl GradBuffer {
    fn zeros_like_dense(d: &DenseLayer) -> GradBuffer {
        GradBuffer {
            w: vec![0.0; d.weights.len()],
            b: vec![0.0; d.bias.len()],
        }
    }

    fn zeros_like_conv(c: &ConvLayer) -> GradBuffer {
        GradBuffer {
            w: vec![0.0; c.weights.len()],
            b: vec![0.0; c.bias.len()],
        }
    }

    fn clear(&mut self) {
        self.w.fill(0.0);
        self.b.fill(0.0);
    }

    fn scale(&mut self, f: f64) {
        for v in &mut self.w {
            *v *= f;
        }
        for v in &mut self.b {
            *v *= f;
        }
    }
}

/// Gradients for the whole network: one buffer per parameterized backbone
/// layer (indexed like the backbone) plus one per head.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<Option<GradBuffer>>,
    pub heads: BTreeMap<TaskId, GradBuffer>,
}

impl NetGrads {
    pub fn zeros_like(net: &Network) -> NetGrads {
        let layers = net
            .backbone()
            .iter()
            .map(|spec| match spec {
                LayerSpec::Dense(d) => Some(GradBuffer::zeros_like_dense(d)),
                LayerSpec::Conv2d(c) => Some(GradBuffer::zeros_like_conv(c)),
                _ => None,
            })
            .collect();
        let heads = net
            .heads()
            .iter()
            .map(|(t, h)| (*t, GradBuffer::zeros_like_dense(h)))
            .collect();
        NetGrads { layers, heads }
    }

    pub fn clear(&mut self) {
        for g in self.layers.iter_mut().flatten() {
            g.clear();
        }
        for g in self.heads.values_mut() {
            g.clear();
        }
    }

    fn scale(&mut self, f: f64) {
        for g in self.layers.iter_mut().flatten() {
            g.scale(f);
        }
        for g in self.heads.values_mut() {
            g.scale(f);
        }
    }
}

/// Backpropagate one sample's cross-entropy loss through the traced forward
/// pass, accumulating (not averaging) into `grads`. Returns the loss.
pub fn backward_sample(
    net: &Network,
    trace: &ForwardTrace,
    label: usize,
    grads: &mut NetGrads,
) -> Result<f64> {
    let head_task = trace.head();
    let head = net.head(head_task)?;
    let logits = trace.logits();
    let loss = cross_entropy(&Tensor::from_vec(logits.to_vec())?, label)?;

    // d loss / d logits = softmax - onehot
    let mut dy = softmax(logits);
    dy[label] -= 1.0;

    // Head is a dense layer on the backbone output.
    let head_in = trace.head_input();
    let hg = grads
        .heads
        .get_mut(&head_task)
        .ok_or(Error::MissingTask(head_task))?;
    let mut dx = vec![0.0; head.input];
    dense_backward(head, head_in, &dy, hg, &mut dx);

    backbone_backward(net, trace, dx, grads);
    Ok(loss)
}

/// Backpropagate one sample under a single softmax spanning every head, in
/// ascending task order. The target class is the sample's label offset by the
/// widths of the earlier heads, so heads compete for probability mass and
/// their logits end up on one comparable scale. Every head receives
/// gradients: the correct one is pushed up, all others are pushed down on
/// this sample. Returns the loss.
pub fn backward_sample_joint(
    net: &Network,
    trace: &ForwardTrace,
    label: usize,
    grads: &mut NetGrads,
) -> Result<f64> {
    let own = net.head(trace.head())?;
    if label >= own.output {
        return Err(Error::Input(format!(
            "label {} out of range for task {} with {} classes",
            label,
            trace.head(),
            own.output
        )));
    }
    let head_in = trace.head_input();
    let (concat, offset) = joint_logits(net, head_in);
    let global = offset[&trace.head()] + label;
    let loss = cross_entropy(&Tensor::from_vec(concat.clone())?, global)?;

    let mut dy = softmax(&concat);
    dy[global] -= 1.0;

    let mut dx = vec![0.0; head_in.len()];
    for (task, head) in net.heads() {
        let hg = grads.heads.get_mut(task).ok_or(Error::MissingTask(*task))?;
        let slice = &dy[offset[task]..offset[task] + head.output];
        dense_backward(head, head_in, slice, hg, &mut dx);
    }

    backbone_backward(net, trace, dx, grads);
    Ok(loss)
}

/// Forward every head on one backbone output. Returns the logits
/// concatenated in ascending task order plus each task's starting offset.
fn joint_logits(net: &Network, head_in: &[f64]) -> (Vec<f64>, BTreeMap<TaskId, usize>) {
    let mut concat = Vec::new();
    let mut offset = BTreeMap::new();
    for (task, head) in net.heads() {
        offset.insert(*task, concat.len());
        concat.extend(super::dense_forward(head, head_in));
    }
    (concat, offset)
}

fn backbone_backward(net: &Network, trace: &ForwardTrace, dy_out: Vec<f64>, grads: &mut NetGrads) {
    let mut dy = dy_out;
    for li in (0..net.backbone().len()).rev() {
        let x = trace.input_of(li);
        let mut dx = vec![0.0; x.len()];
        match &net.backbone()[li] {
            LayerSpec::Dense(d) => {
                let g = grads.layers[li].as_mut().expect("dense grad buffer");
                dense_backward(d, x, &dy, g, &mut dx);
            }
            LayerSpec::Conv2d(c) => {
                let g = grads.layers[li].as_mut().expect("conv grad buffer");
                conv_backward(c, x, net.boundary_shape(li), net.boundary_shape(li + 1), &dy, g, &mut dx);
            }
            LayerSpec::MaxPool { .. } => {
                let winners = trace
                    .layer(li)
                    .winners
                    .as_ref()
                    .expect("maxpool trace winners");
                for (o, &w) in winners.iter().enumerate() {
                    dx[w] += dy[o];
                }
            }
            LayerSpec::Relu => {
                for i in 0..dx.len() {
                    if x[i] > 0.0 {
                        dx[i] = dy[i];
                    }
                }
            }
            LayerSpec::Flatten => dx.copy_from_slice(&dy),
        }
        dy = dx;
    }
}

fn dense_backward(d: &DenseLayer, x: &[f64], dy: &[f64], g: &mut GradBuffer, dx: &mut [f64]) {
    for o in 0..d.output {
        let gy = dy[o];
        g.b[o] += gy;
        let row = o * d.input;
        for i in 0..d.input {
            g.w[row + i] += gy * x[i];
            dx[i] += d.weights[row + i] * gy;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    c: &ConvLayer,
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    dy: &[f64],
    g: &mut GradBuffer,
    dx: &mut [f64],
) {
    let (ic, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    for oc in 0..c.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let gy = dy[(oc * oh + oy) * ow + ox];
                if gy == 0.0 {
                    continue;
                }
                g.b[oc] += gy;
                for ci in 0..ic {
                    for ky in 0..c.kernel {
                        let iy = oy * c.stride + ky;
                        let in_row = (ci * h + iy) * w + ox * c.stride;
                        let w_row = ((oc * ic + ci) * c.kernel + ky) * c.kernel;
                        for kx in 0..c.kernel {
                            g.w[w_row + kx] += gy * x[in_row + kx];
                            dx[in_row + kx] += gy * c.weights[w_row + kx];
                        }
                    }
                }
            }
        }
    }
}

/// One momentum-SGD update over a flat parameter slice. `mask[i] == true`
/// means entry i is trainable; masked-out entries (and their velocity) are
/// left untouched so frozen parameters stay bit-identical.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    mask: &[bool],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() || params.len() != mask.len() {
        return Err(Error::dim(format!(
            "sgd_step buffers disagree: params {}, grads {}, velocity {}, mask {}",
            params.len(),
            grads.len(),
            velocity.len(),
            mask.len()
        )));
    }
    for i in 0..params.len() {
        if mask[i] {
            velocity[i] = momentum * velocity[i] + grads[i];
            params[i] -= lr * velocity[i];
        }
    }
    Ok(())
}

/// Expanded per-parameter trainability masks for one layer: one flag per
/// weight and per bias entry, derived from per-unit freeze flags.
struct LayerMask {
    w: Vec<bool>,
    b: Vec<bool>,
}

fn layer_masks(net: &Network, freeze: &FreezeState) -> Result<Vec<Option<LayerMask>>> {
    freeze.check_matches(&net.freezable_widths())?;
    let mut masks: Vec<Option<LayerMask>> = Vec::with_capacity(net.backbone().len());
    let mut fi = 0usize;
    for spec in net.backbone() {
        let m = match spec {
            LayerSpec::Dense(d) => {
                let mut w = vec![false; d.weights.len()];
                let mut b = vec![false; d.output];
                for o in 0..d.output {
                    if freeze.is_free(fi, o) {
                        w[o * d.input..(o + 1) * d.input].fill(true);
                        b[o] = true;
                    }
                }
                fi += 1;
                Some(LayerMask { w, b })
            }
            LayerSpec::Conv2d(c) => {
                let per_ch = c.in_channels * c.kernel * c.kernel;
                let mut w = vec![false; c.weights.len()];
                let mut b = vec![false; c.out_channels];
                for oc in 0..c.out_channels {
                    if freeze.is_free(fi, oc) {
                        w[oc * per_ch..(oc + 1) * per_ch].fill(true);
                        b[oc] = true;
                    }
                }
                fi += 1;
                Some(LayerMask { w, b })
            }
            _ => None,
        };
        masks.push(m);
    }
    Ok(masks)
}

/// Which logits a sample's cross-entropy runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LossScope {
    /// The sample's own head only; other heads get no gradient.
    OwnHead,
    /// One softmax over every head's logits concatenated, so all heads share
    /// a scale and a raw-logit argmax across them is meaningful.
    AllHeads,
}

/// Train the given task's head plus all free backbone neurons.
pub fn train_task(
    net: &mut Network,
    task: TaskId,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    freeze: &FreezeState,
) -> Result<TrainStats> {
    let train: Vec<(TaskId, &Sample)> = data.train.iter().map(|s| (task, s)).collect();
    let val: Vec<(TaskId, &Sample)> = data.val.iter().map(|s| (task, s)).collect();
    let mut heads = BTreeSet::new();
    heads.insert(task);
    train_impl(net, &train, &val, &heads, cfg, freeze, task as u64, LossScope::OwnHead)
}

/// Train on a mixture of tasks at once (joint baseline). Every head is
/// trainable and each sample's loss is one cross-entropy over all heads
/// concatenated, so the heads are calibrated against each other and the
/// model behaves as a single classifier over every class seen so far.
pub fn train_joint(
    net: &mut Network,
    train: &[(TaskId, &Sample)],
    val: &[(TaskId, &Sample)],
    cfg: &TrainConfig,
    freeze: &FreezeState,
) -> Result<TrainStats> {
    let heads: BTreeSet<TaskId> = net.heads().keys().copied().collect();
    train_impl(net, train, val, &heads, cfg, freeze, u64::MAX, LossScope::AllHeads)
}

#[allow(clippy::too_many_arguments)]
fn train_impl(
    net: &mut Network,
    train: &[(TaskId, &Sample)],
    val: &[(TaskId, &Sample)],
    trainable_heads: &BTreeSet<TaskId>,
    cfg: &TrainConfig,
    freeze: &FreezeState,
    stream_salt: u64,
    scope: LossScope,
) -> Result<TrainStats> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("train_task on empty data".into()));
    }
    for (t, _) in train.iter().chain(val) {
        net.head(*t)?;
    }

    let masks = layer_masks(net, freeze)?;
    let mut grads = NetGrads::zeros_like(net);
    let mut velocity = NetGrads::zeros_like(net);

    let mut stats = TrainStats {
        final_lr: cfg.learning_rate,
        ..TrainStats::default()
    };
    let mut lr = cfg.learning_rate;
    let mut best_loss = f64::INFINITY;
    let mut plateau = 0usize;
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng::rng_from(
            cfg.seed,
            rng::tagged(rng::stream::EPOCH_SHUFFLE, &[stream_salt, epoch as u64]),
        );
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            for &idx in batch {
                let (task, sample) = train[idx];
                let (_, trace) = net.forward(&sample.input, task)?;
                loss_sum += match scope {
                    LossScope::OwnHead => backward_sample(net, &trace, sample.label, &mut grads)?,
                    LossScope::AllHeads => {
                        backward_sample_joint(net, &trace, sample.label, &mut grads)?
                    }
                };
            }
            grads.scale(1.0 / batch.len() as f64);
            apply_step(net, &grads, &mut velocity, lr, cfg.momentum, &masks, trainable_heads)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        stats.train_loss.push(train_loss);

        // Plateau bookkeeping monitors validation loss when a validation set
        // exists, the training loss otherwise.
        let monitored = if val.is_empty() {
            train_loss
        } else {
            let (vl, va) = eval_loss_acc(net, val, scope)?;
            stats.val_loss.push(vl);
            stats.val_accuracy.push(va);
            vl
        };
        stats.epochs_run = epoch + 1;

        if monitored < best_loss - 1e-10 {
            best_loss = monitored;
            plateau = 0;
            since_best = 0;
        } else {
            plateau += 1;
            since_best += 1;
        }
        if plateau >= cfg.lr_plateau_patience {
            lr *= cfg.lr_decay_factor;
            plateau = 0;
        }
        if let Some(p) = cfg.early_stop_patience {
            if since_best >= p {
                break;
            }
        }
    }
    stats.final_lr = lr;
    Ok(stats)
}

fn eval_loss_acc(net: &Network, samples: &[(TaskId, &Sample)], scope: LossScope) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0usize;
    for (task, s) in samples {
        let (logits, trace) = net.forward(&s.input, *task)?;
        match scope {
            LossScope::OwnHead => {
                loss += cross_entropy(&logits, s.label)?;
                if argmax(logits.values()) == s.label {
                    hits += 1;
                }
            }
            LossScope::AllHeads => {
                let (concat, offset) = joint_logits(net, trace.head_input());
                let global = offset[task] + s.label;
                loss += cross_entropy(&Tensor::from_vec(concat.clone())?, global)?;
                if argmax(&concat) == global {
                    hits += 1;
                }
            }
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, 100.0 * hits as f64 / n))
}

fn apply_step(
    net: &mut Network,
    grads: &NetGrads,
    velocity: &mut NetGrads,
    lr: f64,
    momentum: f64,
    masks: &[Option<LayerMask>],
    trainable_heads: &BTreeSet<TaskId>,
) -> Result<()> {
    for li in 0..masks.len() {
        let (Some(mask), Some(g)) = (&masks[li], &grads.layers[li]) else {
            continue;
        };
        let v = velocity.layers[li].as_mut().expect("velocity buffer");
        match &mut net.backbone_mut()[li] {
            LayerSpec::Dense(d) => {
                sgd_step(&mut d.weights, &g.w, &mut v.w, lr, momentum, &mask.w)?;
                sgd_step(&mut d.bias, &g.b, &mut v.b, lr, momentum, &mask.b)?;
            }
            LayerSpec::Conv2d(c) => {
                sgd_step(&mut c.weights, &g.w, &mut v.w, lr, momentum, &mask.w)?;
                sgd_step(&mut c.bias, &g.b, &mut v.b, lr, momentum, &mask.b)?;
            }
            _ => unreachable!("mask only exists for parameterized layers"),
        }
    }
    let tasks: Vec<TaskId> = net.heads().keys().copied().collect();
    for task in tasks {
        if !trainable_heads.contains(&task) {
            continue;
        }
        let g = &grads.heads[&task];
        let v = velocity.heads.get_mut(&task).expect("head velocity");
        let head = net.head_mut(task)?;
        let all = vec![true; head.weights.len()];
        sgd_step(&mut head.weights, &g.w, &mut v.w, lr, momentum, &all)?;
        let all_b = vec![true; head.bias.len()];
        sgd_step(&mut head.bias, &g.b, &mut v.b, lr, momentum, &all_b)?;
    }
    Ok(())
}
