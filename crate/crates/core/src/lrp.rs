//! Layerwise relevance propagation with the epsilon rule. Relevance starts at
//! one head logit and flows back through the traced forward pass; dense and
//! conv layers redistribute by contribution a_i * w_ij / z_j, pooling routes
//! to the traced winner, relu gates on activation sign, flatten is a no-op.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{argmax, ConvLayer, DenseLayer, ForwardTrace, LayerSpec, Network, Sample, TaskId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrpConfig {
    /// Stabilizer added to denominators, signed to match the pre-activation.
    pub epsilon: f64,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig { epsilon: 1e-6 }
    }
}

impl LrpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "lrp epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-unit relevance at every activation boundary of one sample.
/// `layers[0]` is the input, `layers[l + 1]` the output of backbone layer l,
/// and the last entry the head logits (only the start class nonzero).
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    layers: Vec<Vec<f64>>,
}

impl RelevanceMap {
    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn input_layer(&self) -> &[f64] {
        &self.layers[0]
    }

    /// Relevance at backbone layer `l`'s output boundary.
    pub fn output_of(&self, l: usize) -> &[f64] {
        &self.layers[l + 1]
    }

    pub fn head_layer(&self) -> &[f64] {
        self.layers.last().unwrap()
    }

    /// One scalar per freezable unit: dense output neurons keep their own
    /// relevance, conv channels sum the relevance of their spatial units.
    pub fn neuron_view(&self, net: &Network) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for (li, spec) in net.backbone().iter().enumerate() {
            match spec {
                LayerSpec::Dense(_) => out.push(self.layers[li + 1].clone()),
                LayerSpec::Conv2d(_) => {
                    let shape = net.boundary_shape(li + 1);
                    let (ch, plane) = (shape[0], shape[1] * shape[2]);
                    let vals = &self.layers[li + 1];
                    out.push(
                        (0..ch)
                            .map(|c| vals[c * plane..(c + 1) * plane].iter().sum())
                            .collect(),
                    );
                }
                _ => {}
            }
        }
        out
    }
}

/// Same shape as the map it came from; each layer is |r| scaled onto the
/// simplex (or all zero when the layer carried no relevance).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRelevanceMap {
    layers: Vec<Vec<f64>>,
}

impl NormalizedRelevanceMap {
    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }
}

/// |r| / sum(|r|) for one layer vector; all zeros stay all zeros.
pub fn normalize_layer(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| v.abs() / total).collect()
}

pub fn normalize_per_layer(rmap: &RelevanceMap) -> NormalizedRelevanceMap {
    NormalizedRelevanceMap {
        layers: rmap.layers.iter().map(|l| normalize_layer(l)).collect(),
    }
}

fn stabilized_share(z: f64, r: f64, epsilon: f64, layer: usize) -> Result<f64> {
    // sign(0) counts as positive so any epsilon > 0 keeps the denominator
    // away from zero.
    let denom = z + epsilon * if z < 0.0 { -1.0 } else { 1.0 };
    if denom == 0.0 {
        if r == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::SingularPropagation { layer });
    }
    Ok(r / denom)
}

fn dense_lrp(
    d: &DenseLayer,
    a_in: &[f64],
    z_out: &[f64],
    r_next: &[f64],
    epsilon: f64,
    layer: usize,
) -> Result<Vec<f64>> {
    let mut shares = Vec::with_capacity(d.output);
    for o in 0..d.output {
        shares.push(stabilized_share(z_out[o], r_next[o], epsilon, layer)?);
    }
    let mut r_prev = vec![0.0; d.input];
    for o in 0..d.output {
        let s = shares[o];
        if s == 0.0 {
            continue;
        }
        let row = o * d.input;
        for i in 0..d.input {
            r_prev[i] += d.weights[row + i] * s;
        }
    }
    for (r, a) in r_prev.iter_mut().zip(a_in) {
        *r *= a;
    }
    Ok(r_prev)
}

#[allow(clippy::too_many_arguments)]
fn conv_lrp(
    c: &ConvLayer,
    a_in: &[f64],
    z_out: &[f64],
    r_next: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    epsilon: f64,
    layer: usize,
) -> Result<Vec<f64>> {
    let (ic, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut r_prev = vec![0.0; a_in.len()];
    for oc in 0..c.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let ou = (oc * oh + oy) * ow + ox;
                let s = stabilized_share(z_out[ou], r_next[ou], epsilon, layer)?;
                if s == 0.0 {
                    continue;
                }
                for ci in 0..ic {
                    for ky in 0..c.kernel {
                        let iy = oy * c.stride + ky;
                        let in_row = (ci * h + iy) * w + ox * c.stride;
                        let w_row = ((oc * ic + ci) * c.kernel + ky) * c.kernel;
                        for kx in 0..c.kernel {
                            r_prev[in_row + kx] += a_in[in_row + kx] * c.weights[w_row + kx] * s;
                        }
                    }
                }
            }
        }
    }
    Ok(r_prev)
}

/// Propagate relevance from `class`'s logit of `head` back to the input.
/// The head layer index used in singularity errors is `backbone.len()`.
pub fn backpropagate_relevance(
    net: &Network,
    trace: &ForwardTrace,
    head: TaskId,
    class: usize,
    cfg: &LrpConfig,
) -> Result<RelevanceMap> {
    cfg.validate()?;
    if trace.head() != head {
        return Err(Error::Input(format!(
            "trace was recorded for head {}, relevance requested for head {}",
            trace.head(),
            head
        )));
    }
    let head_layer = net.head(head)?;
    if class >= head_layer.output {
        return Err(Error::Input(format!(
            "class {} out of range for head with {} classes",
            class, head_layer.output
        )));
    }
    if trace.layer_count() != net.backbone().len() {
        return Err(Error::dim(
            "trace layer count does not match network backbone",
        ));
    }

    let n_backbone = net.backbone().len();
    let mut layers: Vec<Vec<f64>> = vec![Vec::new(); n_backbone + 2];

    let mut head_r = vec![0.0; head_layer.output];
    head_r[class] = trace.logits()[class];
    layers[n_backbone + 1] = head_r.clone();

    // Through the head into the backbone output boundary.
    let mut r = dense_lrp(
        head_layer,
        trace.head_input(),
        trace.logits(),
        &head_r,
        cfg.epsilon,
        n_backbone,
    )?;
    layers[n_backbone] = r.clone();

    for li in (0..n_backbone).rev() {
        let a_in = trace.input_of(li);
        let z_out = trace.output_of(li);
        let r_prev = match &net.backbone()[li] {
            LayerSpec::Dense(d) => dense_lrp(d, a_in, z_out, &r, cfg.epsilon, li)?,
            LayerSpec::Conv2d(c) => conv_lrp(
                c,
                a_in,
                z_out,
                &r,
                net.boundary_shape(li),
                net.boundary_shape(li + 1),
                cfg.epsilon,
                li,
            )?,
            LayerSpec::MaxPool { .. } => {
                let winners = trace
                    .layer(li)
                    .winners
                    .as_ref()
                    .expect("maxpool trace winners");
                let mut r_prev = vec![0.0; a_in.len()];
                for (o, &wi) in winners.iter().enumerate() {
                    r_prev[wi] += r[o];
                }
                r_prev
            }
            LayerSpec::Relu => a_in
                .iter()
                .zip(&r)
                .map(|(a, rv)| if *a > 0.0 { *rv } else { 0.0 })
                .collect(),
            LayerSpec::Flatten => r.clone(),
        };
        layers[li] = r_prev.clone();
        r = r_prev;
    }

    for l in &layers {
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite relevance".into()));
        }
    }
    Ok(RelevanceMap { layers })
}

/// Dataset-level mean of |r| and of per-layer-normalized |r| at freezable
/// neuron granularity. Each sample's LRP starts from its predicted class.
#[derive(Debug, Clone)]
pub struct MeanRelevance {
    /// Mean |r| per freezable layer, per unit.
    pub mean_abs: Vec<Vec<f64>>,
    /// Mean of per-sample, per-layer normalized |r| (each sample's layer
    /// vector lies on the simplex, so the mean does too).
    pub mean_norm: Vec<Vec<f64>>,
    pub samples: usize,
}

pub fn mean_relevance(
    net: &Network,
    samples: &[Sample],
    head: TaskId,
    cfg: &LrpConfig,
) -> Result<MeanRelevance> {
    if samples.is_empty() {
        return Err(Error::Input("mean_relevance over empty dataset".into()));
    }
    let widths = net.freezable_widths();
    let mut mean_abs: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; w]).collect();
    let mut mean_norm = mean_abs.clone();

    for s in samples {
        let (logits, trace) = net.forward(&s.input, head)?;
        let class = argmax(logits.values());
        let rmap = backpropagate_relevance(net, &trace, head, class, cfg)?;
        let neuron = rmap.neuron_view(net);
        for (li, layer) in neuron.iter().enumerate() {
            let normed = normalize_layer(layer);
            for (u, (r, n)) in layer.iter().zip(&normed).enumerate() {
                mean_abs[li][u] += r.abs();
                mean_norm[li][u] += n;
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for layer in mean_abs.iter_mut().chain(mean_norm.iter_mut()) {
        for v in layer {
            *v *= inv;
        }
    }
    Ok(MeanRelevance {
        mean_abs,
        mean_norm,
        samples: samples.len(),
    })
}

/// Input-layer relevance reshaped to the input geometry.
pub fn input_heatmap(rmap: &RelevanceMap, input_shape: &[usize]) -> Result<Tensor> {
    let expected: usize = input_shape.iter().product();
    let input = rmap.input_layer();
    if input.len() != expected {
        return Err(Error::dim(format!(
            "input relevance has {} entries, shape {:?} wants {}",
            input.len(),
            input_shape,
            expected
        )));
    }
    Tensor::new(input_shape.to_vec(), input.to_vec())
}

/// Collapse a heatmap to a 2-D image: rank-3 inputs sum over channels,
/// rank-2 pass through, rank-1 becomes a single row.
fn heat_image(heat: &Tensor) -> (usize, usize, Vec<f64>) {
    match *heat.shape() {
        [c, h, w] => {
            let mut img = vec![0.0; h * w];
            for ci in 0..c {
                for (i, v) in heat.values()[ci * h * w..(ci + 1) * h * w].iter().enumerate() {
                    img[i] += v;
                }
            }
            (h, w, img)
        }
        [h, w] => (h, w, heat.values().to_vec()),
        _ => (1, heat.len(), heat.values().to_vec()),
    }
}

/// 8-bit binary PGM, min-max scaled; a constant image maps to all zeros.
pub fn write_heatmap_pgm(path: &Path, heat: &Tensor) -> Result<()> {
    let (h, w, img) = heat_image(heat);
    let min = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let bytes: Vec<u8> = img
        .iter()
        .map(|v| {
            if span == 0.0 {
                0u8
            } else {
                ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Raw relevance values, one CSV row per image row.
pub fn write_heatmap_csv(path: &Path, heat: &Tensor) -> Result<()> {
    let (h, w, img) = heat_image(heat);
    let mut out = String::new();
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| format!("{}", img[y * w + x])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
