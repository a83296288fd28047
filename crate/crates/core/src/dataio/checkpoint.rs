//! Versioned binary checkpoint ("RRLP"): network parameters, freeze state,
//! feature selections, the fitted classifier chain, and input normalization.
//! All numbers little-endian; f64 round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::dataio::Normalization;
use crate::error::{Error, Result};
use crate::freezer::{FreezeState, NeuronId};
use crate::lrp::LrpConfig;
use crate::memory::FeatureSelection;
use crate::nncore::{ConvLayer, DenseLayer, LayerSpec, Network, TaskId};
use crate::taskinfer::{
    ChainStage, ClassifierChain, DecisionTree, ForestConfig, RandomForest, TreeNode,
};

pub const MAGIC: &[u8; 4] = b"RRLP";
pub const VERSION: u32 = 1;

/// Everything needed to resume evaluation/prediction after a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub freeze: FreezeState,
    pub selections: Vec<FeatureSelection>,
    pub chain: Option<ClassifierChain>,
    pub normalization: Option<Normalization>,
    pub lrp: LrpConfig,
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.out.write_all(&[v])?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn i64(&mut self, v: i64) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        for v in vs {
            self.f64(*v)?;
        }
        Ok(())
    }
    fn usize32(&mut self, v: usize) -> Result<()> {
        let v32 = u32::try_from(v).map_err(|_| Error::Format("count exceeds u32".into()))?;
        self.u32(v32)
    }
}

struct Reader<R: Read> {
    inp: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inp.read_exact(&mut buf).map_err(|e| {
            Error::Format(format!("checkpoint truncated: {e}"))
        })?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn usize32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

fn write_dense<W: Write>(w: &mut Writer<W>, d: &DenseLayer) -> Result<()> {
    w.usize32(d.input)?;
    w.usize32(d.output)?;
    w.f64s(&d.weights)?;
    w.f64s(&d.bias)
}

fn read_dense<R: Read>(r: &mut Reader<R>) -> Result<DenseLayer> {
    let input = r.usize32()?;
    let output = r.usize32()?;
    let weights = r.f64s(input * output)?;
    let bias = r.f64s(output)?;
    Ok(DenseLayer { input, output, weights, bias })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Writer { out: std::io::BufWriter::new(file) };
    w.out.write_all(MAGIC)?;
    w.u32(VERSION)?;

    // Network.
    let net = &ckpt.network;
    w.usize32(net.input_shape().len())?;
    for &d in net.input_shape() {
        w.usize32(d)?;
    }
    w.usize32(net.backbone().len())?;
    for layer in net.backbone() {
        match layer {
            LayerSpec::Dense(d) => {
                w.u8(0)?;
                write_dense(&mut w, d)?;
            }
            LayerSpec::Conv2d(c) => {
                w.u8(1)?;
                w.usize32(c.in_channels)?;
                w.usize32(c.out_channels)?;
                w.usize32(c.kernel)?;
                w.usize32(c.stride)?;
                w.f64s(&c.weights)?;
                w.f64s(&c.bias)?;
            }
            LayerSpec::MaxPool { size } => {
                w.u8(2)?;
                w.usize32(*size)?;
            }
            LayerSpec::Relu => w.u8(3)?,
            LayerSpec::Flatten => w.u8(4)?,
        }
    }
    w.usize32(net.heads().len())?;
    for (task, head) in net.heads() {
        w.u64(*task as u64)?;
        write_dense(&mut w, head)?;
    }
    w.u64(net.rng_seed())?;

    // Freeze state.
    w.usize32(ckpt.freeze.tags().len())?;
    for layer in ckpt.freeze.tags() {
        w.usize32(layer.len())?;
        for tag in layer {
            w.i64(tag.map_or(-1, |t| t as i64))?;
        }
    }
    w.usize32(ckpt.freeze.history().len())?;
    for (task, fraction) in ckpt.freeze.history() {
        w.u64(*task as u64)?;
        w.f64(*fraction)?;
    }

    // Feature selections.
    w.usize32(ckpt.selections.len())?;
    for sel in &ckpt.selections {
        w.u64(sel.task as u64)?;
        w.usize32(sel.neurons.len())?;
        for n in &sel.neurons {
            w.usize32(n.layer)?;
            w.usize32(n.unit)?;
        }
    }

    // Chain.
    match &ckpt.chain {
        None => w.u8(0)?,
        Some(chain) => {
            w.u8(1)?;
            w.usize32(chain.n_f)?;
            w.usize32(chain.stages.len())?;
            for stage in &chain.stages {
                w.u64(stage.task as u64)?;
                let f = &stage.forest;
                w.usize32(f.n_features)?;
                w.usize32(f.config.n_trees)?;
                w.usize32(f.config.max_depth)?;
                w.usize32(f.config.min_samples_leaf)?;
                w.u64(f.config.seed)?;
                w.usize32(f.trees.len())?;
                for tree in &f.trees {
                    w.usize32(tree.nodes.len())?;
                    for node in &tree.nodes {
                        match node {
                            TreeNode::Split { feature, threshold, left, right } => {
                                w.u8(0)?;
                                w.usize32(*feature)?;
                                w.f64(*threshold)?;
                                w.usize32(*left)?;
                                w.usize32(*right)?;
                            }
                            TreeNode::Leaf { probs } => {
                                w.u8(1)?;
                                w.f64(probs[0])?;
                                w.f64(probs[1])?;
                            }
                        }
                    }
                }
            }
        }
    }

    // Normalization.
    match &ckpt.normalization {
        None => w.u8(0)?,
        Some(n) => {
            w.u8(1)?;
            w.usize32(n.mean.len())?;
            w.f64s(&n.mean)?;
            w.f64s(&n.std)?;
        }
    }

    w.f64(ckpt.lrp.epsilon)?;
    w.out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader { inp: std::io::BufReader::new(file) };
    let magic: [u8; 4] = r.bytes()?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?} at offset 0, expected {MAGIC:?}"
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads {VERSION}"
        )));
    }

    let rank = r.usize32()?;
    let input_shape: Vec<usize> = (0..rank)
        .map(|_| r.usize32())
        .collect::<Result<_>>()?;
    let n_layers = r.usize32()?;
    let mut backbone = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = r.u8()?;
        backbone.push(match tag {
            0 => LayerSpec::Dense(read_dense(&mut r)?),
            1 => {
                let in_channels = r.usize32()?;
                let out_channels = r.usize32()?;
                let kernel = r.usize32()?;
                let stride = r.usize32()?;
                let weights = r.f64s(out_channels * in_channels * kernel * kernel)?;
                let bias = r.f64s(out_channels)?;
                LayerSpec::Conv2d(ConvLayer {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    weights,
                    bias,
                })
            }
            2 => LayerSpec::MaxPool { size: r.usize32()? },
            3 => LayerSpec::Relu,
            4 => LayerSpec::Flatten,
            other => return Err(Error::Format(format!("unknown layer tag {other}"))),
        });
    }
    let n_heads = r.usize32()?;
    let mut heads = BTreeMap::new();
    for _ in 0..n_heads {
        let task = r.u64()? as TaskId;
        heads.insert(task, read_dense(&mut r)?);
    }
    let rng_seed = r.u64()?;
    let network = Network::from_parts(input_shape, backbone, heads, rng_seed)?;

    let n_freeze_layers = r.usize32()?;
    let mut tags = Vec::with_capacity(n_freeze_layers);
    for _ in 0..n_freeze_layers {
        let width = r.usize32()?;
        let mut layer = Vec::with_capacity(width);
        for _ in 0..width {
            let v = r.i64()?;
            layer.push(if v < 0 { None } else { Some(v as TaskId) });
        }
        tags.push(layer);
    }
    let n_hist = r.usize32()?;
    let mut history = Vec::with_capacity(n_hist);
    for _ in 0..n_hist {
        let task = r.u64()? as TaskId;
        let fraction = r.f64()?;
        history.push((task, fraction));
    }
    let freeze = FreezeState::from_parts(tags, history);
    freeze.check_matches(&network.freezable_widths())?;

    let n_sel = r.usize32()?;
    let mut selections = Vec::with_capacity(n_sel);
    for _ in 0..n_sel {
        let task = r.u64()? as TaskId;
        let n = r.usize32()?;
        let mut neurons = Vec::with_capacity(n);
        for _ in 0..n {
            let layer = r.usize32()?;
            let unit = r.usize32()?;
            neurons.push(NeuronId { layer, unit });
        }
        selections.push(FeatureSelection { task, neurons });
    }

    let chain = match r.u8()? {
        0 => None,
        1 => {
            let n_f = r.usize32()?;
            let n_stages = r.usize32()?;
            let mut stages = Vec::with_capacity(n_stages);
            for _ in 0..n_stages {
                let task = r.u64()? as TaskId;
                let n_features = r.usize32()?;
                let config = ForestConfig {
                    n_trees: r.usize32()?,
                    max_depth: r.usize32()?,
                    min_samples_leaf: r.usize32()?,
                    seed: r.u64()?,
                };
                let n_trees = r.usize32()?;
                let mut trees = Vec::with_capacity(n_trees);
                for _ in 0..n_trees {
                    let n_nodes = r.usize32()?;
                    let mut nodes = Vec::with_capacity(n_nodes);
                    for _ in 0..n_nodes {
                        nodes.push(match r.u8()? {
                            0 => TreeNode::Split {
                                feature: r.usize32()?,
                                threshold: r.f64()?,
                                left: r.usize32()?,
                                right: r.usize32()?,
                            },
                            1 => TreeNode::Leaf {
                                probs: [r.f64()?, r.f64()?],
                            },
                            other => {
                                return Err(Error::Format(format!("unknown node tag {other}")))
                            }
                        });
                    }
                    trees.push(DecisionTree { nodes });
                }
                stages.push(ChainStage {
                    task,
                    forest: RandomForest { trees, n_features, config },
                });
            }
            Some(ClassifierChain { n_f, stages })
        }
        other => return Err(Error::Format(format!("unknown chain tag {other}"))),
    };

    let normalization = match r.u8()? {
        0 => None,
        1 => {
            let channels = r.usize32()?;
            let mean = r.f64s(channels)?;
            let std = r.f64s(channels)?;
            Some(Normalization { mean, std })
        }
        other => return Err(Error::Format(format!("unknown normalization tag {other}"))),
    };

    let epsilon = r.f64()?;
    Ok(Checkpoint {
        network,
        freeze,
        selections,
        chain,
        normalization,
        lrp: LrpConfig { epsilon },
    })
}
