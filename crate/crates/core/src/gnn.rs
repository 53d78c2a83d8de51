//! GCN and GAT encoders with mean-pool readout and a linear head.
//!
//! The model can be frozen as a whole: freezing clears `requires_grad` on every
//! encoder and head tensor, so gradients still flow *through* the model into
//! upstream inputs (the prompt) but never into its own weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, LOG_EPS};
use crate::error::{Error, Result};
use crate::graphdata::{Dataset, Graph};
use crate::trainer::{macro_f1, Adam};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LAYERS: usize = 2;
pub const GAT_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Gcn,
    Gat,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Arch::Gcn),
            "gat" => Ok(Arch::Gat),
            other => Err(Error::Usage(format!("unknown base GNN '{other}'"))),
        }
    }
}

/// Architecture descriptor stored alongside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch: Arch,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn new(arch: Arch, in_dim: usize, num_classes: usize) -> Self {
        Self {
            arch,
            in_dim,
            hidden_dim: DEFAULT_HIDDEN,
            num_layers: DEFAULT_LAYERS,
            num_classes,
        }
    }

    pub fn with_hidden(mut self, hidden_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self
    }

    pub fn with_layers(mut self, num_layers: usize) -> Self {
        self.num_layers = num_layers;
        self
    }
}

/// One message-passing layer. `attention` is the length-2·d_out column used
/// by GAT (source half on top, neighbor half below).
pub struct EncoderLayer {
    pub weight: Tensor,
    pub attention: Option<Tensor>,
}

/// Graph embedding z (1×d_h) after readout.
#[derive(Clone, Debug)]
pub struct GraphEmbedding(pub Tensor);

/// Symmetric-normalized adjacency with self-loops, D̃^{-1/2}(A+I)D̃^{-1/2}.
pub fn normalized_adjacency(g: &Graph) -> Tensor {
    let n = g.n;
    let mut a = vec![0.0; n * n];
    let mut deg = vec![1.0_f64; n];
    for &[u, v] in &g.edges {
        deg[u] += 1.0;
        deg[v] += 1.0;
    }
    for i in 0..n {
        a[i * n + i] = 1.0 / deg[i];
    }
    for &[u, v] in &g.edges {
        let w = 1.0 / (deg[u] * deg[v]).sqrt();
        a[u * n + v] = w;
        a[v * n + u] = w;
    }
    Tensor::new(n, n, a).expect("n×n")
}

/// Neighbors-plus-self mask, row-major n×n.
pub fn attention_mask(g: &Graph) -> Vec<bool> {
    let n = g.n;
    let mut m = vec![false; n * n];
    for i in 0..n {
        m[i * n + i] = true;
    }
    for &[u, v] in &g.edges {
        m[u * n + v] = true;
        m[v * n + u] = true;
    }
    m
}

pub fn gcn_layer(x: &Tensor, adj: &Tensor, weight: &Tensor, activate: bool) -> Result<Tensor> {
    let out = adj.matmul(&x.matmul(weight)?)?;
    Ok(if activate { out.relu() } else { out })
}

/// Single-head graph attention: e_uv = leaky_relu(a_srcᵀ W x_u + a_dstᵀ W x_v),
/// softmax over N(u) ∪ {u}, output Σ_v α_uv W x_v.
pub fn gat_layer(
    x: &Tensor,
    mask: &[bool],
    weight: &Tensor,
    attention: &Tensor,
    slope: f64,
    activate: bool,
) -> Result<Tensor> {
    let n = x.rows();
    let h = x.matmul(weight)?;
    let d_out = h.cols();
    if attention.shape() != (2 * d_out, 1) {
        return Err(Error::Dimension(format!(
            "attention vector {:?}, expected ({}, 1)",
            attention.shape(),
            2 * d_out
        )));
    }
    let s_src = h.matmul(&attention.slice_rows(0, d_out)?)?; // n×1
    let s_dst = h.matmul(&attention.slice_rows(d_out, 2 * d_out)?)?; // n×1
    let ones_row = Tensor::full(1, n, 1.0);
    let ones_col = Tensor::full(n, 1, 1.0);
    let scores = s_src
        .matmul(&ones_row)?
        .add(&ones_col.matmul(&s_dst.transpose())?)?;
    let alpha = scores.leaky_relu(slope).softmax_rows_masked(Some(mask))?;
    let out = alpha.matmul(&h)?;
    Ok(if activate { out.relu() } else { out })
}

pub fn readout_mean(node_embeds: &Tensor) -> Result<GraphEmbedding> {
    if node_embeds.rows() == 0 {
        return Err(Error::Contract("readout of an empty graph".into()));
    }
    Ok(GraphEmbedding(node_embeds.col_mean()?))
}

/// Structure-derived constants for one graph, reusable across forwards.
pub enum Propagation {
    Gcn(Tensor),
    Gat(Vec<bool>),
}

impl Propagation {
    pub fn new(arch: Arch, g: &Graph) -> Self {
        match arch {
            Arch::Gcn => Propagation::Gcn(normalized_adjacency(g)),
            Arch::Gat => Propagation::Gat(attention_mask(g)),
        }
    }
}

/// Encoder, readout and projection head.
pub struct GnnModel {
    pub spec: ArchSpec,
    pub layers: Vec<EncoderLayer>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect()
}

impl GnnModel {
    /// Glorot-uniform weights, zero bias.
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self> {
        if spec.num_layers == 0 || spec.hidden_dim == 0 || spec.num_classes == 0 {
            return Err(Error::Config(format!("invalid architecture {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.num_layers);
        let mut d_in = spec.in_dim;
        for _ in 0..spec.num_layers {
            let d_out = spec.hidden_dim;
            let weight = Tensor::param(d_in, d_out, glorot(&mut rng, d_in, d_out))?;
            let attention = match spec.arch {
                Arch::Gcn => None,
                Arch::Gat => Some(Tensor::param(2 * d_out, 1, glorot(&mut rng, 2 * d_out, 1))?),
            };
            layers.push(EncoderLayer { weight, attention });
            d_in = d_out;
        }
        let c = spec.num_classes;
        let head_weight = Tensor::param(c, spec.hidden_dim, glorot(&mut rng, c, spec.hidden_dim))?;
        let head_bias = Tensor::param(1, c, vec![0.0; c])?;
        Ok(Self {
            spec,
            layers,
            head_weight,
            head_bias,
        })
    }

    /// Independent copy (new tensors, same values and freeze flags).
    pub fn duplicate(&self) -> Self {
        let copy = |t: &Tensor| {
            let c = t.detach();
            c.set_requires_grad(t.requires_grad());
            c
        };
        Self {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    weight: copy(&l.weight),
                    attention: l.attention.as_ref().map(copy),
                })
                .collect(),
            head_weight: copy(&self.head_weight),
            head_bias: copy(&self.head_bias),
        }
    }

    pub fn encoder_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), l.weight.clone()));
            if let Some(a) = &l.attention {
                out.push((format!("encoder.{i}.attention"), a.clone()));
            }
        }
        out
    }

    pub fn head_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("head.weight".into(), self.head_weight.clone()),
            ("head.bias".into(), self.head_bias.clone()),
        ]
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut p = self.encoder_params();
        p.extend(self.head_params());
        p
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn set_frozen(&self, frozen: bool) {
        for t in self.params() {
            t.set_requires_grad(!frozen);
            t.zero_grad();
        }
    }

    pub fn freeze(&self) {
        self.set_frozen(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|t| !t.requires_grad())
    }

    /// Copy of every parameter value, in `named_params` order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(Tensor::to_vec).collect()
    }

    pub fn restore(&self, snap: &[Vec<f64>]) {
        for (t, v) in self.params().iter().zip(snap) {
            t.data_mut().copy_from_slice(v);
        }
    }

    fn check_features(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.spec.in_dim {
            return Err(Error::Dimension(format!(
                "input feature dim {} does not match model dim {}",
                x.cols(),
                self.spec.in_dim
            )));
        }
        if x.rows() == 0 {
            return Err(Error::Contract("cannot encode an empty graph".into()));
        }
        Ok(())
    }

    /// Encodes node features `x` over the structure captured in `prop`.
    pub fn encode_with(&self, prop: &Propagation, x: &Tensor) -> Result<GraphEmbedding> {
        self.check_features(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let activate = i != last;
            h = match (prop, &layer.attention) {
                (Propagation::Gcn(adj), None) => gcn_layer(&h, adj, &layer.weight, activate)?,
                (Propagation::Gat(mask), Some(a)) => {
                    gat_layer(&h, mask, &layer.weight, a, GAT_SLOPE, activate)?
                }
                _ => {
                    return Err(Error::Contract(
                        "propagation does not match architecture".into(),
                    ))
                }
            };
        }
        readout_mean(&h)
    }

    pub fn encode_features(&self, g: &Graph, x: &Tensor) -> Result<GraphEmbedding> {
        self.encode_with(&Propagation::new(self.spec.arch, g), x)
    }

    pub fn encode(&self, g: &Graph) -> Result<GraphEmbedding> {
        self.encode_features(g, &g.features())
    }

    /// Projection head on a batch of embeddings (B×d_h → B×C).
    pub fn head(&self, z: &Tensor) -> Result<Tensor> {
        z.matmul(&self.head_weight.transpose())?
            .add(&self.head_bias)
    }

    /// Pre-softmax logits (1×C).
    pub fn forward(&self, g: &Graph) -> Result<Tensor> {
        self.head(&self.encode(g)?.0)
    }

    /// Softmax scores for each graph.
    pub fn predict(&self, graphs: &[Graph]) -> Result<Vec<Vec<f64>>> {
        graphs
            .iter()
            .map(|g| Ok(self.forward(g)?.softmax_rows()?.to_vec()))
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.spec.clone(),
            tensors: tensor_map(&self.named_params()),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = GnnModel::new(ck.arch.clone(), 0)?;
        load_tensor_map(&model.named_params(), &ck.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ck)
    }
}

/// One serialized tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub tensors: BTreeMap<String, TensorRecord>,
}

pub fn tensor_map(named: &[(String, Tensor)]) -> BTreeMap<String, TensorRecord> {
    named
        .iter()
        .map(|(k, t)| {
            (
                k.clone(),
                TensorRecord {
                    shape: [t.rows(), t.cols()],
                    data: t.to_vec(),
                },
            )
        })
        .collect()
}

/// Copies stored values into existing tensors, checking names and shapes.
pub fn load_tensor_map(
    named: &[(String, Tensor)],
    map: &BTreeMap<String, TensorRecord>,
) -> Result<()> {
    if named.len() != map.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, expected {}",
            map.len(),
            named.len()
        )));
    }
    for (name, t) in named {
        let rec = map
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")))?;
        if rec.shape != [t.rows(), t.cols()] || rec.data.len() != t.len() {
            return Err(Error::Format(format!(
                "'{name}' has shape {:?}, expected {:?}",
                rec.shape,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&rec.data);
    }
    Ok(())
}

/// Mean cross-entropy of softmax(logits) against hard labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.shape();
    if labels.len() != b || b == 0 {
        return Err(Error::Dimension(format!(
            "{} labels for {b} rows",
            labels.len()
        )));
    }
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Contract(format!("label {y} outside {c} classes")));
        }
        onehot[i * c + y] = 1.0;
    }
    let logp = logits.softmax_rows()?.log_eps(LOG_EPS)?;
    Ok(logp
        .mul(&Tensor::new(b, c, onehot)?)?
        .sum()?
        .scale(-1.0 / b as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub best_epoch: usize,
    pub val_f1: f64,
    pub train_f1: f64,
}

/// Supervised training on labeled source graphs. The model ends up holding
/// the parameters of the epoch with the best validation macro-F1 (the last
/// epoch when `val` is empty).
pub fn pretrain(
    model: &GnnModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::Contract("empty pretraining set".into()));
    }
    let labels = train.labels()?;
    let val_labels = val.labels()?;
    model.set_frozen(false);
    let arch = model.spec.arch;
    let props: Vec<Propagation> = train
        .graphs
        .iter()
        .map(|g| Propagation::new(arch, g))
        .collect();
    let feats: Vec<Tensor> = train.graphs.iter().map(Graph::features).collect();
    let params = model.params();
    let mut opt = Adam::new(&params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let c = model.spec.num_classes;

    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;
    for epoch in 1..=cfg.epochs.max(1) {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let zs = batch
                .iter()
                .map(|&i| Ok(model.encode_with(&props[i], &feats[i])?.0))
                .collect::<Result<Vec<_>>>()?;
            let logits = model.head(&Tensor::concat_rows(&zs)?)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy(&logits, &y)?;
            if !loss.item().is_finite() {
                return Err(Error::Numeric(format!(
                    "pretraining loss diverged at epoch {epoch}"
                )));
            }
            opt.zero_grad();
            loss.backward()?;
            opt.step()?;
        }
        if !val.is_empty() {
            let (f1, _) = macro_f1(&model.predict(&val.graphs)?, &val_labels, c)?;
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, model.snapshot()));
            }
        }
    }
    let (val_f1, best_epoch) = match best {
        Some((f1, epoch, snap)) => {
            model.restore(&snap);
            (f1, epoch)
        }
        None => (f64::NAN, cfg.epochs.max(1)),
    };
    let (train_f1, _) = macro_f1(&model.predict(&train.graphs)?, &labels, c)?;
    Ok(PretrainOutcome {
        best_epoch,
        val_f1,
        train_f1,
    })
}
