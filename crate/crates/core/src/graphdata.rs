//! Graphs, datasets, TU-format ingestion, ego-subgraph task unification and a
//! seeded synthetic generator with controllable edge homophily.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Default hop count when turning node classification into graph
/// classification.
pub const DEFAULT_EGO_HOPS: usize = 2;

/// An undirected attributed graph.
///
/// Edges are stored once as `[u, v]` with `u < v`, sorted and deduplicated.
/// Self-loops are never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph")]
pub struct Graph {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    pub x: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_y: Option<Vec<usize>>,
}

#[derive(Deserialize)]
struct RawGraph {
    n: usize,
    edges: Vec<[usize; 2]>,
    x: Vec<Vec<f64>>,
    #[serde(default)]
    y: Option<usize>,
    #[serde(default)]
    node_y: Option<Vec<usize>>,
}

impl TryFrom<RawGraph> for Graph {
    type Error = Error;
    fn try_from(r: RawGraph) -> Result<Self> {
        Graph::new(r.n, r.edges, r.x, r.y, r.node_y)
    }
}

impl Graph {
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = [usize; 2]>,
        x: Vec<Vec<f64>>,
        y: Option<usize>,
        node_y: Option<Vec<usize>>,
    ) -> Result<Self> {
        if x.len() != n {
            return Err(Error::Format(format!(
                "{} feature rows for {n} nodes",
                x.len()
            )));
        }
        if let Some(d) = x.first().map(Vec::len) {
            if x.iter().any(|r| r.len() != d) {
                return Err(Error::Format("ragged feature matrix".into()));
            }
        }
        if let Some(ny) = &node_y {
            if ny.len() != n {
                return Err(Error::Format(format!(
                    "{} node labels for {n} nodes",
                    ny.len()
                )));
            }
        }
        let mut set = BTreeSet::new();
        for [u, v] in edges {
            if u >= n || v >= n {
                return Err(Error::Format(format!("edge ({u},{v}) outside [0,{n})")));
            }
            if u == v {
                return Err(Error::Format(format!("self-loop on node {u}")));
            }
            set.insert([u.min(v), u.max(v)]);
        }
        Ok(Self {
            n,
            edges: set.into_iter().collect(),
            x,
            y,
            node_y,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &[u, v] in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj.iter_mut().for_each(|a| a.sort_unstable());
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &[u, v] in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Node features as an n×d constant tensor.
    pub fn features(&self) -> Tensor {
        let d = self.feature_dim();
        let data = self.x.iter().flatten().copied().collect();
        Tensor::new(self.n, d, data).expect("validated feature matrix")
    }

    /// Same structure and labels with a replaced feature matrix.
    pub fn with_features(&self, x: Vec<Vec<f64>>) -> Result<Graph> {
        if x.len() != self.n {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} nodes",
                x.len(),
                self.n
            )));
        }
        Ok(Graph { x, ..self.clone() })
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.n {
            return Err(Error::Dimension("permutation length".into()));
        }
        let mut x = vec![Vec::new(); self.n];
        let mut node_y = self.node_y.as_ref().map(|_| vec![0; self.n]);
        for (old, &new) in perm.iter().enumerate() {
            x[new] = self.x[old].clone();
            if let (Some(dst), Some(src)) = (node_y.as_mut(), self.node_y.as_ref()) {
                dst[new] = src[old];
            }
        }
        let edges = self.edges.iter().map(|&[u, v]| [perm[u], perm[v]]);
        Graph::new(self.n, edges, x, self.y, node_y)
    }
}

/// A labeled collection of graphs sharing one feature dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub graphs: Vec<Graph>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        feature_dim: usize,
        graphs: Vec<Graph>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            num_classes,
            feature_dim,
            graphs,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.graphs.iter().enumerate() {
            if g.n > 0 && g.feature_dim() != self.feature_dim {
                return Err(Error::Format(format!(
                    "graph {i} has feature dim {}, dataset declares {}",
                    g.feature_dim(),
                    self.feature_dim
                )));
            }
            if let Some(y) = g.y {
                if y >= self.num_classes {
                    return Err(Error::Format(format!(
                        "graph {i} label {y} >= {}",
                        self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Graph labels; errors if any graph is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.graphs
            .iter()
            .enumerate()
            .map(|(i, g)| {
                g.y.ok_or_else(|| Error::Contract(format!("graph {i} has no label")))
            })
            .collect()
    }

    /// A new dataset holding clones of the selected graphs, in order.
    pub fn subset(&self, ids: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            graphs: ids.iter().map(|&i| self.graphs[i].clone()).collect(),
        }
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Dataset> {
        let text = fs::read_to_string(path)?;
        let ds: Dataset = serde_json::from_str(&text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Mean node count, used for the `E[N_G]` prompt-size option.
    pub fn mean_nodes(&self) -> f64 {
        if self.graphs.is_empty() {
            return 0.0;
        }
        self.graphs.iter().map(|g| g.n as f64).sum::<f64>() / self.graphs.len() as f64
    }
}

// -------------------------------------------------------------------------
// TU format
// -------------------------------------------------------------------------

fn tu_prefix(dir: &Path) -> Result<String> {
    let ingest = |reason: String| Error::Ingestion {
        path: dir.to_path_buf(),
        reason,
    };
    let entries = fs::read_dir(dir).map_err(|e| ingest(e.to_string()))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix("_A.txt").map(str::to_owned))
        .collect();
    names.sort();
    names
        .into_iter()
        .next()
        .ok_or_else(|| ingest("no *_A.txt edge file".into()))
}

fn read_rows(path: &Path, required: bool) -> Result<Option<Vec<Vec<String>>>> {
    if !path.exists() {
        if required {
            return Err(Error::Ingestion {
                path: path.to_path_buf(),
                reason: "missing mandatory file".into(),
            });
        }
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let rows = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(str::to_owned)
                .collect()
        })
        .collect();
    Ok(Some(rows))
}

fn parse_tok<T: std::str::FromStr>(tok: &str, path: &Path, line: usize) -> Result<T> {
    tok.parse().map_err(|_| {
        Error::Format(format!(
            "{}:{}: cannot parse '{tok}'",
            path.display(),
            line + 1
        ))
    })
}

fn first_ints(rows: &[Vec<String>], path: &Path) -> Result<Vec<i64>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let tok = r
                .first()
                .ok_or_else(|| Error::Format(format!("{}:{}: empty row", path.display(), i + 1)))?;
            parse_tok(tok, path, i)
        })
        .collect()
}

/// Loads a TUDataset-style directory (`DS_A.txt`, `DS_graph_indicator.txt`,
/// `DS_graph_labels.txt`, optional `DS_node_labels.txt` and
/// `DS_node_attributes.txt`).
pub fn load_tu_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = tu_prefix(dir)?;
    let file = |suffix: &str| -> PathBuf { dir.join(format!("{prefix}_{suffix}.txt")) };

    let a_path = file("A");
    let gi_path = file("graph_indicator");
    let gl_path = file("graph_labels");
    let nl_path = file("node_labels");
    let na_path = file("node_attributes");

    let a_rows = read_rows(&a_path, true)?.unwrap_or_default();
    let gi_rows = read_rows(&gi_path, true)?.unwrap_or_default();
    let gl_rows = read_rows(&gl_path, true)?.unwrap_or_default();

    let indicator = first_ints(&gi_rows, &gi_path)?;
    let num_nodes = indicator.len();

    let graph_ids: BTreeSet<i64> = indicator.iter().copied().collect();
    let graph_index: BTreeMap<i64, usize> =
        graph_ids.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let num_graphs = graph_ids.len();

    let raw_labels = first_ints(&gl_rows, &gl_path)?;
    if raw_labels.len() != num_graphs {
        return Err(Error::Format(format!(
            "{} graph labels for {num_graphs} graphs",
            raw_labels.len()
        )));
    }
    let label_values: BTreeSet<i64> = raw_labels.iter().copied().collect();
    let label_map: BTreeMap<i64, usize> = label_values
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();

    // global node -> (graph, local id)
    let mut owner = Vec::with_capacity(num_nodes);
    let mut counts = vec![0usize; num_graphs];
    for &g in &indicator {
        let gi = graph_index[&g];
        owner.push((gi, counts[gi]));
        counts[gi] += 1;
    }

    let node_labels = match read_rows(&nl_path, false)? {
        Some(rows) => {
            let v = first_ints(&rows, &nl_path)?;
            if v.len() != num_nodes {
                return Err(Error::Format(format!(
                    "{} node labels for {num_nodes} nodes",
                    v.len()
                )));
            }
            Some(v)
        }
        None => None,
    };
    let attributes = match read_rows(&na_path, false)? {
        Some(rows) => {
            if rows.len() != num_nodes {
                return Err(Error::Format(format!(
                    "{} attribute rows for {num_nodes} nodes",
                    rows.len()
                )));
            }
            let parsed = rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    r.iter()
                        .map(|t| parse_tok::<f64>(t, &na_path, i))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Some(parsed)
        }
        None => None,
    };

    let nl_map: Option<BTreeMap<i64, usize>> = node_labels.as_ref().map(|v| {
        let set: BTreeSet<i64> = v.iter().copied().collect();
        set.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
    });

    let mut feats: Vec<Vec<Vec<f64>>> = counts.iter().map(|&c| Vec::with_capacity(c)).collect();
    for node in 0..num_nodes {
        let mut row = Vec::new();
        if let Some(attr) = &attributes {
            row.extend_from_slice(&attr[node]);
        }
        if let (Some(labels), Some(map)) = (&node_labels, &nl_map) {
            let mut onehot = vec![0.0; map.len()];
            onehot[map[&labels[node]]] = 1.0;
            row.extend(onehot);
        }
        if row.is_empty() {
            row.push(1.0);
        }
        feats[owner[node].0].push(row);
    }
    let feature_dim = feats.iter().flatten().next().map_or(1, Vec::len);

    let mut edges: Vec<Vec<[usize; 2]>> = vec![Vec::new(); num_graphs];
    for (line, r) in a_rows.iter().enumerate() {
        if r.len() < 2 {
            return Err(Error::Format(format!(
                "{}:{}: expected two node ids",
                a_path.display(),
                line + 1
            )));
        }
        let u: usize = parse_tok(&r[0], &a_path, line)?;
        let v: usize = parse_tok(&r[1], &a_path, line)?;
        if u == 0 || v == 0 || u > num_nodes || v > num_nodes {
            return Err(Error::Format(format!(
                "{}:{}: edge ({u},{v}) references absent node",
                a_path.display(),
                line + 1
            )));
        }
        let (gu, lu) = owner[u - 1];
        let (gv, lv) = owner[v - 1];
        if gu != gv {
            return Err(Error::Format(format!(
                "{}:{}: edge crosses graphs",
                a_path.display(),
                line + 1
            )));
        }
        if lu != lv {
            edges[gu].push([lu, lv]);
        }
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for (gi, (x, e)) in feats.into_iter().zip(edges).enumerate() {
        let y = Some(label_map[&raw_labels[gi]]);
        graphs.push(Graph::new(counts[gi], e, x, y, None)?);
    }
    Dataset::new(prefix, label_values.len(), feature_dim, graphs)
}

/// Writes a dataset in TU layout (used to build fixtures). Node features are
/// written as attributes; graph labels as-is.
pub fn write_tu_dataset(ds: &Dataset, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut a = String::new();
    let mut gi = String::new();
    let mut gl = String::new();
    let mut na = String::new();
    let mut offset = 0;
    for (i, g) in ds.graphs.iter().enumerate() {
        for &[u, v] in &g.edges {
            a.push_str(&format!(
                "{}, {}\n{}, {}\n",
                u + offset + 1,
                v + offset + 1,
                v + offset + 1,
                u + offset + 1
            ));
        }
        for row in &g.x {
            gi.push_str(&format!("{}\n", i + 1));
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            na.push_str(&cells.join(", "));
            na.push('\n');
        }
        gl.push_str(&format!("{}\n", g.y.unwrap_or(0)));
        offset += g.n;
    }
    fs::write(dir.join(format!("{prefix}_A.txt")), a)?;
    fs::write(dir.join(format!("{prefix}_graph_indicator.txt")), gi)?;
    fs::write(dir.join(format!("{prefix}_graph_labels.txt")), gl)?;
    fs::write(dir.join(format!("{prefix}_node_attributes.txt")), na)?;
    Ok(())
}

// -------------------------------------------------------------------------
// Task unification
// -------------------------------------------------------------------------

/// Induced subgraph on every node within `k` hops of `center`, in BFS
/// discovery order (center first). The subgraph label is the center's node
/// label.
pub fn ego_subgraph(g: &Graph, center: usize, k: usize) -> Result<Graph> {
    if center >= g.n {
        return Err(Error::Contract(format!(
            "center {center} outside graph of {} nodes",
            g.n
        )));
    }
    if k == 0 {
        return Err(Error::Contract("hop count must be at least 1".into()));
    }
    let adj = g.neighbors();
    ego_from_adj(g, &adj, center, k)
}

fn ego_from_adj(g: &Graph, adj: &[Vec<usize>], center: usize, k: usize) -> Result<Graph> {
    let mut local = vec![usize::MAX; g.n];
    let mut order = vec![center];
    local[center] = 0;
    let mut queue = VecDeque::from([(center, 0usize)]);
    while let Some((u, depth)) = queue.pop_front() {
        if depth == k {
            continue;
        }
        for &v in &adj[u] {
            if local[v] == usize::MAX {
                local[v] = order.len();
                order.push(v);
                queue.push_back((v, depth + 1));
            }
        }
    }
    let mut edges = Vec::new();
    for &u in &order {
        for &v in &adj[u] {
            if u < v && local[v] != usize::MAX {
                edges.push([local[u], local[v]]);
            }
        }
    }
    let x = order.iter().map(|&u| g.x[u].clone()).collect();
    let node_y: Option<Vec<usize>> = g
        .node_y
        .as_ref()
        .map(|ny| order.iter().map(|&u| ny[u]).collect());
    let y = g.node_y.as_ref().map(|ny| ny[center]);
    Graph::new(order.len(), edges, x, y, node_y)
}

/// One labeled ego subgraph per node of `g`.
pub fn unify_node_task(g: &Graph, k: usize) -> Result<Dataset> {
    let Some(node_y) = &g.node_y else {
        return Err(Error::Contract(
            "node task unification needs node labels".into(),
        ));
    };
    if k == 0 {
        return Err(Error::Contract("hop count must be at least 1".into()));
    }
    let distinct: BTreeSet<usize> = node_y.iter().copied().collect();
    let remap: BTreeMap<usize, usize> = distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let relabeled = Graph {
        node_y: Some(node_y.iter().map(|l| remap[l]).collect()),
        ..g.clone()
    };
    let adj = relabeled.neighbors();
    let graphs = (0..g.n)
        .map(|c| ego_from_adj(&relabeled, &adj, c, k))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new("ego", distinct.len(), g.feature_dim(), graphs)
}

// -------------------------------------------------------------------------
// Class statistics
// -------------------------------------------------------------------------

/// Class frequencies with imbalance ratio and normalized entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub counts: Vec<usize>,
    pub imbalance_ratio: f64,
    pub normalized_entropy: f64,
}

impl ClassStats {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::Stats("need at least two classes".into()));
        }
        if let Some(c) = counts.iter().position(|&f| f == 0) {
            return Err(Error::Stats(format!("class {c} has no samples")));
        }
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        let total: usize = counts.iter().sum();
        let h: f64 = counts
            .iter()
            .map(|&f| {
                let p = f as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        Ok(Self {
            imbalance_ratio: max / min,
            normalized_entropy: h / (counts.len() as f64).ln(),
            counts,
        })
    }
}

pub fn class_stats(ds: &Dataset) -> Result<ClassStats> {
    let mut counts = vec![0usize; ds.num_classes];
    for y in ds.labels()? {
        counts[y] += 1;
    }
    ClassStats::from_counts(counts)
}

// -------------------------------------------------------------------------
// Synthetic data
// -------------------------------------------------------------------------

/// Parameters of the synthetic shifted-homophily generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_graphs: usize,
    pub nodes_per_graph: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub homophily: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_graphs: 200,
            nodes_per_graph: 12,
            num_classes: 3,
            feature_dim: 8,
            homophily: (0.2, 1.0),
            seed: 0,
        }
    }
}

const SYNTH_MAJORITY: f64 = 0.6;
const SYNTH_NOISE: f64 = 0.3;
const SYNTH_MEAN_SCALE: f64 = 0.5;
const SYNTH_TARGET_DEGREE: f64 = 4.0;

/// Graph-classification dataset whose graphs carry per-graph edge homophily
/// drawn from `homophily`.
///
/// Each graph gets a class `y`; a majority block of nodes carries label `y`
/// and the remainder other labels. Edges are proposed uniformly at random and
/// accepted with probability `h` (same label) or `1 - h` (different labels)
/// until the mean degree reaches about 4. Features are one-hot node labels
/// plus a class mean vector plus Gaussian noise.
pub fn synth_shift_dataset(spec: &SynthSpec) -> Result<Dataset> {
    let (lo, hi) = spec.homophily;
    if !(hi > lo) || lo < 0.0 || hi > 1.0 {
        return Err(Error::Config(format!(
            "homophily range ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1"
        )));
    }
    if spec.num_classes < 2 {
        return Err(Error::Config(
            "synthetic data needs at least two classes".into(),
        ));
    }
    if spec.feature_dim < spec.num_classes {
        return Err(Error::Config("feature_dim must be >= num_classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.num_classes;
    let d = spec.feature_dim;
    let mean_dist = Normal::new(0.0, SYNTH_MEAN_SCALE).expect("valid normal");
    let noise = Normal::new(0.0, SYNTH_NOISE).expect("valid normal");
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| mean_dist.sample(&mut rng)).collect())
        .collect();

    let n = spec.nodes_per_graph;
    let mut graphs = Vec::with_capacity(spec.n_graphs);
    for _ in 0..spec.n_graphs {
        let y = rng.random_range(0..c);
        let h = rng.random_range(lo..hi);
        let majority = ((n as f64) * SYNTH_MAJORITY).ceil() as usize;
        let mut labels: Vec<usize> = (0..n)
            .map(|i| {
                if i < majority {
                    y
                } else {
                    let other = rng.random_range(0..c - 1);
                    if other >= y {
                        other + 1
                    } else {
                        other
                    }
                }
            })
            .collect();
        labels.shuffle(&mut rng);
        let edges = wire_edges(&labels, h, &mut rng);
        let x = labels
            .iter()
            .map(|&l| {
                (0..d)
                    .map(|j| f64::from(u8::from(j == l)) + means[y][j] + noise.sample(&mut rng))
                    .collect()
            })
            .collect();
        graphs.push(Graph::new(n, edges, x, Some(y), Some(labels))?);
    }
    Dataset::new("synth", c, d, graphs)
}

fn wire_edges(labels: &[usize], h: f64, rng: &mut ChaCha8Rng) -> Vec<[usize; 2]> {
    let n = labels.len();
    if n < 2 {
        return Vec::new();
    }
    let max_edges = n * (n - 1) / 2;
    let target = ((SYNTH_TARGET_DEGREE * n as f64 / 2.0).round() as usize).min(max_edges);
    let mut present = BTreeSet::new();
    let mut attempts = 0;
    while present.len() < target && attempts < 200 * target.max(1) {
        attempts += 1;
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v {
            continue;
        }
        let key = [u.min(v), u.max(v)];
        if present.contains(&key) {
            continue;
        }
        let p = if labels[u] == labels[v] { h } else { 1.0 - h };
        if rng.random::<f64>() < p {
            present.insert(key);
        }
    }
    present.into_iter().collect()
}

/// A single node-labeled graph with heavy-tailed degrees (preferential
/// attachment) and label-homophilous wiring, for node-task experiments.
pub fn synth_node_graph(
    n: usize,
    num_classes: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Graph> {
    if num_classes < 2 || feature_dim < num_classes {
        return Err(Error::Config(
            "need >= 2 classes and feature_dim >= num_classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
    let mut edges = BTreeSet::new();
    let mut endpoints: Vec<usize> = Vec::new();
    for v in 1..n {
        let links = 2.min(v);
        let mut added = 0;
        let mut tries = 0;
        while added < links && tries < 50 {
            tries += 1;
            let u = if endpoints.is_empty() || rng.random::<f64>() < 0.2 {
                rng.random_range(0..v)
            } else {
                endpoints[rng.random_range(0..endpoints.len())]
            };
            if u == v || edges.contains(&[u.min(v), u.max(v)]) {
                continue;
            }
            let accept = if labels[u] == labels[v] { 0.9 } else { 0.3 };
            if rng.random::<f64>() < accept {
                edges.insert([u.min(v), u.max(v)]);
                endpoints.push(u);
                endpoints.push(v);
                added += 1;
            }
        }
    }
    let noise = Normal::new(0.0, SYNTH_NOISE).expect("valid normal");
    let x = labels
        .iter()
        .map(|&l| {
            (0..feature_dim)
                .map(|j| f64::from(u8::from(j == l)) + noise.sample(&mut rng))
                .collect()
        })
        .collect();
    Graph::new(n, edges, x, None, Some(labels))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn graph(n: usize, edges: &[[usize; 2]], labels: Option<&[usize]>) -> Graph {
        let x = (0..n).map(|i| vec![1.0, i as f64]).collect();
        Graph::new(
            n,
            edges.iter().copied(),
            x,
            None,
            labels.map(<[usize]>::to_vec),
        )
        .unwrap()
    }

    pub fn complete(n: usize) -> Vec<[usize; 2]> {
        let mut e = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                e.push([u, v]);
            }
        }
        e
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn graph_rejects_bad_edges() {
        let x = vec![vec![1.0]; 2];
        assert!(Graph::new(2, [[0, 2]], x.clone(), None, None).is_err());
        assert!(Graph::new(2, [[1, 1]], x.clone(), None, None).is_err());
        let g = Graph::new(2, [[1, 0], [0, 1]], x, None, None).unwrap();
        assert_eq!(g.edges, vec![[0, 1]]);
    }

    #[test]
    fn ego_isolated_node() {
        let g = graph(3, &[[1, 2]], Some(&[4, 5, 6]));
        let s = ego_subgraph(&g, 0, 2).unwrap();
        assert_eq!(s.n, 1);
        assert!(s.edges.is_empty());
        assert_eq!(s.y, Some(4));
    }

    #[test]
    fn ego_path_two_hops() {
        let g = graph(4, &[[0, 1], [1, 2], [2, 3]], Some(&[0, 1, 0, 1]));
        let s = ego_subgraph(&g, 0, 2).unwrap();
        assert_eq!(s.n, 3);
        assert_eq!(s.edges, vec![[0, 1], [1, 2]]);
        assert_eq!(s.x, vec![g.x[0].clone(), g.x[1].clone(), g.x[2].clone()]);
    }

    #[test]
    fn ego_complete_graph_is_whole() {
        let g = graph(5, &complete(5), Some(&[0; 5]));
        for c in 0..5 {
            let s = ego_subgraph(&g, c, 1).unwrap();
            assert_eq!(s.n, 5);
            assert_eq!(s.num_edges(), 10);
        }
    }

    #[test]
    fn ego_rejects_zero_hops_and_bad_center() {
        let g = graph(2, &[[0, 1]], None);
        assert!(ego_subgraph(&g, 0, 0).is_err());
        assert!(ego_subgraph(&g, 5, 1).is_err());
    }

    #[test]
    fn unify_triangle() {
        let g = graph(3, &complete(3), Some(&[0, 1, 0]));
        let ds = unify_node_task(&g, 1).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.labels().unwrap(), vec![0, 1, 0]);
        assert!(ds.graphs.iter().all(|s| s.n == 3 && s.num_edges() == 3));
    }

    #[test]
    fn unify_star_leaf() {
        let g = graph(5, &[[0, 1], [0, 2], [0, 3], [0, 4]], Some(&[0, 1, 1, 1, 1]));
        let ds = unify_node_task(&g, 1).unwrap();
        assert_eq!(ds.graphs[2].n, 2);
        assert_eq!(ds.graphs[0].n, 5);
    }

    #[test]
    fn unify_requires_node_labels() {
        let g = graph(2, &[[0, 1]], None);
        assert!(matches!(unify_node_task(&g, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn class_stats_examples() {
        let s = ClassStats::from_counts(vec![5, 5]).unwrap();
        assert_eq!(s.imbalance_ratio, 1.0);
        assert!((s.normalized_entropy - 1.0).abs() < 1e-12);
        let s = ClassStats::from_counts(vec![3, 1]).unwrap();
        assert_eq!(s.imbalance_ratio, 3.0);
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((s.normalized_entropy - h / 2f64.ln()).abs() < 1e-12);
        assert!((s.normalized_entropy - 0.8113).abs() < 1e-4);
        assert!(matches!(
            ClassStats::from_counts(vec![3, 0]),
            Err(Error::Stats(_))
        ));
    }

    #[test]
    fn synth_validates_config() {
        let bad = SynthSpec {
            homophily: (0.5, 0.5),
            ..SynthSpec::default()
        };
        assert!(matches!(synth_shift_dataset(&bad), Err(Error::Config(_))));
        let bad = SynthSpec {
            num_classes: 1,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_shift_dataset(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn synth_empty_and_deterministic() {
        let empty = synth_shift_dataset(&SynthSpec {
            n_graphs: 0,
            ..SynthSpec::default()
        })
        .unwrap();
        assert!(empty.is_empty());
        let spec = SynthSpec {
            n_graphs: 20,
            seed: 9,
            ..SynthSpec::default()
        };
        let a = serde_json::to_string(&synth_shift_dataset(&spec).unwrap()).unwrap();
        let b = serde_json::to_string(&synth_shift_dataset(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip() {
        let spec = SynthSpec {
            n_graphs: 5,
            ..SynthSpec::default()
        };
        let ds = synth_shift_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        ds.save_json(&p).unwrap();
        assert_eq!(Dataset::load_json(&p).unwrap(), ds);
    }

    #[test]
    fn json_rejects_invalid_graph() {
        let text = r#"{"name":"x","num_classes":2,"feature_dim":1,"graphs":[{"n":1,"edges":[[0,3]],"x":[[1.0]]}]}"#;
        assert!(serde_json::from_str::<Dataset>(text).is_err());
    }

    #[test]
    fn permutation_preserves_structure() {
        let g = graph(3, &[[0, 1], [1, 2]], Some(&[0, 1, 2]));
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(
            p.edges,
            vec![[0, 2], [0, 1]]
                .into_iter()
                .map(|[a, b]| [a.min(b), a.max(b)])
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect::<Vec<_>>()
        );
        assert_eq!(p.node_y, Some(vec![1, 2, 0]));
    }
}
