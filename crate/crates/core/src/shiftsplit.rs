//! Structural graph properties and property-weighted source/target splitting.
//!
//! Samples with a higher property score are more likely to land in the source
//! half, which produces a covariate shift between the two halves.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::{Dataset, Graph};

/// Sampling-weight floor so that minimum-score items stay selectable.
pub const WEIGHT_FLOOR: f64 = 1e-3;
pub const GRAPH_RATIOS: (f64, f64, f64) = (0.6, 0.1, 0.3);
pub const NODE_RATIOS: (f64, f64, f64) = (0.3, 0.1, 0.6);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    EdgeHomophily,
    Pagerank,
    ClusteringCoeff,
    GraphDensity,
}

impl Property {
    pub fn as_str(self) -> &'static str {
        match self {
            Property::EdgeHomophily => "edge_homophily",
            Property::Pagerank => "pagerank",
            Property::ClusteringCoeff => "clustering_coeff",
            Property::GraphDensity => "graph_density",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Property {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge_homophily" => Ok(Property::EdgeHomophily),
            "pagerank" => Ok(Property::Pagerank),
            "clustering_coeff" => Ok(Property::ClusteringCoeff),
            "graph_density" => Ok(Property::GraphDensity),
            other => Err(Error::Usage(format!("unknown property '{other}'"))),
        }
    }
}

/// Fraction of edges whose endpoints share a node label. Edgeless graphs
/// score 0.5.
pub fn edge_homophily(g: &Graph) -> Result<f64> {
    let labels = g
        .node_y
        .as_ref()
        .ok_or_else(|| Error::Contract("edge homophily needs node labels".into()))?;
    if g.edges.is_empty() {
        return Ok(0.5);
    }
    let same = g
        .edges
        .iter()
        .filter(|&&[u, v]| labels[u] == labels[v])
        .count();
    Ok(same as f64 / g.edges.len() as f64)
}

/// PageRank with the usual defaults (damping 0.85, tol 1e-10, 1000 iterations).
pub fn pagerank(g: &Graph) -> Result<Vec<f64>> {
    pagerank_with(g, 0.85, 1e-10, 1000)
}

/// Power iteration over the undirected graph, each edge acting as two arcs.
/// Degree-0 nodes spread their mass uniformly.
pub fn pagerank_with(g: &Graph, damping: f64, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = g.n;
    if n == 0 {
        return Err(Error::Contract("pagerank of an empty graph".into()));
    }
    let adj = g.neighbors();
    let nf = n as f64;
    let mut rank = vec![1.0 / nf; n];
    for _ in 0..max_iter {
        let dangling: f64 = (0..n).filter(|&u| adj[u].is_empty()).map(|u| rank[u]).sum();
        let base = (1.0 - damping) / nf + damping * dangling / nf;
        let mut next = vec![base; n];
        for u in 0..n {
            if adj[u].is_empty() {
                continue;
            }
            let share = damping * rank[u] / adj[u].len() as f64;
            for &v in &adj[u] {
                next[v] += share;
            }
        }
        let delta: f64 = next.iter().zip(&rank).map(|(a, b)| (a - b).abs()).sum();
        rank = next;
        if delta < tol {
            let total: f64 = rank.iter().sum();
            rank.iter_mut().for_each(|r| *r /= total);
            return Ok(rank);
        }
    }
    Err(Error::Numeric(format!(
        "pagerank did not converge in {max_iter} iterations"
    )))
}

/// Local clustering coefficient; 0 for degree below 2.
pub fn clustering_coeff(g: &Graph, node: usize) -> Result<f64> {
    if node >= g.n {
        return Err(Error::Contract(format!(
            "node {node} outside graph of {} nodes",
            g.n
        )));
    }
    let adj = g.neighbors();
    Ok(local_clustering(&adj, node))
}

fn local_clustering(adj: &[Vec<usize>], node: usize) -> f64 {
    let nb = &adj[node];
    let deg = nb.len();
    if deg < 2 {
        return 0.0;
    }
    let mut links = 0usize;
    for (i, &a) in nb.iter().enumerate() {
        for &b in &nb[i + 1..] {
            if adj[a].binary_search(&b).is_ok() {
                links += 1;
            }
        }
    }
    2.0 * links as f64 / (deg * (deg - 1)) as f64
}

/// Mean local clustering coefficient over all nodes.
pub fn mean_clustering(g: &Graph) -> f64 {
    if g.n == 0 {
        return 0.0;
    }
    let adj = g.neighbors();
    (0..g.n).map(|v| local_clustering(&adj, v)).sum::<f64>() / g.n as f64
}

/// 2|E| / (n(n-1)); 0 for a single node.
pub fn graph_density(g: &Graph) -> f64 {
    if g.n < 2 {
        return 0.0;
    }
    2.0 * g.edges.len() as f64 / (g.n * (g.n - 1)) as f64
}

/// Per-graph property score for a graph-classification dataset.
pub fn graph_scores(ds: &Dataset, property: Property) -> Result<Vec<f64>> {
    ds.graphs
        .iter()
        .map(|g| match property {
            Property::EdgeHomophily => edge_homophily(g),
            Property::ClusteringCoeff => Ok(mean_clustering(g)),
            Property::GraphDensity => Ok(graph_density(g)),
            Property::Pagerank => Err(Error::Usage(
                "pagerank shift applies to node tasks only".into(),
            )),
        })
        .collect()
}

/// Per-node property score for a node task; `ego` holds the unified ego
/// subgraphs of `g` in node order. Ego subgraphs inherit their center's
/// PageRank and clustering coefficient.
pub fn node_scores(g: &Graph, ego: &Dataset, property: Property) -> Result<Vec<f64>> {
    if ego.len() != g.n {
        return Err(Error::Contract(
            "ego dataset does not match the graph".into(),
        ));
    }
    match property {
        Property::Pagerank => pagerank(g),
        Property::ClusteringCoeff => {
            let adj = g.neighbors();
            Ok((0..g.n).map(|v| local_clustering(&adj, v)).collect())
        }
        Property::EdgeHomophily => ego.graphs.iter().map(edge_homophily).collect(),
        Property::GraphDensity => Ok(ego.graphs.iter().map(graph_density).collect()),
    }
}

/// Draws ⌊N/2⌋ source items without replacement, each draw proportional to
/// the min-max normalized score plus [`WEIGHT_FLOOR`]. When every score is
/// equal the draw is uniform. Both returned lists are sorted.
pub fn weighted_half_split(scores: &[f64], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::Split(format!("need at least two samples, got {n}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Split("non-finite property score".into()));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = if max > min {
        scores
            .iter()
            .map(|s| (s - min) / (max - min) + WEIGHT_FLOOR)
            .collect()
    } else {
        vec![1.0; n]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = vec![false; n];
    let mut total: f64 = weights.iter().sum();
    for _ in 0..n / 2 {
        let r = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if taken[i] {
                continue;
            }
            acc += w;
            pick = Some(i);
            if r < acc {
                break;
            }
        }
        let i = pick.expect("at least one item remains");
        taken[i] = true;
        total -= weights[i];
        weights[i] = 0.0;
    }
    let source = (0..n).filter(|&i| taken[i]).collect();
    let target = (0..n).filter(|&i| !taken[i]).collect();
    Ok((source, target))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Val,
    Test,
}

/// Shuffles `ids` and cuts them into train/val/test blocks.
pub fn role_split(
    ids: &[usize],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<BTreeMap<usize, Role>> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(*r >= 0.0)) || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    if ids.len() < 3 {
        return Err(Error::Split(format!(
            "{} ids cannot cover three roles",
            ids.len()
        )));
    }
    let n = ids.len();
    let n_train = ((n as f64) * tr).round() as usize;
    let n_val = (((n as f64) * va).round() as usize).min(n - n_train);
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(shuffled
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let role = if i < n_train {
                Role::Train
            } else if i < n_train + n_val {
                Role::Val
            } else {
                Role::Test
            };
            (id, role)
        })
        .collect())
}

/// Source/target membership plus per-sample role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub property: Property,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub roles: BTreeMap<usize, Role>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl SplitManifest {
    /// Weighted half split followed by independent role splits of each half.
    pub fn build(
        scores: &[f64],
        property: Property,
        seed: u64,
        ratios: (f64, f64, f64),
    ) -> Result<Self> {
        let (source, target) = weighted_half_split(scores, seed)?;
        let mut roles = role_split(&source, ratios, seed.wrapping_add(0x5eed_0001))?;
        roles.extend(role_split(&target, ratios, seed.wrapping_add(0x5eed_0002))?);
        Ok(Self {
            seed,
            property,
            source,
            target,
            roles,
        })
    }

    /// Ids on one side with the given role, in ascending order.
    pub fn ids(&self, side: Side, role: Role) -> Vec<usize> {
        let pool = match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        };
        pool.iter()
            .copied()
            .filter(|id| self.roles.get(id) == Some(&role))
            .collect()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &id in self.source.iter().chain(&self.target) {
            if id >= n || seen[id] {
                return Err(Error::Split(format!(
                    "sample {id} missing from range or assigned twice"
                )));
            }
            seen[id] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Split("manifest does not cover every sample".into()));
        }
        if self.roles.len() != n {
            return Err(Error::Split("role map does not cover every sample".into()));
        }
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn mean_of(scores: &[f64], ids: &[usize]) -> f64 {
    if ids.is_empty() {
        return f64::NAN;
    }
    ids.iter().map(|&i| scores[i]).sum::<f64>() / ids.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphdata::fixtures::{complete, graph};
    use proptest::prelude::*;

    #[test]
    fn homophily_examples() {
        let k3 = graph(3, &complete(3), Some(&[1, 1, 1]));
        assert_eq!(edge_homophily(&k3).unwrap(), 1.0);
        let e = graph(2, &[[0, 1]], Some(&[0, 1]));
        assert_eq!(edge_homophily(&e).unwrap(), 0.0);
        let t = graph(3, &complete(3), Some(&[0, 0, 1]));
        assert!((edge_homophily(&t).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = graph(3, &[], Some(&[0, 1, 2]));
        assert_eq!(edge_homophily(&empty).unwrap(), 0.5);
        assert!(edge_homophily(&graph(2, &[[0, 1]], None)).is_err());
    }

    #[allow(clippy::needless_range_loop)]
    /// Dense power iteration on the explicit transition matrix.
    fn dense_pagerank(g: &Graph) -> Vec<f64> {
        let n = g.n;
        let adj = g.neighbors();
        let mut m = vec![vec![0.0; n]; n]; // m[v][u]: prob u -> v
        for u in 0..n {
            for v in 0..n {
                m[v][u] = if adj[u].is_empty() {
                    1.0 / n as f64
                } else if adj[u].contains(&v) {
                    1.0 / adj[u].len() as f64
                } else {
                    0.0
                };
            }
        }
        let mut r = vec![1.0 / n as f64; n];
        for _ in 0..5000 {
            r = (0..n)
                .map(|v| 0.15 / n as f64 + 0.85 * (0..n).map(|u| m[v][u] * r[u]).sum::<f64>())
                .collect();
        }
        r
    }

    #[test]
    fn pagerank_examples() {
        let c5 = graph(5, &[[0, 1], [1, 2], [2, 3], [3, 4], [4, 0]], None);
        for r in pagerank(&c5).unwrap() {
            assert!((r - 0.2).abs() < 1e-12);
        }
        let iso = graph(2, &[], None);
        let r = pagerank(&iso).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12);
        let star = graph(4, &[[0, 1], [0, 2], [0, 3]], None);
        let r = pagerank(&star).unwrap();
        assert!(r[0] > r[1]);
        let oracle = dense_pagerank(&star);
        for (a, b) in r.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn pagerank_nonconvergence() {
        let g = graph(4, &[[0, 1], [0, 2], [0, 3]], None);
        assert!(matches!(
            pagerank_with(&g, 0.85, 1e-300, 2),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn clustering_examples() {
        let k4 = graph(4, &complete(4), None);
        assert_eq!(clustering_coeff(&k4, 0).unwrap(), 1.0);
        let star = graph(4, &[[0, 1], [0, 2], [0, 3]], None);
        assert_eq!(clustering_coeff(&star, 0).unwrap(), 0.0);
        let g = graph(4, &[[0, 1], [0, 2], [0, 3], [1, 2]], None);
        assert!((clustering_coeff(&g, 0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn density_examples() {
        assert_eq!(graph_density(&graph(4, &complete(4), None)), 1.0);
        assert_eq!(graph_density(&graph(4, &[], None)), 0.0);
        assert!((graph_density(&graph(3, &[[0, 1], [1, 2]], None)) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(graph_density(&graph(1, &[], None)), 0.0);
    }

    #[test]
    fn half_split_examples() {
        let (s, t) = weighted_half_split(&[3.0; 11], 4).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(t.len(), 6);
        let (s, t) = weighted_half_split(&[0.1, 0.9], 1).unwrap();
        assert_eq!((s.len(), t.len()), (1, 1));
        assert!(weighted_half_split(&[1.0], 1).is_err());
        assert!(weighted_half_split(&[1.0, f64::NAN], 1).is_err());
    }

    #[test]
    fn half_split_weighting_direction() {
        let mut scores = vec![0.0; 1000];
        scores[0] = 1.0;
        let hits = (0..200u64)
            .filter(|&seed| weighted_half_split(&scores, seed).unwrap().0.contains(&0))
            .count();
        assert!(hits as f64 / 200.0 > 0.95, "{hits}");
    }

    #[test]
    fn role_split_examples() {
        let ids: Vec<usize> = (0..10).collect();
        let count = |m: &BTreeMap<usize, Role>, r| m.values().filter(|v| **v == r).count();
        let m = role_split(&ids, GRAPH_RATIOS, 3).unwrap();
        assert_eq!(
            (
                count(&m, Role::Train),
                count(&m, Role::Val),
                count(&m, Role::Test)
            ),
            (6, 1, 3)
        );
        let m = role_split(&ids, NODE_RATIOS, 3).unwrap();
        assert_eq!(
            (
                count(&m, Role::Train),
                count(&m, Role::Val),
                count(&m, Role::Test)
            ),
            (3, 1, 6)
        );
        assert_eq!(role_split(&ids, NODE_RATIOS, 3).unwrap(), m);
        assert!(role_split(&[1, 2], GRAPH_RATIOS, 0).is_err());
        assert!(role_split(&ids, (0.5, 0.5, 0.5), 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let scores: Vec<f64> = (0..40).map(|i| (i % 7) as f64).collect();
        let m = SplitManifest::build(&scores, Property::EdgeHomophily, 11, GRAPH_RATIOS).unwrap();
        m.validate(40).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save_json(&p).unwrap();
        assert_eq!(SplitManifest::load_json(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn manifest_partitions(scores in prop::collection::vec(0.0f64..1.0, 6..80), seed in any::<u64>()) {
            let m = SplitManifest::build(&scores, Property::GraphDensity, seed, GRAPH_RATIOS).unwrap();
            prop_assert!(m.validate(scores.len()).is_ok());
            prop_assert_eq!(m.source.len(), scores.len() / 2);
            for (side, ids) in [(Side::Source, &m.source), (Side::Target, &m.target)] {
                let n = ids.len() as f64;
                let tr = m.ids(side, Role::Train).len() as f64;
                let va = m.ids(side, Role::Val).len() as f64;
                prop_assert!((tr - 0.6 * n).abs() <= 1.0);
                prop_assert!((va - 0.1 * n).abs() <= 1.0);
            }
        }

        #[test]
        fn pagerank_is_distribution(edges in prop::collection::vec((0usize..12, 0usize..12), 0..30)) {
            let e: Vec<[usize; 2]> = edges.into_iter().filter(|(a, b)| a != b).map(|(a, b)| [a, b]).collect();
            let g = graph(12, &e, None);
            let r = pagerank(&g).unwrap();
            prop_assert!(r.iter().all(|v| *v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
