//! Stochastic weak/strong augmentation and the additive token prompt.
//!
//! The prompt adds to each node feature a softmax-weighted mixture of learnable
//! tokens: `x_i + Σ_j α_ij t_j` with `α_i = softmax_j(x_iᵀ t_j)`.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gnn::{load_tensor_map, tensor_map, TensorRecord};
use crate::graphdata::Graph;

pub const DEFAULT_TOKENS: usize = 10;
pub const TOKEN_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    FeatureMask,
    EdgeDrop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub kind: AugmentKind,
    pub p_w: f64,
    pub p_s: f64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_w", self.p_w), ("p_s", self.p_s)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.p_w >= self.p_s && self.p_s > 0.0 {
            log::warn!(
                "weak augmentation p_w={} is not below strong p_s={}",
                self.p_w,
                self.p_s
            );
        }
        Ok(())
    }
}

/// Feature masking draws one Bernoulli(p) per feature column and zeroes the
/// selected columns on every node. Edge dropping removes each edge
/// independently with probability p. Labels are untouched.
pub fn augment<R: Rng + ?Sized>(g: &Graph, p: f64, kind: AugmentKind, rng: &mut R) -> Graph {
    match kind {
        AugmentKind::FeatureMask => {
            let masked: Vec<bool> = (0..g.feature_dim())
                .map(|_| rng.random::<f64>() < p)
                .collect();
            if !masked.iter().any(|m| *m) {
                return g.clone();
            }
            let x =
                g.x.iter()
                    .map(|row| {
                        row.iter()
                            .zip(&masked)
                            .map(|(v, m)| if *m { 0.0 } else { *v })
                            .collect()
                    })
                    .collect();
            Graph { x, ..g.clone() }
        }
        AugmentKind::EdgeDrop => {
            let edges = g
                .edges
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() >= p)
                .collect();
            Graph { edges, ..g.clone() }
        }
    }
}

/// A graph whose features are a differentiable function of prompt
/// parameters.
pub struct PromptedGraph<'a> {
    pub graph: Cow<'a, Graph>,
    pub x: Tensor,
}

impl PromptedGraph<'_> {
    /// Plain-valued copy of the prompted graph.
    pub fn materialize(&self) -> Graph {
        Graph {
            x: self.x.to_rows(),
            ..self.graph.clone().into_owned()
        }
    }
}

/// Any learnable map from an input graph to a prompted graph.
pub trait PromptFunction {
    fn apply<'a>(&self, g: &'a Graph) -> Result<PromptedGraph<'a>>;
    fn named_params(&self) -> Vec<(String, Tensor)>;
}

/// Learnable tokens t*_j ∈ R^d, one per row.
pub struct PromptParams {
    pub tokens: Tensor,
}

impl PromptParams {
    pub fn new(n_tokens: usize, dim: usize, init_std: f64, seed: u64) -> Result<Self> {
        if n_tokens == 0 {
            return Err(Error::Config(
                "at least one prompt token is required".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = if init_std > 0.0 {
            let normal = Normal::new(0.0, init_std).map_err(|e| Error::Config(e.to_string()))?;
            (0..n_tokens * dim)
                .map(|_| normal.sample(&mut rng))
                .collect()
        } else {
            vec![0.0; n_tokens * dim]
        };
        Ok(Self {
            tokens: Tensor::param(n_tokens, dim, data)?,
        })
    }

    pub fn zeros(n_tokens: usize, dim: usize) -> Result<Self> {
        Self::new(n_tokens, dim, 0.0, 0)
    }

    pub fn from_tokens(rows: &[Vec<f64>]) -> Result<Self> {
        let tokens = Tensor::from_rows(rows)?;
        if tokens.rows() == 0 {
            return Err(Error::Config(
                "at least one prompt token is required".into(),
            ));
        }
        tokens.set_requires_grad(true);
        Ok(Self { tokens })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn duplicate(&self) -> Self {
        let t = self.tokens.detach();
        t.set_requires_grad(true);
        Self { tokens: t }
    }

    /// Attention of each node over the tokens (n×n_t).
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.tokens.transpose())?.softmax_rows()
    }

    /// Prompted features for an explicit feature tensor.
    pub fn prompt_features(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "feature dim {} does not match token dim {}",
                x.cols(),
                self.dim()
            )));
        }
        let shift = self.attention(x)?.matmul(&self.tokens)?;
        x.add(&shift)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(
            path,
            serde_json::to_string(&tensor_map(&self.named_params()))?,
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let map: BTreeMap<String, TensorRecord> = serde_json::from_str(&fs::read_to_string(path)?)?;
        let rec = map
            .get("prompt.tokens")
            .ok_or_else(|| Error::Format("missing prompt.tokens".into()))?;
        let p = Self::zeros(rec.shape[0].max(1), rec.shape[1])?;
        load_tensor_map(&p.named_params(), &map)?;
        Ok(p)
    }
}

impl PromptFunction for PromptParams {
    fn apply<'a>(&self, g: &'a Graph) -> Result<PromptedGraph<'a>> {
        let x = self.prompt_features(&g.features())?;
        Ok(PromptedGraph {
            graph: Cow::Borrowed(g),
            x,
        })
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![("prompt.tokens".into(), self.tokens.clone())]
    }
}

/// Value-level prompt application.
pub fn prompt(g: &Graph, params: &PromptParams) -> Result<Graph> {
    Ok(params.apply(g)?.materialize())
}

/// Weak augmentation `G_w` and prompted strong augmentation `G_p`.
pub fn make_pair<R: Rng + ?Sized>(
    g: &Graph,
    cfg: &AugmentConfig,
    prompt_fn: &dyn PromptFunction,
    rng: &mut R,
) -> Result<(Graph, PromptedGraph<'static>)> {
    let weak = augment(g, cfg.p_w, cfg.kind, rng);
    let strong = augment(g, cfg.p_s, cfg.kind, rng);
    let prompted = prompt_fn.apply(&strong)?;
    let x = prompted.x;
    Ok((
        weak,
        PromptedGraph {
            graph: Cow::Owned(strong),
            x,
        },
    ))
}
