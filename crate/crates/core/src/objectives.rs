//! Prompt-training objectives: thresholded pseudo-label consistency,
//! batch diversity, the domain discriminator and its adversarial term, and
//! the few-shot variant of the consistency loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, LOG_EPS};
use crate::error::{Error, Result};

/// Two-layer perceptron d_h → d_h → 1 with a raw scalar output.
pub struct Discriminator {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Discriminator {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |r: usize, c: usize| -> Vec<f64> {
            let lim = (6.0 / (r + c) as f64).sqrt();
            (0..r * c).map(|_| rng.random_range(-lim..lim)).collect()
        };
        Ok(Self {
            w1: Tensor::param(dim, dim, glorot(dim, dim))?,
            b1: Tensor::param(1, dim, vec![0.0; dim])?,
            w2: Tensor::param(dim, 1, glorot(dim, 1))?,
            b2: Tensor::param(1, 1, vec![0.0])?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }

    /// Constant copy, used when gradients must not reach θ_d.
    pub fn detached(&self) -> Self {
        Self {
            w1: self.w1.detach(),
            b1: self.b1.detach(),
            w2: self.w2.detach(),
            b2: self.b2.detach(),
        }
    }

    /// Raw scores (B×1) for a batch of embeddings (B×d_h).
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "discriminator expects dim {}, got {}",
                self.input_dim(),
                z.cols()
            )));
        }
        z.matmul(&self.w1)?
            .add(&self.b1)?
            .relu()
            .matmul(&self.w2)?
            .add(&self.b2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Fixed,
    ClassDynamic,
}

/// Confidence threshold, either fixed or warped per class by how many
/// confident pseudo-labels each class has collected (FlexMatch style).
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdState {
    pub mode: ThresholdMode,
    pub tau: f64,
    pub sigma: Vec<f64>,
}

impl ThresholdState {
    pub fn new(mode: ThresholdMode, tau: f64, num_classes: usize) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Config(format!("threshold {tau} outside (0, 1]")));
        }
        Ok(Self {
            mode,
            tau,
            sigma: vec![0.0; num_classes],
        })
    }

    pub fn reset(&mut self) {
        self.sigma.iter_mut().for_each(|s| *s = 0.0);
    }

    /// Current per-class thresholds. For class-dynamic mode
    /// `β_c = σ_c / max(max σ, 1)` and `τ_c = τ β_c / (2 − β_c)`.
    pub fn thresholds(&self) -> Vec<f64> {
        match self.mode {
            ThresholdMode::Fixed => vec![self.tau; self.sigma.len()],
            ThresholdMode::ClassDynamic => {
                let top = self.sigma.iter().copied().fold(0.0, f64::max).max(1.0);
                self.sigma
                    .iter()
                    .map(|s| {
                        let beta = s / top;
                        self.tau * beta / (2.0 - beta)
                    })
                    .collect()
            }
        }
    }

    /// Adds this batch's confident pseudo-labels (judged against the base
    /// τ) to the per-class counts and returns the updated thresholds.
    pub fn update(&mut self, weak: &[Vec<f64>]) -> Vec<f64> {
        if self.mode == ThresholdMode::ClassDynamic {
            for row in weak {
                let (c, p) = argmax(row);
                if p > self.tau {
                    self.sigma[c] += 1.0;
                }
            }
        }
        self.thresholds()
    }
}

/// Index and value of the row maximum; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Rows whose top score strictly exceeds the threshold of their argmax class.
pub fn confidence_mask(weak: &[Vec<f64>], thresholds: &[f64]) -> Vec<bool> {
    weak.iter()
        .map(|row| {
            let (c, p) = argmax(row);
            p > thresholds[c]
        })
        .collect()
}

/// Weak-branch scores p̃ (constants), prompted scores p̂ (differentiable),
/// hard pseudo-labels and the confidence mask.
pub struct BatchPredictions {
    pub weak: Vec<Vec<f64>>,
    pub prompted: Tensor,
    pub pseudo: Vec<usize>,
    pub mask: Vec<bool>,
}

impl BatchPredictions {
    pub fn new(weak: Vec<Vec<f64>>, prompted: Tensor, thresholds: &[f64]) -> Result<Self> {
        let (b, c) = prompted.shape();
        if weak.len() != b || weak.iter().any(|r| r.len() != c) {
            return Err(Error::Dimension(format!(
                "weak scores {}x? vs prompted scores {b}x{c}",
                weak.len()
            )));
        }
        if thresholds.len() != c {
            return Err(Error::Dimension(format!(
                "{} thresholds for {c} classes",
                thresholds.len()
            )));
        }
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let pseudo = weak.iter().map(|r| argmax(r).0).collect();
        let mask = confidence_mask(&weak, thresholds);
        Ok(Self {
            weak,
            prompted,
            pseudo,
            mask,
        })
    }

    pub fn with_tau(weak: Vec<Vec<f64>>, prompted: Tensor, tau: f64) -> Result<Self> {
        let c = prompted.cols();
        Self::new(weak, prompted, &vec![tau; c])
    }

    pub fn batch_size(&self) -> usize {
        self.weak.len()
    }

    pub fn confident_fraction(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.batch_size() as f64
    }

    /// Σ over rows of weight_i · CE(label_i, p̂_i), as a differentiable scalar.
    fn weighted_ce_sum(&self, picks: &[(usize, usize, f64)]) -> Result<Tensor> {
        let (b, c) = self.prompted.shape();
        let mut w = vec![0.0; b * c];
        for &(row, label, weight) in picks {
            if label >= c {
                return Err(Error::Contract(format!(
                    "label {label} outside {c} classes"
                )));
            }
            w[row * c + label] += weight;
        }
        Ok(self
            .prompted
            .log_eps(LOG_EPS)?
            .mul(&Tensor::new(b, c, w)?)?
            .sum()?
            .neg())
    }

    fn pseudo_picks(&self) -> Vec<(usize, usize, f64)> {
        (0..self.batch_size())
            .filter(|&i| self.mask[i])
            .map(|i| (i, self.pseudo[i], 1.0))
            .collect()
    }
}

/// (1/|B|) Σ 1(max p̃ > τ) CE(argmax p̃, p̂), normalized by the full batch.
pub fn consistency_loss(bp: &BatchPredictions) -> Result<Tensor> {
    Ok(bp
        .weighted_ce_sum(&bp.pseudo_picks())?
        .scale(1.0 / bp.batch_size() as f64))
}

/// Negative entropy of the batch-mean prediction: Σ_c q̂_c log q̂_c.
pub fn diversity_loss(prompted: &Tensor) -> Result<Tensor> {
    let q = prompted.col_mean()?;
    q.mul(&q.log_eps(LOG_EPS)?)?.sum()
}

/// −(1/2|B|) Σ [log σ(d(z_a)) + log(1 − σ(d(z_p)))]. Embeddings are detached
/// so only θ_d receives gradients.
pub fn discriminator_loss(d: &Discriminator, z_a: &Tensor, z_p: &Tensor) -> Result<Tensor> {
    if z_a.rows() != z_p.rows() || z_a.rows() == 0 {
        return Err(Error::Dimension(format!(
            "batch sizes {} and {}",
            z_a.rows(),
            z_p.rows()
        )));
    }
    let b = z_a.rows() as f64;
    let real = d.forward(&z_a.detach())?.log_sigmoid().sum()?;
    let fake = d.forward(&z_p.detach())?.neg().log_sigmoid().sum()?;
    Ok(real.add(&fake)?.scale(-1.0 / (2.0 * b)))
}

/// −(1/|B|) Σ log σ(d(z_p)) with θ_d held constant; gradients flow into z_p.
pub fn adversarial_loss(d: &Discriminator, z_p: &Tensor) -> Result<Tensor> {
    if z_p.rows() == 0 {
        return Err(Error::Dimension("empty batch".into()));
    }
    let b = z_p.rows() as f64;
    Ok(d.detached()
        .forward(z_p)?
        .log_sigmoid()
        .sum()?
        .scale(-1.0 / b))
}

/// L = L_c + λ1 L_div + λ2 L_adv.
pub fn total_loss(
    l_c: &Tensor,
    l_div: &Tensor,
    l_adv: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<Tensor> {
    l_c.add(&l_div.scale(lambda1))?.add(&l_adv.scale(lambda2))
}

/// (1/|B|)(Σ_{S_l} CE(y, p̂) + λ3 Σ_B 1(max p̃ > τ) CE(argmax p̃, p̂)).
/// `labeled` lists (row, label) pairs; a row may appear at most once.
pub fn fewshot_consistency_loss(
    bp: &BatchPredictions,
    labeled: &[(usize, usize)],
    lambda3: f64,
) -> Result<Tensor> {
    let b = bp.batch_size();
    let mut seen = vec![false; b];
    for &(row, _) in labeled {
        if row >= b {
            return Err(Error::Contract(format!(
                "labeled row {row} outside batch of {b}"
            )));
        }
        if std::mem::replace(&mut seen[row], true) {
            return Err(Error::Contract(format!("row {row} labeled twice")));
        }
    }
    let mut picks: Vec<(usize, usize, f64)> = labeled.iter().map(|&(r, y)| (r, y, 1.0)).collect();
    picks.extend(
        bp.pseudo_picks()
            .into_iter()
            .map(|(r, y, _)| (r, y, lambda3)),
    );
    Ok(bp.weighted_ce_sum(&picks)?.scale(1.0 / b as f64))
}
