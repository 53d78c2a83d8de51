//! Prompt training against a frozen model, inference, and evaluation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gnn::{GnnModel, Propagation};
use crate::graphdata::Dataset;
use crate::objectives::{
    adversarial_loss, consistency_loss, discriminator_loss, diversity_loss,
    fewshot_consistency_loss, total_loss, BatchPredictions, Discriminator, ThresholdMode,
    ThresholdState,
};
use crate::prompting::{
    make_pair, AugmentConfig, AugmentKind, PromptFunction, PromptParams, TOKEN_INIT_STD,
};

/// Adam with bias correction. Parameters without a gradient are skipped.
pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            params: params.to_vec(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
            let mut data = p.data_mut();
            for j in 0..g.len() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g[j];
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Macro-averaged F1 over `num_classes` classes of argmax predictions.
/// Classes absent from both predictions and labels count with F1 = 0.
pub fn macro_f1(
    scores: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
) -> Result<(f64, Vec<f64>)> {
    if scores.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty set".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (row, &y) in scores.iter().zip(labels) {
        if y >= num_classes || row.len() != num_classes {
            return Err(Error::Dimension(format!(
                "label {y} or row width {} vs {num_classes} classes",
                row.len()
            )));
        }
        let pred = crate::objectives::argmax(row).0;
        if pred == y {
            tp[y] += 1;
        } else {
            fp[pred] += 1;
            fneg[y] += 1;
        }
    }
    let per_class: Vec<f64> = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let macro_avg = per_class.iter().sum::<f64>() / num_classes as f64;
    Ok((macro_avg, per_class))
}

/// Macro-F1 with the class count taken from the score width.
pub fn evaluate(scores: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let c = scores.first().map_or(0, Vec::len);
    macro_f1(scores, labels, c)
}

/// Percent improvement over the base F1, rounded to one decimal.
pub fn imp(f1: f64, f1_base: f64) -> Result<f64> {
    if !(f1_base > 0.0) {
        return Err(Error::Numeric(format!(
            "improvement undefined for base F1 {f1_base}"
        )));
    }
    Ok((1000.0 * (f1 - f1_base) / f1_base).round() / 10.0)
}

/// Number of prompt tokens: a fixed count or the mean graph size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenCount {
    Fixed(usize),
    Auto(AutoTokens),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTokens {
    MeanNodes,
}

impl TokenCount {
    pub fn resolve(self, ds: &Dataset) -> usize {
        match self {
            TokenCount::Fixed(k) => k,
            TokenCount::Auto(AutoTokens::MeanNodes) => (ds.mean_nodes().round() as usize).max(1),
        }
    }
}

/// Scalar hyperparameters of prompt training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub tau: f64,
    pub threshold_mode: ThresholdMode,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub p_w: f64,
    pub p_s: f64,
    pub aug_kind: AugmentKind,
    pub n_t: TokenCount,
    pub lr: f64,
    pub lr_disc: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub label_fraction: f64,
    pub token_init_std: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            threshold_mode: ThresholdMode::Fixed,
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.1,
            p_w: 0.1,
            p_s: 0.3,
            aug_kind: AugmentKind::FeatureMask,
            n_t: TokenCount::Fixed(crate::prompting::DEFAULT_TOKENS),
            lr: 0.01,
            lr_disc: 0.001,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            label_fraction: 0.0,
            token_init_std: TOKEN_INIT_STD,
        }
    }
}

impl PromptConfig {
    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            kind: self.aug_kind,
            p_w: self.p_w,
            p_s: self.p_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.augment().validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return bad(format!(
                "label_fraction {} outside [0, 1]",
                self.label_fraction
            ));
        }
        if !(self.lr >= 0.0 && self.lr_disc >= 0.0 && self.token_init_std >= 0.0) {
            return bad("learning rates and token_init_std must be >= 0".into());
        }
        if self.n_t == TokenCount::Fixed(0) {
            return bad("n_t must be >= 1".into());
        }
        Ok(())
    }
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_c: f64,
    pub l_div: f64,
    pub l_adv: f64,
    pub l_disc: f64,
    pub confident_fraction: f64,
    pub val_f1: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,L_c,L_div,L_adv,L_disc,confident_fraction,val_f1";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4}",
            self.epoch,
            self.l_c,
            self.l_div,
            self.l_adv,
            self.l_disc,
            self.confident_fraction,
            self.val_f1
        )
    }
}

pub struct PromptOutcome {
    pub params: PromptParams,
    pub discriminator: Discriminator,
    /// 0 when the initial prompt was never beaten on validation.
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub log: Vec<EpochLog>,
}

/// Softmax scores of the prompted graphs; no augmentation.
pub fn infer(
    model: &GnnModel,
    prompt: &dyn PromptFunction,
    graphs: &Dataset,
) -> Result<Vec<Vec<f64>>> {
    graphs
        .graphs
        .iter()
        .map(|g| {
            let p = prompt.apply(g)?;
            let z = model.encode_features(&p.graph, &p.x)?;
            Ok(model.head(&z.0)?.softmax_rows()?.to_vec())
        })
        .collect()
}

fn val_f1(model: &GnnModel, prompt: &PromptParams, val: &Dataset) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let scores = infer(model, prompt, val)?;
    Ok(Some(
        macro_f1(&scores, &val.labels()?, model.spec.num_classes)?.0,
    ))
}

fn grad_leak(tensors: &[Tensor]) -> bool {
    tensors.iter().any(|t| t.grad().is_some())
}

/// Trains prompt tokens on unlabeled target graphs while every model
/// parameter stays fixed. Per batch: one discriminator step, then one prompt
/// step on L_c + λ1 L_div + λ2 L_adv. Returns the tokens with the best
/// validation macro-F1 (the untrained tokens included).
pub fn train_prompt(
    model: &GnnModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &PromptConfig,
) -> Result<PromptOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("empty target training set".into()));
    }
    if !model.is_frozen() {
        return Err(Error::Contract(
            "prompt training requires a frozen model".into(),
        ));
    }
    let c = model.spec.num_classes;
    let n_t = cfg.n_t.resolve(train);
    let prompt = PromptParams::new(n_t, train.feature_dim, cfg.token_init_std, cfg.seed)?;
    let disc = Discriminator::new(model.spec.hidden_dim, cfg.seed.wrapping_add(1))?;
    let mut opt_prompt = Adam::new(std::slice::from_ref(&prompt.tokens), cfg.lr);
    let mut opt_disc = Adam::new(&disc.params(), cfg.lr_disc);
    let mut thresholds = ThresholdState::new(cfg.threshold_mode, cfg.tau, c)?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let aug = cfg.augment();
    let model_params = model.params();
    let disc_params = disc.params();

    // Seeded labeled subset for the few-shot variant.
    let fewshot = cfg.label_fraction > 0.0;
    let mut labeled: Vec<Option<usize>> = vec![None; train.len()];
    if fewshot {
        let mut ids: Vec<usize> = (0..train.len()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4)));
        let k = (cfg.label_fraction * train.len() as f64).round() as usize;
        for &i in &ids[..k] {
            let y = train.graphs[i]
                .y
                .ok_or_else(|| Error::Contract(format!("labeled target graph {i} has no label")))?;
            labeled[i] = Some(y);
        }
    }

    let cached: Vec<Propagation> = match aug.kind {
        AugmentKind::FeatureMask => train
            .graphs
            .iter()
            .map(|g| Propagation::new(model.spec.arch, g))
            .collect(),
        AugmentKind::EdgeDrop => Vec::new(),
    };

    let mut best_val = val_f1(model, &prompt, val)?;
    let mut best_tokens = prompt.tokens.to_vec();
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        thresholds.reset();
        order.shuffle(&mut order_rng);
        let (mut s_c, mut s_div, mut s_adv, mut s_disc, mut confident, mut batches) =
            (0.0, 0.0, 0.0, 0.0, 0usize, 0);
        for batch in order.chunks(cfg.batch_size) {
            let mut za = Vec::with_capacity(batch.len());
            let mut zp = Vec::with_capacity(batch.len());
            for &i in batch {
                let (weak, prompted) = make_pair(&train.graphs[i], &aug, &prompt, &mut aug_rng)?;
                match aug.kind {
                    AugmentKind::FeatureMask => {
                        za.push(model.encode_with(&cached[i], &weak.features())?.0);
                        zp.push(model.encode_with(&cached[i], &prompted.x)?.0);
                    }
                    AugmentKind::EdgeDrop => {
                        za.push(model.encode(&weak)?.0);
                        zp.push(model.encode_features(&prompted.graph, &prompted.x)?.0);
                    }
                }
            }
            let za = Tensor::concat_rows(&za)?;
            let zp = Tensor::concat_rows(&zp)?;

            opt_disc.zero_grad();
            let l_disc = discriminator_loss(&disc, &za, &zp)?;
            l_disc.backward()?;
            if prompt.tokens.grad().is_some() || grad_leak(&model_params) {
                return Err(Error::Contract(
                    "discriminator step leaked gradients".into(),
                ));
            }
            opt_disc.step()?;
            opt_disc.zero_grad();

            let weak_scores = model.head(&za)?.softmax_rows()?.to_rows();
            let prompted_scores = model.head(&zp)?.softmax_rows()?;
            let tau_c = thresholds.update(&weak_scores);
            let bp = BatchPredictions::new(weak_scores, prompted_scores.clone(), &tau_c)?;
            let l_c = if fewshot {
                let rows: Vec<(usize, usize)> = batch
                    .iter()
                    .enumerate()
                    .filter_map(|(r, &i)| labeled[i].map(|y| (r, y)))
                    .collect();
                fewshot_consistency_loss(&bp, &rows, cfg.lambda3)?
            } else {
                consistency_loss(&bp)?
            };
            let l_div = diversity_loss(&prompted_scores)?;
            let l_adv = adversarial_loss(&disc, &zp)?;
            let loss = total_loss(&l_c, &l_div, &l_adv, cfg.lambda1, cfg.lambda2)?;
            if !loss.item().is_finite() {
                return Err(Error::Numeric(format!(
                    "prompt loss diverged at epoch {epoch}"
                )));
            }
            opt_prompt.zero_grad();
            loss.backward()?;
            if grad_leak(&model_params) || grad_leak(&disc_params) {
                return Err(Error::Contract("prompt step leaked gradients".into()));
            }
            opt_prompt.step()?;
            opt_prompt.zero_grad();

            s_c += l_c.item();
            s_div += l_div.item();
            s_adv += l_adv.item();
            s_disc += l_disc.item();
            confident += bp.mask.iter().filter(|m| **m).count();
            batches += 1;
        }
        let v = val_f1(model, &prompt, val)?;
        if let Some(f1) = v {
            if best_val.is_none_or(|b| f1 > b) {
                best_val = Some(f1);
                best_tokens = prompt.tokens.to_vec();
                best_epoch = epoch;
            }
        } else {
            best_tokens = prompt.tokens.to_vec();
            best_epoch = epoch;
        }
        let nb = batches.max(1) as f64;
        let entry = EpochLog {
            epoch,
            l_c: s_c / nb,
            l_div: s_div / nb,
            l_adv: s_adv / nb,
            l_disc: s_disc / nb,
            confident_fraction: confident as f64 / train.len() as f64,
            val_f1: v.unwrap_or(f64::NAN),
        };
        log::debug!("{entry}");
        log.push(entry);
    }

    prompt.tokens.data_mut().copy_from_slice(&best_tokens);
    prompt.tokens.zero_grad();
    Ok(PromptOutcome {
        params: prompt,
        discriminator: disc,
        best_epoch,
        best_val_f1: best_val.unwrap_or(f64::NAN),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn macro_f1_examples() {
        let perfect = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert_eq!(evaluate(&perfect, &[0, 1]).unwrap().0, 1.0);
        let all_zero = vec![vec![0.9, 0.1]; 4];
        let (m, per) = evaluate(&all_zero, &[0, 0, 1, 1]).unwrap();
        assert!((per[0] - 2.0 / 3.0).abs() < 1e-15 && per[1] == 0.0);
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
        let (_, per) = evaluate(&[vec![0.1, 0.9]], &[1]).unwrap();
        assert_eq!(per[1], 1.0);
        assert!(matches!(evaluate(&[], &[]), Err(Error::Contract(_))));
        assert!(evaluate(&perfect, &[0]).is_err());
    }

    #[test]
    fn absent_classes_count_as_zero() {
        let scores = vec![vec![0.9, 0.05, 0.05], vec![0.1, 0.8, 0.1]];
        let (m, per) = macro_f1(&scores, &[0, 1], 3).unwrap();
        assert_eq!(per, vec![1.0, 1.0, 0.0]);
        assert!((m - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn imp_examples() {
        assert_eq!(imp(49.1, 47.7).unwrap(), 2.9);
        assert_eq!(imp(56.0, 51.8).unwrap(), 8.1);
        assert_eq!(imp(0.42, 0.42).unwrap(), 0.0);
        assert!(imp(0.5, 0.0).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let x = Tensor::param(1, 2, vec![3.0, -2.0]).unwrap();
        let mut opt = Adam::new(std::slice::from_ref(&x), 0.1);
        for _ in 0..500 {
            opt.zero_grad();
            x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
            opt.step().unwrap();
        }
        assert!(
            x.to_vec().iter().all(|v| v.abs() < 1e-2),
            "{:?}",
            x.to_vec()
        );
    }

    #[test]
    fn adam_zero_lr_is_inert() {
        let x = Tensor::param(1, 2, vec![3.0, -2.0]).unwrap();
        let mut opt = Adam::new(std::slice::from_ref(&x), 0.0);
        x.sum().unwrap().backward().unwrap();
        opt.step().unwrap();
        assert_eq!(x.to_vec(), vec![3.0, -2.0]);
    }

    #[test]
    fn config_validation() {
        assert!(PromptConfig::default().validate().is_ok());
        let bad = PromptConfig {
            label_fraction: 1.5,
            ..PromptConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PromptConfig {
            epochs: 0,
            ..PromptConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PromptConfig {
            lambda2: -1.0,
            ..PromptConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn token_count_serde() {
        let fixed: TokenCount = serde_json::from_str("10").unwrap();
        assert_eq!(fixed, TokenCount::Fixed(10));
        let auto: TokenCount = serde_json::from_str("\"mean_nodes\"").unwrap();
        assert_eq!(auto, TokenCount::Auto(AutoTokens::MeanNodes));
    }

    #[test]
    fn epoch_log_row() {
        let e = EpochLog {
            epoch: 3,
            l_c: 0.5,
            l_div: -0.6,
            l_adv: 0.7,
            l_disc: 0.69,
            confident_fraction: 0.25,
            val_f1: 0.8,
        };
        assert_eq!(
            e.to_string().split(',').count(),
            EpochLog::CSV_HEADER.split(',').count()
        );
    }
}
