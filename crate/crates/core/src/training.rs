//! Margin loss, the combined objective and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::capsule::{self, RoutingMode};
use crate::data::PatchRecord;
use crate::decoder;
use crate::error::{Error, Result};
use crate::model::CapsNetParams;
use crate::taxonomy::NUM_CLASSES;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub m_plus: f32,
    pub m_minus: f32,
    pub lambda_down: f32,
    pub alpha0: f32,
    pub alpha_decay: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_down: 0.5,
            alpha0: 5e-4,
            alpha_decay: 0.9,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.m_minus
            && self.m_minus < self.m_plus
            && self.m_plus <= 1.0
            && self.lambda_down > 0.0
            && self.lambda_down <= 1.0
            && self.alpha0 > 0.0
            && self.alpha_decay > 0.0
            && self.alpha_decay < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss settings {:?}", self)))
        }
    }

    /// Reconstruction weight for `epoch` (0-based).
    pub fn alpha(&self, epoch: usize) -> f32 {
        (self.alpha0 as f64 * (self.alpha_decay as f64).powi(epoch as i32)) as f32
    }
}

fn check_targets(scores: &Tensor, targets: &Tensor) -> Result<()> {
    scores.expect_same_shape(targets, "margin_loss")?;
    if let Some(t) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid("margin_loss", format!("target {} is not binary", t)));
    }
    Ok(())
}

/// `Σ_j T_j·max(0, m⁺ − s_j)² + λ·(1 − T_j)·max(0, s_j − m⁻)²`.
pub fn margin_loss(scores: &Tensor, targets: &Tensor, cfg: &LossConfig) -> Result<f32> {
    check_targets(scores, targets)?;
    let total: f64 = scores
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&s, &t)| {
            let present = (cfg.m_plus - s).max(0.0) as f64;
            let absent = (s - cfg.m_minus).max(0.0) as f64;
            t as f64 * present * present + cfg.lambda_down as f64 * (1.0 - t as f64) * absent * absent
        })
        .sum();
    Ok(total as f32)
}

/// [`margin_loss`] recorded on a tape.
pub fn margin_loss_on_tape(tape: &mut Tape<'_>, scores: Var, targets: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_targets(tape.value(scores)?, targets)?;
    let present = tape.scale_shift(scores, -1.0, cfg.m_plus)?;
    let present = tape.relu(present)?;
    let present = tape.hadamard(present, present)?;
    let absent = tape.scale_shift(scores, 1.0, -cfg.m_minus)?;
    let absent = tape.relu(absent)?;
    let absent = tape.hadamard(absent, absent)?;
    let t = tape.constant(targets.clone());
    let not_t = tape.constant(targets.map(|t| cfg.lambda_down * (1.0 - t)));
    let a = tape.hadamard(present, t)?;
    let b = tape.hadamard(absent, not_t)?;
    let sum = tape.add(a, b)?;
    tape.sum_all(sum)
}

/// `margin + α·rec`.
pub fn total_loss(margin: f32, rec: f32, alpha: f32) -> f32 {
    margin + alpha * rec
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Worker threads for per-sample gradients (0 = all cores).
    pub threads: usize,
    pub deterministic: bool,
    /// Train the reconstruction decoder alongside the classifier.
    pub reconstruction: bool,
    pub threshold: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            seed: 42,
            checkpoint_every: 0,
            threads: 0,
            deterministic: false,
            reconstruction: true,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state, one moment pair per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &CapsNetParams) -> Self {
        let zeros: Vec<Tensor> = params
            .named_blocks()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut CapsNetParams, grads: &[Tensor], lr: f32) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        let step = (lr as f64 * c2.sqrt() / c1) as f32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .blocks_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            p.expect_same_shape(g, "adam")?;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
fn sgd(params: &mut CapsNetParams, grads: &[Tensor], lr: f32) -> Result<()> {
    for (p, g) in params.blocks_mut().into_iter().zip(grads) {
        p.expect_same_shape(g, "sgd")?;
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

/// Loss terms and gradients of one sample.
pub struct SampleGradient {
    pub margin: f32,
    pub reconstruction: f32,
    pub scores: Tensor,
    pub grads: Vec<Tensor>,
}

/// Gradient of `(margin + α·rec) · weight` for one record; the decoder sees the
/// ground-truth labels.
pub fn sample_gradient(
    params: &CapsNetParams,
    record: &PatchRecord,
    loss: &LossConfig,
    alpha: f32,
    weight: f32,
    reconstruction: bool,
) -> Result<SampleGradient> {
    let arch = &params.arch;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let image = tape.param(&record.image, false);
    let fwd = capsule::forward(
        &mut tape,
        arch,
        &bound,
        image,
        &RoutingMode::Dynamic(arch.routing_iterations),
    )?;
    let margin = margin_loss_on_tape(&mut tape, fwd.scores, &record.targets(), loss)?;
    let (total, rec_value) = if reconstruction {
        let labels = record.label_indices();
        let rec = decoder::reconstruction_loss_on_tape(&mut tape, arch, &bound, fwd.v, image, &labels)?;
        let rec_value = tape.value(rec)?.item()?;
        let weighted = tape.scale_shift(rec, alpha, 0.0)?;
        (tape.add(margin, weighted)?, rec_value)
    } else {
        (margin, 0.0)
    };
    let objective = tape.scale_shift(total, weight, 0.0)?;
    let margin_value = tape.value(margin)?.item()?;
    let scores = tape.value(fwd.scores)?.clone();
    let mut grads = tape.backward(objective)?;
    let grads = bound.collect(&tape, &mut grads)?;
    Ok(SampleGradient {
        margin: margin_value,
        reconstruction: rec_value,
        scores,
        grads,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub margin: f64,
    pub reconstruction: f64,
    pub accuracy: f64,
    pub alpha: f32,
}

/// Optimizer state carried across epochs and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub alpha: f32,
    pub adam: Option<Adam>,
}

fn build_pool(cfg: &TrainConfig) -> Result<rayon::ThreadPool> {
    let threads = if cfg.deterministic { 1 } else { cfg.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {}", e)))
}

/// Classes that occur in at least one record.
pub fn observed_classes(records: &[PatchRecord]) -> Vec<usize> {
    (0..NUM_CLASSES)
        .filter(|&j| records.iter().any(|r| r.labels[j]))
        .collect()
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` after each one. Sample
/// gradients are summed in dataset order, so results do not depend on the
/// thread count.
pub fn train(
    records: &[PatchRecord],
    params: &mut CapsNetParams,
    cfg: &TrainConfig,
    loss: &LossConfig,
    state: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochLog, &CapsNetParams, &TrainState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    loss.validate()?;
    if records.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut state = state.unwrap_or(TrainState {
        epoch: 0,
        alpha: loss.alpha(0),
        adam: None,
    });
    if cfg.optimizer == OptimizerKind::Adam && state.adam.is_none() {
        state.adam = Some(Adam::new(params));
    }
    let pool = build_pool(cfg)?;
    let chunk = pool.current_num_threads().max(1);
    let classes = observed_classes(records);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // replay the shuffles of epochs already completed
    let mut order: Vec<usize> = (0..records.len()).collect();
    for _ in 0..state.epoch {
        order.shuffle(&mut rng);
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in state.epoch..cfg.epochs {
        let alpha = loss.alpha(epoch);
        order.shuffle(&mut rng);
        let (mut sum_margin, mut sum_rec) = (0.0f64, 0.0f64);
        let mut all_scores = Vec::with_capacity(records.len());
        let mut all_targets = Vec::with_capacity(records.len());
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let weight = 1.0 / batch.len() as f32;
            let mut acc: Option<Vec<Tensor>> = None;
            for group in batch.chunks(chunk) {
                let results: Vec<Result<SampleGradient>> = pool.install(|| {
                    group
                        .par_iter()
                        .map(|&i| sample_gradient(params, &records[i], loss, alpha, weight, cfg.reconstruction))
                        .collect()
                });
                for (r, &i) in results.into_iter().zip(group) {
                    let g = r?;
                    let total = total_loss(g.margin, g.reconstruction, alpha);
                    if !total.is_finite() || !g.grads.iter().all(Tensor::all_finite) {
                        return Err(Error::Numeric(format!(
                            "non-finite loss or gradient at epoch {} batch {} ({})",
                            epoch, b, records[i].name
                        )));
                    }
                    sum_margin += g.margin as f64;
                    sum_rec += g.reconstruction as f64;
                    all_scores.push(g.scores);
                    all_targets.push(records[i].targets());
                    match &mut acc {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&g.grads) {
                                a.add_assign(g)?;
                            }
                        }
                        None => acc = Some(g.grads),
                    }
                }
            }
            let grads = acc.expect("batch is non-empty");
            match (&mut state.adam, cfg.optimizer) {
                (Some(adam), OptimizerKind::Adam) => adam.update(params, &grads, cfg.learning_rate)?,
                _ => sgd(params, &grads, cfg.learning_rate)?,
            }
        }
        let n = records.len() as f64;
        let metrics = classification_metrics(&all_scores, &all_targets, cfg.threshold, &classes)?;
        let entry = EpochLog {
            epoch,
            loss: (sum_margin + alpha as f64 * sum_rec) / n,
            margin: sum_margin / n,
            reconstruction: sum_rec / n,
            accuracy: metrics.accuracy,
            alpha,
        };
        if !entry.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite mean loss at epoch {}", epoch)));
        }
        state.epoch = epoch + 1;
        state.alpha = loss.alpha(epoch + 1);
        on_epoch(&entry, params, &state)?;
        log.push(entry);
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMetrics {
    /// Percentage of correct class-instance decisions.
    pub accuracy: f64,
    /// Counts for each class in the evaluated set, in the order given.
    pub per_class: Vec<(usize, ClassCounts)>,
}

/// Thresholded decisions over `classes` for every sample.
pub fn classification_metrics(
    scores: &[Tensor],
    targets: &[Tensor],
    threshold: f32,
    classes: &[usize],
) -> Result<ClassificationMetrics> {
    if scores.len() != targets.len() {
        return Err(Error::shape(
            "classification_metrics",
            format!("{} score vectors for {} targets", scores.len(), targets.len()),
        ));
    }
    let mut per_class: Vec<(usize, ClassCounts)> = classes.iter().map(|&j| (j, ClassCounts::default())).collect();
    for (s, t) in scores.iter().zip(targets) {
        s.expect_same_shape(t, "classification_metrics")?;
        for (j, counts) in per_class.iter_mut() {
            if *j >= s.len() {
                return Err(Error::invalid(
                    "classification_metrics",
                    format!("class {} out of range", j),
                ));
            }
            let predicted = s.data()[*j] >= threshold;
            let actual = t.data()[*j] >= 0.5;
            match (predicted, actual) {
                (true, true) => counts.tp += 1,
                (false, false) => counts.tn += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
            }
        }
    }
    let correct: usize = per_class.iter().map(|(_, c)| c.tp + c.tn).sum();
    let total: usize = per_class.iter().map(|(_, c)| c.total()).sum();
    let accuracy = if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    };
    Ok(ClassificationMetrics { accuracy, per_class })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(s: f32) -> Tensor {
        Tensor::new(vec![1], vec![s]).unwrap()
    }

    #[test]
    fn margin_hinges() {
        let cfg = LossConfig::default();
        assert_eq!(margin_loss(&one(0.9), &one(1.0), &cfg).unwrap(), 0.0);
        assert_eq!(margin_loss(&one(0.1), &one(0.0), &cfg).unwrap(), 0.0);
        assert!((margin_loss(&one(0.0), &one(1.0), &cfg).unwrap() - 0.81).abs() < 1e-6);
        assert!(margin_loss(&one(0.5), &one(2.0), &cfg).is_err());
    }

    #[test]
    fn tape_margin_matches_plain() {
        let cfg = LossConfig::default();
        let s = Tensor::new(vec![4], vec![0.95, 0.4, 0.05, 0.7]).unwrap();
        let t = Tensor::new(vec![4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let sv = tape.leaf(s.clone(), true);
        let l = margin_loss_on_tape(&mut tape, sv, &t, &cfg).unwrap();
        let got = tape.value(l).unwrap().item().unwrap();
        assert!((got - margin_loss(&s, &t, &cfg).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn alpha_schedule() {
        let cfg = LossConfig::default();
        assert!((cfg.alpha(0) - 5e-4).abs() < 1e-10);
        assert!((cfg.alpha(2) - 4.05e-4).abs() < 1e-10);
        assert!(cfg.alpha(3) < cfg.alpha(2));
        assert_eq!(total_loss(1.5, 0.0, 0.3), 1.5);
    }

    #[test]
    fn accuracy_counts() {
        let s = vec![
            Tensor::new(vec![2], vec![0.9, 0.2]).unwrap(),
            Tensor::new(vec![2], vec![0.6, 0.7]).unwrap(),
        ];
        let t = vec![
            Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
            Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
        ];
        let m = classification_metrics(&s, &t, 0.5, &[0, 1]).unwrap();
        assert_eq!(m.accuracy, 75.0);
        assert_eq!(m.per_class[1].1.fp, 1);
        let perfect = classification_metrics(&t, &t, 0.5, &[0, 1]).unwrap();
        assert_eq!(perfect.accuracy, 100.0);
        let flipped: Vec<Tensor> = t.iter().map(|x| x.map(|v| 1.0 - v)).collect();
        assert_eq!(
            classification_metrics(&flipped, &t, 0.5, &[0, 1]).unwrap().accuracy,
            0.0
        );
    }
}
