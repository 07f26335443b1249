//! Input-gradient saliency and SmoothGrad.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::capsule::{self, RoutingMode};
use crate::error::{Error, Result};
use crate::model::CapsNetParams;
use crate::tensor::Tensor;

/// Anything that can report `∂S_j/∂I` for a set of labels.
pub trait ScoreModel {
    fn num_classes(&self) -> usize;

    /// One `[C, H, W]` gradient per label, in the order given.
    fn score_gradients(&self, image: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>>;
}

fn check_labels(labels: &[usize], n: usize) -> Result<()> {
    match labels.iter().find(|&&j| j >= n) {
        Some(j) => Err(Error::invalid("saliency", format!("unknown label {}", j))),
        None => Ok(()),
    }
}

impl ScoreModel for CapsNetParams {
    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn score_gradients(&self, image: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>> {
        check_labels(labels, self.arch.num_classes)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.param(image, true);
        let out = capsule::forward(
            &mut tape,
            &self.arch,
            &bound,
            x,
            &RoutingMode::Dynamic(self.arch.routing_iterations),
        )?;
        labels
            .iter()
            .map(|&j| {
                let pick = tape.constant(Tensor::from_fn(vec![self.arch.num_classes], |k| (k == j) as u8 as f32));
                let picked = tape.hadamard(out.scores, pick)?;
                let s = tape.sum_all(picked)?;
                tape.backward(s)?.get_or_zeros(&tape, x)
            })
            .collect()
    }
}

/// `S_j = w_j · I`; the gradient is `w_j` everywhere.
#[derive(Clone, Debug)]
pub struct LinearSurrogate {
    /// `[J, C, H, W]`
    pub weights: Tensor,
}

impl ScoreModel for LinearSurrogate {
    fn num_classes(&self) -> usize {
        self.weights.shape()[0]
    }

    fn score_gradients(&self, image: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>> {
        check_labels(labels, self.num_classes())?;
        if image.shape() != &self.weights.shape()[1..] {
            return Err(Error::shape(
                "saliency",
                format!("image {:?} for weights {:?}", image.shape(), self.weights.shape()),
            ));
        }
        let per = image.len();
        labels
            .iter()
            .map(|&j| {
                Tensor::new(
                    image.shape().to_vec(),
                    self.weights.data()[j * per..(j + 1) * per].to_vec(),
                )
            })
            .collect()
    }
}

/// Per-pixel maximum of `|g|` over channels: `[C, H, W]` → `[H, W]`.
pub fn channel_max_abs(grad: &Tensor) -> Result<Tensor> {
    grad.expect_rank(3, "saliency")?;
    let (c, h, w) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let d = grad.data();
    Ok(Tensor::from_fn(vec![h, w], |p| {
        (0..c).map(|k| d[k * h * w + p].abs()).fold(0.0f32, f32::max)
    }))
}

/// `|∂S_j/∂I|`, channel-reduced by maximum absolute value.
pub fn class_saliency(model: &dyn ScoreModel, image: &Tensor, label: usize) -> Result<Tensor> {
    let g = model.score_gradients(image, &[label])?;
    channel_max_abs(&g[0])
}

/// Linear rescale to `[0, 1]`; a (near-)constant map becomes all zeros.
pub fn normalize_minmax(map: &Tensor) -> Tensor {
    let (lo, hi) = (map.min_value(), map.max_value());
    let range = hi - lo;
    if !(range > 1e-12) {
        return Tensor::zeros(map.shape().to_vec());
    }
    map.map(|v| (v - lo) / range)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothGradConfig {
    pub samples: usize,
    /// Noise standard deviation on the `[0, 1]` pixel scale.
    pub sigma: f32,
    pub seed: u64,
}

impl Default for SmoothGradConfig {
    fn default() -> Self {
        Self {
            samples: 40,
            sigma: 0.15,
            seed: 0,
        }
    }
}

impl SmoothGradConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "SmoothGrad needs samples ≥ 1 and sigma ≥ 0, got {} and {}",
                self.samples, self.sigma
            )));
        }
        Ok(())
    }
}

/// SmoothGrad maps for several labels from shared noisy inputs. Sample `n`
/// draws its noise from stream `n` of the seeded generator.
pub fn smoothgrad_multi(
    model: &dyn ScoreModel,
    image: &Tensor,
    labels: &[usize],
    cfg: &SmoothGradConfig,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let normal = Normal::new(0.0f32, cfg.sigma.max(f32::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let mut sums: Option<Vec<Vec<f64>>> = None;
    for n in 0..cfg.samples {
        let noisy = if cfg.sigma == 0.0 {
            image.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(n as u64);
            let mut noisy = image.clone();
            noisy.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            noisy
        };
        let grads = model.score_gradients(&noisy, labels)?;
        let maps: Vec<Tensor> = grads.iter().map(channel_max_abs).collect::<Result<_>>()?;
        let sums = sums.get_or_insert_with(|| maps.iter().map(|m| vec![0.0f64; m.len()]).collect());
        for (acc, m) in sums.iter_mut().zip(&maps) {
            for (a, &v) in acc.iter_mut().zip(m.data()) {
                *a += v as f64;
            }
        }
    }
    let shape = [image.shape()[1], image.shape()[2]];
    let count = cfg.samples as f64;
    sums.unwrap_or_default()
        .into_iter()
        .map(|acc| {
            let mean = Tensor::new(shape.to_vec(), acc.into_iter().map(|a| (a / count) as f32).collect())?;
            Ok(normalize_minmax(&mean))
        })
        .collect()
}

/// Mean saliency over `N` noisy copies of the image, min-max normalized.
pub fn smoothgrad(model: &dyn ScoreModel, image: &Tensor, label: usize, cfg: &SmoothGradConfig) -> Result<Tensor> {
    Ok(smoothgrad_multi(model, image, &[label], cfg)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_input;

    fn surrogate() -> LinearSurrogate {
        LinearSurrogate {
            weights: random_input(&[2, 3, 5, 4], -1.0, 1.0, 9),
        }
    }

    #[test]
    fn linear_surrogate_saliency_is_abs_weight() {
        let m = surrogate();
        let image = random_input(&[3, 5, 4], 0.0, 1.0, 1);
        let sal = class_saliency(&m, &image, 1).unwrap();
        let w = &m.weights.data()[60..];
        for p in 0..20 {
            let expect = (0..3).map(|c| w[c * 20 + p].abs()).fold(0.0, f32::max);
            assert_eq!(sal.data()[p], expect);
        }
        assert!(class_saliency(&m, &image, 2).is_err());
    }

    #[test]
    fn zero_sigma_equals_normalized_saliency() {
        let m = surrogate();
        let image = random_input(&[3, 5, 4], 0.0, 1.0, 2);
        let cfg = SmoothGradConfig {
            samples: 7,
            sigma: 0.0,
            seed: 3,
        };
        let sg = smoothgrad(&m, &image, 0, &cfg).unwrap();
        assert_eq!(sg, normalize_minmax(&class_saliency(&m, &image, 0).unwrap()));
        // a linear model has a constant gradient, so noise changes nothing
        let noisy = smoothgrad(&m, &image, 0, &SmoothGradConfig { sigma: 0.5, ..cfg }).unwrap();
        assert_eq!(sg, noisy);
    }

    #[test]
    fn normalization_range() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 3.0, 2.0, 5.0]).unwrap();
        let n = normalize_minmax(&t);
        assert_eq!(n.min_value(), 0.0);
        assert_eq!(n.max_value(), 1.0);
        assert_eq!(
            normalize_minmax(&Tensor::full(vec![2, 2], 0.3)),
            Tensor::zeros(vec![2, 2])
        );
    }
}
