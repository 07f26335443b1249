//! Per-label reconstruction through the transposed-convolution decoder.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ArchitectureConfig, BoundParams, CapsNetParams};
use crate::tensor::Tensor;

/// Threshold(s) for [`select_active_labels`].
#[derive(Clone, Debug, PartialEq)]
pub enum Threshold {
    Global(f32),
    PerClass(Vec<f32>),
}

impl Threshold {
    fn get(&self, j: usize) -> f32 {
        match self {
            Threshold::Global(t) => *t,
            Threshold::PerClass(t) => t[j],
        }
    }
}

/// Labels whose score reaches the threshold, in increasing order.
pub fn select_active_labels(scores: &Tensor, threshold: &Threshold) -> Result<Vec<usize>> {
    const OP: &str = "select_active_labels";
    let n = scores.len();
    let values: Vec<f32> = match threshold {
        Threshold::Global(t) => vec![*t],
        Threshold::PerClass(t) => {
            if t.len() != n {
                return Err(Error::shape(OP, format!("{} thresholds for {} scores", t.len(), n)));
            }
            t.clone()
        }
    };
    if let Some(t) = values.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(OP, format!("threshold {} outside [0, 1]", t)));
    }
    Ok((0..n).filter(|&j| scores.data()[j] >= threshold.get(j)).collect())
}

/// One-hot capsule mask `[J, D]` keeping only row `label`.
pub fn capsule_mask(num_classes: usize, digit_dim: usize, label: usize) -> Result<Tensor> {
    if label >= num_classes {
        return Err(Error::invalid("decode_label", format!("unknown label {}", label)));
    }
    Ok(Tensor::from_fn(vec![num_classes, digit_dim], |k| {
        if k / digit_dim == label {
            1.0
        } else {
            0.0
        }
    }))
}

/// Records the decoder applied to `v` with every capsule but `label` zeroed.
pub fn decode_on_tape(
    tape: &mut Tape<'_>,
    arch: &ArchitectureConfig,
    params: &BoundParams,
    v: Var,
    label: usize,
) -> Result<Var> {
    let mask = tape.constant(capsule_mask(arch.num_classes, arch.digit_dim, label)?);
    let masked = tape.hadamard(v, mask)?;
    let flat = tape.reshape(masked, &[arch.num_classes * arch.digit_dim])?;
    let d = &arch.decoder;
    let mut x = tape.linear(params.dense.0, flat)?;
    x = tape.add_channel_bias(x, params.dense.1)?;
    x = tape.relu(x)?;
    x = tape.reshape(x, &[d.base_channels, d.base_size, d.base_size])?;
    let last = d.layers.len().saturating_sub(1);
    for (i, (spec, &(w, b))) in d.layers.iter().zip(&params.deconv).enumerate() {
        x = tape.transposed_conv2d(x, w, spec.conv_spec())?;
        x = tape.add_channel_bias(x, b)?;
        if i < last {
            x = tape.relu(x)?;
        }
    }
    tape.sigmoid(x)
}

/// `M_j^rec` for digit capsules `v [J, D]`.
pub fn decode_label(v: &Tensor, label: usize, params: &CapsNetParams) -> Result<Tensor> {
    let arch = &params.arch;
    if v.shape() != [arch.num_classes, arch.digit_dim] {
        return Err(Error::shape(
            "decode_label",
            format!(
                "expected v [{}, {}], got {:?}",
                arch.num_classes,
                arch.digit_dim,
                v.shape()
            ),
        ));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let vv = tape.param(v, false);
    let out = decode_on_tape(&mut tape, arch, &bound, vv, label)?;
    Ok(tape.value(out)?.clone())
}

/// Reconstruction maps for a set of active labels.
#[derive(Clone, Debug)]
pub struct ReconstructionSet {
    pub active_labels: Vec<usize>,
    pub maps: Vec<Tensor>,
}

impl ReconstructionSet {
    pub fn decode(v: &Tensor, labels: &[usize], params: &CapsNetParams) -> Result<Self> {
        let maps = labels
            .iter()
            .map(|&j| decode_label(v, j, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            active_labels: labels.to_vec(),
            maps,
        })
    }

    pub fn map_for(&self, label: usize) -> Option<&Tensor> {
        self.active_labels
            .iter()
            .position(|&j| j == label)
            .map(|k| &self.maps[k])
    }
}

/// `Î = Σ_j M_j^rec`; an empty set gives a zero image of `shape`.
pub fn reconstruct(set: &ReconstructionSet, shape: &[usize]) -> Result<Tensor> {
    let mut out = Tensor::zeros(shape.to_vec());
    for m in &set.maps {
        out.add_assign(m)?;
    }
    Ok(out)
}

/// `‖I − Î‖²`.
pub fn reconstruction_loss(image: &Tensor, recon: &Tensor) -> Result<f32> {
    image.expect_same_shape(recon, "reconstruction_loss")?;
    let total: f64 = image
        .data()
        .iter()
        .zip(recon.data())
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum();
    Ok(total as f32)
}

/// Records `‖I − Σ_j M_j^rec‖²` over `labels`.
pub fn reconstruction_loss_on_tape(
    tape: &mut Tape<'_>,
    arch: &ArchitectureConfig,
    params: &BoundParams,
    v: Var,
    image: Var,
    labels: &[usize],
) -> Result<Var> {
    let mut recon: Option<Var> = None;
    for &j in labels {
        let m = decode_on_tape(tape, arch, params, v, j)?;
        recon = Some(match recon {
            Some(r) => tape.add(r, m)?,
            None => m,
        });
    }
    let diff = match recon {
        Some(r) => tape.sub(image, r)?,
        None => image,
    };
    let sq = tape.hadamard(diff, diff)?;
    tape.sum_all(sq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_extremes() {
        let scores = Tensor::from_fn(vec![27], |j| if j == 0 { 0.7 } else { 0.3 });
        assert_eq!(
            select_active_labels(&scores, &Threshold::Global(0.0)).unwrap().len(),
            27
        );
        assert!(select_active_labels(&scores, &Threshold::Global(1.0))
            .unwrap()
            .is_empty());
        assert_eq!(select_active_labels(&scores, &Threshold::Global(0.5)).unwrap(), vec![0]);
        assert!(select_active_labels(&scores, &Threshold::Global(1.5)).is_err());
        assert!(select_active_labels(&scores, &Threshold::PerClass(vec![0.5; 3])).is_err());
    }

    #[test]
    fn zero_capsule_decodes_to_half() {
        let arch = ArchitectureConfig::tiny();
        let params = CapsNetParams::init(&arch, 2).unwrap();
        let v = Tensor::zeros(vec![arch.num_classes, arch.digit_dim]);
        let m = decode_label(&v, 3, &params).unwrap();
        assert_eq!(m.shape(), &arch.image_shape());
        assert!(m.data().iter().all(|&x| x == 0.5));
        assert!(decode_label(&v, 27, &params).is_err());
    }

    #[test]
    fn reconstruction_loss_counts_unit_squares() {
        let ones = Tensor::ones(vec![3, 2, 2]);
        assert_eq!(reconstruction_loss(&ones, &Tensor::zeros(vec![3, 2, 2])).unwrap(), 12.0);
        assert_eq!(reconstruction_loss(&ones, &ones).unwrap(), 0.0);
        assert!(reconstruction_loss(&ones, &Tensor::zeros(vec![3, 4])).is_err());
    }

    #[test]
    fn empty_set_reconstructs_zero() {
        let set = ReconstructionSet {
            active_labels: vec![],
            maps: vec![],
        };
        assert_eq!(reconstruct(&set, &[3, 2, 2]).unwrap(), Tensor::zeros(vec![3, 2, 2]));
    }
}
