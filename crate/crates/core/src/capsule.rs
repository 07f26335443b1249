//! Capsule layers and routing-by-agreement.

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dSpec};
use crate::model::{ArchitectureConfig, BoundParams, CapsNetParams};
use crate::tensor::Tensor;

pub use crate::autodiff::{predict_uhat, squash};

/// Routing logits, coupling coefficients and agreements, each `[N, J]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    pub b: Tensor,
    pub c: Tensor,
    pub a: Tensor,
}

/// How the coupling coefficients of a forward pass are obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum RoutingMode {
    Dynamic(usize),
    /// Use the given `[N, J]` coupling directly (no routing loop).
    Frozen(Tensor),
}

/// Row-softmax coupling, weighted sums, squash and agreement update, repeated
/// `iterations` times starting from `b = 0`. The logits are not updated after
/// the final iteration.
pub fn route(uhat: &Tensor, iterations: usize) -> Result<(Tensor, RoutingState)> {
    route_trace(uhat, iterations, |_| {})
}

/// [`route`] that also reports the state after every iteration.
pub fn route_trace(
    uhat: &Tensor,
    iterations: usize,
    mut observe: impl FnMut(&RoutingState),
) -> Result<(Tensor, RoutingState)> {
    if iterations == 0 {
        return Err(Error::invalid("route", "iterations must be at least 1"));
    }
    if uhat.rank() != 3 {
        return Err(Error::shape(
            "route",
            format!("û must be [N, J, D], got {:?}", uhat.shape()),
        ));
    }
    let (n, j, d) = (uhat.shape()[0], uhat.shape()[1], uhat.shape()[2]);
    let mut b = Tensor::zeros(vec![n, j]);
    let mut v = Tensor::zeros(vec![j, d]);
    let mut c = Tensor::zeros(vec![n, j]);
    let mut a = Tensor::zeros(vec![n, j]);
    for it in 0..iterations {
        c = kernels::softmax(&b, 1)?;
        v = squash(&autodiff::coupled_sum(uhat, &c)?)?;
        a = agreement(uhat, &v);
        let last = it + 1 == iterations;
        if !last {
            b.add_assign(&a)?;
        }
        observe(&RoutingState {
            b: b.clone(),
            c: c.clone(),
            a: a.clone(),
        });
    }
    Ok((v, RoutingState { b, c, a }))
}

/// `a[i, j] = v[j] · û[i, j]`.
fn agreement(uhat: &Tensor, v: &Tensor) -> Tensor {
    let (n, j, d) = (uhat.shape()[0], uhat.shape()[1], uhat.shape()[2]);
    let (u, vd) = (uhat.data(), v.data());
    Tensor::from_fn(vec![n, j], |k| {
        let col = k % j;
        u[k * d..(k + 1) * d]
            .iter()
            .zip(&vd[col * d..(col + 1) * d])
            .map(|(x, y)| x * y)
            .sum()
    })
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct CapsuleTensors {
    /// Primary capsules `[N, P]`.
    pub u: Tensor,
    /// Prediction vectors `[N, J, D]`.
    pub uhat: Tensor,
    pub s: Tensor,
    /// Digit capsules `[J, D]`.
    pub v: Tensor,
    /// `‖v_j‖`, `[J]`.
    pub scores: Tensor,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub u: Var,
    pub uhat: Var,
    pub s: Var,
    pub v: Var,
    pub scores: Var,
    pub state: RoutingState,
}

impl ForwardVars {
    pub fn capsules(&self, tape: &Tape<'_>) -> Result<CapsuleTensors> {
        Ok(CapsuleTensors {
            u: tape.value(self.u)?.clone(),
            uhat: tape.value(self.uhat)?.clone(),
            s: tape.value(self.s)?.clone(),
            v: tape.value(self.v)?.clone(),
            scores: tape.value(self.scores)?.clone(),
        })
    }
}

/// Feature maps through the primary capsules: `[types·G·G, dim]`, squashed.
pub fn primary_capsules(
    tape: &mut Tape<'_>,
    arch: &ArchitectureConfig,
    params: &BoundParams,
    image: Var,
) -> Result<Var> {
    let shape = tape.value(image)?.shape().to_vec();
    if shape != arch.image_shape() {
        return Err(Error::shape(
            "forward",
            format!("image must be {:?}, got {:?}", arch.image_shape(), shape),
        ));
    }
    let mut x = image;
    for (spec, &(w, b)) in arch.conv.iter().zip(&params.conv) {
        x = tape.conv2d(x, w, spec.conv_spec())?;
        x = tape.add_channel_bias(x, b)?;
        x = tape.relu(x)?;
    }
    let p = &arch.primary;
    x = tape.conv2d(x, params.primary.0, Conv2dSpec::new(p.stride, p.padding))?;
    x = tape.add_channel_bias(x, params.primary.1)?;
    let g = tape.value(x)?.shape()[1];
    x = tape.reshape(x, &[p.types, p.dim, g, g])?;
    x = tape.permute(x, &[0, 2, 3, 1])?;
    x = tape.reshape(x, &[p.types * g * g, p.dim])?;
    tape.squash(x)
}

/// Digit capsules and class scores from primary capsules.
pub fn digit_capsules(tape: &mut Tape<'_>, u: Var, weights: Var, mode: &RoutingMode) -> Result<ForwardVars> {
    let uhat = tape.predict_uhat(u, weights)?;
    let state = match mode {
        RoutingMode::Dynamic(iterations) => route(tape.value(uhat)?, *iterations)?.1,
        RoutingMode::Frozen(c) => {
            let uv = tape.value(uhat)?;
            let v = squash(&autodiff::coupled_sum(uv, c)?)?;
            RoutingState {
                b: Tensor::zeros(c.shape().to_vec()),
                c: c.clone(),
                a: agreement(uv, &v),
            }
        }
    };
    let s = tape.coupled_sum(uhat, state.c.clone())?;
    let v = tape.squash(s)?;
    let scores = tape.l2_norm(v, 1)?;
    Ok(ForwardVars {
        u,
        uhat,
        s,
        v,
        scores,
        state,
    })
}

/// Full classification pass recorded on `tape`.
pub fn forward(
    tape: &mut Tape<'_>,
    arch: &ArchitectureConfig,
    params: &BoundParams,
    image: Var,
    mode: &RoutingMode,
) -> Result<ForwardVars> {
    let u = primary_capsules(tape, arch, params, image)?;
    digit_capsules(tape, u, params.routing, mode)
}

/// Class scores, capsule values and routing state for one image.
pub fn forward_classify(image: &Tensor, params: &CapsNetParams) -> Result<(Tensor, CapsuleTensors, RoutingState)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.param(image, false);
    let out = forward(
        &mut tape,
        &params.arch,
        &bound,
        x,
        &RoutingMode::Dynamic(params.arch.routing_iterations),
    )?;
    let caps = out.capsules(&tape)?;
    Ok((caps.scores.clone(), caps, out.state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn norm(v: &[f32]) -> f32 {
        v.iter().map(|x| x * x).sum::<f32>().sqrt()
    }

    #[test]
    fn squash_analytic_norms() {
        let s = Tensor::new(vec![3, 2], vec![0.0, 0.0, 0.6, 0.8, 6.0, 8.0]).unwrap();
        let v = squash(&s).unwrap();
        assert_eq!(&v.data()[..2], &[0.0, 0.0]);
        assert!((norm(&v.data()[2..4]) - 0.5).abs() < 1e-6);
        assert!((norm(&v.data()[4..6]) - 100.0 / 101.0).abs() < 1e-6);
    }

    #[test]
    fn uhat_identity_blocks_copy_u() {
        let (n, j, p) = (3, 2, 4);
        let u = Tensor::from_fn(vec![n, p], |i| i as f32 * 0.1 - 0.3);
        let w = Tensor::from_fn(vec![n, j, p, p], |k| {
            let (a, d) = ((k / p) % p, k % p);
            if a == d {
                1.0
            } else {
                0.0
            }
        });
        let uhat = predict_uhat(&u, &w).unwrap();
        for i in 0..n {
            for c in 0..j {
                let got = &uhat.data()[(i * j + c) * p..(i * j + c + 1) * p];
                assert_eq!(got, &u.data()[i * p..(i + 1) * p]);
            }
        }
        assert!(predict_uhat(&Tensor::zeros(vec![n, p + 1]), &w).is_err());
    }

    #[test]
    fn single_iteration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let uhat = Tensor::randn(vec![5, 27, 4], 1.0, &mut rng);
        let (_, state) = route(&uhat, 1).unwrap();
        assert!(state.c.data().iter().all(|&c| (c - 1.0 / 27.0).abs() < 1e-7));
        assert!(route(&uhat, 0).is_err());
    }

    #[test]
    fn zero_image_scores_are_equal() {
        let arch = ArchitectureConfig::tiny();
        let params = CapsNetParams::init(&arch, 5).unwrap();
        let (scores, _, _) = forward_classify(&Tensor::zeros(arch.image_shape().to_vec()), &params).unwrap();
        let first = scores.data()[0];
        assert!(scores.data().iter().all(|&s| s == first));
        let bad = Tensor::zeros(vec![3, 33, 34]);
        assert!(forward_classify(&bad, &params).is_err());
    }
}
