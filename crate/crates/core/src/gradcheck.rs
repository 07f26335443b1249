//! Central finite-difference verification of recorded gradients.
//!
//! A checked function maps input tensors to an output of any shape. The output
//! is projected onto a fixed random direction `r`, so the scalar under test is
//! `L = Σ r ⊙ out`. Analytic gradients come from [`Tape::backward`]; numerical
//! ones from `(L(x + h) − L(x − h)) / 2h`, with `L` accumulated in `f64`.
//!
//! Perturbations that move any ReLU input across zero do not measure the
//! recorded derivative. Such elements are retried with a quarter of the step,
//! twice, and skipped if they still cross; a check with more skipped than
//! measured elements fails.
//!
//! The per-element error is `|a − n| / max(|a|, |n|, 0.1·max|a|, 1e-6)`: the
//! floor keeps entries that are tiny relative to the rest of the gradient from
//! dividing `f32` rounding noise by almost nothing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{self, Tape, Var};
use crate::capsule::{self, RoutingMode};
use crate::decoder;
use crate::error::{Error, Result};
use crate::kernels::{Conv2dSpec, Reduction};
use crate::model::{ArchitectureConfig, BoundParams, CapsNetParams, DecoderSpec, LayerSpec, PrimaryCapsSpec};
use crate::taxonomy::NUM_CLASSES;
use crate::tensor::Tensor;
use crate::training::margin_loss_on_tape;
use crate::training::LossConfig;

type TapeFn<'f> = dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var> + 'f;

pub const DEFAULT_STEP: f32 = 1e-3;
pub const DEFAULT_TOLERANCE: f32 = 1e-2;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f32,
    pub tolerance: f32,
    pub passed: bool,
    /// Number of scalar inputs compared.
    pub checked: usize,
    /// Elements left out because every step crossed a ReLU kink.
    pub skipped: usize,
}

impl GradCheckReport {
    fn new(op_name: &str, max_rel_error: f32, tolerance: f32, checked: usize, skipped: usize) -> Self {
        Self {
            op_name: op_name.to_string(),
            max_rel_error,
            tolerance,
            passed: max_rel_error <= tolerance && checked > 0 && skipped <= checked,
            checked,
            skipped,
        }
    }
}

/// Per-element relative error with the floor described in the module docs.
pub fn relative_errors(analytic: &[f32], numeric: &[f32]) -> Vec<f32> {
    let scale = analytic.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let floor = (0.1 * scale).max(1e-6);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect()
}

/// Which inputs are perturbed; `None` means every element.
pub type Selection = Option<Vec<usize>>;

pub struct GradCheck<'f> {
    name: String,
    inputs: Vec<Tensor>,
    /// Inputs that are differentiated; others are passed as constants.
    differentiate: Vec<bool>,
    selection: Vec<Selection>,
    func: Box<TapeFn<'f>>,
    step: f32,
    tolerance: f32,
    seed: u64,
}

impl<'f> GradCheck<'f> {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        func: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var> + 'f,
    ) -> Self {
        let n = inputs.len();
        Self {
            name: name.into(),
            inputs,
            differentiate: vec![true; n],
            selection: vec![None; n],
            func: Box::new(func),
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0x5eed,
        }
    }

    /// Only differentiate the listed inputs.
    pub fn only(mut self, which: &[usize]) -> Self {
        for (i, d) in self.differentiate.iter_mut().enumerate() {
            *d = which.contains(&i);
        }
        self
    }

    /// Restrict perturbation of input `which` to the given element indices.
    pub fn select(mut self, which: usize, elements: Vec<usize>) -> Self {
        self.selection[which] = Some(elements);
        self
    }

    pub fn step(mut self, step: f32) -> Self {
        self.step = step;
        self
    }

    pub fn tolerance(mut self, tol: f32) -> Self {
        self.tolerance = tol;
        self
    }

    fn eval(&self, inputs: &[Tensor], projection: &Tensor) -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t, false)).collect();
        let out = (self.func)(&mut tape, &vars)?;
        Ok((tape.value(out)?.dot(projection)?, tape.kink_pattern()))
    }

    pub fn run(&self) -> Result<GradCheckReport> {
        // analytic pass
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .zip(&self.differentiate)
            .map(|(t, &d)| tape.param(t, d))
            .collect();
        let out = (self.func)(&mut tape, &vars)?;
        let out_shape = tape.value(out)?.shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let projection = Tensor::uniform(out_shape, -1.0, 1.0, &mut rng);
        let r = tape.constant(projection.clone());
        let weighted = tape.hadamard(out, r)?;
        let loss = tape.sum_all(weighted)?;
        let grads = tape.backward(loss)?;
        let pattern = tape.kink_pattern();
        let analytic: Vec<Tensor> = vars
            .iter()
            .map(|&v| grads.get_or_zeros(&tape, v))
            .collect::<Result<_>>()?;
        drop(tape);

        let mut worst = 0.0f32;
        let (mut checked, mut skipped) = (0, 0);
        let mut perturbed = self.inputs.clone();
        for (i, input) in self.inputs.iter().enumerate() {
            if !self.differentiate[i] {
                continue;
            }
            let indices: Vec<usize> = match &self.selection[i] {
                Some(sel) => sel.clone(),
                None => (0..input.len()).collect(),
            };
            let mut a = Vec::with_capacity(indices.len());
            let mut n = Vec::with_capacity(indices.len());
            for &k in &indices {
                if k >= input.len() {
                    return Err(Error::invalid("gradcheck", format!("element {} out of range", k)));
                }
                let x = input.data()[k];
                let mut step = self.step;
                let mut numeric = None;
                for _ in 0..3 {
                    let (hi, lo) = (x + step, x - step);
                    perturbed[i].data_mut()[k] = hi;
                    let (f_hi, p_hi) = self.eval(&perturbed, &projection)?;
                    perturbed[i].data_mut()[k] = lo;
                    let (f_lo, p_lo) = self.eval(&perturbed, &projection)?;
                    perturbed[i].data_mut()[k] = x;
                    if p_hi == pattern && p_lo == pattern {
                        numeric = Some(((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32);
                        break;
                    }
                    step /= 4.0;
                }
                match numeric {
                    Some(v) => {
                        n.push(v);
                        a.push(analytic[i].data()[k]);
                    }
                    None => skipped += 1,
                }
            }
            checked += n.len();
            let errs = relative_errors(&a, &n);
            if let Some(e) = errs.iter().copied().reduce(f32::max) {
                if !e.is_finite() {
                    return Err(Error::Numeric(format!("{}: non-finite gradient error", self.name)));
                }
                worst = worst.max(e);
            }
        }
        Ok(GradCheckReport::new(
            &self.name,
            worst,
            self.tolerance,
            checked,
            skipped,
        ))
    }
}

/// Deterministic random tensor for check instances.
pub fn random_input(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape.to_vec(), lo, hi, &mut rng)
}

/// Keeps values at least `gap` away from zero so ReLU kinks are not straddled.
fn away_from_zero(t: Tensor, gap: f32) -> Tensor {
    t.map(|v| if v < 0.0 { v - gap } else { v + gap })
}

fn bound_from(vars: &[Var], convs: usize, deconvs: usize) -> BoundParams {
    let pair = |k: usize| (vars[k], vars[k + 1]);
    let conv = (0..convs).map(|i| pair(2 * i)).collect();
    let p = 2 * convs;
    let deconv = (0..deconvs).map(|i| pair(p + 5 + 2 * i)).collect();
    BoundParams {
        conv,
        primary: pair(p),
        routing: vars[p + 2],
        dense: pair(p + 3),
        deconv,
    }
}

/// 8×8 input with a two-layer decoder from a 2×4×4 base.
fn micro_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        input_size: 8,
        input_channels: 3,
        conv: vec![LayerSpec::new(4, 3, 1, 0)],
        primary: PrimaryCapsSpec {
            kernel: 3,
            stride: 1,
            padding: 0,
            types: 2,
            dim: 4,
        },
        num_classes: NUM_CLASSES,
        digit_dim: 4,
        routing_iterations: 1,
        decoder: DecoderSpec {
            base_channels: 2,
            base_size: 4,
            layers: vec![LayerSpec::new(4, 3, 1, 1), LayerSpec::new(3, 4, 2, 1)],
        },
        routing_init_std: 0.05,
    }
}

/// Evenly spread element indices, at most `n` of them.
fn spread(len: usize, n: usize) -> Vec<usize> {
    let n = n.min(len);
    (0..n).map(|k| k * len / n).collect()
}

/// Checks every differentiable operation, ending with the decoder and the
/// full score path on the reduced 34×34 geometry.
pub fn standard_suite() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let r = random_input;
    out.push(
        GradCheck::new(
            "conv2d",
            vec![r(&[2, 7, 7], -1.0, 1.0, 1), r(&[3, 2, 3, 3], -1.0, 1.0, 2)],
            |t, v| t.conv2d(v[0], v[1], Conv2dSpec::new(2, 1)),
        )
        .run()?,
    );
    out.push(
        GradCheck::new(
            "transposed_conv2d",
            vec![r(&[2, 4, 4], -1.0, 1.0, 3), r(&[2, 3, 4, 4], -1.0, 1.0, 4)],
            |t, v| t.transposed_conv2d(v[0], v[1], Conv2dSpec::new(2, 1)),
        )
        .run()?,
    );
    out.push(
        GradCheck::new(
            "add_channel_bias",
            vec![r(&[3, 4, 5], -1.0, 1.0, 5), r(&[3], -1.0, 1.0, 6)],
            |t, v| t.add_channel_bias(v[0], v[1]),
        )
        .run()?,
    );
    out.push(
        GradCheck::new(
            "linear",
            vec![r(&[4, 6], -1.0, 1.0, 7), r(&[6], -1.0, 1.0, 8)],
            |t, v| t.linear(v[0], v[1]),
        )
        .run()?,
    );
    out.push(
        GradCheck::new("relu", vec![away_from_zero(r(&[4, 5], -1.0, 1.0, 9), 0.05)], |t, v| {
            t.relu(v[0])
        })
        .run()?,
    );
    out.push(GradCheck::new("sigmoid", vec![r(&[4, 5], -3.0, 3.0, 10)], |t, v| t.sigmoid(v[0])).run()?);
    out.push(
        GradCheck::new("scale_shift", vec![r(&[7], -1.0, 1.0, 11)], |t, v| {
            t.scale_shift(v[0], -1.5, 0.3)
        })
        .run()?,
    );
    out.push(
        GradCheck::new(
            "add_sub_hadamard",
            vec![r(&[3, 4], -1.0, 1.0, 12), r(&[3, 4], -1.0, 1.0, 13)],
            |t, v| {
                let a = t.add(v[0], v[1])?;
                let s = t.sub(v[0], v[1])?;
                t.hadamard(a, s)
            },
        )
        .run()?,
    );
    out.push(GradCheck::new("softmax", vec![r(&[5, 4], -2.0, 2.0, 14)], |t, v| t.softmax(v[0], 1)).run()?);
    for (name, kind) in [
        ("reduce_sum", Reduction::Sum),
        ("reduce_mean", Reduction::Mean),
        ("reduce_max", Reduction::Max),
    ] {
        out.push(
            GradCheck::new(name, vec![r(&[3, 4, 5], -1.0, 1.0, 15)], move |t, v| {
                t.reduce(v[0], kind, &[0, 2])
            })
            .run()?,
        );
    }
    out.push(GradCheck::new("l2_norm", vec![r(&[6, 4], -1.0, 1.0, 16)], |t, v| t.l2_norm(v[0], 1)).run()?);
    out.push(
        GradCheck::new("reshape_permute", vec![r(&[2, 3, 4], -1.0, 1.0, 17)], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            t.reshape(p, &[4, 6])
        })
        .run()?,
    );
    out.push(
        GradCheck::new("gaussian_blur2d", vec![r(&[9, 8], 0.0, 1.0, 18)], |t, v| {
            t.gaussian_blur2d(v[0], 1.5)
        })
        .run()?,
    );
    out.push(GradCheck::new("squash", vec![r(&[5, 4], -1.0, 1.0, 19)], |t, v| t.squash(v[0])).run()?);
    out.push(
        GradCheck::new(
            "predict_uhat",
            vec![r(&[6, 4], -1.0, 1.0, 20), r(&[6, 3, 4, 5], -1.0, 1.0, 21)],
            |t, v| t.predict_uhat(v[0], v[1]),
        )
        .run()?,
    );

    // routing final layer: coupling from three routed iterations, held fixed
    let (u, w) = (r(&[12, 4], -1.0, 1.0, 22), r(&[12, 5, 4, 6], -0.5, 0.5, 23));
    let (_, state) = capsule::route(&autodiff::predict_uhat(&u, &w)?, 3)?;
    let frozen = RoutingMode::Frozen(state.c);
    out.push(
        GradCheck::new("routing_final_layer", vec![u, w], move |t, v| {
            Ok(capsule::digit_capsules(t, v[0], v[1], &frozen)?.scores)
        })
        .run()?,
    );

    // margin loss, with scores kept clear of both hinges
    let loss = LossConfig::default();
    let scores = r(&[NUM_CLASSES], 0.0, 1.0, 24).map(|s| {
        if (s - loss.m_plus).abs() < 0.02 || (s - loss.m_minus).abs() < 0.02 {
            s + 0.05
        } else {
            s
        }
    });
    let targets = Tensor::from_fn(vec![NUM_CLASSES], |k| (k % 3 == 0) as u8 as f32);
    out.push(
        GradCheck::new("margin_loss", vec![scores], move |t, v| {
            margin_loss_on_tape(t, v[0], &targets, &loss)
        })
        .tolerance(1e-3)
        .run()?,
    );

    let arch = ArchitectureConfig::tiny();
    let params = CapsNetParams::init(&arch, 3)?;
    let (convs, deconvs) = (arch.conv.len(), arch.decoder.layers.len());
    // a generic point: fresh init has zero biases, which parks units exactly
    // on ReLU kinks, and routing weights small enough to flatten squash
    let mut inputs: Vec<Tensor> = params
        .named_blocks()
        .into_iter()
        .enumerate()
        .map(|(k, (name, t))| match name.as_str() {
            n if n.ends_with(".bias") => r(t.shape(), -0.1, 0.1, 100 + k as u64),
            "routing.weight" => t.scale(10.0),
            _ => t.clone(),
        })
        .collect();
    let nblocks = inputs.len();
    let dense_w = 2 * convs + 3;

    // decoder weights at the 34×34 geometry
    let deconv0 = 2 * convs + 5;
    let mut dec_inputs = inputs.clone();
    dec_inputs.push(r(&[arch.num_classes, arch.digit_dim], -0.3, 0.3, 25));
    let target = r(&arch.image_shape(), 0.0, 1.0, 26);
    let arch_d = arch.clone();
    out.push(
        GradCheck::new("decoder_weights_34x34", dec_inputs, move |t, v| {
            let bound = bound_from(v, convs, deconvs);
            let rec = decoder::decode_on_tape(t, &arch_d, &bound, v[nblocks], 2)?;
            let goal = t.constant(target.clone());
            t.sub(rec, goal)
        })
        .step(1e-2)
        .only(&[dense_w, deconv0])
        .select(dense_w, spread(inputs[dense_w].len(), 40))
        .select(deconv0, spread(inputs[deconv0].len(), 40))
        .run()?,
    );

    // decoder input: every ReLU downstream of v moves with it, so this uses
    // a small geometry where a clean step exists
    let micro = micro_arch();
    let mut micro_inputs: Vec<Tensor> = CapsNetParams::init(&micro, 5)?
        .named_blocks()
        .into_iter()
        .enumerate()
        .map(|(k, (name, t))| match name.ends_with(".bias") {
            true => r(t.shape(), -0.1, 0.1, 200 + k as u64),
            false => t.clone(),
        })
        .collect();
    let micro_n = micro_inputs.len();
    micro_inputs.push(r(&[micro.num_classes, micro.digit_dim], -0.5, 0.5, 28));
    let (mc, md) = (micro.conv.len(), micro.decoder.layers.len());
    let label = 2;
    let v_sel = (label * micro.digit_dim..(label + 1) * micro.digit_dim).collect();
    out.push(
        GradCheck::new("decoder_capsules", micro_inputs, move |t, v| {
            let bound = bound_from(v, mc, md);
            decoder::decode_on_tape(t, &micro, &bound, v[micro_n], label)
        })
        .only(&[micro_n])
        .select(micro_n, v_sel)
        .run()?,
    );

    // full score path: image → convs → primary capsules → one routing pass
    inputs.push(r(&arch.image_shape(), 0.0, 1.0, 27));
    let select_img = spread(inputs[nblocks].len(), 40);
    let select_conv = spread(inputs[0].len(), 40);
    let select_routing = spread(inputs[2 * convs + 2].len(), 40);
    out.push(
        GradCheck::new("score_path_34x34", inputs, move |t, v| {
            let bound = bound_from(v, convs, deconvs);
            Ok(capsule::forward(t, &arch, &bound, v[nblocks], &RoutingMode::Dynamic(1))?.scores)
        })
        .step(1e-2)
        .only(&[0, 2 * convs + 2, nblocks])
        .select(0, select_conv)
        .select(2 * convs + 2, select_routing)
        .select(nblocks, select_img)
        .run()?,
    );
    Ok(out)
}

/// Fixed-width table of reports.
pub fn format_reports(reports: &[GradCheckReport]) -> String {
    let mut s = format!(
        "{:<22} {:>8} {:>8} {:>12} {:>10}  {}\n",
        "op", "checked", "skipped", "max_rel_err", "tolerance", "result"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<22} {:>8} {:>8} {:>12.3e} {:>10.0e}  {}\n",
            r.op_name,
            r.checked,
            r.skipped,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        let e = relative_errors(&[1.0, 0.0], &[1.0, 1e-4]);
        assert_eq!(e[0], 0.0);
        assert!((e[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x ⊙ stop_gradient(x): the tape sees x, the true derivative is 2x.
        let x = random_input(&[6], 0.5, 1.0, 1);
        let report = GradCheck::new("detached", vec![x], |t, v| {
            let c = t.constant(t.value(v[0])?.clone());
            t.hadamard(v[0], c)
        })
        .run()
        .unwrap();
        assert!(!report.passed, "{:?}", report);
    }

    #[test]
    fn passes_for_a_correct_gradient() {
        let x = random_input(&[3, 4], -1.0, 1.0, 2);
        let report = GradCheck::new("square", vec![x], |t, v| t.hadamard(v[0], v[0]))
            .run()
            .unwrap();
        assert!(report.passed, "{:?}", report);
        assert_eq!(report.checked, 12);
    }

    #[test]
    fn standard_suite_passes() {
        let reports = standard_suite().unwrap();
        assert!(reports.iter().all(|r| r.passed), "{}", format_reports(&reports));
    }
}
