//! Network topology and learnable parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Conv2dSpec;
use crate::tensor::Tensor;

/// One convolution (or transposed convolution) layer with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn conv_spec(&self) -> Conv2dSpec {
        Conv2dSpec::new(self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryCapsSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Number of capsule types (channel groups).
    pub types: usize,
    /// Dimension of each primary capsule.
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    /// The dense layer reshapes its output to `[base_channels, base_size, base_size]`.
    pub base_channels: usize,
    pub base_size: usize,
    /// Transposed-convolution layers; the last one must produce the image channels.
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub conv: Vec<LayerSpec>,
    pub primary: PrimaryCapsSpec,
    pub num_classes: usize,
    pub digit_dim: usize,
    pub routing_iterations: usize,
    pub decoder: DecoderSpec,
    /// Standard deviation of the routing weight initialization.
    pub routing_init_std: f32,
}

impl Default for ArchitectureConfig {
    /// 272² RGB input, three stride-2 3×3 convolutions (272→135→67→33), a 9×9
    /// stride-1 pad-1 primary capsule layer giving a 27×27 grid of 32 types of
    /// 8-D capsules, 27 digit capsules of dimension 16 and a four-layer
    /// transposed-convolution decoder (17→34→68→136→272).
    fn default() -> Self {
        Self {
            input_size: 272,
            input_channels: 3,
            conv: vec![
                LayerSpec::new(64, 3, 2, 0),
                LayerSpec::new(128, 3, 2, 0),
                LayerSpec::new(256, 3, 2, 0),
            ],
            primary: PrimaryCapsSpec {
                kernel: 9,
                stride: 1,
                padding: 1,
                types: 32,
                dim: 8,
            },
            num_classes: crate::taxonomy::NUM_CLASSES,
            digit_dim: 16,
            routing_iterations: 3,
            decoder: DecoderSpec {
                base_channels: 256,
                base_size: 17,
                layers: vec![
                    LayerSpec::new(128, 4, 2, 1),
                    LayerSpec::new(64, 4, 2, 1),
                    LayerSpec::new(32, 4, 2, 1),
                    LayerSpec::new(3, 4, 2, 1),
                ],
            },
            routing_init_std: 0.05,
        }
    }
}

/// Spatial extents implied by an [`ArchitectureConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub conv_sizes: Vec<usize>,
    pub primary_grid: usize,
    pub num_primary: usize,
    pub decoder_sizes: Vec<usize>,
}

impl ArchitectureConfig {
    pub fn geometry(&self) -> Result<Geometry> {
        const OP: &str = "architecture";
        if self.input_size == 0 || self.input_channels == 0 {
            return Err(Error::invalid(OP, "empty input"));
        }
        if self.routing_iterations == 0 {
            return Err(Error::invalid(OP, "routing_iterations must be at least 1"));
        }
        if self.num_classes == 0 || self.digit_dim == 0 || self.primary.types == 0 || self.primary.dim == 0 {
            return Err(Error::invalid(OP, "capsule counts and dimensions must be positive"));
        }
        let mut size = self.input_size;
        let mut conv_sizes = Vec::with_capacity(self.conv.len());
        for l in &self.conv {
            size = l.conv_spec().conv_out([size, size], [l.kernel, l.kernel])?[0];
            conv_sizes.push(size);
        }
        let p = &self.primary;
        let grid = Conv2dSpec::new(p.stride, p.padding).conv_out([size, size], [p.kernel, p.kernel])?[0];
        let mut size = self.decoder.base_size;
        let mut decoder_sizes = Vec::with_capacity(self.decoder.layers.len());
        for l in &self.decoder.layers {
            size = l.conv_spec().transposed_out([size, size], [l.kernel, l.kernel])?[0];
            decoder_sizes.push(size);
        }
        let out_channels = self
            .decoder
            .layers
            .last()
            .map_or(self.decoder.base_channels, |l| l.channels);
        if size != self.input_size || out_channels != self.input_channels {
            return Err(Error::invalid(
                OP,
                format!(
                    "decoder produces {}×{}×{} but the input is {}×{}×{}",
                    out_channels, size, size, self.input_channels, self.input_size, self.input_size
                ),
            ));
        }
        Ok(Geometry {
            conv_sizes,
            primary_grid: grid,
            num_primary: grid * grid * p.types,
            decoder_sizes,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_size, self.input_size]
    }

    /// Full 272×272 input and 27×27 capsule grid with narrow layers.
    pub fn compact() -> Self {
        let full = Self::default();
        Self {
            conv: vec![
                LayerSpec::new(8, 3, 2, 0),
                LayerSpec::new(16, 3, 2, 0),
                LayerSpec::new(16, 3, 2, 0),
            ],
            primary: PrimaryCapsSpec {
                types: 8,
                ..full.primary
            },
            decoder: DecoderSpec {
                base_channels: 8,
                layers: vec![
                    LayerSpec::new(8, 4, 2, 1),
                    LayerSpec::new(8, 4, 2, 1),
                    LayerSpec::new(4, 4, 2, 1),
                    LayerSpec::new(3, 4, 2, 1),
                ],
                ..full.decoder
            },
            ..full
        }
    }

    /// Reduced 34×34 geometry used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            input_size: 34,
            input_channels: 3,
            conv: vec![LayerSpec::new(4, 3, 2, 0), LayerSpec::new(6, 3, 1, 0)],
            primary: PrimaryCapsSpec {
                kernel: 9,
                stride: 2,
                padding: 0,
                types: 4,
                dim: 4,
            },
            num_classes: crate::taxonomy::NUM_CLASSES,
            digit_dim: 6,
            routing_iterations: 3,
            decoder: DecoderSpec {
                base_channels: 4,
                base_size: 17,
                layers: vec![
                    LayerSpec::new(4, 4, 2, 1),
                    LayerSpec::new(4, 3, 1, 1),
                    LayerSpec::new(4, 3, 1, 1),
                    LayerSpec::new(3, 3, 1, 1),
                ],
            },
            routing_init_std: 0.05,
        }
    }
}

/// Kernel and bias of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// `[base_channels·base_size², num_classes·digit_dim]`
    pub dense_weight: Tensor,
    pub dense_bias: Tensor,
    /// Transposed-convolution kernels `[C_in, C_out, k, k]` and biases `[C_out]`.
    pub layers: Vec<ConvParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapsNetParams {
    pub arch: ArchitectureConfig,
    pub conv: Vec<ConvParams>,
    pub primary: ConvParams,
    /// `W [num_primary, num_classes, primary_dim, digit_dim]`
    pub routing: Tensor,
    pub decoder: DecoderParams,
}

fn he(shape: Vec<usize>, fan_in: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in.max(1.0)).sqrt(), rng)
}

impl CapsNetParams {
    /// Fresh parameters: He fan-in scaling for every convolution and dense
    /// layer, zero biases, routing weights from `N(0, routing_init_std²)`.
    pub fn init(arch: &ArchitectureConfig, seed: u64) -> Result<Self> {
        let geo = arch.geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = arch.input_channels;
        let mut conv = Vec::with_capacity(arch.conv.len());
        for l in &arch.conv {
            let fan_in = (channels * l.kernel * l.kernel) as f32;
            conv.push(ConvParams {
                weight: he(vec![l.channels, channels, l.kernel, l.kernel], fan_in, &mut rng),
                bias: Tensor::zeros(vec![l.channels]),
            });
            channels = l.channels;
        }
        let p = &arch.primary;
        let primary_out = p.types * p.dim;
        let primary = ConvParams {
            weight: he(
                vec![primary_out, channels, p.kernel, p.kernel],
                (channels * p.kernel * p.kernel) as f32,
                &mut rng,
            ),
            bias: Tensor::zeros(vec![primary_out]),
        };
        let routing = Tensor::randn(
            vec![geo.num_primary, arch.num_classes, p.dim, arch.digit_dim],
            arch.routing_init_std,
            &mut rng,
        );
        let d = &arch.decoder;
        let dense_in = arch.num_classes * arch.digit_dim;
        let dense_out = d.base_channels * d.base_size * d.base_size;
        // only one capsule is non-zero at the decoder input
        let dense_weight = he(vec![dense_out, dense_in], arch.digit_dim as f32, &mut rng);
        let mut layers = Vec::with_capacity(d.layers.len());
        let mut channels = d.base_channels;
        for l in &d.layers {
            let taps = (l.kernel as f32 / l.stride as f32).powi(2);
            layers.push(ConvParams {
                weight: he(
                    vec![channels, l.channels, l.kernel, l.kernel],
                    channels as f32 * taps,
                    &mut rng,
                ),
                bias: Tensor::zeros(vec![l.channels]),
            });
            channels = l.channels;
        }
        Ok(Self {
            arch: arch.clone(),
            conv,
            primary,
            routing,
            decoder: DecoderParams {
                dense_weight,
                dense_bias: Tensor::zeros(vec![dense_out]),
                layers,
            },
        })
    }

    /// Every parameter block with a stable name, in a fixed order.
    pub fn named_blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            out.push((format!("conv{}.weight", i), &c.weight));
            out.push((format!("conv{}.bias", i), &c.bias));
        }
        out.push(("primary.weight".into(), &self.primary.weight));
        out.push(("primary.bias".into(), &self.primary.bias));
        out.push(("routing.weight".into(), &self.routing));
        out.push(("decoder.dense.weight".into(), &self.decoder.dense_weight));
        out.push(("decoder.dense.bias".into(), &self.decoder.dense_bias));
        for (i, c) in self.decoder.layers.iter().enumerate() {
            out.push((format!("decoder.deconv{}.weight", i), &c.weight));
            out.push((format!("decoder.deconv{}.bias", i), &c.bias));
        }
        out
    }

    /// Mutable view in the same order as [`named_blocks`](Self::named_blocks).
    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for c in &mut self.conv {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.primary.weight);
        out.push(&mut self.primary.bias);
        out.push(&mut self.routing);
        out.push(&mut self.decoder.dense_weight);
        out.push(&mut self.decoder.dense_bias);
        for c in &mut self.decoder.layers {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_blocks().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every block on `tape` as a borrowed leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, requires_grad: bool) -> BoundParams {
        let mut b = |t: &'a Tensor| tape.param(t, requires_grad);
        let conv = self.conv.iter().map(|c| (b(&c.weight), b(&c.bias))).collect();
        let primary = (b(&self.primary.weight), b(&self.primary.bias));
        let routing = b(&self.routing);
        let dense = (b(&self.decoder.dense_weight), b(&self.decoder.dense_bias));
        let deconv = self.decoder.layers.iter().map(|c| (b(&c.weight), b(&c.bias))).collect();
        BoundParams {
            conv,
            primary,
            routing,
            dense,
            deconv,
        }
    }

    /// Replaces every block with `f(name, block)`.
    pub fn try_map_blocks(&mut self, mut f: impl FnMut(&str, &mut Tensor) -> Result<()>) -> Result<()> {
        let names: Vec<String> = self.named_blocks().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(self.blocks_mut()) {
            f(name, t)?;
        }
        Ok(())
    }
}

/// Tape handles for every parameter block.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub conv: Vec<(Var, Var)>,
    pub primary: (Var, Var),
    pub routing: Var,
    pub dense: (Var, Var),
    pub deconv: Vec<(Var, Var)>,
}

impl BoundParams {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.conv {
            out.extend([w, b]);
        }
        out.extend([self.primary.0, self.primary.1, self.routing, self.dense.0, self.dense.1]);
        for &(w, b) in &self.deconv {
            out.extend([w, b]);
        }
        out
    }

    /// Gradients of every block, zero-filled where the loss does not reach,
    /// in [`CapsNetParams::named_blocks`] order.
    pub fn collect(&self, tape: &Tape<'_>, grads: &mut Gradients) -> Result<Vec<Tensor>> {
        self.vars()
            .into_iter()
            .map(|v| match grads.take(v) {
                Some(g) => Ok(g),
                None => Ok(Tensor::zeros(tape.value(v)?.shape().to_vec())),
            })
            .collect()
    }
}
