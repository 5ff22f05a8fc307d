//! Network components: anatomy encoder, style encoder and FiLM decoder.

mod anatomy;
mod blocks;
mod decoder;
pub mod engine;
mod model;
mod style;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use anatomy::AnatomyEncoder;
pub use blocks::{AttentionGate, ResBlock};
pub use decoder::Decoder;
pub use model::{Forward, LayerNet, Mode, SegmentationPass};
pub use style::StyleEncoder;

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.values[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.values[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn leaf(&self, tape: &mut Tape, index: usize) -> NodeId {
        tape.param(index, self.values[index].clone())
    }

    /// Replaces every tensor by name; shapes must match.
    pub fn load_from(&mut self, named: impl IntoIterator<Item = (String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, value) in named {
            let idx = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if self.values[idx].shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    self.values[idx].shape(),
                    value.shape()
                )));
            }
            self.values[idx] = value;
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` missing",
                self.names[missing]
            )));
        }
        Ok(())
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-uniform: `U(−b, b)` with `b = gain·√(3 / fan_in)`.
    pub fn uniform(&mut self, shape: &[usize], fan_in: usize, gain: f32) -> Tensor {
        let bound = gain * (3.0 / fan_in as f32).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init.uniform(&[c_out, c_in, kernel, kernel], fan_in, 2f32.sqrt()),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = store.leaf(tape, self.weight);
        let b = store.leaf(tape, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f32,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.uniform(&[d_out, d_in], d_in, gain),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([d_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = store.leaf(tape, self.weight);
        let b = store.leaf(tape, self.bias);
        tape.linear(x, w, b)
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }
}

/// Per-channel PReLU slopes, initialized to 0.25.
#[derive(Clone, Copy, Debug)]
pub struct PRelu {
    alpha: usize,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let alpha = store.add(format!("{name}.alpha"), Tensor::filled([channels], 0.25));
        Self { alpha }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let a = store.leaf(tape, self.alpha);
        tape.prelu(x, a)
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub surfaces: usize,
    /// Number of down/up-sampling stages of the anatomy encoder.
    pub stages: usize,
    pub base_channels: usize,
    pub attention: bool,
    /// Adds the sigmoid texture channel to the anatomical factors.
    pub texture_head: bool,
    pub style_dim: usize,
    /// Feeds the binarized factors to the style encoder next to the image.
    pub style_uses_factors: bool,
    pub decoder_channels: usize,
    pub film_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            surfaces: 4,
            stages: 3,
            base_channels: 16,
            attention: true,
            texture_head: true,
            style_dim: 8,
            style_uses_factors: true,
            decoder_channels: 16,
            film_hidden: 32,
        }
    }
}

/// Number of FiLM-modulated blocks in the decoder.
pub const FILM_BLOCKS: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.surfaces == 0 {
            return Err(Error::Config("model needs at least one surface".into()));
        }
        if self.stages == 0
            || self.base_channels == 0
            || self.style_dim == 0
            || self.decoder_channels == 0
        {
            return Err(Error::Config(
                "stages, base_channels, style_dim and decoder_channels must be positive".into(),
            ));
        }
        let div = 1usize << self.stages;
        if !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by 2^{} = {div}",
                self.height, self.width, self.stages
            )));
        }
        // the style encoder downsamples three times
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("image must be at least 8x8".into()));
        }
        Ok(())
    }

    /// Anatomical factor channels fed to the decoder.
    pub fn factor_channels(&self) -> usize {
        self.surfaces + usize::from(self.texture_head)
    }
}
