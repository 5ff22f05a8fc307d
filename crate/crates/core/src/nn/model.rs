use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{engine, AnatomyEncoder, Decoder, Init, ModelConfig, ParamStore, StyleEncoder};
use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topo::SurfaceCurveSet;

/// Training draws style noise from the given generator; inference uses the
/// style mean.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Inference,
}

/// Node handles of one forward pass; values live on `tape`.
pub struct Forward {
    pub tape: Tape,
    pub image: NodeId,
    pub logits: NodeId,
    pub probabilities: NodeId,
    pub raw_positions: NodeId,
    pub positions: NodeId,
    pub cumulative: NodeId,
    pub ordered: NodeId,
    pub layer_maps: NodeId,
    /// Soft texture channel, before binarization.
    pub texture: Option<NodeId>,
    /// Binarized factor stack `[N, F, H, W]`: layers then texture.
    pub factors: NodeId,
    pub style_mean: NodeId,
    pub style_logvar: NodeId,
    pub style_sample: NodeId,
    pub recon: NodeId,
}

impl Forward {
    pub fn positions_of(&self, n: usize) -> SurfaceCurveSet<f32> {
        engine::curves_of(self.tape.value(self.positions), n)
    }

    pub fn batch(&self) -> usize {
        self.tape.value(self.image).shape()[0]
    }
}

/// The full two-branch model.
pub struct LayerNet {
    cfg: ModelConfig,
    store: ParamStore,
    anatomy: AnatomyEncoder,
    style: StyleEncoder,
    decoder: Decoder,
}

/// Node handles of the anatomy branch and the engine.
#[derive(Clone, Copy, Debug)]
pub struct SegmentationPass {
    pub logits: NodeId,
    pub probabilities: NodeId,
    pub raw_positions: NodeId,
    pub positions: NodeId,
    pub cumulative: NodeId,
    pub ordered: NodeId,
    pub layer_maps: NodeId,
    pub texture: Option<NodeId>,
    pub factors: NodeId,
}

impl LayerNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init::new(seed);
        let anatomy = AnatomyEncoder::new(&mut store, &mut init, &cfg);
        let style = StyleEncoder::new(&mut store, &mut init, &cfg);
        let decoder = Decoder::new(&mut store, &mut init, &cfg);
        Ok(Self {
            cfg,
            store,
            anatomy,
            style,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn check_images(&self, images: &Tensor) -> Result<()> {
        let shape = images.shape();
        if shape.len() != 4
            || shape[1] != 1
            || shape[2] != self.cfg.height
            || shape[3] != self.cfg.width
        {
            return Err(Error::Shape(format!(
                "expected images [N, 1, {}, {}], got {shape:?}",
                self.cfg.height, self.cfg.width
            )));
        }
        images.check_finite("input image")
    }

    /// Anatomy encoder followed by the engine, up to the binarized factors.
    pub fn segment(&self, tape: &mut Tape, image: NodeId) -> Result<SegmentationPass> {
        let (logits, texture) = self.anatomy.forward(tape, &self.store, image);
        let probabilities = engine::softmax(tape, logits)?;
        let raw_positions = engine::expected_positions(tape, probabilities);
        let positions = engine::rectify(tape, raw_positions);
        let cumulative = engine::cumulative(tape, probabilities);
        let ordered = engine::enforce_ordering(tape, cumulative);
        let layer_maps = engine::decompose(tape, ordered)?;
        let hard_layers = engine::binarize(tape, layer_maps);
        let factors = match texture {
            Some(t) => {
                let hard_texture = engine::binarize(tape, t);
                tape.concat(hard_layers, hard_texture)
            }
            None => hard_layers,
        };
        Ok(SegmentationPass {
            logits,
            probabilities,
            raw_positions,
            positions,
            cumulative,
            ordered,
            layer_maps,
            texture,
            factors,
        })
    }

    /// Style statistics `(mean, logvar)` from the image and binarized factors.
    pub fn style_encode(
        &self,
        tape: &mut Tape,
        image: NodeId,
        factors: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let input = if self.cfg.style_uses_factors {
            let (ni, _, hi, wi) = tape.value(image).dims4();
            let (nf, cf, hf, wf) = tape.value(factors).dims4();
            if (ni, hi, wi) != (nf, hf, wf) || cf != self.cfg.factor_channels() {
                return Err(Error::Shape(format!(
                    "style input: image {:?} vs factors {:?}",
                    tape.value(image).shape(),
                    tape.value(factors).shape()
                )));
            }
            tape.concat(image, factors)
        } else {
            image
        };
        Ok(self.style.forward(tape, &self.store, input))
    }

    /// `mean + exp(½·logvar)·noise` in training, `mean` at inference.
    pub fn style_sample(tape: &mut Tape, mean: NodeId, logvar: NodeId, mode: Mode<'_>) -> NodeId {
        match mode {
            Mode::Train(rng) => {
                let numel = tape.value(mean).numel();
                let noise: Vec<f32> = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
                tape.reparameterize(mean, logvar, noise)
            }
            Mode::Inference => mean,
        }
    }

    pub fn decode(&self, tape: &mut Tape, factors: NodeId, style: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = tape.value(factors).dims4();
        let style_shape = tape.value(style).shape();
        if c != self.cfg.factor_channels() || style_shape != [n, self.cfg.style_dim] {
            return Err(Error::Shape(format!(
                "decoder input: factors [{n}, {c}, {h}, {w}], style {style_shape:?}"
            )));
        }
        Ok(self.decoder.forward(tape, &self.store, factors, style))
    }

    /// FiLM `(gamma, beta)` per decoder block for the given style codes.
    pub fn film_params(&self, tape: &mut Tape, style: NodeId) -> Vec<(NodeId, NodeId)> {
        self.decoder.film_params(tape, &self.store, style)
    }

    pub fn forward(&self, images: &Tensor, mode: Mode<'_>) -> Result<Forward> {
        self.check_images(images)?;
        let mut tape = Tape::new();
        let image = tape.input(images.clone());
        let a = self.segment(&mut tape, image)?;
        let (style_mean, style_logvar) = self.style_encode(&mut tape, image, a.factors)?;
        let style_sample = Self::style_sample(&mut tape, style_mean, style_logvar, mode);
        let recon = self.decode(&mut tape, a.factors, style_sample)?;
        Ok(Forward {
            tape,
            image,
            logits: a.logits,
            probabilities: a.probabilities,
            raw_positions: a.raw_positions,
            positions: a.positions,
            cumulative: a.cumulative,
            ordered: a.ordered,
            layer_maps: a.layer_maps,
            texture: a.texture,
            factors: a.factors,
            style_mean,
            style_logvar,
            style_sample,
            recon,
        })
    }

    /// Rectified surface positions only (skips the style and decoder branches).
    pub fn predict_surfaces(&self, images: &Tensor) -> Result<Vec<SurfaceCurveSet<f32>>> {
        self.check_images(images)?;
        let mut tape = Tape::new();
        let image = tape.input(images.clone());
        let a = self.segment(&mut tape, image)?;
        let n = images.shape()[0];
        Ok((0..n)
            .map(|k| engine::curves_of(tape.value(a.positions), k))
            .collect())
    }
}
