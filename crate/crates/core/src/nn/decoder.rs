use super::{Conv, Init, Linear, ModelConfig, ParamStore, FILM_BLOCKS};
use crate::autograd::{NodeId, Tape};

const LEAK: f32 = 0.2;

/// Image decoder: the factor stack passes through FiLM-modulated 3×3
/// convolutions. The style code only produces per-channel scales and
/// offsets, so it cannot carry spatial information.
pub struct Decoder {
    film_hidden: Linear,
    film_out: Linear,
    blocks: Vec<Conv>,
    output: Conv,
    channels: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Self {
        let c = cfg.decoder_channels;
        let film_hidden = Linear::new(
            store,
            init,
            "decoder.film_hidden",
            cfg.style_dim,
            cfg.film_hidden,
            2f32.sqrt(),
        );
        let film_out = Linear::new(
            store,
            init,
            "decoder.film_out",
            cfg.film_hidden,
            FILM_BLOCKS * 2 * c,
            0.1,
        );
        // Scales start around one: the gamma half of every block's bias is 1.
        {
            let bias = store.get_mut(film_out.bias_index()).data_mut();
            for k in 0..FILM_BLOCKS {
                bias[k * 2 * c..k * 2 * c + c].fill(1.0);
            }
        }
        let blocks = (0..FILM_BLOCKS)
            .map(|k| {
                let c_in = if k == 0 { cfg.factor_channels() } else { c };
                Conv::new(store, init, &format!("decoder.block{k}"), c_in, c, 3, 1)
            })
            .collect();
        let output = Conv::new(store, init, "decoder.output", c, 1, 3, 1);
        Self {
            film_hidden,
            film_out,
            blocks,
            output,
            channels: c,
        }
    }

    /// Per-block `(gamma, beta)` nodes, each `[N, C]`.
    pub fn film_params(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        style: NodeId,
    ) -> Vec<(NodeId, NodeId)> {
        let h = self.film_hidden.forward(tape, store, style);
        let h = tape.leaky_relu(h, LEAK);
        let params = self.film_out.forward(tape, store, h);
        let c = self.channels;
        (0..FILM_BLOCKS)
            .map(|k| {
                let gamma = tape.narrow(params, k * 2 * c, c);
                let beta = tape.narrow(params, k * 2 * c + c, c);
                (gamma, beta)
            })
            .collect()
    }

    /// `factors [N, F, H, W]`, `style [N, Z]` → image `[N, 1, H, W]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        factors: NodeId,
        style: NodeId,
    ) -> NodeId {
        let film = self.film_params(tape, store, style);
        let mut h = factors;
        for (conv, &(gamma, beta)) in self.blocks.iter().zip(&film) {
            h = conv.forward(tape, store, h);
            h = tape.film(h, gamma, beta);
            h = tape.leaky_relu(h, LEAK);
        }
        self.output.forward(tape, store, h)
    }
}
