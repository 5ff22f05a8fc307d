use super::{Conv, Init, Linear, ModelConfig, ParamStore};
use crate::autograd::{NodeId, Tape};

const LEAK: f32 = 0.2;
const INITIAL_LOGVAR: f32 = -6.0;

/// Variational encoder from the image (optionally stacked with the binarized
/// factors) to a Gaussian style code.
pub struct StyleEncoder {
    convs: [Conv; 3],
    hidden: Linear,
    stats: Linear,
    dim: usize,
}

impl StyleEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Self {
        let c_in = 1 + if cfg.style_uses_factors {
            cfg.factor_channels()
        } else {
            0
        };
        let convs = [
            Conv::new(store, init, "style.conv0", c_in, 16, 3, 2),
            Conv::new(store, init, "style.conv1", 16, 32, 3, 2),
            Conv::new(store, init, "style.conv2", 32, 32, 3, 2),
        ];
        let hidden = Linear::new(store, init, "style.hidden", 32, 32, 2f32.sqrt());
        let stats = Linear::new(store, init, "style.stats", 32, 2 * cfg.style_dim, 0.1);
        // Start with a narrow posterior; unit-variance noise at initialization
        // drowns the mean and teaches the decoder to ignore the code.
        store.get_mut(stats.bias_index()).data_mut()[cfg.style_dim..].fill(INITIAL_LOGVAR);
        Self {
            convs,
            hidden,
            stats,
            dim: cfg.style_dim,
        }
    }

    /// Returns `(mean, logvar)`, each `[N, Z]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: NodeId) -> (NodeId, NodeId) {
        let mut h = input;
        for conv in &self.convs {
            h = conv.forward(tape, store, h);
            h = tape.leaky_relu(h, LEAK);
        }
        let pooled = tape.global_avg_pool(h);
        let hidden = self.hidden.forward(tape, store, pooled);
        let hidden = tape.leaky_relu(hidden, LEAK);
        let stats = self.stats.forward(tape, store, hidden);
        let mean = tape.narrow(stats, 0, self.dim);
        let logvar = tape.narrow(stats, self.dim, self.dim);
        (mean, logvar)
    }
}
