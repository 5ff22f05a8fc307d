use super::blocks::{AttentionGate, ResBlock};
use super::{Conv, Init, ModelConfig, ParamStore};
use crate::autograd::{NodeId, Tape};

struct UpStage {
    project: Conv,
    gate: Option<AttentionGate>,
    block: ResBlock,
}

/// Residual attention U-Net with two heads: `conv-s` emits one logit map per
/// surface, `conv-t` a sigmoid texture channel.
pub struct AnatomyEncoder {
    down: Vec<ResBlock>,
    bottleneck: ResBlock,
    up: Vec<UpStage>,
    surface_head: Conv,
    texture_head: Option<Conv>,
}

impl AnatomyEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Self {
        let ch = |k: usize| cfg.base_channels << k;
        let mut down = Vec::with_capacity(cfg.stages);
        let mut c_in = 1;
        for k in 0..cfg.stages {
            down.push(ResBlock::new(
                store,
                init,
                &format!("anatomy.down{k}"),
                c_in,
                ch(k),
            ));
            c_in = ch(k);
        }
        let bottleneck = ResBlock::new(store, init, "anatomy.bottleneck", c_in, ch(cfg.stages));
        let mut up = Vec::with_capacity(cfg.stages);
        for k in (0..cfg.stages).rev() {
            let name = format!("anatomy.up{k}");
            let project = Conv::new(
                store,
                init,
                &format!("{name}.project"),
                ch(k + 1),
                ch(k),
                1,
                1,
            );
            let gate = cfg.attention.then(|| {
                AttentionGate::new(
                    store,
                    init,
                    &format!("{name}.gate"),
                    ch(k),
                    ch(k),
                    (ch(k) / 2).max(1),
                )
            });
            let block = ResBlock::new(store, init, &format!("{name}.block"), 2 * ch(k), ch(k));
            up.push(UpStage {
                project,
                gate,
                block,
            });
        }
        let surface_head = Conv::new(store, init, "anatomy.conv_s", ch(0), cfg.surfaces, 1, 1);
        let texture_head = cfg
            .texture_head
            .then(|| Conv::new(store, init, "anatomy.conv_t", ch(0), 1, 1, 1));
        Self {
            down,
            bottleneck,
            up,
            surface_head,
            texture_head,
        }
    }

    /// Returns `(surface_logits [N,S,H,W], texture [N,1,H,W])`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: NodeId,
    ) -> (NodeId, Option<NodeId>) {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = image;
        for block in &self.down {
            h = block.forward(tape, store, h);
            skips.push(h);
            h = tape.max_pool2(h);
        }
        h = self.bottleneck.forward(tape, store, h);
        for stage in &self.up {
            let skip = skips.pop().expect("one skip per stage");
            let up = tape.upsample2(h);
            let up = stage.project.forward(tape, store, up);
            let skip = match &stage.gate {
                Some(gate) => gate.forward(tape, store, skip, up),
                None => skip,
            };
            let cat = tape.concat(up, skip);
            h = stage.block.forward(tape, store, cat);
        }
        let logits = self.surface_head.forward(tape, store, h);
        let texture = self.texture_head.as_ref().map(|head| {
            let t = head.forward(tape, store, h);
            tape.sigmoid(t)
        });
        (logits, texture)
    }
}
