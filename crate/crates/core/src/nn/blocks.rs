use super::{Conv, Init, PRelu, ParamStore};
use crate::autograd::{NodeId, Tape};

/// Two 3×3 convolutions with a residual connection (1×1 projection when
/// channel counts differ) and PReLU activations.
pub struct ResBlock {
    conv1: Conv,
    act1: PRelu,
    conv2: Conv,
    skip: Option<Conv>,
    act2: PRelu,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Self {
            conv1: Conv::new(store, init, &format!("{name}.conv1"), c_in, c_out, 3, 1),
            act1: PRelu::new(store, &format!("{name}.act1"), c_out),
            conv2: Conv::new(store, init, &format!("{name}.conv2"), c_out, c_out, 3, 1),
            skip: (c_in != c_out)
                .then(|| Conv::new(store, init, &format!("{name}.skip"), c_in, c_out, 1, 1)),
            act2: PRelu::new(store, &format!("{name}.act2"), c_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.conv1.forward(tape, store, x);
        let h = self.act1.forward(tape, store, h);
        let h = self.conv2.forward(tape, store, h);
        let s = match &self.skip {
            Some(proj) => proj.forward(tape, store, x),
            None => x,
        };
        let sum = tape.add(h, s);
        self.act2.forward(tape, store, sum)
    }
}

/// Additive attention gate on a skip connection: the skip features are
/// multiplied by a one-channel sigmoid map computed from skip and gating
/// features.
pub struct AttentionGate {
    theta: Conv,
    phi: Conv,
    psi: Conv,
}

impl AttentionGate {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        c_skip: usize,
        c_gate: usize,
        c_inter: usize,
    ) -> Self {
        Self {
            theta: Conv::new(store, init, &format!("{name}.theta"), c_skip, c_inter, 1, 1),
            phi: Conv::new(store, init, &format!("{name}.phi"), c_gate, c_inter, 1, 1),
            psi: Conv::new(store, init, &format!("{name}.psi"), c_inter, 1, 1, 1),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        skip: NodeId,
        gate: NodeId,
    ) -> NodeId {
        let a = self.theta.forward(tape, store, skip);
        let b = self.phi.forward(tape, store, gate);
        let sum = tape.add(a, b);
        let act = tape.relu(sum);
        let logits = self.psi.forward(tape, store, act);
        let coeff = tape.sigmoid(logits);
        tape.gate_mul(skip, coeff)
    }
}
