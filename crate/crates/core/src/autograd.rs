//! A minimal reverse-mode tape over [`Tensor`]s.
//!
//! The tape is rebuilt for every forward pass. Parameters enter as leaves
//! tagged with their index in a [`ParamStore`](crate::nn::ParamStore);
//! [`Tape::backward`] returns their gradients. Operations that live outside
//! this module (the topological engine, the losses) plug in through
//! [`Tape::custom`] with a hand-written vector-Jacobian product.

use crate::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Maps the upstream gradient of a custom node to one gradient per input.
pub type BackwardFn = Box<dyn FnOnce(&Tensor) -> Vec<Tensor>>;

enum Op {
    Input,
    Param(usize),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    GateMul {
        x: NodeId,
        gate: NodeId,
    },
    Film {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    PRelu {
        x: NodeId,
        alpha: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: f32,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    GlobalAvgPool(NodeId),
    Narrow {
        x: NodeId,
        start: usize,
    },
    Reparameterize {
        mean: NodeId,
        logvar: NodeId,
        noise: Vec<f32>,
    },
    WeightedSum(Vec<(NodeId, f32)>),
    Custom {
        inputs: Vec<NodeId>,
        backward: Option<BackwardFn>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter gradients produced by [`Tape::backward`], indexed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.grads.get(param).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, param: usize) -> Option<&mut Tensor> {
        self.grads.get_mut(param).and_then(Option::as_mut)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .map(|(_, g)| g.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(factor);
        }
    }

    fn accumulate(&mut self, param: usize, grad: Tensor) {
        if self.grads.len() <= param {
            self.grads.resize(param + 1, None);
        }
        match &mut self.grads[param] {
            Some(g) => g.add_assign(&grad),
            slot => *slot = Some(grad),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, index: usize, value: Tensor) -> NodeId {
        self.push(value, Op::Param(index), true)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let (n, c_in, h, wd) = self.value(x).dims4();
        let (c_out, wc, kh, kw) = self.value(w).dims4();
        assert_eq!(
            wc, c_in,
            "conv2d: weight expects {wc} input channels, got {c_in}"
        );
        assert_eq!(kh, kw, "conv2d: only square kernels");
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            kernel: kh,
            stride,
            pad,
        };
        let out = conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            self.value(b).data(),
            c_out,
        );
        let value = Tensor::new([n, c_out, geom.out_h(), geom.out_w()], out).expect("conv shape");
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, needs)
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = src[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out).expect("pool shape");
        let needs = self.needs(x);
        self.push(value, Op::MaxPool2 { x, argmax }, needs)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * ho * wo];
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[(plane * ho + oy) * wo + ox] = src[(plane * h + oy / 2) * w + ox / 2];
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out).expect("upsample shape");
        let needs = self.needs(x);
        self.push(value, Op::Upsample2 { x }, needs)
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: batch/spatial mismatch");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(self.value(a).sample(s));
            out.extend_from_slice(self.value(b).sample(s));
        }
        let value = Tensor::new([n, ca + cb, h, w], out).expect("concat shape");
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Concat { a, b }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: shape mismatch"
        );
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    /// `x[n,c,h,w] · gate[n,0,h,w]`.
    pub fn gate_mul(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(
            self.value(gate).shape(),
            &[n, 1, h, w],
            "gate_mul: gate shape"
        );
        let hw = h * w;
        let g = self.value(gate).data();
        let mut out = self.value(x).data().to_vec();
        for s in 0..n {
            let gs = &g[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let o = &mut out[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                o.iter_mut().zip(gs).for_each(|(v, gv)| *v *= gv);
            }
        }
        let value = Tensor::new([n, c, h, w], out).expect("gate shape");
        let needs = self.needs(x) || self.needs(gate);
        self.push(value, Op::GateMul { x, gate }, needs)
    }

    /// Feature-wise linear modulation: `x[n,c,:,:]·gamma[n,c] + beta[n,c]`.
    pub fn film(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(gamma).shape(), &[n, c], "film: gamma shape");
        assert_eq!(self.value(beta).shape(), &[n, c], "film: beta shape");
        let hw = h * w;
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).data().to_vec();
        for (plane, chunk) in out.chunks_mut(hw).enumerate() {
            let (g, b) = (gm[plane], bt[plane]);
            chunk.iter_mut().for_each(|v| *v = *v * g + b);
        }
        let value = Tensor::new([n, c, h, w], out).expect("film shape");
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(value, Op::Film { x, gamma, beta }, needs)
    }

    /// Parametric ReLU with one learnable slope per channel.
    pub fn prelu(&mut self, x: NodeId, alpha: NodeId) -> NodeId {
        let (_, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(alpha).numel(), c, "prelu: one slope per channel");
        let hw = h * w;
        let a = self.value(alpha).data();
        let mut out = self.value(x).data().to_vec();
        for (plane, chunk) in out.chunks_mut(hw).enumerate() {
            let slope = a[plane % c];
            chunk.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= slope
                }
            });
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out).expect("prelu shape");
        let needs = self.needs(x) || self.needs(alpha);
        self.push(value, Op::PRelu { x, alpha }, needs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> NodeId {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= slope
            }
        });
        let needs = self.needs(x);
        self.push(value, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    /// `x[n,d] · wᵀ + b` with `w` of shape `[out, d]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (n, d) = self.value(x).dims2();
        let (o, wd) = self.value(w).dims2();
        assert_eq!(wd, d, "linear: weight expects {wd} inputs, got {d}");
        let mut out = vec![0.0f32; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        crate::kernels::gemm(
            n,
            d,
            o,
            self.value(x).data(),
            (d, 1),
            self.value(w).data(),
            (1, d),
            1.0,
            &mut out,
        );
        let value = Tensor::new([n, o], out).expect("linear shape");
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Linear { x, w, b }, needs)
    }

    /// NCHW → `[N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = (h * w) as f32;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f32>() / hw)
            .collect();
        let value = Tensor::new([n, c], out).expect("gap shape");
        let needs = self.needs(x);
        self.push(value, Op::GlobalAvgPool(x), needs)
    }

    /// Columns `start..start+len` of a 2-d tensor.
    pub fn narrow(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (n, d) = self.value(x).dims2();
        assert!(start + len <= d, "narrow out of range");
        let out = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new([n, len], out).expect("narrow shape");
        let needs = self.needs(x);
        self.push(value, Op::Narrow { x, start }, needs)
    }

    /// `mean + exp(½·logvar) ⊙ noise`.
    pub fn reparameterize(&mut self, mean: NodeId, logvar: NodeId, noise: Vec<f32>) -> NodeId {
        assert_eq!(self.value(mean).shape(), self.value(logvar).shape());
        assert_eq!(self.value(mean).numel(), noise.len());
        let out = self
            .value(mean)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .zip(&noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let value = Tensor::new(self.value(mean).shape().to_vec(), out).expect("reparam shape");
        let needs = self.needs(mean) || self.needs(logvar);
        self.push(
            value,
            Op::Reparameterize {
                mean,
                logvar,
                noise,
            },
            needs,
        )
    }

    /// Scalar `Σ wₖ·xₖ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f32)>) -> NodeId {
        let total = terms
            .iter()
            .map(|&(id, w)| (w as f64) * self.value(id).item() as f64)
            .sum::<f64>();
        let needs = terms.iter().any(|&(id, _)| self.needs(id));
        self.push(Tensor::scalar(total as f32), Op::WeightedSum(terms), needs)
    }

    /// Registers an externally computed node with its vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor, backward: BackwardFn) -> NodeId {
        let needs = inputs.iter().any(|&i| self.needs(i));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Some(backward),
            },
            needs,
        )
    }

    /// Reverse sweep from the scalar `loss`. Consumes the custom backward
    /// closures, so a tape can be differentiated once.
    pub fn backward(&mut self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let contributions = self.node_backward(idx, &g, &mut out);
            for (id, grad) in contributions {
                if !self.nodes[id.0].needs_grad {
                    continue;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            }
        }
        out
    }

    fn node_backward(
        &mut self,
        idx: usize,
        g: &Tensor,
        params: &mut Gradients,
    ) -> Vec<(NodeId, Tensor)> {
        let mut op = std::mem::replace(&mut self.nodes[idx].op, Op::Input);
        let res = self.op_backward(idx, &mut op, g, params);
        self.nodes[idx].op = op;
        res
    }

    fn op_backward(
        &self,
        idx: usize,
        op: &mut Op,
        g: &Tensor,
        params: &mut Gradients,
    ) -> Vec<(NodeId, Tensor)> {
        let out_value = &self.nodes[idx].value;
        match op {
            Op::Input => Vec::new(),
            Op::Param(p) => {
                params.accumulate(*p, g.clone());
                Vec::new()
            }
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let n = xv.shape()[0];
                let c_out = wv.shape()[0];
                let (gx, gw, gb) = conv2d_backward(
                    xv.data(),
                    n,
                    &geom,
                    wv.data(),
                    c_out,
                    g.data(),
                    self.nodes[x.0].needs_grad,
                );
                let mut res = vec![
                    (w, Tensor::new(wv.shape().to_vec(), gw).expect("dw")),
                    (b, Tensor::new([c_out], gb).expect("db")),
                ];
                if let Some(gx) = gx {
                    res.push((x, Tensor::new(xv.shape().to_vec(), gx).expect("dx")));
                }
                res
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let mut gx = Tensor::zeros(self.nodes[x.0].value.shape().to_vec());
                let data = gx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    data[src as usize] += g.data()[o];
                }
                vec![(x, gx)]
            }
            Op::Upsample2 { x } => {
                let x = *x;
                let (n, c, h, w) = self.nodes[x.0].value.dims4();
                let (ho, wo) = (2 * h, 2 * w);
                let mut gx = Tensor::zeros([n, c, h, w]);
                let data = gx.data_mut();
                for plane in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            data[(plane * h + oy / 2) * w + ox / 2] +=
                                g.data()[(plane * ho + oy) * wo + ox];
                        }
                    }
                }
                vec![(x, gx)]
            }
            Op::Concat { a, b } => {
                let (a, b) = (*a, *b);
                let (n, ca, h, w) = self.nodes[a.0].value.dims4();
                let cb = self.nodes[b.0].value.dims4().1;
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let gs = g.sample(s);
                    ga.extend_from_slice(&gs[..ca * hw]);
                    gb.extend_from_slice(&gs[ca * hw..]);
                }
                vec![
                    (a, Tensor::new([n, ca, h, w], ga).expect("da")),
                    (b, Tensor::new([n, cb, h, w], gb).expect("db")),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::GateMul { x, gate } => {
                let (x, gate) = (*x, *gate);
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gate.0].value;
                let (n, c, h, w) = xv.dims4();
                let hw = h * w;
                let mut gx = g.clone();
                let mut gg = Tensor::zeros([n, 1, h, w]);
                for s in 0..n {
                    let gate_s = &gv.data()[s * hw..(s + 1) * hw];
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for p in 0..hw {
                            gg.data_mut()[s * hw + p] += g.data()[off + p] * xv.data()[off + p];
                            gx.data_mut()[off + p] *= gate_s[p];
                        }
                    }
                }
                vec![(x, gx), (gate, gg)]
            }
            Op::Film { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xv = &self.nodes[x.0].value;
                let gm = self.nodes[gamma.0].value.data();
                let (n, c, h, w) = xv.dims4();
                let hw = h * w;
                let mut gx = g.clone();
                let mut ggamma = vec![0.0f32; n * c];
                let mut gbeta = vec![0.0f32; n * c];
                for plane in 0..n * c {
                    let gs = &g.data()[plane * hw..(plane + 1) * hw];
                    let xs = &xv.data()[plane * hw..(plane + 1) * hw];
                    ggamma[plane] = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    gbeta[plane] = gs.iter().sum();
                    gx.data_mut()[plane * hw..(plane + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v *= gm[plane]);
                }
                vec![
                    (x, gx),
                    (gamma, Tensor::new([n, c], ggamma).expect("dgamma")),
                    (beta, Tensor::new([n, c], gbeta).expect("dbeta")),
                ]
            }
            Op::PRelu { x, alpha } => {
                let (x, alpha) = (*x, *alpha);
                let xv = &self.nodes[x.0].value;
                let av = self.nodes[alpha.0].value.data();
                let (_, c, h, w) = xv.dims4();
                let hw = h * w;
                let mut gx = g.clone();
                let mut ga = vec![0.0f32; c];
                for (plane, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                    let ch = plane % c;
                    let xs = &xv.data()[plane * hw..(plane + 1) * hw];
                    for (gv, &xval) in chunk.iter_mut().zip(xs) {
                        if xval < 0.0 {
                            ga[ch] += *gv * xval;
                            *gv *= av[ch];
                        }
                    }
                }
                let ga =
                    Tensor::new(self.nodes[alpha.0].value.shape().to_vec(), ga).expect("dalpha");
                vec![(x, gx), (alpha, ga)]
            }
            Op::LeakyRelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                let mut gx = g.clone();
                for (gv, &xval) in gx.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                    if xval < 0.0 {
                        *gv *= slope;
                    }
                }
                vec![(x, gx)]
            }
            Op::Relu(x) => {
                let x = *x;
                let mut gx = g.clone();
                for (gv, &xval) in gx.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                    if xval <= 0.0 {
                        *gv = 0.0;
                    }
                }
                vec![(x, gx)]
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let mut gx = g.clone();
                for (gv, &s) in gx.data_mut().iter_mut().zip(out_value.data()) {
                    *gv *= s * (1.0 - s);
                }
                vec![(x, gx)]
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (n, d) = xv.dims2();
                let o = wv.dims2().0;
                let mut gx = vec![0.0f32; n * d];
                crate::kernels::gemm(n, o, d, g.data(), (o, 1), wv.data(), (d, 1), 0.0, &mut gx);
                let mut gw = vec![0.0f32; o * d];
                crate::kernels::gemm(o, n, d, g.data(), (1, o), xv.data(), (d, 1), 0.0, &mut gw);
                let mut gb = vec![0.0f32; o];
                for row in g.data().chunks(o) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                vec![
                    (x, Tensor::new([n, d], gx).expect("dx")),
                    (w, Tensor::new([o, d], gw).expect("dw")),
                    (b, Tensor::new([o], gb).expect("db")),
                ]
            }
            Op::GlobalAvgPool(x) => {
                let x = *x;
                let (n, c, h, w) = self.nodes[x.0].value.dims4();
                let hw = h * w;
                let mut gx = vec![0.0f32; n * c * hw];
                for (plane, chunk) in gx.chunks_mut(hw).enumerate() {
                    chunk.fill(g.data()[plane] / hw as f32);
                }
                vec![(x, Tensor::new([n, c, h, w], gx).expect("dgap"))]
            }
            Op::Narrow { x, start } => {
                let (x, start) = (*x, *start);
                let (n, d) = self.nodes[x.0].value.dims2();
                let len = g.dims2().1;
                let mut gx = vec![0.0f32; n * d];
                for s in 0..n {
                    gx[s * d + start..s * d + start + len]
                        .copy_from_slice(&g.data()[s * len..(s + 1) * len]);
                }
                vec![(x, Tensor::new([n, d], gx).expect("dnarrow"))]
            }
            Op::Reparameterize {
                mean,
                logvar,
                noise,
            } => {
                let (mean, logvar) = (*mean, *logvar);
                let lv = self.nodes[logvar.0].value.data();
                let glv = g
                    .data()
                    .iter()
                    .zip(lv)
                    .zip(noise.iter())
                    .map(|((gv, l), e)| gv * 0.5 * (0.5 * l).exp() * e)
                    .collect();
                let shape = g.shape().to_vec();
                vec![
                    (mean, g.clone()),
                    (logvar, Tensor::new(shape, glv).expect("dlogvar")),
                ]
            }
            Op::WeightedSum(terms) => terms
                .iter()
                .map(|&(id, w)| {
                    (
                        id,
                        Tensor::filled(self.nodes[id.0].value.shape().to_vec(), g.item() * w),
                    )
                })
                .collect(),
            Op::Custom { inputs, backward } => {
                let inputs = inputs.clone();
                let f = backward.take().expect("custom backward already consumed");
                let gs = f(g);
                assert_eq!(
                    gs.len(),
                    inputs.len(),
                    "custom backward returned wrong arity"
                );
                inputs.into_iter().zip(gs).collect()
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
