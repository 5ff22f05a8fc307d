//! Batched tape nodes for the topological engine.
//!
//! Each node runs the corresponding [`crate::topo`] routine per sample in the
//! forward pass and its hand-written vector-Jacobian product in the backward
//! pass. Probability-like tensors are `[N, S, H, W]`, positions `[N, S, W]`.

use crate::autograd::{NodeId, Tape};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::topo::{self, CumulativeMaps, Grid3, SurfaceCurveSet, SurfaceProbabilityMap};

pub(crate) fn grid_of(t: &Tensor, n: usize) -> Grid3<f32> {
    let (_, s, h, w) = t.dims4();
    Grid3::new(s, h, w, t.sample(n).to_vec()).expect("sample grid")
}

pub fn curves_of(t: &Tensor, n: usize) -> SurfaceCurveSet<f32> {
    let s = t.shape()[1];
    let w = t.shape()[2];
    SurfaceCurveSet::new(s, w, t.sample(n).to_vec()).expect("sample curves")
}

fn stack(shape: Vec<usize>, parts: impl IntoIterator<Item = Vec<f32>>) -> Tensor {
    let data: Vec<f32> = parts.into_iter().flatten().collect();
    Tensor::new(shape, data).expect("stacked shape")
}

pub fn softmax(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let lv = tape.value(logits);
    let shape = lv.shape().to_vec();
    let mut parts = Vec::with_capacity(shape[0]);
    for n in 0..shape[0] {
        parts.push(
            topo::columnwise_softmax(&grid_of(lv, n))?
                .into_grid()
                .into_data(),
        );
    }
    let value = stack(shape.clone(), parts);
    let saved = value.clone();
    Ok(tape.custom(
        &[logits],
        value,
        Box::new(move |g| {
            let parts = (0..shape[0]).map(|n| {
                let p = SurfaceProbabilityMap::new_unchecked(grid_of(&saved, n));
                topo::columnwise_softmax_backward(&p, &grid_of(g, n)).into_data()
            });
            vec![stack(shape.clone(), parts)]
        }),
    ))
}

pub fn expected_positions(tape: &mut Tape, probs: NodeId) -> NodeId {
    let pv = tape.value(probs);
    let (n_b, s, h, w) = pv.dims4();
    let parts = (0..n_b).map(|n| {
        let p = SurfaceProbabilityMap::new_unchecked(grid_of(pv, n));
        topo::expected_positions(&p).positions().to_vec()
    });
    let value = stack(vec![n_b, s, w], parts);
    tape.custom(
        &[probs],
        value,
        Box::new(move |g| {
            let parts = (0..n_b)
                .map(|n| topo::expected_positions_backward(h, &curves_of(g, n)).into_data());
            vec![stack(vec![n_b, s, h, w], parts)]
        }),
    )
}

pub fn rectify(tape: &mut Tape, positions: NodeId) -> NodeId {
    let yv = tape.value(positions).clone();
    let shape = yv.shape().to_vec();
    let outs: Vec<SurfaceCurveSet<f32>> = (0..shape[0])
        .map(|n| topo::rectify_surfaces(&curves_of(&yv, n)))
        .collect();
    let value = stack(shape.clone(), outs.iter().map(|c| c.positions().to_vec()));
    tape.custom(
        &[positions],
        value,
        Box::new(move |g| {
            let parts = (0..shape[0]).map(|n| {
                topo::rectify_surfaces_backward(&curves_of(&yv, n), &outs[n], &curves_of(g, n))
                    .positions()
                    .to_vec()
            });
            vec![stack(shape.clone(), parts)]
        }),
    )
}

pub fn cumulative(tape: &mut Tape, probs: NodeId) -> NodeId {
    let pv = tape.value(probs);
    let shape = pv.shape().to_vec();
    let parts = (0..shape[0]).map(|n| {
        let p = SurfaceProbabilityMap::new_unchecked(grid_of(pv, n));
        topo::cumulative_maps(&p).into_grid().into_data()
    });
    let value = stack(shape.clone(), parts);
    tape.custom(
        &[probs],
        value,
        Box::new(move |g| {
            let parts =
                (0..shape[0]).map(|n| topo::cumulative_maps_backward(&grid_of(g, n)).into_data());
            vec![stack(shape.clone(), parts)]
        }),
    )
}

pub fn enforce_ordering(tape: &mut Tape, cumulative: NodeId) -> NodeId {
    let cv = tape.value(cumulative).clone();
    let shape = cv.shape().to_vec();
    let outs: Vec<CumulativeMaps<f32>> = (0..shape[0])
        .map(|n| topo::enforce_map_ordering(&CumulativeMaps::new(grid_of(&cv, n))))
        .collect();
    let value = stack(shape.clone(), outs.iter().map(|m| m.grid().data().to_vec()));
    tape.custom(
        &[cumulative],
        value,
        Box::new(move |g| {
            let parts = (0..shape[0]).map(|n| {
                let c = CumulativeMaps::new(grid_of(&cv, n));
                topo::enforce_map_ordering_backward(&c, &outs[n], &grid_of(g, n)).into_data()
            });
            vec![stack(shape.clone(), parts)]
        }),
    )
}

pub fn decompose(tape: &mut Tape, ordered: NodeId) -> Result<NodeId> {
    let mv = tape.value(ordered);
    let shape = mv.shape().to_vec();
    let mut parts = Vec::with_capacity(shape[0]);
    for n in 0..shape[0] {
        parts.push(topo::decompose_layers(&CumulativeMaps::new(grid_of(mv, n)))?.into_data());
    }
    let value = stack(shape.clone(), parts);
    Ok(tape.custom(
        &[ordered],
        value,
        Box::new(move |g| {
            let parts =
                (0..shape[0]).map(|n| topo::decompose_layers_backward(&grid_of(g, n)).into_data());
            vec![stack(shape.clone(), parts)]
        }),
    ))
}

/// Round-to-nearest forward, identity backward.
pub fn binarize(tape: &mut Tape, x: NodeId) -> NodeId {
    let xv = tape.value(x);
    let value =
        Tensor::new(xv.shape().to_vec(), topo::binarize(xv.data())).expect("binarize shape");
    tape.custom(&[x], value, Box::new(|g| vec![g.clone()]))
}
