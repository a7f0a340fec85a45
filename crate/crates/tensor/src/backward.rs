//! Reverse-mode differentiation.
//!
//! Every vector-Jacobian rule below is written with the same tensor ops the
//! forward pass uses. When the caller asks to retain the graph, the rules run
//! with grad mode on, so the returned gradients are graph nodes themselves and
//! can be differentiated again.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::ops::split_axis;
use crate::tensor::{with_grad_mode, Tensor};

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Shift,
    Exp,
    Log,
    Powf(f64),
    Relu,
    Abs,
    MatMul,
    Softmax { axis: usize },
    SumAxis { axis: usize, keepdim: bool },
    SumAll,
    MaxAxis { axis: usize, keepdim: bool },
    MinAxis { axis: usize, keepdim: bool },
    Reshape,
    Permute(Vec<usize>),
    BroadcastTo,
    SumTo,
    GatherRows(Rc<[usize]>),
    ScatterRows(Rc<[usize]>),
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    Embed { axis: usize, start: usize },
}

fn constant_like(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::raw(t.data().iter().map(|&x| f(x)).collect(), t.shape().to_vec())
}

/// One-hot mask over `x` marking the first extremal entry along `axis`.
fn extremum_mask(x: &Tensor, axis: usize, take_max: bool) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let mut mask = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let mut best = 0;
            for k in 1..n {
                let better = if take_max { d[at(k)] > d[at(best)] } else { d[at(k)] < d[at(best)] };
                if better {
                    best = k;
                }
            }
            mask[at(best)] = 1.0;
        }
    }
    Tensor::raw(mask, x.shape().to_vec())
}

fn keepdim_shape(input: &[usize], axis: usize) -> Vec<usize> {
    let mut s = input.to_vec();
    s[axis] = 1;
    s
}

/// Gradients of `out = op(inputs)` with respect to each input that `needs`
/// one, given the upstream gradient `g`.
fn vjp(op: &Op, inputs: &[Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    match op {
        Op::Add => Ok(vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())]),
        Op::Sub => Ok(vec![want(0).then(|| g.clone()), want(1).then(|| g.neg())]),
        Op::Mul => Ok(vec![
            if want(0) { Some(g.mul(&inputs[1])?) } else { None },
            if want(1) { Some(g.mul(&inputs[0])?) } else { None },
        ]),
        Op::Div => Ok(vec![
            if want(0) { Some(g.div(&inputs[1])?) } else { None },
            if want(1) {
                Some(g.mul(out)?.div(&inputs[1])?.neg())
            } else {
                None
            },
        ]),
        Op::Neg => Ok(vec![Some(g.neg())]),
        Op::Scale(c) => Ok(vec![Some(g.scale(*c))]),
        Op::Shift => Ok(vec![Some(g.clone())]),
        Op::Exp => one(g.mul(out)),
        Op::Log => one(g.div(&inputs[0])),
        Op::Powf(p) => {
            if *p == 0.0 {
                return Ok(vec![Some(Tensor::zeros(inputs[0].shape()))]);
            }
            one(g.mul(&inputs[0].powf(p - 1.0)?.scale(*p)))
        }
        Op::Relu => one(g.mul(&constant_like(&inputs[0], |x| if x > 0.0 { 1.0 } else { 0.0 }))),
        Op::Abs => one(g.mul(&constant_like(&inputs[0], |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }))),
        Op::MatMul => Ok(vec![
            if want(0) { Some(g.matmul(&inputs[1].t()?)?) } else { None },
            if want(1) { Some(inputs[0].t()?.matmul(g)?) } else { None },
        ]),
        Op::Softmax { axis } => {
            let s = g.mul(out)?.sum_axis(*axis, true)?;
            one(out.mul(&g.sub(&s)?))
        }
        Op::SumAxis { axis, keepdim } => {
            let shape = inputs[0].shape();
            let g = if *keepdim { g.clone() } else { g.reshape(&keepdim_shape(shape, *axis))? };
            one(g.broadcast_to(shape))
        }
        Op::SumAll => {
            let shape = inputs[0].shape();
            one(g.reshape(&vec![1; shape.len()])?.broadcast_to(shape))
        }
        Op::MaxAxis { axis, keepdim } | Op::MinAxis { axis, keepdim } => {
            let take_max = matches!(op, Op::MaxAxis { .. });
            let shape = inputs[0].shape();
            let g = if *keepdim { g.clone() } else { g.reshape(&keepdim_shape(shape, *axis))? };
            one(g.broadcast_to(shape)?.mul(&extremum_mask(&inputs[0], *axis, take_max)))
        }
        Op::Reshape => one(g.reshape(inputs[0].shape())),
        Op::Permute(axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            one(g.permute(&inv))
        }
        Op::BroadcastTo => one(g.sum_to(inputs[0].shape())),
        Op::SumTo => one(g.broadcast_to(inputs[0].shape())),
        Op::GatherRows(index) => one(g.scatter_rows(index, inputs[0].dim(0))),
        Op::ScatterRows(index) => one(g.gather_rows(index)),
        Op::Concat { axis } => {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (i, t) in inputs.iter().enumerate() {
                let len = t.shape()[*axis];
                grads.push(if want(i) { Some(g.narrow(*axis, offset, len)?) } else { None });
                offset += len;
            }
            Ok(grads)
        }
        Op::Narrow { axis, start } => one(g.embed(*axis, *start, inputs[0].shape()[*axis])),
        Op::Embed { axis, start } => one(g.narrow(*axis, *start, inputs[0].shape()[*axis])),
    }
}

/// Inputs before consumers, restricted to tensors that require grad.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.inner.node {
            for input in node.inputs.iter().rev() {
                if input.requires_grad() && !visited.contains(&input.ptr()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of the scalar `root` with respect to each tensor in `wrt`.
///
/// With `retain_for_higher_order` the returned gradients stay attached to
/// the graph and may be differentiated again; otherwise they are constants.
/// Contributions are accumulated in a fixed order, so results are bitwise
/// reproducible.
pub fn backward(root: &Tensor, wrt: &[&Tensor], retain_for_higher_order: bool) -> Result<Vec<Tensor>> {
    if root.numel() != 1 {
        return Err(TensorError::NonScalarRoot(root.shape().to_vec()));
    }
    if !root.requires_grad() {
        return Err(TensorError::Detached);
    }
    if wrt.iter().any(|t| !t.requires_grad()) {
        return Err(TensorError::NotDifferentiable);
    }
    let targets: HashSet<usize> = wrt.iter().map(|t| t.ptr()).collect();
    let order = topo_order(root);

    let mut relevant: HashSet<usize> = HashSet::new();
    for t in &order {
        let reaches = targets.contains(&t.ptr())
            || t
                .inner
                .node
                .as_ref()
                .is_some_and(|n| n.inputs.iter().any(|i| relevant.contains(&i.ptr())));
        if reaches {
            relevant.insert(t.ptr());
        }
    }

    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    let mut found: HashMap<usize, Tensor> = HashMap::new();
    with_grad_mode(retain_for_higher_order, || -> Result<()> {
        grads.insert(root.ptr(), Tensor::ones(root.shape()));
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.ptr()) else { continue };
            if targets.contains(&t.ptr()) {
                found.insert(t.ptr(), g.clone());
            }
            let Some(node) = &t.inner.node else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|i| relevant.contains(&i.ptr())).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let input_grads = vjp(&node.op, &node.inputs, t, &g, &needs)?;
            for ((input, gi), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(gi), true) = (gi, *need) else { continue };
                let merged = match grads.remove(&input.ptr()) {
                    Some(prev) => prev.add(&gi)?,
                    None => gi,
                };
                grads.insert(input.ptr(), merged);
            }
        }
        Ok(())
    })?;

    Ok(wrt
        .iter()
        .map(|t| found.get(&t.ptr()).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}
