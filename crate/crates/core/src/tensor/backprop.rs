use std::collections::{HashMap, HashSet};

use super::kernels::{self, gemm, matmul_layout};
use super::{numel, Op, Tensor, TensorId};
use crate::error::{Error, Result};

/// Gradients of a scalar with respect to the tracked leaves of its graph.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<TensorId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        self.map.get(&leaf.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = t.op() {
            for input in op.inputs() {
                if input.is_tracked() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

fn accumulate(grads: &mut HashMap<TensorId, Vec<f64>>, t: &Tensor, g: Vec<f64>) {
    if !t.is_tracked() {
        return;
    }
    debug_assert_eq!(g.len(), t.numel());
    match grads.get_mut(&t.id()) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => {
            grads.insert(t.id(), g);
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn backward(root: &Tensor) -> Result<Gradients> {
    if root.numel() != 1 {
        return Err(Error::shape(
            "backward",
            format!("root must be a scalar, got {:?}", root.shape()),
        ));
    }
    let mut out = Gradients::default();
    if !root.is_tracked() {
        return Ok(out);
    }
    let order = topo_order(root);
    let mut grads: HashMap<TensorId, Vec<f64>> = HashMap::new();
    grads.insert(root.id(), vec![1.0]);

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        let Some(op) = node.op() else {
            out.map.insert(
                node.id(),
                Tensor::new(g, node.shape()).expect("gradient shape"),
            );
            continue;
        };
        let oshape = node.shape();
        match op {
            Op::Add(a, b) => {
                accumulate(&mut grads, a, kernels::sum_to_shape(&g, oshape, a.shape()));
                accumulate(&mut grads, b, kernels::sum_to_shape(&g, oshape, b.shape()));
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads, a, kernels::sum_to_shape(&g, oshape, a.shape()));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(
                    &mut grads,
                    b,
                    kernels::sum_to_shape(&neg, oshape, b.shape()),
                );
            }
            Op::Mul(a, b) => {
                if a.is_tracked() {
                    let ga = kernels::broadcast_binary(
                        &g,
                        oshape,
                        b.data(),
                        b.shape(),
                        oshape,
                        |x, y| x * y,
                    );
                    accumulate(&mut grads, a, kernels::sum_to_shape(&ga, oshape, a.shape()));
                }
                if b.is_tracked() {
                    let gb = kernels::broadcast_binary(
                        &g,
                        oshape,
                        a.data(),
                        a.shape(),
                        oshape,
                        |x, y| x * y,
                    );
                    accumulate(&mut grads, b, kernels::sum_to_shape(&gb, oshape, b.shape()));
                }
            }
            Op::Div(a, b) => {
                let gq =
                    kernels::broadcast_binary(&g, oshape, b.data(), b.shape(), oshape, |x, y| {
                        x / y
                    });
                if a.is_tracked() {
                    accumulate(&mut grads, a, kernels::sum_to_shape(&gq, oshape, a.shape()));
                }
                if b.is_tracked() {
                    let gb = zip_map(&gq, node.data(), |x, y| -x * y);
                    accumulate(&mut grads, b, kernels::sum_to_shape(&gb, oshape, b.shape()));
                }
            }
            Op::Affine(x, m) => {
                accumulate(&mut grads, x, g.iter().map(|v| v * m).collect());
            }
            Op::Exp(x) => accumulate(&mut grads, x, zip_map(&g, node.data(), |a, y| a * y)),
            Op::Log(x) => accumulate(&mut grads, x, zip_map(&g, x.data(), |a, v| a / v)),
            Op::Sqrt(x) => accumulate(
                &mut grads,
                x,
                zip_map(&g, node.data(), |a, y| a / (2.0 * y)),
            ),
            Op::Abs(x) => accumulate(
                &mut grads,
                x,
                zip_map(&g, x.data(), |a, v| {
                    if v > 0.0 {
                        a
                    } else if v < 0.0 {
                        -a
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Relu(x) => accumulate(
                &mut grads,
                x,
                zip_map(&g, x.data(), |a, v| if v > 0.0 { a } else { 0.0 }),
            ),
            Op::Sigmoid(x) => accumulate(
                &mut grads,
                x,
                zip_map(&g, node.data(), |a, y| a * y * (1.0 - y)),
            ),
            Op::Sum(x) => {
                let full = kernels::broadcast_binary(&g, oshape, &[0.0], &[], x.shape(), |a, _| a);
                accumulate(&mut grads, x, full);
            }
            Op::Broadcast(x) => {
                accumulate(&mut grads, x, kernels::sum_to_shape(&g, oshape, x.shape()));
            }
            Op::MatMul(a, b) => matmul_backward(&mut grads, a, b, &g)?,
            Op::Permute(x, dims) => {
                let mut inv = vec![0; dims.len()];
                for (i, &d) in dims.iter().enumerate() {
                    inv[d] = i;
                }
                let (gx, _) = kernels::permute(&g, oshape, &inv);
                accumulate(&mut grads, x, gx);
            }
            Op::Reshape(x) => accumulate(&mut grads, x, g),
            Op::IndexSelect(x, d, idx) => {
                accumulate(&mut grads, x, kernels::index_add(&g, x.shape(), *d, idx));
            }
            Op::Cat(xs, d) => {
                let mut start = 0;
                for x in xs {
                    let len = x.shape()[*d];
                    if x.is_tracked() {
                        let idx: Vec<usize> = (start..start + len).collect();
                        let (gx, _) = kernels::index_select(&g, oshape, *d, &idx);
                        accumulate(&mut grads, x, gx);
                    }
                    start += len;
                }
            }
            Op::Softmax(x) => {
                let n = *oshape.last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(node.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(a, y)| y * (a - dot)));
                }
                accumulate(&mut grads, x, gx);
            }
            Op::LogSoftmax(x) => {
                let n = *oshape.last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(node.data().chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    gx.extend(gr.iter().zip(yr).map(|(a, y)| a - y.exp() * total));
                }
                accumulate(&mut grads, x, gx);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (n, c, h, wd) = x.dims4()?;
                let (o, _, kh, kw) = w.dims4()?;
                let geo = kernels::ConvGeometry::new(n, c, h, wd, o, kh, kw, *stride, *pad);
                let (dx, dw) = kernels::conv2d_backward(
                    x.data(),
                    w.data(),
                    &g,
                    &geo,
                    x.is_tracked(),
                    w.is_tracked(),
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads, x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads, w, dw);
                }
            }
            Op::MaxPool2(x, arg) => {
                let mut dx = vec![0.0; x.numel()];
                for (&i, &gv) in arg.iter().zip(&g) {
                    dx[i] += gv;
                }
                accumulate(&mut grads, x, dx);
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = x.dims4()?;
                accumulate(&mut grads, x, kernels::upsample2_backward(&g, n, c, h, w));
            }
            Op::AvgPool(x, k) => {
                let (n, c, h, w) = x.dims4()?;
                accumulate(
                    &mut grads,
                    x,
                    kernels::avg_pool_backward(&g, n, c, h, w, *k),
                );
            }
            Op::ReflectPad(x, pad) => {
                let (n, c, h, w) = x.dims4()?;
                accumulate(
                    &mut grads,
                    x,
                    kernels::reflect_pad_backward(&g, n, c, h, w, *pad),
                );
            }
        }
    }
    Ok(out)
}

fn matmul_backward(
    grads: &mut HashMap<TensorId, Vec<f64>>,
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
) -> Result<()> {
    let (l, _) = matmul_layout(a.shape(), b.shape())
        .ok_or_else(|| Error::shape("matmul backward", "layout"))?;
    let (m, k, n) = (l.m, l.k, l.n);
    if a.is_tracked() {
        let mut da = vec![0.0; a.numel()];
        if l.a_batched && !l.b_batched {
            gemm(l.batch * m, n, k, g, n, 1, b.data(), 1, n, &mut da, 0.0);
        } else {
            for i in 0..l.batch {
                let bo = if l.b_batched { i * k * n } else { 0 };
                let (dst, beta) = if l.a_batched {
                    (&mut da[i * m * k..(i + 1) * m * k], 0.0)
                } else {
                    (&mut da[..], 1.0)
                };
                gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..],
                    n,
                    1,
                    &b.data()[bo..],
                    1,
                    n,
                    dst,
                    beta,
                );
            }
        }
        accumulate(grads, a, da);
    }
    if b.is_tracked() {
        let mut db = vec![0.0; b.numel()];
        if l.a_batched && !l.b_batched {
            gemm(k, l.batch * m, n, a.data(), 1, k, g, n, 1, &mut db, 0.0);
        } else {
            for i in 0..l.batch {
                let ao = if l.a_batched { i * m * k } else { 0 };
                let (dst, beta) = if l.b_batched {
                    (&mut db[i * k * n..(i + 1) * k * n], 0.0)
                } else {
                    (&mut db[..], 1.0)
                };
                gemm(
                    k,
                    m,
                    n,
                    &a.data()[ao..],
                    1,
                    k,
                    &g[i * m * n..],
                    n,
                    1,
                    dst,
                    beta,
                );
            }
        }
        debug_assert_eq!(db.len(), numel(b.shape()));
        accumulate(grads, b, db);
    }
    Ok(())
}
