//! A small reverse-mode automatic differentiation engine over dense,
//! row-major `f64` tensors.
//!
//! Every operation produces a new contiguous tensor. Tensors created with
//! [`Tensor::var`] (or derived from one) are *tracked*: they remember the op
//! that produced them so that [`Tensor::backward`] can propagate gradients.
//! Untracked tensors (frozen weights, data) carry no graph and cost nothing
//! to keep around. Tensors are immutable and `Send + Sync`, so a model
//! snapshot can be shared across threads.

mod backprop;
mod kernels;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use backprop::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    fn next() -> Self {
        static COUNTER: AtomicUsize = AtomicUsize::new(1);
        TensorId(COUNTER.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

struct Inner {
    id: TensorId,
    data: Arc<Vec<f64>>,
    shape: Vec<usize>,
    op: Option<Op>,
    tracked: bool,
}

#[derive(Clone)]
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Affine(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Sqrt(Tensor),
    Abs(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Sum(Tensor),
    Broadcast(Tensor),
    MatMul(Tensor, Tensor),
    Permute(Tensor, Vec<usize>),
    Reshape(Tensor),
    IndexSelect(Tensor, usize, Arc<Vec<usize>>),
    Cat(Vec<Tensor>, usize),
    Softmax(Tensor),
    LogSoftmax(Tensor),
    Conv2d {
        x: Tensor,
        w: Tensor,
        stride: usize,
        pad: usize,
    },
    MaxPool2(Tensor, Arc<Vec<usize>>),
    Upsample2(Tensor),
    AvgPool(Tensor, usize),
    ReflectPad(Tensor, usize),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![a, b]
            }
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::Cat(xs, _) => xs.iter().collect(),
            Op::Affine(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Abs(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Sum(x)
            | Op::Broadcast(x)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::IndexSelect(x, _, _)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::MaxPool2(x, _)
            | Op::Upsample2(x)
            | Op::AvgPool(x, _)
            | Op::ReflectPad(x, _) => vec![x],
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape())?;
        if self.numel() <= 8 {
            write!(f, "{:?}", self.data())?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: Vec<usize>, op: Option<Op>) -> Tensor {
        let tracked = op
            .as_ref()
            .map(|op| op.inputs().iter().any(|t| t.0.tracked))
            .unwrap_or(false);
        let op = if tracked { op } else { None };
        Tensor(Arc::new(Inner {
            id: TensorId::next(),
            data: Arc::new(data),
            shape,
            op,
            tracked,
        }))
    }

    /// An untracked constant.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::shape(
                "new",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), None))
    }

    /// A tracked leaf: gradients flow into it on [`Tensor::backward`].
    pub fn var(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(t.into_var())
    }

    /// Same values as a fresh tracked leaf.
    pub fn into_var(&self) -> Tensor {
        Tensor(Arc::new(Inner {
            id: TensorId::next(),
            data: self.0.data.clone(),
            shape: self.0.shape.clone(),
            op: None,
            tracked: true,
        }))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_parts(vec![v], vec![], None)
    }

    pub fn full(v: f64, shape: &[usize]) -> Tensor {
        Tensor::from_parts(vec![v; numel(shape)], shape.to_vec(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(0.0, shape)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(1.0, shape)
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.0.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.0.tracked
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("shape {:?}", self.shape())));
        }
        Ok(self.0.data[0])
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape(
                "dims4",
                format!("expected rank 4, got {:?}", self.shape()),
            )),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape() {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(
                "dims2",
                format!("expected rank 2, got {:?}", self.shape()),
            )),
        }
    }

    /// Values without the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Arc::new(Inner {
            id: TensorId::next(),
            data: self.0.data.clone(),
            shape: self.0.shape.clone(),
            op: None,
            tracked: false,
        }))
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    // ---- elementwise --------------------------------------------------

    fn binary(
        &self,
        rhs: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        let shape = broadcast_shape(self.shape(), rhs.shape()).ok_or_else(|| {
            Error::shape(name, format!("{:?} vs {:?}", self.shape(), rhs.shape()))
        })?;
        let data = kernels::broadcast_binary(
            self.data(),
            self.shape(),
            rhs.data(),
            rhs.shape(),
            &shape,
            f,
        );
        Ok(Tensor::from_parts(
            data,
            shape,
            Some(op(self.clone(), rhs.clone())),
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "div", |a, b| a / b, Op::Div)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_parts(data, self.shape().to_vec(), Some(op))
    }

    /// `mul * x + add`
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        self.unary(|v| mul * v + add, Op::Affine(self.clone(), mul))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, Op::Log(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, Op::Sqrt(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, Op::Abs(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|v| v.max(0.0), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(self.clone()))
    }

    pub fn sqr(&self) -> Result<Tensor> {
        self.mul(self)
    }

    /// Integer power by repeated multiplication; well defined for negative bases.
    pub fn powi(&self, n: usize) -> Result<Tensor> {
        match n {
            0 => Ok(Tensor::ones(self.shape())),
            _ => {
                let mut acc = self.clone();
                for _ in 1..n {
                    acc = acc.mul(self)?;
                }
                Ok(acc)
            }
        }
    }

    /// `x * sigmoid(1.702 x)`
    pub fn quick_gelu(&self) -> Result<Tensor> {
        self.mul(&self.scale(1.702).sigmoid())
    }

    pub fn clamp_detached(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|v| v.clamp(lo, hi)).collect();
        Tensor::from_parts(data, self.shape().to_vec(), None)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        self.sub(&self.affine(1.0, -hi).relu())?
            .add(&self.scale(-1.0).affine(1.0, lo).relu())
    }

    // ---- reductions ---------------------------------------------------

    fn norm_dim(&self, dim: isize) -> Result<usize> {
        let rank = self.rank() as isize;
        let d = if dim < 0 { rank + dim } else { dim };
        if d < 0 || d >= rank {
            return Err(Error::shape(
                "dim",
                format!("dim {dim} out of range for {:?}", self.shape()),
            ));
        }
        Ok(d as usize)
    }

    /// Sum over `dims`, keeping them as size-1 axes.
    pub fn sum_keepdim(&self, dims: &[isize]) -> Result<Tensor> {
        let mut ds = dims
            .iter()
            .map(|&d| self.norm_dim(d))
            .collect::<Result<Vec<_>>>()?;
        ds.sort_unstable();
        ds.dedup();
        let (data, shape) = kernels::sum_dims(self.data(), self.shape(), &ds);
        Ok(Tensor::from_parts(data, shape, Some(Op::Sum(self.clone()))))
    }

    pub fn mean_keepdim(&self, dims: &[isize]) -> Result<Tensor> {
        let s = self.sum_keepdim(dims)?;
        let count = self.numel() / s.numel().max(1);
        Ok(s.scale(1.0 / count as f64))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let dims: Vec<isize> = (0..self.rank() as isize).collect();
        self.sum_keepdim(&dims)?.reshape(&[])
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel().max(1) as f64;
        Ok(self.sum_all()?.scale(1.0 / n))
    }

    /// Population variance over `dims`, keepdim.
    pub fn var_keepdim(&self, dims: &[isize]) -> Result<Tensor> {
        let mean = self.mean_keepdim(dims)?;
        self.sub(&mean)?.sqr()?.mean_keepdim(dims)
    }

    pub fn broadcast_as(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let target = broadcast_shape(self.shape(), shape)
            .filter(|s| s == shape)
            .ok_or_else(|| {
                Error::shape("broadcast_as", format!("{:?} -> {:?}", self.shape(), shape))
            })?;
        let data =
            kernels::broadcast_binary(self.data(), self.shape(), &[0.0], &[], &target, |a, _| a);
        Ok(Tensor::from_parts(
            data,
            target,
            Some(Op::Broadcast(self.clone())),
        ))
    }

    // ---- linear algebra -----------------------------------------------

    /// Batched matrix product `(.., m, k) x (.., k, n)`. Either side may be a
    /// plain matrix that is shared across the other side's batch.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (data, shape) = kernels::matmul(self.data(), self.shape(), rhs.data(), rhs.shape())
            .ok_or_else(|| {
                Error::shape("matmul", format!("{:?} x {:?}", self.shape(), rhs.shape()))
            })?;
        Ok(Tensor::from_parts(
            data,
            shape,
            Some(Op::MatMul(self.clone(), rhs.clone())),
        ))
    }

    // ---- layout -------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        let op = Some(Op::Reshape(self.clone()));
        let tracked = self.0.tracked;
        Ok(Tensor(Arc::new(Inner {
            id: TensorId::next(),
            data: self.0.data.clone(),
            shape: shape.to_vec(),
            op: if tracked { op } else { None },
            tracked,
        })))
    }

    pub fn permute(&self, dims: &[usize]) -> Result<Tensor> {
        let mut seen = vec![false; self.rank()];
        if dims.len() != self.rank()
            || dims
                .iter()
                .any(|&d| d >= self.rank() || std::mem::replace(&mut seen[d], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{dims:?} for {:?}", self.shape()),
            ));
        }
        if dims.iter().enumerate().all(|(i, &d)| i == d) {
            return Ok(self.clone());
        }
        let (data, shape) = kernels::permute(self.data(), self.shape(), dims);
        Ok(Tensor::from_parts(
            data,
            shape,
            Some(Op::Permute(self.clone(), dims.to_vec())),
        ))
    }

    /// Swap the last two axes.
    pub fn t(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("t", format!("{:?}", self.shape())));
        }
        let mut dims: Vec<usize> = (0..r).collect();
        dims.swap(r - 2, r - 1);
        self.permute(&dims)
    }

    pub fn index_select(&self, dim: isize, idx: &[usize]) -> Result<Tensor> {
        let d = self.norm_dim(dim)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.shape()[d]) {
            return Err(Error::shape(
                "index_select",
                format!("index {bad} out of range for dim {d} of {:?}", self.shape()),
            ));
        }
        let (data, shape) = kernels::index_select(self.data(), self.shape(), d, idx);
        Ok(Tensor::from_parts(
            data,
            shape,
            Some(Op::IndexSelect(self.clone(), d, Arc::new(idx.to_vec()))),
        ))
    }

    pub fn narrow(&self, dim: isize, start: usize, len: usize) -> Result<Tensor> {
        let d = self.norm_dim(dim)?;
        if start + len > self.shape()[d] {
            return Err(Error::shape(
                "narrow",
                format!("{start}+{len} on dim {d} of {:?}", self.shape()),
            ));
        }
        if start == 0 && len == self.shape()[d] {
            return Ok(self.clone());
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(d as isize, &idx)
    }

    pub fn cat(xs: &[Tensor], dim: isize) -> Result<Tensor> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("cat", "no tensors"))?;
        let d = first.norm_dim(dim)?;
        for x in xs {
            let ok = x.rank() == first.rank()
                && x.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == d || a == b);
            if !ok {
                return Err(Error::shape(
                    "cat",
                    format!("{:?} vs {:?} along {d}", x.shape(), first.shape()),
                ));
            }
        }
        if xs.len() == 1 {
            return Ok(first.clone());
        }
        let parts: Vec<(&[f64], &[usize])> = xs.iter().map(|x| (x.data(), x.shape())).collect();
        let (data, shape) = kernels::cat(&parts, d);
        Ok(Tensor::from_parts(
            data,
            shape,
            Some(Op::Cat(xs.to_vec(), d)),
        ))
    }

    pub fn stack(xs: &[Tensor], dim: usize) -> Result<Tensor> {
        let expanded = xs
            .iter()
            .map(|x| {
                let mut s = x.shape().to_vec();
                s.insert(dim.min(s.len()), 1);
                x.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::cat(&expanded, dim as isize)
    }

    // ---- neural-net primitives ----------------------------------------

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        let data = kernels::softmax_rows(self.data(), n);
        Ok(Tensor::from_parts(
            data,
            self.shape().to_vec(),
            Some(Op::Softmax(self.clone())),
        ))
    }

    pub fn log_softmax_last(&self) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("log_softmax", "rank 0"))?;
        let data = kernels::log_softmax_rows(self.data(), n);
        Ok(Tensor::from_parts(
            data,
            self.shape().to_vec(),
            Some(Op::LogSoftmax(self.clone())),
        ))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let mean = self.mean_keepdim(&[-1])?;
        let centered = self.sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(&[-1])?;
        let normed = centered.div(&var.affine(1.0, eps).sqrt())?;
        normed.mul(gamma)?.add(beta)
    }

    /// 2-D convolution without bias. `x: (N, C, H, W)`, `w: (O, C, kh, kw)`.
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (n, c, h, wd) = self.dims4()?;
        let (o, wc, kh, kw) = w.dims4()?;
        if wc != c || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} weight {:?}", self.shape(), w.shape()),
            ));
        }
        let geo = kernels::ConvGeometry::new(n, c, h, wd, o, kh, kw, stride, pad);
        let data = kernels::conv2d_forward(self.data(), w.data(), &geo);
        Ok(Tensor::from_parts(
            data,
            vec![n, o, geo.out_h, geo.out_w],
            Some(Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                stride,
                pad,
            }),
        ))
    }

    /// 2x2 max pooling with stride 2 (floor).
    pub fn max_pool2(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::shape("max_pool2", format!("{:?}", self.shape())));
        }
        let (data, argmax) = kernels::max_pool2(self.data(), n, c, h, w);
        Ok(Tensor::from_parts(
            data,
            vec![n, c, h / 2, w / 2],
            Some(Op::MaxPool2(self.clone(), Arc::new(argmax))),
        ))
    }

    /// k x k average pooling with stride k (floor).
    pub fn avg_pool(&self, k: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if k == 0 || h < k || w < k {
            return Err(Error::shape(
                "avg_pool",
                format!("{:?} k={k}", self.shape()),
            ));
        }
        if k == 1 {
            return Ok(self.clone());
        }
        let data = kernels::avg_pool(self.data(), n, c, h, w, k);
        Ok(Tensor::from_parts(
            data,
            vec![n, c, h / k, w / k],
            Some(Op::AvgPool(self.clone(), k)),
        ))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let data = kernels::upsample2(self.data(), n, c, h, w);
        Ok(Tensor::from_parts(
            data,
            vec![n, c, 2 * h, 2 * w],
            Some(Op::Upsample2(self.clone())),
        ))
    }

    /// Reflection padding of both spatial axes.
    pub fn reflect_pad(&self, pad: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if pad == 0 {
            return Ok(self.clone());
        }
        if pad >= h || pad >= w {
            return Err(Error::shape(
                "reflect_pad",
                format!("{:?} pad={pad}", self.shape()),
            ));
        }
        let data = kernels::reflect_pad(self.data(), n, c, h, w, pad);
        Ok(Tensor::from_parts(
            data,
            vec![n, c, h + 2 * pad, w + 2 * pad],
            Some(Op::ReflectPad(self.clone(), pad)),
        ))
    }

    /// Reverse-mode gradients of this scalar with respect to every tracked leaf.
    pub fn backward(&self) -> Result<Gradients> {
        backprop::backward(self)
    }
}
