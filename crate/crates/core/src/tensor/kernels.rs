//! Forward and backward kernels on raw row-major buffers.

use super::{numel, strides};

/// Strides of `shape` aligned to the right of `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

pub(crate) fn broadcast_binary(
    a: &[f64],
    ash: &[usize],
    b: &[f64],
    bsh: &[usize],
    out: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let n = numel(out);
    if ash == out && bsh == out {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if ash == out && b.len() == 1 {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if bsh == out && a.len() == 1 {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    if out.is_empty() {
        return vec![f(a[0], b[0])];
    }
    let sa = broadcast_strides(ash, out);
    let sb = broadcast_strides(bsh, out);
    let r = out.len();
    let inner = out[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let outer = n / inner.max(1);
    let mut res = Vec::with_capacity(n);
    let mut coord = vec![0usize; r - 1];
    for _ in 0..outer {
        let mut oa = 0;
        let mut ob = 0;
        for (i, &c) in coord.iter().enumerate() {
            oa += c * sa[i];
            ob += c * sb[i];
        }
        for j in 0..inner {
            res.push(f(a[oa + j * ia], b[ob + j * ib]));
        }
        for i in (0..r - 1).rev() {
            coord[i] += 1;
            if coord[i] < out[i] {
                break;
            }
            coord[i] = 0;
        }
    }
    res
}

/// Sum `src` (of shape `shape`) down to `target`, the inverse of broadcasting.
pub(crate) fn sum_to_shape(src: &[f64], shape: &[usize], target: &[usize]) -> Vec<f64> {
    if shape == target {
        return src.to_vec();
    }
    let mut out = vec![0.0; numel(target)];
    if shape.is_empty() {
        out[0] = src[0];
        return out;
    }
    let st = broadcast_strides(target, shape);
    let r = shape.len();
    let inner = shape[r - 1];
    let it = st[r - 1];
    let outer = src.len() / inner.max(1);
    let mut coord = vec![0usize; r - 1];
    let mut pos = 0;
    for _ in 0..outer {
        let mut o = 0;
        for (i, &c) in coord.iter().enumerate() {
            o += c * st[i];
        }
        for j in 0..inner {
            out[o + j * it] += src[pos];
            pos += 1;
        }
        for i in (0..r - 1).rev() {
            coord[i] += 1;
            if coord[i] < shape[i] {
                break;
            }
            coord[i] = 0;
        }
    }
    out
}

pub(crate) fn sum_dims(data: &[f64], shape: &[usize], dims: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    for &d in dims {
        out_shape[d] = 1;
    }
    (sum_to_shape(data, shape, &out_shape), out_shape)
}

/// `c = a x b + beta * c` where `c` is row-major `m x n`; `a` and `b` are
/// addressed through explicit row/column strides so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above bound every address the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) struct MatmulLayout {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
}

pub(crate) fn matmul_layout(ash: &[usize], bsh: &[usize]) -> Option<(MatmulLayout, Vec<usize>)> {
    if ash.len() < 2 || bsh.len() < 2 {
        return None;
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != k2 {
        return None;
    }
    let abatch = &ash[..ash.len() - 2];
    let bbatch = &bsh[..bsh.len() - 2];
    let batch_shape = if abatch == bbatch || bbatch.is_empty() {
        abatch.to_vec()
    } else if abatch.is_empty() {
        bbatch.to_vec()
    } else {
        return None;
    };
    let mut shape = batch_shape.clone();
    shape.extend([m, n]);
    Some((
        MatmulLayout {
            m,
            k,
            n,
            batch: numel(&batch_shape),
            a_batched: !abatch.is_empty(),
            b_batched: !bbatch.is_empty(),
        },
        shape,
    ))
}

pub(crate) fn matmul(
    a: &[f64],
    ash: &[usize],
    b: &[f64],
    bsh: &[usize],
) -> Option<(Vec<f64>, Vec<usize>)> {
    let (l, shape) = matmul_layout(ash, bsh)?;
    let mut out = vec![0.0; numel(&shape)];
    if l.a_batched && !l.b_batched {
        gemm(l.batch * l.m, l.k, l.n, a, l.k, 1, b, l.n, 1, &mut out, 0.0);
        return Some((out, shape));
    }
    for i in 0..l.batch {
        let ao = if l.a_batched { i * l.m * l.k } else { 0 };
        let bo = if l.b_batched { i * l.k * l.n } else { 0 };
        gemm(
            l.m,
            l.k,
            l.n,
            &a[ao..],
            l.k,
            1,
            &b[bo..],
            l.n,
            1,
            &mut out[i * l.m * l.n..(i + 1) * l.m * l.n],
            0.0,
        );
    }
    Some((out, shape))
}

pub(crate) fn permute(data: &[f64], shape: &[usize], dims: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let r = out_shape.len();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let inner = out_shape[r - 1];
    let is = src_strides[r - 1];
    let mut coord = vec![0usize; r - 1];
    for _ in 0..n / inner {
        let mut o = 0;
        for (i, &c) in coord.iter().enumerate() {
            o += c * src_strides[i];
        }
        for j in 0..inner {
            out.push(data[o + j * is]);
        }
        for i in (0..r - 1).rev() {
            coord[i] += 1;
            if coord[i] < out_shape[i] {
                break;
            }
            coord[i] = 0;
        }
    }
    (out, out_shape)
}

fn split_at_dim(shape: &[usize], d: usize) -> (usize, usize) {
    (numel(&shape[..d]), numel(&shape[d + 1..]))
}

pub(crate) fn index_select(
    data: &[f64],
    shape: &[usize],
    d: usize,
    idx: &[usize],
) -> (Vec<f64>, Vec<usize>) {
    let (outer, inner) = split_at_dim(shape, d);
    let dim = shape[d];
    let mut out = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        for &i in idx {
            let start = (o * dim + i) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[d] = idx.len();
    (out, out_shape)
}

pub(crate) fn index_add(grad: &[f64], in_shape: &[usize], d: usize, idx: &[usize]) -> Vec<f64> {
    let (outer, inner) = split_at_dim(in_shape, d);
    let dim = in_shape[d];
    let mut out = vec![0.0; numel(in_shape)];
    let mut pos = 0;
    for o in 0..outer {
        for &i in idx {
            let start = (o * dim + i) * inner;
            for (dst, src) in out[start..start + inner]
                .iter_mut()
                .zip(&grad[pos..pos + inner])
            {
                *dst += src;
            }
            pos += inner;
        }
    }
    out
}

pub(crate) fn cat(parts: &[(&[f64], &[usize])], d: usize) -> (Vec<f64>, Vec<usize>) {
    let first = parts[0].1;
    let (outer, inner) = split_at_dim(first, d);
    let total_dim: usize = parts.iter().map(|(_, s)| s[d]).sum();
    let mut out = Vec::with_capacity(outer * total_dim * inner);
    for o in 0..outer {
        for (data, s) in parts {
            let chunk = s[d] * inner;
            out.extend_from_slice(&data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.to_vec();
    shape[d] = total_dim;
    (out, shape)
}

pub(crate) fn softmax_rows(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        o: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvGeometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let base = iy as usize * self.w;
                        for (ox, &g) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[base + ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ckk, p) = (g.patch(), g.positions());
    let mut cols = vec![0.0; ckk * p];
    let mut out = vec![0.0; g.n * g.o * p];
    let in_sz = g.c * g.h * g.w;
    for i in 0..g.n {
        g.im2col(&x[i * in_sz..(i + 1) * in_sz], &mut cols);
        gemm(
            g.o,
            ckk,
            p,
            w,
            ckk,
            1,
            &cols,
            p,
            1,
            &mut out[i * g.o * p..(i + 1) * g.o * p],
            0.0,
        );
    }
    out
}

/// Gradients with respect to the input and the weight.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ckk, p) = (g.patch(), g.positions());
    let in_sz = g.c * g.h * g.w;
    let mut cols = vec![0.0; ckk * p];
    let mut dcols = vec![0.0; ckk * p];
    let mut dx = need_dx.then(|| vec![0.0; g.n * in_sz]);
    let mut dw = need_dw.then(|| vec![0.0; g.o * ckk]);
    for i in 0..g.n {
        let dyi = &dy[i * g.o * p..(i + 1) * g.o * p];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x[i * in_sz..(i + 1) * in_sz], &mut cols);
            gemm(g.o, p, ckk, dyi, p, 1, &cols, 1, p, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(ckk, g.o, p, w, 1, ckk, dyi, p, 1, &mut dcols, 0.0);
            g.col2im(&dcols, &mut dx[i * in_sz..(i + 1) * in_sz]);
        }
    }
    (dx, dw)
}

pub(crate) fn max_pool2(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..k {
                    let row = base + (oy * k + dy) * w + ox * k;
                    s += x[row..row + k].iter().sum::<f64>();
                }
                out.push(s * norm);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(
    dy: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(plane * oh + oy) * ow + ox] * norm;
                for dyy in 0..k {
                    let row = base + (oy * k + dyy) * w + ox * k;
                    for v in &mut dx[row..row + k] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn upsample2(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for plane in x.chunks(h * w).take(n * c) {
        for row in plane.chunks(w) {
            let start = out.len();
            for &v in row {
                out.push(v);
                out.push(v);
            }
            out.extend_from_within(start..start + 2 * w);
        }
    }
    out
}

pub(crate) fn upsample2_backward(dy: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut dx = vec![0.0; n * c * h * w];
    let w2 = 2 * w;
    for plane in 0..n * c {
        let src = &dy[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let a = (2 * y) * w2 + 2 * x;
                dst[y * w + x] = src[a] + src[a + 1] + src[a + w2] + src[a + w2 + 1];
            }
        }
    }
    dx
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

pub(crate) fn reflect_pad(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(n * c * ph * pw);
    let cols: Vec<usize> = (0..pw)
        .map(|x| reflect(x as isize - pad as isize, w))
        .collect();
    for plane in x.chunks(h * w).take(n * c) {
        for y in 0..ph {
            let row = &plane[reflect(y as isize - pad as isize, h) * w..][..w];
            out.extend(cols.iter().map(|&cx| row[cx]));
        }
    }
    out
}

pub(crate) fn reflect_pad_backward(
    dy: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut dx = vec![0.0; n * c * h * w];
    let cols: Vec<usize> = (0..pw)
        .map(|x| reflect(x as isize - pad as isize, w))
        .collect();
    for plane in 0..n * c {
        let src = &dy[plane * ph * pw..(plane + 1) * ph * pw];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..ph {
            let ry = reflect(y as isize - pad as isize, h) * w;
            for (x, &cx) in cols.iter().enumerate() {
                dst[ry + cx] += src[y * pw + x];
            }
        }
    }
    dx
}
