//! Raw array kernels behind the differentiable operations.
//!
//! Images and feature maps are channels-last `[H, W, C]`; convolution kernels
//! are `[k, k, C_in, C_out]`. Everything here is plain data-in, data-out and
//! knows nothing about the tape.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type NdArray<T> = ArrayD<T>;

pub(crate) fn standard<T: Scalar>(a: NdArray<T>) -> NdArray<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// NumPy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How a standard-layout array of `shape` lines up with a standard-layout
/// array of broadcast shape `out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    /// Element `j` of the output reads element `j % len`.
    Tile(usize),
    /// Element `j` of the output reads element `j / inner`.
    Repeat(usize),
}

fn layout(shape: &[usize], out: &[usize]) -> Option<Layout> {
    let n = out.len();
    if shape.len() > n {
        return None;
    }
    let mut padded = vec![1; n - shape.len()];
    padded.extend_from_slice(shape);
    let tile = (0..=n).find(|&j| padded[..j].iter().all(|&d| d == 1) && padded[j..] == out[j..]);
    if let Some(j) = tile {
        return Some(Layout::Tile(out[j..].iter().product()));
    }
    let rep = (0..=n).find(|&j| padded[..j] == out[..j] && padded[j..].iter().all(|&d| d == 1));
    rep.map(|j| Layout::Repeat(out[j..].iter().product()))
}

fn index(l: Layout, j: usize) -> usize {
    match l {
        Layout::Tile(len) => j % len,
        Layout::Repeat(inner) => j / inner,
    }
}

pub(crate) fn binary<T: Scalar>(
    op: &'static str,
    a: &NdArray<T>,
    b: &NdArray<T>,
    f: impl Fn(T, T) -> T,
) -> Result<NdArray<T>> {
    if a.shape() == b.shape() {
        if let (Some(x), Some(y)) = (a.as_slice(), b.as_slice()) {
            let v = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
            return Ok(NdArray::from_shape_vec(a.raw_dim(), v).expect("same shape"));
        }
        return Ok(standard(Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))));
    }
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(
            op,
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        )
    })?;
    if let (Some(x), Some(y)) = (a.as_slice(), b.as_slice()) {
        if let (Some(la), Some(lb)) = (layout(a.shape(), &shape), layout(b.shape(), &shape)) {
            let n: usize = shape.iter().product();
            let v = if a.shape() == shape.as_slice() {
                x.iter().enumerate().map(|(j, &p)| f(p, y[index(lb, j)])).collect()
            } else if b.shape() == shape.as_slice() {
                y.iter().enumerate().map(|(j, &q)| f(x[index(la, j)], q)).collect()
            } else {
                (0..n).map(|j| f(x[index(la, j)], y[index(lb, j)])).collect()
            };
            return Ok(NdArray::from_shape_vec(IxDyn(&shape), v).expect("broadcast shape"));
        }
    }
    let av = a.broadcast(IxDyn(&shape)).expect("checked broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("checked broadcast");
    Ok(standard(Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))))
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub(crate) fn sum_to<T: Scalar>(g: &NdArray<T>, shape: &[usize]) -> Result<NdArray<T>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    if broadcast_shape(shape, g.shape()).as_deref() != Some(g.shape()) {
        return Err(Error::shape(
            "sum_to",
            format!("{:?} is not a broadcast of {:?}", g.shape(), shape),
        ));
    }
    if let (Some(src), Some(l)) = (g.as_slice(), layout(shape, g.shape())) {
        let len: usize = shape.iter().product();
        let mut out = vec![T::zero(); len];
        match l {
            Layout::Tile(_) => {
                for chunk in src.chunks_exact(len.max(1)) {
                    for (o, &v) in out.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
            }
            Layout::Repeat(inner) => {
                for (o, chunk) in out.iter_mut().zip(src.chunks_exact(inner.max(1))) {
                    *o = chunk.iter().fold(T::zero(), |acc, &v| acc + v);
                }
            }
        }
        return Ok(NdArray::from_shape_vec(IxDyn(shape), out).expect("reduced shape"));
    }
    let mut r = g.clone();
    while r.ndim() > shape.len() {
        r = r.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    Ok(standard(r))
}

pub(crate) fn broadcast_to<T: Scalar>(a: &NdArray<T>, shape: &[usize]) -> Result<NdArray<T>> {
    if let (Some(src), Some(l)) = (a.as_slice(), layout(a.shape(), shape)) {
        let n: usize = shape.iter().product();
        let v = (0..n).map(|j| src[index(l, j)]).collect();
        return Ok(NdArray::from_shape_vec(IxDyn(shape), v).expect("broadcast shape"));
    }
    let v = a.broadcast(IxDyn(shape)).ok_or_else(|| {
        Error::shape(
            "broadcast_to",
            format!("cannot broadcast {:?} to {:?}", a.shape(), shape),
        )
    })?;
    Ok(v.as_standard_layout().into_owned())
}

pub(crate) fn matmul<T: Scalar>(a: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if let (Some(x), Some(y)) = (a.as_slice(), b.as_slice()) {
        // Row-vector and outer-product shapes stream `b` once instead of packing it.
        if m <= 4 || k == 1 {
            let mut out = vec![T::zero(); m * n];
            for r in 0..m {
                let dst = &mut out[r * n..(r + 1) * n];
                for i in 0..k {
                    let s = x[r * k + i];
                    for (d, &v) in dst.iter_mut().zip(&y[i * n..(i + 1) * n]) {
                        *d += s * v;
                    }
                }
            }
            return Ok(NdArray::from_shape_vec(IxDyn(&[m, n]), out).expect("matmul shape"));
        }
    }
    let a2 = as2(a);
    let b2 = as2(b);
    Ok(a2.dot(&b2).into_dyn())
}

fn as2<T: Scalar>(a: &NdArray<T>) -> ArrayView2<'_, T> {
    a.view()
        .into_dimensionality()
        .expect("caller checked a 2-d shape")
}

pub(crate) fn softmax_last<T: Scalar>(x: &NdArray<T>) -> NdArray<T> {
    let mut out = x.clone();
    let last = Axis(x.ndim() - 1);
    for mut lane in out.lanes_mut(last) {
        let max = lane.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Validates an `[H, W, C_in]` input against a `[k, k, C_in, C_out]` kernel.
fn conv_dims(
    op: &'static str,
    x_shape: &[usize],
    w_shape: &[usize],
) -> Result<(usize, usize, usize, usize, usize)> {
    if x_shape.len() != 3 || w_shape.len() != 4 {
        return Err(Error::shape(
            op,
            format!("input {:?}, kernel {:?}", x_shape, w_shape),
        ));
    }
    let (k, k2, ci, co) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if k != k2 || k % 2 == 0 || ci != x_shape[2] {
        return Err(Error::shape(
            op,
            format!(
                "input {:?} needs an odd square kernel with {} input channels, got {:?}",
                x_shape, x_shape[2], w_shape
            ),
        ));
    }
    Ok((x_shape[0], x_shape[1], ci, co, k))
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, k: usize) -> Array2<T> {
    let pad = (k / 2) as isize;
    let row = k * k * c;
    let mut cols = vec![T::zero(); h * w * row];
    for oy in 0..h {
        for ox in 0..w {
            let base = (oy * w + ox) * row;
            for ky in 0..k {
                let iy = oy as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = base + (ky * k + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    Array2::from_shape_vec((h * w, row), cols).expect("im2col size")
}

fn col2im<T: Scalar>(cols: ArrayView2<'_, T>, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("standard layout");
    let row = k * k * c;
    let mut x = vec![T::zero(); h * w * c];
    for oy in 0..h {
        for ox in 0..w {
            let base = (oy * w + ox) * row;
            for ky in 0..k {
                let iy = oy as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = base + (ky * k + kx) * c;
                    for (d, s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    x
}

/// Stride-1, zero same-padded 2-d convolution (cross-correlation).
pub(crate) fn conv2d<T: Scalar>(x: &NdArray<T>, w: &NdArray<T>) -> Result<NdArray<T>> {
    let (h, wd, ci, co, k) = conv_dims("conv2d", x.shape(), w.shape())?;
    let x = x.as_standard_layout();
    let cols = im2col(x.as_slice().expect("standard"), h, wd, ci, k);
    let wm = w
        .view()
        .into_shape_with_order((k * k * ci, co))
        .expect("kernel reshape");
    let y = cols.dot(&wm);
    Ok(y.into_shape_with_order(IxDyn(&[h, wd, co]))
        .expect("conv output")
        .into_dyn())
}

/// Gradient of `conv2d` with respect to its input, given the output gradient.
pub(crate) fn conv2d_input_grad<T: Scalar>(gy: &NdArray<T>, w: &NdArray<T>) -> Result<NdArray<T>> {
    if w.ndim() != 4 || gy.ndim() != 3 || gy.shape()[2] != w.shape()[3] {
        return Err(Error::shape(
            "conv2d_input_grad",
            format!("grad {:?}, kernel {:?}", gy.shape(), w.shape()),
        ));
    }
    let (k, ci, co) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (h, wd) = (gy.shape()[0], gy.shape()[1]);
    let gy = gy.as_standard_layout();
    let g2 = gy
        .view()
        .into_shape_with_order((h * wd, co))
        .expect("grad reshape");
    let wm = w
        .view()
        .into_shape_with_order((k * k * ci, co))
        .expect("kernel reshape");
    let gcols = g2.dot(&wm.t());
    let dx = col2im(gcols.view(), h, wd, ci, k);
    Ok(NdArray::from_shape_vec(IxDyn(&[h, wd, ci]), dx).expect("col2im size"))
}

/// Gradient of `conv2d` with respect to a `k`x`k` kernel.
pub(crate) fn conv2d_weight_grad<T: Scalar>(
    x: &NdArray<T>,
    gy: &NdArray<T>,
    k: usize,
) -> Result<NdArray<T>> {
    if x.ndim() != 3 || gy.ndim() != 3 || x.shape()[..2] != gy.shape()[..2] {
        return Err(Error::shape(
            "conv2d_weight_grad",
            format!("input {:?}, grad {:?}", x.shape(), gy.shape()),
        ));
    }
    let (h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = gy.shape()[2];
    let x = x.as_standard_layout();
    let cols = im2col(x.as_slice().expect("standard"), h, wd, ci, k);
    let gy = gy.as_standard_layout();
    let g2 = gy
        .view()
        .into_shape_with_order((h * wd, co))
        .expect("grad reshape");
    let dw = cols.t().dot(&g2);
    Ok(dw
        .into_shape_with_order(IxDyn(&[k, k, ci, co]))
        .expect("kernel grad")
        .into_dyn())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Interp {
    Nearest,
    Bilinear,
}

/// Source taps along one axis: `(i0, i1, weight of i1)`.
fn taps(n_in: usize, n_out: usize, mode: Interp) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| match mode {
            Interp::Nearest => {
                let i = ((o as f64 * scale).floor() as usize).min(n_in - 1);
                (i, i, 0.0)
            }
            Interp::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            }
        })
        .collect()
}

pub(crate) fn resize_hw<T: Scalar>(
    x: &NdArray<T>,
    out_h: usize,
    out_w: usize,
    mode: Interp,
) -> Result<NdArray<T>> {
    if x.ndim() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "upsample",
            format!("input {:?} to {}x{}", x.shape(), out_h, out_w),
        ));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = taps(h, out_h, mode);
    let tx = taps(w, out_w, mode);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard");
    let mut out = vec![T::zero(); out_h * out_w * c];
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        let (wy0, wy1) = (T::lit(1.0 - ly), T::lit(ly));
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            let (wx0, wx1) = (T::lit(1.0 - lx), T::lit(lx));
            let dst = (oy * out_w + ox) * c;
            let p00 = (y0 * w + x0) * c;
            let p01 = (y0 * w + x1) * c;
            let p10 = (y1 * w + x0) * c;
            let p11 = (y1 * w + x1) * c;
            for ch in 0..c {
                out[dst + ch] = wy0 * (wx0 * xs[p00 + ch] + wx1 * xs[p01 + ch])
                    + wy1 * (wx0 * xs[p10 + ch] + wx1 * xs[p11 + ch]);
            }
        }
    }
    Ok(NdArray::from_shape_vec(IxDyn(&[out_h, out_w, c]), out).expect("resize size"))
}

/// Adjoint of `resize_hw` from `(in_h, in_w)`: scatters `g` back onto the source grid.
pub(crate) fn resize_hw_adjoint<T: Scalar>(
    g: &NdArray<T>,
    in_h: usize,
    in_w: usize,
    mode: Interp,
) -> Result<NdArray<T>> {
    if g.ndim() != 3 {
        return Err(Error::shape("upsample_adjoint", format!("{:?}", g.shape())));
    }
    let (out_h, out_w, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(g.clone());
    }
    let ty = taps(in_h, out_h, mode);
    let tx = taps(in_w, out_w, mode);
    let g = g.as_standard_layout();
    let gs = g.as_slice().expect("standard");
    let mut x = vec![T::zero(); in_h * in_w * c];
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        let (wy0, wy1) = (T::lit(1.0 - ly), T::lit(ly));
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            let (wx0, wx1) = (T::lit(1.0 - lx), T::lit(lx));
            let src = (oy * out_w + ox) * c;
            let taps = [
                ((y0 * in_w + x0) * c, wy0 * wx0),
                ((y0 * in_w + x1) * c, wy0 * wx1),
                ((y1 * in_w + x0) * c, wy1 * wx0),
                ((y1 * in_w + x1) * c, wy1 * wx1),
            ];
            for (p, wt) in taps {
                for ch in 0..c {
                    x[p + ch] += wt * gs[src + ch];
                }
            }
        }
    }
    Ok(NdArray::from_shape_vec(IxDyn(&[in_h, in_w, c]), x).expect("adjoint size"))
}
