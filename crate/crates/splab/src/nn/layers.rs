//! Differentiable ops: dense, 3x3 convolution (im2col), 2x2 max-pool,
//! batch norm, global average pooling and residual blocks.
//!
//! Activations flow as dynamic-rank tensors in NHWC layout; each op's
//! forward pass optionally records a cache that its backward pass consumes.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2, Ix4};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Scalar};

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the batch statistic blended into the running estimate.
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batch norm uses batch statistics (and records running-stat
/// updates) or the stored running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Residual connection variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Shortcut {
    Identity,
    /// Stride-2 spatial subsample with zero padding up to `out_c` channels
    /// (the parameter-free shortcut used by CIFAR ResNets).
    DownsamplePad { in_c: usize, out_c: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Flatten,
    Dense { name: String, in_dim: usize, out_dim: usize },
    Relu,
    Conv3x3 { name: String, in_c: usize, out_c: usize, stride: usize, pad: usize, bias: bool },
    MaxPool2,
    BatchNorm { name: String, channels: usize },
    GlobalAvgPool,
    Residual { body: Vec<Op>, shortcut: Shortcut },
}

/// Per-op state recorded during a caching forward pass.
pub enum OpCache<F> {
    Flatten { in_shape: Vec<usize> },
    Dense { x: Array2<F> },
    Relu { mask: Vec<u8> },
    Conv { col: Array2<F>, in_shape: [usize; 4] },
    MaxPool { argmax: Vec<u32>, in_shape: [usize; 4] },
    BatchNorm { xhat: Array4<F>, invstd: Array1<F>, batch_mean: Option<Array1<f64>>, batch_var: Option<Array1<f64>> },
    GlobalAvgPool { in_shape: [usize; 4] },
    Residual { body: Vec<OpCache<F>>, in_shape: [usize; 4] },
}

fn param<'a, F: Scalar>(params: &'a ParamSet<F>, name: &str) -> Result<&'a crate::tensor::Tensor<F>> {
    params.get(name).ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
}

fn as2<F: Scalar>(t: &crate::tensor::Tensor<F>) -> ArrayView2<'_, F> {
    t.view().into_dimensionality::<Ix2>().expect("parameter stored with wrong rank")
}

fn as1<F: Scalar>(t: &crate::tensor::Tensor<F>) -> ArrayView1<'_, F> {
    t.view().into_dimensionality::<Ix1>().expect("parameter stored with wrong rank")
}

fn to4<F: Scalar>(x: ArrayD<F>, what: &str) -> Result<Array4<F>> {
    x.into_dimensionality::<Ix4>()
        .map_err(|_| Error::Shape(format!("{what}: expected a (batch, h, w, c) activation")))
}

/// Gathers 3x3 patches into a `(b*oh*ow, 9*c)` matrix. Padding slots stay zero.
fn im2col<F: Scalar>(x: &Array4<F>, stride: usize, pad: usize) -> Array2<F> {
    let (b, h, w, c) = x.dim();
    let oh = (h + 2 * pad - 3) / stride + 1;
    let ow = (w + 2 * pad - 3) / stride + 1;
    let mut col = Array2::<F>::zeros((b * oh * ow, 9 * c));
    let xs = x.as_slice().expect("im2col input must be standard layout");
    let cs = col.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = ((bi * oh + oy) * ow + ox) * 9 * c;
                for ky in 0..3 {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds patch gradients back to input positions (inverse of `im2col`).
fn col2im<F: Scalar>(dcol: &Array2<F>, in_shape: [usize; 4], stride: usize, pad: usize) -> Array4<F> {
    let [b, h, w, c] = in_shape;
    let oh = (h + 2 * pad - 3) / stride + 1;
    let ow = (w + 2 * pad - 3) / stride + 1;
    let mut dx = Array4::<F>::zeros((b, h, w, c));
    let ds = dcol.as_slice().expect("col2im input must be standard layout");
    let xs = dx.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = ((bi * oh + oy) * ow + ox) * 9 * c;
                for ky in 0..3 {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for k in 0..c {
                            xs[dst + k] = xs[dst + k] + ds[src + k];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn downsample_pad<F: Scalar>(x: &Array4<F>, out_c: usize) -> Array4<F> {
    let (b, h, w, c) = x.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut y = Array4::<F>::zeros((b, oh, ow, out_c));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    y[(bi, oy, ox, ci)] = x[(bi, 2 * oy, 2 * ox, ci)];
                }
            }
        }
    }
    y
}

fn downsample_pad_backward<F: Scalar>(dy: &Array4<F>, in_shape: [usize; 4]) -> Array4<F> {
    let [b, h, w, c] = in_shape;
    let mut dx = Array4::<F>::zeros((b, h, w, c));
    let (_, oh, ow, _) = dy.dim();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    dx[(bi, 2 * oy, 2 * ox, ci)] = dy[(bi, oy, ox, ci)];
                }
            }
        }
    }
    dx
}

impl Op {
    /// Runs the op, pushing a backward cache when `caches` is provided.
    pub fn forward<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        buffers: &ParamSet<F>,
        x: ArrayD<F>,
        mode: Mode,
        caches: Option<&mut Vec<OpCache<F>>>,
    ) -> Result<ArrayD<F>> {
        match self {
            Op::Flatten => {
                let in_shape = x.shape().to_vec();
                let b = in_shape[0];
                let cols: usize = in_shape[1..].iter().product();
                let x = if x.is_standard_layout() { x } else { x.as_standard_layout().into_owned() };
                let y = x
                    .into_shape_with_order((b, cols))
                    .map_err(|e| Error::Shape(format!("flatten: {e}")))?;
                if let Some(c) = caches {
                    c.push(OpCache::Flatten { in_shape });
                }
                Ok(y.into_dyn())
            }
            Op::Dense { name, in_dim, out_dim } => {
                let x2 = x
                    .into_dimensionality::<Ix2>()
                    .map_err(|_| Error::Shape(format!("{name}: dense input must be 2-d")))?;
                if x2.ncols() != *in_dim {
                    return Err(Error::Shape(format!(
                        "{name}: expected {in_dim} input features, got {}",
                        x2.ncols()
                    )));
                }
                let w = as2(param(params, &format!("{name}.w"))?);
                let b = as1(param(params, &format!("{name}.b"))?);
                let mut y = x2.dot(&w);
                debug_assert_eq!(y.ncols(), *out_dim);
                for mut row in y.rows_mut() {
                    row += &b;
                }
                if let Some(c) = caches {
                    c.push(OpCache::Dense { x: x2 });
                }
                Ok(y.into_dyn())
            }
            Op::Relu => {
                let y = x.mapv_into(|v| if v > F::zero() { v } else { F::zero() });
                if let Some(c) = caches {
                    let mask = y.iter().map(|&v| u8::from(v > F::zero())).collect();
                    c.push(OpCache::Relu { mask });
                }
                Ok(y)
            }
            Op::Conv3x3 { name, in_c, out_c, stride, pad, bias } => {
                let x4 = to4(x, name)?;
                let (b, h, w, c) = x4.dim();
                if c != *in_c {
                    return Err(Error::Shape(format!("{name}: expected {in_c} channels, got {c}")));
                }
                if h + 2 * pad < 3 || w + 2 * pad < 3 {
                    return Err(Error::Shape(format!("{name}: input {h}x{w} too small for a 3x3 kernel")));
                }
                let oh = (h + 2 * pad - 3) / stride + 1;
                let ow = (w + 2 * pad - 3) / stride + 1;
                let col = im2col(&x4, *stride, *pad);
                let wt = param(params, &format!("{name}.w"))?;
                let wmat = wt
                    .to_shape((9 * in_c, *out_c))
                    .map_err(|e| Error::Shape(format!("{name}: kernel reshape: {e}")))?;
                let mut y = col.dot(&wmat);
                if *bias {
                    let bv = as1(param(params, &format!("{name}.b"))?);
                    for mut row in y.rows_mut() {
                        row += &bv;
                    }
                }
                if let Some(cs) = caches {
                    cs.push(OpCache::Conv { col, in_shape: [b, h, w, c] });
                }
                let y = y
                    .into_shape_with_order((b, oh, ow, *out_c))
                    .map_err(|e| Error::Shape(format!("{name}: output reshape: {e}")))?;
                Ok(y.into_dyn())
            }
            Op::MaxPool2 => {
                let x4 = to4(x, "maxpool")?;
                let (b, h, w, c) = x4.dim();
                let (oh, ow) = (h / 2, w / 2);
                if oh == 0 || ow == 0 {
                    return Err(Error::Shape(format!("maxpool: input {h}x{w} too small")));
                }
                let xs = x4.as_slice().expect("maxpool input must be standard layout");
                let mut y = Array4::<F>::zeros((b, oh, ow, c));
                let ys = y.as_slice_mut().unwrap();
                let mut argmax = vec![0u32; b * oh * ow * c];
                for bi in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let out = ((bi * oh + oy) * ow + ox) * c;
                            for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let src = ((bi * h + 2 * oy + dy_) * w + 2 * ox + dx_) * c;
                                for k in 0..c {
                                    let v = xs[src + k];
                                    // first strict maximum wins on ties
                                    if (dy_, dx_) == (0, 0) || v > ys[out + k] {
                                        ys[out + k] = v;
                                        argmax[out + k] = (src + k) as u32;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(cs) = caches {
                    cs.push(OpCache::MaxPool { argmax, in_shape: [b, h, w, c] });
                } else {
                    drop(argmax);
                }
                Ok(y.into_dyn())
            }
            Op::BatchNorm { name, channels } => {
                let x4 = to4(x, name)?;
                let (b, h, w, c) = x4.dim();
                if c != *channels {
                    return Err(Error::Shape(format!("{name}: expected {channels} channels, got {c}")));
                }
                let n = (b * h * w) as f64;
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mut sum = vec![0.0f64; c];
                        let mut sumsq = vec![0.0f64; c];
                        for chunk in x4.as_slice().unwrap().chunks_exact(c) {
                            for (ci, &v) in chunk.iter().enumerate() {
                                let v = v.into_f64();
                                sum[ci] += v;
                                sumsq[ci] += v * v;
                            }
                        }
                        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
                        let var: Vec<f64> = sumsq
                            .iter()
                            .zip(&mean)
                            .map(|(sq, m)| (sq / n - m * m).max(0.0))
                            .collect();
                        (mean, var)
                    }
                    Mode::Eval => {
                        let rm = as1(param(buffers, &format!("{name}.mean"))?);
                        let rv = as1(param(buffers, &format!("{name}.var"))?);
                        (rm.iter().map(|v| v.into_f64()).collect(), rv.iter().map(|v| v.into_f64()).collect())
                    }
                };
                let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = x4;
                for chunk in xhat.as_slice_mut().unwrap().chunks_exact_mut(c) {
                    for (ci, v) in chunk.iter_mut().enumerate() {
                        *v = F::from_f64((v.into_f64() - mean[ci]) * invstd[ci]);
                    }
                }
                let gamma = as1(param(params, &format!("{name}.gamma"))?);
                let beta = as1(param(params, &format!("{name}.beta"))?);
                let mut y = xhat.clone();
                for chunk in y.as_slice_mut().unwrap().chunks_exact_mut(c) {
                    for (ci, v) in chunk.iter_mut().enumerate() {
                        *v = *v * gamma[ci] + beta[ci];
                    }
                }
                if let Some(cs) = caches {
                    let (batch_mean, batch_var) = if mode == Mode::Train {
                        // running-var update uses the unbiased estimate
                        let unbias = n / (n - 1.0).max(1.0);
                        (
                            Some(Array1::from_vec(mean.clone())),
                            Some(Array1::from_vec(var.iter().map(|v| v * unbias).collect())),
                        )
                    } else {
                        (None, None)
                    };
                    cs.push(OpCache::BatchNorm {
                        xhat,
                        invstd: Array1::from_vec(invstd.iter().map(|&v| F::from_f64(v)).collect()),
                        batch_mean,
                        batch_var,
                    });
                }
                Ok(y.into_dyn())
            }
            Op::GlobalAvgPool => {
                let x4 = to4(x, "global_avg_pool")?;
                let (b, h, w, c) = x4.dim();
                let mut y = Array2::<F>::zeros((b, c));
                for bi in 0..b {
                    for ci in 0..c {
                        let mut acc = 0.0f64;
                        for yi in 0..h {
                            for xi in 0..w {
                                acc += x4[(bi, yi, xi, ci)].into_f64();
                            }
                        }
                        y[(bi, ci)] = F::from_f64(acc / (h * w) as f64);
                    }
                }
                if let Some(cs) = caches {
                    cs.push(OpCache::GlobalAvgPool { in_shape: [b, h, w, c] });
                }
                Ok(y.into_dyn())
            }
            Op::Residual { body, shortcut } => {
                let x4 = to4(x, "residual")?;
                let in_shape = {
                    let (b, h, w, c) = x4.dim();
                    [b, h, w, c]
                };
                let x_short = match shortcut {
                    Shortcut::Identity => x4.clone(),
                    Shortcut::DownsamplePad { out_c, .. } => downsample_pad(&x4, *out_c),
                };
                let mut body_caches = caches.is_some().then(Vec::new);
                let y_body = forward_ops(body, params, buffers, x4.into_dyn(), mode, body_caches.as_mut())?;
                let mut y = to4(y_body, "residual body output")?;
                if y.dim() != x_short.dim() {
                    return Err(Error::Shape(format!(
                        "residual: body output {:?} does not match shortcut {:?}",
                        y.dim(),
                        x_short.dim()
                    )));
                }
                y += &x_short;
                if let Some(cs) = caches {
                    cs.push(OpCache::Residual { body: body_caches.unwrap(), in_shape });
                }
                Ok(y.into_dyn())
            }
        }
    }

    /// Consumes this op's cache and propagates `dy`, accumulating parameter
    /// gradients into `grads` (which must be laid out like the model params).
    pub fn backward<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        cache: OpCache<F>,
        dy: ArrayD<F>,
        grads: &mut ParamSet<F>,
    ) -> Result<ArrayD<F>> {
        match (self, cache) {
            (Op::Flatten, OpCache::Flatten { in_shape }) => {
                let dx = dy
                    .into_shape_with_order(in_shape)
                    .map_err(|e| Error::Shape(format!("flatten backward: {e}")))?;
                Ok(dx)
            }
            (Op::Dense { name, .. }, OpCache::Dense { x }) => {
                let dy2 = dy.into_dimensionality::<Ix2>().expect("dense grad rank");
                let w = as2(param(params, &format!("{name}.w"))?);
                let dw = x.t().dot(&dy2);
                let db = dy2.sum_axis(Axis(0));
                let dx = dy2.dot(&w.t());
                grads
                    .get_mut(&format!("{name}.w"))
                    .expect("grad slot")
                    .assign(&dw.into_dyn());
                grads
                    .get_mut(&format!("{name}.b"))
                    .expect("grad slot")
                    .assign(&db.into_dyn());
                Ok(dx.into_dyn())
            }
            (Op::Relu, OpCache::Relu { mask }) => {
                let mut dx = dy;
                for (d, &m) in dx.iter_mut().zip(&mask) {
                    if m == 0 {
                        *d = F::zero();
                    }
                }
                Ok(dx)
            }
            (Op::Conv3x3 { name, in_c, out_c, stride, pad, bias }, OpCache::Conv { col, in_shape }) => {
                let dy4 = to4(dy, name)?;
                let rows = dy4.len() / out_c;
                let dy_mat = dy4
                    .into_shape_with_order((rows, *out_c))
                    .map_err(|e| Error::Shape(format!("{name}: grad reshape: {e}")))?;
                let dw = col.t().dot(&dy_mat); // (9*in_c, out_c)
                let gw = grads.get_mut(&format!("{name}.w")).expect("grad slot");
                gw.as_slice_mut()
                    .expect("standard layout")
                    .copy_from_slice(dw.as_slice().expect("standard layout"));
                if *bias {
                    let db = dy_mat.sum_axis(Axis(0));
                    grads
                        .get_mut(&format!("{name}.b"))
                        .expect("grad slot")
                        .assign(&db.into_dyn());
                }
                let wt = param(params, &format!("{name}.w"))?;
                let wmat = wt.to_shape((9 * in_c, *out_c)).expect("kernel reshape");
                let dcol = dy_mat.dot(&wmat.t());
                Ok(col2im(&dcol, in_shape, *stride, *pad).into_dyn())
            }
            (Op::MaxPool2, OpCache::MaxPool { argmax, in_shape }) => {
                let mut dx = Array4::<F>::zeros((in_shape[0], in_shape[1], in_shape[2], in_shape[3]));
                let xs = dx.as_slice_mut().unwrap();
                for (d, &src) in dy.iter().zip(&argmax) {
                    xs[src as usize] = xs[src as usize] + *d;
                }
                Ok(dx.into_dyn())
            }
            (Op::BatchNorm { name, channels }, OpCache::BatchNorm { xhat, invstd, batch_mean, .. }) => {
                let c = *channels;
                let dy4 = to4(dy, name)?;
                let (b, h, w, _) = dy4.dim();
                let n = (b * h * w) as f64;
                let gamma = as1(param(params, &format!("{name}.gamma"))?);
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (dchunk, xchunk) in dy4
                    .as_slice()
                    .unwrap()
                    .chunks_exact(c)
                    .zip(xhat.as_slice().unwrap().chunks_exact(c))
                {
                    for ci in 0..c {
                        let d = dchunk[ci].into_f64();
                        sum_dy[ci] += d;
                        sum_dy_xhat[ci] += d * xchunk[ci].into_f64();
                    }
                }
                let mut dx = dy4;
                if batch_mean.is_some() {
                    // batch-stat normalization: mean/var depend on x
                    for (dchunk, xchunk) in dx
                        .as_slice_mut()
                        .unwrap()
                        .chunks_exact_mut(c)
                        .zip(xhat.as_slice().unwrap().chunks_exact(c))
                    {
                        for ci in 0..c {
                            let g = gamma[ci].into_f64() * invstd[ci].into_f64();
                            let d = dchunk[ci].into_f64();
                            let xh = xchunk[ci].into_f64();
                            dchunk[ci] = F::from_f64(
                                g * (d - sum_dy[ci] / n - xh * sum_dy_xhat[ci] / n),
                            );
                        }
                    }
                } else {
                    // running stats are constants: the op is affine in x
                    for dchunk in dx.as_slice_mut().unwrap().chunks_exact_mut(c) {
                        for ci in 0..c {
                            dchunk[ci] = F::from_f64(
                                dchunk[ci].into_f64() * gamma[ci].into_f64() * invstd[ci].into_f64(),
                            );
                        }
                    }
                }
                grads
                    .get_mut(&format!("{name}.gamma"))
                    .expect("grad slot")
                    .as_slice_mut()
                    .unwrap()
                    .iter_mut()
                    .zip(&sum_dy_xhat)
                    .for_each(|(g, &v)| *g = F::from_f64(v));
                grads
                    .get_mut(&format!("{name}.beta"))
                    .expect("grad slot")
                    .as_slice_mut()
                    .unwrap()
                    .iter_mut()
                    .zip(&sum_dy)
                    .for_each(|(g, &v)| *g = F::from_f64(v));
                Ok(dx.into_dyn())
            }
            (Op::GlobalAvgPool, OpCache::GlobalAvgPool { in_shape }) => {
                let dy2 = dy.into_dimensionality::<Ix2>().expect("gap grad rank");
                let [b, h, w, c] = in_shape;
                let scale = F::from_f64(1.0 / (h * w) as f64);
                let mut dx = Array4::<F>::zeros((b, h, w, c));
                for bi in 0..b {
                    for ci in 0..c {
                        let g = dy2[(bi, ci)] * scale;
                        for yi in 0..h {
                            for xi in 0..w {
                                dx[(bi, yi, xi, ci)] = g;
                            }
                        }
                    }
                }
                Ok(dx.into_dyn())
            }
            (Op::Residual { body, shortcut }, OpCache::Residual { body: mut body_caches, in_shape }) => {
                let dy4 = to4(dy, "residual")?;
                let mut d = dy4.clone().into_dyn();
                for op in body.iter().rev() {
                    let cache = body_caches.pop().expect("residual cache underflow");
                    d = op.backward(params, cache, d, grads)?;
                }
                let d_body = to4(d, "residual body grad")?;
                let d_short = match shortcut {
                    Shortcut::Identity => dy4,
                    Shortcut::DownsamplePad { .. } => downsample_pad_backward(&dy4, in_shape),
                };
                let mut dx = d_body;
                dx += &d_short;
                Ok(dx.into_dyn())
            }
            _ => unreachable!("op/cache mismatch: forward and backward walked different graphs"),
        }
    }
}

/// Runs `ops` left to right.
pub fn forward_ops<F: Scalar>(
    ops: &[Op],
    params: &ParamSet<F>,
    buffers: &ParamSet<F>,
    mut x: ArrayD<F>,
    mode: Mode,
    mut caches: Option<&mut Vec<OpCache<F>>>,
) -> Result<ArrayD<F>> {
    for op in ops {
        x = op.forward(params, buffers, x, mode, caches.as_deref_mut())?;
    }
    Ok(x)
}

/// Walks `ops` right to left, consuming `caches`; returns the input gradient.
pub fn backward_ops<F: Scalar>(
    ops: &[Op],
    params: &ParamSet<F>,
    caches: &mut Vec<OpCache<F>>,
    mut dy: ArrayD<F>,
    grads: &mut ParamSet<F>,
) -> Result<ArrayD<F>> {
    for op in ops.iter().rev() {
        let cache = caches.pop().expect("cache underflow: forward/backward mismatch");
        dy = op.backward(params, cache, dy, grads)?;
    }
    Ok(dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::{Array, IxDyn};

    fn rand_array4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut r = rng::stream(seed, "layers/test");
        Array::from_shape_simple_fn(shape, || rng::uniform(&mut r, -1.0, 1.0))
    }

    /// Direct (quadruple-loop) 3x3 convolution used as the im2col oracle.
    fn conv_reference(
        x: &Array4<f64>,
        w: &ndarray::ArrayView2<'_, f64>, // (9*in_c, out_c)
        stride: usize,
        pad: usize,
        out_c: usize,
    ) -> Array4<f64> {
        let (b, h, wd, c) = x.dim();
        let oh = (h + 2 * pad - 3) / stride + 1;
        let ow = (wd + 2 * pad - 3) / stride + 1;
        let mut y = Array4::<f64>::zeros((b, oh, ow, out_c));
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..out_c {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    acc += x[(bi, iy as usize, ix as usize, ci)]
                                        * w[((ky * 3 + kx) * c + ci, oc)];
                                }
                            }
                        }
                        y[(bi, oy, ox, oc)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_convolution() {
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x = rand_array4((2, 6, 6, 3), 11);
            let mut r = rng::stream(12, "layers/test-w");
            let w = Array::from_shape_simple_fn((3usize, 3, 3, 4), || rng::uniform(&mut r, -1.0, 1.0));
            let mut params: ParamSet<f64> = ParamSet::new();
            params.insert("c.w", w.clone().into_dyn()).unwrap();
            let op = Op::Conv3x3 { name: "c".into(), in_c: 3, out_c: 4, stride, pad, bias: false };
            let y = op
                .forward(&params, &ParamSet::new(), x.clone().into_dyn(), Mode::Eval, None)
                .unwrap();
            let wmat = w.to_shape((27, 4)).unwrap();
            let want = conv_reference(&x, &wmat.view(), stride, pad, 4);
            let y4 = y.into_dimensionality::<Ix4>().unwrap();
            assert_eq!(y4.dim(), want.dim(), "stride={stride} pad={pad}");
            for (a, b) in y4.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "stride={stride} pad={pad}");
            }
        }
    }

    #[test]
    fn maxpool_picks_first_maximum_and_routes_gradient() {
        let mut x = Array4::<f64>::zeros((1, 2, 2, 1));
        x[(0, 0, 0, 0)] = 5.0;
        x[(0, 0, 1, 0)] = 5.0; // tie: first position must win
        x[(0, 1, 0, 0)] = -1.0;
        x[(0, 1, 1, 0)] = 2.0;
        let op = Op::MaxPool2;
        let mut caches = Vec::new();
        let params: ParamSet<f64> = ParamSet::new();
        let y = op
            .forward(&params, &ParamSet::new(), x.into_dyn(), Mode::Eval, Some(&mut caches))
            .unwrap();
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![5.0]);
        let mut grads = ParamSet::new();
        let dy = Array::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0f64);
        let dx = op.backward(&params, caches.pop().unwrap(), dy, &mut grads).unwrap();
        let got: Vec<f64> = dx.iter().copied().collect();
        assert_eq!(got, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn downsample_pad_subsamples_and_zero_fills() {
        let x = rand_array4((1, 4, 4, 2), 3);
        let y = downsample_pad(&x, 4);
        assert_eq!(y.dim(), (1, 2, 2, 4));
        assert_eq!(y[(0, 1, 1, 0)], x[(0, 2, 2, 0)]);
        assert_eq!(y[(0, 0, 0, 2)], 0.0);
        assert_eq!(y[(0, 1, 0, 3)], 0.0);
    }

    #[test]
    fn batchnorm_train_normalizes_per_channel() {
        let x = rand_array4((4, 3, 3, 2), 21);
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("bn.gamma", Array::ones(IxDyn(&[2]))).unwrap();
        params.insert("bn.beta", Array::zeros(IxDyn(&[2]))).unwrap();
        let op = Op::BatchNorm { name: "bn".into(), channels: 2 };
        let y = op
            .forward(&params, &ParamSet::new(), x.into_dyn(), Mode::Train, None)
            .unwrap();
        let y4 = y.into_dimensionality::<Ix4>().unwrap();
        for ci in 0..2 {
            let vals: Vec<f64> = y4
                .indexed_iter()
                .filter(|((_, _, _, c), _)| *c == ci)
                .map(|(_, &v)| v)
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ci} var {var}");
        }
    }
}
