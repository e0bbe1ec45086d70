//! Forward kernels and their adjoints.
//!
//! Plain loops over row-major buffers, one function per primitive. Every
//! kernel is deterministic: fixed iteration order, no parallelism. The
//! `*_vjp*` functions push a cotangent `g` back through the primitive.

use crate::tensor::{numel_of, strides_of, Real, Tensor};
use crate::{Error, Result};

pub fn add_in_place(acc: &mut Tensor, rhs: &Tensor) {
    debug_assert_eq!(acc.shape(), rhs.shape());
    let r = rhs.data();
    for (a, b) in acc.data_mut().iter_mut().zip(r) {
        *a += *b;
    }
}

pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "elementwise op on mismatched shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

// ---------------------------------------------------------------------------
// Reductions and reshapes

/// Mean along one axis, keeping it with extent 1.
pub fn axis_mean(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!("axis {} out of range for rank {}", axis, x.rank())));
    }
    let shape = x.shape();
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = 1;
    let mut out = vec![0.0 as Real; outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let mut s = 0.0;
            for l in 0..len {
                s += xd[(o * len + l) * inner + i];
            }
            out[o * inner + i] = s / len as Real;
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn axis_mean_vjp(g: &Tensor, in_shape: &[usize], axis: usize) -> Tensor {
    let len = in_shape[axis];
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let gd = g.data();
    let mut dx = vec![0.0 as Real; numel_of(in_shape)];
    let scale = 1.0 / len as Real;
    for o in 0..outer {
        for i in 0..inner {
            let gv = gd[o * inner + i] * scale;
            for l in 0..len {
                dx[(o * len + l) * inner + i] = gv;
            }
        }
    }
    Tensor::new(in_shape, dx).expect("shape fixed")
}

pub fn permute(x: &Tensor, order: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if order.len() != r || order.iter().any(|&i| i >= r || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Shape(format!("invalid permutation {:?} for rank {}", order, r)));
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = order.iter().map(|&i| in_shape[i]).collect();
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0 as Real; x.numel()];
    let mut idx = vec![0usize; r];
    let xd = x.data();
    for &v in xd {
        let mut oflat = 0;
        for j in 0..r {
            oflat += idx[order[j]] * out_strides[j];
        }
        out[oflat] = v;
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn invert_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

// ---------------------------------------------------------------------------
// Matrix multiply, batched over equal leading axes

pub struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<MatmulDims> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(Error::Shape(format!(
            "matmul expects equal leading axes and rank >= 2, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul contraction mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(MatmulDims { batch: a.shape()[..ra - 2].iter().product(), m, k, n })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let MatmulDims { batch, m, k, n } = matmul_dims(a, b)?;
    let mut out_shape = a.shape().to_vec();
    let r = out_shape.len();
    out_shape[r - 1] = n;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0 as Real; batch * m * n];
    for t in 0..batch {
        let (ao, bo, co) = (t * m * k, t * k * n, t * m * n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += ad[ao + i * k + p] * bd[bo + p * n + j];
                }
                out[co + i * n + j] = s;
            }
        }
    }
    Tensor::new(&out_shape, out)
}

/// dA = g . B^T, batched.
pub fn matmul_vjp_a(g: &Tensor, b: &Tensor) -> Tensor {
    let rb = b.rank();
    let (k, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    let rg = g.rank();
    let m = g.shape()[rg - 2];
    let batch: usize = g.shape()[..rg - 2].iter().product();
    let mut da_shape = g.shape().to_vec();
    da_shape[rg - 1] = k;
    let (gd, bd) = (g.data(), b.data());
    let mut da = vec![0.0 as Real; batch * m * k];
    for t in 0..batch {
        let (go, bo, ao) = (t * m * n, t * k * n, t * m * k);
        for i in 0..m {
            for p in 0..k {
                let mut s = 0.0;
                for j in 0..n {
                    s += gd[go + i * n + j] * bd[bo + p * n + j];
                }
                da[ao + i * k + p] = s;
            }
        }
    }
    Tensor::new(&da_shape, da).expect("shape fixed")
}

/// dB = A^T . g, batched.
pub fn matmul_vjp_b(a: &Tensor, g: &Tensor) -> Tensor {
    let ra = a.rank();
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let rg = g.rank();
    let n = g.shape()[rg - 1];
    let batch: usize = g.shape()[..rg - 2].iter().product();
    let mut db_shape = a.shape().to_vec();
    db_shape[ra - 2] = k;
    db_shape[ra - 1] = n;
    let (ad, gd) = (a.data(), g.data());
    let mut db = vec![0.0 as Real; batch * k * n];
    for t in 0..batch {
        let (ao, go, bo) = (t * m * k, t * m * n, t * k * n);
        for p in 0..k {
            for j in 0..n {
                let mut s = 0.0;
                for i in 0..m {
                    s += ad[ao + i * k + p] * gd[go + i * n + j];
                }
                db[bo + p * n + j] = s;
            }
        }
    }
    Tensor::new(&db_shape, db).expect("shape fixed")
}

// ---------------------------------------------------------------------------
// Convolutions on [D, h, w] maps

/// 3x3 depthwise convolution, stride 1, zero padding 1. Channel d of the
/// output depends only on channel d of the input: 9D weights + D biases.
pub fn depthwise_conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d, h, wd) = x.dhw()?;
    if w.shape() != [d, 3, 3] || b.shape() != [d] {
        return Err(Error::Shape(format!(
            "depthwise conv weights {:?}/{:?} do not match {} channels",
            w.shape(),
            b.shape(),
            d
        )));
    }
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0 as Real; d * h * wd];
    for c in 0..d {
        let xo = c * h * wd;
        let wo = c * 9;
        for i in 0..h {
            for j in 0..wd {
                let mut s = bd[c];
                for u in 0..3usize {
                    let y = i as isize + u as isize - 1;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for v in 0..3usize {
                        let xj = j as isize + v as isize - 1;
                        if xj < 0 || xj >= wd as isize {
                            continue;
                        }
                        s += wdat[wo + u * 3 + v] * xd[xo + y as usize * wd + xj as usize];
                    }
                }
                out[xo + i * wd + j] = s;
            }
        }
    }
    Tensor::new(&[d, h, wd], out)
}

pub fn depthwise_conv3x3_vjp(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (d, h, wd) = x.dhw().expect("checked in forward");
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![0.0 as Real; d * h * wd];
    let mut dw = vec![0.0 as Real; d * 9];
    let mut db = vec![0.0 as Real; d];
    for c in 0..d {
        let xo = c * h * wd;
        let wo = c * 9;
        for i in 0..h {
            for j in 0..wd {
                let gv = gd[xo + i * wd + j];
                db[c] += gv;
                for u in 0..3usize {
                    let y = i as isize + u as isize - 1;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for v in 0..3usize {
                        let xj = j as isize + v as isize - 1;
                        if xj < 0 || xj >= wd as isize {
                            continue;
                        }
                        let xi = xo + y as usize * wd + xj as usize;
                        dx[xi] += wdat[wo + u * 3 + v] * gv;
                        dw[wo + u * 3 + v] += xd[xi] * gv;
                    }
                }
            }
        }
    }
    (
        Tensor::new(&[d, h, wd], dx).expect("shape fixed"),
        Tensor::new(&[d, 3, 3], dw).expect("shape fixed"),
        Tensor::new(&[d], db).expect("shape fixed"),
    )
}

/// Dense 2-D convolution: x [C,h,w], w [O,C,kh,kw], b [O].
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c, h, wd) = x.dhw()?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != c {
        return Err(Error::Shape(format!(
            "conv2d weight {:?} does not match {} input channels",
            ws, c
        )));
    }
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    if b.shape() != [o] {
        return Err(Error::Shape(format!("conv2d bias {:?} does not match {o} filters", b.shape())));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::Shape("conv2d kernel larger than padded input".into()));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0 as Real; o * ho * wo];
    for f in 0..o {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = bd[f];
                for ci in 0..c {
                    for u in 0..kh {
                        let y = (i * stride + u) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let xj = (j * stride + v) as isize - pad as isize;
                            if xj < 0 || xj >= wd as isize {
                                continue;
                            }
                            s += wdat[((f * c + ci) * kh + u) * kw + v]
                                * xd[(ci * h + y as usize) * wd + xj as usize];
                        }
                    }
                }
                out[(f * ho + i) * wo + j] = s;
            }
        }
    }
    Tensor::new(&[o, ho, wo], out)
}

pub fn conv2d_vjp(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, wd) = x.dhw().expect("checked in forward");
    let ws = w.shape();
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let gs = g.shape();
    let (ho, wo) = (gs[1], gs[2]);
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![0.0 as Real; c * h * wd];
    let mut dw = vec![0.0 as Real; o * c * kh * kw];
    let mut db = vec![0.0 as Real; o];
    for f in 0..o {
        for i in 0..ho {
            for j in 0..wo {
                let gv = gd[(f * ho + i) * wo + j];
                db[f] += gv;
                for ci in 0..c {
                    for u in 0..kh {
                        let y = (i * stride + u) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let xj = (j * stride + v) as isize - pad as isize;
                            if xj < 0 || xj >= wd as isize {
                                continue;
                            }
                            let xi = (ci * h + y as usize) * wd + xj as usize;
                            let wi = ((f * c + ci) * kh + u) * kw + v;
                            dx[xi] += wdat[wi] * gv;
                            dw[wi] += xd[xi] * gv;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(&[c, h, wd], dx).expect("shape fixed"),
        Tensor::new(&[o, c, kh, kw], dw).expect("shape fixed"),
        Tensor::new(&[o], db).expect("shape fixed"),
    )
}

/// 3x3 average pooling, stride 1, zero padding 1, denominator fixed at 9.
pub fn avgpool3x3(x: &Tensor) -> Result<Tensor> {
    let (d, h, w) = x.dhw()?;
    let xd = x.data();
    let mut out = vec![0.0 as Real; d * h * w];
    for c in 0..d {
        let xo = c * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for u in -1isize..=1 {
                    let y = i as isize + u;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for v in -1isize..=1 {
                        let xj = j as isize + v;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        s += xd[xo + y as usize * w + xj as usize];
                    }
                }
                out[xo + i * w + j] = s / 9.0;
            }
        }
    }
    Tensor::new(&[d, h, w], out)
}

// ---------------------------------------------------------------------------
// Pointwise and normalization layers

/// Affine map on the trailing axis: x [.., In] -> [.., Out].
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r == 0 {
        return Err(Error::Shape("linear input must have rank >= 1".into()));
    }
    let inp = x.shape()[r - 1];
    if w.rank() != 2 || w.shape()[0] != inp {
        return Err(Error::Shape(format!(
            "linear weight {:?} does not match input axis {}",
            w.shape(),
            inp
        )));
    }
    let out = w.shape()[1];
    if b.shape() != [out] {
        return Err(Error::Shape(format!("linear bias {:?} does not match {out} outputs", b.shape())));
    }
    let positions = x.numel() / inp;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut y = vec![0.0 as Real; positions * out];
    for p in 0..positions {
        for o in 0..out {
            let mut s = bd[o];
            for i in 0..inp {
                s += xd[p * inp + i] * wd[i * out + o];
            }
            y[p * out + o] = s;
        }
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[r - 1] = out;
    Tensor::new(&out_shape, y)
}

pub fn linear_vjp(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let inp = w.shape()[0];
    let out = w.shape()[1];
    let positions = x.numel() / inp;
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![0.0 as Real; positions * inp];
    let mut dw = vec![0.0 as Real; inp * out];
    let mut db = vec![0.0 as Real; out];
    for p in 0..positions {
        for o in 0..out {
            let gv = gd[p * out + o];
            db[o] += gv;
            for i in 0..inp {
                dx[p * inp + i] += wd[i * out + o] * gv;
                dw[i * out + o] += xd[p * inp + i] * gv;
            }
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("shape fixed"),
        Tensor::new(w.shape(), dw).expect("shape fixed"),
        Tensor::new(&[out], db).expect("shape fixed"),
    )
}

/// Layer normalization over the leading (channel) axis at every trailing
/// position: zero mean, unit variance within `eps`, then gamma/beta.
pub fn layer_norm_cf(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: Real,
) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::Shape("layer_norm input must have rank >= 1".into()));
    }
    let d = x.shape()[0];
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Shape(format!(
            "layer_norm gamma {:?} / beta {:?} do not match {d} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let positions = x.numel() / d;
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let mut out = vec![0.0 as Real; x.numel()];
    for p in 0..positions {
        let mut mean = 0.0;
        for c in 0..d {
            mean += xd[c * positions + p];
        }
        mean /= d as Real;
        let mut var = 0.0;
        for c in 0..d {
            let dv = xd[c * positions + p] - mean;
            var += dv * dv;
        }
        var /= d as Real;
        let istd = 1.0 / (var + eps).sqrt();
        for c in 0..d {
            let xhat = (xd[c * positions + p] - mean) * istd;
            out[c * positions + p] = gd[c] * xhat + bd[c];
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn layer_norm_cf_vjp(
    x: &Tensor,
    gamma: &Tensor,
    eps: Real,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = x.shape()[0];
    let positions = x.numel() / d;
    let (xd, gd, grad) = (x.data(), gamma.data(), g.data());
    let mut dx = vec![0.0 as Real; x.numel()];
    let mut dgamma = vec![0.0 as Real; d];
    let mut dbeta = vec![0.0 as Real; d];
    for p in 0..positions {
        let mut mean = 0.0;
        for c in 0..d {
            mean += xd[c * positions + p];
        }
        mean /= d as Real;
        let mut var = 0.0;
        for c in 0..d {
            let dv = xd[c * positions + p] - mean;
            var += dv * dv;
        }
        var /= d as Real;
        let istd = 1.0 / (var + eps).sqrt();
        let mut mean_h = 0.0;
        let mut mean_hx = 0.0;
        for c in 0..d {
            let xhat = (xd[c * positions + p] - mean) * istd;
            let gv = grad[c * positions + p];
            dgamma[c] += gv * xhat;
            dbeta[c] += gv;
            let h = gv * gd[c];
            mean_h += h;
            mean_hx += h * xhat;
        }
        mean_h /= d as Real;
        mean_hx /= d as Real;
        for c in 0..d {
            let xhat = (xd[c * positions + p] - mean) * istd;
            let h = grad[c * positions + p] * gd[c];
            dx[c * positions + p] = istd * (h - mean_h - xhat * mean_hx);
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("shape fixed"),
        Tensor::new(&[d], dgamma).expect("shape fixed"),
        Tensor::new(&[d], dbeta).expect("shape fixed"),
    )
}

// ---------------------------------------------------------------------------
// Activations

fn erf_real(x: Real) -> Real {
    libm::erf(x as f64) as Real
}

const SQRT_2PI: Real = 2.506_628_274_631_000_5;

/// Exact-erf GELU: x * Phi(x).
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + erf_real(v * std::f64::consts::FRAC_1_SQRT_2 as Real)))
}

pub fn gelu_vjp(x: &Tensor, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| {
            let phi_cdf = 0.5 * (1.0 + erf_real(v * std::f64::consts::FRAC_1_SQRT_2 as Real));
            let phi_pdf = (-0.5 * v * v).exp() / SQRT_2PI;
            gv * (phi_cdf + v * phi_pdf)
        })
        .collect();
    Tensor::new(x.shape(), data).expect("shape fixed")
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!("softmax axis {} out of range", axis)));
    }
    let shape = x.shape();
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let xd = x.data();
    let mut out = vec![0.0 as Real; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut mx = Real::NEG_INFINITY;
            for l in 0..len {
                mx = mx.max(xd[at(l)]);
            }
            let mut denom = 0.0;
            for l in 0..len {
                let e = (xd[at(l)] - mx).exp();
                out[at(l)] = e;
                denom += e;
            }
            for l in 0..len {
                out[at(l)] /= denom;
            }
        }
    }
    Tensor::new(shape, out)
}

/// VJP given the softmax output `y`: dy = y * (g - sum(g * y)) along the axis.
pub fn softmax_vjp(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let shape = y.shape();
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![0.0 as Real; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut dot = 0.0;
            for l in 0..len {
                dot += gd[at(l)] * yd[at(l)];
            }
            for l in 0..len {
                dx[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
            }
        }
    }
    Tensor::new(shape, dx).expect("shape fixed")
}

// ---------------------------------------------------------------------------
// Block rearrangements

/// [C, h, w] -> [C*s*s, h/s, w/s]; input channel c at offset (a, b) lands in
/// output channel c*s*s + a*s + b. Exact inverse of `depth_to_space`.
pub fn space_to_depth(x: &Tensor, s: usize) -> Result<Tensor> {
    let (c, h, w) = x.dhw()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!("space_to_depth factor {s} does not divide {h}x{w}")));
    }
    let (ho, wo) = (h / s, w / s);
    let xd = x.data();
    let mut out = vec![0.0 as Real; c * h * w];
    for ci in 0..c {
        for a in 0..s {
            for b in 0..s {
                let co = ci * s * s + a * s + b;
                for i in 0..ho {
                    for j in 0..wo {
                        out[(co * ho + i) * wo + j] = xd[(ci * h + i * s + a) * w + j * s + b];
                    }
                }
            }
        }
    }
    Tensor::new(&[c * s * s, ho, wo], out)
}

/// [C*s*s, h, w] -> [C, h*s, w*s]; channel c*s*s + a*s + b maps to spatial
/// offset (a, b) of output channel c (sub-pixel rearrangement).
pub fn depth_to_space(x: &Tensor, s: usize) -> Result<Tensor> {
    let (cs, h, w) = x.dhw()?;
    if s == 0 || cs % (s * s) != 0 {
        return Err(Error::Shape(format!("depth_to_space factor {s} does not divide {cs} channels")));
    }
    let c = cs / (s * s);
    let (ho, wo) = (h * s, w * s);
    let xd = x.data();
    let mut out = vec![0.0 as Real; cs * h * w];
    for ci in 0..c {
        for a in 0..s {
            for b in 0..s {
                let cin = ci * s * s + a * s + b;
                for i in 0..h {
                    for j in 0..w {
                        out[(ci * ho + i * s + a) * wo + j * s + b] = xd[(cin * h + i) * w + j];
                    }
                }
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

// ---------------------------------------------------------------------------
// Losses

/// Mean cross-entropy of logits [B, k] against integer labels, via a
/// numerically stable log-sum-exp.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!(
            "cross_entropy expects [B, k] logits with B labels, got {:?} and {} labels",
            s,
            labels.len()
        )));
    }
    let (bsz, k) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
    }
    let xd = logits.data();
    let mut total = 0.0;
    for (bi, &y) in labels.iter().enumerate() {
        let row = &xd[bi * k..(bi + 1) * k];
        let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<Real>().ln();
        total += lse - row[y];
    }
    Ok(Tensor::scalar(total / bsz as Real))
}

pub fn cross_entropy_vjp(logits: &Tensor, labels: &[usize], g: Real) -> Tensor {
    let (bsz, k) = (logits.shape()[0], logits.shape()[1]);
    let xd = logits.data();
    let mut dx = vec![0.0 as Real; bsz * k];
    let scale = g / bsz as Real;
    for (bi, &y) in labels.iter().enumerate() {
        let row = &xd[bi * k..(bi + 1) * k];
        let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let denom: Real = row.iter().map(|&v| (v - mx).exp()).sum();
        for j in 0..k {
            let p = (row[j] - mx).exp() / denom;
            dx[bi * k + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
        }
    }
    Tensor::new(logits.shape(), dx).expect("shape fixed")
}
