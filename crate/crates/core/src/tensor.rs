//! Dense row-major tensors and the numeric kernels behind the tape.
//!
//! Activations are stored channel-last: linear activations are `[batch, features]`,
//! spatial activations are `[batch, height, width, channels]`. Convolution kernels
//! are `[kh, kw, c_in, c_out]` and linear weights are `[in, out]`.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + Sum + Default + Debug + Display + LowerExp + Send + Sync + 'static
{
    const BYTES: usize;
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }
}

/// Geometry of a 2-D convolution over channel-last activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.kh, self.kw, self.c_in, self.c_out]
    }

    pub fn weight_len(&self) -> usize {
        self.kh * self.kw * self.c_in * self.c_out
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ph < self.kh || pw < self.kw || self.stride == 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} input too small for {}x{} kernel with padding {}",
                self.kh, self.kw, self.pad
            )));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }

    /// Input channel and output channel touched by flat kernel index `idx`.
    pub fn channels_of(&self, idx: usize) -> (usize, usize) {
        ((idx / self.c_out) % self.c_in, idx % self.c_out)
    }
}

/// `x · (m ⊙ w)` for `x: [B, I]`, `w: [I, O]`.
pub fn matmul_masked<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    let (b, i, o) = matmul_dims(x.shape(), w.shape())?;
    let eff = apply_mask(w.data(), mask)?;
    Tensor::new(vec![b, o], matmul_fwd(x.data(), &eff, b, i, o))
}

/// Cross-correlation of `x: [B, H, W, C_in]` with the masked kernel `m ⊙ w`.
pub fn conv2d_masked<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    mask: &[bool],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geom = conv_geom_of(w.shape(), stride, pad)?;
    let eff = apply_mask(w.data(), mask)?;
    conv2d_fwd(x, &eff, &geom)
}

pub(crate) fn conv_geom_of(wshape: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    match *wshape {
        [kh, kw, c_in, c_out] => Ok(ConvGeom {
            kh,
            kw,
            c_in,
            c_out,
            stride,
            pad,
        }),
        _ => Err(Error::Shape(format!(
            "conv kernel must be [kh, kw, c_in, c_out], got {wshape:?}"
        ))),
    }
}

pub(crate) fn apply_mask<T: Scalar>(w: &[T], mask: &[bool]) -> Result<Vec<T>> {
    if w.len() != mask.len() {
        return Err(Error::Shape(format!(
            "mask has {} entries but weight has {}",
            mask.len(),
            w.len()
        )));
    }
    Ok(w
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { T::zero() })
        .collect())
}

pub(crate) fn matmul_dims(xs: &[usize], ws: &[usize]) -> Result<(usize, usize, usize)> {
    match (xs, ws) {
        ([b, i], [i2, o]) if i == i2 => Ok((*b, *i, *o)),
        _ => Err(Error::Shape(format!("cannot multiply {xs:?} by {ws:?}"))),
    }
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [T], a: T, x: &[T]) {
    for (y, &v) in acc.iter_mut().zip(x) {
        *y = *y + a * v;
    }
}

/// Dot product with eight independent accumulators, reduced in a fixed order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + xa[l] * xb[l];
        }
    }
    let mut s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s = s + x * y;
    }
    s
}

pub(crate) fn matmul_fwd<T: Scalar>(x: &[T], w: &[T], b: usize, i: usize, o: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * o];
    for r in 0..b {
        let orow = &mut out[r * o..(r + 1) * o];
        for (k, &xv) in x[r * i..(r + 1) * i].iter().enumerate() {
            if xv != T::zero() {
                axpy(orow, xv, &w[k * o..(k + 1) * o]);
            }
        }
    }
    out
}

/// `dy · wᵀ`
pub(crate) fn matmul_grad_x<T: Scalar>(dy: &[T], w: &[T], b: usize, i: usize, o: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); b * i];
    for r in 0..b {
        let dyr = &dy[r * o..(r + 1) * o];
        for k in 0..i {
            dx[r * i + k] = dot(dyr, &w[k * o..(k + 1) * o]);
        }
    }
    dx
}

/// `xᵀ · dy`
pub(crate) fn matmul_grad_w<T: Scalar>(x: &[T], dy: &[T], b: usize, i: usize, o: usize) -> Vec<T> {
    let mut dw = vec![T::zero(); i * o];
    for k in 0..i {
        let row = &mut dw[k * o..(k + 1) * o];
        for r in 0..b {
            let xv = x[r * i + k];
            if xv != T::zero() {
                axpy(row, xv, &dy[r * o..(r + 1) * o]);
            }
        }
    }
    dw
}

/// Row-compressed positions of the set bits of an `[rows, cols]` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsePattern {
    pub rows: usize,
    pub cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
}

impl SparsePattern {
    pub fn from_mask(mask: &[bool], rows: usize, cols: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for r in 0..rows {
            for (c, &on) in mask[r * cols..(r + 1) * cols].iter().enumerate() {
                if on {
                    col_idx.push(c as u32);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
        }
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    #[inline]
    fn row(&self, r: usize) -> &[u32] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }
}

/// `x · (m ⊙ w)` touching only the stored positions.
pub(crate) fn sparse_fwd<T: Scalar>(x: &[T], w: &[T], p: &SparsePattern, b: usize) -> Vec<T> {
    let (i, o) = (p.rows, p.cols);
    let mut out = vec![T::zero(); b * o];
    for r in 0..b {
        let orow = &mut out[r * o..(r + 1) * o];
        for (k, &xv) in x[r * i..(r + 1) * i].iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wrow = &w[k * o..(k + 1) * o];
            for &c in p.row(k) {
                let c = c as usize;
                orow[c] = orow[c] + xv * wrow[c];
            }
        }
    }
    out
}

pub(crate) fn sparse_grad_x<T: Scalar>(dy: &[T], w: &[T], p: &SparsePattern, b: usize) -> Vec<T> {
    let (i, o) = (p.rows, p.cols);
    let mut dx = vec![T::zero(); b * i];
    for r in 0..b {
        let dyr = &dy[r * o..(r + 1) * o];
        for k in 0..i {
            let wrow = &w[k * o..(k + 1) * o];
            let mut s = T::zero();
            for &c in p.row(k) {
                s = s + dyr[c as usize] * wrow[c as usize];
            }
            dx[r * i + k] = s;
        }
    }
    dx
}

/// Weight gradient at the stored positions only; every other entry is zero.
pub(crate) fn sparse_grad_w<T: Scalar>(x: &[T], dy: &[T], p: &SparsePattern, b: usize) -> Vec<T> {
    let (i, o) = (p.rows, p.cols);
    let mut xt = vec![T::zero(); i * b];
    for r in 0..b {
        for k in 0..i {
            xt[k * b + r] = x[r * i + k];
        }
    }
    let mut dyt = vec![T::zero(); o * b];
    for r in 0..b {
        for c in 0..o {
            dyt[c * b + r] = dy[r * o + c];
        }
    }
    let mut dw = vec![T::zero(); i * o];
    for k in 0..i {
        let xk = &xt[k * b..(k + 1) * b];
        if xk.iter().all(|&v| v == T::zero()) {
            continue;
        }
        for &c in p.row(k) {
            let c = c as usize;
            dw[k * o + c] = dot(xk, &dyt[c * b..(c + 1) * b]);
        }
    }
    dw
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::Shape(format!(
            "expected [batch, height, width, channels], got {shape:?}"
        ))),
    }
}

pub(crate) fn conv2d_fwd<T: Scalar>(x: &Tensor<T>, w: &[T], g: &ConvGeom) -> Result<Tensor<T>> {
    let (b, h, wd, c) = spatial_dims(x.shape())?;
    if c != g.c_in || w.len() != g.weight_len() {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {c}",
            g.c_in
        )));
    }
    let (ho, wo) = g.output_hw(h, wd)?;
    let xd = x.data();
    let mut out = vec![T::zero(); b * ho * wo * g.c_out];
    for bi in 0..b {
        for oi in 0..ho {
            for oj in 0..wo {
                let obase = ((bi * ho + oi) * wo + oj) * g.c_out;
                let opix = &mut out[obase..obase + g.c_out];
                for m in 0..g.kh {
                    let ii = (oi * g.stride + m) as isize - g.pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for n in 0..g.kw {
                        let jj = (oj * g.stride + n) as isize - g.pad as isize;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        let xbase = ((bi * h + ii as usize) * wd + jj as usize) * c;
                        let wbase = (m * g.kw + n) * g.c_in * g.c_out;
                        for ci in 0..c {
                            let xv = xd[xbase + ci];
                            if xv != T::zero() {
                                let wrow = &w[wbase + ci * g.c_out..wbase + (ci + 1) * g.c_out];
                                axpy(opix, xv, wrow);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, ho, wo, g.c_out], out)
}

/// Gradients of a convolution with respect to its input (optional) and kernel.
pub(crate) fn conv2d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> Result<(Option<Vec<T>>, Vec<T>)> {
    let (b, h, wd, c) = spatial_dims(x.shape())?;
    let (ho, wo) = g.output_hw(h, wd)?;
    let xd = x.data();
    let mut dx = need_dx.then(|| vec![T::zero(); xd.len()]);
    let mut dw = vec![T::zero(); w.len()];
    for bi in 0..b {
        for oi in 0..ho {
            for oj in 0..wo {
                let obase = ((bi * ho + oi) * wo + oj) * g.c_out;
                let dpix = &dy[obase..obase + g.c_out];
                for m in 0..g.kh {
                    let ii = (oi * g.stride + m) as isize - g.pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for n in 0..g.kw {
                        let jj = (oj * g.stride + n) as isize - g.pad as isize;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        let xbase = ((bi * h + ii as usize) * wd + jj as usize) * c;
                        let wbase = (m * g.kw + n) * g.c_in * g.c_out;
                        for ci in 0..c {
                            let wo_ = wbase + ci * g.c_out;
                            let xv = xd[xbase + ci];
                            if xv != T::zero() {
                                axpy(&mut dw[wo_..wo_ + g.c_out], xv, dpix);
                            }
                            if let Some(dx) = dx.as_mut() {
                                dx[xbase + ci] = dx[xbase + ci] + dot(&w[wo_..wo_ + g.c_out], dpix);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
    /// Sum of the window; used by the path-scoring pass.
    Sum,
}

/// Non-overlapping `k×k` pooling. Returns the output and, for max pooling, the argmax
/// input offset of every output element.
pub(crate) fn pool_fwd<T: Scalar>(
    x: &Tensor<T>,
    kind: PoolKind,
    k: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, h, w, c) = spatial_dims(x.shape())?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by pool size {k}")));
    }
    let (ho, wo) = (h / k, w / k);
    let xd = x.data();
    let mut out = vec![T::zero(); b * ho * wo * c];
    let mut arg = if kind == PoolKind::Max {
        vec![0usize; out.len()]
    } else {
        Vec::new()
    };
    let inv = T::one() / T::of((k * k) as f64);
    for bi in 0..b {
        for oi in 0..ho {
            for oj in 0..wo {
                for ci in 0..c {
                    let o = ((bi * ho + oi) * wo + oj) * c + ci;
                    let mut acc = match kind {
                        PoolKind::Max => T::neg_infinity(),
                        _ => T::zero(),
                    };
                    for m in 0..k {
                        for n in 0..k {
                            let xi = ((bi * h + oi * k + m) * w + oj * k + n) * c + ci;
                            let v = xd[xi];
                            match kind {
                                PoolKind::Max => {
                                    if v > acc {
                                        acc = v;
                                        arg[o] = xi;
                                    }
                                }
                                _ => acc = acc + v,
                            }
                        }
                    }
                    out[o] = if kind == PoolKind::Avg { acc * inv } else { acc };
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, ho, wo, c], out)?, arg))
}

pub(crate) fn pool_bwd<T: Scalar>(
    xshape: &[usize],
    kind: PoolKind,
    k: usize,
    argmax: &[usize],
    dy: &[T],
) -> Result<Vec<T>> {
    let (b, h, w, c) = spatial_dims(xshape)?;
    let (ho, wo) = (h / k, w / k);
    let mut dx = vec![T::zero(); b * h * w * c];
    if kind == PoolKind::Max {
        for (o, &g) in dy.iter().enumerate() {
            dx[argmax[o]] = dx[argmax[o]] + g;
        }
        return Ok(dx);
    }
    let scale = if kind == PoolKind::Avg {
        T::one() / T::of((k * k) as f64)
    } else {
        T::one()
    };
    for bi in 0..b {
        for oi in 0..ho {
            for oj in 0..wo {
                for ci in 0..c {
                    let g = dy[((bi * ho + oi) * wo + oj) * c + ci] * scale;
                    for m in 0..k {
                        for n in 0..k {
                            let xi = ((bi * h + oi * k + m) * w + oj * k + n) * c + ci;
                            dx[xi] = dx[xi] + g;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}
