//! Dense channel-major tensors, stride-1 "same" convolution and the pointwise
//! operators the sparse coding solvers and networks are built from.
//!
//! Convolution follows the deep-learning convention (cross-correlation) with
//! zero padding of `(s - 1) / 2` and no bias. The heavy lifting goes through
//! an im2col lowering onto a single GEMM per call.

use crate::error::{shape_err, Error, Result};

/// A `channels × height × width` tensor stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return shape_err(format!("empty tensor {channels}x{height}x{width}"));
        }
        if data.len() != channels * height * width {
            return shape_err(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.channels, other.height, other.width)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, "elementwise operands")?;
        Ok(Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| alpha * v)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "axpy operands")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.axpy(1.0, other)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "inner product operands")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Multiplies channel `c` by `scale[c]`.
    pub fn scale_channels(&self, scale: &[f64]) -> Result<Tensor> {
        if scale.len() != self.channels {
            return shape_err(format!(
                "channel scale of length {} for {} channels",
                scale.len(),
                self.channels
            ));
        }
        let mut out = self.clone();
        for (c, &s) in scale.iter().enumerate() {
            out.channel_mut(c).iter_mut().for_each(|v| *v *= s);
        }
        Ok(out)
    }

    /// Stacks tensors of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return shape_err("concatenated tensors differ in spatial size");
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(channels, h, w, data)
    }
}

/// Bank of `out × in × s × s` filters, `s` odd.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    out_channels: usize,
    in_channels: usize,
    size: usize,
    data: Vec<f64>,
}

impl KernelBank {
    pub fn new(out_channels: usize, in_channels: usize, size: usize, data: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Param(format!("kernel size {size} is not odd")));
        }
        if out_channels == 0 || in_channels == 0 {
            return shape_err("kernel bank with zero channels");
        }
        if data.len() != out_channels * in_channels * size * size {
            return shape_err(format!(
                "kernel data length {} does not match {out_channels}x{in_channels}x{size}x{size}",
                data.len()
            ));
        }
        Ok(Self {
            out_channels,
            in_channels,
            size,
            data,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, size: usize) -> Result<Self> {
        Self::new(
            out_channels,
            in_channels,
            size,
            vec![0.0; out_channels * in_channels * size * size],
        )
    }

    /// Centre tap 1 on the diagonal: `conv2d(x, identity) == x`.
    pub fn identity(channels: usize, size: usize) -> Result<Self> {
        let mut k = Self::zeros(channels, channels, size)?;
        let r = size / 2;
        for c in 0..channels {
            *k.at_mut(c, c, r, r) = 1.0;
        }
        Ok(k)
    }

    pub fn zeros_like(other: &KernelBank) -> Self {
        Self {
            data: vec![0.0; other.data.len()],
            ..other.clone()
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.size, self.size]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, a: usize, b: usize) -> f64 {
        self.data[((o * self.in_channels + i) * self.size + a) * self.size + b]
    }

    #[inline]
    pub fn at_mut(&mut self, o: usize, i: usize, a: usize, b: usize) -> &mut f64 {
        &mut self.data[((o * self.in_channels + i) * self.size + a) * self.size + b]
    }

    pub fn scale(&self, alpha: f64) -> KernelBank {
        Self {
            data: self.data.iter().map(|v| v * alpha).collect(),
            ..self.clone()
        }
    }

    /// Bank whose `conv2d` is `conv2d_adjoint` with `self`: channels swapped,
    /// taps rotated by 180 degrees.
    pub fn adjoint(&self) -> KernelBank {
        let n = self.size;
        let mut k = Self::zeros(self.in_channels, self.out_channels, n).expect("valid bank");
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for a in 0..n {
                    for b in 0..n {
                        *k.at_mut(i, o, n - 1 - a, n - 1 - b) = self.at(o, i, a, b);
                    }
                }
            }
        }
        k
    }
}

/// Row-major GEMM `c = beta * c + op(a) * op(b)` where `op(a)` is `m × k`
/// and `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the m/k/n extents and
    // the strides describe dense row-major storage of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lowers `x` into a `(C·s·s) × (H·W)` patch matrix.
fn im2col(x: &Tensor, size: usize) -> Vec<f64> {
    let (ch, h, w) = x.shape();
    let r = size / 2;
    let hw = h * w;
    let mut col = vec![0.0; ch * size * size * hw];
    for c in 0..ch {
        let src = x.channel(c);
        for a in 0..size {
            for b in 0..size {
                let row = (c * size + a) * size + b;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (x0, x1) = valid_range(b, r, w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let yy = y as isize + a as isize - r as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let yy = yy as usize;
                    let off = b as isize - r as isize;
                    let s0 = (yy * w) as isize + x0 as isize + off;
                    let s0 = s0 as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch matrix back onto a `C × H × W` tensor.
fn col2im(col: &[f64], channels: usize, h: usize, w: usize, size: usize) -> Tensor {
    let r = size / 2;
    let hw = h * w;
    let mut out = Tensor::zeros(channels, h, w);
    for c in 0..channels {
        let dst = out.channel_mut(c);
        for a in 0..size {
            for b in 0..size {
                let row = (c * size + a) * size + b;
                let src = &col[row * hw..(row + 1) * hw];
                let (x0, x1) = valid_range(b, r, w);
                if x0 >= x1 {
                    continue;
                }
                let off = b as isize - r as isize;
                for y in 0..h {
                    let yy = y as isize + a as isize - r as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let d0 = ((yy as usize * w) as isize + x0 as isize + off) as usize;
                    let s = &src[y * w + x0..y * w + x1];
                    for (d, v) in dst[d0..d0 + (x1 - x0)].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
    out
}

/// Output columns `x` for which `x + b - r` lies inside `[0, w)`.
#[inline]
fn valid_range(b: usize, r: usize, w: usize) -> (usize, usize) {
    let off = b as isize - r as isize;
    let x0 = (-off).max(0) as usize;
    let x1 = ((w as isize - off).min(w as isize)).max(0) as usize;
    (x0.min(w), x1)
}

fn lowered<'a>(x: &'a Tensor, size: usize, buf: &'a mut Vec<f64>) -> &'a [f64] {
    if size == 1 {
        x.data()
    } else {
        *buf = im2col(x, size);
        buf
    }
}

/// Stride-1 cross-correlation with zero padding, no bias.
pub fn conv2d(x: &Tensor, k: &KernelBank) -> Result<Tensor> {
    if x.channels() != k.in_channels {
        return shape_err(format!(
            "conv2d: input has {} channels, kernel expects {}",
            x.channels(),
            k.in_channels
        ));
    }
    let (_, h, w) = x.shape();
    let mut buf = Vec::new();
    let col = lowered(x, k.size, &mut buf);
    let mut out = Tensor::zeros(k.out_channels, h, w);
    gemm(
        k.out_channels,
        k.in_channels * k.size * k.size,
        h * w,
        &k.data,
        false,
        col,
        false,
        0.0,
        out.data_mut(),
    );
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_adjoint(y: &Tensor, k: &KernelBank) -> Result<Tensor> {
    if y.channels() != k.out_channels {
        return shape_err(format!(
            "conv2d_adjoint: input has {} channels, kernel produces {}",
            y.channels(),
            k.out_channels
        ));
    }
    let (_, h, w) = y.shape();
    let rows = k.in_channels * k.size * k.size;
    let mut col = vec![0.0; rows * h * w];
    gemm(
        rows,
        k.out_channels,
        h * w,
        &k.data,
        true,
        y.data(),
        false,
        0.0,
        &mut col,
    );
    if k.size == 1 {
        return Tensor::from_vec(k.in_channels, h, w, col);
    }
    Ok(col2im(&col, k.in_channels, h, w, k.size))
}

/// Accumulates the gradient of `<conv2d(x, k), dy>` with respect to `k` into `grad`.
pub fn conv2d_kernel_grad_acc(x: &Tensor, dy: &Tensor, grad: &mut KernelBank) -> Result<()> {
    if x.channels() != grad.in_channels || dy.channels() != grad.out_channels {
        return shape_err("conv2d_kernel_grad: channel mismatch");
    }
    if x.height() != dy.height() || x.width() != dy.width() {
        return shape_err("conv2d_kernel_grad: spatial mismatch");
    }
    let mut buf = Vec::new();
    let col = lowered(x, grad.size, &mut buf);
    let kk = grad.in_channels * grad.size * grad.size;
    gemm(
        grad.out_channels,
        x.plane(),
        kk,
        dy.data(),
        false,
        col,
        true,
        1.0,
        &mut grad.data,
    );
    Ok(())
}

/// Gradient of `<conv2d(x, k), dy>` with respect to a kernel of the given size.
pub fn conv2d_kernel_grad(x: &Tensor, dy: &Tensor, size: usize) -> Result<KernelBank> {
    let mut g = KernelBank::zeros(dy.channels(), x.channels(), size)?;
    conv2d_kernel_grad_acc(x, dy, &mut g)?;
    Ok(g)
}

/// `sign(v) * max(|v| - theta, 0)`
#[inline]
pub fn soft(v: f64, theta: f64) -> f64 {
    if v > theta {
        v - theta
    } else if v < -theta {
        v + theta
    } else {
        0.0
    }
}

/// Per-channel soft thresholding.
pub fn soft_threshold(v: &Tensor, theta: &[f64]) -> Result<Tensor> {
    if theta.len() != v.channels() {
        return shape_err(format!(
            "threshold vector of length {} for {} channels",
            theta.len(),
            v.channels()
        ));
    }
    if let Some(t) = theta.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::Param(format!("negative or NaN threshold {t}")));
    }
    let mut out = v.clone();
    for (c, &t) in theta.iter().enumerate() {
        out.channel_mut(c).iter_mut().for_each(|x| *x = soft(*x, t));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    match kind {
        Activation::Relu => x.map(relu),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Per-channel mean.
pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let n = x.plane() as f64;
    (0..x.channels())
        .map(|c| x.channel(c).iter().sum::<f64>() / n)
        .collect()
}
