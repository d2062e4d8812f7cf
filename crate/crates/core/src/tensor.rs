//! Dense row-major tensors and the numeric kernels shared by the graph ops.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type tag, used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type. Implemented for `f32` (training, inference)
/// and `f64` (gradient verification).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// The strided views must lie inside the given slices; callers go through
    /// [`matmul`] which checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// `y += a * x`.
    fn axpy(a: Self, x: &[Self], y: &mut [Self]) {
        for (yy, &xx) in y.iter_mut().zip(x) {
            *yy += a * xx;
        }
    }

    /// Elementwise logistic function.
    fn sigmoid_slice(x: &[Self], out: &mut [Self]) {
        for (o, &v) in out.iter_mut().zip(x) {
            *o = if v >= Self::zero() {
                Self::one() / (Self::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (Self::one() + e)
            };
        }
    }

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;
    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was just detected.
            unsafe { axpy_avx2(a, x, y) };
            return;
        }
        for (yy, &xx) in y.iter_mut().zip(x) {
            *yy += a * xx;
        }
    }

    fn sigmoid_slice(x: &[f32], out: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the features were just detected.
            unsafe { sigmoid_avx2(x, out) };
            return;
        }
        for (o, &v) in out.iter_mut().zip(x) {
            *o = sigmoid_f32(v);
        }
    }

    fn to_le_bytes_vec(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<f32> {
        bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_avx2(a: f32, x: &[f32], y: &mut [f32]) {
    for (yy, &xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}

/// Branch-free `exp` (range reduction plus a degree-6 polynomial), within a
/// couple of ulps of the libm result on `[-87, 88]`.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    let n = (x * std::f32::consts::LOG2_E + 0.5).floor();
    let r = x - n * 0.693_359_4 - n * -2.121_944_4e-4;
    let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r + 1.666_666_5e-1) * r
        + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

#[inline(always)]
fn sigmoid_f32(x: f32) -> f32 {
    1.0 / (1.0 + exp_f32(-x))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn sigmoid_avx2(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = sigmoid_f32(v);
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn to_le_bytes_vec(values: &[f64]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<f64> {
        bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            .collect()
    }
}

/// Matrix operand: a slice viewed as `rows x cols`, optionally transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    /// Distance between consecutive rows of the stored matrix.
    pub ld: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    /// Row-major `rows x cols` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, ld: cols, transposed: false }
    }

    /// Transposed view of a row-major `rows x cols` matrix (shape `cols x rows`).
    pub fn t(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, ld: cols, transposed: true }
    }

    /// Stored rows are `ld` elements apart (a column block of a wider matrix).
    pub fn with_ld(mut self, ld: usize) -> Self {
        self.ld = ld;
        self
    }

    fn required_len(&self) -> usize {
        if self.rows == 0 {
            0
        } else {
            (self.rows - 1) * self.ld + self.cols
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }
}

/// `out = alpha * a * b + beta * out`, `out` row-major `m x n`.
pub fn matmul<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], alpha: T, beta: T) {
    let n = b.shape().1;
    matmul_strided(a, b, out, n, alpha, beta);
}

/// [`matmul`] writing rows of `out` `out_stride` elements apart.
pub fn matmul_strided<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], out_stride: usize, alpha: T, beta: T) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    assert!(a.ld >= a.cols && a.data.len() >= a.required_len());
    assert!(b.ld >= b.cols && b.data.len() >= b.required_len());
    assert!(n <= out_stride);
    assert!(m == 0 || out.len() >= (m - 1) * out_stride + n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for row in out.chunks_mut(out_stride).take(m) {
            for v in &mut row[..n] {
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            out_stride as isize,
            1,
        );
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// First element; used for scalar results.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }

    /// Slice `[i]` along the leading axis.
    pub fn index0(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape[1..].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor { shape, data: self.data[i * inner..(i + 1) * inner].to_vec() }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!(
                    "stack shape mismatch {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// Geometry of a 2-D convolution over one image plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_size(in_size: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
        let span = dilation * (kernel - 1) + 1;
        let padded = in_size + 2 * pad;
        if padded < span || stride == 0 {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    pub fn out_h(&self) -> usize {
        Self::out_size(self.in_h, self.kernel, self.stride, self.pad, self.dilation).unwrap_or(0)
    }

    pub fn out_w(&self) -> usize {
        Self::out_size(self.in_w, self.kernel, self.stride, self.pad, self.dilation).unwrap_or(0)
    }

    pub fn valid(&self) -> bool {
        self.out_h() > 0 && self.out_w() > 0
    }
}

/// Unfold one `[C, H, W]` plane into `[C*k*k, Ho*Wo]` columns (zero padding).
pub fn im2col<T: Real>(input: &[T], channels: usize, g: &ConvGeom, cols: &mut [T]) {
    im2col_rows(input, channels, g, 0, g.out_h(), cols);
}

/// [`im2col`] restricted to output rows `oy0..oy1`; `cols` is
/// `[C*k*k, (oy1-oy0)*Wo]`.
pub fn im2col_rows<T: Real>(input: &[T], channels: usize, g: &ConvGeom, oy0: usize, oy1: usize, cols: &mut [T]) {
    let ow = g.out_w();
    let k = g.kernel;
    let plane = (oy1 - oy0) * ow;
    debug_assert_eq!(cols.len(), channels * k * k * plane);
    for c in 0..channels {
        let src = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = (ky * g.dilation) as isize - g.pad as isize;
                let dx = (kx * g.dilation) as isize - g.pad as isize;
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride) as isize + dy;
                    let drow = &mut dst[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    if g.stride == 1 {
                        // valid ox range maps to a contiguous slice
                        let lo = ((-dx).max(0) as usize).min(ow);
                        let hi = ((g.in_w as isize - dx).min(ow as isize)).max(lo as isize) as usize;
                        drow[..lo].fill(T::zero());
                        if hi > lo {
                            let s0 = (lo as isize + dx) as usize;
                            drow[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                        }
                        drow[hi..].fill(T::zero());
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + dx;
                            *d = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into a `[C, H, W]` plane.
pub fn col2im<T: Real>(cols: &[T], channels: usize, g: &ConvGeom, out: &mut [T]) {
    col2im_rows(cols, channels, g, 0, g.out_h(), out);
}

/// Adjoint of [`im2col_rows`].
pub fn col2im_rows<T: Real>(cols: &[T], channels: usize, g: &ConvGeom, oy0: usize, oy1: usize, out: &mut [T]) {
    let ow = g.out_w();
    let k = g.kernel;
    let plane = (oy1 - oy0) * ow;
    for c in 0..channels {
        let dst = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = (ky * g.dilation) as isize - g.pad as isize;
                let dx = (kx * g.dilation) as isize - g.pad as isize;
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let srow = &src[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if g.stride == 1 {
                        let lo = ((-dx).max(0) as usize).min(ow);
                        let hi = ((g.in_w as isize - dx).min(ow as isize)).max(lo as isize) as usize;
                        if hi > lo {
                            let s0 = (lo as isize + dx) as usize;
                            for (d, &v) in drow[s0..s0 + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + dx;
                            if ix >= 0 && ix < g.in_w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output-row tiles keeping an unfolded `rows_per_position x tile` buffer
/// near `TILE_ELEMS` elements.
pub fn row_tiles(out_h: usize, out_w: usize, rows_per_position: usize) -> Vec<(usize, usize)> {
    let per_row = (rows_per_position * out_w).max(1);
    let step = (TILE_ELEMS.load(Ordering::Relaxed) / per_row).clamp(1, out_h.max(1));
    (0..out_h).step_by(step).map(|r| (r, (r + step).min(out_h))).collect()
}

/// Unfolded-buffer budget, in elements, for one conv tile.
pub(crate) static TILE_ELEMS: AtomicUsize = AtomicUsize::new(1 << 20);

/// Stride-1 convolution by shifted row updates, for layers with very few
/// output channels where a GEMM would be badly shaped. Accumulates into `out`.
pub fn conv_direct<T: Real>(input: &[T], c: usize, g: &ConvGeom, weight: &[T], o: usize, out: &mut [T]) {
    debug_assert_eq!(g.stride, 1);
    let (h, w, k, d) = (g.in_h, g.in_w, g.kernel, g.dilation);
    let (oh, ow) = (g.out_h(), g.out_w());
    // row-outer order keeps the destination row in cache
    for y in 0..oh {
        for oc in 0..o {
            let drow = &mut out[(oc * oh + y) * ow..(oc * oh + y + 1) * ow];
            for ky in 0..k {
                let iy = (y + ky * d) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ic in 0..c {
                    let srow = &input[(ic * h + iy as usize) * w..][..w];
                    let wrow = &weight[((oc * c + ic) * k + ky) * k..][..k];
                    for (kx, &wv) in wrow.iter().enumerate() {
                        let dx = (kx * d) as isize - g.pad as isize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).max(0) as usize).min(ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let src = &srow[(x0 as isize + dx) as usize..][..x1 - x0];
                        T::axpy(wv, src, &mut drow[x0..x1]);
                    }
                }
            }
        }
    }
}

/// Bilinear resize of `[C, H, W]` planes using half-pixel centres
/// (the `align_corners = false` convention).
pub fn resize_bilinear<T: Real>(input: &[T], channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels * oh * ow];
    if h == oh && w == ow {
        out.copy_from_slice(&input[..channels * h * w]);
        return out;
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let taps = |o: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..ow).map(|x| taps(x, sx, w)).collect();
    for c in 0..channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = taps(y, sy, h);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0].f64() * (1.0 - fx) + src[y0 * w + x1].f64() * fx;
                let bot = src[y1 * w + x0].f64() * (1.0 - fx) + src[y1 * w + x1].f64() * fx;
                out[(c * oh + y) * ow + x] = T::c(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_sigmoid_tracks_reference() {
        let xs: Vec<f32> = (-2000..=2000).map(|i| i as f32 * 0.05).chain([-1e30, 1e30, -100.0, 100.0]).collect();
        let mut fast = vec![0.0f32; xs.len()];
        f32::sigmoid_slice(&xs, &mut fast);
        let mut generic = vec![0.0f32; xs.len()];
        for (o, &v) in generic.iter_mut().zip(&xs) {
            *o = sigmoid_f32(v);
        }
        assert_eq!(fast, generic, "vector and scalar paths disagree");
        for (&x, &f) in xs.iter().zip(&fast) {
            let exact = 1.0 / (1.0 + (-(x as f64)).exp());
            assert!((f as f64 - exact).abs() < 2e-7, "sigmoid({x}) = {f}, want {exact}");
        }
    }

    #[test]
    fn matmul_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul(Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), &mut c, 1.0, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // (a^T)^T b == a b
        let at: Vec<f64> = (0..3).flat_map(|k| (0..2).map(move |i| (i * 3 + k) as f64)).collect();
        let mut c2 = vec![0.0; 8];
        matmul(Mat::t(&at, 3, 2), Mat::new(&b, 3, 4), &mut c2, 1.0, 0.0);
        assert_eq!(c, c2);
    }

    #[test]
    fn conv_arithmetic() {
        assert_eq!(ConvGeom::out_size(256, 7, 1, 3, 1), Some(256));
        assert_eq!(ConvGeom::out_size(256, 4, 2, 1, 1), Some(128));
        assert_eq!(ConvGeom::out_size(128, 4, 2, 1, 1), Some(64));
        assert_eq!(ConvGeom::out_size(32, 4, 1, 1, 1), Some(31));
        assert_eq!(ConvGeom::out_size(2, 5, 1, 0, 1), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom { in_h: 5, in_w: 6, kernel: 3, stride: 2, pad: 2, dilation: 2 };
        let c = 2;
        let x: Vec<f64> = (0..c * 30).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let rows = c * 9 * g.out_h() * g.out_w();
        let y: Vec<f64> = (0..rows).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let mut cols = vec![0.0; rows];
        im2col(&x, c, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        assert_eq!(resize_bilinear(&x, 1, 4, 4, 4, 4), x);
        let c = vec![0.25f32; 64];
        assert!(resize_bilinear(&c, 1, 8, 8, 3, 5).iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
