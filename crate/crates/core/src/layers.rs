//! Forward and backward passes for the layer set used by the residual network.
//!
//! Convolutions are stride-1 cross-correlations with zero padding, lowered to
//! GEMM through an im2col buffer that is filled a band of output rows at a
//! time so memory stays bounded on large frames.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound on the number of `f64` elements in one im2col band.
const IM2COL_BUDGET: usize = 1 << 22;

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(input: [usize; 4], weight: [usize; 4], padding: usize) -> Result<Self> {
        let [_, in_c, in_h, in_w] = input;
        let [out_c, w_in_c, kh, kw] = weight;
        if w_in_c != in_c {
            return Err(Error::Shape(format!(
                "conv2d: input has {in_c} channels but weight {weight:?} expects {w_in_c}"
            )));
        }
        if kh != kw {
            return Err(Error::Shape(format!(
                "conv2d: only square kernels are supported, got {kh}x{kw}"
            )));
        }
        let k = kh;
        if in_h + 2 * padding < k || in_w + 2 * padding < k {
            return Err(Error::Shape(format!(
                "conv2d: kernel {k} larger than padded input {}x{}",
                in_h + 2 * padding,
                in_w + 2 * padding
            )));
        }
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h: in_h + 2 * padding - k + 1,
            out_w: in_w + 2 * padding - k + 1,
            k,
            pad: padding,
        })
    }

    #[inline]
    fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn band_rows(&self) -> usize {
        let per_row = self.patch_len() * self.out_w;
        (IM2COL_BUDGET / per_row.max(1)).clamp(1, self.out_h)
    }

    /// Fills `cols` (`patch_len x rows*out_w`) for output rows `y0..y0+rows`.
    fn im2col(&self, image: &[f64], y0: usize, rows: usize, cols: &mut [f64]) {
        let n = rows * self.out_w;
        let (k, pad) = (self.k, self.pad as isize);
        for c in 0..self.in_c {
            let plane = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for r in 0..rows {
                        let iy = (y0 + r + ky) as isize - pad;
                        let out = &mut dst[r * self.out_w..(r + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox + kx) as isize - pad;
                            *o = if ix < 0 || ix >= self.in_w as isize {
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

    /// Scatter-adds `cols` back into the input-gradient image.
    fn col2im(&self, cols: &[f64], y0: usize, rows: usize, image: &mut [f64]) {
        let n = rows * self.out_w;
        let (k, pad) = (self.k, self.pad as isize);
        for c in 0..self.in_c {
            let plane = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for r in 0..rows {
                        let iy = (y0 + r + ky) as isize - pad;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst =
                            &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, &g) in src[r * self.out_w..(r + 1) * self.out_w].iter().enumerate()
                        {
                            let ix = (ox + kx) as isize - pad;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Strided matrix description for [`gemm`].
#[derive(Clone, Copy)]
struct Mat {
    rs: isize,
    cs: isize,
}

fn row_major(cols: usize) -> Mat {
    Mat {
        rs: cols as isize,
        cs: 1,
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Mat,
    b: &[f64],
    lb: Mat,
    beta: f64,
    c: &mut [f64],
    lc: Mat,
) {
    let extent = |rows: usize, cols: usize, l: Mat| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * l.rs as usize + (cols - 1) * l.cs as usize + 1
        }
    };
    assert!(a.len() >= extent(m, k, la));
    assert!(b.len() >= extent(k, n, lb));
    assert!(c.len() >= extent(m, n, lc));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

/// Stride-1 2-D cross-correlation with zero padding.
///
/// `weight` is `[out_c, in_c, k, k]`, `bias` has `out_c` entries.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &[f64], padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), padding)?;
    if bias.len() != g.out_c {
        return Err(Error::Shape(format!(
            "conv2d: bias has {} entries, expected {}",
            bias.len(),
            g.out_c
        )));
    }
    let batch = input.batch();
    let mut out = Tensor::zeros([batch, g.out_c, g.out_h, g.out_w]);
    let in_plane = g.in_c * g.in_h * g.in_w;
    let out_plane = g.out_c * g.out_h * g.out_w;
    let hw = g.out_h * g.out_w;
    let band = g.band_rows();
    let mut cols = vec![0.0; g.patch_len() * band * g.out_w];

    for b in 0..batch {
        let image = &input.data()[b * in_plane..(b + 1) * in_plane];
        let dst = &mut out.data_mut()[b * out_plane..(b + 1) * out_plane];
        for (oc, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(bias[oc]);
        }
        let mut y0 = 0;
        while y0 < g.out_h {
            let rows = band.min(g.out_h - y0);
            let n = rows * g.out_w;
            g.im2col(image, y0, rows, &mut cols[..g.patch_len() * n]);
            gemm(
                g.out_c,
                g.patch_len(),
                n,
                weight.data(),
                row_major(g.patch_len()),
                &cols,
                row_major(n),
                1.0,
                &mut dst[y0 * g.out_w..],
                Mat {
                    rs: hw as isize,
                    cs: 1,
                },
            );
            y0 += rows;
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    padding: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), padding)?;
    let batch = input.batch();
    let expected = [batch, g.out_c, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "conv2d_backward: upstream gradient {:?}, expected {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let mut grad_in = Tensor::zeros_like(input);
    let mut grad_w = Tensor::zeros_like(weight);
    let mut grad_b = vec![0.0; g.out_c];
    let in_plane = g.in_c * g.in_h * g.in_w;
    let out_plane = g.out_c * g.out_h * g.out_w;
    let hw = g.out_h * g.out_w;
    let kk = g.patch_len();
    let band = g.band_rows();
    let mut cols = vec![0.0; kk * band * g.out_w];
    let mut grad_cols = vec![0.0; kk * band * g.out_w];

    for b in 0..batch {
        let image = &input.data()[b * in_plane..(b + 1) * in_plane];
        let go = &grad_out.data()[b * out_plane..(b + 1) * out_plane];
        for (oc, plane) in go.chunks(hw).enumerate() {
            grad_b[oc] += plane.iter().sum::<f64>();
        }
        let gi = &mut grad_in.data_mut()[b * in_plane..(b + 1) * in_plane];
        let mut y0 = 0;
        while y0 < g.out_h {
            let rows = band.min(g.out_h - y0);
            let n = rows * g.out_w;
            g.im2col(image, y0, rows, &mut cols[..kk * n]);
            let go_band = &go[y0 * g.out_w..];
            let go_layout = Mat {
                rs: hw as isize,
                cs: 1,
            };
            // dW += dY_band * cols^T
            gemm(
                g.out_c,
                n,
                kk,
                go_band,
                go_layout,
                &cols,
                Mat {
                    rs: 1,
                    cs: n as isize,
                },
                1.0,
                grad_w.data_mut(),
                row_major(kk),
            );
            // dcols = W^T * dY_band
            gemm(
                kk,
                g.out_c,
                n,
                weight.data(),
                Mat {
                    rs: 1,
                    cs: kk as isize,
                },
                go_band,
                go_layout,
                0.0,
                &mut grad_cols,
                row_major(n),
            );
            g.col2im(&grad_cols[..kk * n], y0, rows, gi);
            y0 += rows;
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// `input` may be either the pre-activation or the ReLU output: both share
/// the same positive support.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

/// Backward of [`sigmoid`] given its forward output.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.zip_map(grad_out, |s, g| g * s * (1.0 - s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Result of a 2x2 pooling pass, holding what the backward pass needs.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    mode: PoolMode,
    input_shape: [usize; 4],
    /// Flat input index of each output's maximum (max mode only).
    argmax: Vec<usize>,
}

/// Non-overlapping 2x2 pooling. Spatial dimensions must be even.
///
/// Max-pool ties go to the first element in row-major order.
pub fn pool2x2(input: &Tensor, mode: PoolMode) -> Result<Pooled> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "pool2x2 needs even spatial dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut output = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = if mode == PoolMode::Max {
        vec![0; output.len()]
    } else {
        Vec::new()
    };
    let src = input.data();
    let dst = output.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i00 = base + 2 * y * w + 2 * x;
                let idx = [i00, i00 + 1, i00 + w, i00 + w + 1];
                match mode {
                    PoolMode::Max => {
                        let mut best = idx[0];
                        for &i in &idx[1..] {
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                        dst[o] = src[best];
                        argmax[o] = best;
                    }
                    PoolMode::Avg => {
                        dst[o] = 0.25 * (src[idx[0]] + src[idx[1]] + src[idx[2]] + src[idx[3]]);
                    }
                }
                o += 1;
            }
        }
    }
    Ok(Pooled {
        output,
        mode,
        input_shape: [n, c, h, w],
        argmax,
    })
}

impl Pooled {
    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    pub fn backward(&self, grad_out: &Tensor) -> Result<Tensor> {
        if grad_out.shape() != self.output.shape() {
            return Err(Error::Shape(format!(
                "pool2x2 backward: upstream gradient {:?}, expected {:?}",
                grad_out.shape(),
                self.output.shape()
            )));
        }
        let mut grad_in = Tensor::zeros(self.input_shape);
        let [_, _, h, w] = self.input_shape;
        let (oh, ow) = (h / 2, w / 2);
        let gi = grad_in.data_mut();
        match self.mode {
            PoolMode::Max => {
                for (&i, &g) in self.argmax.iter().zip(grad_out.data()) {
                    gi[i] += g;
                }
            }
            PoolMode::Avg => {
                let mut o = 0;
                for plane in 0..grad_out.batch() * grad_out.channels() {
                    let base = plane * h * w;
                    for y in 0..oh {
                        for x in 0..ow {
                            let g = 0.25 * grad_out.data()[o];
                            let i00 = base + 2 * y * w + 2 * x;
                            gi[i00] += g;
                            gi[i00 + 1] += g;
                            gi[i00 + w] += g;
                            gi[i00 + w + 1] += g;
                            o += 1;
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

/// Two-tap interpolation weights for one output coordinate.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn upsample_taps(n: usize) -> Vec<Tap> {
    (0..2 * n)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            Tap {
                i0,
                i1,
                w1: src - i0 as f64,
            }
        })
        .collect()
}

/// Bilinear 2x upsampling with half-pixel centers and edge clamping.
pub fn bilinear_upsample2x(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape();
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let src = input.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for t in &ty {
            let r0 = &src[base + t.i0 * w..base + (t.i0 + 1) * w];
            let r1 = &src[base + t.i1 * w..base + (t.i1 + 1) * w];
            for s in &tx {
                let top = r0[s.i0] * (1.0 - s.w1) + r0[s.i1] * s.w1;
                let bot = r1[s.i0] * (1.0 - s.w1) + r1[s.i1] * s.w1;
                dst[o] = top * (1.0 - t.w1) + bot * t.w1;
                o += 1;
            }
        }
    }
    out
}

/// Transpose of [`bilinear_upsample2x`]; `input_shape` is the forward input shape.
pub fn bilinear_upsample2x_backward(input_shape: [usize; 4], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape;
    if grad_out.shape() != [n, c, 2 * h, 2 * w] {
        return Err(Error::Shape(format!(
            "upsample backward: upstream gradient {:?} does not match input {:?}",
            grad_out.shape(),
            input_shape
        )));
    }
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut grad_in = Tensor::zeros(input_shape);
    let gi = grad_in.data_mut();
    let go = grad_out.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for t in &ty {
            for s in &tx {
                let g = go[o];
                o += 1;
                let gt = g * (1.0 - t.w1);
                let gb = g * t.w1;
                gi[base + t.i0 * w + s.i0] += gt * (1.0 - s.w1);
                gi[base + t.i0 * w + s.i1] += gt * s.w1;
                gi[base + t.i1 * w + s.i0] += gb * (1.0 - s.w1);
                gi[base + t.i1 * w + s.i1] += gb * s.w1;
            }
        }
    }
    Ok(grad_in)
}

/// Concatenates along the channel axis, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "concat_channels: {:?} and {:?} differ outside the channel axis",
            a.shape(),
            b.shape()
        )));
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(&a.data()[n * ca * plane..(n + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[n * cb * plane..(n + 1) * cb * plane]);
    }
    Tensor::new([na, ca + cb, ha, wa], data)
}

/// Splits off the first `first` channels; the inverse of [`concat_channels`].
pub fn split_channels(t: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = t.shape();
    if first == 0 || first >= c {
        return Err(Error::Shape(format!(
            "split_channels: cannot split {c} channels at {first}"
        )));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for i in 0..n {
        let item = &t.data()[i * c * plane..(i + 1) * c * plane];
        a.extend_from_slice(&item[..first * plane]);
        b.extend_from_slice(&item[first * plane..]);
    }
    Ok((
        Tensor::new([n, first, h, w], a)?,
        Tensor::new([n, c - first, h, w], b)?,
    ))
}
