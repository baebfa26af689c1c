//! Direct 2D cross-correlation and kernel-equals-stride transposed convolution.
//!
//! Both lower to a single GEMM per image plane: `conv2d` through an im2col
//! buffer, `transposed_conv2d` through a reshaped weight matrix followed by a
//! block scatter.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Weights and geometry of one 2D convolution.
///
/// `weight` has shape `(out_channels, in_channels, k_h, k_w)`; for a transposed
/// convolution the same layout is used and `kernel == stride` is required.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    weight: Tensor,
    bias: Option<Vec<f64>>,
    stride: (usize, usize),
    padding: (usize, usize),
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Option<Vec<f64>>, stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::shape("Conv2dParams", "weight rank", 4, weight.rank()));
        }
        if weight.shape().contains(&0) {
            return Err(Error::invalid(format!("conv weight has a zero dimension: {:?}", weight.shape())));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        if let Some(b) = &bias {
            if b.len() != weight.dim(0) {
                return Err(Error::shape("Conv2dParams", "bias length", weight.dim(0), b.len()));
            }
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// `k × k` convolution with "same" padding (`k` odd) and no bias.
    pub fn same(weight: Tensor, stride: (usize, usize)) -> Result<Self> {
        let (kh, kw) = (weight.shape().get(2).copied().unwrap_or(1), weight.shape().get(3).copied().unwrap_or(1));
        Self::new(weight, None, stride, ((kh - 1) / 2, (kw - 1) / 2))
    }

    /// 1×1 identity over `channels`.
    pub fn identity(channels: usize) -> Self {
        let w = Tensor::from_fn(&[channels, channels, 1, 1], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        Self::new(w, None, (1, 1), (0, 0)).expect("identity conv is well formed")
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dim(2), self.weight.dim(3))
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn padding(&self) -> (usize, usize) {
        self.padding
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Mutable weights; the shape is fixed.
    pub fn weight_mut(&mut self) -> &mut [f64] {
        self.weight.data_mut()
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn has_bias(&self) -> bool {
        self.bias.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Output spatial size for an `h × w` input, or an error when the padded
    /// input is smaller than the kernel.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh {
            return Err(Error::shape("conv2d", "padded height", kh, h + 2 * ph));
        }
        if w + 2 * pw < kw {
            return Err(Error::shape("conv2d", "padded width", kw, w + 2 * pw));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta·c`, all row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the asserts above guarantee every accessed element is in bounds
    // for the given row-major strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`, overwriting `c`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    // SAFETY: bounds asserted above; `b` is read with row stride 1 and column
    // stride k, which stays inside its n·k elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolves one `(c_in, h, w)` plane stored in `input` into `out`
/// (`(c_out, h', w')`). `cols` is scratch space reused across calls.
pub(crate) fn conv2d_plane(
    input: &[f64],
    h: usize,
    w: usize,
    params: &Conv2dParams,
    out: &mut [f64],
    cols: &mut Vec<f64>,
) -> Result<(usize, usize)> {
    let c_in = params.in_channels();
    let c_out = params.out_channels();
    if input.len() != c_in * h * w {
        return Err(Error::shape("conv2d", "input channels", c_in, input.len() / (h * w).max(1)));
    }
    let (oh, ow) = params.output_hw(h, w)?;
    let (kh, kw) = params.kernel();
    let (sh, sw) = params.stride;
    let (ph, pw) = params.padding;
    let k = c_in * kh * kw;
    let n = oh * ow;
    debug_assert_eq!(out.len(), c_out * n);

    let b: &[f64] = if kh == 1 && kw == 1 && sh == 1 && sw == 1 && ph == 0 && pw == 0 {
        input
    } else {
        cols.clear();
        cols.resize(k * n, 0.0);
        for c in 0..c_in {
            let plane = &input[c * h * w..(c + 1) * h * w];
            for a in 0..kh {
                for bb in 0..kw {
                    let row = (c * kh + a) * kw + bb;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * sh + a) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * sw + bb) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    };
    gemm(c_out, k, n, params.weight.data(), b, 0.0, out);
    if let Some(bias) = &params.bias {
        for (o, &bv) in bias.iter().enumerate() {
            for v in &mut out[o * n..(o + 1) * n] {
                *v += bv;
            }
        }
    }
    Ok((oh, ow))
}

/// Standard cross-correlation of a `(C_in, H, W)` tensor.
pub fn conv2d(input: &Tensor, params: &Conv2dParams) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::shape("conv2d", "input rank", 3, input.rank()));
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    if c != params.in_channels() {
        return Err(Error::shape("conv2d", "input channels", params.in_channels(), c));
    }
    let (oh, ow) = params.output_hw(h, w)?;
    let mut out = vec![0.0; params.out_channels() * oh * ow];
    let mut cols = Vec::new();
    conv2d_plane(input.data(), h, w, params, &mut out, &mut cols)?;
    Tensor::new(vec![params.out_channels(), oh, ow], out)
}

/// Transposed convolution with kernel equal to stride (1, 2 or 4), so every
/// input pixel expands into its own non-overlapping `s × s` output block.
pub fn transposed_conv2d(input: &Tensor, params: &Conv2dParams) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::shape("transposed_conv2d", "input rank", 3, input.rank()));
    }
    let (s, s_w) = params.stride;
    if s != s_w || ![1, 2, 4].contains(&s) {
        return Err(Error::invalid(format!("transposed_conv2d supports strides 1, 2, 4; got {:?}", params.stride)));
    }
    if params.kernel() != (s, s) {
        return Err(Error::invalid(format!(
            "transposed_conv2d requires kernel == stride; got kernel {:?}, stride {s}",
            params.kernel()
        )));
    }
    let (c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    if c_in != params.in_channels() {
        return Err(Error::shape("transposed_conv2d", "input channels", params.in_channels(), c_in));
    }
    let c_out = params.out_channels();
    // Wr[(o, a, b), c] = w[o, c, a, b]
    let wt = params.weight.data();
    let rows = c_out * s * s;
    let mut wr = vec![0.0; rows * c_in];
    for o in 0..c_out {
        for c in 0..c_in {
            for a in 0..s {
                for b in 0..s {
                    wr[((o * s + a) * s + b) * c_in + c] = wt[((o * c_in + c) * s + a) * s + b];
                }
            }
        }
    }
    let n = h * w;
    let mut y = vec![0.0; rows * n];
    gemm(rows, c_in, n, &wr, input.data(), 0.0, &mut y);
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        let bias = params.bias.as_ref().map_or(0.0, |b| b[o]);
        for a in 0..s {
            for b in 0..s {
                let src = &y[((o * s + a) * s + b) * n..((o * s + a) * s + b + 1) * n];
                for i in 0..h {
                    let dst_row = (o * oh + i * s + a) * ow;
                    for j in 0..w {
                        out[dst_row + j * s + b] = src[i * w + j] + bias;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}
