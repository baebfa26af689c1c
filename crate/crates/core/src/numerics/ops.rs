use super::conv::gemm_nt;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Affine map along the trailing dimension: `out[.., o] = Σ_c in[.., c]·w[o, c] + b[o]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    if weight.rank() != 2 {
        return Err(Error::shape("linear", "weight rank", 2, weight.rank()));
    }
    let (c_out, c_in) = (weight.dim(0), weight.dim(1));
    let last = input.shape().last().copied().unwrap_or(0);
    if input.rank() == 0 || last != c_in {
        return Err(Error::shape("linear", "trailing dim", c_in, last));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape("linear", "bias length", c_out, b.len()));
        }
    }
    let rows = input.len() / c_in.max(1);
    let mut out = vec![0.0; rows * c_out];
    gemm_nt(rows, c_in, c_out, input.data(), weight.data(), &mut out);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(c_out.max(1)) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank checked") = c_out;
    Tensor::new(shape, out)
}

/// Fully-connected layer with optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    weight: Tensor,
    bias: Option<Vec<f64>>,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Option<Vec<f64>>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::shape("Dense", "weight rank", 2, weight.rank()));
        }
        if let Some(b) = &bias {
            if b.len() != weight.dim(0) {
                return Err(Error::shape("Dense", "bias length", weight.dim(0), b.len()));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, with_bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: with_bias.then(|| vec![0.0; out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        self.weight.data_mut()
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        linear(input, &self.weight, self.bias.as_deref())
    }

    /// `forward` followed by ReLU.
    pub fn forward_relu(&self, input: &Tensor) -> Result<Tensor> {
        let mut out = self.forward(input)?;
        relu_inplace(out.data_mut());
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

/// Frozen batch-norm statistics and affine parameters for `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, gamma: Vec<f64>, beta: Vec<f64>, eps: f64) -> Result<Self> {
        let c = mean.len();
        for (name, len) in [("var length", var.len()), ("gamma length", gamma.len()), ("beta length", beta.len())] {
            if len != c {
                return Err(Error::shape("BatchNorm", name, c, len));
            }
        }
        if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::invalid(format!("batch-norm variance must be non-negative, got {v}")));
        }
        if !(eps >= 0.0) {
            return Err(Error::invalid("batch-norm eps must be non-negative"));
        }
        Ok(Self {
            mean,
            var,
            gamma,
            beta,
            eps,
        })
    }

    /// Zero mean, unit variance, unit gamma, zero beta, `eps = 0`: the identity map.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Learnable parameters (gamma and beta); running statistics are buffers.
    pub fn param_count(&self) -> usize {
        2 * self.channels()
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = scale·x + shift`.
    pub fn folded(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let s = self.gamma[c] / (self.var[c] + self.eps).sqrt();
                (s, self.beta[c] - s * self.mean[c])
            })
            .collect()
    }

    /// Applies to a channel-first buffer `(C, rest…)` in place.
    pub fn apply_channels_first(&self, data: &mut [f64]) -> Result<()> {
        let c = self.channels();
        if c == 0 || data.len() % c != 0 {
            return Err(Error::shape("batchnorm", "channels", c, data.len()));
        }
        let plane = data.len() / c;
        for (ch, (s, t)) in self.folded().into_iter().enumerate() {
            for v in &mut data[ch * plane..(ch + 1) * plane] {
                *v = s * *v + t;
            }
        }
        Ok(())
    }

    /// Applies to a channel-last buffer `(rows, C)` in place.
    pub fn apply_channels_last(&self, data: &mut [f64]) -> Result<()> {
        let c = self.channels();
        if c == 0 || data.len() % c != 0 {
            return Err(Error::shape("batchnorm", "channels", c, data.len()));
        }
        let folded = self.folded();
        for row in data.chunks_exact_mut(c) {
            for (v, (s, t)) in row.iter_mut().zip(&folded) {
                *v = s * *v + t;
            }
        }
        Ok(())
    }
}

/// Batch-norm inference on a channel-first tensor `(C, …)`.
pub fn batchnorm_inference(input: &Tensor, bn: &BatchNorm) -> Result<Tensor> {
    if input.rank() == 0 || input.dim(0) != bn.channels() {
        return Err(Error::shape("batchnorm", "channels", bn.channels(), input.shape().first().copied().unwrap_or(0)));
    }
    let mut out = input.clone();
    bn.apply_channels_first(out.data_mut())?;
    Ok(out)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_inplace(data: &mut [f64]) {
    for v in data {
        *v = v.max(0.0);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    Ok(out)
}

/// `log(Σ exp(x))` with max subtraction.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}
