//! Tensor building blocks. Convolutions are lowered to batched matmuls over
//! shifted views, which is far faster on this CPU backend than the direct
//! conv kernels and keeps every op on the autodiff path.

use candle_core::{Tensor, D};
use candle_nn::ops::silu;

use crate::error::{Error, Result};

use super::{Init, ParamSet};

/// Softmax over the last dim with a gradient-transparent max shift.
pub fn softmax_stable(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Largest power of two ≤ 32 that divides the channel count while keeping at
/// least two channels per group. Single-channel groups would standardize away
/// the per-channel time-embedding shift a residual block adds right before
/// its second normalization, severing time conditioning in narrow configs.
pub fn norm_groups(channels: usize) -> usize {
    let mut g = 1;
    while g * 2 <= 32 && channels % (g * 2) == 0 && channels / (g * 2) >= 2 {
        g *= 2;
    }
    g
}

pub struct Conv2d {
    w: Tensor, // (c_out, c_in, k, k)
    b: Tensor, // (c_out,)
    k: usize,
    stride: usize,
    c_in: usize,
    c_out: usize,
}

impl Conv2d {
    /// Same-padded k×k convolution (k odd); stride ∈ {1, 2}.
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        debug_assert!(k % 2 == 1 && (stride == 1 || stride == 2));
        debug_assert!(k != 1 || stride == 1, "1x1 conv only supports stride 1");
        let w = ps.param(&format!("{name}.w"), &[c_out, c_in, k, k], init)?;
        let b = ps.param(&format!("{name}.b"), &[c_out], Init::Zeros)?;
        Ok(Self { w, b, k, stride, c_in, c_out })
    }

    pub fn he_init(c_in: usize, k: usize) -> Init {
        Init::Normal((2.0 / (c_in * k * k) as f64).sqrt())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bn, c, h, w) = x.dims4()?;
        if c != self.c_in {
            return Err(Error::ShapeMismatch(format!("conv expects {} channels, got {c}", self.c_in)));
        }
        let (oh, ow) = (h / self.stride, w / self.stride);
        if self.stride == 2 && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::ShapeMismatch(format!("stride-2 conv on odd map {h}x{w}")));
        }
        // Gather the k² shifted views and flatten them offset-major so the
        // reshaped weight lines up.
        let cols = if self.k == 1 {
            x.reshape((bn, c, h * w))?
        } else {
            let pad = self.k / 2;
            let xp = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
            let mut views = Vec::with_capacity(self.k * self.k);
            for dy in 0..self.k {
                for dx in 0..self.k {
                    views.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
                }
            }
            let cat = Tensor::cat(&views, 1)?; // (B, k²C, H, W)
            if self.stride == 1 {
                cat.reshape((bn, self.k * self.k * c, h * w))?
            } else {
                cat.reshape((bn, self.k * self.k * c, oh, 2, ow, 2))?
                    .narrow(3, 0, 1)?
                    .narrow(5, 0, 1)?
                    .contiguous()?
                    .reshape((bn, self.k * self.k * c, oh * ow))?
            }
        };
        let wm = self
            .w
            .permute((0, 2, 3, 1))? // (c_out, k, k, c_in): offset-major
            .contiguous()?
            .reshape((self.c_out, self.k * self.k * self.c_in))?;
        let y = wm.broadcast_matmul(&cols)?; // (B, c_out, OH·OW)
        let y = y.broadcast_add(&self.b.reshape((1, self.c_out, 1))?)?;
        Ok(y.reshape((bn, self.c_out, oh, ow))?)
    }
}

pub struct Linear {
    w: Tensor, // (in, out)
    b: Tensor, // (out,)
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        let w = ps.param(&format!("{name}.w"), &[d_in, d_out], init)?;
        let b = ps.param(&format!("{name}.b"), &[d_out], Init::Zeros)?;
        Ok(Self { w, b })
    }

    /// x: (B, in) → (B, out)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w)?.broadcast_add(&self.b)?)
    }
}

pub struct GroupNorm {
    weight: Tensor, // (C,)
    bias: Tensor,   // (C,)
    groups: usize,
    channels: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Result<Self> {
        let weight = ps.param(&format!("{name}.g"), &[channels], Init::Const(1.0))?;
        let bias = ps.param(&format!("{name}.b"), &[channels], Init::Zeros)?;
        Ok(Self { weight, bias, groups: norm_groups(channels), channels, eps: 1e-6 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bn, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!("norm expects {} channels, got {c}", self.channels)));
        }
        let g = self.groups;
        let xg = x.reshape((bn, g, c / g * h * w))?;
        let mu = xg.mean_keepdim(2)?;
        let centered = xg.broadcast_sub(&mu)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((bn, c, h, w))?;
        let scale = self.weight.reshape((1, c, 1, 1))?;
        let shift = self.bias.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Per-branch two-layer MLP over the shared sinusoidal features.
pub struct TimeMlp {
    l1: Linear,
    l2: Linear,
}

impl TimeMlp {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Result<Self> {
        let init = Init::Normal((1.0 / dim as f64).sqrt());
        Ok(Self {
            l1: Linear::new(ps, &format!("{name}.l1"), dim, dim, init)?,
            l2: Linear::new(ps, &format!("{name}.l2"), dim, dim, init)?,
        })
    }

    pub fn forward(&self, emb: &Tensor) -> Result<Tensor> {
        Ok(self.l2.forward(&silu(&self.l1.forward(emb)?)?)?)
    }
}
