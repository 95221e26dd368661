//! UNet blocks: residual blocks with time conditioning, self-attention for the
//! local branch, reweight cross attention, and the bottleneck aggregation.

use candle_core::Tensor;
use candle_nn::ops::silu;

use crate::error::{Error, Result};

use super::layers::{softmax_stable, Conv2d, GroupNorm, Linear};
use super::{Init, ParamSet};

pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(ps: &mut ParamSet, name: &str, c_in: usize, c_out: usize, temb_dim: usize) -> Result<Self> {
        // The second conv starts at a tenth of the usual scale so fresh
        // residual paths stay close to identity without being exact no-ops.
        let small = Init::Normal(0.1 * (2.0 / (c_out * 9) as f64).sqrt());
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c_in)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, 1, Conv2d::he_init(c_in, 3))?,
            temb: Linear::new(ps, &format!("{name}.temb"), temb_dim, c_out, Init::Normal((1.0 / temb_dim as f64).sqrt()))?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c_out)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1, small)?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, 1, Conv2d::he_init(c_in, 1))?)
            },
        })
    }

    /// x: (B, c_in, H, W), temb: (B, temb_dim) → (B, c_out, H, W)
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let mut h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let t = self.temb.forward(&silu(temb)?)?;
        let (b, c) = t.dims2()?;
        h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let sk = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((sk + h)?)
    }
}

pub struct SelfAttention {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    out: Conv2d,
    scale: f64,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamSet, name: &str, c: usize) -> Result<Self> {
        let proj = Init::Normal((1.0 / c as f64).sqrt());
        let small = Init::Normal(0.1 * (1.0 / c as f64).sqrt());
        Ok(Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), c)?,
            q: Conv2d::new(ps, &format!("{name}.q"), c, c, 1, 1, proj)?,
            k: Conv2d::new(ps, &format!("{name}.k"), c, c, 1, 1, proj)?,
            v: Conv2d::new(ps, &format!("{name}.v"), c, c, 1, 1, proj)?,
            out: Conv2d::new(ps, &format!("{name}.out"), c, c, 1, 1, small)?,
            scale: (c as f64).sqrt(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        let xn = self.norm.forward(x)?;
        let q = self.q.forward(&xn)?.reshape((b, c, n))?.transpose(1, 2)?.contiguous()?;
        let k = self.k.forward(&xn)?.reshape((b, c, n))?;
        let v = self.v.forward(&xn)?.reshape((b, c, n))?.transpose(1, 2)?.contiguous()?;
        let scores = (q.matmul(&k)? * (1.0 / self.scale))?;
        let attn = softmax_stable(&scores)?;
        let z = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((x + self.out.forward(&z)?)?)
    }
}

/// Reweight cross attention operands: local queries against global keys and
/// values, with shadowed global positions suppressed after normalization.
pub struct RcaInputs {
    /// (B, N_local, d_k)
    pub q: Tensor,
    /// (B_g, N_global, d_k); a batch of 1 broadcasts over local queries.
    pub k: Tensor,
    /// (B_g, N_global, d_v)
    pub v: Tensor,
    /// (B_g, N_global) with 1 on non-shadow positions, 0 on shadow.
    pub mask: Tensor,
    /// Attention scaling divisor d.
    pub scale: f64,
}

/// softmax(Q·Kᵀ/d) with rows over global positions, masked after the softmax
/// (no renormalization), then aggregated with V. A fully shadowed context
/// therefore injects exactly zero.
pub fn rca(inputs: &RcaInputs) -> Result<Tensor> {
    let (_, _, dk) = inputs.q.dims3()?;
    let (_, ng, dk2) = inputs.k.dims3()?;
    let (_, ngv, _) = inputs.v.dims3()?;
    if dk != dk2 || ng != ngv || inputs.mask.dims() != [inputs.k.dims3()?.0, ng] {
        return Err(Error::ShapeMismatch(format!(
            "rca operands disagree: q {:?} k {:?} v {:?} mask {:?}",
            inputs.q.dims(),
            inputs.k.dims(),
            inputs.v.dims(),
            inputs.mask.dims()
        )));
    }
    let kt = inputs.k.transpose(1, 2)?.contiguous()?;
    let scores = (inputs.q.broadcast_matmul(&kt)? * (1.0 / inputs.scale))?;
    let attn = softmax_stable(&scores)?; // rows sum to 1 before masking
    let masked = attn.broadcast_mul(&inputs.mask.unsqueeze(1)?)?;
    Ok(masked.broadcast_matmul(&inputs.v)?)
}

/// RCA wiring at the first encoder block: queries from local features, keys
/// and values from the global first-block features, output added residually
/// with no output projection so a zero mask leaves the stream untouched.
pub struct RcaBlock {
    norm_local: GroupNorm,
    norm_global: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    scale: f64,
}

impl RcaBlock {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        c_local: usize,
        c_global: usize,
        scale_override: Option<f64>,
    ) -> Result<Self> {
        let proj = Init::Normal((1.0 / c_global.max(c_local) as f64).sqrt());
        // Values start small so the fused stream begins near a no-op while
        // every gradient path through the global branch stays live.
        let small = Init::Normal(0.1 * (1.0 / c_global as f64).sqrt());
        Ok(Self {
            norm_local: GroupNorm::new(ps, &format!("{name}.norm_l"), c_local)?,
            norm_global: GroupNorm::new(ps, &format!("{name}.norm_g"), c_global)?,
            q: Conv2d::new(ps, &format!("{name}.q"), c_local, c_local, 1, 1, proj)?,
            k: Conv2d::new(ps, &format!("{name}.k"), c_global, c_local, 1, 1, proj)?,
            v: Conv2d::new(ps, &format!("{name}.v"), c_global, c_local, 1, 1, small)?,
            scale: scale_override.unwrap_or((c_local as f64).sqrt()),
        })
    }

    /// x: (B, C, H, W) local; g: (B_g, C_g, H, W) global features;
    /// nonshadow: (B_g, 1, H, W) with 1 on non-shadow positions.
    pub fn forward(&self, x: &Tensor, g: &Tensor, nonshadow: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (bg, _, gh, gw) = g.dims4()?;
        if (gh, gw) != (h, w) || nonshadow.dims() != [bg, 1, gh, gw] {
            return Err(Error::ShapeMismatch(format!(
                "rca block: local {:?} vs global {:?} vs mask {:?}",
                x.dims(),
                g.dims(),
                nonshadow.dims()
            )));
        }
        let n = h * w;
        let gn = self.norm_global.forward(g)?;
        let q = self
            .q
            .forward(&self.norm_local.forward(x)?)?
            .reshape((b, c, n))?
            .transpose(1, 2)?
            .contiguous()?;
        let k = self.k.forward(&gn)?.reshape((bg, c, n))?.transpose(1, 2)?.contiguous()?;
        let v = self.v.forward(&gn)?.reshape((bg, c, n))?.transpose(1, 2)?.contiguous()?;
        let mask = nonshadow.reshape((bg, n))?;
        let z = rca(&RcaInputs { q, k, v, mask, scale: self.scale })?;
        let z = z.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((x + z)?)
    }
}

/// Bottleneck aggregation: concatenate global features onto the local stream
/// and reduce back with a 1×1 convolution that starts as the identity on the
/// local half.
pub struct CaBlock {
    reduce: Conv2d,
    c_global: usize,
}

impl CaBlock {
    pub fn new(ps: &mut ParamSet, name: &str, c_local: usize, c_global: usize) -> Result<Self> {
        let init = Init::IdentityConcat { noise_std: 0.01 };
        Ok(Self {
            reduce: Conv2d::new(ps, &format!("{name}.reduce"), c_local + c_global, c_local, 1, 1, init)?,
            c_global,
        })
    }

    /// h: (B, C_l, H, W); g: (B_g, C_g, H, W) with B_g ∈ {1, B}.
    pub fn forward(&self, h: &Tensor, g: &Tensor) -> Result<Tensor> {
        let (b, _, hh, ww) = h.dims4()?;
        let g = if g.dims4()?.0 == b {
            g.clone()
        } else {
            g.broadcast_as((b, self.c_global, hh, ww))?.contiguous()?
        };
        self.reduce.forward(&Tensor::cat(&[h, &g], 1)?)
    }
}
