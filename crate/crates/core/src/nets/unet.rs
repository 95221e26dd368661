//! The two UNet branches and their pairing. The global restorer runs on the
//! downsampled full image; the local denoiser runs on patches and receives
//! global context through reweight cross attention (first encoder block) and
//! convolutional aggregation (bottleneck).

use candle_core::{DType, Tensor};
use candle_nn::ops::silu;

use crate::error::{Error, Result};

use super::blocks::{CaBlock, RcaBlock, ResBlock, SelfAttention};
use super::layers::{Conv2d, GroupNorm, TimeMlp};
use super::{
    sinusoidal_embed, Init, NetworkConfig, ParamSet, GLOBAL_IN_CHANNELS, LOCAL_IN_CHANNELS,
    OUT_CHANNELS,
};

struct DownLevel {
    blocks: Vec<ResBlock>,
    attns: Vec<Option<SelfAttention>>,
    down: Option<Conv2d>,
}

struct UpLevel {
    blocks: Vec<ResBlock>,
    attns: Vec<Option<SelfAttention>>,
    up: Option<Conv2d>,
}

fn build_down(
    ps: &mut ParamSet,
    prefix: &str,
    cfg: &NetworkConfig,
    with_attn: bool,
) -> Result<(Vec<DownLevel>, Vec<usize>, usize)> {
    let nb = cfg.res_blocks_per_resolution;
    let mut skip_chs = vec![cfg.base_channels];
    let mut c = cfg.base_channels;
    let mut levels = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        let c_out = cfg.channels_at(l);
        let res = cfg.resolution_at(l);
        let mut blocks = Vec::with_capacity(nb);
        let mut attns = Vec::with_capacity(nb);
        for b in 0..nb {
            blocks.push(ResBlock::new(ps, &format!("{prefix}.down{l}.block{b}"), c, c_out, cfg.time_embed_dim)?);
            c = c_out;
            attns.push(if with_attn && res == cfg.self_attention_resolution {
                Some(SelfAttention::new(ps, &format!("{prefix}.down{l}.attn{b}"), c)?)
            } else {
                None
            });
            skip_chs.push(c);
        }
        let down = if l + 1 < cfg.levels() {
            let conv = Conv2d::new(ps, &format!("{prefix}.down{l}.down"), c, c, 3, 2, Conv2d::he_init(c, 3))?;
            skip_chs.push(c);
            Some(conv)
        } else {
            None
        };
        levels.push(DownLevel { blocks, attns, down });
    }
    Ok((levels, skip_chs, c))
}

fn build_up(
    ps: &mut ParamSet,
    prefix: &str,
    cfg: &NetworkConfig,
    with_attn: bool,
    skip_chs: &mut Vec<usize>,
    c_start: usize,
) -> Result<Vec<UpLevel>> {
    let nb = cfg.res_blocks_per_resolution;
    let mut c = c_start;
    let mut levels = Vec::with_capacity(cfg.levels());
    for l in (0..cfg.levels()).rev() {
        let c_out = cfg.channels_at(l);
        let res = cfg.resolution_at(l);
        let mut blocks = Vec::with_capacity(nb + 1);
        let mut attns = Vec::with_capacity(nb + 1);
        for b in 0..nb + 1 {
            let sc = skip_chs.pop().ok_or_else(|| Error::Internal("skip ledger underflow".into()))?;
            blocks.push(ResBlock::new(ps, &format!("{prefix}.up{l}.block{b}"), c + sc, c_out, cfg.time_embed_dim)?);
            c = c_out;
            attns.push(if with_attn && res == cfg.self_attention_resolution {
                Some(SelfAttention::new(ps, &format!("{prefix}.up{l}.attn{b}"), c)?)
            } else {
                None
            });
        }
        let up = if l > 0 {
            Some(Conv2d::new(ps, &format!("{prefix}.up{l}.up"), c, c, 3, 1, Conv2d::he_init(c, 3))?)
        } else {
            None
        };
        levels.push(UpLevel { blocks, attns, up });
    }
    debug_assert!(skip_chs.is_empty());
    Ok(levels)
}

fn out_head(ps: &mut ParamSet, prefix: &str, c: usize) -> Result<(GroupNorm, Conv2d)> {
    let norm = GroupNorm::new(ps, &format!("{prefix}.norm_out"), c)?;
    let small = Init::Normal(0.1 * (2.0 / (c * 9) as f64).sqrt());
    let conv = Conv2d::new(ps, &format!("{prefix}.conv_out"), c, OUT_CHANNELS, 3, 1, small)?;
    Ok((norm, conv))
}

fn upsample2x(h: &Tensor) -> Result<Tensor> {
    let (_, _, hh, ww) = h.dims4()?;
    Ok(h.upsample_nearest2d(hh * 2, ww * 2)?)
}

/// Everything the global branch hands to the local branch for one timestep.
pub struct GlobalOut {
    /// Restored low-resolution image estimate, (B, 3, R, R), diffusion range.
    pub x_r: Tensor,
    /// First-encoder-block features, (B, base, R, R).
    pub f_low: Tensor,
    /// Bottleneck features after the middle blocks.
    pub f_mid: Tensor,
    /// The binary shadow-mask channel of the global input, (B, 1, R, R).
    pub mask: Tensor,
}

struct GlobalNet {
    tmlp: TimeMlp,
    conv_in: Conv2d,
    downs: Vec<DownLevel>,
    mid1: ResBlock,
    mid2: ResBlock,
    ups: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl GlobalNet {
    fn new(ps: &mut ParamSet, prefix: &str, cfg: &NetworkConfig) -> Result<Self> {
        let tmlp = TimeMlp::new(ps, &format!("{prefix}.tmlp"), cfg.time_embed_dim)?;
        let conv_in = Conv2d::new(
            ps,
            &format!("{prefix}.conv_in"),
            GLOBAL_IN_CHANNELS,
            cfg.base_channels,
            3,
            1,
            Conv2d::he_init(GLOBAL_IN_CHANNELS, 3),
        )?;
        let (downs, mut skip_chs, c_mid) = build_down(ps, prefix, cfg, false)?;
        let mid1 = ResBlock::new(ps, &format!("{prefix}.mid1"), c_mid, c_mid, cfg.time_embed_dim)?;
        let mid2 = ResBlock::new(ps, &format!("{prefix}.mid2"), c_mid, c_mid, cfg.time_embed_dim)?;
        let ups = build_up(ps, prefix, cfg, false, &mut skip_chs, c_mid)?;
        let (norm_out, conv_out) = out_head(ps, prefix, cfg.base_channels)?;
        Ok(Self { tmlp, conv_in, downs, mid1, mid2, ups, norm_out, conv_out })
    }

    fn forward(&self, xg: &Tensor, temb_raw: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let temb = self.tmlp.forward(temb_raw)?;
        let mut h = self.conv_in.forward(xg)?;
        let mut hs = vec![h.clone()];
        let mut f_low = None;
        for (l, level) in self.downs.iter().enumerate() {
            for (b, block) in level.blocks.iter().enumerate() {
                h = block.forward(&h, &temb)?;
                if l == 0 && b == 0 {
                    f_low = Some(h.clone());
                }
                hs.push(h.clone());
            }
            if let Some(down) = &level.down {
                h = down.forward(&h)?;
                hs.push(h.clone());
            }
        }
        h = self.mid1.forward(&h, &temb)?;
        h = self.mid2.forward(&h, &temb)?;
        let f_mid = h.clone();
        for level in &self.ups {
            for block in &level.blocks {
                let skip = hs.pop().ok_or_else(|| Error::Internal("skip stack underflow".into()))?;
                h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
            }
            if let Some(up) = &level.up {
                h = up.forward(&upsample2x(&h)?)?;
            }
        }
        let x_r = self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)?;
        Ok((x_r, f_low.expect("at least one encoder block"), f_mid))
    }
}

struct LocalNet {
    tmlp: TimeMlp,
    conv_in: Conv2d,
    rca: RcaBlock,
    downs: Vec<DownLevel>,
    mid1: ResBlock,
    ca: CaBlock,
    mid_attn: SelfAttention,
    mid2: ResBlock,
    ups: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl LocalNet {
    fn new(ps: &mut ParamSet, prefix: &str, cfg: &NetworkConfig) -> Result<Self> {
        let tmlp = TimeMlp::new(ps, &format!("{prefix}.tmlp"), cfg.time_embed_dim)?;
        let conv_in = Conv2d::new(
            ps,
            &format!("{prefix}.conv_in"),
            LOCAL_IN_CHANNELS,
            cfg.base_channels,
            3,
            1,
            Conv2d::he_init(LOCAL_IN_CHANNELS, 3),
        )?;
        let c0 = cfg.channels_at(0);
        let rca = RcaBlock::new(ps, &format!("{prefix}.rca"), c0, cfg.base_channels, cfg.rca_scale)?;
        let (downs, mut skip_chs, c_mid) = build_down(ps, prefix, cfg, true)?;
        let mid1 = ResBlock::new(ps, &format!("{prefix}.mid1"), c_mid, c_mid, cfg.time_embed_dim)?;
        let ca = CaBlock::new(ps, &format!("{prefix}.ca"), c_mid, c_mid)?;
        let mid_attn = SelfAttention::new(ps, &format!("{prefix}.mid_attn"), c_mid)?;
        let mid2 = ResBlock::new(ps, &format!("{prefix}.mid2"), c_mid, c_mid, cfg.time_embed_dim)?;
        let ups = build_up(ps, prefix, cfg, true, &mut skip_chs, c_mid)?;
        let (norm_out, conv_out) = out_head(ps, prefix, cfg.base_channels)?;
        Ok(Self { tmlp, conv_in, rca, downs, mid1, ca, mid_attn, mid2, ups, norm_out, conv_out })
    }

    fn forward(
        &self,
        x_in: &Tensor,
        f_low: &Tensor,
        f_mid: &Tensor,
        nonshadow: &Tensor,
        temb_raw: &Tensor,
    ) -> Result<Tensor> {
        let temb = self.tmlp.forward(temb_raw)?;
        let mut h = self.conv_in.forward(x_in)?;
        let mut hs = vec![h.clone()];
        for (l, level) in self.downs.iter().enumerate() {
            for (b, block) in level.blocks.iter().enumerate() {
                h = block.forward(&h, &temb)?;
                if l == 0 && b == 0 {
                    h = self.rca.forward(&h, f_low, nonshadow)?;
                }
                if let Some(attn) = &level.attns[b] {
                    h = attn.forward(&h)?;
                }
                hs.push(h.clone());
            }
            if let Some(down) = &level.down {
                h = down.forward(&h)?;
                hs.push(h.clone());
            }
        }
        h = self.mid1.forward(&h, &temb)?;
        h = self.ca.forward(&h, f_mid)?;
        h = self.mid_attn.forward(&h)?;
        h = self.mid2.forward(&h, &temb)?;
        for level in &self.ups {
            for (b, block) in level.blocks.iter().enumerate() {
                let skip = hs.pop().ok_or_else(|| Error::Internal("skip stack underflow".into()))?;
                h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
                if let Some(attn) = &level.attns[b] {
                    h = attn.forward(&h)?;
                }
            }
            if let Some(up) = &level.up {
                h = up.forward(&upsample2x(&h)?)?;
            }
        }
        Ok(self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)?)
    }
}

/// The trained object: both branches plus their shared parameter registry.
pub struct ModelPair {
    cfg: NetworkConfig,
    params: ParamSet,
    global: GlobalNet,
    local: LocalNet,
}

impl ModelPair {
    pub fn new(cfg: &NetworkConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new(dtype, seed);
        let global = GlobalNet::new(&mut ps, "global", cfg)?;
        let local = LocalNet::new(&mut ps, "local", cfg)?;
        Ok(Self { cfg: cfg.clone(), params: ps, global, local })
    }

    pub fn cfg(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Shared sinusoidal features for a batch of timesteps, (B, time_embed_dim).
    pub fn time_embedding(&self, ts: &[usize]) -> Result<Tensor> {
        let dim = self.cfg.time_embed_dim;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            data.extend(sinusoidal_embed(t, dim)?);
        }
        let t = Tensor::from_vec(data, &[ts.len(), dim], &candle_core::Device::Cpu)?;
        Ok(t.to_dtype(self.params.dtype())?)
    }

    /// Run the restorer on the 4-channel global input; `ts` pairs one timestep
    /// with each batch row.
    pub fn global_forward(&self, xg: &Tensor, ts: &[usize]) -> Result<GlobalOut> {
        let (b, c, h, w) = xg.dims4()?;
        if c != GLOBAL_IN_CHANNELS {
            return Err(Error::ShapeMismatch(format!("global input must have {GLOBAL_IN_CHANNELS} channels, got {c}")));
        }
        if h != self.cfg.input_size || w != self.cfg.input_size || ts.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "global input {b}x{c}x{h}x{w} with {} timesteps does not match R={}",
                ts.len(),
                self.cfg.input_size
            )));
        }
        let temb = self.time_embedding(ts)?;
        let (x_r, f_low, f_mid) = self.global.forward(xg, &temb)?;
        Ok(GlobalOut { x_r, f_low, f_mid, mask: xg.narrow(1, 3, 1)?.contiguous()? })
    }

    /// Run the noise estimator on the 7-channel local input against cached
    /// global context (its batch may be 1 to broadcast over patches).
    pub fn local_forward(&self, x_in: &Tensor, g: &GlobalOut, ts: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = x_in.dims4()?;
        if c != LOCAL_IN_CHANNELS {
            return Err(Error::ShapeMismatch(format!("local input must have {LOCAL_IN_CHANNELS} channels, got {c}")));
        }
        let r = self.cfg.input_size;
        let gb = g.f_low.dims4()?.0;
        if h != r || w != r || ts.len() != b || (gb != 1 && gb != b) {
            return Err(Error::ShapeMismatch(format!(
                "local input {b}x{c}x{h}x{w} ({} timesteps) vs global batch {gb}, R={r}",
                ts.len()
            )));
        }
        let nonshadow = g.mask.affine(-1.0, 1.0)?;
        let temb = self.time_embedding(ts)?;
        self.local.forward(x_in, &g.f_low, &g.f_mid, &nonshadow, &temb)
    }
}
