//! Parallel UNets: a local noise estimator and a global restorer, joined by
//! reweight cross attention at the first encoder block and convolutional
//! aggregation at the bottleneck.

mod blocks;
mod layers;
mod unet;

pub use blocks::{rca, RcaBlock, RcaInputs};
pub use unet::{GlobalOut, ModelPair};

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, STREAM_INIT};

/// Local branch input: x_t RGB + shadow-patch RGB + patch mask.
pub const LOCAL_IN_CHANNELS: usize = 7;
/// Global branch input: downsampled shadow RGB + downsampled mask.
pub const GLOBAL_IN_CHANNELS: usize = 4;
/// Both branches predict RGB maps.
pub const OUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Patch edge R; also the global branch's working resolution.
    pub input_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_resolution: usize,
    /// Feature-map edge at which the local branch runs self-attention.
    pub self_attention_resolution: usize,
    pub time_embed_dim: usize,
    /// Attention scaling d; `None` means √d_k.
    #[serde(default)]
    pub rca_scale: Option<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            base_channels: 128,
            channel_multipliers: vec![1, 1, 2, 2, 4, 4],
            res_blocks_per_resolution: 2,
            self_attention_resolution: 16,
            time_embed_dim: 512,
            rca_scale: None,
        }
    }
}

impl NetworkConfig {
    /// Desk-scale preset used by the end-to-end tests.
    pub fn tiny() -> Self {
        Self {
            input_size: 32,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            res_blocks_per_resolution: 2,
            self_attention_resolution: 16,
            time_embed_dim: 128,
            rca_scale: None,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Feature-map edge at each encoder level (blocks run before downsampling).
    pub fn resolution_at(&self, level: usize) -> usize {
        self.input_size >> level
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel_multipliers must be non-empty and positive".into()));
        }
        if self.res_blocks_per_resolution == 0 {
            return Err(Error::Config("res_blocks_per_resolution must be positive".into()));
        }
        let down_factor = 1usize << (self.levels() - 1);
        if self.input_size == 0 || self.input_size % down_factor != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by 2^(levels-1) = {down_factor}",
                self.input_size
            )));
        }
        if (self.input_size >> (self.levels() - 1)) < 2 {
            return Err(Error::Config("bottleneck resolution collapsed below 2".into()));
        }
        let ladder: Vec<usize> = (0..self.levels()).map(|l| self.resolution_at(l)).collect();
        if !ladder.contains(&self.self_attention_resolution) {
            return Err(Error::Config(format!(
                "self_attention_resolution {} not in the resolution ladder {ladder:?}",
                self.self_attention_resolution
            )));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even and positive".into()));
        }
        if let Some(d) = self.rca_scale {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config("rca_scale must be positive and finite".into()));
            }
        }
        Ok(())
    }
}

/// Weight initialization for one registered parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Zeros,
    Const(f64),
    /// (out, out + extra) matrix `[I | N(0, std)]`: concat-then-reduce layers
    /// start as an identity on their first `out` input channels while the
    /// extra columns stay live for gradient flow.
    IdentityConcat { noise_std: f64 },
}

/// Ordered registry of all learnable parameters. Registration order is the
/// construction order of the networks, which is deterministic, so a fixed seed
/// reproduces every weight bit-for-bit.
pub struct ParamSet {
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
    dtype: DType,
    rng: ChaCha20Rng,
}

impl ParamSet {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { vars: Vec::new(), index: HashMap::new(), dtype, rng: rng::stream(seed, STREAM_INIT) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Register a parameter and return a live handle sharing its storage.
    pub fn param(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Internal(format!("duplicate parameter name '{name}'")));
        }
        let n: usize = dims.iter().product();
        let data: Vec<f64> = match init {
            Init::Normal(std) => rng::normal_vec(&mut self.rng, n).into_iter().map(|v| v * std).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::IdentityConcat { noise_std } => {
                let (out, inn) = (dims[0], dims[1]);
                let tail: usize = dims.iter().skip(2).product();
                if inn < out || tail != 1 {
                    return Err(Error::Internal(format!("identity-concat init misused for {dims:?}")));
                }
                let noise = rng::normal_vec(&mut self.rng, out * (inn - out));
                let mut w = vec![0.0; n];
                let mut ni = 0;
                for o in 0..out {
                    w[o * inn + o] = 1.0;
                    for col in out..inn {
                        w[o * inn + col] = noise[ni] * noise_std;
                        ni += 1;
                    }
                }
                w
            }
        };
        let t = Tensor::from_vec(data, dims, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.index.insert(name.to_string(), self.vars.len());
        self.vars.push((name.to_string(), var));
        Ok(handle)
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.vars[i].1)
    }

    /// Total number of scalar weights.
    pub fn total_len(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.as_tensor().elem_count()).sum()
    }
}

/// Stack same-shaped rasters into a (B, C, H, W) tensor at the given dtype.
pub fn rasters_to_tensor(rs: &[&crate::imaging::Raster], dtype: DType) -> Result<Tensor> {
    let first = rs.first().ok_or_else(|| Error::ShapeMismatch("empty raster batch".into()))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(rs.len() * c * h * w);
    for r in rs {
        if r.shape() != (c, h, w) {
            return Err(Error::ShapeMismatch(format!("raster batch mixes {:?} and {:?}", (c, h, w), r.shape())));
        }
        data.extend_from_slice(r.data());
    }
    let t = Tensor::from_vec(data, &[rs.len(), c, h, w], &Device::Cpu)?;
    Ok(t.to_dtype(dtype)?)
}

/// Split a (B, C, H, W) tensor back into per-sample f64 rasters.
pub fn tensor_to_rasters(t: &Tensor) -> Result<Vec<crate::imaging::Raster>> {
    let (b, c, h, w) = t.dims4()?;
    let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let plane = c * h * w;
    (0..b)
        .map(|i| crate::imaging::Raster::from_vec(flat[i * plane..(i + 1) * plane].to_vec(), c, h, w))
        .collect()
}

/// Transformer-style sin/cos positional features of a timestep.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding dim {dim} must be even and positive")));
    }
    let half = dim / 2;
    let tf = t as f64;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq =
            if half > 1 { 10_000f64.powf(-(i as f64) / (half as f64 - 1.0)) } else { 1.0 };
        out[i] = (tf * freq).sin();
        out[half + i] = (tf * freq).cos();
    }
    Ok(out)
}
