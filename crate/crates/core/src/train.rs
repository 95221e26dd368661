//! Training: batch assembly from triplets, the joint diffusive + global
//! objective, adaptive-moment optimization, EMA tracking, and checkpoints.

use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::TripletRecord;
use crate::error::{Error, Result};
use crate::imaging::{Raster, ResizeMode};
use crate::nets::{rasters_to_tensor, ModelPair, NetworkConfig, ParamSet};
use crate::rng::normal_vec;
use crate::schedule::{q_sample, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub images_per_iteration: usize,
    pub patches_per_image: usize,
    pub lambda_global: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            epochs: 2000,
            images_per_iteration: 8,
            patches_per_image: 12,
            lambda_global: 1.0,
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.images_per_iteration * self.patches_per_image
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config("ema_decay must be in (0, 1)".into()));
        }
        if !(self.lambda_global >= 0.0 && self.lambda_global.is_finite()) {
            return Err(Error::Config("lambda_global must be non-negative".into()));
        }
        if self.images_per_iteration == 0 || self.patches_per_image == 0 {
            return Err(Error::Config("batch factors must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// One assembled mini-batch, kept as f64 rasters in diffusion range. Sample
/// order is (image-major, patch-minor); per image the RNG draws the image
/// index, then per patch: top, left, t, then the noise field.
pub struct TrainBatch {
    pub x0: Vec<Raster>,
    pub cond: Vec<Raster>,
    pub mask: Vec<Raster>,
    pub global_in: Vec<Raster>,
    pub global_target: Vec<Raster>,
    pub eps: Vec<Raster>,
    pub t: Vec<usize>,
    pub image_indices: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Downsample one triplet to the global branch's working resolution and
/// normalize to diffusion range: (x̃′ ‖ x_m′) input, x_0′ target.
pub fn global_pair(rec: &TripletRecord, r: usize) -> Result<(Raster, Raster)> {
    let shadow = rec.shadow.resize(r, r, ResizeMode::Bilinear)?.normalize()?;
    let mask = rec.mask.resize(r, r, ResizeMode::Nearest)?;
    let input = Raster::concat_channels(&[shadow.raster(), mask.raster()])?;
    let target = rec.free.resize(r, r, ResizeMode::Bilinear)?.normalize()?;
    Ok((input, target.raster().clone()))
}

pub fn assemble_batch(
    dataset: &[TripletRecord],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut ChaCha20Rng,
) -> Result<TrainBatch> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot assemble a batch from an empty dataset".into()));
    }
    if dataset.len() < cfg.images_per_iteration {
        log::warn!(
            "dataset has {} images but {} are drawn per iteration; sampling with replacement",
            dataset.len(),
            cfg.images_per_iteration
        );
    }
    let r = net.input_size;
    let n = cfg.batch_size();
    let mut batch = TrainBatch {
        x0: Vec::with_capacity(n),
        cond: Vec::with_capacity(n),
        mask: Vec::with_capacity(n),
        global_in: Vec::with_capacity(n),
        global_target: Vec::with_capacity(n),
        eps: Vec::with_capacity(n),
        t: Vec::with_capacity(n),
        image_indices: Vec::with_capacity(n),
    };
    for _ in 0..cfg.images_per_iteration {
        let idx = rng.gen_range(0..dataset.len());
        let rec = &dataset[idx];
        let (h, w) = (rec.shadow.height(), rec.shadow.width());
        if h < r || w < r {
            return Err(Error::Dataset(format!("record '{}' is {h}x{w}, smaller than patch size {r}", rec.id)));
        }
        let (g_in, g_target) = global_pair(rec, r)?;
        let free_d = rec.free.normalize()?;
        let shadow_d = rec.shadow.normalize()?;
        for _ in 0..cfg.patches_per_image {
            let top = rng.gen_range(0..=h - r);
            let left = rng.gen_range(0..=w - r);
            let t = rng.gen_range(1..=sched.t_max());
            let eps = Raster::from_vec(normal_vec(rng, 3 * r * r), 3, r, r)?;
            batch.x0.push(free_d.raster().crop(top, left, r, r)?);
            batch.cond.push(shadow_d.raster().crop(top, left, r, r)?);
            batch.mask.push(rec.mask.raster().crop(top, left, r, r)?);
            batch.global_in.push(g_in.clone());
            batch.global_target.push(g_target.clone());
            batch.eps.push(eps);
            batch.t.push(t);
            batch.image_indices.push(idx);
        }
    }
    Ok(batch)
}

/// Batch tensors ready for the two branches.
pub struct BatchTensors {
    /// (B, 7, R, R): x_t ‖ x̃ patch ‖ patch mask
    pub local_in: Tensor,
    /// (B, 4, R, R)
    pub global_in: Tensor,
    /// (B, 3, R, R) true noise
    pub eps: Tensor,
    /// (B, 3, R, R) downsampled clean target
    pub global_target: Tensor,
    pub t: Vec<usize>,
}

impl TrainBatch {
    pub fn to_tensors(&self, sched: &NoiseSchedule, dtype: DType) -> Result<BatchTensors> {
        let mut x_t = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            x_t.push(q_sample(&self.x0[i], self.t[i], &self.eps[i], sched)?);
        }
        let mut local = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            local.push(Raster::concat_channels(&[&x_t[i], &self.cond[i], &self.mask[i]])?);
        }
        Ok(BatchTensors {
            local_in: rasters_to_tensor(&local.iter().collect::<Vec<_>>(), dtype)?,
            global_in: rasters_to_tensor(&self.global_in.iter().collect::<Vec<_>>(), dtype)?,
            eps: rasters_to_tensor(&self.eps.iter().collect::<Vec<_>>(), dtype)?,
            global_target: rasters_to_tensor(&self.global_target.iter().collect::<Vec<_>>(), dtype)?,
            t: self.t.clone(),
        })
    }
}

/// Mean squared error between predicted and true noise over all elements.
pub fn loss_diff(eps_hat: &[Raster], eps: &[Raster]) -> Result<f64> {
    mse_rasters(eps_hat, eps)
}

/// Mean squared error between the global restoration and the clean target.
pub fn loss_global(x_r: &[Raster], x0_down: &[Raster]) -> Result<f64> {
    mse_rasters(x_r, x0_down)
}

pub fn loss_total(l_diff: f64, l_global: f64, lambda: f64) -> f64 {
    l_diff + lambda * l_global
}

fn mse_rasters(a: &[Raster], b: &[Raster]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("loss over {} vs {} samples", a.len(), b.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch("loss operand shapes differ".into()));
        }
        for (p, q) in x.data().iter().zip(y.data()) {
            sum += (p - q) * (p - q);
        }
        count += x.len();
    }
    Ok(sum / count as f64)
}

fn tensor_mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Hand-rolled Adam so optimizer state is plain tensors we can serialize and
/// restore bit-for-bit. β₁ = 0.9, β₂ = 0.999, ε = 1e-8, no weight decay.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Result<Self> {
        let zeros = |t: &Tensor| Tensor::zeros(t.dims(), t.dtype(), &Device::Cpu);
        let m = params.vars().iter().map(|(_, v)| zeros(v.as_tensor())).collect::<candle_core::Result<Vec<_>>>()?;
        let v = params.vars().iter().map(|(_, v)| zeros(v.as_tensor())).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, params: &ParamSet, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, var)) in params.vars().iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue; // e.g. the global decoder when λ = 0
            };
            // Detach: gradients and prior moments drag the whole autograd
            // graph (activations included) behind them; stored state must not,
            // or memory grows by a full graph every step.
            self.m[i] = ((&self.m[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?.detach();
            self.v[i] = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let m_hat = (&self.m[i] / bc1)?;
            let v_hat = (&self.v[i] / bc2)?;
            let update = (m_hat * self.lr)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - update)?)?;
        }
        Ok(())
    }

    pub fn state(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: usize, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer state length mismatch".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Exponential moving average of the parameters; used for all sampling.
pub struct Ema {
    decay: f64,
    shadow: Vec<Tensor>,
    updates: usize,
}

impl Ema {
    pub fn new(params: &ParamSet, decay: f64) -> Result<Self> {
        let shadow = params.vars().iter().map(|(_, v)| v.as_tensor().copy()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { decay, shadow, updates: 0 })
    }

    /// shadow ← d·shadow + (1−d)·θ with d = min(decay, (1+n)/(10+n)) at the
    /// n-th update. The ramp keeps early averages anchored to the live
    /// weights; without it a short run's shadow is mostly the random init
    /// (0.999^240 ≈ 0.79 of it after 240 steps).
    pub fn update(&mut self, params: &ParamSet) -> Result<()> {
        let n = self.updates as f64;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        for ((_, var), s) in params.vars().iter().zip(self.shadow.iter_mut()) {
            // Detached so successive shadows don't op-chain into an unbounded
            // history of parameter copies.
            *s = ((&*s * d)? + (var.as_tensor() * (1.0 - d))?)?.detach();
        }
        self.updates += 1;
        Ok(())
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn restore(&mut self, shadow: Vec<Tensor>, updates: usize) -> Result<()> {
        if shadow.len() != self.shadow.len() {
            return Err(Error::Checkpoint("EMA state length mismatch".into()));
        }
        self.shadow = shadow;
        self.updates = updates;
        Ok(())
    }

    /// Overwrite the live parameters with the averaged ones.
    pub fn copy_to(&self, params: &ParamSet) -> Result<()> {
        for ((_, var), s) in params.vars().iter().zip(&self.shadow) {
            var.set(s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub l_diff: f64,
    pub l_global: f64,
    pub l_total: f64,
}

/// One joint gradient step over both branches.
pub fn training_step(
    model: &ModelPair,
    batch: &TrainBatch,
    adam: &mut Adam,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let tensors = batch.to_tensors(sched, model.params().dtype())?;
    let g = model.global_forward(&tensors.global_in, &tensors.t)?;
    let eps_hat = model.local_forward(&tensors.local_in, &g, &tensors.t)?;
    let l_d = tensor_mse(&eps_hat, &tensors.eps)?;
    let l_g = tensor_mse(&g.x_r, &tensors.global_target)?;
    let total = (&l_d + (&l_g * cfg.lambda_global)?)?;
    let report = LossReport {
        l_diff: scalar(&l_d)?,
        l_global: scalar(&l_g)?,
        l_total: scalar(&total)?,
    };
    if !report.l_total.is_finite() {
        return Err(Error::Internal(format!(
            "non-finite loss {:?} (images {:?}, t {:?})",
            report, batch.image_indices, batch.t
        )));
    }
    let grads = total.backward()?;
    adam.step(model.params(), &grads)?;
    Ok(report)
}

/// Everything a checkpoint stores besides raw tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epoch: usize,
    pub step: usize,
    pub adam_step: usize,
    pub ema_updates: usize,
    /// Batch-stream RNG position, serialized as decimal (u128).
    pub rng_word_pos: String,
}

fn tensor_bytes(t: &Tensor) -> Result<(safetensors::Dtype, Vec<u8>)> {
    match t.dtype() {
        DType::F32 => {
            let v: Vec<f32> = t.flatten_all()?.to_vec1()?;
            Ok((safetensors::Dtype::F32, v.iter().flat_map(|x| x.to_le_bytes()).collect()))
        }
        DType::F64 => {
            let v: Vec<f64> = t.flatten_all()?.to_vec1()?;
            Ok((safetensors::Dtype::F64, v.iter().flat_map(|x| x.to_le_bytes()).collect()))
        }
        other => Err(Error::Checkpoint(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn view_to_tensor(view: &safetensors::tensor::TensorView<'_>) -> Result<Tensor> {
    let shape: Vec<usize> = view.shape().to_vec();
    let data = view.data();
    match view.dtype() {
        safetensors::Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
        }
        safetensors::Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
        }
        other => Err(Error::Checkpoint(format!("unsupported stored dtype {other:?}"))),
    }
}

/// Write a self-contained checkpoint: raw weights, EMA weights, optimizer
/// moments, and a JSON metadata header, all in one safetensors file.
pub fn save_checkpoint(
    path: &Path,
    model: &ModelPair,
    ema: &Ema,
    adam: &Adam,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut entries: Vec<(String, (safetensors::Dtype, Vec<usize>, Vec<u8>))> = Vec::new();
    let (ms, vs) = adam.state();
    for (i, (name, var)) in model.params().vars().iter().enumerate() {
        let t = var.as_tensor();
        let (dt, bytes) = tensor_bytes(t)?;
        entries.push((format!("model.{name}"), (dt, t.dims().to_vec(), bytes)));
        let (dt, bytes) = tensor_bytes(&ema.shadow()[i])?;
        entries.push((format!("ema.{name}"), (dt, t.dims().to_vec(), bytes)));
        let (dt, bytes) = tensor_bytes(&ms[i])?;
        entries.push((format!("opt.m.{name}"), (dt, t.dims().to_vec(), bytes)));
        let (dt, bytes) = tensor_bytes(&vs[i])?;
        entries.push((format!("opt.v.{name}"), (dt, t.dims().to_vec(), bytes)));
    }
    let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = entries
        .iter()
        .map(|(name, (dt, shape, bytes))| {
            safetensors::tensor::TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("building tensor view for {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta_json = serde_json::to_string(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut md = HashMap::new();
    md.insert("meta".to_string(), meta_json);
    let bytes = safetensors::serialize(views, &Some(md)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: ModelPair,
    pub ema: Ema,
    pub adam: Adam,
    pub meta: CheckpointMeta,
}

pub fn load_checkpoint(path: &Path, dtype: DType) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let (_, header) = safetensors::tensor::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("meta"))
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata header", path.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(meta_json).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let st = safetensors::tensor::SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let model = ModelPair::new(&meta.net, dtype, meta.train.seed)?;
    let mut ema = Ema::new(model.params(), meta.train.ema_decay)?;
    let mut adam = Adam::new(model.params(), meta.train.learning_rate)?;
    let mut shadow = Vec::with_capacity(model.params().vars().len());
    let mut ms = Vec::with_capacity(shadow.capacity());
    let mut vs = Vec::with_capacity(shadow.capacity());
    let fetch = |key: &str| -> Result<Tensor> {
        let view = st.tensor(key).map_err(|_| Error::Checkpoint(format!("checkpoint missing tensor '{key}'")))?;
        let t = view_to_tensor(&view)?;
        Ok(t.to_dtype(dtype)?)
    };
    for (name, var) in model.params().vars() {
        let loaded = fetch(&format!("model.{name}"))?;
        if loaded.dims() != var.as_tensor().dims() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?} in the checkpoint but {:?} in the model",
                loaded.dims(),
                var.as_tensor().dims()
            )));
        }
        var.set(&loaded)?;
        shadow.push(fetch(&format!("ema.{name}"))?);
        ms.push(fetch(&format!("opt.m.{name}"))?);
        vs.push(fetch(&format!("opt.v.{name}"))?);
    }
    ema.restore(shadow, meta.ema_updates)?;
    adam.restore(meta.adam_step, ms, vs)?;
    Ok(LoadedCheckpoint { model, ema, adam, meta })
}

/// Build a fresh model whose live weights are a checkpoint's EMA weights.
pub fn load_ema_model(path: &Path, dtype: DType) -> Result<(ModelPair, CheckpointMeta)> {
    let loaded = load_checkpoint(path, dtype)?;
    loaded.ema.copy_to(loaded.model.params())?;
    Ok((loaded.model, loaded.meta))
}
