//! Command implementations behind the CLI binary: train, sample, eval, synth.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use rand_chacha::ChaCha20Rng;

use crate::config::RunConfig;
use crate::data::{
    gen_synthetic, list_pngs, read_triplet_dir, write_triplet_dir, SyntheticSpec, TripletRecord,
};
use crate::error::{Error, Result};
use crate::imaging::{load_mask_png, load_png, save_png, ColorSpace, PlanarImage};
use crate::metrics::{evaluate_pair, psnr, RegionReport};
use crate::nets::{rasters_to_tensor, tensor_to_rasters, ModelPair, NetworkConfig};
use crate::rng::{stream, STREAM_BATCH};
use crate::sampler::{restore_with_pair, Restoration, ScoreRecord, WeightPolicy};
use crate::schedule::make_plan;
use crate::train::{
    assemble_batch, global_pair, load_checkpoint, load_ema_model, save_checkpoint, training_step,
    Adam, CheckpointMeta, Ema, LossReport,
};

pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn net_diff(a: &NetworkConfig, b: &NetworkConfig) -> Vec<String> {
    let mut d = Vec::new();
    if a.input_size != b.input_size {
        d.push(format!("input_size: {} vs {}", a.input_size, b.input_size));
    }
    if a.base_channels != b.base_channels {
        d.push(format!("base_channels: {} vs {}", a.base_channels, b.base_channels));
    }
    if a.channel_multipliers != b.channel_multipliers {
        d.push(format!("channel_multipliers: {:?} vs {:?}", a.channel_multipliers, b.channel_multipliers));
    }
    if a.res_blocks_per_resolution != b.res_blocks_per_resolution {
        d.push(format!(
            "res_blocks_per_resolution: {} vs {}",
            a.res_blocks_per_resolution, b.res_blocks_per_resolution
        ));
    }
    if a.self_attention_resolution != b.self_attention_resolution {
        d.push(format!(
            "self_attention_resolution: {} vs {}",
            a.self_attention_resolution, b.self_attention_resolution
        ));
    }
    if a.time_embed_dim != b.time_embed_dim {
        d.push(format!("time_embed_dim: {} vs {}", a.time_embed_dim, b.time_embed_dim));
    }
    if a.rca_scale != b.rca_scale {
        d.push(format!("rca_scale: {:?} vs {:?}", a.rca_scale, b.rca_scale));
    }
    d
}

fn check_meta_matches(meta: &CheckpointMeta, cfg: &RunConfig) -> Result<()> {
    let diffs = net_diff(&meta.net, &cfg.network());
    if !diffs.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint architecture differs from config (checkpoint vs config): {}",
            diffs.join(", ")
        )));
    }
    let mut sched_diffs = Vec::new();
    if meta.t_max != cfg.t_max {
        sched_diffs.push(format!("t_max: {} vs {}", meta.t_max, cfg.t_max));
    }
    if meta.beta_start != cfg.beta_start {
        sched_diffs.push(format!("beta_start: {} vs {}", meta.beta_start, cfg.beta_start));
    }
    if meta.beta_end != cfg.beta_end {
        sched_diffs.push(format!("beta_end: {} vs {}", meta.beta_end, cfg.beta_end));
    }
    if !sched_diffs.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint schedule differs from config (checkpoint vs config): {}",
            sched_diffs.join(", ")
        )));
    }
    Ok(())
}

/// Cheap validation proxy: the global branch's one-shot restoration at t=1,
/// scored against the downsampled ground truth. Tracks training progress
/// without running the full sampler every epoch.
fn validation_psnr(pair: &ModelPair, val: &[TripletRecord]) -> Result<f64> {
    let r = pair.cfg().input_size;
    let mut sum = 0.0;
    for rec in val {
        let (g_in, g_target) = global_pair(rec, r)?;
        let x = rasters_to_tensor(&[&g_in], pair.params().dtype())?;
        let out = pair.global_forward(&x, &[1])?;
        let x_r = tensor_to_rasters(&out.x_r)?.remove(0);
        let pred = PlanarImage::from_diffusion_raster(&x_r, ColorSpace::Rgb)?;
        let gt = PlanarImage::from_diffusion_raster(&g_target, ColorSpace::Rgb)?;
        sum += psnr(&pred, &gt, None)?;
    }
    Ok(sum / val.len() as f64)
}

pub struct TrainOutcome {
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub log_path: PathBuf,
    pub epochs_run: usize,
    pub final_loss: Option<LossReport>,
}

/// Run (or resume) the training loop described by `cfg`. One epoch is one
/// pass of `ceil(dataset / images_per_iteration)` optimizer steps; `last.ckpt`
/// is rewritten after every epoch, and when a validation set is configured the
/// best checkpoint by validation PSNR is kept alongside it.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_dir = cfg
        .train_dir
        .as_ref()
        .ok_or_else(|| Error::Config("train_dir is required for training".into()))?;
    let dataset = read_triplet_dir(train_dir)?;
    if dataset.is_empty() {
        return Err(Error::Dataset(format!("no triplets found in {}", train_dir.display())));
    }
    let val = match &cfg.val_dir {
        Some(dir) => {
            let v = read_triplet_dir(dir)?;
            if v.is_empty() {
                return Err(Error::Dataset(format!("no triplets found in {}", dir.display())));
            }
            Some(v)
        }
        None => None,
    };
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::Io { path: cfg.output_dir.clone(), source: e })?;
    let last_path = cfg.output_dir.join(LAST_CKPT);
    let best_path = cfg.output_dir.join(BEST_CKPT);
    let log_path = cfg.output_dir.join(TRAIN_LOG);

    let net = cfg.network();
    let targs = cfg.training();
    let sched = cfg.schedule()?;
    let dtype = DType::F32;

    let (model, mut adam, mut ema, mut rng, start_epoch, mut global_step) = if resume {
        let loaded = load_checkpoint(&last_path, dtype)?;
        check_meta_matches(&loaded.meta, cfg)?;
        let pos: u128 = loaded
            .meta
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position '{}'", loaded.meta.rng_word_pos)))?;
        let mut rng = stream(cfg.seed, STREAM_BATCH);
        rng.set_word_pos(pos);
        let epoch = loaded.meta.epoch;
        let step = loaded.meta.step;
        (loaded.model, loaded.adam, loaded.ema, rng, epoch, step)
    } else {
        let model = ModelPair::new(&net, dtype, cfg.seed)?;
        let adam = Adam::new(model.params(), targs.learning_rate)?;
        let ema = Ema::new(model.params(), targs.ema_decay)?;
        let rng: ChaCha20Rng = stream(cfg.seed, STREAM_BATCH);
        (model, adam, ema, rng, 0, 0)
    };
    if start_epoch >= targs.epochs {
        log::info!("checkpoint already at epoch {start_epoch} of {}; nothing to do", targs.epochs);
        return Ok(TrainOutcome {
            last_checkpoint: last_path,
            best_checkpoint: best_path.exists().then_some(best_path),
            log_path,
            epochs_run: 0,
            final_loss: None,
        });
    }

    // A held-out scratch model receives the EMA weights for validation.
    let val_model = match &val {
        Some(_) => Some(ModelPair::new(&net, dtype, cfg.seed)?),
        None => None,
    };
    let mut best_psnr = f64::NEG_INFINITY;
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::Io { path: log_path.clone(), source: e })?;

    let steps_per_epoch = dataset.len().div_ceil(targs.images_per_iteration);
    let mut last_report = None;
    for epoch in start_epoch..targs.epochs {
        let epoch_start = Instant::now();
        for _ in 0..steps_per_epoch {
            let step_start = Instant::now();
            let batch = assemble_batch(&dataset, &net, &targs, &sched, &mut rng)?;
            let report = training_step(&model, &batch, &mut adam, &sched, &targs)?;
            ema.update(model.params())?;
            global_step += 1;
            let line = serde_json::json!({
                "epoch": epoch,
                "step": global_step,
                "l_diff": report.l_diff,
                "l_global": report.l_global,
                "l_total": report.l_total,
                "wall_ms": step_start.elapsed().as_secs_f64() * 1e3,
            });
            writeln!(log_file, "{line}").map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
            last_report = Some(report);
        }
        let meta = CheckpointMeta {
            net: net.clone(),
            train: targs.clone(),
            t_max: cfg.t_max,
            beta_start: cfg.beta_start,
            beta_end: cfg.beta_end,
            epoch: epoch + 1,
            step: global_step,
            adam_step: adam.step_count(),
            ema_updates: ema.updates(),
            rng_word_pos: rng.get_word_pos().to_string(),
        };
        save_checkpoint(&last_path, &model, &ema, &adam, &meta)?;
        let report = last_report.expect("at least one step per epoch");
        if let (Some(val_set), Some(vm)) = (&val, &val_model) {
            ema.copy_to(vm.params())?;
            let vp = validation_psnr(vm, val_set)?;
            if vp > best_psnr {
                best_psnr = vp;
                fs::copy(&last_path, &best_path)
                    .map_err(|e| Error::Io { path: best_path.clone(), source: e })?;
            }
            log::info!(
                "epoch {}/{} l_total {:.5} val_psnr {:.2} (best {:.2}) [{:.1}s]",
                epoch + 1,
                targs.epochs,
                report.l_total,
                vp,
                best_psnr,
                epoch_start.elapsed().as_secs_f64()
            );
        } else {
            log::info!(
                "epoch {}/{} l_diff {:.5} l_global {:.5} l_total {:.5} [{:.1}s]",
                epoch + 1,
                targs.epochs,
                report.l_diff,
                report.l_global,
                report.l_total,
                epoch_start.elapsed().as_secs_f64()
            );
        }
    }

    Ok(TrainOutcome {
        last_checkpoint: last_path,
        best_checkpoint: best_path.exists().then_some(best_path),
        log_path,
        epochs_run: targs.epochs - start_epoch,
        final_loss: last_report,
    })
}

fn write_scores_csv(path: &Path, scores: &[ScoreRecord]) -> Result<()> {
    let mut out = String::from("t,patch,top,left,s_bri,s_m,weight\n");
    for s in scores {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.t, s.patch, s.top, s.left, s.s_bri, s.s_m, s.weight
        ));
    }
    fs::write(path, out).map_err(|e| Error::Io { path: path.into(), source: e })
}

/// Aggregates of one timestep's patch scores.
#[derive(Debug, Clone, Copy)]
pub struct StepScoreSummary {
    pub t: usize,
    pub patches: usize,
    pub s_bri: [f64; 3],
    pub s_m: [f64; 3],
    pub weight: [f64; 3],
}

fn stats(values: impl Iterator<Item = f64> + Clone) -> [f64; 3] {
    let (mut n, mut sum, mut lo, mut hi) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        n += 1;
        sum += v;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    [sum / n as f64, lo, hi]
}

/// Per-timestep [mean, min, max] of each patch score, in sampling order.
pub fn score_summaries(scores: &[ScoreRecord]) -> Vec<StepScoreSummary> {
    let mut order: Vec<usize> = Vec::new();
    let mut by_t: BTreeMap<usize, Vec<&ScoreRecord>> = BTreeMap::new();
    for s in scores {
        if !by_t.contains_key(&s.t) {
            order.push(s.t);
        }
        by_t.entry(s.t).or_default().push(s);
    }
    order
        .into_iter()
        .map(|t| {
            let rows = &by_t[&t];
            StepScoreSummary {
                t,
                patches: rows.len(),
                s_bri: stats(rows.iter().map(|r| r.s_bri)),
                s_m: stats(rows.iter().map(|r| r.s_m)),
                weight: stats(rows.iter().map(|r| r.weight)),
            }
        })
        .collect()
}

pub struct SampleOutcome {
    pub out_path: PathBuf,
    pub scores_path: Option<PathBuf>,
    pub restoration: Restoration,
}

/// Restore one image with a trained checkpoint's EMA weights.
pub fn cmd_sample(
    cfg: &RunConfig,
    ckpt: &Path,
    input: &Path,
    mask_path: &Path,
    out: &Path,
    policy: WeightPolicy,
    verbose: bool,
) -> Result<SampleOutcome> {
    cfg.validate()?;
    let (pair, meta) = load_ema_model(ckpt, DType::F32)?;
    check_meta_matches(&meta, cfg)?;
    let image = load_png(input)?;
    if image.color() != ColorSpace::Rgb {
        return Err(Error::InvalidColorSpace { expected: "RGB", got: "grayscale" });
    }
    let mask = load_mask_png(mask_path)?;
    let sched = cfg.schedule()?;
    let plan = make_plan(cfg.t_max, cfg.s_steps)?;
    let restoration = restore_with_pair(&image, &mask, &pair, &sched, &plan, &cfg.sampling(), policy)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
        }
    }
    save_png(&restoration.image, out)?;
    let scores_path = if verbose {
        let path = out.with_extension("scores.csv");
        write_scores_csv(&path, &restoration.scores)?;
        for s in score_summaries(&restoration.scores) {
            println!(
                "t {:>4}  patches {:>4}  s_bri {:.4} [{:.4}, {:.4}]  s_m {:.4} [{:.4}, {:.4}]  weight {:.4} [{:.4}, {:.4}]",
                s.t, s.patches, s.s_bri[0], s.s_bri[1], s.s_bri[2], s.s_m[0], s.s_m[1], s.s_m[2],
                s.weight[0], s.weight[1], s.weight[2]
            );
        }
        Some(path)
    } else {
        None
    };
    Ok(SampleOutcome { out_path: out.to_path_buf(), scores_path, restoration })
}

pub struct EvalSummary {
    pub rows: Vec<(String, RegionReport)>,
    pub mean: RegionReport,
}

fn mean_report(rows: &[(String, RegionReport)]) -> RegionReport {
    let n = rows.len() as f64;
    let avg = |f: &dyn Fn(&RegionReport) -> f64| rows.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
    RegionReport {
        psnr_s: avg(&|r| r.psnr_s),
        psnr_ns: avg(&|r| r.psnr_ns),
        psnr_all: avg(&|r| r.psnr_all),
        ssim_s: avg(&|r| r.ssim_s),
        ssim_ns: avg(&|r| r.ssim_ns),
        ssim_all: avg(&|r| r.ssim_all),
        rmse_s: avg(&|r| r.rmse_s),
        rmse_ns: avg(&|r| r.rmse_ns),
        rmse_all: avg(&|r| r.rmse_all),
        mae_s: avg(&|r| r.mae_s),
        mae_ns: avg(&|r| r.mae_ns),
        mae_all: avg(&|r| r.mae_all),
    }
}

fn report_fields(r: &RegionReport) -> [f64; 12] {
    [
        r.psnr_s, r.psnr_ns, r.psnr_all, r.ssim_s, r.ssim_ns, r.ssim_all, r.rmse_s, r.rmse_ns,
        r.rmse_all, r.mae_s, r.mae_ns, r.mae_all,
    ]
}

const REPORT_HEADER: [&str; 12] = [
    "psnr_s", "psnr_ns", "psnr_all", "ssim_s", "ssim_ns", "ssim_all", "rmse_s", "rmse_ns",
    "rmse_all", "mae_s", "mae_ns", "mae_all",
];

/// Render the per-image rows plus the mean as an aligned text table.
pub fn render_eval_table(summary: &EvalSummary) -> String {
    let name_w = summary
        .rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(["name".len(), "mean".len()])
        .max()
        .unwrap_or(4);
    let mut out = format!("{:<name_w$}", "name");
    for h in REPORT_HEADER {
        out.push_str(&format!(" {h:>9}"));
    }
    out.push('\n');
    let push_row = |name: &str, r: &RegionReport, out: &mut String| {
        out.push_str(&format!("{name:<name_w$}"));
        for v in report_fields(r) {
            out.push_str(&format!(" {v:>9.4}"));
        }
        out.push('\n');
    };
    for (name, r) in &summary.rows {
        push_row(name, r, &mut out);
    }
    push_row("mean", &summary.mean, &mut out);
    out
}

/// Score every prediction against its ground truth over shadow, non-shadow,
/// and whole-image regions; write a CSV and return the rows.
pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, mask_dir: &Path, out_csv: &Path) -> Result<EvalSummary> {
    let preds = list_pngs(pred_dir)?;
    let gts = list_pngs(gt_dir)?;
    let masks = list_pngs(mask_dir)?;
    if gts.is_empty() {
        return Err(Error::Dataset(format!("no PNGs found in {}", gt_dir.display())));
    }
    let mut problems = Vec::new();
    for (label, have) in [("predictions", &preds), ("masks", &masks)] {
        let missing: Vec<&str> = gts.keys().filter(|k| !have.contains_key(*k)).map(String::as_str).collect();
        if !missing.is_empty() {
            problems.push(format!("missing {label}: {}", missing.join(", ")));
        }
    }
    let extra: Vec<&str> = preds.keys().filter(|k| !gts.contains_key(*k)).map(String::as_str).collect();
    if !extra.is_empty() {
        problems.push(format!("missing ground truth: {}", extra.join(", ")));
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(problems.join("; ")));
    }

    let mut rows = Vec::with_capacity(gts.len());
    for (name, gt_path) in &gts {
        let pred = load_png(&preds[name])?;
        let gt = load_png(gt_path)?;
        let mask = load_mask_png(&masks[name])?;
        let report = evaluate_pair(&pred, &gt, &mask)
            .map_err(|e| Error::Dataset(format!("evaluating '{name}': {e}")))?;
        rows.push((name.clone(), report));
    }
    let mean = mean_report(&rows);

    let mut csv = String::from("name");
    for h in REPORT_HEADER {
        csv.push(',');
        csv.push_str(h);
    }
    csv.push('\n');
    for (name, r) in rows.iter().chain(std::iter::once(&("mean".to_string(), mean.clone()))) {
        csv.push_str(name);
        for v in report_fields(r) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    if let Some(dir) = out_csv.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
        }
    }
    fs::write(out_csv, csv).map_err(|e| Error::Io { path: out_csv.into(), source: e })?;
    Ok(EvalSummary { rows, mean })
}

/// Generate a synthetic triplet directory.
pub fn cmd_synth(n: usize, size: usize, out: &Path, seed: u64) -> Result<()> {
    let spec = SyntheticSpec { image_size: size, seed, ..SyntheticSpec::default() };
    let records = gen_synthetic(n, &spec)?;
    write_triplet_dir(out, &records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_mask_png;

    fn micro_config(root: &Path) -> RunConfig {
        RunConfig {
            input_size: 16,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            res_blocks_per_resolution: 1,
            self_attention_resolution: 8,
            time_embed_dim: 32,
            t_max: 20,
            beta_start: 1e-4,
            beta_end: 0.02,
            epochs: 2,
            images_per_iteration: 4,
            patches_per_image: 2,
            r_step: 8,
            s_steps: 4,
            train_dir: Some(root.join("train")),
            val_dir: None,
            output_dir: root.join("out"),
            seed: 11,
            ..RunConfig::default()
        }
    }

    fn read_log(path: &Path) -> Vec<serde_json::Value> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn synth_writes_loadable_triplets() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("synth");
        cmd_synth(3, 16, &dir, 5).unwrap();
        let records = read_triplet_dir(&dir).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].shadow.height(), 16);
        // Same seed, same bytes.
        let dir2 = tmp.path().join("synth2");
        cmd_synth(3, 16, &dir2, 5).unwrap();
        let a = fs::read(dir.join("shadow/synth_00000.png")).unwrap();
        let b = fs::read(dir2.join("shadow/synth_00000.png")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_smoke_writes_checkpoint_and_parseable_log() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = micro_config(tmp.path());
        cmd_synth(4, 16, cfg.train_dir.as_ref().unwrap(), 1).unwrap();
        let outcome = cmd_train(&cfg, false).unwrap();
        assert!(outcome.last_checkpoint.exists());
        assert!(outcome.best_checkpoint.is_none());
        let lines = read_log(&outcome.log_path);
        // 4 images / 4 per iteration = 1 step per epoch, 2 epochs.
        assert_eq!(lines.len(), 2);
        for line in &lines {
            assert!(line["l_total"].as_f64().unwrap().is_finite());
            assert!(line["wall_ms"].as_f64().unwrap() >= 0.0);
        }
        assert_eq!(lines[0]["epoch"], 0);
        assert_eq!(lines[1]["step"], 2);
        assert!(outcome.final_loss.unwrap().l_total.is_finite());
    }

    #[test]
    fn train_requires_dataset_before_any_work() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = micro_config(tmp.path());
        let err = cmd_train(&cfg, false).err().expect("missing train dir");
        assert!(!cfg.output_dir.exists(), "failed run must not create outputs: {err}");
        let bad = RunConfig { learning_rate: -1.0, ..micro_config(tmp.path()) };
        assert!(bad.validate().is_err());
        assert!(cmd_train(&bad, false).is_err());
    }

    #[test]
    fn resumed_training_matches_uninterrupted_run() {
        let tmp = tempfile::tempdir().unwrap();
        // Uninterrupted: 4 epochs in one go.
        let mut solo = micro_config(&tmp.path().join("a"));
        solo.train_dir = Some(tmp.path().join("data"));
        solo.epochs = 4;
        cmd_synth(4, 16, &tmp.path().join("data"), 1).unwrap();
        let solo_out = cmd_train(&solo, false).unwrap();
        // Interrupted: 2 epochs, then resume to 4.
        let mut split = micro_config(&tmp.path().join("b"));
        split.train_dir = Some(tmp.path().join("data"));
        cmd_train(&split, false).unwrap();
        split.epochs = 4;
        let split_out = cmd_train(&split, true).unwrap();
        assert_eq!(split_out.epochs_run, 2);

        let solo_lines = read_log(&solo_out.log_path);
        let split_lines = read_log(&split_out.log_path);
        assert_eq!(solo_lines.len(), 4);
        assert_eq!(split_lines.len(), 4);
        for (a, b) in solo_lines.iter().zip(&split_lines) {
            for key in ["epoch", "step", "l_diff", "l_global", "l_total"] {
                assert_eq!(a[key], b[key], "field {key}");
            }
        }
        // Resuming a finished run is a no-op.
        let again = cmd_train(&split, true).unwrap();
        assert_eq!(again.epochs_run, 0);
        assert!(again.final_loss.is_none());
    }

    #[test]
    fn validation_tracks_best_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = micro_config(tmp.path());
        cfg.val_dir = Some(tmp.path().join("val"));
        cmd_synth(4, 16, cfg.train_dir.as_ref().unwrap(), 1).unwrap();
        cmd_synth(2, 16, cfg.val_dir.as_ref().unwrap(), 2).unwrap();
        let outcome = cmd_train(&cfg, false).unwrap();
        let best = outcome.best_checkpoint.expect("validation produces best.ckpt");
        assert!(best.exists());
        let loaded = load_checkpoint(&best, DType::F32).unwrap();
        assert!(loaded.meta.epoch >= 1);
    }

    #[test]
    fn sample_restores_deterministically_and_reports_scores() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = micro_config(tmp.path());
        cmd_synth(4, 16, cfg.train_dir.as_ref().unwrap(), 1).unwrap();
        let outcome = cmd_train(&cfg, false).unwrap();

        // A 24x24 input exercises the clamped multi-patch path with R=16, r=8.
        let records = gen_synthetic(1, &SyntheticSpec { image_size: 24, seed: 9, ..SyntheticSpec::default() }).unwrap();
        let input = tmp.path().join("in.png");
        let mask_p = tmp.path().join("mask.png");
        save_png(&records[0].shadow, &input).unwrap();
        save_mask_png(&records[0].mask, &mask_p).unwrap();

        let out1 = tmp.path().join("restored.png");
        let got = cmd_sample(&cfg, &outcome.last_checkpoint, &input, &mask_p, &out1, WeightPolicy::Gss, true).unwrap();
        let scores_path = got.scores_path.expect("verbose run writes scores");
        let csv = fs::read_to_string(&scores_path).unwrap();
        // 4 plan steps x 4 patches (2x2 grid of 16px patches at stride 8 in 24px) plus header.
        assert_eq!(csv.lines().count(), 1 + 4 * 4);
        assert!(csv.starts_with("t,patch,top,left,s_bri,s_m,weight"));
        assert_eq!(score_summaries(&got.restoration.scores).len(), 4);

        let out2 = tmp.path().join("restored2.png");
        cmd_sample(&cfg, &outcome.last_checkpoint, &input, &mask_p, &out2, WeightPolicy::Gss, false).unwrap();
        assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap(), "same seed, same PNG");

        let out3 = tmp.path().join("restored3.png");
        cmd_sample(&cfg, &outcome.last_checkpoint, &input, &mask_p, &out3, WeightPolicy::Uniform, false).unwrap();
        assert!(out3.exists());
    }

    #[test]
    fn sample_rejects_architecture_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = micro_config(tmp.path());
        cmd_synth(4, 16, cfg.train_dir.as_ref().unwrap(), 1).unwrap();
        let outcome = cmd_train(&cfg, false).unwrap();
        let bad = RunConfig { base_channels: 12, time_embed_dim: 64, ..cfg.clone() };
        let err = cmd_sample(
            &bad,
            &outcome.last_checkpoint,
            &tmp.path().join("x.png"),
            &tmp.path().join("m.png"),
            &tmp.path().join("o.png"),
            WeightPolicy::Gss,
            false,
        )
        .err()
        .expect("mismatched architecture");
        let msg = err.to_string();
        assert!(msg.contains("base_channels: 8 vs 12"), "{msg}");
        assert!(msg.contains("time_embed_dim: 32 vs 64"), "{msg}");

        let bad_sched = RunConfig { t_max: 40, s_steps: 4, ..cfg.clone() };
        let err = cmd_sample(
            &bad_sched,
            &outcome.last_checkpoint,
            &tmp.path().join("x.png"),
            &tmp.path().join("m.png"),
            &tmp.path().join("o.png"),
            WeightPolicy::Gss,
            false,
        )
        .err()
        .expect("mismatched schedule");
        assert!(err.to_string().contains("t_max: 20 vs 40"), "{err}");
    }

    #[test]
    fn eval_perfect_predictions_hit_the_caps() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("synth");
        cmd_synth(2, 32, &dir, 3).unwrap();
        let csv_path = tmp.path().join("report.csv");
        // Free images double as their own predictions.
        let summary = cmd_eval(&dir.join("free"), &dir.join("free"), &dir.join("mask"), &csv_path).unwrap();
        assert_eq!(summary.rows.len(), 2);
        assert_eq!(summary.mean.psnr_all, 100.0);
        assert!((summary.mean.ssim_all - 1.0).abs() < 1e-12);
        assert_eq!(summary.mean.rmse_s, 0.0);
        let csv = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 + 1);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
        let table = render_eval_table(&summary);
        assert!(table.contains("psnr_s") && table.contains("mean"));
    }

    #[test]
    fn eval_names_missing_files() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("synth");
        cmd_synth(2, 32, &dir, 3).unwrap();
        let pred_dir = tmp.path().join("pred");
        fs::create_dir_all(&pred_dir).unwrap();
        fs::copy(dir.join("free/synth_00000.png"), pred_dir.join("synth_00000.png")).unwrap();
        let err = cmd_eval(&pred_dir, &dir.join("free"), &dir.join("mask"), &tmp.path().join("r.csv"))
            .err()
            .expect("one prediction missing");
        let msg = err.to_string();
        assert!(msg.contains("missing predictions") && msg.contains("synth_00001"), "{msg}");
    }
}
