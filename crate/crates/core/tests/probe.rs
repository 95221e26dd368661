use std::time::Instant;

use candle_core::DType;
use unshadow::config::RunConfig;
use unshadow::data::{gen_synthetic, SyntheticSpec};
use unshadow::metrics::psnr;
use unshadow::nets::ModelPair;
use unshadow::rng::{stream, STREAM_BATCH};
use unshadow::sampler::{restore_with_pair, WeightPolicy};
use unshadow::schedule::make_plan;
use unshadow::train::{assemble_batch, training_step, Adam, Ema};

#[test]
#[ignore]
fn timing_probe() {
    let mut cfg = RunConfig::tiny();
    cfg.r_step = 8;
    cfg.s_steps = 25;
    cfg.seed = 0;
    cfg.images_per_iteration = std::env::var("PROBE_IMAGES").map(|v| v.parse().unwrap()).unwrap_or(4);
    cfg.patches_per_image = std::env::var("PROBE_PATCHES").map(|v| v.parse().unwrap()).unwrap_or(8);
    let net = cfg.network();
    let targs = cfg.training();
    let sched = cfg.schedule().unwrap();
    let records = gen_synthetic(16, &SyntheticSpec { image_size: 64, seed: 1, ..Default::default() }).unwrap();

    let model = ModelPair::new(&net, DType::F32, 0).unwrap();
    let mut adam = Adam::new(model.params(), targs.learning_rate).unwrap();
    let mut ema = Ema::new(model.params(), targs.ema_decay).unwrap();
    let mut rng = stream(0, STREAM_BATCH);

    let warm = Instant::now();
    let batch = assemble_batch(&records, &net, &targs, &sched, &mut rng).unwrap();
    training_step(&model, &batch, &mut adam, &sched, &targs).unwrap();
    ema.update(model.params()).unwrap();
    println!("warmup step: {:.2}s", warm.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let n = 5;
    for _ in 0..n {
        let batch = assemble_batch(&records, &net, &targs, &sched, &mut rng).unwrap();
        training_step(&model, &batch, &mut adam, &sched, &targs).unwrap();
        ema.update(model.params()).unwrap();
    }
    let per_step = t0.elapsed().as_secs_f64() / n as f64;
    println!("train step (batch {}): {per_step:.3}s", targs.batch_size());

    if std::env::var("PROBE_RESTORE").is_ok() {
        let plan = make_plan(cfg.t_max, cfg.s_steps).unwrap();
        let t1 = Instant::now();
        let r = restore_with_pair(
            &records[0].shadow,
            &records[0].mask,
            &model,
            &sched,
            &plan,
            &cfg.sampling(),
            WeightPolicy::Gss,
        )
        .unwrap();
        println!("restore 64x64 (R=32, r=8, S=25): {:.3}s, {} score rows", t1.elapsed().as_secs_f64(), r.scores.len());
    }
}

#[test]
#[ignore]
fn pilot() {
    let epochs: usize = std::env::var("PILOT_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(20);
    let mut cfg = RunConfig::tiny();
    cfg.r_step = 8;
    cfg.s_steps = 25;
    cfg.seed = 0;
    cfg.images_per_iteration = 4;
    cfg.patches_per_image = 2;
    cfg.epochs = epochs;
    let net = cfg.network();
    let targs = cfg.training();
    let sched = cfg.schedule().unwrap();
    let all = gen_synthetic(52, &SyntheticSpec { image_size: 64, seed: 42, ..Default::default() }).unwrap();
    let (train, held) = all.split_at(48);

    let model = ModelPair::new(&net, DType::F32, 0).unwrap();
    let mut adam = Adam::new(model.params(), targs.learning_rate).unwrap();
    let mut ema = Ema::new(model.params(), targs.ema_decay).unwrap();
    let mut rng = stream(0, STREAM_BATCH);
    let steps_per_epoch = train.len().div_ceil(targs.images_per_iteration);
    let start = Instant::now();
    let mut step = 0usize;
    for epoch in 0..epochs {
        for _ in 0..steps_per_epoch {
            let batch = assemble_batch(train, &net, &targs, &sched, &mut rng).unwrap();
            let rep = training_step(&model, &batch, &mut adam, &sched, &targs).unwrap();
            ema.update(model.params()).unwrap();
            step += 1;
            if step % 20 == 0 {
                println!(
                    "step {step} (epoch {epoch}): l_diff {:.4} l_global {:.4} [{:.0}s]",
                    rep.l_diff,
                    rep.l_global,
                    start.elapsed().as_secs_f64()
                );
            }
        }
    }
    println!("trained {step} steps in {:.0}s", start.elapsed().as_secs_f64());

    let plan = make_plan(cfg.t_max, cfg.s_steps).unwrap();
    let n_eval: usize = std::env::var("PILOT_EVAL").map(|v| v.parse().unwrap()).unwrap_or(4);
    let mut eval = |model: &ModelPair, label: &str| {
        let (mut p_in, mut p_gss, mut p_uni) = (0.0, 0.0, 0.0);
        for (i, rec) in held.iter().take(n_eval).enumerate() {
            let mut scfg = cfg.sampling();
            scfg.seed = 1000 + i as u64;
            let gss = restore_with_pair(&rec.shadow, &rec.mask, model, &sched, &plan, &scfg, WeightPolicy::Gss).unwrap();
            let uni =
                restore_with_pair(&rec.shadow, &rec.mask, model, &sched, &plan, &scfg, WeightPolicy::Uniform).unwrap();
            let pi = psnr(&rec.shadow, &rec.free, None).unwrap();
            let pg = psnr(&gss.image, &rec.free, None).unwrap();
            let pu = psnr(&uni.image, &rec.free, None).unwrap();
            println!("[{label}] held {i}: input {pi:.2} gss {pg:.2} uniform {pu:.2}");
            p_in += pi;
            p_gss += pg;
            p_uni += pu;
        }
        let n = n_eval as f64;
        println!(
            "[{label}] means over {n_eval}: input {:.2} gss {:.2} uniform {:.2} (gain {:+.2}, gss-uni {:+.2})",
            p_in / n,
            p_gss / n,
            p_uni / n,
            (p_gss - p_in) / n,
            (p_gss - p_uni) / n
        );
    };
    eval(&model, "raw");
    ema.copy_to(model.params()).unwrap();
    eval(&model, "ema");
}
