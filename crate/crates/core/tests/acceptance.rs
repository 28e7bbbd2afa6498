use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use hiresnet::analysis::activation_stats;
use hiresnet::architecture::{count_params, enumerate_projections};
use hiresnet::data::{load_cifar10, split_train_val, Dataset, SplitSpec, SyntheticSpec};
use hiresnet::gradcheck::{model_check, op_suite};
use hiresnet::kernels::softmax;
use hiresnet::training::{
    evaluate, load_checkpoint, lr_at, save_checkpoint, train, train_step, write_metrics_csv,
    AdamHyper, AdamState, TrainConfig,
};
use hiresnet::{Baseline, Model, ModelConfig, Tensor, VariantMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const CIFAR_ENV: &str = "HIRESNET_CIFAR10_DIR";
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Blob amplitude of the stand-in for the directional check, low enough
/// that neither network saturates in ten epochs.
const DIRECTIONAL_AMPLITUDE: f64 = 0.06;

type Check = Result<String, String>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

enum Source {
    Cifar(PathBuf),
    Synthetic,
}

impl Source {
    fn detect() -> Self {
        match std::env::var_os(CIFAR_ENV) {
            Some(dir) => Source::Cifar(dir.into()),
            None => Source::Synthetic,
        }
    }

    fn describe(&self) -> String {
        match self {
            Source::Cifar(dir) => format!("CIFAR-10 from {}", dir.display()),
            Source::Synthetic => {
                format!("synthetic blobs ({CIFAR_ENV} unset; CIFAR-10 not available)")
            }
        }
    }

    /// The first `n` training images, or `n` blobs of the given amplitude.
    fn images(&self, n: usize, amplitude: f64, seed: u64) -> Result<Dataset, String> {
        match self {
            Source::Cifar(dir) => {
                let (train, _) = load_cifar10(dir).map_err(fail)?;
                train.subset(&(0..n).collect::<Vec<_>>()).map_err(fail)
            }
            Source::Synthetic => SyntheticSpec {
                amplitude,
                ..SyntheticSpec::new(n, 10, [3, 32, 32], seed)
            }
            .generate()
            .map_err(fail),
        }
    }
}

fn resnet(mask: VariantMask, seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..ModelConfig::preset(Baseline::Resnet).with_mask(mask)
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn gradient_suite() -> Check {
    let checks = op_suite(0).map_err(fail)?;
    let mut per_op: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for c in &checks {
        if !c.report.passed() {
            return Err(format!(
                "{} on {} has max relative error {:.3e}",
                c.op,
                c.shape,
                c.report.max_rel_error()
            ));
        }
        let entry = per_op.entry(c.op).or_default();
        entry.0 += 1;
        entry.1 = entry.1.max(c.report.max_rel_error());
    }
    if let Some((op, (n, _))) = per_op.iter().find(|(_, (n, _))| *n < 3) {
        return Err(format!("{op} checked on only {n} shapes"));
    }
    let micro = model_check(0).map_err(fail)?;
    if !micro.passed() {
        return Err(format!(
            "micro network max relative error {:.3e}",
            micro.fine.max_rel_error()
        ));
    }
    let worst = per_op.values().map(|v| v.1).fold(0.0, f64::max);
    Ok(format!(
        "{} ops x >=3 shapes, worst op error {worst:.2e}, micro network {:.2e}",
        per_op.len(),
        micro.fine.max_rel_error()
    ))
}

fn accounting() -> Check {
    let masks: Vec<VariantMask> = ["full", "in", "out", "p1", "p2", "p3"]
        .iter()
        .map(|m| m.parse().unwrap())
        .collect();
    let mut resnet_deltas = Vec::new();
    for baseline in [Baseline::Plain, Baseline::Resnet, Baseline::Resnext] {
        let base = ModelConfig::preset(baseline);
        let none =
            count_params(&Model::new(&base.clone().with_mask(VariantMask::None)).map_err(fail)?)
                .total;
        for mask in &masks {
            let masked =
                count_params(&Model::new(&base.clone().with_mask(mask.clone())).map_err(fail)?)
                    .total;
            let expected: usize = enumerate_projections(&base, mask)
                .map_err(fail)?
                .iter()
                .map(|p| p.c_src * p.c_dst + 2 * p.c_dst)
                .sum();
            if masked - none != expected {
                return Err(format!(
                    "{baseline:?} {mask}: {masked} - {none} != {expected}"
                ));
            }
            if baseline == Baseline::Resnet {
                resnet_deltas.push(expected);
            }
        }
    }
    let [full, inn, out, p1, p2, p3] = resnet_deltas[..] else {
        unreachable!()
    };
    let ordered = full > out && out > p1 && p1 > inn.max(p2) && inn.min(p2) > p3 && p3 > 0;
    let line = format!("deltas full {full} out {out} p1 {p1} in {inn} p2 {p2} p3 {p3}");
    if ordered {
        Ok(line)
    } else {
        Err(format!("ordering violated: {line}"))
    }
}

fn degeneracy() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut full = Model::new(&resnet(VariantMask::Full, 3)).map_err(fail)?;
    for (name, t) in full.params_mut() {
        if name.ends_with(".gamma") || name.ends_with(".beta") {
            for v in t.data_mut() {
                *v += 0.3 * rng.sample::<f32, _>(StandardNormal);
            }
        }
    }
    let names: Vec<String> = full.bn_states().keys().cloned().collect();
    for name in names {
        let s = full.bn_state_mut(&name).unwrap();
        for m in &mut s.running_mean {
            *m = 0.5 * rng.sample::<f32, _>(StandardNormal);
        }
        for v in &mut s.running_var {
            *v = rng.random_range(0.5..2.0);
        }
    }
    full.zero_projections();
    let mut plain = Model::new(&resnet(VariantMask::None, 99)).map_err(fail)?;
    plain.copy_shared_from(&full);
    let x = normal(&mut rng, &[100, 3, 32, 32]);
    let a = full.logits(&x).map_err(fail)?;
    let b = plain.logits(&x).map_err(fail)?;
    let differing = bits(&a)
        .iter()
        .zip(bits(&b))
        .filter(|(p, q)| **p != *q)
        .count();
    if differing == 0 && a.shape() == b.shape() {
        Ok(format!("100 inputs, {} logits bitwise equal", a.numel()))
    } else {
        Err(format!("{differing} of {} logits differ", a.numel()))
    }
}

fn depth_and_shape() -> Check {
    let model = Model::new(&resnet(VariantMask::Full, 0)).map_err(fail)?;
    let skipped: Vec<String> = model.projections().iter().map(|p| p.prefix()).collect();
    let weighted = model
        .params()
        .iter()
        .filter(|(name, t)| {
            name.ends_with(".weight")
                && matches!(t.rank(), 2 | 4)
                && !name.contains("shortcut")
                && !skipped.iter().any(|p| name.starts_with(p.as_str()))
        })
        .count();
    if weighted != 18 {
        return Err(format!("{weighted} weighted layers"));
    }
    let x = normal(&mut ChaCha8Rng::seed_from_u64(4), &[7, 3, 32, 32]);
    let logits = model.logits(&x).map_err(fail)?;
    if logits.shape() != [7, 10] {
        return Err(format!("logits shape {:?}", logits.shape()));
    }
    let probs = softmax(&logits).map_err(fail)?;
    let worst = probs
        .data()
        .chunks_exact(10)
        .map(|row| (row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    if worst <= 1e-6 {
        Ok(format!(
            "18 weighted layers, logits [7, 10], max |row sum - 1| {worst:.1e}"
        ))
    } else {
        Err(format!("softmax row sum off by {worst:.3e}"))
    }
}

fn overfit(source: &Source) -> Check {
    let data = source.images(100, SyntheticSpec::DEFAULT_AMPLITUDE, 5)?;
    let mut model = Model::new(&resnet(VariantMask::Full, 0)).map_err(fail)?;
    let mut state = AdamState::new(model.params().values().map(Tensor::shape));
    let hyper = AdamHyper::default();
    let lr = TrainConfig::default().lr0;
    let (x, labels) = data.gather(&(0..data.len()).collect::<Vec<_>>());
    let mut acc = 0.0;
    for step in 1..=200 {
        train_step(&mut model, &mut state, x.clone(), &labels, lr, &hyper).map_err(fail)?;
        acc = evaluate(&model, &data, 100).map_err(fail)?.top1;
        if acc == 1.0 {
            return Ok(format!("100% train accuracy after {step} steps"));
        }
    }
    Err(format!(
        "train accuracy {:.1}% after 200 steps",
        100.0 * acc
    ))
}

struct Directional {
    val: Dataset,
    hiresnet: Vec<Model>,
}

fn directional(source: &Source) -> (Check, Option<Directional>) {
    let run = || -> Result<(String, bool, Directional), String> {
        let data = source.images(2000, DIRECTIONAL_AMPLITUDE, 11)?;
        let (train_set, val) = split_train_val(&data, SplitSpec::new(0.1, 0)).map_err(fail)?;
        let mut accs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut hiresnet = Vec::new();
        for seed in SEEDS {
            for (name, baseline, mask) in [
                ("plain", Baseline::Plain, VariantMask::None),
                ("hiresnet", Baseline::Resnet, VariantMask::Full),
            ] {
                let config = ModelConfig {
                    seed,
                    ..ModelConfig::preset(baseline).with_mask(mask)
                };
                let cfg = TrainConfig {
                    epochs: 10,
                    seed,
                    ..TrainConfig::default()
                };
                let model = Model::new(&config).map_err(fail)?;
                let out = train(model, &train_set, &val, &cfg).map_err(fail)?;
                let top1 = out.metrics.last().map_or(0.0, |r| r.val_top1);
                println!("    seed {seed} {name:<8} val top-1 {:.1}%", 100.0 * top1);
                accs.entry(name).or_default().push(top1);
                if name == "hiresnet" {
                    hiresnet.push(out.model);
                }
            }
        }
        let mean = |k: &str| accs[k].iter().sum::<f64>() / accs[k].len() as f64;
        let min = |k: &str| accs[k].iter().copied().fold(f64::INFINITY, f64::min);
        let (plain, hires) = (mean("plain"), mean("hiresnet"));
        let pass = min("plain") > 0.3 && min("hiresnet") > 0.3 && hires >= plain;
        let line = format!(
            "mean val top-1 plain {:.1}% hiresnet {:.1}% (min {:.1}% / {:.1}%)",
            100.0 * plain,
            100.0 * hires,
            100.0 * min("plain"),
            100.0 * min("hiresnet")
        );
        Ok((line, pass, Directional { val, hiresnet }))
    };
    match run() {
        Ok((line, true, d)) => (Ok(line), Some(d)),
        Ok((line, false, d)) => (Err(line), Some(d)),
        Err(e) => (Err(e), None),
    }
}

fn activation_report(trained: Option<&Directional>) -> Check {
    let d = trained.ok_or("no trained models from the directional check")?;
    let mut ratios: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for model in &d.hiresnet {
        let report = activation_stats(model, &d.val, 100).map_err(fail)?;
        let seen: usize = report.levels.iter().map(|l| l.projections.len()).sum();
        if seen != model.projections().len() {
            return Err(format!(
                "{seen} projections reported, {} enabled",
                model.projections().len()
            ));
        }
        for level in &report.levels {
            let r = level.mean_abs_residual;
            if !(r.is_finite() && r > 0.0) {
                return Err(format!("level {} residual statistic {r}", level.level));
            }
            for p in &level.projections {
                if !(p.mean_abs.is_finite() && p.mean_abs > 0.0) {
                    return Err(format!(
                        "projection {}->{} statistic {}",
                        p.src, level.level, p.mean_abs
                    ));
                }
            }
            for (src, ratio) in level.ratios() {
                ratios.entry((src, level.level)).or_default().push(ratio);
            }
        }
        let mut zeroed = model.clone();
        zeroed.zero_projections();
        let report = activation_stats(&zeroed, &d.val, 100).map_err(fail)?;
        if let Some(p) = report
            .levels
            .iter()
            .flat_map(|l| &l.projections)
            .find(|p| p.mean_abs != 0.0)
        {
            return Err(format!(
                "zeroed projection from {} reports {}",
                p.src, p.mean_abs
            ));
        }
    }
    for ((src, dst), r) in &ratios {
        println!(
            "    projection {src}->{dst} / residual {dst}: mean ratio {:.3} over {} seeds",
            r.iter().sum::<f64>() / r.len() as f64,
            r.len()
        );
    }
    Ok(format!(
        "{} connections finite and positive on {} models, zeroed projections exactly 0",
        ratios.len(),
        d.hiresnet.len()
    ))
}

fn schedule() -> Check {
    let cfg = TrainConfig::default();
    for (epoch, expected) in [(0, 0.01), (20, 0.005), (40, 0.0025), (79, 0.00125)] {
        let got = lr_at(epoch, &cfg);
        if got != expected {
            return Err(format!("epoch {epoch}: {got} != {expected}"));
        }
    }
    Ok("0.01 / 0.005 / 0.0025 / 0.00125 at epochs 0 / 20 / 40 / 79".into())
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(fail)?;
    let data = SyntheticSpec::new(200, 10, [3, 32, 32], 8)
        .generate()
        .map_err(fail)?;
    let (train_set, val) = split_train_val(&data, SplitSpec::new(0.2, 1)).map_err(fail)?;
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 40,
        seed: 6,
        ..TrainConfig::default()
    };
    let run = |tag: &str| -> Result<(Vec<u8>, Model), String> {
        let model = Model::new(&resnet(VariantMask::Full, 6)).map_err(fail)?;
        let out = train(model, &train_set, &val, &cfg).map_err(fail)?;
        let path = dir.path().join(format!("{tag}.csv"));
        write_metrics_csv(&path, &out.metrics).map_err(fail)?;
        Ok((std::fs::read(&path).map_err(fail)?, out.model))
    };
    let (a, model) = run("a")?;
    let (b, _) = run("b")?;
    if a != b {
        return Err("metrics files differ between identical runs".into());
    }
    let ckpt = dir.path().join("final.ckpt");
    save_checkpoint(&model, &ckpt).map_err(fail)?;
    let restored = load_checkpoint(&ckpt).map_err(fail)?;
    let before = model.logits(val.images()).map_err(fail)?;
    let after = restored.logits(val.images()).map_err(fail)?;
    if bits(&before) != bits(&after) {
        return Err("restored model changes eval logits".into());
    }
    Ok(format!(
        "metrics files identical ({} bytes), {} restored logits bitwise equal",
        a.len(),
        after.numel()
    ))
}

fn report(number: usize, name: &str, budget: Duration, outcome: Check, elapsed: Duration) -> bool {
    let outcome = match outcome {
        Ok(line) if elapsed > budget => Err(format!("{line}; over the {:.0?} budget", budget)),
        other => other,
    };
    let (tag, line) = match &outcome {
        Ok(line) => ("PASS", line),
        Err(line) => ("FAIL", line),
    };
    println!("{tag} {number} {name} [{:.1?}]: {line}", elapsed);
    outcome.is_ok()
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn main() {
    let source = Source::detect();
    println!("data source: {}", source.describe());
    let minutes = |m: u64| Duration::from_secs(60 * m);
    let mut passed = Vec::new();

    let (c, t) = timed(gradient_suite);
    passed.push(report(1, "gradient suite", minutes(1), c, t));
    let (c, t) = timed(accounting);
    passed.push(report(
        2,
        "accounting identity",
        Duration::from_secs(1),
        c,
        t,
    ));
    let (c, t) = timed(degeneracy);
    passed.push(report(3, "degeneracy", Duration::from_secs(10), c, t));
    let (c, t) = timed(depth_and_shape);
    passed.push(report(4, "depth and shape", Duration::MAX, c, t));
    let (c, t) = timed(|| overfit(&source));
    passed.push(report(5, "overfit sanity", minutes(5), c, t));
    let ((c, trained), t) = timed(|| directional(&source));
    passed.push(report(6, "directional learning", minutes(45), c, t));
    let (c, t) = timed(schedule);
    passed.push(report(7, "schedule", Duration::MAX, c, t));
    let (c, t) = timed(|| activation_report(trained.as_ref()));
    passed.push(report(8, "activation report", Duration::MAX, c, t));
    let (c, t) = timed(determinism);
    passed.push(report(
        9,
        "determinism and persistence",
        Duration::MAX,
        c,
        t,
    ));

    let failed = passed.iter().filter(|p| !**p).count();
    println!(
        "{} of {} criteria passed",
        passed.len() - failed,
        passed.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
