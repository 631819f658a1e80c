//! Acceptance criteria, each run at its stated tolerance.
//!
//! Runs sequentially and prints one PASS/FAIL line per criterion. Pass
//! criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p iceg --test acceptance -- 3 8`.

mod common;

use std::time::{Duration, Instant};

use iceg::cfc::foreground_covariance_trace;
use iceg::checkpoint::Checkpoint;
use iceg::data::{synth_dataset, Batch, Sample};
use iceg::generator::Generator;
use iceg::model::Detector;
use iceg::nn::Mode;
use iceg::tensor::Tensor;
use iceg::train::{adversarial_train, evaluate, pretrain_detector, AdversarialTrainer};
use iceg::Config;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// The overfit run shared by criteria 4, 5 and 7.
struct Overfit {
    data: Vec<Sample>,
    checkpoint: Checkpoint,
    mae: f64,
    f_beta: f64,
    trace: f64,
    elapsed: Duration,
}

const OVERFIT_STEPS: usize = 400;

fn overfit_config(beta: f64) -> Config {
    let mut cfg = common::quick_config(OVERFIT_STEPS);
    cfg.train.batch_size = 4;
    cfg.loss.beta = beta;
    cfg
}

/// Generator settings for the desk adversarial runs: the fidelity and
/// concealment terms are rescaled against the adversarial term so that
/// the background survives at 64 pixels.
fn desk_adversarial(cfg: &mut Config) {
    cfg.loss.fidelity_weight = 500.0;
    cfg.loss.lambda = 20.0;
}

fn fl4_trace(det: &Detector<f32>, data: &[Sample]) -> f64 {
    let refs: Vec<&Sample> = data.iter().collect();
    let b = Batch::<f32>::from_samples(&refs).unwrap();
    let out = det.forward(&b.images, Mode::Eval).unwrap();
    foreground_covariance_trace(out.fl4(), &b.gt.mask_down).unwrap()
}

fn run_overfit(beta: f64) -> Overfit {
    let t = Instant::now();
    let data = synth_dataset(8, 64, 3, 0.15).unwrap();
    let out = pretrain_detector(&overfit_config(beta), &data, None).unwrap();
    let report = evaluate(&out.detector, &data, 64, 8, false).unwrap();
    let trace = fl4_trace(&out.detector, &data);
    Overfit {
        data,
        checkpoint: out.checkpoint,
        mae: report.mae,
        f_beta: report.f_beta,
        trace,
        elapsed: t.elapsed(),
    }
}

struct Ctx {
    overfit: Option<Overfit>,
}

impl Ctx {
    fn overfit(&mut self) -> &Overfit {
        self.overfit.get_or_insert_with(|| run_overfit(0.1))
    }
}

fn c1(_: &mut Ctx) -> Outcome {
    let cases = common::gradient_suite();
    let worst = cases.iter().max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error)).unwrap();
    let pass = cases.iter().all(|c| c.report.checked > 0 && c.report.max_rel_error < 1e-3);
    outcome(pass, format!("{} checks, worst {} rel {:.2e} (< 1e-3)", cases.len(), worst.name, worst.report.max_rel_error))
}

fn c2(_: &mut Ctx) -> Outcome {
    let mut bad = Vec::new();
    for size in [352, 64, 96] {
        bad.extend(common::shape_law(size).into_iter().map(|b| format!("{size}: {b}")));
    }
    outcome(bad.is_empty(), if bad.is_empty() { "p5s 11x11 at 352; H/2^(k+1) at 352, 64, 96".into() } else { bad.join("; ") })
}

fn c3(_: &mut Ctx) -> Outcome {
    let pairs = common::metric_pairs(20, 2025);
    let d = common::metric_deviation(&pairs);
    let pass = d.mae <= 1e-9 && d.f_beta <= 1e-9 && d.e_phi <= 1e-6 && d.s_alpha <= 1e-6;
    outcome(
        pass,
        format!(
            "{} pairs; max dev M {:.1e} F {:.1e} (<= 1e-9), E {:.1e} S {:.1e} (<= 1e-6)",
            d.pairs, d.mae, d.f_beta, d.e_phi, d.s_alpha
        ),
    )
}

fn c4(ctx: &mut Ctx) -> Outcome {
    let o = ctx.overfit();
    let pass = o.mae < 0.05 && o.f_beta > 0.90 && o.elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!("{OVERFIT_STEPS} steps: train MAE {:.4} (< 0.05), F {:.4} (> 0.90), {:.0?}", o.mae, o.f_beta, o.elapsed),
    )
}

/// Mean detector response over foreground pixels.
fn foreground_response(det: &Detector<f32>, images: &Tensor<f32>, mask: &Tensor<f32>) -> f64 {
    let p = det.predict(images).unwrap();
    let m = mask.data();
    p.data().iter().zip(m).map(|(a, b)| (a * b) as f64).sum::<f64>() / m.iter().map(|&v| v as f64).sum::<f64>()
}

/// Per-sample, per-channel variance over foreground pixels, averaged.
fn foreground_variance(images: &Tensor<f32>, mask: &Tensor<f32>) -> f64 {
    let (b, c, h, w) = images.dims4().unwrap();
    let plane = h * w;
    let (x, m) = (images.data(), mask.data());
    let mut total = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            let vals: Vec<f64> = (0..plane)
                .filter(|&p| m[bi * plane + p] > 0.5)
                .map(|p| x[(bi * c + ci) * plane + p] as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        }
    }
    total / (b * c) as f64
}

fn background_psnr(xg: &Tensor<f32>, x: &Tensor<f32>, mask: &Tensor<f32>) -> f64 {
    let (b, c, h, w) = x.dims4().unwrap();
    let plane = h * w;
    let (mut se, mut n) = (0.0, 0.0);
    for i in 0..b * c * plane {
        let bg = 1.0 - mask.data()[(i / (c * plane)) * plane + i % plane] as f64;
        se += bg * ((xg.data()[i] - x.data()[i]) as f64).powi(2);
        n += bg;
    }
    10.0 * (1.0 / (se / n)).log10()
}

fn c5(ctx: &mut Ctx) -> Outcome {
    let o = ctx.overfit();
    let t = Instant::now();
    let mut cfg = o.checkpoint.config.clone();
    desk_adversarial(&mut cfg);
    let det = o.checkpoint.detector().unwrap();
    let gen = Generator::<f32>::new(&cfg.generator, 11);
    let mut tr = AdversarialTrainer::new(&cfg, det, gen);
    let refs: Vec<&Sample> = o.data.iter().collect();
    let batches = [
        Batch::<f32>::from_samples(&refs[..4]).unwrap(),
        Batch::<f32>::from_samples(&refs[4..]).unwrap(),
    ];
    for step in 0..300 {
        tr.generator_step(&batches[step % 2]).unwrap();
    }
    let all = Batch::<f32>::from_samples(&refs).unwrap();
    let xg = tr.generator.generate(&all.images).unwrap();
    let r_x = foreground_response(&tr.detector, &all.images, &all.gt.mask);
    let r_g = foreground_response(&tr.detector, &xg, &all.gt.mask);
    let drop = 1.0 - r_g / r_x;
    let psnr = background_psnr(&xg, &all.images, &all.gt.mask);
    let (v_x, v_g) = (foreground_variance(&all.images, &all.gt.mask), foreground_variance(&xg, &all.gt.mask));
    let elapsed = t.elapsed();
    let pass = drop >= 0.30 && psnr > 30.0 && v_g <= v_x && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "300 steps: response {r_x:.3} -> {r_g:.3} (drop {:.1}% >= 30%), bg PSNR {psnr:.1} dB (> 30), fg var {v_x:.5} -> {v_g:.5}, {elapsed:.0?}",
            100.0 * drop
        ),
    )
}

const C6_PRETRAIN: usize = 300;
const C6_ADVERSARIAL: usize = 100;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c6(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let (mut base, mut plus) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let all = synth_dataset(72, 64, 100 + seed, 0.15).unwrap();
        let (train, test) = all.split_at(40);
        let mut cfg = overfit_config(0.1);
        cfg.train.seed = seed;
        cfg.train.max_steps = Some(C6_PRETRAIN);
        desk_adversarial(&mut cfg);
        let pre = pretrain_detector(&cfg, train, None).unwrap();
        base.push(evaluate(&pre.detector, test, 64, 8, false).unwrap().mae);
        cfg.train.max_steps = Some(C6_ADVERSARIAL);
        let adv = adversarial_train(&cfg, train, &pre.checkpoint, None).unwrap();
        plus.push(evaluate(&adv.detector, test, 64, 8, false).unwrap().mae);
    }
    let (mb, mp) = (median(base.clone()), median(plus.clone()));
    let elapsed = t.elapsed();
    let pass = mp <= mb && elapsed < Duration::from_secs(1800);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",");
    outcome(
        pass,
        format!("test MAE ICEG [{}] median {mb:.4}, ICEG+ [{}] median {mp:.4}, {elapsed:.0?}", fmt(&base), fmt(&plus)),
    )
}

fn c7(ctx: &mut Ctx) -> Outcome {
    let with = ctx.overfit();
    let (trace_cc, t_cc) = (with.trace, with.elapsed);
    let without = run_overfit(0.0);
    let elapsed = t_cc + without.elapsed;
    let pass = trace_cc < without.trace && elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "fl4 foreground covariance trace: beta 0.1 {trace_cc:.4} < beta 0 {:.4}, {elapsed:.0?}",
            without.trace
        ),
    )
}

fn c8(_: &mut Ctx) -> Outcome {
    let mut checks = common::exact_identities();
    checks.extend(common::freeze_contracts());
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() { format!("{} identities and freeze contracts hold bitwise", checks.len()) } else { format!("failed: {}", failed.join(", ")) },
    )
}

type Criterion = (u32, &'static str, fn(&mut Ctx) -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "gradient suite", c1),
        (2, "shape and resolution law", c2),
        (3, "metric oracles", c3),
        (4, "overfit run", c4),
        (5, "adversarial sanity", c5),
        (6, "ICEG+ directional", c6),
        (7, "consistency loss compactness", c7),
        (8, "exact identities", c8),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Ctx { overfit: None };
    let mut failures = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let o = run(&mut ctx);
        println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failures += !o.pass as u32;
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
