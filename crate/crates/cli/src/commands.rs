use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use iceg::checkpoint::Checkpoint;
use iceg::data::{self, Sample, Split};
use iceg::generator::Generator;
use iceg::metrics::{evaluate_items, EvalItem, MetricReport};
use iceg::tensor::Tensor;
use iceg::train::{self, StepLog};
use iceg::Config;

use crate::run::{create_dir, fresh_path, write_file, Context, Run};
use crate::{plots, AdvArgs, CamoArgs, CliError, CliResult, ConfigArgs, EvalArgs, SynthArgs, TrainArgs};

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

fn build_config(base: Config, args: &ConfigArgs) -> CliResult<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::from_file(path)?,
        None => base,
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| user(format!("`--set {kv}` must look like key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.train.max_steps = Some(steps);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_log(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Internal(format!("creating {}: {e}", path.display())))
}

fn flush(w: &mut impl Write, path: &Path) -> CliResult<()> {
    w.flush().map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))
}

fn last_losses(history: &[StepLog]) -> serde_json::Value {
    history.last().map(|l| json!(l)).unwrap_or(serde_json::Value::Null)
}

pub fn synth(_ctx: &Context, a: SynthArgs) -> CliResult<()> {
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(user(format!("--test-fraction must be in [0, 1), got {}", a.test_fraction)));
    }
    let samples = data::synth_dataset(a.n, a.size, a.seed, a.contrast)?;
    let out = fresh_path(&a.out);
    let n_test = (a.n as f64 * a.test_fraction).round() as usize;
    if n_test == 0 {
        data::save_dataset(&samples, &out)?;
    } else {
        let (train, test) = samples.split_at(a.n - n_test);
        data::save_dataset(train, &out.join("train"))?;
        data::save_dataset(test, &out.join("test"))?;
    }
    println!("{}", out.display());
    Ok(())
}

pub fn train(ctx: &Context, a: TrainArgs) -> CliResult<()> {
    let mut cfg = build_config(Config::default(), &a.config)?;
    if let Some(e) = a.epochs {
        cfg.train.pretrain_epochs = e;
        cfg.validate()?;
    }
    let dataset = data::load_dataset(&a.data, Split::Train)?;
    let mut run = Run::start(ctx, "train")?;
    write_file(&run.path("config.txt"), cfg.to_text())?;
    let log_path = run.path("train_log.jsonl");
    let mut log = open_log(&log_path)?;
    let out = train::pretrain_detector(&cfg, &dataset, Some(&mut log))?;
    flush(&mut log, &log_path)?;
    out.checkpoint.save(&run.path("checkpoint.bin"))?;
    run.record("config_hash", json!(cfg.hash()));
    run.record("seed", json!(cfg.train.seed));
    run.record("data", json!(a.data.display().to_string()));
    run.record("samples", json!(dataset.len()));
    run.record("steps", json!(out.checkpoint.step));
    run.record("final", last_losses(&out.history));
    run.finish()?;
    Ok(())
}

pub fn advtrain(ctx: &Context, a: AdvArgs) -> CliResult<()> {
    let init_path = a
        .init_ckpt
        .ok_or_else(|| user("advtrain needs --init-ckpt pointing at a pretrained detector checkpoint"))?;
    let init = Checkpoint::load(&init_path)?;
    let mut cfg = build_config(init.config.clone(), &a.config)?;
    if let Some(e) = a.epochs {
        cfg.train.adv_epochs = e;
        cfg.validate()?;
    }
    let dataset = data::load_dataset(&a.data, Split::Train)?;
    let mut run = Run::start(ctx, "advtrain")?;
    write_file(&run.path("config.txt"), cfg.to_text())?;
    let log_path = run.path("train_log.jsonl");
    let mut log = open_log(&log_path)?;
    let out = train::adversarial_train(&cfg, &dataset, &init, Some(&mut log))?;
    flush(&mut log, &log_path)?;
    out.checkpoint.save(&run.path("checkpoint.bin"))?;
    run.record("config_hash", json!(out.checkpoint.config_hash()));
    run.record("seed", json!(cfg.train.seed));
    run.record("init_ckpt", json!(init_path.display().to_string()));
    run.record("data", json!(a.data.display().to_string()));
    run.record("samples", json!(dataset.len()));
    run.record("steps", json!(out.checkpoint.step));
    run.record("final", last_losses(&out.history));
    run.finish()?;
    Ok(())
}

fn read_predictions(dir: &Path, samples: &[Sample]) -> CliResult<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.png", s.id));
            if !path.is_file() {
                return Err(user(format!("no prediction for `{}` in {}", s.id, dir.display())));
            }
            let (h, w, p) = data::read_gray(&path)?;
            if (h, w) != (s.height, s.width) {
                return Err(user(format!(
                    "{}: prediction is {h}x{w} but mask is {}x{}",
                    s.id, s.height, s.width
                )));
            }
            Ok(p.into_iter().map(f64::from).collect())
        })
        .collect()
}

fn write_scores(run: &mut Run, report: &MetricReport) -> CliResult<()> {
    let path = run.path("scores.csv");
    let internal = |e: csv::Error| CliError::Internal(format!("writing scores: {e}"));
    let mut w = csv::Writer::from_path(&path).map_err(internal)?;
    w.write_record(["id", "mae", "f_beta", "e_phi", "s_alpha"]).map_err(internal)?;
    let mut row = |id: &str, s: &iceg::metrics::ImageScores| {
        w.write_record([
            id.to_string(),
            format!("{:.6}", s.mae),
            format!("{:.6}", s.f_beta),
            format!("{:.6}", s.e_phi),
            format!("{:.6}", s.s_alpha),
        ])
    };
    for (id, s) in report.per_image.iter().flatten() {
        row(id, s).map_err(internal)?;
    }
    row("mean", &report.summary()).map_err(internal)?;
    w.flush().map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))?;
    let text = serde_json::to_string_pretty(report).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&run.path("scores.json"), text)
}

pub fn eval(ctx: &Context, a: EvalArgs) -> CliResult<()> {
    let samples = data::load_dataset(&a.data, Split::Test)?;
    let (preds, source) = match (&a.ckpt, &a.pred_dir) {
        (Some(ck), _) => {
            let ckpt = Checkpoint::load(ck)?;
            let det = ckpt.detector()?;
            let preds = train::predict_samples(&det, &samples, ckpt.config.train.image_size, a.batch)?;
            (preds, json!({ "ckpt": ck.display().to_string(), "config_hash": ckpt.config_hash() }))
        }
        (None, Some(dir)) => (read_predictions(dir, &samples)?, json!({ "pred_dir": dir.display().to_string() })),
        (None, None) => return Err(user("eval needs either --ckpt or --pred-dir")),
    };
    let items: Vec<EvalItem> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| EvalItem {
            id: s.id.clone(),
            height: s.height,
            width: s.width,
            pred: p.clone(),
            gt: s.mask.iter().map(|&v| f64::from(v)).collect(),
        })
        .collect();
    let report = evaluate_items(&items, true)?;
    let mut run = Run::start(ctx, "eval")?;
    run.record("source", source);
    run.record("data", json!(a.data.display().to_string()));
    run.record("summary", json!(report.summary()));
    write_scores(&mut run, &report)?;
    if a.plots {
        write_plots(&mut run, &a, &samples, &preds, &report)?;
    }
    let s = report.summary();
    eprintln!(
        "M {:.4}  F {:.4}  E {:.4}  S {:.4}  ({} images)",
        s.mae,
        s.f_beta,
        s.e_phi,
        s.s_alpha,
        samples.len()
    );
    run.finish()?;
    Ok(())
}

const PANEL_LIMIT: usize = 8;

fn write_plots(run: &mut Run, a: &EvalArgs, samples: &[Sample], preds: &[Vec<f64>], report: &MetricReport) -> CliResult<()> {
    create_dir(&run.dir.join("plots/panels"))?;
    let s = report.summary();
    let bars = [("M", s.mae), ("F", s.f_beta), ("E", s.e_phi), ("S", s.s_alpha)];
    write_file(&run.path("plots/scores.svg"), plots::bar_chart("Dataset scores", &bars))?;

    let log = match (&a.log, &a.ckpt) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(ck)) => Some(ck.with_file_name("train_log.jsonl")).filter(|p| p.is_file()),
        (None, None) => None,
    };
    match log {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| user(format!("reading {}: {e}", p.display())))?;
            let series = plots::loss_series(&text).map_err(|e| user(format!("{}: {e}", p.display())))?;
            write_file(&run.path("plots/loss.svg"), plots::line_chart("Training loss", "step", &series))?;
        }
        None => eprintln!("note: no training log found, skipping loss curves"),
    }

    for (s, p) in samples.iter().zip(preds).take(PANEL_LIMIT) {
        let img = plots::panel(s, p);
        let path = run.path(&format!("plots/panels/{}.png", s.id));
        img.save(&path)
            .map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

fn png_inputs(input: &Path) -> CliResult<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let dir = if input.join("images").is_dir() { input.join("images") } else { input.to_path_buf() };
    let entries = fs::read_dir(&dir).map_err(|e| user(format!("reading {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(user(format!("no PNG images in {}", dir.display())));
    }
    Ok(files)
}

/// Edge-replicates a channel-major stack so both sides are multiples of `m`.
fn pad_to(data: &[f32], h: usize, w: usize, m: usize) -> (usize, usize, Vec<f32>) {
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let mut out = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        for y in 0..ph {
            let row = &data[c * h * w + y.min(h - 1) * w..][..w];
            out.extend((0..pw).map(|x| row[x.min(w - 1)]));
        }
    }
    (ph, pw, out)
}

fn crop(data: &[f32], ph: usize, pw: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            out.extend_from_slice(&data[c * ph * pw + y * pw..][..w]);
        }
    }
    out
}

pub fn camouflage(ctx: &Context, a: CamoArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let generator = match ckpt.generator()? {
        Some(g) => g,
        None => {
            eprintln!("note: checkpoint has no generator, using a fresh one (images pass through unchanged)");
            Generator::new(&ckpt.config.generator, ckpt.seed.wrapping_add(1))
        }
    };
    let inputs = png_inputs(&a.input)?;
    let mut run = Run::start(ctx, "camouflage")?;
    create_dir(&run.dir.join("camouflaged"))?;
    for path in &inputs {
        let (h, w, x) = data::read_image(path)?;
        let (ph, pw, padded) = pad_to(&x, h, w, 8);
        let t = Tensor::from_vec(padded, &[1, 3, ph, pw]).map_err(iceg::IcegError::from)?;
        let y = generator.generate(&t)?;
        let out = crop(y.data(), ph, pw, h, w);
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        data::write_image(&run.path(&format!("camouflaged/{stem}.png")), h, w, &out)?;
    }
    run.record("ckpt", json!(a.ckpt.display().to_string()));
    run.record("config_hash", json!(ckpt.config_hash()));
    run.record("images", json!(inputs.len()));
    run.finish()?;
    Ok(())
}
