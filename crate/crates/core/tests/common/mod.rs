//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod oracle;

use iceg::cfc::{consistency_loss, Cfa, Ifa};
use iceg::data::GroundTruthBundle;
use iceg::esd::{AdaptiveNorm, EdgeReconstruct, SeparatedCalibration};
use iceg::losses::{
    adversarial_gen_loss, boundary_weight, concealment_loss, dice_loss, edge_loss, fidelity_loss, segmentation_loss,
    weighted_bce, weighted_iou,
};
use iceg::nn::{Crb, Mode, Rcab};
use iceg::tensor::gradcheck::{check_gradient, check_input_gradient, rel_error, GradCheckReport};
use iceg::tensor::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type T64 = Tensor<f64>;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> T64 {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            // Box-Muller keeps the helper free of extra distributions.
            let u: f64 = rng.random::<f64>().max(1e-12);
            let w: f64 = rng.random();
            scale * (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * w).cos()
        })
        .collect();
    Tensor::from_vec(v, shape).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> T64 {
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).unwrap()
}

/// A blob mask with both classes present.
pub fn blob_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> T64 {
    let v = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            if (y - cy).powi(2) + (x - cx).powi(2) <= r * r { 1.0 } else { 0.0 }
        })
        .collect();
    Tensor::from_vec(v, &[1, 1, h, w]).unwrap()
}

/// `sum(y * R)` for a fixed random `R`, so every output element matters.
pub fn project(y: &T64, seed: u64) -> T64 {
    let r = normal(&mut rng(seed), y.shape(), 1.0);
    y.mul(&r).unwrap().sum_all()
}

fn worst(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let checked = a.checked + b.checked;
    let mut out = if b.max_rel_error > a.max_rel_error { b } else { a };
    out.max_abs_error = a.max_abs_error.max(b.max_abs_error);
    out.checked = checked;
    out
}

/// Replaces constant-initialised parameters (zero heads, unit scales) with
/// random values so that no gradient is trivially zero.
pub fn randomize_constant_params(store: &ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for p in store.params() {
        let v = p.values();
        if v.iter().all(|&x| x == v[0]) {
            let fresh = normal(&mut r, p.shape(), 0.3).to_vec();
            p.set_values(fresh).unwrap();
        }
    }
}

fn empty() -> GradCheckReport {
    GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: 0,
    }
}

/// Checks the gradient with respect to each input in turn.
pub fn check_inputs<F>(inputs: &[T64], f: F) -> GradCheckReport
where
    F: Fn(&[T64]) -> iceg::tensor::Result<T64>,
{
    let mut report = empty();
    for i in 0..inputs.len() {
        let r = check_input_gradient(&inputs[i], STEP, FLOOR, |x| {
            let mut all = inputs.to_vec();
            all[i] = x.clone();
            f(&all)
        })
        .unwrap();
        report = worst(report, r);
    }
    report
}

/// Checks parameter gradients of everything in `store`, a few coordinates
/// per tensor.
pub fn check_params<F>(store: &ParamStore<f64>, per_param: usize, f: F) -> GradCheckReport
where
    F: Fn() -> T64,
{
    let grads = f().backward();
    let mut report = empty();
    let mut pick = rng(99);
    for p in store.params() {
        let values = p.values().to_vec();
        let analytic = p.grad(&grads).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; values.len()]);
        let idx: Vec<usize> = (0..per_param.min(values.len())).map(|_| pick.random_range(0..values.len())).collect();
        let r = check_gradient(&values, &analytic, Some(&idx), STEP, FLOOR, |v| {
            p.set_values(v.to_vec()).unwrap();
            Ok(f().item())
        })
        .unwrap();
        p.set_values(values).unwrap();
        report = worst(report, r);
    }
    report
}

pub struct GradCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn bundle(mask: &T64, edge: &T64) -> GroundTruthBundle<f64> {
    GroundTruthBundle {
        mask: mask.clone(),
        edge_weight: edge.clone(),
        mask_down: mask.clone(),
        zero_mask: Tensor::zeros(mask.shape()),
    }
}

/// Every loss and every block, in double precision on inputs of at most
/// `1 x 4 x 8 x 8`.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut r = rng(2024);
    let mut cases = Vec::new();
    let mask = blob_mask(8, 8, 3.5, 4.0, 2.6);
    let edge = uniform(&mut r, &[1, 1, 8, 8], 0.0, 1.0).mul(&mask).unwrap();
    let logits = normal(&mut r, &[1, 1, 8, 8], 1.5);
    let weight = boundary_weight(&mask, 3).unwrap();

    let mut push = |name, report| cases.push(GradCase { name, report });

    push("wBCE", check_inputs(&[logits.clone()], |v| weighted_bce(&v[0], &mask, &weight).map_err(tensor_err)));
    push("wIoU", check_inputs(&[logits.clone()], |v| weighted_iou(&v[0], &mask, &weight).map_err(tensor_err)));
    push("dice", check_inputs(&[logits.clone()], |v| dice_loss(&v[0], &edge).map_err(tensor_err)));

    let seg_maps: Vec<T64> = [8, 4, 4, 2, 2].iter().map(|&s| normal(&mut r, &[1, 1, s, s], 1.0)).collect();
    push("L_s", check_inputs(&seg_maps, |v| Ok(segmentation_loss(v, &mask, 3).map_err(tensor_err)?.total)));
    let edge_maps: Vec<T64> = [8, 4, 4, 2].iter().map(|&s| normal(&mut r, &[1, 1, s, s], 1.0)).collect();
    push("L_e", check_inputs(&edge_maps, |v| edge_loss(v, &edge).map_err(tensor_err)));

    let fl4 = normal(&mut r, &[1, 4, 4, 4], 1.0);
    let mask_down = uniform(&mut r, &[1, 1, 4, 4], 0.0, 1.0);
    push("L_cc", check_consistency(&fl4, &mask_down));

    let x = uniform(&mut r, &[1, 3, 8, 8], 0.1, 0.9);
    let xg = uniform(&mut r, &[1, 3, 8, 8], 0.1, 0.9);
    push("L_f", check_inputs(&[xg.clone()], |v| fidelity_loss(&v[0], &x, &mask).map_err(tensor_err)));
    let gt = bundle(&mask, &edge);
    push("L_cl", check_inputs(&[xg], |v| Ok(concealment_loss(&v[0], &gt).map_err(tensor_err)?.loss)));
    let zero = Tensor::zeros(&[1, 1, 8, 8]);
    push("L_s^a", check_inputs(&[logits], |v| adversarial_gen_loss(v, &zero, 3).map_err(tensor_err)));

    let store = ParamStore::<f64>::new(7);
    let s = store.root();
    let crb = Crb::new(&s.sub("crb"), 4, 4);
    let rcab = Rcab::new(&s.sub("rcab"), 4, 2);
    let ifa = Ifa::new(&s.sub("ifa"), 4, 4);
    let cfa = Cfa::new(&s.sub("cfa"), 4, 2);
    let er = EdgeReconstruct::new(&s.sub("er"), 4, 4);
    let esc = SeparatedCalibration::new(&s.sub("esc"), 4, 2);
    let an = AdaptiveNorm::new(&s.sub("an"), 4);
    randomize_constant_params(&store, 5);

    let feat = normal(&mut r, &[1, 4, 8, 8], 1.0);
    let fa: Vec<T64> = [8, 4, 2, 1].iter().map(|&k| normal(&mut r, &[1, 4, k, k], 1.0)).collect();
    let gate = uniform(&mut r, &[1, 1, 8, 8], 0.05, 0.95);
    let fs_prev = normal(&mut r, &[1, 4, 8, 8], 1.0);
    let fe_prev = normal(&mut r, &[1, 4, 8, 8], 1.0);

    push("CRB", check_inputs(&[feat.clone()], |v| Ok(project(&crb.forward(&v[0], Mode::Train).map_err(tensor_err)?, 1))));
    push("RCAB", check_inputs(&[feat.clone()], |v| Ok(project(&rcab.forward(&v[0]).map_err(tensor_err)?, 2))));
    push("IFA", check_inputs(&[feat.clone()], |v| Ok(project(&ifa.forward(&v[0], Mode::Train).map_err(tensor_err)?.fa, 3))));
    push("CFA", check_inputs(&fa, |v| {
        let fc = cfa.forward(v).map_err(tensor_err)?;
        project(&fc[0], 4).add(&project(&fc[1], 5))
    }));
    push("ER", check_inputs(&[feat.clone(), gate.clone(), fs_prev], |v| {
        let (fe, pe) = er.forward(&v[0], &v[1], &v[2], Mode::Train).map_err(tensor_err)?;
        project(&fe, 6).add(&project(&pe, 7))
    }));
    push("ESC", check_inputs(&[feat.clone(), gate.clone(), gate.one_minus(), fe_prev.clone()], |v| {
        let out = esc.forward(&v[0], &v[1], &v[2], &v[3], Mode::Train).map_err(tensor_err)?;
        project(&out.fs, 8).add(&project(&out.ps, 9))
    }));
    push("AN", check_inputs(&[fe_prev.clone()], |v| {
        let (sigma, mu) = an.forward(&v[0], Mode::Train).map_err(tensor_err)?;
        project(&sigma, 10).add(&project(&mu, 11))
    }));

    // Parameter gradients through every block at once.
    let rep = check_params(&store, 4, || {
        let a = project(&crb.forward(&feat, Mode::Train).unwrap(), 1);
        let b = project(&rcab.forward(&feat).unwrap(), 2);
        let c = project(&ifa.forward(&feat, Mode::Train).unwrap().fa, 3);
        let d = project(&cfa.forward(&fa).unwrap()[0], 4);
        let (fe, pe) = er.forward(&feat, &gate, &fe_prev, Mode::Train).unwrap();
        let e = project(&fe, 6).add(&project(&pe, 7)).unwrap();
        let out = esc.forward(&feat, &gate, &gate.one_minus(), &fe_prev, Mode::Train).unwrap();
        let f = project(&out.ps, 9);
        let (sigma, mu) = an.forward(&fe_prev, Mode::Train).unwrap();
        let g = project(&sigma, 10).add(&project(&mu, 11)).unwrap();
        [b, c, d, e, f, g].iter().fold(a, |acc, t| acc.add(t).unwrap())
    });
    push("block parameters", rep);
    cases
}

fn tensor_err(e: iceg::IcegError) -> iceg::tensor::TensorError {
    iceg::tensor::TensorError::Invalid(e.to_string())
}

pub fn relative(a: f64, b: f64) -> f64 {
    rel_error(a, b, FLOOR)
}

/// Largest deviation of each library metric from its oracle.
#[derive(Debug, Default)]
pub struct MetricDeviation {
    pub mae: f64,
    pub f_beta: f64,
    pub e_phi: f64,
    pub s_alpha: f64,
    pub pairs: usize,
}

/// Prediction/mask pairs: `random` random 16x16 pairs followed by the
/// degenerate cases.
pub fn metric_pairs(random: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (h, w) = (16, 16);
    let mut r = rng(seed);
    let mut pairs = Vec::new();
    for i in 0..random {
        let (cy, cx, rad) = (r.random_range(3.0..12.0), r.random_range(3.0..12.0), r.random_range(1.5..6.0));
        let gt = blob_mask(h, w, cy, cx, rad).to_vec();
        let pred: Vec<f64> = if i % 2 == 0 {
            (0..h * w).map(|_| r.random_range(0.0..1.0)).collect()
        } else {
            gt.iter().map(|&g| (0.6 * g + 0.4 * r.random_range(0.0..1.0f64)).clamp(0.0, 1.0)).collect()
        };
        pairs.push((pred, gt));
    }
    let gt = blob_mask(h, w, 6.0, 9.0, 4.0).to_vec();
    let noise: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..1.0)).collect();
    pairs.push((noise.clone(), vec![0.0; h * w]));
    pairs.push((noise, vec![1.0; h * w]));
    pairs.push((gt.clone(), gt.clone()));
    pairs.push((gt.iter().map(|g| 1.0 - g).collect(), gt.clone()));
    pairs.push((vec![0.0; h * w], gt.clone()));
    pairs.push((vec![0.0; h * w], vec![0.0; h * w]));
    pairs.push((vec![1.0; h * w], vec![1.0; h * w]));
    pairs
}

pub fn metric_deviation(pairs: &[(Vec<f64>, Vec<f64>)]) -> MetricDeviation {
    use iceg::metrics;
    let mut d = MetricDeviation::default();
    for (p, g) in pairs {
        let pp = oracle::Plane { v: p, h: 16, w: 16 };
        let gp = oracle::Plane { v: g, h: 16, w: 16 };
        d.mae = d.mae.max((metrics::mae(p, g) - oracle::mae(&pp, &gp)).abs());
        d.f_beta = d.f_beta.max((metrics::adaptive_f_measure(p, g) - oracle::f_beta(&pp, &gp)).abs());
        d.e_phi = d.e_phi.max((metrics::e_measure(p, g) - oracle::e_phi(&pp, &gp)).abs());
        d.s_alpha = d.s_alpha.max((metrics::s_measure(p, g, 16, 16) - oracle::s_alpha(&pp, &gp)).abs());
        d.pairs += 1;
    }
    d
}

fn normalized(f: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut out = f.to_vec();
    for p in 0..plane {
        let n: f64 = (0..c).map(|ci| f[ci * plane + p].powi(2)).sum::<f64>().sqrt().max(1e-12);
        for ci in 0..c {
            out[ci * plane + p] = f[ci * plane + p] / n;
        }
    }
    out
}

/// Naive single-sample consistency loss with the prototypes supplied.
pub fn naive_consistency(f: &[f64], m: &[f64], c: usize, po: &[f64], pb: &[f64]) -> f64 {
    let plane = m.len();
    let f = normalized(f, c, plane);
    let mass: f64 = m.iter().sum();
    let mut acc = 0.0;
    for p in 0..plane {
        let (mut a, mut b) = (0.0, 0.0);
        for ci in 0..c {
            let v = m[p] * f[ci * plane + p];
            a += (v - po[ci]).powi(2);
            b += (v - pb[ci]).powi(2);
        }
        acc += m[p] * (a - b);
    }
    acc / mass
}

pub fn naive_prototypes(f: &[f64], m: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = m.len();
    let f = normalized(f, c, plane);
    let mf: f64 = m.iter().sum();
    let mb = plane as f64 - mf;
    let po = (0..c).map(|ci| (0..plane).map(|p| m[p] * f[ci * plane + p]).sum::<f64>() / mf).collect();
    let pb = (0..c).map(|ci| (0..plane).map(|p| (1.0 - m[p]) * f[ci * plane + p]).sum::<f64>() / mb).collect();
    (po, pb)
}

/// The prototypes are constants of the loss, so the numeric side holds them
/// at their values for the unperturbed input.
fn check_consistency(fl4: &T64, mask_down: &T64) -> GradCheckReport {
    let c = fl4.shape()[1];
    let m = mask_down.to_vec();
    let leaf = fl4.requires_grad_leaf();
    let loss = consistency_loss(&leaf, mask_down).unwrap().loss;
    let grads = loss.backward();
    let analytic = grads.get(&leaf).unwrap().to_vec();
    let (po, pb) = naive_prototypes(&fl4.to_vec(), &m, c);
    assert!((naive_consistency(&fl4.to_vec(), &m, c, &po, &pb) - loss.item()).abs() < 1e-10);
    check_gradient(&fl4.to_vec(), &analytic, None, STEP, FLOOR, |v| Ok(naive_consistency(v, &m, c, &po, &pb))).unwrap()
}

fn bits<E: iceg::tensor::Element>(t: &Tensor<E>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_f64().to_bits()).collect()
}

pub fn bitwise_equal<E: iceg::tensor::Element>(a: &Tensor<E>, b: &Tensor<E>) -> bool {
    a.shape() == b.shape() && bits(a) == bits(b)
}

/// Checks the resolution law of a full forward pass at `size x size`.
/// Returns the list of violations.
pub fn shape_law(size: usize) -> Vec<String> {
    use iceg::config::ModelConfig;
    use iceg::model::Detector;
    let det = Detector::<f32>::new(&ModelConfig::default(), 0);
    let x = Tensor::<f32>::full(&[1, 3, size, size], 0.5);
    let out = det.forward(&x, Mode::Eval).unwrap();
    let mut bad = Vec::new();
    let mut expect = |what: String, t: &Tensor<f32>, side: usize| {
        let s = t.shape();
        if s[2] != side || s[3] != side {
            bad.push(format!("{what}: {s:?}, expected {side}x{side}"));
        }
    };
    for k in 0..=4 {
        expect(format!("f{k}"), &out.pyramid.levels[k], size >> (k + 1));
    }
    for k in 1..=5 {
        let side = if k == 5 { size / 32 } else { size >> (k + 1) };
        expect(format!("p{k}s"), &out.decoder.seg[k - 1], side);
        if k <= 4 {
            expect(format!("p{k}e"), &out.decoder.edge[k - 1], side);
            expect(format!("fl{k}"), &out.cfc.fl[k - 1], side);
        }
    }
    expect("final".into(), out.final_logits(), size);
    bad
}

/// The exact identities of the architecture and the freeze contracts that
/// do not need training, as `(name, holds)`.
pub fn exact_identities() -> Vec<(&'static str, bool)> {
    use iceg::config::{GeneratorConfig, ModelConfig};
    use iceg::generator::Generator;
    use iceg::model::Detector;
    use iceg::nn::reverse_map;
    let mut out = Vec::new();
    let mut r = rng(12);
    let det = Detector::<f32>::new(&ModelConfig::default(), 3);
    let x = uniform(&mut r, &[2, 3, 64, 64], 0.0, 1.0);
    let x32 = Tensor::<f32>::from_vec(x.to_vec().iter().map(|&v| v as f32).collect(), x.shape()).unwrap();
    let o = det.forward(&x32, Mode::Train).unwrap();
    out.push(("f4c = f4a", o.cfc.fc[3].id() == o.cfc.fa[3].id() && bitwise_equal(&o.cfc.fc[3], &o.cfc.fa[3])));
    out.push(("f4l = f4a", o.cfc.fl[3].id() == o.cfc.fa[3].id() && bitwise_equal(&o.cfc.fl[3], &o.cfc.fa[3])));

    let q = Tensor::<f64>::from_vec((0..1025).map(|i| i as f64 / 1024.0).collect(), &[1, 1, 1, 1025]).unwrap();
    out.push(("R(R(q)) = q", bitwise_equal(&reverse_map(&reverse_map(&q)), &q)));

    let mut gates_ok = true;
    for k in 1..=4 {
        let gate = &o.decoder.levels[k - 1].calibration;
        let sum = gate.fg_gate.add(&gate.bg_gate).unwrap();
        gates_ok &= sum.data().iter().all(|&v| v == 1.0);
    }
    let logits = normal(&mut r, &[1, 1, 4, 4], 4.0);
    let (fg, bg) = iceg::esd::Decoder::<f64>::new(&ParamStore::new(0).root(), 4, 4, 2, Default::default())
        .gates(&logits, 8, 8)
        .unwrap();
    gates_ok &= fg.add(&bg).unwrap().data().iter().all(|&v| v == 1.0);
    out.push(("ESC gates sum to 1", gates_ok));

    let store = ParamStore::<f64>::new(4);
    let rcab = Rcab::new(&store.root(), 8, 2);
    rcab.zero_residual().unwrap();
    let f = normal(&mut r, &[2, 8, 6, 6], 1.0);
    out.push(("zero-residual RCAB is identity", bitwise_equal(&rcab.forward(&f).unwrap(), &f)));

    let g = Generator::<f32>::new(&GeneratorConfig::default(), 5);
    out.push(("fresh generator is identity", bitwise_equal(&g.generate(&x32).unwrap(), &x32)));
    out
}

/// A quick configuration: 64-pixel images, small batches, no decay.
pub fn quick_config(steps: usize) -> iceg::Config {
    let mut cfg = iceg::Config::default();
    cfg.train.batch_size = 2;
    cfg.train.lr_pretrain = 1e-3;
    cfg.train.pretrain_epochs = 1000;
    cfg.train.lr_pretrain_decay_every = 1000;
    cfg.train.adv_epochs = 1000;
    cfg.train.lr_adv_decay_every = 1000;
    cfg.train.max_steps = Some(steps);
    cfg
}

fn snapshot(store: &ParamStore<f32>) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let p = store.params().iter().map(|p| p.values().iter().map(|v| v.to_bits()).collect()).collect();
    let b = store.buffers().iter().map(|b| b.values().iter().map(|v| v.to_bits()).collect()).collect();
    (p, b)
}

/// Runs each adversarial phase once and reports whether the opposite
/// network stayed bitwise identical while the trained one moved.
pub fn freeze_contracts() -> Vec<(&'static str, bool)> {
    use iceg::data::{synth_dataset, Batch, Sample};
    use iceg::generator::Generator;
    use iceg::model::Detector;
    use iceg::train::AdversarialTrainer;
    let cfg = quick_config(1);
    let data = synth_dataset(2, 64, 21, 0.15).unwrap();
    let refs: Vec<&Sample> = data.iter().collect();
    let batch = Batch::<f32>::from_samples(&refs).unwrap();
    let det = Detector::<f32>::new(&cfg.model, 1);
    let gen = Generator::<f32>::new(&cfg.generator, 2);
    let mut tr = AdversarialTrainer::new(&cfg, det, gen);
    let mut out = Vec::new();

    let (d0, g0) = (snapshot(tr.detector.store()), snapshot(tr.generator.store()));
    tr.generator_step(&batch).unwrap();
    let (d1, g1) = (snapshot(tr.detector.store()), snapshot(tr.generator.store()));
    out.push(("phase I keeps the detector bitwise fixed", d0 == d1));
    out.push(("phase I updates the generator", g0.0 != g1.0));
    tr.detector_step(&batch).unwrap();
    let (d2, g2) = (snapshot(tr.detector.store()), snapshot(tr.generator.store()));
    out.push(("phase II keeps the generator bitwise fixed", g1 == g2));
    out.push(("phase II updates the detector", d1.0 != d2.0));
    out
}
