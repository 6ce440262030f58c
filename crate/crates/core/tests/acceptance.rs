//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Criteria 4 to 9 share one desk-scale run (classifier plus a 20-epoch
//! masker on sprites), built once and reused. Run with `--nocapture` to see
//! the measured values.

use std::io::Write;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use fastsal::baselines::{
    adversarial_demo, center_box, iterative_mask, max_box, AdversarialConfig, CenterBox, IterConfig,
    IterativeProducer, MaskerProducer, MaxBox,
};
use fastsal::blackbox::{accuracy, classify, train_classifier, Classifier, ClassifierTrainConfig, CountingClassifier, SmallCnn};
use fastsal::datasets::{generate_sprites, LabeledImageSet, SpriteConfig};
use fastsal::eval::{evaluate_saliency, iou, localization_error, salient_crop, saliency_metric, BBox, DEFAULT_THRESHOLD};
use fastsal::evidence::{apply_mask, apply_mask_image, make_alternative, AlternativeMode, AlternativeSpec};
use fastsal::image::{Image, Mask};
use fastsal::masker::{feature_filter, two_channel_mask, CountingMasker, MaskSource, Masker, MaskerConfig};
use fastsal::objective::{average_value, saliency_loss, total_variation, ObjectiveParams};
use fastsal::service::{handle_explain, ExplainRequest, ServiceState};
use fastsal::trainer::{masker_diagnostics, train, EpochRecord, TrainConfig, TrainOutputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// written to the raw stderr handle so the line shows up even when libtest captures output
fn report(n: u32, pass: bool, detail: String) {
    let _ = writeln!(std::io::stderr(), "criterion {n:2}: {}  {detail}", if pass { "PASS" } else { "FAIL" });
}

fn t64(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn vals(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Classifier with fixed probabilities keyed on the mean of the input:
/// bright images get `hi` for class 0, dark ones `lo`.
struct Threshold {
    hi: f64,
    lo: f64,
}

impl Classifier for Threshold {
    fn input_size(&self) -> (usize, usize) {
        (2, 2)
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn differentiable(&self) -> bool {
        false
    }
    fn probabilities(&self, batch: &Tensor) -> fastsal::Result<Tensor> {
        let means = vals(&batch.flatten_from(1)?.mean(1)?);
        let rows: Vec<f64> = means
            .iter()
            .flat_map(|&m| {
                let p = if m > 0.5 { self.hi } else { self.lo };
                [p, 1.0 - p]
            })
            .collect();
        Ok(t64(rows, &[means.len(), 2]).to_dtype(batch.dtype())?)
    }
}

/// Linear-softmax classifier in f64, differentiable in its input.
struct LinearSoftmax {
    w: Tensor,
    size: (usize, usize),
}

impl Classifier for LinearSoftmax {
    fn input_size(&self) -> (usize, usize) {
        self.size
    }
    fn num_classes(&self) -> usize {
        self.w.dim(0).unwrap()
    }
    fn probabilities(&self, batch: &Tensor) -> fastsal::Result<Tensor> {
        let logits = batch.flatten_from(1)?.matmul(&self.w.t()?)?;
        Ok(candle_nn::ops::softmax(&logits, candle_core::D::Minus1)?)
    }
}

#[test]
fn criterion_01_formula_suite() {
    let start = Instant::now();
    let mut worst = 0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());

    // total variation and average value
    check(scalar(&total_variation(&t64(vec![0.3; 9], &[3, 3])).unwrap()), 0.0);
    check(scalar(&total_variation(&t64(vec![0.0, 1.0, 0.0, 1.0], &[2, 2])).unwrap()), 2.0);
    check(scalar(&total_variation(&t64(vec![0.0, 1.0, 1.0, 0.0], &[2, 2])).unwrap()), 4.0);
    check(scalar(&average_value(&t64(vec![1.0; 4], &[2, 2])).unwrap()), 1.0);
    check(scalar(&average_value(&t64(vec![0.0; 4], &[2, 2])).unwrap()), 0.0);
    check(scalar(&average_value(&t64(vec![0.0, 1.0, 1.0, 0.0], &[2, 2])).unwrap()), 0.5);

    // evidence removal
    let x = t64(vec![0.8; 12], &[3, 2, 2]);
    let a = t64((0..12).map(|i| i as f64 / 12.0).collect(), &[3, 2, 2]);
    for (m, want) in [(1.0, vals(&x)), (0.0, vals(&a))] {
        let got = vals(&apply_mask(&x, &t64(vec![m; 4], &[2, 2]), &a).unwrap());
        got.iter().zip(&want).for_each(|(g, w)| check(*g, *w));
    }
    let half = vals(&apply_mask(&x, &t64(vec![0.5; 4], &[2, 2]), &a).unwrap());
    half.iter().zip(vals(&a)).for_each(|(g, a)| check(*g, (0.8 + a) / 2.0));

    // saliency metric
    check(saliency_metric(1.0, 1.0), 0.0);
    check(saliency_metric(0.25, 0.5), 0.25f64.ln() - 0.5f64.ln());
    check(saliency_metric(0.01, 1.0), 0.05f64.ln());

    // feature filter and two-channel mask
    let feats = t64(vec![1.0, 0.0], &[1, 2, 1, 1]);
    let (y, gate) = feature_filter(&feats, &t64(vec![2.0, 0.0], &[1, 2])).unwrap();
    let s2 = 1.0 / (1.0 + (-2.0f64).exp());
    check(vals(&gate)[0], s2);
    check(vals(&y)[0], s2);
    check(vals(&y)[1], 0.0);
    let (y, _) = feature_filter(&feats, &t64(vec![0.0, 5.0], &[1, 2])).unwrap();
    check(vals(&y)[0], 0.5);
    let m = two_channel_mask(&t64(vec![3.0, 2.0, 0.0], &[3]), &t64(vec![1.0, 2.0, 4.0], &[3])).unwrap();
    let m = vals(&m);
    check(m[0], 0.75);
    check(m[1], 0.5);
    check(m[2], 0.0);

    // full objective with a stubbed classifier, paper weights
    let stub = Threshold { hi: 0.9, lo: 0.1 };
    let (_, b) = saliency_loss(
        &t64(vec![1.0; 4], &[2, 2]),
        &t64(vec![1.0; 12], &[3, 2, 2]),
        0,
        &stub,
        &ObjectiveParams::default(),
        &t64(vec![0.0; 12], &[3, 2, 2]),
    )
    .unwrap();
    check(b.total, 1e-3 - 0.9f64.ln() + 5.0 * 0.1f64.powf(0.3));
    check(b.tv, 0.0);
    check(b.av, 1.0);

    let ok = worst <= 1e-9 && start.elapsed().as_secs_f64() < 10.0;
    report(1, ok, format!("max |err| {worst:.2e} in {:.2}s", start.elapsed().as_secs_f64()));
    assert!(ok);
}

#[test]
fn criterion_02_gradient_matches_finite_differences() {
    let start = Instant::now();
    let (h, w, k) = (8usize, 8usize, 3usize);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rand_vec = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-s..s)).collect() };
    let model = LinearSoftmax { w: t64(rand_vec(k * 3 * h * w, 0.5), &[k, 3 * h * w]), size: (h, w) };
    let x = t64(rand_vec(3 * h * w, 0.5).iter().map(|v| v + 0.5).collect(), &[3, h, w]);
    let a = t64(rand_vec(3 * h * w, 0.5).iter().map(|v| v + 0.5).collect(), &[3, h, w]);
    let m0: Vec<f64> = rand_vec(h * w, 0.4).iter().map(|v| v + 0.5).collect();
    let params = ObjectiveParams::default();

    let total = |m: &Tensor| saliency_loss(m, &x, 1, &model, &params, &a).unwrap().0;
    let var = Var::from_tensor(&t64(m0.clone(), &[h, w])).unwrap();
    let grads = total(var.as_tensor()).backward().unwrap();
    let g = vals(grads.get(var.as_tensor()).unwrap());

    let eps = 1e-5;
    let mut fd = vec![0.0; h * w];
    for i in 0..h * w {
        let mut up = m0.clone();
        let mut dn = m0.clone();
        up[i] += eps;
        dn[i] -= eps;
        fd[i] = (scalar(&total(&t64(up, &[h, w]))) - scalar(&total(&t64(dn, &[h, w])))) / (2.0 * eps);
    }
    let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = diff / norm;
    let ok = rel <= 1e-4 && start.elapsed().as_secs_f64() < 60.0;
    report(2, ok, format!("relative error {rel:.2e} over {} entries", h * w));
    assert!(ok);
}

fn brute_crop(m: &Mask, t: f64) -> Option<BBox> {
    let mut found: Option<(usize, usize, usize, usize)> = None;
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) as f64 > t {
                found = Some(match found {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    found.map(|(x0, y0, x1, y1)| BBox { x0, y0, x1, y1 })
}

fn brute_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..=a.y1.max(b.y1) {
        for x in 0..=a.x1.max(b.x1) {
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    inter as f64 / union as f64
}

fn random_box(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BBox {
    let (xa, xb) = (rng.random_range(0..w), rng.random_range(0..w));
    let (ya, yb) = (rng.random_range(0..h), rng.random_range(0..h));
    BBox { x0: xa.min(xb), y0: ya.min(yb), x1: xa.max(xb), y1: ya.max(yb) }
}

#[test]
fn criterion_03_crop_and_iou_match_pixel_scans() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let instances = 300;
    let mut mismatches = 0;
    for _ in 0..instances {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let density = rng.random_range(0.0..0.2);
        let data: Vec<f32> =
            (0..h * w).map(|_| if rng.random_bool(density) { rng.random_range(0.5..1.0) } else { rng.random() }).collect();
        let mask = Mask::new(h, w, data).unwrap();
        let t = rng.random_range(0.3..0.95);
        if salient_crop(&mask, t) != brute_crop(&mask, t) {
            mismatches += 1;
        }
        let (a, b) = (random_box(&mut rng, h, w), random_box(&mut rng, h, w));
        if iou(&a, &b) != brute_iou(&a, &b) {
            mismatches += 1;
        }
    }
    let ok = mismatches == 0 && start.elapsed().as_secs_f64() < 30.0;
    report(3, ok, format!("{instances} crop and {instances} IoU instances, {mismatches} mismatches"));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Desk-scale run shared by criteria 4 to 9

struct Desk {
    model: SmallCnn,
    masker: Masker,
    val: LabeledImageSet,
    val_accuracy: f64,
    history: Vec<EpochRecord>,
}

const CLASSES: usize = 10;
const CLASSIFIER_PER_CLASS: usize = 200;
const MASKER_PER_CLASS: usize = 100;
const HELD_OUT_PER_CLASS: usize = 100;

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let sprites = |per_class, seed| {
            generate_sprites(&SpriteConfig { num_classes: CLASSES, sprites_per_class: per_class, seed, ..Default::default() })
                .unwrap()
        };
        let train_set = sprites(CLASSIFIER_PER_CLASS, 1);
        let val = sprites(HELD_OUT_PER_CLASS, 2);
        let model = train_classifier(&train_set, &ClassifierTrainConfig::default(), None).unwrap().model;
        let val_accuracy = accuracy(&model, &val).unwrap();
        eprintln!("desk: classifier trained ({:.0}s), held-out accuracy {val_accuracy:.4}", start.elapsed().as_secs_f64());

        // sprites are interleaved by class, so a prefix is balanced
        let masker_set = train_set.subset(&(0..MASKER_PER_CLASS * CLASSES).collect::<Vec<_>>());
        let masker = Masker::new(MaskerConfig::cifar(CLASSES), train_set.class_names.clone(), 0).unwrap();
        let history = train(&masker, &masker_set, &model, &TrainConfig::desk(), &TrainOutputs::default()).unwrap();
        eprintln!("desk: masker trained for {} epochs ({:.0}s total)", history.len(), start.elapsed().as_secs_f64());
        Desk { model, masker, val, val_accuracy, history }
    })
}

/// The first `n` held-out images the classifier gets right.
fn correctly_classified(d: &Desk, n: usize) -> LabeledImageSet {
    let refs: Vec<&Image> = d.val.images.iter().collect();
    let probs = classify(&d.model, &refs).unwrap();
    let idx: Vec<usize> = (0..d.val.len()).filter(|&i| probs[i].argmax() == d.val.labels[i]).take(n).collect();
    d.val.subset(&idx)
}

#[test]
fn criterion_04_desk_scale_metric_ordering() {
    let d = desk();
    let m = |p: &dyn fastsal::eval::SaliencyProducer| {
        evaluate_saliency(p, &d.val, &d.model, DEFAULT_THRESHOLD).unwrap().mean_metric
    };
    let masker = m(&MaskerProducer { masker: &d.masker });
    let center = m(&CenterBox);
    let maxb = m(&MaxBox);
    let ok = d.val_accuracy >= 0.85 && d.history.len() == 20 && d.val.len() >= 1000 && masker < center && center < maxb;
    report(
        4,
        ok,
        format!(
            "accuracy {:.4}, {} epochs, {} held-out images, metric masker {masker:.4} < center_box {center:.4} < max_box {maxb:.4}",
            d.val_accuracy,
            d.history.len(),
            d.val.len()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_fake_selectors_give_empty_masks() {
    let d = desk();
    let diag = masker_diagnostics(&d.masker, &d.val, &d.model, AlternativeMode::ColorNoise, 0).unwrap();
    let ok = diag.mean_av_fake <= 0.1 && diag.mean_av_true >= 2.0 * diag.mean_av_fake;
    report(5, ok, format!("AV true {:.4}, AV fake {:.4}", diag.mean_av_true, diag.mean_av_fake));
    assert!(ok);
}

#[test]
fn criterion_06_masks_destroy_evidence() {
    let d = desk();
    let diag = masker_diagnostics(&d.masker, &d.val, &d.model, AlternativeMode::ColorNoise, 0).unwrap();
    let ok = diag.mean_prob_destroyed <= 0.5 * diag.mean_prob_full;
    report(
        6,
        ok,
        format!("mean f_c destroyed {:.4} vs full {:.4} over {} images", diag.mean_prob_destroyed, diag.mean_prob_full, diag.images),
    );
    assert!(ok);
}

#[test]
fn criterion_07_localization() {
    let d = desk();
    let masker = localization_error(&MaskerProducer { masker: &d.masker }, &d.val, DEFAULT_THRESHOLD).unwrap().error_rate;
    let center = localization_error(&CenterBox, &d.val, DEFAULT_THRESHOLD).unwrap().error_rate;
    let ok = masker <= 0.2 && center > masker;
    report(7, ok, format!("localization error masker {masker:.4}, center_box {center:.4}"));
    assert!(ok);
}

#[test]
fn criterion_08_iterative_baseline() {
    let d = desk();
    let subset = correctly_classified(d, 20);
    let cfg = IterConfig::desk();
    let mut destroyed = 0;
    for (i, (img, &label)) in subset.images.iter().zip(&subset.labels).enumerate() {
        let cfg = IterConfig { seed: cfg.seed + i as u64, ..cfg.clone() };
        let r = iterative_mask(img, label, &d.model, &cfg).unwrap();
        let alt = make_alternative(img, &AlternativeSpec::for_height(cfg.alternative, img.height(), cfg.seed)).unwrap();
        let removed = apply_mask_image(img, &r.mask.inverted(), &alt).unwrap();
        if classify(&d.model, &[&removed]).unwrap()[0].get(label) < 0.1 {
            destroyed += 1;
        }
    }
    let iterative = IterativeProducer { model: &d.model, config: cfg };
    let it_metric = evaluate_saliency(&iterative, &subset, &d.model, DEFAULT_THRESHOLD).unwrap().mean_metric;
    let mk_metric =
        evaluate_saliency(&MaskerProducer { masker: &d.masker }, &subset, &d.model, DEFAULT_THRESHOLD).unwrap().mean_metric;
    let ok = subset.len() == 20 && destroyed * 5 >= subset.len() * 4 && mk_metric <= it_metric;
    report(
        8,
        ok,
        format!("destroyed below 0.1 on {destroyed}/{}, metric masker {mk_metric:.4} vs iterative {it_metric:.4}", subset.len()),
    );
    assert!(ok);
}

#[test]
fn criterion_09_adversarial_masks() {
    let d = desk();
    let subset = correctly_classified(d, 5);
    let mut hits = 0;
    let mut lines = Vec::new();
    for (img, &label) in subset.images.iter().zip(&subset.labels) {
        let r = adversarial_demo(img, label, &d.model, &AdversarialConfig::default()).unwrap();
        if r.prob_after < 0.01 && r.mean_perturbation <= 0.05 {
            hits += 1;
        }
        lines.push(format!("{:.3}->{:.1e}@{:.3}", r.prob_before, r.prob_after, r.mean_perturbation));
    }
    let ok = hits >= 3;
    report(9, ok, format!("{hits}/5 below 0.01 within |1-M| <= 0.05 [{}]", lines.join(" ")));
    assert!(ok);
}

#[test]
fn criterion_10_explain_call_counts() {
    let data = generate_sprites(&SpriteConfig { num_classes: 3, sprites_per_class: 2, seed: 5, ..Default::default() }).unwrap();
    let mut ps = fastsal::nn::ParamStore::new(0, DType::F32, &Device::Cpu);
    let cnn = SmallCnn::build(&mut ps, fastsal::blackbox::CnnConfig::desk((32, 32), 3), data.class_names.clone()).unwrap();
    let model = Arc::new(CountingClassifier::new(cnn));
    let masker = Arc::new(CountingMasker::new(Masker::new(MaskerConfig::cifar(3), data.class_names.clone(), 0).unwrap()));
    let state = ServiceState::new(masker.clone(), model.clone(), data.class_names.clone()).unwrap();

    let png = data.images[0].encode_png().unwrap();
    use base64::Engine;
    let image = base64::engine::general_purpose::STANDARD.encode(png);
    let mut counts = Vec::new();
    for class_id in [None, Some(2)] {
        model.reset();
        masker.reset();
        handle_explain(&ExplainRequest { image: image.clone(), class_id, threshold: None }, &state).unwrap();
        counts.push((masker.calls(), model.calls()));
    }
    model.reset();
    masker.mask(&data.images[1], 1).unwrap();
    let forward_calls = model.calls();
    let ok = counts.iter().all(|&c| c == (1, 2)) && forward_calls == 0;
    report(10, ok, format!("explain (masker, black box) calls {counts:?}; masker forward alone: {forward_calls} black-box calls"));
    assert!(ok);
}

#[test]
fn criterion_11_determinism() {
    let run = || {
        let data =
            generate_sprites(&SpriteConfig { num_classes: 3, sprites_per_class: 12, seed: 9, ..Default::default() }).unwrap();
        let cfg = ClassifierTrainConfig { epochs: 2, ..ClassifierTrainConfig::default() };
        let model = train_classifier(&data, &cfg, None).unwrap().model;
        let masker = Masker::new(MaskerConfig::cifar(3), data.class_names.clone(), 4).unwrap();
        let tcfg = TrainConfig { epochs: 2, batch_size: 8, seed: 4, ..TrainConfig::desk() };
        let history: Vec<_> = train(&masker, &data, &model, &tcfg, &TrainOutputs::default())
            .unwrap()
            .into_iter()
            .map(|r| EpochRecord { seconds: 0.0, ..r })
            .collect();
        let sal = evaluate_saliency(&MaskerProducer { masker: &masker }, &data, &model, DEFAULT_THRESHOLD).unwrap();
        let loc = localization_error(&MaskerProducer { masker: &masker }, &data, DEFAULT_THRESHOLD).unwrap();
        let reports = serde_json::to_string(&(sal, loc)).unwrap();
        (serde_json::to_string(&history).unwrap(), reports)
    };
    let (h1, r1) = run();
    let (h2, r2) = run();
    let ok = h1 == h2 && r1 == r2;
    report(11, ok, format!("history {} bytes, reports {} bytes, identical: {}", h1.len(), r1.len(), ok));
    assert!(ok);
}

#[test]
fn box_baselines_have_expected_geometry() {
    // sanity for the baselines used in criteria 4 and 7
    assert_eq!(max_box(32, 32), BBox { x0: 0, y0: 0, x1: 31, y1: 31 });
    let c = center_box(32, 32);
    assert_eq!((c.width(), c.height()), (23, 23));
}
