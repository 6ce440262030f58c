//! Reference saliency methods the masker is compared against: per-image
//! mask optimization, input-gradient maps, fixed boxes, and the
//! unregularized mask attack that produces adversarial artifacts.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, SGD};
use serde::{Deserialize, Serialize};

use crate::blackbox::{input_gradient, probabilities, Classifier};
use crate::error::{contract, Error, Result};
use crate::eval::{BBox, Saliency, SaliencyProducer};
use crate::evidence::{apply_mask_simple, make_alternative, AlternativeMode, AlternativeSpec};
use crate::image::{Image, Mask};
use crate::masker::Masker;
use crate::nn::{bilinear_resize, to_f64_vec};
use crate::objective::{saliency_terms, ObjectiveParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterOptimizer {
    GradientDescent,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: IterOptimizer,
    pub params: ObjectiveParams,
    /// Height of the optimized mask; the width follows the image aspect.
    /// `None` means a quarter of the image height.
    pub mask_resolution: Option<usize>,
    pub include_preserve_term: bool,
    pub alternative: AlternativeMode,
    pub seed: u64,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.05,
            optimizer: IterOptimizer::Adam,
            params: ObjectiveParams::default(),
            mask_resolution: None,
            include_preserve_term: true,
            alternative: AlternativeMode::Blur,
            seed: 0,
        }
    }
}

impl IterConfig {
    /// Desk-scale settings: [`ObjectiveParams::desk`] weights and color-noise
    /// removal (blur at desk-scale sigma leaves small objects recognisable).
    pub fn desk() -> Self {
        Self { params: ObjectiveParams::desk(), alternative: AlternativeMode::ColorNoise, ..Self::default() }
    }

    fn resolution(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let rh = self.mask_resolution.unwrap_or((h / 4).max(1));
        if rh == 0 || rh > h {
            return Err(Error::Config(format!("mask resolution {rh} must lie in [1, {h}]")));
        }
        let rw = ((w * rh) as f64 / h as f64).round().max(1.0) as usize;
        Ok((rh, rw.min(w)))
    }
}

#[derive(Debug, Clone)]
pub struct IterResult {
    /// Mask at image resolution, in [0, 1].
    pub mask: Mask,
    /// Loss before each update.
    pub trace: Vec<f64>,
    /// Set when a non-finite loss stopped the run early.
    pub stopped_early: bool,
}

enum Opt {
    Sgd(SGD),
    Adam(AdamW),
}

impl Opt {
    fn new(kind: IterOptimizer, var: Var, lr: f64) -> Result<Self> {
        Ok(match kind {
            IterOptimizer::GradientDescent => Opt::Sgd(SGD::new(vec![var], lr)?),
            IterOptimizer::Adam => {
                Opt::Adam(AdamW::new(vec![var], ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() })?)
            }
        })
    }

    fn step(&mut self, loss: &Tensor) -> Result<()> {
        match self {
            Opt::Sgd(o) => o.backward_step(loss)?,
            Opt::Adam(o) => o.backward_step(loss)?,
        }
        Ok(())
    }
}

/// Optimizes a low-resolution mask for one image by gradient descent on the
/// saliency objective, projecting onto [0, 1] after every step.
pub fn iterative_mask(x: &Image, class: usize, model: &dyn Classifier, cfg: &IterConfig) -> Result<IterResult> {
    cfg.params.validate()?;
    let (h, w) = x.dims();
    if (h, w) != model.input_size() {
        return Err(contract(format!("image is {h}x{w}, classifier expects {:?}", model.input_size())));
    }
    let (rh, rw) = cfg.resolution(h, w)?;
    let dev = Device::Cpu;
    let xt = x.to_tensor(DType::F32, &dev)?.unsqueeze(0)?;
    let alt = make_alternative(x, &AlternativeSpec::for_height(cfg.alternative, h, cfg.seed))?;
    let at = alt.to_tensor(DType::F32, &dev)?.unsqueeze(0)?;
    let p = Var::from_tensor(&Tensor::full(0.5f32, (1, rh, rw), &dev)?)?;
    let mut opt = Opt::new(cfg.optimizer, p.clone(), cfg.learning_rate)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut best: (f64, Tensor) = (f64::INFINITY, p.as_tensor().copy()?);
    let mut stopped_early = false;
    for _ in 0..cfg.steps {
        let m = bilinear_resize(p.as_tensor(), h, w)?;
        let terms = saliency_terms(&m, &xt, &[class], model, &cfg.params, &at, cfg.include_preserve_term)?;
        let loss = terms.total.sum_all()?;
        let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            stopped_early = true;
            p.set(&best.1)?;
            break;
        }
        if v < best.0 {
            best = (v, p.as_tensor().copy()?);
        }
        trace.push(v);
        opt.step(&loss)?;
        p.set(&p.as_tensor().clamp(0f32, 1f32)?)?;
    }
    let m = bilinear_resize(p.as_tensor(), h, w)?.squeeze(0)?;
    Ok(IterResult { mask: Mask::from_tensor(&m)?, trace, stopped_early })
}

/// Per-pixel maximum over channels of `|d f_c / d x|`, scaled so the largest value is 1.
pub fn gradient_saliency(x: &Image, class: usize, model: &dyn Classifier) -> Result<Mask> {
    let (h, w) = x.dims();
    let g = input_gradient(model, &x.to_tensor(DType::F64, &Device::Cpu)?, class)?;
    let m = g.abs()?.max(0)?;
    let vals = to_f64_vec(&m)?;
    let peak = vals.iter().copied().fold(0.0, f64::max);
    let data: Vec<f32> = if peak > 0.0 { vals.iter().map(|v| (v / peak) as f32).collect() } else { vec![0.0; h * w] };
    Mask::new(h, w, data)
}

const CENTER_BAND: (f64, f64) = (0.47, 0.53);

/// Centered box covering about half the image, sides scaled by `1/sqrt(2)`.
/// When side rounding pushes the area outside 47-53% of the image (tiny
/// images), the in-band box closest to the image aspect is used instead.
pub fn center_box(height: usize, width: usize) -> BBox {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let clamp = |v: f64, n: usize| (v.round() as usize).clamp(1, n);
    let mut sh = clamp(height as f64 * s, height);
    let mut sw = clamp(width as f64 * s, width);
    let total = (height * width) as f64;
    let in_band = |a: usize, b: usize| {
        let f = (a * b) as f64 / total;
        (CENTER_BAND.0..=CENTER_BAND.1).contains(&f)
    };
    if !in_band(sh, sw) {
        let mut best: Option<(f64, f64, usize, usize)> = None;
        for a in 1..=height {
            for b in 1..=width {
                if !in_band(a, b) {
                    continue;
                }
                let aspect = (a as f64 / height as f64 - b as f64 / width as f64).abs();
                let area = ((a * b) as f64 / total - 0.5).abs();
                if best.is_none_or(|(ba, bb, _, _)| (aspect, area) < (ba, bb)) {
                    best = Some((aspect, area, a, b));
                }
            }
        }
        if let Some((_, _, a, b)) = best {
            sh = a;
            sw = b;
        }
    }
    let y0 = (height - sh) / 2;
    let x0 = (width - sw) / 2;
    BBox { x0, y0, x1: x0 + sw - 1, y1: y0 + sh - 1 }
}

/// The whole image.
pub fn max_box(height: usize, width: usize) -> BBox {
    BBox::full(height, width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Initial weight of `mean(1 - M)`, which keeps the perturbation small.
    /// It grows while iterates succeed and shrinks while they fail.
    pub perturbation_weight: f64,
    /// The attack stops pushing once `log f_c - max_{k != c} log f_k`
    /// reaches `-margin`.
    pub margin: f64,
    /// Probability below which an iterate counts as a successful attack.
    pub target_prob: f64,
    pub optimizer: IterOptimizer,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 1.0,
            perturbation_weight: 5.0,
            margin: 5.0,
            target_prob: 0.01,
            optimizer: IterOptimizer::GradientDescent,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdversarialResult {
    pub mask: Mask,
    pub prob_before: f64,
    pub prob_after: f64,
    /// `mean |1 - M|`.
    pub mean_perturbation: f64,
}

/// Per-step multiplicative change of the perturbation weight.
const WEIGHT_ADAPT: f64 = 1.05;

/// Full-resolution, unsmoothed mask optimization on `X * M` that pushes the
/// class below every other class while only lightly penalizing how far `M`
/// moves from 1.
///
/// The loss is `max(log f_c - max_{k != c} log f_k, -margin) + mu * mean(1 - M)`.
/// The log-ratio is a logit margin, so its gradient does not vanish when
/// `f_c` is saturated near 1. Returns the least-perturbed iterate whose
/// probability fell below `target_prob`, or the last iterate if none did.
pub fn adversarial_demo(
    x: &Image,
    class: usize,
    model: &dyn Classifier,
    cfg: &AdversarialConfig,
) -> Result<AdversarialResult> {
    let (h, w) = x.dims();
    let k = model.num_classes();
    if class >= k {
        return Err(contract(format!("class {class} outside [0, {k})")));
    }
    if k < 2 {
        return Err(Error::Config("the attack needs at least two classes".into()));
    }
    let dev = Device::Cpu;
    let xt = x.to_tensor(DType::F32, &dev)?.unsqueeze(0)?;
    let ones = Tensor::ones((1, h, w), DType::F32, &dev)?;
    let others: Vec<u32> = (0..k as u32).filter(|&j| j as usize != class).collect();
    let others = Tensor::from_vec(others, k - 1, &dev)?;
    let perturbation = |m: &Tensor| -> Result<f64> { Ok(m.affine(-1.0, 1.0)?.mean_all()?.to_dtype(DType::F64)?.to_scalar()?) };

    let m = Var::from_tensor(&ones)?;
    let mut opt = Opt::new(cfg.optimizer, m.clone(), cfg.learning_rate)?;
    let mut prob_before = f64::NAN;
    let mut best: Option<(f64, f64, Tensor)> = None;
    let mut last = f64::NAN;
    let mut mu = cfg.perturbation_weight;
    for step in 0..=cfg.steps {
        let e = apply_mask_simple(&xt, m.as_tensor())?;
        let logp = probabilities(model, &e)?.maximum(1e-30)?.log()?;
        let own = logp.narrow(1, class, 1)?.squeeze(1)?;
        last = own.to_dtype(DType::F64)?.exp()?.sum_all()?.to_scalar::<f64>()?;
        if step == 0 {
            prob_before = last;
        } else if last < cfg.target_prob {
            let pert = perturbation(m.as_tensor())?;
            if best.as_ref().is_none_or(|b| pert < b.1) {
                best = Some((last, pert, m.as_tensor().copy()?));
            }
        }
        if step == cfg.steps {
            break;
        }
        let rival = logp.index_select(&others, 1)?.max(1)?;
        let margin = (own - rival)?.maximum(-cfg.margin)?.sum_all()?;
        let perturb = m.as_tensor().affine(-1.0, 1.0)?.mean_all()?;
        // successful iterates tighten the budget, failing ones relax it
        if step > 0 {
            mu *= if last < cfg.target_prob { WEIGHT_ADAPT } else { 1.0 / WEIGHT_ADAPT };
        }
        let loss = (margin + perturb.affine(mu, 0.0)?)?;
        opt.step(&loss)?;
        m.set(&m.as_tensor().clamp(0f32, 1f32)?)?;
    }
    let (prob_after, mask) = match best {
        Some((p, _, t)) => (p, t),
        None => (last, m.as_tensor().copy()?),
    };
    let mask = Mask::from_tensor(&mask.squeeze(0)?)?;
    let mean_perturbation = mask.data().iter().map(|&v| (1.0 - v as f64).abs()).sum::<f64>() / (h * w) as f64;
    Ok(AdversarialResult { mask, prob_before, prob_after, mean_perturbation })
}

// ---------------------------------------------------------------------------
// Producers for the evaluation harness

pub struct MaskerProducer<'a> {
    pub masker: &'a Masker,
}

impl SaliencyProducer for MaskerProducer<'_> {
    fn name(&self) -> &str {
        "masker"
    }
    fn produce(&self, image: &Image, class: usize, _index: usize) -> Result<Saliency> {
        Ok(Saliency::Mask(self.masker.explain(image, class)?))
    }
}

pub struct CenterBox;

impl SaliencyProducer for CenterBox {
    fn name(&self) -> &str {
        "center_box"
    }
    fn produce(&self, image: &Image, _class: usize, _index: usize) -> Result<Saliency> {
        Ok(Saliency::Boxes(vec![center_box(image.height(), image.width())]))
    }
}

pub struct MaxBox;

impl SaliencyProducer for MaxBox {
    fn name(&self) -> &str {
        "max_box"
    }
    fn produce(&self, image: &Image, _class: usize, _index: usize) -> Result<Saliency> {
        Ok(Saliency::Boxes(vec![max_box(image.height(), image.width())]))
    }
}

pub struct GradientProducer<'a> {
    pub model: &'a dyn Classifier,
}

impl SaliencyProducer for GradientProducer<'_> {
    fn name(&self) -> &str {
        "gradient"
    }
    fn produce(&self, image: &Image, class: usize, _index: usize) -> Result<Saliency> {
        Ok(Saliency::Mask(gradient_saliency(image, class, self.model)?))
    }
}

pub struct IterativeProducer<'a> {
    pub model: &'a dyn Classifier,
    pub config: IterConfig,
}

impl SaliencyProducer for IterativeProducer<'_> {
    fn name(&self) -> &str {
        "iterative"
    }
    fn produce(&self, image: &Image, class: usize, index: usize) -> Result<Saliency> {
        let cfg = IterConfig { seed: self.config.seed.wrapping_add(index as u64), ..self.config.clone() };
        Ok(Saliency::Mask(iterative_mask(image, class, self.model, &cfg)?.mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::stubs::{LinearSoftmax, Uniform};
    use crate::eval::saliency_metric;
    use crate::nn::{Init, ParamSource, ParamStore};
    use crate::objective::total_variation;
    use proptest::prelude::*;

    fn linear(k: usize, size: (usize, usize), std: f64, seed: u64) -> LinearSoftmax {
        let mut ps = ParamStore::new(seed, DType::F64, &Device::Cpu);
        LinearSoftmax {
            weights: ps.param("w", &[k, 3 * size.0 * size.1], Init::Normal(std)).unwrap().detach(),
            bias: ps.param("b", &[k], Init::Zeros).unwrap().detach(),
            size,
        }
    }

    fn textured(h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|i| ((i * 7919) % 101) as f32 / 100.0).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn center_box_examples() {
        let b = center_box(224, 224);
        assert_eq!((b.width(), b.height()), (158, 158));
        assert_eq!((b.x0, b.y0), (33, 33));
        assert!((b.area_fraction(224, 224) - 0.4975).abs() < 1e-4);
        let b = center_box(32, 32);
        assert_eq!((b.width(), b.height(), b.x0, b.y0), (23, 23, 4, 4));
    }

    proptest! {
        #[test]
        fn center_box_band_and_bounds(h in 8usize..160, w in 8usize..160) {
            let b = center_box(h, w);
            prop_assert!(b.validate(h, w).is_ok());
            let f = b.area_fraction(h, w);
            prop_assert!((0.47..=0.53).contains(&f), "{}x{} -> {:?} ({})", h, w, b, f);
            // centered to within a pixel
            let left = b.x0 as i64;
            let right = (w - 1 - b.x1) as i64;
            prop_assert!((left - right).abs() <= 1);
        }
    }

    #[test]
    fn max_box_is_the_image() {
        let b = max_box(5, 7);
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (0, 0, 6, 4));
        assert!((saliency_metric(b.area_fraction(5, 7), 0.25) - -(0.25f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn gradient_saliency_of_constant_model_is_zero() {
        let m = gradient_saliency(&textured(6, 6), 0, &Uniform { k: 3, size: (6, 6) }).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_saliency_matches_weight_pattern() {
        // 2 classes: d p0/dx = p0 p1 (w0 - w1), so the map is max_c |w0 - w1| / max.
        let (h, w) = (4, 5);
        let model = linear(2, (h, w), 0.5, 3);
        let m = gradient_saliency(&textured(h, w), 0, &model).unwrap();
        let wv = model.weights.to_vec2::<f64>().unwrap();
        let hw = h * w;
        let diff: Vec<f64> = (0..hw)
            .map(|p| (0..3).map(|c| (wv[0][c * hw + p] - wv[1][c * hw + p]).abs()).fold(0.0, f64::max))
            .collect();
        let peak = diff.iter().copied().fold(0.0, f64::max);
        for (a, b) in m.data().iter().zip(&diff) {
            assert!((*a as f64 - b / peak).abs() < 1e-6);
        }
        assert_eq!(m.data().iter().copied().fold(0.0f32, f32::max), 1.0);
    }

    #[test]
    fn gradient_saliency_depends_only_on_the_probability_function() {
        // shifting every bias by the same constant leaves softmax unchanged
        let model = linear(3, (4, 4), 0.3, 1);
        let shifted = LinearSoftmax { bias: (&model.bias + 2.5).unwrap(), weights: model.weights.clone(), size: (4, 4) };
        let img = textured(4, 4);
        let a = gradient_saliency(&img, 1, &model).unwrap();
        let b = gradient_saliency(&img, 1, &shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn one_step_is_one_projected_gradient_step() {
        let (h, w) = (8, 8);
        let model = linear(2, (h, w), 0.5, 2);
        let img = textured(h, w);
        let cfg = IterConfig {
            steps: 1,
            learning_rate: 0.1,
            optimizer: IterOptimizer::GradientDescent,
            mask_resolution: Some(8),
            ..Default::default()
        };
        let out = iterative_mask(&img, 1, &model, &cfg).unwrap();
        assert_eq!(out.trace.len(), 1);
        // oracle: the same gradient computed directly
        let dev = Device::Cpu;
        let p = Var::from_tensor(&Tensor::full(0.5f32, (1, h, w), &dev).unwrap()).unwrap();
        let xt = img.to_tensor(DType::F32, &dev).unwrap().unsqueeze(0).unwrap();
        let alt = make_alternative(&img, &AlternativeSpec::for_height(cfg.alternative, h, cfg.seed)).unwrap();
        let at = alt.to_tensor(DType::F32, &dev).unwrap().unsqueeze(0).unwrap();
        let terms = saliency_terms(p.as_tensor(), &xt, &[1], &model, &cfg.params, &at, true).unwrap();
        let grads = terms.total.sum_all().unwrap().backward().unwrap();
        let g = to_f64_vec(grads.get(p.as_tensor()).unwrap()).unwrap();
        for (m, g) in out.mask.data().iter().zip(&g) {
            let expected = (0.5 - 0.1 * g).clamp(0.0, 1.0);
            assert!((*m as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn iterative_is_deterministic_and_in_range() {
        let model = linear(2, (8, 8), 0.5, 4);
        let img = textured(8, 8);
        let cfg = IterConfig { steps: 20, alternative: AlternativeMode::Random5050, seed: 3, ..Default::default() };
        let a = iterative_mask(&img, 0, &model, &cfg).unwrap();
        let b = iterative_mask(&img, 0, &model, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.mask, b.mask);
        assert!(a.mask.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(!a.stopped_early);
    }

    #[test]
    fn smoothness_weight_reduces_tv() {
        let model = linear(2, (16, 16), 0.5, 5);
        let img = textured(16, 16);
        let tv = |l: f64| {
            let cfg = IterConfig {
                steps: 60,
                mask_resolution: Some(16),
                params: ObjectiveParams { lambda_tv: l, ..Default::default() },
                ..Default::default()
            };
            let m = iterative_mask(&img, 0, &model, &cfg).unwrap().mask;
            let t = total_variation(&m.to_tensor(DType::F64, &Device::Cpu).unwrap()).unwrap();
            t.to_scalar::<f64>().unwrap()
        };
        let (a, b, c) = (tv(1.0), tv(10.0), tv(100.0));
        assert!(a > b && b > c, "tv {a} {b} {c}");
    }

    #[test]
    fn iterative_rejects_bad_config() {
        let model = linear(2, (8, 8), 0.5, 4);
        let img = textured(8, 8);
        assert!(iterative_mask(&img, 0, &model, &IterConfig { steps: 0, ..Default::default() }).is_err());
        let big = IterConfig { mask_resolution: Some(9), ..Default::default() };
        assert!(iterative_mask(&img, 0, &model, &big).is_err());
    }

    #[test]
    fn adversarial_zero_steps_is_identity() {
        let model = linear(3, (8, 8), 0.5, 6);
        let img = textured(8, 8);
        let cfg = AdversarialConfig { steps: 0, ..Default::default() };
        let r = adversarial_demo(&img, 2, &model, &cfg).unwrap();
        assert_eq!(r.prob_before, r.prob_after);
        assert_eq!(r.mean_perturbation, 0.0);
    }

    #[test]
    fn adversarial_mask_lowers_probability_and_stays_in_range() {
        let model = linear(3, (8, 8), 0.5, 6);
        let img = textured(8, 8);
        let r = adversarial_demo(&img, 2, &model, &AdversarialConfig { steps: 100, ..Default::default() }).unwrap();
        assert!(r.prob_after < r.prob_before);
        assert!(r.mask.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
