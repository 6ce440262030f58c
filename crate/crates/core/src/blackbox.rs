//! Differentiable black-box classifiers: the adapter trait, probability and
//! input-gradient queries, and a small trainable CNN used as the desk-scale
//! black box.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datasets::LabeledImageSet;
use crate::error::{check_finite, contract, Error, Result};
use crate::image::Image;
use crate::nn::{self, Conv2d, FrozenParams, Linear, ParamSource, ParamStore};

/// A classifier queried through its softmax output.
///
/// `probabilities` must be built from differentiable tensor ops so that
/// gradients with respect to the input can flow when `differentiable()` holds.
pub trait Classifier: Send + Sync {
    /// Expected `(H, W)` of input images.
    fn input_size(&self) -> (usize, usize);

    fn num_classes(&self) -> usize;

    fn differentiable(&self) -> bool {
        true
    }

    /// `(N, 3, H, W) -> (N, K)` class probabilities.
    fn probabilities(&self, batch: &Tensor) -> Result<Tensor>;
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn input_size(&self) -> (usize, usize) {
        (**self).input_size()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn differentiable(&self) -> bool {
        (**self).differentiable()
    }
    fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        (**self).probabilities(batch)
    }
}

impl<C: Classifier + ?Sized> Classifier for std::sync::Arc<C> {
    fn input_size(&self) -> (usize, usize) {
        (**self).input_size()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn differentiable(&self) -> bool {
        (**self).differentiable()
    }
    fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        (**self).probabilities(batch)
    }
}

/// Softmax probabilities for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities(pub Vec<f64>);

impl ClassProbabilities {
    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }

    /// Classes sorted by decreasing probability.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<(usize, f64)> = self.0.iter().copied().enumerate().collect();
        idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        idx.truncate(k);
        idx
    }
}

/// Checks that `batch` is `(N, 3, H, W)` with the model's input size.
pub fn check_batch(model: &dyn Classifier, batch: &Tensor) -> Result<()> {
    let (h, w) = model.input_size();
    match batch.dims() {
        [_, 3, bh, bw] if (*bh, *bw) == (h, w) => Ok(()),
        dims => Err(contract(format!(
            "classifier expects (N, 3, {h}, {w}) input, got {dims:?}"
        ))),
    }
}

/// Probabilities for a batch tensor, with shape checking.
pub fn probabilities(model: &dyn Classifier, batch: &Tensor) -> Result<Tensor> {
    check_batch(model, batch)?;
    model.probabilities(batch)
}

/// Classifies host images; images must already match the model input size.
pub fn classify(model: &dyn Classifier, images: &[&Image]) -> Result<Vec<ClassProbabilities>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let batch = Image::batch_tensor(images, DType::F32, &Device::Cpu)?;
    let probs = probabilities(model, &batch)?;
    let rows = probs.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows.into_iter().map(ClassProbabilities).collect())
}

/// Classifies host images in chunks of `chunk` to bound memory.
pub fn classify_chunked(
    model: &dyn Classifier,
    images: &[&Image],
    chunk: usize,
) -> Result<Vec<ClassProbabilities>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        out.extend(classify(model, part)?);
    }
    Ok(out)
}

/// Gradient of the softmax probability of `class` with respect to the input
/// pixels of a single `(3, H, W)` image. The result has the image's dtype.
pub fn input_gradient(model: &dyn Classifier, image: &Tensor, class: usize) -> Result<Tensor> {
    if !model.differentiable() {
        return Err(Error::Unsupported("input_gradient on a non-differentiable classifier".into()));
    }
    if class >= model.num_classes() {
        return Err(contract(format!("class {class} outside [0, {})", model.num_classes())));
    }
    let x = Var::from_tensor(&image.unsqueeze(0)?)?;
    let probs = probabilities(model, x.as_tensor())?;
    let p = probs.narrow(1, class, 1)?.sum_all()?;
    let grads = p.backward()?;
    match grads.get(x.as_tensor()) {
        Some(g) => Ok(g.squeeze(0)?),
        None => Ok(image.zeros_like()?),
    }
}

/// Wraps a classifier and counts how often it is invoked.
pub struct CountingClassifier<C> {
    inner: C,
    calls: AtomicUsize,
    images: AtomicUsize,
}

impl<C: Classifier> CountingClassifier<C> {
    pub fn new(inner: C) -> Self {
        Self { inner, calls: AtomicUsize::new(0), images: AtomicUsize::new(0) }
    }

    /// Number of `probabilities` invocations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Number of images classified so far.
    pub fn images(&self) -> usize {
        self.images.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.images.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: Classifier> Classifier for CountingClassifier<C> {
    fn input_size(&self) -> (usize, usize) {
        self.inner.input_size()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn differentiable(&self) -> bool {
        self.inner.differentiable()
    }
    fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.images.fetch_add(batch.dim(0)?, Ordering::SeqCst);
        self.inner.probabilities(batch)
    }
}

// ---------------------------------------------------------------------------
// Desk-scale CNN black box

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub input_size: (usize, usize),
    pub num_classes: usize,
    /// Output channels of the stride-2 convolution stages.
    pub channels: Vec<usize>,
}

impl CnnConfig {
    pub fn desk(input_size: (usize, usize), num_classes: usize) -> Self {
        Self { input_size, num_classes, channels: vec![32, 64, 128] }
    }
}

/// Stride-2 3x3 convolution stages with ReLU, global average pooling and a
/// linear head.
#[derive(Debug, Clone)]
pub struct SmallCnn {
    config: CnnConfig,
    class_names: Vec<String>,
    stages: Vec<Conv2d>,
    head: Linear,
}

const CNN_KIND: &str = "fastsal.blackbox.small_cnn";

impl SmallCnn {
    pub fn build(ps: &mut dyn ParamSource, config: CnnConfig, class_names: Vec<String>) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        if class_names.len() != config.num_classes {
            return Err(Error::Config("class name count differs from num_classes".into()));
        }
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, &ch) in config.channels.iter().enumerate() {
            stages.push(Conv2d::new(ps, &format!("stage{i}"), in_ch, ch, 3, 2, 1)?);
            in_ch = ch;
        }
        let head = Linear::new(ps, "head", in_ch, config.num_classes)?;
        Ok(Self { config, class_names, stages, head })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.forward(&h)?.relu()?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        self.head.forward(&pooled)
    }

    fn meta(&self) -> serde_json::Value {
        json!({ "kind": CNN_KIND, "config": self.config, "class_names": self.class_names })
    }

    /// Writes a checkpoint from the parameter store the model was built from.
    pub fn save(&self, store: &ParamStore, path: &Path) -> Result<()> {
        nn::save_checkpoint(path, &store.named_tensors(), &self.meta())
    }

    /// Loads a frozen (non-trainable) model.
    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = nn::load_checkpoint(path, &Device::Cpu)?;
        if meta["kind"] != CNN_KIND {
            return Err(Error::Format(format!("{} is not a classifier checkpoint", path.display())));
        }
        let config: CnnConfig = serde_json::from_value(meta["config"].clone())?;
        let class_names: Vec<String> = serde_json::from_value(meta["class_names"].clone())?;
        Self::build(&mut FrozenParams::new(tensors, DType::F32), config, class_names)
    }

    /// A gradient-free copy sharing the current weights.
    pub fn frozen(&self, store: &ParamStore) -> Result<Self> {
        let map = store.named_tensors().into_iter().map(|(k, t)| (k, t.detach())).collect();
        Self::build(&mut FrozenParams::new(map, DType::F32), self.config.clone(), self.class_names.clone())
    }
}

impl Classifier for SmallCnn {
    fn input_size(&self) -> (usize, usize) {
        self.config.input_size
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        let x = batch.to_dtype(DType::F32)?;
        let p = nn::softmax_last(&self.logits(&x)?)?;
        Ok(p.to_dtype(batch.dtype())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the data held out (from the end) for validation.
    pub validation_fraction: f64,
    pub seed: u64,
    pub channels: Vec<usize>,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 2e-3,
            validation_fraction: 0.1,
            seed: 0,
            channels: vec![32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub epoch_losses: Vec<f64>,
    pub validation_accuracy: f64,
    pub validation_size: usize,
}

pub struct TrainedClassifier {
    /// Frozen model with the final weights.
    pub model: SmallCnn,
    pub report: ClassifierReport,
}

/// Fraction of images whose argmax equals the label.
pub fn accuracy(model: &dyn Classifier, data: &LabeledImageSet) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<&Image> = data.images.iter().collect();
    let probs = classify_chunked(model, &refs, 256)?;
    let hits = probs.iter().zip(&data.labels).filter(|(p, &l)| p.argmax() == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Trains the desk-scale CNN with cross-entropy and Adam. Writes a checkpoint
/// to `checkpoint` when given.
pub fn train_classifier(
    data: &LabeledImageSet,
    cfg: &ClassifierTrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainedClassifier> {
    data.validate()?;
    if data.num_classes() < 2 {
        return Err(Error::Config("training a classifier needs at least 2 classes".into()));
    }
    let size = data.image_size().ok_or_else(|| contract("empty training set"))?;
    let n_val = ((data.len() as f64) * cfg.validation_fraction).round() as usize;
    let (train, val) = data.split_at(data.len() - n_val.min(data.len()));

    let device = Device::Cpu;
    let mut store = ParamStore::new(cfg.seed, DType::F32, &device);
    let config = CnnConfig { input_size: size, num_classes: data.num_classes(), channels: cfg.channels.clone() };
    let model = SmallCnn::build(&mut store, config, data.class_names.clone())?;
    let mut opt = candle_nn::AdamW::new(
        store.vars(),
        candle_nn::ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() },
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &train.images[i]).collect();
            let x = Image::batch_tensor(&imgs, DType::F32, &device)?;
            let labels: Vec<u32> = chunk.iter().map(|&i| train.labels[i] as u32).collect();
            let y = Tensor::new(labels.as_slice(), &device)?;
            let logits = model.logits(&x)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let value = loss.to_scalar::<f32>()? as f64;
            check_finite(&format!("classifier loss (epoch {epoch}, step {step})"), value)?;
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        tracing::info!(epoch, loss = mean, "classifier epoch");
        epoch_losses.push(mean);
    }

    let frozen = model.frozen(&store)?;
    let validation_accuracy = accuracy(&frozen, &val)?;
    if let Some(path) = checkpoint {
        model.save(&store, path)?;
    }
    Ok(TrainedClassifier {
        model: frozen,
        report: ClassifierReport { epoch_losses, validation_accuracy, validation_size: val.len() },
    })
}

#[cfg(test)]
pub(crate) mod stubs {
    //! Tiny analytic classifiers used across the crate's tests.
    use super::*;

    /// Every logit is zero.
    pub struct Uniform {
        pub k: usize,
        pub size: (usize, usize),
    }

    impl Classifier for Uniform {
        fn input_size(&self) -> (usize, usize) {
            self.size
        }
        fn num_classes(&self) -> usize {
            self.k
        }
        fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
            let n = batch.dim(0)?;
            // keep the graph connected to the input so gradients are defined (zero)
            let zero = (batch.sum((1, 2, 3))? * 0.0)?.unsqueeze(1)?;
            let logits = zero.broadcast_as((n, self.k))?.contiguous()?;
            nn::softmax_last(&logits)
        }
    }

    /// Linear-softmax model: logit_k = sum(W_k * x) + b_k.
    pub struct LinearSoftmax {
        pub weights: Tensor, // (K, 3*H*W)
        pub bias: Tensor,    // (K,)
        pub size: (usize, usize),
    }

    impl Classifier for LinearSoftmax {
        fn input_size(&self) -> (usize, usize) {
            self.size
        }
        fn num_classes(&self) -> usize {
            self.bias.dim(0).unwrap()
        }
        fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
            let flat = batch.flatten_from(1)?;
            let w = self.weights.to_dtype(batch.dtype())?;
            let b = self.bias.to_dtype(batch.dtype())?;
            let logits = flat.matmul(&w.t()?)?.broadcast_add(&b)?;
            nn::softmax_last(&logits)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stubs::*;
    use super::*;
    use crate::datasets::{generate_sprites, SpriteConfig};

    fn linear_toy(size: (usize, usize), k: usize, seed: u64) -> LinearSoftmax {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(seed, DType::F64, &dev);
        let d = 3 * size.0 * size.1;
        let weights = ps.param("w", &[k, d], nn::Init::Normal(0.3)).unwrap().detach();
        let bias = ps.param("b", &[k], nn::Init::Normal(0.3)).unwrap().detach();
        LinearSoftmax { weights, bias, size }
    }

    #[test]
    fn uniform_stub_gives_uniform_probabilities() {
        let model = Uniform { k: 4, size: (2, 2) };
        let img = Image::filled(2, 2, [0.3, 0.2, 0.9]);
        let probs = classify(&model, &[&img, &img]).unwrap();
        for row in &probs {
            assert!(row.0.iter().all(|&p| (p - 0.25).abs() < 1e-7));
        }
        assert_eq!(probs[0], probs[1]);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let model = Uniform { k: 4, size: (2, 2) };
        let img = Image::filled(3, 2, [0.0; 3]);
        assert!(matches!(classify(&model, &[&img]), Err(Error::Contract(_))));
    }

    #[test]
    fn raising_red_raises_red_class_probability() {
        // logit_0 = mean red channel, logit_1 = 0
        let size = (4, 4);
        let n = 16;
        let mut w = vec![0f64; 2 * 3 * n];
        for i in 0..n {
            w[i] = 1.0 / n as f64;
        }
        let model = LinearSoftmax {
            weights: Tensor::from_vec(w, (2, 3 * n), &Device::Cpu).unwrap(),
            bias: Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap(),
            size,
        };
        let dark = Image::filled(4, 4, [0.2, 0.5, 0.5]);
        let bright = Image::filled(4, 4, [0.8, 0.5, 0.5]);
        let p = classify(&model, &[&dark, &bright]).unwrap();
        assert!(p[1].get(0) > p[0].get(0));
    }

    #[test]
    fn constant_output_has_zero_input_gradient() {
        let model = Uniform { k: 3, size: (4, 4) };
        let x = Image::filled(4, 4, [0.5; 3]).to_tensor(DType::F64, &Device::Cpu).unwrap();
        let g = input_gradient(&model, &x, 1).unwrap();
        assert!(nn::to_f64_vec(&g).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        // 8x8 toy at double precision, eps = 1e-3, relative tolerance 1e-3.
        let model = linear_toy((8, 8), 3, 7);
        let dev = Device::Cpu;
        let data: Vec<f64> = (0..192).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let x = Tensor::from_vec(data.clone(), (3, 8, 8), &dev).unwrap();
        let g = nn::to_f64_vec(&input_gradient(&model, &x, 2).unwrap()).unwrap();
        let prob = |d: &[f64]| {
            let t = Tensor::from_vec(d.to_vec(), (1, 3, 8, 8), &dev).unwrap();
            model.probabilities(&t).unwrap().to_vec2::<f64>().unwrap()[0][2]
        };
        let eps = 1e-3;
        for i in (0..192).step_by(5) {
            let mut up = data.clone();
            let mut dn = data.clone();
            up[i] += eps;
            dn[i] -= eps;
            let fd = (prob(&up) - prob(&dn)) / (2.0 * eps);
            let denom = fd.abs().max(g[i].abs()).max(1e-12);
            assert!((fd - g[i]).abs() / denom <= 1e-3, "pixel {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn two_class_linear_gradient_matches_closed_form() {
        // p0 = sigmoid(z0 - z1); dp0/dx = p0 (1 - p0) (w0 - w1)
        let model = linear_toy((2, 2), 2, 3);
        let x = Image::filled(2, 2, [0.1, 0.6, 0.3]).to_tensor(DType::F64, &Device::Cpu).unwrap();
        let g = nn::to_f64_vec(&input_gradient(&model, &x, 0).unwrap()).unwrap();
        let w = model.weights.to_vec2::<f64>().unwrap();
        let b = model.bias.to_vec1::<f64>().unwrap();
        let xs = nn::to_f64_vec(&x).unwrap();
        let z: Vec<f64> = (0..2)
            .map(|k| w[k].iter().zip(&xs).map(|(a, b)| a * b).sum::<f64>() + b[k])
            .collect();
        let p0 = 1.0 / (1.0 + (z[1] - z[0]).exp());
        for i in 0..12 {
            let expected = p0 * (1.0 - p0) * (w[0][i] - w[1][i]);
            assert!((g[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn class_gradients_sum_to_zero() {
        let model = linear_toy((4, 4), 4, 9);
        let x = Image::filled(4, 4, [0.4, 0.2, 0.7]).to_tensor(DType::F64, &Device::Cpu).unwrap();
        let mut sum = vec![0f64; 48];
        for c in 0..4 {
            for (s, v) in sum.iter_mut().zip(nn::to_f64_vec(&input_gradient(&model, &x, c).unwrap()).unwrap()) {
                *s += v;
            }
        }
        assert!(sum.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn non_differentiable_handle_is_unsupported() {
        struct Opaque;
        impl Classifier for Opaque {
            fn input_size(&self) -> (usize, usize) {
                (2, 2)
            }
            fn num_classes(&self) -> usize {
                2
            }
            fn differentiable(&self) -> bool {
                false
            }
            fn probabilities(&self, _: &Tensor) -> Result<Tensor> {
                unreachable!()
            }
        }
        let x = Tensor::zeros((3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(input_gradient(&Opaque, &x, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn zero_epochs_is_near_chance_and_checkpoint_round_trips() {
        let data = generate_sprites(&SpriteConfig { sprites_per_class: 20, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ckpt");
        let cfg = ClassifierTrainConfig { epochs: 0, validation_fraction: 0.5, ..Default::default() };
        let trained = train_classifier(&data, &cfg, Some(&path)).unwrap();
        assert!(trained.report.validation_accuracy < 0.35, "{:?}", trained.report);

        let loaded = SmallCnn::load(&path).unwrap();
        let batch: Vec<&Image> = data.images.iter().take(8).collect();
        assert_eq!(classify(&trained.model, &batch).unwrap(), classify(&loaded, &batch).unwrap());
    }

    #[test]
    fn probability_rows_are_distributions() {
        let data = generate_sprites(&SpriteConfig { sprites_per_class: 1, ..Default::default() }).unwrap();
        let mut ps = ParamStore::new(1, DType::F32, &Device::Cpu);
        let cnn = SmallCnn::build(&mut ps, CnnConfig::desk((32, 32), 10), data.class_names.clone()).unwrap();
        let refs: Vec<&Image> = data.images.iter().collect();
        for row in classify(&cnn, &refs).unwrap() {
            assert!(row.0.iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert!((row.0.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
}
