//! The masking network.
//!
//! Encoder (stride-2 blocks) -> class-conditioned feature filter on the
//! deepest scale -> upsampler chain with skip connections -> 1x1 head to two
//! channels -> `|C0| / (|C0| + |C1|)` -> bilinear resize to the input size.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{contract, Error, Result};
use crate::image::{Image, Mask};
use crate::nn::{self, Conv2d, Init, ParamSource, ParamStore, Upsample2x};

/// Lower bound on the denominator of the two-channel mask.
pub const MASK_STABILIZER: f64 = 1e-8;
/// Parameter-name prefix of the encoder, used to freeze it.
pub const ENCODER_PREFIX: &str = "encoder.";
const MASKER_KIND: &str = "fastsal.masker";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePreset {
    Imagenet,
    Cifar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskerConfig {
    pub scale_preset: ScalePreset,
    pub input_size: (usize, usize),
    /// Output channels of each encoder block; block `i` works at `1 / 2^(i+1)` resolution.
    pub encoder_channels: Vec<usize>,
    /// Convolutions per encoder block (the first one has stride 2).
    pub convs_per_block: usize,
    /// Channels of the first upsampler; each following one halves it.
    pub first_upsampler_channels: usize,
    pub bottlenecks_per_upsampler: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub final_bilinear_factor: usize,
}

impl MaskerConfig {
    /// 32x32 geometry: three blocks of five convolutions, decoder back to 16x16, x2 bilinear.
    pub fn cifar(num_classes: usize) -> Self {
        Self {
            scale_preset: ScalePreset::Cifar,
            input_size: (32, 32),
            encoder_channels: vec![32, 64, 128],
            convs_per_block: 5,
            first_upsampler_channels: 64,
            bottlenecks_per_upsampler: 1,
            embedding_dim: 128,
            num_classes,
            final_bilinear_factor: 2,
        }
    }

    /// 224x224 geometry: five scales with residual-network widths, three
    /// upsamplers starting at 768 channels, decoder to 56x56, x4 bilinear.
    pub fn imagenet(num_classes: usize) -> Self {
        Self {
            scale_preset: ScalePreset::Imagenet,
            input_size: (224, 224),
            encoder_channels: vec![64, 256, 512, 1024, 2048],
            convs_per_block: 1,
            first_upsampler_channels: 768,
            bottlenecks_per_upsampler: 3,
            embedding_dim: 2048,
            num_classes,
            final_bilinear_factor: 4,
        }
    }

    pub fn with_input_size(mut self, height: usize, width: usize) -> Self {
        self.input_size = (height, width);
        self
    }

    /// Number of upsamplers between the deepest scale and the head.
    pub fn num_upsamplers(&self) -> usize {
        let out_scale = self.final_bilinear_factor.trailing_zeros() as usize - 1;
        self.encoder_channels.len() - 1 - out_scale
    }

    pub fn upsampler_channels(&self) -> Vec<usize> {
        (0..self.num_upsamplers()).map(|i| (self.first_upsampler_channels >> i).max(1)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return cfg("encoder channel counts must be positive".into());
        }
        if self.convs_per_block == 0 || self.first_upsampler_channels == 0 {
            return cfg("convs_per_block and first_upsampler_channels must be positive".into());
        }
        if self.num_classes == 0 {
            return cfg("num_classes must be positive".into());
        }
        let deepest = *self.encoder_channels.last().unwrap();
        if self.embedding_dim != deepest {
            return cfg(format!(
                "embedding_dim {} must equal the deepest encoder channel count {deepest}",
                self.embedding_dim
            ));
        }
        let f = self.final_bilinear_factor;
        if f < 2 || !f.is_power_of_two() {
            return cfg(format!("final_bilinear_factor must be a power of two >= 2, got {f}"));
        }
        if self.scale_preset == ScalePreset::Imagenet && f != 4 {
            return cfg("the imagenet preset uses a final bilinear factor of 4".into());
        }
        let out_scale = f.trailing_zeros() as usize - 1;
        if out_scale >= self.encoder_channels.len() {
            return cfg("final_bilinear_factor is coarser than the deepest encoder scale".into());
        }
        let stride = 1usize << self.encoder_channels.len();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return cfg(format!("input size {h}x{w} must be a positive multiple of {stride}"));
        }
        Ok(())
    }
}

/// Per-class embedding vectors used by the feature filter.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, num_classes: usize, dim: usize) -> Result<()> {
        if self.rows.len() != num_classes {
            return Err(Error::Format(format!("{} embedding rows for {num_classes} classes", self.rows.len())));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Format(format!("embedding row {i} has {} entries, expected {dim}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("embedding row {i} has non-finite entries")));
            }
        }
        Ok(())
    }
}

/// `Y = X * sigmoid(X . c)` at every spatial location.
///
/// `features` is `(N, D, H', W')`, `selectors` is `(N, D)`. Returns the
/// filtered features and the gate map `(N, H', W')`.
pub fn feature_filter(features: &Tensor, selectors: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, d, _, _) = features.dims4()?;
    if selectors.dims() != [n, d] {
        return Err(contract(format!(
            "selector shape {:?} does not match features {:?}",
            selectors.dims(),
            features.dims()
        )));
    }
    let c = selectors.reshape((n, d, 1, 1))?;
    let logits = features.broadcast_mul(&c)?.sum(1)?;
    let gate = candle_nn::ops::sigmoid(&logits)?;
    let y = features.broadcast_mul(&gate.unsqueeze(1)?)?;
    Ok((y, gate))
}

/// `|C0| / max(|C0| + |C1|, 1e-8)`, elementwise.
pub fn two_channel_mask(c0: &Tensor, c1: &Tensor) -> Result<Tensor> {
    if c0.dims() != c1.dims() {
        return Err(contract(format!("channel shapes differ: {:?} vs {:?}", c0.dims(), c1.dims())));
    }
    let a0 = c0.abs()?;
    let denom = (&a0 + c1.abs()?)?.maximum(MASK_STABILIZER)?;
    Ok((a0 / denom)?)
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    down: Conv2d,
    residual: Vec<Conv2d>,
}

impl EncoderBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.down.forward(x)?.relu()?;
        for conv in &self.residual {
            h = (&h + conv.forward(&h)?.relu()?)?;
        }
        Ok(h)
    }
}

/// Init gain of residual-branch convs.
const RESIDUAL_GAIN: f64 = 0.25;

/// 1x1 reduce, 3x3, 1x1 expand, plus a shortcut (projected when widths differ).
#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: Conv2d,
    mid: Conv2d,
    expand: Conv2d,
    shortcut: Option<Conv2d>,
}

impl Bottleneck {
    fn new(ps: &mut dyn ParamSource, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let r = (out_ch / 4).max(1);
        Ok(Self {
            reduce: Conv2d::new(ps, &format!("{name}.reduce"), in_ch, r, 1, 1, 0)?,
            mid: Conv2d::new(ps, &format!("{name}.mid"), r, r, 3, 1, 1)?,
            expand: Conv2d::scaled(ps, &format!("{name}.expand"), r, out_ch, 1, 1, 0, RESIDUAL_GAIN)?,
            shortcut: if in_ch == out_ch {
                None
            } else {
                Some(Conv2d::new(ps, &format!("{name}.shortcut"), in_ch, out_ch, 1, 1, 0)?)
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.reduce.forward(x)?.relu()?;
        let h = self.mid.forward(&h)?.relu()?;
        let h = self.expand.forward(&h)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    up: Upsample2x,
    bottlenecks: Vec<Bottleneck>,
}

/// Output of a batched forward pass.
#[derive(Debug, Clone)]
pub struct MaskOutput {
    /// `(N, H, W)` masks at input resolution.
    pub masks: Tensor,
    /// `(N, H', W')` feature-filter gates at the deepest scale.
    pub gates: Tensor,
}

/// Masker weights together with the layer graph built on top of them.
pub struct Masker {
    config: MaskerConfig,
    class_names: Vec<String>,
    store: ParamStore,
    encoder: Vec<EncoderBlock>,
    embedding: Tensor,
    decoder: Vec<UpBlock>,
    head: Conv2d,
}

impl Masker {
    /// Fresh weights from a seed.
    pub fn new(config: MaskerConfig, class_names: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if class_names.len() != config.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                class_names.len(),
                config.num_classes
            )));
        }
        let mut ps = ParamStore::new(seed, DType::F32, &Device::Cpu);
        let mut encoder = Vec::new();
        let mut in_ch = 3;
        for (b, &ch) in config.encoder_channels.iter().enumerate() {
            let down = Conv2d::new(&mut ps, &format!("{ENCODER_PREFIX}block{b}.conv0"), in_ch, ch, 3, 2, 1)?;
            let residual = (1..config.convs_per_block)
                .map(|i| {
                    let name = format!("{ENCODER_PREFIX}block{b}.conv{i}");
                    Conv2d::scaled(&mut ps, &name, ch, ch, 3, 1, 1, RESIDUAL_GAIN)
                })
                .collect::<Result<_>>()?;
            encoder.push(EncoderBlock { down, residual });
            in_ch = ch;
        }
        let d = config.embedding_dim;
        let embedding = ps.param(
            "filter.embedding",
            &[config.num_classes, d],
            Init::Normal((1.0 / d as f64).sqrt()),
        )?;
        let mut decoder = Vec::new();
        let depth = config.encoder_channels.len();
        for (u, &ch) in config.upsampler_channels().iter().enumerate() {
            let skip_ch = config.encoder_channels[depth - 2 - u];
            let up = Upsample2x::new(&mut ps, &format!("decoder.up{u}.transpose"), in_ch, ch)?;
            let mut bottlenecks = Vec::new();
            let mut b_in = ch + skip_ch;
            for k in 0..config.bottlenecks_per_upsampler {
                bottlenecks.push(Bottleneck::new(&mut ps, &format!("decoder.up{u}.bottleneck{k}"), b_in, ch)?);
                b_in = ch;
            }
            if bottlenecks.is_empty() {
                return Err(Error::Config("bottlenecks_per_upsampler must be at least 1".into()));
            }
            decoder.push(UpBlock { up, bottlenecks });
            in_ch = ch;
        }
        let head = Conv2d::new(&mut ps, "head", in_ch, 2, 1, 1, 0)?;
        Ok(Self { config, class_names, store: ps, encoder, embedding, decoder, head })
    }

    pub fn config(&self) -> &MaskerConfig {
        &self.config
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// Batched forward pass. `x` is `(N, 3, H, W)`; one class per image.
    pub fn forward(&self, x: &Tensor, classes: &[usize]) -> Result<MaskOutput> {
        let (n, c, h, w) = x.dims4()?;
        if c != 3 || (h, w) != self.config.input_size {
            return Err(contract(format!(
                "masker expects (N, 3, {}, {}) input, got {:?}",
                self.config.input_size.0,
                self.config.input_size.1,
                x.dims()
            )));
        }
        if classes.len() != n {
            return Err(contract(format!("{} class selectors for {n} images", classes.len())));
        }
        if let Some(bad) = classes.iter().find(|&&k| k >= self.config.num_classes) {
            return Err(contract(format!("class {bad} outside [0, {})", self.config.num_classes)));
        }
        let x = x.to_dtype(DType::F32)?;
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut hcur = x;
        for block in &self.encoder {
            hcur = block.forward(&hcur)?;
            feats.push(hcur.clone());
        }
        let idx: Vec<u32> = classes.iter().map(|&k| k as u32).collect();
        let idx = Tensor::from_vec(idx, n, x_device())?;
        let selectors = self.embedding.index_select(&idx, 0)?;
        let (mut y, gates) = feature_filter(feats.last().unwrap(), &selectors)?;
        let depth = feats.len();
        for (u, block) in self.decoder.iter().enumerate() {
            let up = block.up.forward(&y)?.relu()?;
            y = Tensor::cat(&[&up, &feats[depth - 2 - u]], 1)?;
            for b in &block.bottlenecks {
                y = b.forward(&y)?;
            }
        }
        let logits = self.head.forward(&y)?;
        let c0 = logits.narrow(1, 0, 1)?.squeeze(1)?;
        let c1 = logits.narrow(1, 1, 1)?.squeeze(1)?;
        let low = two_channel_mask(&c0, &c1)?;
        let masks = nn::bilinear_resize(&low, h, w)?;
        Ok(MaskOutput { masks, gates })
    }

    /// Mask for a single image, resized to the masker input if needed and
    /// back to the image size afterwards.
    pub fn explain(&self, image: &Image, class: usize) -> Result<Mask> {
        let (ih, iw) = self.config.input_size;
        let input = if image.dims() == (ih, iw) { image.clone() } else { image.resize(ih, iw) };
        let x = input.to_tensor(DType::F32, x_device())?.unsqueeze(0)?;
        let out = self.forward(&x, &[class])?;
        let mask = Mask::from_tensor(&out.masks.squeeze(0)?.detach())?;
        Ok(if image.dims() == (ih, iw) { mask } else { mask.resize(image.height(), image.width()) })
    }

    /// Trainable variables, leaving out the encoder when it is frozen.
    pub fn trainable_vars(&self, encoder_frozen: bool) -> Vec<candle_core::Var> {
        if encoder_frozen {
            self.store.vars_excluding(ENCODER_PREFIX)
        } else {
            self.store.vars()
        }
    }

    fn meta(&self) -> serde_json::Value {
        json!({ "kind": MASKER_KIND, "config": self.config, "class_names": self.class_names })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_checkpoint(path, &self.store.named_tensors(), &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = nn::load_checkpoint(path, x_device())?;
        if meta["kind"] != MASKER_KIND {
            return Err(Error::Format(format!("{} is not a masker checkpoint", path.display())));
        }
        let config: MaskerConfig = serde_json::from_value(meta["config"].clone())?;
        let class_names: Vec<String> = serde_json::from_value(meta["class_names"].clone())?;
        let masker = Self::new(config, class_names, 0)?;
        masker.store.assign(&tensors)?;
        Ok(masker)
    }

    /// Replaces weights whose names appear in `tensors` (e.g. converted encoder weights).
    pub fn import_weights(&self, tensors: &HashMap<String, Tensor>) -> Result<usize> {
        let mut n = 0;
        for (name, t) in tensors {
            let var = self
                .store
                .get(name)
                .ok_or_else(|| Error::Format(format!("masker has no parameter {name}")))?;
            if var.dims() != t.dims() {
                return Err(Error::Format(format!(
                    "{name}: shape {:?} does not match {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn embedding(&self) -> Result<EmbeddingMatrix> {
        let rows = self.embedding.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(EmbeddingMatrix { rows })
    }

    pub fn set_embedding(&self, matrix: &EmbeddingMatrix) -> Result<()> {
        matrix.validate(self.config.num_classes, self.config.embedding_dim)?;
        let flat: Vec<f64> = matrix.rows.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (matrix.num_classes(), matrix.dim()), x_device())?;
        let var = self.store.get("filter.embedding").expect("embedding parameter");
        var.set(&t.to_dtype(DType::F32)?)?;
        Ok(())
    }

    /// Writes the class embedding as CSV: a header, then one row per class
    /// with the class name followed by `embedding_dim` values.
    pub fn export_embedding(&self, path: &Path) -> Result<()> {
        write_embedding_csv(path, &self.class_names, &self.embedding()?)
    }
}

/// Read-only single-image mask inference, as used by the service.
pub trait MaskSource: Send + Sync {
    fn input_size(&self) -> (usize, usize);
    fn num_classes(&self) -> usize;
    /// `image` must already have the masker's input size.
    fn mask(&self, image: &Image, class: usize) -> Result<Mask>;
}

impl MaskSource for Masker {
    fn input_size(&self) -> (usize, usize) {
        self.config.input_size
    }
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }
    fn mask(&self, image: &Image, class: usize) -> Result<Mask> {
        if image.dims() != self.config.input_size {
            return Err(contract(format!("masker expects {:?} input, got {:?}", self.config.input_size, image.dims())));
        }
        self.explain(image, class)
    }
}

/// Counts forward passes of a wrapped mask source.
pub struct CountingMasker<M> {
    inner: M,
    calls: std::sync::atomic::AtomicUsize,
}

impl<M> CountingMasker<M> {
    pub fn new(inner: M) -> Self {
        Self { inner, calls: Default::default() }
    }
    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
    pub fn reset(&self) {
        self.calls.store(0, std::sync::atomic::Ordering::SeqCst);
    }
}

impl<M: MaskSource> MaskSource for CountingMasker<M> {
    fn input_size(&self) -> (usize, usize) {
        self.inner.input_size()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn mask(&self, image: &Image, class: usize) -> Result<Mask> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.mask(image, class)
    }
}

impl<M: MaskSource + ?Sized> MaskSource for std::sync::Arc<M> {
    fn input_size(&self) -> (usize, usize) {
        (**self).input_size()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn mask(&self, image: &Image, class: usize) -> Result<Mask> {
        (**self).mask(image, class)
    }
}

fn x_device() -> &'static Device {
    &Device::Cpu
}

pub fn write_embedding_csv(path: &Path, names: &[String], matrix: &EmbeddingMatrix) -> Result<()> {
    if names.len() != matrix.num_classes() {
        return Err(contract("one class name per embedding row is required"));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["class".to_string()];
    header.extend((0..matrix.dim()).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (name, row) in names.iter().zip(&matrix.rows) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding_csv(path: &Path) -> Result<(Vec<String>, EmbeddingMatrix)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut names = Vec::new();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let mut it = rec.iter();
        names.push(it.next().unwrap_or_default().to_string());
        let row = it
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad embedding value {v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let m = EmbeddingMatrix { rows };
    m.validate(names.len(), m.dim())?;
    Ok((names, m))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("embedding csv: {e}"))
}

/// Mean gate value per image, handy for inspecting class sensitivity.
pub fn gate_peaks(gates: &Tensor) -> Result<Vec<f64>> {
    nn::to_f64_vec(&gates.flatten_from(1)?.max(D::Minus1)?)
}
