//! Training loop for the masker against a frozen classifier: fake class
//! selectors, a fresh random alternative image per sample, an auxiliary loss
//! on the feature-filter gate, per-epoch history and atomic checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blackbox::{probabilities, Classifier};
use crate::datasets::LabeledImageSet;
use crate::error::{check_finite, contract, Error, Result};
use crate::evidence::{apply_mask, make_alternative, AlternativeMode, AlternativeSpec};
use crate::image::Image;
use crate::masker::Masker;
use crate::nn::to_f64_vec;
use crate::objective::{embedding_aux_loss, fake_label_loss, saliency_terms, ObjectiveParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSelector {
    pub class_index: usize,
    pub is_fake: bool,
}

/// With probability `fake_prob`, a class drawn uniformly from the `k - 1`
/// classes other than `true_label`; otherwise `true_label` itself.
pub fn sample_selector(true_label: usize, k: usize, fake_prob: f64, rng: &mut impl Rng) -> Result<ClassSelector> {
    if !(0.0..=1.0).contains(&fake_prob) {
        return Err(Error::Config(format!("fake_prob must lie in [0, 1], got {fake_prob}")));
    }
    if true_label >= k {
        return Err(contract(format!("label {true_label} outside [0, {k})")));
    }
    if k < 2 {
        if fake_prob > 0.0 {
            return Err(Error::Config("fake selectors need at least 2 classes".into()));
        }
        return Ok(ClassSelector { class_index: true_label, is_fake: false });
    }
    if fake_prob > 0.0 && rng.random_bool(fake_prob) {
        let r = rng.random_range(0..k - 1);
        let class_index = if r >= true_label { r + 1 } else { r };
        Ok(ClassSelector { class_index, is_fake: true })
    } else {
        Ok(ClassSelector { class_index: true_label, is_fake: false })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub params: ObjectiveParams,
    pub seed: u64,
    /// Write a numbered checkpoint every this many epochs (0 disables them;
    /// the latest checkpoint is always refreshed).
    pub checkpoint_every: usize,
    pub encoder_frozen: bool,
    /// How alternative images are generated during training.
    pub alternative: AlternativeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            params: ObjectiveParams::default(),
            seed: 0,
            checkpoint_every: 5,
            encoder_frozen: false,
            alternative: AlternativeMode::Random5050,
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe: [`ObjectiveParams::desk`] weights, batch 32.
    pub fn desk() -> Self {
        Self { batch_size: 32, params: ObjectiveParams::desk(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        self.params.validate()
    }
}

/// Batch means of the loss terms. `tv`, `preserve_nll` and `destroy` are
/// averaged over real selectors, `av` and `aux` over every image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub tv: f64,
    pub av: f64,
    pub preserve_nll: f64,
    pub destroy: f64,
    pub aux: f64,
    pub total: f64,
    pub real: usize,
    pub fake: usize,
}

/// One line of `history.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tv: f64,
    pub av: f64,
    pub preserve_nll: f64,
    pub destroy: f64,
    pub aux: f64,
    pub total: f64,
    pub seconds: f64,
}

/// Owns the optimizer state for one masker.
pub struct MaskerTrainer {
    opt: AdamW,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl MaskerTrainer {
    pub fn new(masker: &Masker, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() };
        let opt = AdamW::new(masker.trainable_vars(cfg.encoder_frozen), params)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { opt, cfg, rng })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimizer update on a batch of images with their true labels.
    pub fn step(
        &mut self,
        masker: &Masker,
        images: &[&Image],
        labels: &[usize],
        model: &dyn Classifier,
    ) -> Result<LossStats> {
        let n = images.len();
        if n == 0 || labels.len() != n {
            return Err(contract("train step needs a non-empty batch with one label per image"));
        }
        let k = masker.config().num_classes;
        let params = &self.cfg.params;
        let mut selectors = Vec::with_capacity(n);
        let mut alts = Vec::with_capacity(n);
        for (img, &label) in images.iter().zip(labels) {
            selectors.push(sample_selector(label, k, params.fake_prob, &mut self.rng)?);
            let spec = AlternativeSpec::for_height(self.cfg.alternative, img.height(), self.rng.next_u64());
            alts.push(make_alternative(img, &spec)?);
        }
        let dev = Device::Cpu;
        let x = Image::batch_tensor(images, DType::F32, &dev)?;
        let alt_refs: Vec<&Image> = alts.iter().collect();
        let a = Image::batch_tensor(&alt_refs, DType::F32, &dev)?;
        let classes: Vec<usize> = selectors.iter().map(|s| s.class_index).collect();
        let is_fake: Vec<bool> = selectors.iter().map(|s| s.is_fake).collect();

        let out = masker.forward(&x, &classes)?;
        let real: Vec<u32> = (0..n as u32).filter(|&i| !is_fake[i as usize]).collect();
        let fake: Vec<u32> = (0..n as u32).filter(|&i| is_fake[i as usize]).collect();
        let mut stats = LossStats { real: real.len(), fake: fake.len(), ..Default::default() };

        let aux = embedding_aux_loss(&out.gates, &is_fake, params.aux_weight)?;
        let mut sum = aux.sum_all()?;
        stats.aux = check_finite("aux", scalar(&aux.mean_all()?)?)?;
        stats.av = check_finite("av", mean_of(&crate::objective::average_value(&out.masks)?)?)?;

        if !real.is_empty() {
            let idx = Tensor::from_vec(real.clone(), real.len(), &dev)?;
            let rc: Vec<usize> = real.iter().map(|&i| classes[i as usize]).collect();
            let terms = saliency_terms(
                &out.masks.index_select(&idx, 0)?,
                &x.index_select(&idx, 0)?,
                &rc,
                model,
                params,
                &a.index_select(&idx, 0)?,
                true,
            )?;
            let b = terms.breakdown()?;
            stats.tv = b.tv;
            stats.preserve_nll = b.preserve_nll;
            stats.destroy = b.destroy;
            sum = (sum + terms.total.sum_all()?)?;
        }
        if !fake.is_empty() {
            let idx = Tensor::from_vec(fake, stats.fake, &dev)?;
            let fl = fake_label_loss(&out.masks.index_select(&idx, 0)?, params)?;
            sum = (sum + fl.sum_all()?)?;
        }
        let loss = (sum / n as f64)?;
        stats.total = check_finite("total", scalar(&loss)?)?;
        self.opt.backward_step(&loss)?;
        Ok(stats)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn mean_of(t: &Tensor) -> Result<f64> {
    scalar(&t.to_dtype(DType::F64)?.mean_all()?)
}

/// Where training artifacts go; either may be omitted.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub history: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Name of the always-current checkpoint inside the checkpoint directory.
pub const LATEST_CHECKPOINT: &str = "masker_latest.ckpt";

/// Full-pass epochs over `data` in a seeded order. Returns the per-epoch history.
pub fn train(
    masker: &Masker,
    data: &LabeledImageSet,
    model: &dyn Classifier,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let size = data.image_size().expect("non-empty");
    if size != model.input_size() || size != masker.config().input_size {
        return Err(contract(format!(
            "data is {size:?}, classifier expects {:?}, masker expects {:?}",
            model.input_size(),
            masker.config().input_size
        )));
    }
    if model.num_classes() != masker.config().num_classes {
        return Err(contract("classifier and masker disagree on the number of classes"));
    }
    let mut history_file = match &outputs.history {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            Some(BufWriter::new(File::create(p)?))
        }
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut trainer = MaskerTrainer::new(masker, cfg.clone())?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0fde_a7a0);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut order_rng);
        let mut acc = [0f64; 6];
        let (mut real, mut all) = (0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let s = trainer.step(masker, &imgs, &labels, model)?;
            let (r, m) = (s.real as f64, chunk.len() as f64);
            acc[0] += s.tv * r;
            acc[1] += s.av * m;
            acc[2] += s.preserve_nll * r;
            acc[3] += s.destroy * r;
            acc[4] += s.aux * m;
            acc[5] += s.total * m;
            real += s.real;
            all += chunk.len();
        }
        let r = real.max(1) as f64;
        let m = all as f64;
        let rec = EpochRecord {
            epoch,
            tv: acc[0] / r,
            av: acc[1] / m,
            preserve_nll: acc[2] / r,
            destroy: acc[3] / r,
            aux: acc[4] / m,
            total: acc[5] / m,
            seconds: start.elapsed().as_secs_f64(),
        };
        tracing::info!(
            epoch,
            total = rec.total,
            tv = rec.tv,
            av = rec.av,
            preserve = rec.preserve_nll,
            destroy = rec.destroy,
            aux = rec.aux,
            seconds = rec.seconds,
            "masker epoch"
        );
        if let Some(f) = history_file.as_mut() {
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            masker.save(&dir.join(LATEST_CHECKPOINT))?;
            if cfg.checkpoint_every > 0 && (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs) {
                masker.save(&dir.join(format!("masker_epoch{epoch:03}.ckpt")))?;
            }
        }
        history.push(rec);
    }
    Ok(history)
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Held-out measurements of a trained masker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskerDiagnostics {
    /// Mean mask value under the true-class selector.
    pub mean_av_true: f64,
    /// Mean mask value under a uniformly drawn wrong-class selector.
    pub mean_av_fake: f64,
    /// Mean f_c on the full images.
    pub mean_prob_full: f64,
    /// Mean f_c after removing the masked region.
    pub mean_prob_destroyed: f64,
    /// Fraction of images whose highest-valued mask pixel differs between the true and the fake selector.
    pub class_sensitivity: f64,
    pub images: usize,
}

/// Runs the masker under true and fake selectors on `data` and measures
/// mask area and how much the removal destroys the true class.
pub fn masker_diagnostics(
    masker: &Masker,
    data: &LabeledImageSet,
    model: &dyn Classifier,
    alternative: AlternativeMode,
    seed: u64,
) -> Result<MaskerDiagnostics> {
    if data.is_empty() {
        return Err(Error::Config("diagnostics need at least one image".into()));
    }
    let k = masker.config().num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dev = Device::Cpu;
    let (mut av_t, mut av_f, mut p_full, mut p_dest, mut differ) = (0.0, 0.0, 0.0, 0.0, 0usize);
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(64) {
        let imgs: Vec<&Image> = chunk.iter().map(|&i| &data.images[i]).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let fakes: Vec<usize> = labels
            .iter()
            .map(|&l| sample_selector(l, k, 1.0, &mut rng).map(|s| s.class_index))
            .collect::<Result<_>>()?;
        let alts: Vec<Image> = imgs
            .iter()
            .map(|img| make_alternative(img, &AlternativeSpec::for_height(alternative, img.height(), rng.next_u64())))
            .collect::<Result<_>>()?;
        let alt_refs: Vec<&Image> = alts.iter().collect();
        let x = Image::batch_tensor(&imgs, DType::F32, &dev)?;
        let a = Image::batch_tensor(&alt_refs, DType::F32, &dev)?;
        let mt = masker.forward(&x, &labels)?.masks.detach();
        let mf = masker.forward(&x, &fakes)?.masks.detach();
        let avt = to_f64_vec(&mt.flatten_from(1)?.mean(1)?)?;
        let avf = to_f64_vec(&mf.flatten_from(1)?.mean(1)?)?;
        av_t += avt.iter().sum::<f64>();
        av_f += avf.iter().sum::<f64>();
        let argmax_t = to_f64_vec(&mt.flatten_from(1)?.argmax(1)?.to_dtype(DType::F64)?)?;
        let argmax_f = to_f64_vec(&mf.flatten_from(1)?.argmax(1)?.to_dtype(DType::F64)?)?;
        differ += argmax_t.iter().zip(&argmax_f).filter(|(a, b)| a != b).count();
        let destroyed = apply_mask(&x, &mt.affine(-1.0, 1.0)?, &a)?;
        let both = Tensor::cat(&[&x, &destroyed], 0)?;
        let probs = probabilities(model, &both)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let m = chunk.len();
        for (i, &l) in labels.iter().enumerate() {
            p_full += probs[i][l];
            p_dest += probs[m + i][l];
        }
    }
    let n = data.len() as f64;
    Ok(MaskerDiagnostics {
        mean_av_true: av_t / n,
        mean_av_fake: av_f / n,
        mean_prob_full: p_full / n,
        mean_prob_destroyed: p_dest / n,
        class_sensitivity: differ as f64 / n,
        images: data.len(),
    })
}
