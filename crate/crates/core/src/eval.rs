//! Crop-based saliency metric, weakly supervised localization, and report
//! assembly.

use serde::{Deserialize, Serialize};

use crate::blackbox::{classify_chunked, Classifier};
use crate::datasets::LabeledImageSet;
use crate::error::{contract, Result};
use crate::image::{Image, Mask};

/// Minimum area fraction used by the saliency metric.
pub const AREA_FLOOR: f64 = 0.05;
/// Probabilities are clamped below at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;
/// Default threshold for both salient crops and localization boxes.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Inclusive pixel rectangle, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 > x1 || y0 > y1 {
            return Err(contract(format!("degenerate box ({x0},{y0},{x1},{y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Whole-image box.
    pub fn full(height: usize, width: usize) -> Self {
        Self { x0: 0, y0: 0, x1: width - 1, y1: height - 1 }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x0 > self.x1 || self.y0 > self.y1 || self.x1 >= width || self.y1 >= height {
            return Err(contract(format!("box {self:?} outside a {width}x{height} image")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    /// Inclusive pixel count.
    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn area_fraction(&self, height: usize, width: usize) -> f64 {
        self.area() as f64 / (height * width) as f64
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

/// Intersection over union with inclusive pixel counting.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix0 = a.x0.max(b.x0);
    let iy0 = a.y0.max(b.y0);
    let ix1 = a.x1.min(b.x1);
    let iy1 = a.y1.min(b.y1);
    if ix0 > ix1 || iy0 > iy1 {
        return 0.0;
    }
    let inter = (ix1 - ix0 + 1) * (iy1 - iy0 + 1);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Tightest box around every pixel with value strictly above `threshold`.
pub fn salient_crop(mask: &Mask, threshold: f64) -> Option<BBox> {
    let (h, w) = mask.dims();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        let row = &mask.data()[y * w..(y + 1) * w];
        let first = row.iter().position(|&v| v as f64 > threshold);
        if let Some(first) = first {
            let last = row.iter().rposition(|&v| v as f64 > threshold).unwrap_or(first);
            x0 = x0.min(first);
            x1 = x1.max(last);
            y0 = y0.min(y);
            y1 = y;
        }
    }
    (x0 != usize::MAX).then_some(BBox { x0, y0, x1, y1 })
}

/// `log(max(a, 0.05)) - log(p)`, with `p` clamped below at 1e-8.
pub fn saliency_metric(area_fraction: f64, prob: f64) -> f64 {
    area_fraction.max(AREA_FLOOR).ln() - prob.max(PROB_FLOOR).ln()
}

/// Metric details for one crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub crop: BBox,
    pub area_fraction: f64,
    pub clamped_area: f64,
    pub crop_prob: f64,
    pub metric: f64,
    pub full_image_prob: f64,
}

impl SaliencyReport {
    pub fn new(crop: BBox, image_dims: (usize, usize), crop_prob: f64, full_image_prob: f64) -> Self {
        let a = crop.area_fraction(image_dims.0, image_dims.1);
        Self {
            crop,
            area_fraction: a,
            clamped_area: a.max(AREA_FLOOR),
            crop_prob,
            metric: saliency_metric(a, crop_prob),
            full_image_prob,
        }
    }
}

/// What a saliency method returns for an (image, class) query.
#[derive(Debug, Clone, PartialEq)]
pub enum Saliency {
    Mask(Mask),
    Boxes(Vec<BBox>),
}

/// Anything that explains an image for a class.
pub trait SaliencyProducer {
    fn name(&self) -> &str;

    /// `index` is the image's position in the evaluated set, for producers
    /// (such as ground-truth boxes) that look data up by position.
    fn produce(&self, image: &Image, class: usize, index: usize) -> Result<Saliency>;
}

/// Turns a producer output into evaluation boxes: masks go through
/// [`salient_crop`], boxes are used as given.
pub fn boxes_for(saliency: &Saliency, threshold: f64) -> Vec<Option<BBox>> {
    match saliency {
        Saliency::Mask(m) => vec![salient_crop(m, threshold)],
        Saliency::Boxes(b) => b.iter().copied().map(Some).collect(),
    }
}

/// Crops `image` to `crop` and resizes to the classifier input, ignoring aspect ratio.
pub fn crop_for_classifier(image: &Image, crop: &BBox, input: (usize, usize)) -> Result<Image> {
    Ok(image.crop(crop.x0, crop.y0, crop.x1, crop.y1)?.resize(input.0, input.1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSaliency {
    pub index: usize,
    pub class: usize,
    /// One report per evaluated box.
    pub crops: Vec<SaliencyReport>,
    /// Mean of the per-box metrics.
    pub metric: f64,
    /// Whether the producer yielded no crop and the whole image was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencySummary {
    pub producer: String,
    pub threshold: f64,
    pub mean_metric: f64,
    pub images: Vec<ImageSaliency>,
}

/// Mean saliency metric of a producer over a dataset, using each image's label
/// as the evaluation class.
pub fn evaluate_saliency(
    producer: &dyn SaliencyProducer,
    data: &LabeledImageSet,
    model: &dyn Classifier,
    threshold: f64,
) -> Result<SaliencySummary> {
    data.validate()?;
    let dims = data.image_size().ok_or_else(|| contract("cannot evaluate an empty set"))?;
    let input = model.input_size();
    if data.num_classes() != model.num_classes() {
        return Err(contract(format!(
            "dataset has {} classes, classifier has {}",
            data.num_classes(),
            model.num_classes()
        )));
    }

    // Gather every crop, then classify in chunks.
    let mut crops: Vec<Image> = Vec::new();
    let mut plan: Vec<(usize, Vec<BBox>, bool)> = Vec::new();
    for (i, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let out = producer.produce(img, label, i)?;
        let found: Vec<BBox> = boxes_for(&out, threshold).into_iter().flatten().collect();
        let fallback = found.is_empty();
        let boxes = if fallback { vec![BBox::full(dims.0, dims.1)] } else { found };
        for b in &boxes {
            b.validate(dims.0, dims.1)?;
            crops.push(crop_for_classifier(img, b, input)?);
        }
        plan.push((label, boxes, fallback));
    }
    let full: Vec<Image> = data.images.iter().map(|im| im.resize(input.0, input.1)).collect();
    let full_probs = classify_chunked(model, &full.iter().collect::<Vec<_>>(), 256)?;
    let crop_probs = classify_chunked(model, &crops.iter().collect::<Vec<_>>(), 256)?;

    let mut next = 0;
    let mut images = Vec::with_capacity(plan.len());
    for (index, (class, boxes, fallback)) in plan.into_iter().enumerate() {
        let full_p = full_probs[index].get(class);
        let crops: Vec<SaliencyReport> = boxes
            .iter()
            .map(|b| {
                let r = SaliencyReport::new(*b, dims, crop_probs[next].get(class), full_p);
                next += 1;
                r
            })
            .collect();
        let metric = crops.iter().map(|r| r.metric).sum::<f64>() / crops.len() as f64;
        images.push(ImageSaliency { index, class, crops, metric, fallback });
    }
    let mean_metric = images.iter().map(|r| r.metric).sum::<f64>() / images.len() as f64;
    Ok(SaliencySummary { producer: producer.name().to_string(), threshold, mean_metric, images })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLocalization {
    pub index: usize,
    pub predicted: Option<BBox>,
    pub best_iou: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub producer: String,
    pub threshold: f64,
    pub error_rate: f64,
    pub images: Vec<ImageLocalization>,
}

/// Fraction of images whose predicted box fails to reach IoU > 0.5 with any
/// ground-truth box. A missing crop counts as an error.
pub fn localization_error(
    producer: &dyn SaliencyProducer,
    data: &LabeledImageSet,
    threshold: f64,
) -> Result<LocalizationSummary> {
    data.validate()?;
    let gt = data.boxes.as_ref().ok_or_else(|| contract("localization needs ground-truth boxes"))?;
    if data.is_empty() {
        return Err(contract("cannot evaluate an empty set"));
    }
    let mut images = Vec::with_capacity(data.len());
    for (i, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        if gt[i].is_empty() {
            return Err(contract(format!("image {i} has no ground-truth box")));
        }
        let out = producer.produce(img, label, i)?;
        let mut best: (Option<BBox>, f64) = (None, 0.0);
        for b in boxes_for(&out, threshold).into_iter().flatten() {
            let score = gt[i].iter().map(|g| iou(&b, g)).fold(0.0, f64::max);
            if best.0.is_none() || score > best.1 {
                best = (Some(b), score);
            }
        }
        images.push(ImageLocalization {
            index: i,
            predicted: best.0,
            best_iou: best.1,
            success: best.0.is_some() && best.1 > 0.5,
        });
    }
    let errors = images.iter().filter(|r| !r.success).count();
    Ok(LocalizationSummary {
        producer: producer.name().to_string(),
        threshold,
        error_rate: errors as f64 / images.len() as f64,
        images,
    })
}

/// Report file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub producer: String,
    pub threshold: f64,
    pub seed: u64,
    pub config: serde_json::Value,
    pub saliency: Option<SaliencySummary>,
    pub localization: Option<LocalizationSummary>,
}

impl EvaluationReport {
    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Producer returning the ground-truth boxes stored in a dataset.
pub struct GroundTruthBoxes<'a> {
    pub boxes: &'a [Vec<BBox>],
}

impl SaliencyProducer for GroundTruthBoxes<'_> {
    fn name(&self) -> &str {
        "ground_truth"
    }

    fn produce(&self, _image: &Image, _class: usize, index: usize) -> Result<Saliency> {
        let b = self.boxes.get(index).ok_or_else(|| contract(format!("no boxes for image {index}")))?;
        Ok(Saliency::Boxes(b.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_crop(mask: &Mask, t: f64) -> Option<BBox> {
        let mut pts = Vec::new();
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(y, x) as f64 > t {
                    pts.push((x, y));
                }
            }
        }
        if pts.is_empty() {
            return None;
        }
        Some(BBox {
            x0: pts.iter().map(|p| p.0).min().unwrap(),
            y0: pts.iter().map(|p| p.1).min().unwrap(),
            x1: pts.iter().map(|p| p.0).max().unwrap(),
            y1: pts.iter().map(|p| p.1).max().unwrap(),
        })
    }

    fn brute_force_iou(a: &BBox, b: &BBox) -> f64 {
        let (mut inter, mut union) = (0, 0);
        for y in 0..64 {
            for x in 0..64 {
                let (ia, ib) = (a.contains(x, y), b.contains(x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn crop_of_empty_mask_is_none() {
        assert_eq!(salient_crop(&Mask::filled(8, 8, 0.0), 0.5), None);
    }

    #[test]
    fn crop_of_single_pixel_is_degenerate_box() {
        let mut m = Mask::filled(10, 10, 0.0);
        m.set(4, 7, 0.9);
        assert_eq!(salient_crop(&m, 0.5), Some(BBox { x0: 7, y0: 4, x1: 7, y1: 4 }));
    }

    #[test]
    fn crop_of_rectangle_matches_pixel_scan() {
        let mut m = Mask::filled(10, 10, 0.1);
        for y in 2..=5 {
            for x in 3..=7 {
                m.set(y, x, 0.8);
            }
        }
        let expected = brute_force_crop(&m, 0.5);
        assert_eq!(expected, Some(BBox { x0: 3, y0: 2, x1: 7, y1: 5 }));
        assert_eq!(salient_crop(&m, 0.5), expected);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(saliency_metric(1.0, 1.0), 0.0);
        assert!((saliency_metric(0.25, 0.5) - (-0.6931471805599453)).abs() < 1e-9);
        assert!((saliency_metric(0.01, 1.0) - (-2.995732273553991)).abs() < 1e-9);
    }

    #[test]
    fn iou_examples() {
        let a = BBox { x0: 0, y0: 0, x1: 9, y1: 9 };
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox { x0: 20, y0: 20, x1: 25, y1: 25 }), 0.0);
        let b = BBox { x0: 5, y0: 0, x1: 14, y1: 9 };
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b), brute_force_iou(&a, &b));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0usize..64, 0usize..64, 0usize..64, 0usize..64).prop_map(|(a, b, c, d)| BBox {
            x0: a.min(c),
            x1: a.max(c),
            y0: b.min(d),
            y1: b.max(d),
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_bounded_and_reflexive(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn salient_crop_matches_scan(data in proptest::collection::vec(0.0f32..1.0, 12 * 9), t in 0.05f64..0.95) {
            let m = Mask::new(9, 12, data).unwrap();
            prop_assert_eq!(salient_crop(&m, t), brute_force_crop(&m, t));
        }

        #[test]
        fn metric_is_monotone(a in 0.05f64..1.0, da in 0.0f64..0.5, p in 1e-6f64..1.0, dp in 0.0f64..0.5) {
            let a2 = (a + da).min(1.0);
            let p2 = (p + dp).min(1.0);
            prop_assert!(saliency_metric(a2, p) >= saliency_metric(a, p));
            prop_assert!(saliency_metric(a, p2) <= saliency_metric(a, p));
        }
    }

    #[test]
    fn box_validation() {
        assert!(BBox::new(3, 0, 2, 0).is_err());
        assert!(BBox { x0: 0, y0: 0, x1: 8, y1: 2 }.validate(4, 8).is_err());
        assert_eq!(BBox::full(4, 8).area(), 32);
    }
}
