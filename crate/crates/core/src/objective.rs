//! The saliency objective: smoothness and area penalties on the mask, a
//! preservation term (the class must survive on the kept region) and a
//! destruction term (the class must vanish once the region is removed).
//!
//! Everything here is built from differentiable tensor ops, so the total
//! can be back-propagated to the mask (and from there to a masking model).

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::blackbox::{probabilities, Classifier};
use crate::error::{check_finite, contract, Result};
use crate::evidence::apply_mask;

/// Probabilities are clamped below at this value before `log` and `powf`.
pub const PROB_CLAMP: f64 = 1e-8;
/// Gate values are clamped into `[GATE_CLAMP, 1 - GATE_CLAMP]` for BCE.
pub const GATE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParams {
    /// Weight of the total variation term.
    pub lambda_tv: f64,
    /// Weight of the mean-mask (area) term.
    pub lambda_area: f64,
    /// Weight of the destruction term.
    pub lambda_destroy: f64,
    /// Exponent applied to the destroyed-image probability.
    pub destroy_power: f64,
    /// Probability of drawing a fake class selector during training.
    pub fake_prob: f64,
    /// Weight of the auxiliary embedding loss.
    pub aux_weight: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self {
            lambda_tv: 10.0,
            lambda_area: 1e-3,
            lambda_destroy: 5.0,
            destroy_power: 0.3,
            fake_prob: 0.3,
            aux_weight: 1.0,
        }
    }
}

impl ObjectiveParams {
    /// Weights for 32x32 desk-scale training. TV is a sum over pixels, so
    /// the smoothness weight shrinks with the pixel count, and the area term
    /// (a mean) carries the pressure toward small masks.
    pub fn desk() -> Self {
        Self { lambda_tv: 0.05, lambda_area: 3.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_tv", self.lambda_tv),
            ("lambda_area", self.lambda_area),
            ("lambda_destroy", self.lambda_destroy),
            ("destroy_power", self.destroy_power),
            ("aux_weight", self.aux_weight),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(crate::Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.fake_prob) {
            return Err(crate::Error::Config(format!("fake_prob must lie in [0, 1], got {}", self.fake_prob)));
        }
        Ok(())
    }
}

/// Sum of squared differences between horizontal and vertical neighbours,
/// reduced over the last two dimensions.
pub fn total_variation(mask: &Tensor) -> Result<Tensor> {
    let rank = mask.rank();
    if rank < 2 {
        return Err(contract("total_variation needs a mask with at least 2 dimensions"));
    }
    let (h, w) = (mask.dim(rank - 2)?, mask.dim(rank - 1)?);
    let mut tv = mask.zeros_like()?.sum(D::Minus1)?.sum(D::Minus1)?;
    if w > 1 {
        let dx = (mask.narrow(rank - 1, 1, w - 1)? - mask.narrow(rank - 1, 0, w - 1)?)?;
        tv = (tv + dx.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?)?;
    }
    if h > 1 {
        let dy = (mask.narrow(rank - 2, 1, h - 1)? - mask.narrow(rank - 2, 0, h - 1)?)?;
        tv = (tv + dy.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?)?;
    }
    Ok(tv)
}

/// Mean over the last two dimensions.
pub fn average_value(mask: &Tensor) -> Result<Tensor> {
    let rank = mask.rank();
    if rank < 2 || mask.dim(rank - 1)? == 0 || mask.dim(rank - 2)? == 0 {
        return Err(contract("average_value needs a non-empty 2-D mask"));
    }
    Ok(mask.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Per-sample objective terms, each shaped `(N,)`.
#[derive(Debug, Clone)]
pub struct ObjectiveTerms {
    pub tv: Tensor,
    pub av: Tensor,
    pub preserve_nll: Tensor,
    pub destroy: Tensor,
    pub total: Tensor,
}

/// Scalar view of the four terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub tv: f64,
    pub av: f64,
    pub preserve_nll: f64,
    pub destroy: f64,
    pub total: f64,
}

impl ObjectiveTerms {
    /// Batch means of every term, failing on any non-finite value.
    pub fn breakdown(&self) -> Result<ObjectiveBreakdown> {
        let mean = |name: &str, t: &Tensor| -> Result<f64> {
            let v = t.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?;
            check_finite(name, v)
        };
        Ok(ObjectiveBreakdown {
            tv: mean("tv", &self.tv)?,
            av: mean("av", &self.av)?,
            preserve_nll: mean("preserve_nll", &self.preserve_nll)?,
            destroy: mean("destroy", &self.destroy)?,
            total: mean("total", &self.total)?,
        })
    }
}

fn class_index(classes: &[usize], k: usize, device: &candle_core::Device) -> Result<Tensor> {
    if let Some(bad) = classes.iter().find(|&&c| c >= k) {
        return Err(contract(format!("class {bad} outside [0, {k})")));
    }
    let idx: Vec<u32> = classes.iter().map(|&c| c as u32).collect();
    Ok(Tensor::from_vec(idx, (classes.len(), 1), device)?)
}

/// Batched objective. `masks` is `(N, H, W)`, `x` and `alternatives` are
/// `(N, 3, H, W)`, `classes` has length `N`. The classifier is invoked once on
/// the stacked preserved and destroyed images (or only on the destroyed ones
/// when `include_preserve` is false, leaving that term at zero).
pub fn saliency_terms(
    masks: &Tensor,
    x: &Tensor,
    classes: &[usize],
    model: &dyn Classifier,
    params: &ObjectiveParams,
    alternatives: &Tensor,
    include_preserve: bool,
) -> Result<ObjectiveTerms> {
    let n = x.dim(0)?;
    if masks.rank() != 3 || masks.dim(0)? != n || classes.len() != n {
        return Err(contract(format!(
            "objective expects (N, H, W) masks and N classes for N = {n}, got masks {:?} and {} classes",
            masks.dims(),
            classes.len()
        )));
    }
    let tv = total_variation(masks)?;
    let av = average_value(masks)?;
    let destroyed = apply_mask(x, &masks.affine(-1.0, 1.0)?, alternatives)?;
    let idx = class_index(classes, model.num_classes(), x.device())?;

    let (preserve_nll, destroy_p) = if include_preserve {
        let preserved = apply_mask(x, masks, alternatives)?;
        let both = Tensor::cat(&[&preserved, &destroyed], 0)?;
        let probs = probabilities(model, &both)?.to_dtype(x.dtype())?;
        let idx2 = Tensor::cat(&[&idx, &idx], 0)?;
        let fc = probs.gather(&idx2, 1)?.squeeze(1)?.maximum(PROB_CLAMP)?;
        (fc.narrow(0, 0, n)?.log()?.neg()?, fc.narrow(0, n, n)?)
    } else {
        let probs = probabilities(model, &destroyed)?.to_dtype(x.dtype())?;
        let fc = probs.gather(&idx, 1)?.squeeze(1)?.maximum(PROB_CLAMP)?;
        (fc.zeros_like()?, fc)
    };
    let destroy = destroy_p.powf(params.destroy_power)?;
    let total = ((tv.affine(params.lambda_tv, 0.0)? + av.affine(params.lambda_area, 0.0)?)?
        + (&preserve_nll + destroy.affine(params.lambda_destroy, 0.0)?)?)?;
    Ok(ObjectiveTerms { tv, av, preserve_nll, destroy, total })
}

/// Single-image objective: `mask` is `(H, W)`, `x` and `alternative` are
/// `(3, H, W)`. Returns the differentiable scalar total and its breakdown.
pub fn saliency_loss(
    mask: &Tensor,
    x: &Tensor,
    class: usize,
    model: &dyn Classifier,
    params: &ObjectiveParams,
    alternative: &Tensor,
) -> Result<(Tensor, ObjectiveBreakdown)> {
    if mask.rank() != 2 || x.rank() != 3 {
        return Err(contract("saliency_loss expects an (H, W) mask and a (3, H, W) image"));
    }
    let terms = saliency_terms(
        &mask.unsqueeze(0)?,
        &x.unsqueeze(0)?,
        &[class],
        model,
        params,
        &alternative.unsqueeze(0)?,
        true,
    )?;
    let breakdown = terms.breakdown()?;
    Ok((terms.total.squeeze(0)?, breakdown))
}

/// Area-only loss used for fake selectors: `lambda_area * AV(M)`, per sample.
pub fn fake_label_loss(masks: &Tensor, params: &ObjectiveParams) -> Result<Tensor> {
    Ok(average_value(masks)?.affine(params.lambda_area, 0.0)?)
}

/// Binary cross-entropy on the spatial maximum of the feature-filter gate:
/// target 1 for real selectors, 0 for fake ones. `gates` is `(N, H', W')`;
/// returns `(N,)` weighted losses.
pub fn embedding_aux_loss(gates: &Tensor, is_fake: &[bool], weight: f64) -> Result<Tensor> {
    let n = gates.dim(0)?;
    if is_fake.len() != n {
        return Err(contract(format!("{} flags for {n} gate maps", is_fake.len())));
    }
    let peak = gates.flatten_from(1)?.max(1)?.clamp(GATE_CLAMP, 1.0 - GATE_CLAMP)?;
    let target: Vec<f64> = is_fake.iter().map(|&f| if f { 0.0 } else { 1.0 }).collect();
    let target = Tensor::from_vec(target, n, gates.device())?.to_dtype(gates.dtype())?;
    // -(t log g + (1 - t) log(1 - g))
    let pos = (&target * peak.log()?)?;
    let neg = (target.affine(-1.0, 1.0)? * peak.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.affine(-weight, 0.0)?)
}
