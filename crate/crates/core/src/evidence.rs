//! Evidence removal: blending an image with an alternative image under a mask,
//! and generating randomized alternatives (strong blur or noisy flat color).

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::image::{Image, Mask};

/// Blur strength at the 224-pixel reference resolution.
pub const REFERENCE_BLUR_SIGMA: f64 = 10.0;
pub const REFERENCE_SIZE: f64 = 224.0;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlternativeMode {
    Blur,
    ColorNoise,
    /// Blur or color noise, chosen by a fair coin.
    #[serde(rename = "random_50_50")]
    Random5050,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlternativeSpec {
    pub mode: AlternativeMode,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl AlternativeSpec {
    /// Blur sigma scaled from 10 px at 224 px to the given image height.
    pub fn for_height(mode: AlternativeMode, height: usize, seed: u64) -> Self {
        Self {
            mode,
            blur_sigma: REFERENCE_BLUR_SIGMA * height as f64 / REFERENCE_SIZE,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma > 0.0) {
            return Err(Error::Config(format!("blur_sigma must be > 0, got {}", self.blur_sigma)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Reshapes `mask` so it broadcasts against `x` over channels.
/// `x` is `(3, H, W)` or `(N, 3, H, W)`; `mask` is `(H, W)`, `(N, H, W)` or
/// `(N, 1, H, W)`.
fn broadcastable_mask(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let xd = x.dims();
    let md = mask.dims();
    let m = match (xd.len(), md.len()) {
        (3, 2) => mask.unsqueeze(0)?,
        (4, 3) => mask.unsqueeze(1)?,
        (4, 4) if md[1] == 1 => mask.clone(),
        _ => return Err(contract(format!("mask shape {md:?} incompatible with image shape {xd:?}"))),
    };
    let n = xd.len();
    let mdims = m.dims();
    if mdims[n - 2..] != xd[n - 2..] || (n == 4 && mdims[0] != xd[0]) {
        return Err(contract(format!("mask shape {md:?} incompatible with image shape {xd:?}")));
    }
    Ok(m.to_dtype(x.dtype())?)
}

/// `X * M`, the mask broadcast over the channels.
pub fn apply_mask_simple(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = broadcastable_mask(x, mask)?;
    Ok(x.broadcast_mul(&m)?)
}

/// `X * M + A * (1 - M)`.
pub fn apply_mask(x: &Tensor, mask: &Tensor, alternative: &Tensor) -> Result<Tensor> {
    if x.dims() != alternative.dims() {
        return Err(contract(format!(
            "image shape {:?} differs from alternative shape {:?}",
            x.dims(),
            alternative.dims()
        )));
    }
    let m = broadcastable_mask(x, mask)?;
    let keep = x.broadcast_mul(&m)?;
    let fill = alternative.broadcast_mul(&m.affine(-1.0, 1.0)?)?;
    Ok((keep + fill)?)
}

/// Host-side `X * M + A * (1 - M)`.
pub fn apply_mask_image(x: &Image, mask: &Mask, alternative: &Image) -> Result<Image> {
    if x.dims() != mask.dims() || x.dims() != alternative.dims() {
        return Err(contract("image, mask and alternative sizes differ"));
    }
    let plane = mask.data().len();
    let data = x
        .data()
        .iter()
        .zip(alternative.data())
        .enumerate()
        .map(|(i, (&xv, &av))| {
            let m = mask.data()[i % plane];
            xv * m + av * (1.0 - m)
        })
        .collect();
    Image::new(x.height(), x.width(), data)
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), valid for
/// any offset.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur per channel, kernel truncated at 4 sigma and
/// normalized, symmetric-reflect padding.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("blur sigma must be > 0, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = image.dims();
    let mut out = image.clone();
    let mut tmp = vec![0f64; h * w];
    for c in 0..3 {
        let src = image.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xi = reflect(x as isize + k as isize - radius, w);
                    acc += kv * src[y * w + xi] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yi = reflect(y as isize + k as isize - radius, h);
                    acc += kv * tmp[yi * w + x];
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Uniform random color plus i.i.d. Gaussian noise, clipped to `[0, 1]`.
fn color_noise(height: usize, width: usize, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Result<Image> {
    let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let mut img = Image::filled(height, width, color);
    if noise_sigma > 0.0 {
        let dist = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in img.data_mut() {
            *v = (*v + dist.sample(rng) as f32).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

/// Resolves `Random5050` to a concrete mode using `spec.seed`.
pub fn resolve_mode(spec: &AlternativeSpec) -> AlternativeMode {
    match spec.mode {
        AlternativeMode::Random5050 => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            if rng.random_bool(0.5) {
                AlternativeMode::Blur
            } else {
                AlternativeMode::ColorNoise
            }
        }
        m => m,
    }
}

/// Builds the alternative image `A` for `x`. Deterministic in `spec.seed`.
pub fn make_alternative(x: &Image, spec: &AlternativeSpec) -> Result<Image> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mode = match spec.mode {
        AlternativeMode::Random5050 => {
            if rng.random_bool(0.5) {
                AlternativeMode::Blur
            } else {
                AlternativeMode::ColorNoise
            }
        }
        m => m,
    };
    match mode {
        AlternativeMode::Blur => gaussian_blur(x, spec.blur_sigma),
        _ => color_noise(x.height(), x.width(), spec.noise_sigma, &mut rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        crate::nn::to_f64_vec(t).unwrap()
    }

    #[test]
    fn simple_mask_examples() {
        let x = t(vec![0.8; 12], &[3, 2, 2]);
        assert_eq!(vals(&apply_mask_simple(&x, &t(vec![1.0; 4], &[2, 2])).unwrap()), vec![0.8; 12]);
        assert_eq!(vals(&apply_mask_simple(&x, &t(vec![0.0; 4], &[2, 2])).unwrap()), vec![0.0; 12]);
        let half = vals(&apply_mask_simple(&x, &t(vec![0.5; 4], &[2, 2])).unwrap());
        assert!(half.iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn blend_examples() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let a: Vec<f64> = (0..12).map(|i| 1.0 - i as f64 / 24.0).collect();
        let (xt, at) = (t(x.clone(), &[3, 2, 2]), t(a.clone(), &[3, 2, 2]));
        assert_eq!(vals(&apply_mask(&xt, &t(vec![1.0; 4], &[2, 2]), &at).unwrap()), x);
        assert_eq!(vals(&apply_mask(&xt, &t(vec![0.0; 4], &[2, 2]), &at).unwrap()), a);
        let mid = vals(&apply_mask(&xt, &t(vec![0.5; 4], &[2, 2]), &at).unwrap());
        for i in 0..12 {
            assert!((mid[i] - (x[i] + a[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = t(vec![0.0; 12], &[3, 2, 2]);
        assert!(apply_mask_simple(&x, &t(vec![0.0; 6], &[2, 3])).is_err());
        assert!(apply_mask(&x, &t(vec![0.0; 4], &[2, 2]), &t(vec![0.0; 3], &[3, 1, 1])).is_err());
    }

    #[test]
    fn batched_masks_broadcast_over_channels() {
        let x = Tensor::ones((2, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let m = Tensor::full(0.25, (2, 4, 4), &Device::Cpu).unwrap();
        let e = apply_mask_simple(&x, &m).unwrap();
        assert_eq!(e.dims(), &[2, 3, 4, 4]);
        assert!(vals(&e).iter().all(|&v| v == 0.25));
    }

    proptest! {
        #[test]
        fn blend_is_affine_in_the_mask(
            x in proptest::collection::vec(0.0f64..1.0, 27),
            a in proptest::collection::vec(0.0f64..1.0, 27),
            m1 in proptest::collection::vec(0.0f64..1.0, 9),
            m2 in proptest::collection::vec(0.0f64..1.0, 9),
            alpha in 0.0f64..1.0,
        ) {
            let (xt, at) = (t(x, &[3, 3, 3]), t(a, &[3, 3, 3]));
            let mix: Vec<f64> = m1.iter().zip(&m2).map(|(p, q)| alpha * p + (1.0 - alpha) * q).collect();
            let lhs = vals(&apply_mask(&xt, &t(mix, &[3, 3]), &at).unwrap());
            let r1 = vals(&apply_mask(&xt, &t(m1, &[3, 3]), &at).unwrap());
            let r2 = vals(&apply_mask(&xt, &t(m2, &[3, 3]), &at).unwrap());
            for i in 0..27 {
                prop_assert!((lhs[i] - (alpha * r1[i] + (1.0 - alpha) * r2[i])).abs() <= 1e-9);
                prop_assert!((0.0..=1.0).contains(&lhs[i]));
            }
        }

        #[test]
        fn blur_preserves_channel_means(data in proptest::collection::vec(0.0f32..1.0, 3 * 9 * 7), sigma in 0.3f64..12.0) {
            let img = Image::new(9, 7, data).unwrap();
            let blurred = gaussian_blur(&img, sigma).unwrap();
            let (a, b) = (img.channel_means(), blurred.channel_means());
            for c in 0..3 {
                prop_assert!((a[c] - b[c]).abs() < 1e-6, "channel {}: {} vs {}", c, a[c], b[c]);
            }
        }
    }

    #[test]
    fn blur_fixes_constant_images() {
        let img = Image::filled(16, 16, [0.2, 0.5, 0.9]);
        let spec = AlternativeSpec::for_height(AlternativeMode::Blur, 224, 0);
        let out = make_alternative(&img, &spec).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn noiseless_color_is_spatially_constant() {
        let img = Image::filled(8, 8, [0.0; 3]);
        let spec = AlternativeSpec {
            mode: AlternativeMode::ColorNoise,
            blur_sigma: 1.0,
            noise_sigma: 0.0,
            seed: 4,
        };
        let out = make_alternative(&img, &spec).unwrap();
        for c in 0..3 {
            let p = out.plane(c);
            assert!(p.iter().all(|&v| v == p[0]));
        }
    }

    #[test]
    fn noise_stays_in_unit_range_and_is_seeded() {
        let img = Image::filled(8, 8, [0.0; 3]);
        let spec = AlternativeSpec { mode: AlternativeMode::ColorNoise, blur_sigma: 1.0, noise_sigma: 0.5, seed: 9 };
        let a = make_alternative(&img, &spec).unwrap();
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, make_alternative(&img, &spec).unwrap());
    }

    #[test]
    fn random_mode_is_a_fair_coin() {
        let blur = (0..10_000u64)
            .filter(|&s| {
                let spec = AlternativeSpec::for_height(AlternativeMode::Random5050, 32, s);
                resolve_mode(&spec) == AlternativeMode::Blur
            })
            .count();
        let frac = blur as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "blur fraction {frac}");
    }

    #[test]
    fn random_mode_matches_resolved_mode() {
        let img = Image::new(8, 8, (0..192).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        for s in 0..20 {
            let spec = AlternativeSpec::for_height(AlternativeMode::Random5050, 8, s);
            let concrete = AlternativeSpec { mode: resolve_mode(&spec), ..spec };
            if concrete.mode == AlternativeMode::Blur {
                assert_eq!(make_alternative(&img, &spec).unwrap(), make_alternative(&img, &concrete).unwrap());
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let img = Image::filled(4, 4, [0.0; 3]);
        let spec = AlternativeSpec { mode: AlternativeMode::Blur, blur_sigma: 0.0, noise_sigma: 0.1, seed: 0 };
        assert!(make_alternative(&img, &spec).is_err());
    }

    #[test]
    fn reflect_is_symmetric() {
        let idx: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
    }
}
