//! Training-time random augmentation and the fixed six-way test-time set:
//! identity, +-30 degree rotations, both flips, and unsharp-mask sharpening.

use rand::Rng;
use thiserror::Error;

use crate::image::{LabeledImage, PixelGrid};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("sharpen sigma must be positive (got {0})")]
    NonPositiveSigma(f64),
    #[error("sharpen amount must be non-negative (got {0})")]
    NegativeAmount(f64),
    #[error("augmentation probability must lie in [0,1] (got {0})")]
    BadProbability(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Augmentation {
    Identity,
    RotatePlus30,
    FlipVertical,
    Sharpen,
    FlipHorizontal,
    RotateMinus30,
}

/// The canonical test-time set, in the order embeddings are concatenated.
pub const TTA_SET: [Augmentation; 6] = [
    Augmentation::Identity,
    Augmentation::RotatePlus30,
    Augmentation::FlipVertical,
    Augmentation::Sharpen,
    Augmentation::FlipHorizontal,
    Augmentation::RotateMinus30,
];

/// The five non-identity kinds the training-time sampler draws from.
const TRAIN_KINDS: [Augmentation; 5] = [
    Augmentation::RotatePlus30,
    Augmentation::FlipVertical,
    Augmentation::Sharpen,
    Augmentation::FlipHorizontal,
    Augmentation::RotateMinus30,
];

/// Unsharp-mask and train-time sampling parameters.
#[derive(Debug, Clone)]
pub struct AugmentParams {
    sigma: f64,
    amount: f64,
    p_train: f64,
}

impl AugmentParams {
    pub fn new(sigma: f64, amount: f64, p_train: f64) -> Result<Self, AugmentError> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(AugmentError::NonPositiveSigma(sigma));
        }
        if amount < 0.0 || !amount.is_finite() {
            return Err(AugmentError::NegativeAmount(amount));
        }
        if !(0.0..=1.0).contains(&p_train) {
            return Err(AugmentError::BadProbability(p_train));
        }
        Ok(Self {
            sigma,
            amount,
            p_train,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn amount(&self) -> f64 {
        self.amount
    }

    pub fn p_train(&self) -> f64 {
        self.p_train
    }
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            amount: 1.0,
            p_train: 0.5,
        }
    }
}

/// Applies one augmentation. Resolution, class id, and source id are
/// preserved; all outputs stay in [0,1].
pub fn apply(aug: Augmentation, image: &LabeledImage, params: &AugmentParams) -> LabeledImage {
    match aug {
        Augmentation::Identity => image.clone(),
        Augmentation::RotatePlus30 => rotate(image, 30.0),
        Augmentation::RotateMinus30 => rotate(image, -30.0),
        Augmentation::FlipVertical => flip_vertical(image),
        Augmentation::FlipHorizontal => flip_horizontal(image),
        Augmentation::Sharpen => image.with_pixels(unsharp_mask(
            image.pixels(),
            params.sigma,
            params.amount,
        )),
    }
}

/// Rotation about the image center by `degrees`, bilinear interpolation,
/// zero fill outside the source.
pub fn rotate(image: &LabeledImage, degrees: f64) -> LabeledImage {
    let grid = image.pixels();
    let n = grid.height();
    let center = (n as f64 - 1.0) / 2.0;
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut data = Vec::with_capacity(n * n);
    for row in 0..n {
        let dy = row as f64 - center;
        for col in 0..n {
            let dx = col as f64 - center;
            // Inverse mapping: where did this output pixel come from?
            let src_c = cos * dx + sin * dy + center;
            let src_r = -sin * dx + cos * dy + center;
            data.push(grid.sample_bilinear(src_r, src_c));
        }
    }
    image.with_pixels(PixelGrid::from_raw(n, n, data))
}

/// Exact row-reversal permutation.
pub fn flip_vertical(image: &LabeledImage) -> LabeledImage {
    let grid = image.pixels();
    let (h, w) = (grid.height(), grid.width());
    let mut data = Vec::with_capacity(h * w);
    for row in (0..h).rev() {
        for col in 0..w {
            data.push(grid.get(row, col));
        }
    }
    image.with_pixels(PixelGrid::from_raw(h, w, data))
}

/// Exact column-reversal permutation.
pub fn flip_horizontal(image: &LabeledImage) -> LabeledImage {
    let grid = image.pixels();
    let (h, w) = (grid.height(), grid.width());
    let mut data = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in (0..w).rev() {
            data.push(grid.get(row, col));
        }
    }
    image.with_pixels(PixelGrid::from_raw(h, w, data))
}

/// clamp(image + amount * (image - gaussian_blur(image, sigma)), 0, 1)
pub fn sharpen(image: &LabeledImage, sigma: f64, amount: f64) -> Result<LabeledImage, AugmentError> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(AugmentError::NonPositiveSigma(sigma));
    }
    if amount < 0.0 || !amount.is_finite() {
        return Err(AugmentError::NegativeAmount(amount));
    }
    Ok(image.with_pixels(unsharp_mask(image.pixels(), sigma, amount)))
}

fn unsharp_mask(grid: &PixelGrid, sigma: f64, amount: f64) -> PixelGrid {
    let blurred = gaussian_blur(grid, sigma);
    let data: Vec<f64> = grid
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(&v, &b)| (v + amount * (v - b)).clamp(0.0, 1.0))
        .collect();
    PixelGrid::from_raw(grid.height(), grid.width(), data)
}

/// Normalized 1-D Gaussian kernel truncated at 3*sigma.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in 0..=(2 * radius) {
        let x = i as f64 - radius as f64;
        kernel.push((-x * x / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    kernel
}

/// Separable Gaussian blur with replicate-edge handling, so constant images
/// stay exactly constant.
pub(crate) fn gaussian_blur(grid: &PixelGrid, sigma: f64) -> PixelGrid {
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let (h, w) = (grid.height(), grid.width());

    let mut rows = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let cc = (c + i).saturating_sub(radius).min(w - 1);
                acc += k * grid.get(r, cc);
            }
            rows[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let rr = (r + i).saturating_sub(radius).min(h - 1);
                acc += k * rows[rr * w + c];
            }
            // Rounding can push a hair past the endpoints.
            out[r * w + c] = acc.clamp(0.0, 1.0);
        }
    }
    PixelGrid::from_raw(h, w, out)
}

/// With probability `p_train` applies one augmentation drawn uniformly from
/// the five non-identity kinds; otherwise returns the image unchanged.
pub fn random_train_augment<R: Rng>(
    image: &LabeledImage,
    params: &AugmentParams,
    rng: &mut R,
) -> LabeledImage {
    if rng.gen::<f64>() < params.p_train {
        let kind = TRAIN_KINDS[rng.gen_range(0..TRAIN_KINDS.len())];
        apply(kind, image, params)
    } else {
        image.clone()
    }
}

/// The six canonical augmentations in canonical order; element 0 is the
/// unmodified image.
pub fn tta_set(image: &LabeledImage, params: &AugmentParams) -> Vec<LabeledImage> {
    TTA_SET.iter().map(|&a| apply(a, image, params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn sample_image() -> LabeledImage {
        let ds = generate_synthetic(2, 2, 32, 5).unwrap();
        ds.images()[0].clone()
    }

    fn max_abs_diff(a: &LabeledImage, b: &LabeledImage) -> f64 {
        a.pixels()
            .data()
            .iter()
            .zip(b.pixels().data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_is_bit_identical() {
        let img = sample_image();
        let out = apply(Augmentation::Identity, &img, &AugmentParams::default());
        assert_eq!(img, out);
    }

    #[test]
    fn flips_are_involutions() {
        let img = sample_image();
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(flip_vertical(&flip_vertical(&img)), img);
    }

    #[test]
    fn flips_permute_pixels_exactly() {
        let img = sample_image();
        let mut original: Vec<u64> = img.pixels().data().iter().map(|v| v.to_bits()).collect();
        let mut flipped: Vec<u64> = flip_vertical(&img)
            .pixels()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        original.sort_unstable();
        flipped.sort_unstable();
        assert_eq!(original, flipped);
    }

    #[test]
    fn rotation_roundtrip_error_is_small() {
        // Interpolation forbids exactness. Measured on a smooth image, away
        // from the borders the corners rotate through.
        let n = 64usize;
        let data: Vec<f64> = (0..n * n)
            .map(|i| {
                let (r, c) = (i / n, i % n);
                let x = c as f64 * 2.0 * std::f64::consts::PI / n as f64;
                let y = r as f64 * 2.0 * std::f64::consts::PI / n as f64;
                0.5 + 0.4 * x.sin() * y.cos()
            })
            .collect();
        let img =
            LabeledImage::new(PixelGrid::new(n, n, data).unwrap(), "c", "c/0").unwrap();
        let back = rotate(&rotate(&img, 30.0), -30.0);
        let center = (n as f64 - 1.0) / 2.0;
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in 0..n {
                let d = ((r as f64 - center).powi(2) + (c as f64 - center).powi(2)).sqrt();
                if d < 0.47 * n as f64 {
                    let diff = (img.pixels().get(r, c) - back.pixels().get(r, c)).abs();
                    worst = worst.max(diff);
                }
            }
        }
        assert!(worst < 0.1, "roundtrip error {worst}");
        assert!(worst > 0.0, "roundtrip should not be exact");
    }

    #[test]
    fn rotation_preserves_resolution_and_range() {
        let img = sample_image();
        let out = rotate(&img, 30.0);
        assert_eq!(out.resolution(), img.resolution());
        assert!(out.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(max_abs_diff(&img, &out) > 0.0);
    }

    #[test]
    fn sharpen_constant_image_is_fixed_point() {
        let grid = PixelGrid::new(8, 8, vec![0.42; 64]).unwrap();
        let img = LabeledImage::new(grid, "c", "c/0").unwrap();
        let out = sharpen(&img, 1.0, 1.0).unwrap();
        assert!(max_abs_diff(&img, &out) < 1e-12);
    }

    #[test]
    fn sharpen_amount_zero_is_identity() {
        let img = sample_image();
        let out = sharpen(&img, 1.0, 0.0).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn sharpen_rejects_bad_sigma() {
        let img = sample_image();
        assert!(matches!(
            sharpen(&img, 0.0, 1.0),
            Err(AugmentError::NonPositiveSigma(_))
        ));
        assert!(matches!(
            sharpen(&img, -1.0, 1.0),
            Err(AugmentError::NonPositiveSigma(_))
        ));
    }

    /// Oracle: dense 2-D convolution with the outer-product kernel and
    /// replicate edges, evaluated on a 5x5 impulse.
    #[test]
    fn sharpen_impulse_matches_dense_convolution() {
        let mut data = vec![0.0; 25];
        data[12] = 1.0;
        let grid = PixelGrid::new(5, 5, data).unwrap();
        let img = LabeledImage::new(grid.clone(), "c", "c/0").unwrap();
        let sigma = 1.0;
        let amount = 1.0;

        let k = gaussian_kernel(sigma);
        let radius = k.len() as isize / 2;
        let blur_at = |r: isize, c: isize| -> f64 {
            let mut acc = 0.0;
            for (i, kr) in k.iter().enumerate() {
                for (j, kc) in k.iter().enumerate() {
                    let rr = (r + i as isize - radius).clamp(0, 4) as usize;
                    let cc = (c + j as isize - radius).clamp(0, 4) as usize;
                    acc += kr * kc * grid.get(rr, cc);
                }
            }
            acc
        };

        let out = sharpen(&img, sigma, amount).unwrap();
        for r in 0..5isize {
            for c in 0..5isize {
                let expected =
                    (grid.get(r as usize, c as usize) + amount * (grid.get(r as usize, c as usize) - blur_at(r, c)))
                        .clamp(0.0, 1.0);
                let got = out.pixels().get(r as usize, c as usize);
                assert!(
                    (expected - got).abs() < 1e-12,
                    "({r},{c}): {expected} vs {got}"
                );
            }
        }

        // Center strictly increases pre-clamp; neighbors decrease or stay.
        let center_pre = 1.0 + amount * (1.0 - blur_at(2, 2));
        assert!(center_pre > 1.0);
        assert!(out.pixels().get(2, 3) <= 0.0 + 1e-15);
        assert!(out.pixels().get(1, 2) <= 0.0 + 1e-15);
    }

    #[test]
    fn train_augment_p_zero_is_identity() {
        let img = sample_image();
        let params = AugmentParams::new(1.0, 1.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(random_train_augment(&img, &params, &mut rng), img);
        }
    }

    #[test]
    fn train_augment_is_seed_deterministic() {
        let img = sample_image();
        let params = AugmentParams::new(1.0, 1.0, 1.0).unwrap();
        let a = random_train_augment(&img, &params, &mut ChaCha8Rng::seed_from_u64(9));
        let b = random_train_augment(&img, &params, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_ne!(a, img);
    }

    /// Monte-Carlo frequency of each non-identity kind at p=0.5 over 10k
    /// draws: expected 0.1 each, tolerance 0.02.
    #[test]
    fn train_augment_frequencies() {
        let img = sample_image();
        let params = AugmentParams::new(1.0, 1.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let references: Vec<(Augmentation, LabeledImage)> = TRAIN_KINDS
            .iter()
            .map(|&k| (k, apply(k, &img, &params)))
            .collect();
        let mut counts: HashMap<Augmentation, usize> = HashMap::new();
        let trials = 10_000;
        for _ in 0..trials {
            let out = random_train_augment(&img, &params, &mut rng);
            if out == img {
                continue;
            }
            let kind = references
                .iter()
                .find(|(_, r)| *r == out)
                .map(|(k, _)| *k)
                .expect("augmented output must match one reference");
            *counts.entry(kind).or_insert(0) += 1;
        }
        for kind in TRAIN_KINDS {
            let freq = *counts.get(&kind).unwrap_or(&0) as f64 / trials as f64;
            assert!(
                (freq - 0.1).abs() <= 0.02,
                "{kind:?} frequency {freq} outside 0.1 +- 0.02"
            );
        }
    }

    #[test]
    fn tta_set_order_and_purity() {
        let img = sample_image();
        let params = AugmentParams::default();
        let set = tta_set(&img, &params);
        assert_eq!(set.len(), 6);
        assert_eq!(set[0], img);
        let again = tta_set(&img, &params);
        assert_eq!(set, again);
        // All six outputs are distinct for a generic image.
        for i in 0..6 {
            for j in (i + 1)..6 {
                assert_ne!(set[i], set[j], "TTA elements {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn all_augmentations_preserve_dims_and_range() {
        let img = sample_image();
        let params = AugmentParams::default();
        for aug in TTA_SET {
            let out = apply(aug, &img, &params);
            assert_eq!(out.resolution(), img.resolution());
            assert_eq!(out.class_id(), img.class_id());
            assert!(out.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
