//! Training-time photometric and geometric augmentation: horizontal flips
//! applied jointly to image and mask, brightness/contrast jitter, CLAHE on
//! the luma channel, and the final channel standardization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassMask, PlaneImage};

/// ImageNet channel statistics used for standardization throughout.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Augmentation policy. Probabilities are per sample; standardization always
/// runs last regardless of the draws.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub prob_flip: f64,
    pub prob_brightness_contrast: f64,
    pub prob_clahe: f64,
    /// Brightness and contrast factors are drawn uniformly from +/- this.
    pub brightness_contrast_range: f32,
    pub clahe_clip_limit: f32,
    /// CLAHE tiles per axis.
    pub clahe_grid: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            prob_flip: 0.5,
            prob_brightness_contrast: 0.5,
            prob_clahe: 0.3,
            brightness_contrast_range: 0.2,
            clahe_clip_limit: 2.0,
            clahe_grid: 8,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("prob_flip", self.prob_flip),
            ("prob_brightness_contrast", self.prob_brightness_contrast),
            ("prob_clahe", self.prob_clahe),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} {p} outside [0,1]")));
            }
        }
        if self.brightness_contrast_range < 0.0 || !self.brightness_contrast_range.is_finite() {
            return Err(Error::InvalidConfig("brightness_contrast_range must be >= 0".into()));
        }
        if self.clahe_clip_limit <= 0.0 {
            return Err(Error::InvalidConfig("clahe_clip_limit must be positive".into()));
        }
        if self.clahe_grid == 0 {
            return Err(Error::InvalidConfig("clahe_grid must be >= 1".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidConfig("channel std must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel standardization `(v - mean) / std`.
pub fn normalize(img: &PlaneImage, mean: [f32; 3], std: [f32; 3]) -> Result<PlaneImage> {
    if img.channels != 3 {
        return Err(Error::ShapeMismatch(format!("normalize expects 3 channels, got {}", img.channels)));
    }
    if std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::InvalidConfig(format!("non-positive channel std {std:?}")));
    }
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - mean[c]) / std[c];
        }
    }
    Ok(out)
}

/// `clamp((v - 0.5) * (1 + contrast) + 0.5 + brightness, 0, 1)` per channel.
/// Identity at `(0, 0)`.
pub fn adjust_brightness_contrast(img: &PlaneImage, brightness: f32, contrast: f32) -> PlaneImage {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = ((*v - 0.5) * (1.0 + contrast) + 0.5 + brightness).clamp(0.0, 1.0);
    }
    out
}

const CLAHE_BINS: usize = 256;

/// Contrast-limited adaptive histogram equalization on the luma channel of an
/// RGB image in [0,1]. The image is split into `grid` x `grid` tiles; each
/// tile's 256-bin luma histogram is clipped at `clip_limit` times the uniform
/// bin load (an infinite limit disables clipping, a 1x1 grid degenerates to
/// global equalization), the excess is redistributed uniformly, and per-pixel
/// remapping interpolates bilinearly between the tile-center transfer
/// functions. Chroma offsets are preserved.
pub fn clahe(img: &PlaneImage, clip_limit: f32, grid: usize) -> Result<PlaneImage> {
    if img.channels != 3 {
        return Err(Error::ShapeMismatch(format!("clahe expects 3 channels, got {}", img.channels)));
    }
    if grid == 0 {
        return Err(Error::InvalidConfig("clahe grid must be >= 1".into()));
    }
    if clip_limit <= 0.0 {
        return Err(Error::InvalidConfig("clahe clip limit must be positive".into()));
    }
    let (w, h) = (img.width, img.height);
    if w < grid {
        return Err(Error::Dimension {
            axis: 'x',
            message: format!("image width {w} smaller than clahe grid {grid}"),
        });
    }
    if h < grid {
        return Err(Error::Dimension {
            axis: 'y',
            message: format!("image height {h} smaller than clahe grid {grid}"),
        });
    }

    // Luma per pixel, quantized to histogram bins.
    let mut luma = vec![0.0f32; w * h];
    let mut bins = vec![0u8; w * h];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        let y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        luma[i] = y;
        bins[i] = ((y * (CLAHE_BINS - 1) as f32).round()).clamp(0.0, (CLAHE_BINS - 1) as f32) as u8;
    }

    // Tile edges: tile t spans [edge[t], edge[t+1]).
    let edges = |dim: usize| -> Vec<usize> { (0..=grid).map(|t| t * dim / grid).collect() };
    let (xe, ye) = (edges(w), edges(h));

    // Per-tile clipped, renormalized transfer functions.
    let mut maps = vec![[0.0f32; CLAHE_BINS]; grid * grid];
    let mut centers_x = vec![0.0f32; grid];
    let mut centers_y = vec![0.0f32; grid];
    for ty in 0..grid {
        centers_y[ty] = (ye[ty] + ye[ty + 1]) as f32 / 2.0 - 0.5;
        for tx in 0..grid {
            centers_x[tx] = (xe[tx] + xe[tx + 1]) as f32 / 2.0 - 0.5;
            let mut hist = [0.0f64; CLAHE_BINS];
            let tile_n = ((xe[tx + 1] - xe[tx]) * (ye[ty + 1] - ye[ty])) as f64;
            for y in ye[ty]..ye[ty + 1] {
                for x in xe[tx]..xe[tx + 1] {
                    hist[bins[y * w + x] as usize] += 1.0;
                }
            }
            if clip_limit.is_finite() {
                let limit = clip_limit as f64 * tile_n / CLAHE_BINS as f64;
                let mut excess = 0.0;
                for b in hist.iter_mut() {
                    if *b > limit {
                        excess += *b - limit;
                        *b = limit;
                    }
                }
                let share = excess / CLAHE_BINS as f64;
                for b in hist.iter_mut() {
                    *b += share;
                }
            }
            let mut cdf = 0.0;
            let map = &mut maps[ty * grid + tx];
            for (b, &count) in hist.iter().enumerate() {
                cdf += count;
                map[b] = (cdf / tile_n) as f32;
            }
        }
    }

    // Remap each pixel's luma by bilinear interpolation between the four
    // surrounding tile centers; reapply the chroma offsets.
    let locate = |p: f32, centers: &[f32]| -> (usize, usize, f32) {
        if p <= centers[0] {
            return (0, 0, 0.0);
        }
        if p >= centers[grid - 1] {
            return (grid - 1, grid - 1, 0.0);
        }
        let hi = centers.partition_point(|&c| c <= p).min(grid - 1);
        let lo = hi - 1;
        ((lo), (hi), (p - centers[lo]) / (centers[hi] - centers[lo]))
    };
    let mut out = img.clone();
    for y in 0..h {
        let (ty0, ty1, fy) = locate(y as f32, &centers_y);
        for x in 0..w {
            let (tx0, tx1, fx) = locate(x as f32, &centers_x);
            let b = bins[y * w + x] as usize;
            let m00 = maps[ty0 * grid + tx0][b];
            let m01 = maps[ty0 * grid + tx1][b];
            let m10 = maps[ty1 * grid + tx0][b];
            let m11 = maps[ty1 * grid + tx1][b];
            let top = m00 + (m01 - m00) * fx;
            let bot = m10 + (m11 - m10) * fx;
            let new_y = top + (bot - top) * fy;
            let dy = new_y - luma[y * w + x];
            let base = (y * w + x) * 3;
            for c in 0..3 {
                let v = out.data()[base + c] + dy;
                out.data_mut()[base + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Deterministic per-sample augmentation pipeline. Each `(seed, index)` pair
/// names an independent random stream, so the same sample always receives
/// the same transforms for a given seed.
pub struct Augmenter {
    cfg: AugmentConfig,
    seed: u64,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Augmenter { cfg, seed })
    }

    pub fn apply(
        &self,
        index: u64,
        image: &PlaneImage,
        mask: &ClassMask,
    ) -> Result<(PlaneImage, ClassMask)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let mut img = image.clone();
        let mut msk = mask.clone();
        if rng.gen::<f64>() < self.cfg.prob_flip {
            img = img.flip_horizontal();
            msk = msk.flip_horizontal();
        }
        // Factor draws happen unconditionally so later stages see the same
        // stream position whether or not the jitter fired.
        let b = rng.gen_range(-self.cfg.brightness_contrast_range..=self.cfg.brightness_contrast_range);
        let c = rng.gen_range(-self.cfg.brightness_contrast_range..=self.cfg.brightness_contrast_range);
        if rng.gen::<f64>() < self.cfg.prob_brightness_contrast {
            img = adjust_brightness_contrast(&img, b, c);
        }
        if rng.gen::<f64>() < self.cfg.prob_clahe {
            img = clahe(&img, self.cfg.clahe_clip_limit, self.cfg.clahe_grid)?;
        }
        let img = normalize(&img, self.cfg.mean, self.cfg.std)?;
        Ok((img, msk))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, values: &[f32]) -> PlaneImage {
        assert_eq!(values.len(), w * h);
        let mut data = Vec::with_capacity(w * h * 3);
        for &v in values {
            data.extend([v, v, v]);
        }
        PlaneImage::new(w, h, 3, data)
    }

    #[test]
    fn normalize_closed_form() {
        let img = PlaneImage::new(1, 1, 3, vec![0.5, 1.0, 0.0]);
        let out = normalize(&img, [0.5, 0.5, 0.5], [0.5, 0.25, 0.2]).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, -2.5]);
    }

    #[test]
    fn normalize_rejects_nonpositive_std() {
        let img = PlaneImage::zeros(1, 1, 3);
        assert!(normalize(&img, [0.0; 3], [1.0, 0.0, 1.0]).is_err());
        assert!(normalize(&img, [0.0; 3], [1.0, -0.5, 1.0]).is_err());
    }

    #[test]
    fn brightness_contrast_identity_and_clamp() {
        let img = PlaneImage::new(1, 1, 3, vec![0.2, 0.5, 0.9]);
        let id = adjust_brightness_contrast(&img, 0.0, 0.0);
        for (a, b) in id.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
        let bright = adjust_brightness_contrast(&img, 1.0, 0.0);
        assert_eq!(bright.data(), &[1.0, 1.0, 1.0]);
        let dark = adjust_brightness_contrast(&img, -1.0, 0.0);
        assert_eq!(dark.data(), &[0.0, 0.0, 0.0]);
        // contrast pivots around 0.5: (0.2 - 0.5) * 1.5 + 0.5 = 0.05
        let con = adjust_brightness_contrast(&img, 0.0, 0.5);
        assert!((con.data()[0] - 0.05).abs() <= 1e-6);
        assert!((con.data()[1] - 0.5).abs() <= 1e-6);
    }

    #[test]
    fn clahe_constant_image_stays_constant() {
        let img = gray(16, 16, &vec![0.25; 256]);
        let out = clahe(&img, 2.0, 4).unwrap();
        let first = out.data()[0];
        assert!(out.data().iter().all(|&v| (v - first).abs() <= 1e-6));
    }

    #[test]
    fn clahe_output_in_unit_interval() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..24 * 24 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = PlaneImage::new(24, 24, 3, data);
        let out = clahe(&img, 2.0, 8).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn clahe_grid_one_unclipped_is_global_equalization() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f32> = (0..400).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = gray(20, 20, &values);
        let out = clahe(&img, f32::INFINITY, 1).unwrap();
        // independent oracle: global histogram equalization, map = cdf/n
        let mut hist = [0usize; 256];
        for &v in &values {
            hist[(v * 255.0).round() as usize] += 1;
        }
        let mut cdf = [0.0f32; 256];
        let mut acc = 0usize;
        for (b, &c) in hist.iter().enumerate() {
            acc += c;
            cdf[b] = acc as f32 / values.len() as f32;
        }
        for (i, &v) in values.iter().enumerate() {
            let expect = cdf[(v * 255.0).round() as usize];
            let got = out.data()[i * 3];
            assert!((got - expect).abs() <= 1e-5, "pixel {i}: {got} vs {expect}");
        }
    }

    #[test]
    fn clahe_rejects_image_smaller_than_grid() {
        let img = PlaneImage::zeros(4, 10, 3);
        assert!(matches!(clahe(&img, 2.0, 8), Err(Error::Dimension { axis: 'x', .. })));
        let img = PlaneImage::zeros(10, 4, 3);
        assert!(matches!(clahe(&img, 2.0, 8), Err(Error::Dimension { axis: 'y', .. })));
    }

    #[test]
    fn clahe_transfer_is_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let values: Vec<f32> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = gray(16, 16, &values);
        let out = clahe(&img, 2.0, 1).unwrap();
        // with a single tile, pixels with a higher input bin map no lower
        let mut pairs: Vec<(f32, f32)> =
            values.iter().zip(out.data().chunks_exact(3)).map(|(&v, o)| (v, o[0])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1 - 1e-6);
        }
    }

    #[test]
    fn augmenter_is_deterministic_per_index() {
        let cfg = AugmentConfig::default();
        let aug = Augmenter::new(cfg, 42).unwrap();
        let img = gray(16, 16, &(0..256).map(|i| i as f32 / 255.0).collect::<Vec<_>>());
        let mask = ClassMask::new(16, 16, (0..256).map(|i| (i % 5) as u8).collect());
        let (a_img, a_mask) = aug.apply(7, &img, &mask).unwrap();
        let (b_img, b_mask) = aug.apply(7, &img, &mask).unwrap();
        assert_eq!(a_img, b_img);
        assert_eq!(a_mask, b_mask);
        // a different stream produces a different draw somewhere over a few indices
        let differs = (0..8).any(|i| aug.apply(i, &img, &mask).unwrap().0 != a_img);
        assert!(differs);
    }

    #[test]
    fn augmenter_flips_image_and_mask_jointly() {
        let cfg = AugmentConfig {
            prob_flip: 1.0,
            prob_brightness_contrast: 0.0,
            prob_clahe: 0.0,
            mean: [0.0; 3],
            std: [1.0; 3],
            ..AugmentConfig::default()
        };
        let aug = Augmenter::new(cfg, 0).unwrap();
        let img = PlaneImage::new(2, 1, 3, vec![0.1, 0.1, 0.1, 0.9, 0.9, 0.9]);
        let mask = ClassMask::new(2, 1, vec![0, 3]);
        let (out_img, out_mask) = aug.apply(0, &img, &mask).unwrap();
        assert_eq!(out_img.data(), &[0.9, 0.9, 0.9, 0.1, 0.1, 0.1]);
        assert_eq!(out_mask.data(), &[3, 0]);
    }

    #[test]
    fn augmenter_always_standardizes() {
        let cfg = AugmentConfig {
            prob_flip: 0.0,
            prob_brightness_contrast: 0.0,
            prob_clahe: 0.0,
            ..AugmentConfig::default()
        };
        let aug = Augmenter::new(cfg.clone(), 0).unwrap();
        let img = gray(4, 4, &vec![0.5; 16]);
        let mask = ClassMask::filled(4, 4, 0);
        let (out, _) = aug.apply(0, &img, &mask).unwrap();
        assert_eq!(out, normalize(&img, cfg.mean, cfg.std).unwrap());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = AugmentConfig::default();
        cfg.prob_flip = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.clahe_grid = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.std = [0.0, 1.0, 1.0];
        assert!(cfg.validate().is_err());
    }
}
