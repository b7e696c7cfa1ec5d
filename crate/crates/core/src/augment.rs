//! Low-resolution / low-light degradation, glove recoloring and rotation
//! jitter for landmark and pose training.

use crate::error::{Error, Result};
use crate::image::Image;
use handcue_tensor::Rng;
use serde::{Deserialize, Serialize};

pub const SCALES: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scales: Vec<usize>,
    pub brightness: (f64, f64),
    pub noise_sigma: f64,
    /// Symmetric rotation jitter in degrees.
    pub rotation_jitter: f64,
    pub glove_colors: Vec<[f32; 3]>,
    pub p_glove: f64,
    pub glove_alpha: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scales: SCALES.to_vec(),
            brightness: (0.75, 1.25),
            noise_sigma: 0.02,
            rotation_jitter: 5.0,
            glove_colors: vec![[0.2, 0.45, 0.85], [0.25, 0.7, 0.35], [0.9, 0.9, 0.92], [0.55, 0.3, 0.7]],
            p_glove: 0.3,
            glove_alpha: 0.8,
        }
    }
}

impl AugmentConfig {
    /// Degenerate config that always yields identity parameters.
    pub fn identity() -> Self {
        Self {
            scales: vec![1],
            brightness: (1.0, 1.0),
            noise_sigma: 0.0,
            rotation_jitter: 0.0,
            glove_colors: Vec::new(),
            p_glove: 0.0,
            glove_alpha: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !SCALES.contains(s)) {
            return Err(Error::Config(format!("scales {:?} must be a nonempty subset of {SCALES:?}", self.scales)));
        }
        let (lo, hi) = self.brightness;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("brightness range {lo}..{hi}")));
        }
        if !(self.rotation_jitter >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("rotation jitter and noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// One concrete draw of augmentation parameters; logged per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub scale: usize,
    pub brightness: f64,
    pub rotation_deg: f64,
    pub glove: Option<[f32; 3]>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            scale: 1,
            brightness: 1.0,
            rotation_deg: 0.0,
            glove: None,
        }
    }
}

pub fn sample_augmentation(cfg: &AugmentConfig, rng: &mut Rng) -> AugmentParams {
    let scale = cfg.scales[rng.below(cfg.scales.len())];
    let brightness = rng.uniform(cfg.brightness.0, cfg.brightness.1);
    let rotation_deg = rng.uniform(-cfg.rotation_jitter, cfg.rotation_jitter);
    let glove = if !cfg.glove_colors.is_empty() && rng.chance(cfg.p_glove) {
        Some(cfg.glove_colors[rng.below(cfg.glove_colors.len())])
    } else {
        None
    };
    AugmentParams {
        scale,
        brightness,
        rotation_deg,
        glove,
    }
}

/// `up_s(min(1, down_s(b * img)) + n)` clamped to `[0, 1]`, with
/// `n ~ N(0, sigma^2)` drawn per low-resolution pixel in channel, row,
/// column order. Down is an `s x s` box average, up is nearest neighbour.
pub fn lowres_lowlight(img: &Image, s: usize, b: f64, rng: &mut Rng, sigma: f64) -> Result<Image> {
    if s == 0 || img.width < s || img.height < s {
        return Err(Error::Invalid(format!(
            "image {}x{} smaller than scale {s}",
            img.width, img.height
        )));
    }
    let (lw, lh) = (img.width / s, img.height / s);
    let bf = b as f32;
    let area = (s * s) as f32;
    let mut low = vec![0.0f32; img.channels * lw * lh];
    for c in 0..img.channels {
        for y in 0..lh {
            for x in 0..lw {
                let mut acc = 0.0f32;
                for dy in 0..s {
                    for dx in 0..s {
                        acc += bf * img.get(c, y * s + dy, x * s + dx);
                    }
                }
                let v = (acc / area).min(1.0);
                let n = if sigma > 0.0 { (rng.normal() * sigma) as f32 } else { 0.0 };
                low[(c * lh + y) * lw + x] = v + n;
            }
        }
    }
    let mut out = Image::zeros(img.width, img.height, img.channels);
    for c in 0..img.channels {
        for y in 0..img.height {
            let ly = (y / s).min(lh - 1);
            for x in 0..img.width {
                let lx = (x / s).min(lw - 1);
                out.set(c, y, x, low[(c * lh + ly) * lw + lx].clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// `(1 - alpha) * img + alpha * color` where `mask > 0.5`.
pub fn glove_overlay(img: &Image, mask: &Image, color: [f32; 3], alpha: f32) -> Result<Image> {
    if !img.same_size(mask) || mask.channels != 1 {
        return Err(Error::Shape(format!(
            "mask {}x{}x{} for image {}x{}",
            mask.width, mask.height, mask.channels, img.width, img.height
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Invalid(format!("alpha {alpha} outside (0, 1]")));
    }
    let mut out = img.clone();
    let n = img.width * img.height;
    for c in 0..img.channels {
        let col = color[c.min(2)];
        for i in 0..n {
            if mask.data[i] > 0.5 {
                let v = &mut out.data[c * n + i];
                *v = ((1.0 - alpha) * *v + alpha * col).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Photometric part of an augmentation draw (rotation is applied by the
/// caller when cropping).
pub fn apply(
    img: &Image,
    mask: Option<&Image>,
    params: &AugmentParams,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Image> {
    let mut out = match (params.glove, mask) {
        (Some(color), Some(mask)) => glove_overlay(img, mask, color, cfg.glove_alpha)?,
        _ => img.clone(),
    };
    if params.scale != 1 || params.brightness != 1.0 || cfg.noise_sigma > 0.0 {
        out = lowres_lowlight(&out, params.scale, params.brightness, rng, cfg.noise_sigma)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use handcue_tensor::Stream;

    #[test]
    fn identity_config_draws_identity() {
        let mut rng = Rng::new(1, Stream::Augment);
        for _ in 0..50 {
            assert_eq!(sample_augmentation(&AugmentConfig::identity(), &mut rng), AugmentParams::identity());
        }
    }

    #[test]
    fn overlay_rejects_bad_alpha() {
        let img = Image::zeros(2, 2, 3);
        let mask = Image::zeros(2, 2, 1);
        assert!(glove_overlay(&img, &mask, [1.0; 3], 0.0).is_err());
        assert!(glove_overlay(&img, &Image::zeros(3, 2, 1), [1.0; 3], 0.5).is_err());
    }
}
