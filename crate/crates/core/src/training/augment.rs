use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random crop-and-resize plus horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop_fraction: f64,
    pub hflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_fraction: 0.9,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_fraction: 1.0,
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::invalid(
                "augment",
                format!(
                    "crop_fraction must be in (0, 1], got {}",
                    self.crop_fraction
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::invalid(
                "augment",
                format!("hflip_prob must be in [0, 1], got {}", self.hflip_prob),
            ));
        }
        Ok(())
    }

    pub fn crop_side(&self, size: usize) -> usize {
        ((self.crop_fraction * size as f64).round() as usize).clamp(1, size)
    }
}

/// One concrete draw of the augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub crop_x: usize,
    pub crop_y: usize,
    pub side: usize,
    pub flip: bool,
}

impl AugmentParams {
    pub fn draw<R: Rng + ?Sized>(size: usize, cfg: &AugmentConfig, rng: &mut R) -> Self {
        let side = cfg.crop_side(size);
        let span = size - side;
        let crop_x = rng.random_range(0..=span);
        let crop_y = rng.random_range(0..=span);
        let flip = rng.random::<f64>() < cfg.hflip_prob;
        AugmentParams {
            crop_x,
            crop_y,
            side,
            flip,
        }
    }

    /// Crops `[C, S, S]`, resizes the crop back to `S` bilinearly and flips.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let (c, size) = match image.shape() {
            [c, h, w] if h == w => (*c, *h),
            other => {
                return Err(Error::invalid(
                    "augment",
                    format!("expected a square [C,S,S] image, got {other:?}"),
                ))
            }
        };
        if self.side == 0 || self.crop_x + self.side > size || self.crop_y + self.side > size {
            return Err(Error::invalid(
                "augment",
                format!("crop {self:?} exceeds size {size}"),
            ));
        }
        let src = image.data();
        let mut out = vec![0.0f32; src.len()];
        let scale = self.side as f64 / size as f64;
        // source sample positions along one axis, shared by rows and columns
        let taps: Vec<(usize, usize, f32)> = (0..size)
            .map(|o| {
                if self.side == size {
                    return (o, o, 0.0);
                }
                let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (self.side - 1) as f64);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(self.side - 1);
                (i0, i1, (p - i0 as f64) as f32)
            })
            .collect();
        for ch in 0..c {
            let plane = &src[ch * size * size..(ch + 1) * size * size];
            let dst = &mut out[ch * size * size..(ch + 1) * size * size];
            for (oy, &(y0, y1, fy)) in taps.iter().enumerate() {
                let r0 = (self.crop_y + y0) * size + self.crop_x;
                let r1 = (self.crop_y + y1) * size + self.crop_x;
                for (ox, &(x0, x1, fx)) in taps.iter().enumerate() {
                    let top = plane[r0 + x0] * (1.0 - fx) + plane[r0 + x1] * fx;
                    let bottom = plane[r1 + x0] * (1.0 - fx) + plane[r1 + x1] * fx;
                    let v = top * (1.0 - fy) + bottom * fy;
                    let x = if self.flip { size - 1 - ox } else { ox };
                    dst[oy * size + x] = v;
                }
            }
        }
        Tensor::new(image.shape().to_vec(), out)
    }
}

/// Draws fresh parameters and applies them.
pub fn augment<R: Rng + ?Sized>(
    image: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let size = image.shape().last().copied().unwrap_or(0);
    AugmentParams::draw(size, cfg, rng).apply(image)
}
