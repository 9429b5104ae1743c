//! Training augmentation: one shared random crop, flips, quarter-turn
//! rotations and temporal order reversal.

use rand::Rng;

use super::dataset::Triplet;
use crate::error::{ensure_arg, Result};
use crate::tensor::{Real, Tensor};

/// The random choices applied to one triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentPlan {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    /// Swap frame 0 and frame 1.
    pub reverse: bool,
}

impl AugmentPlan {
    /// Crop only, at the given corner.
    pub fn crop_only(top: usize, left: usize, size: usize) -> Self {
        AugmentPlan {
            top,
            left,
            size,
            hflip: false,
            vflip: false,
            quarter_turns: 0,
            reverse: false,
        }
    }

    /// Draws a plan for frames of `h x w`. The crop corner is drawn first,
    /// then the four independent choices.
    pub fn sample<R: Rng>(rng: &mut R, h: usize, w: usize, size: usize) -> Result<Self> {
        ensure_arg!(size > 0, "crop size must be positive");
        ensure_arg!(
            h >= size && w >= size,
            "frames of {h}x{w} are smaller than the {size}x{size} crop"
        );
        let top = rng.gen_range(0..=h - size);
        let left = rng.gen_range(0..=w - size);
        Ok(AugmentPlan {
            top,
            left,
            size,
            hflip: rng.gen(),
            vflip: rng.gen(),
            quarter_turns: rng.gen_range(0..4),
            reverse: rng.gen(),
        })
    }

    /// Applies the geometric part of the plan to one image.
    pub fn transform<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape();
        ensure_arg!(
            self.top + self.size <= s.h() && self.left + self.size <= s.w(),
            "crop {}x{} at ({}, {}) exceeds image {s}",
            self.size,
            self.size,
            self.top,
            self.left
        );
        let n = self.size;
        let last = n - 1;
        let src = |y: usize, x: usize| -> (usize, usize) {
            // Output pixel (y, x) of the rotated image reads (sy, sx) of the
            // flipped crop.
            let (sy, sx) = match self.quarter_turns % 4 {
                0 => (y, x),
                1 => (x, last - y),
                2 => (last - y, last - x),
                _ => (last - x, y),
            };
            let sy = if self.vflip { last - sy } else { sy };
            let sx = if self.hflip { last - sx } else { sx };
            (self.top + sy, self.left + sx)
        };
        Ok(Tensor::from_fn(s.with_hw(n, n), |b, c, y, x| {
            let (sy, sx) = src(y, x);
            image.at(b, c, sy, sx)
        }))
    }

    pub fn apply(&self, t: &Triplet) -> Result<Triplet> {
        let (a, gt, b) = (
            self.transform(&t.frame0)?,
            self.transform(&t.gt)?,
            self.transform(&t.frame1)?,
        );
        let (frame0, frame1) = if self.reverse { (b, a) } else { (a, b) };
        Triplet::new(t.id.clone(), frame0, gt, frame1)
    }
}

/// Samples a plan from `rng` and applies it.
pub fn augment<R: Rng>(t: &Triplet, crop: usize, rng: &mut R) -> Result<Triplet> {
    let s = t.gt.shape();
    AugmentPlan::sample(rng, s.h(), s.w(), crop)?.apply(t)
}
