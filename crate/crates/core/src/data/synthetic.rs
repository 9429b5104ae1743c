//! Procedural triplets in the Vimeo90K layout.
//!
//! Each sequence is a smooth random texture translating by a whole number of
//! pixels per frame, with a textured disc moving differently on top. The
//! middle frame samples the same continuous scene at the midpoint time, so
//! ground truth is exact up to 8-bit quantization.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::save_image;
use crate::error::{ensure_arg, Error, Result};
use crate::tensor::Tensor;

/// A scene sampled at a time step: pixel `(x, y)` of frame `t` shows the
/// background at `(x - t * bg_motion)` and the disc centered at
/// `center + t * fg_motion`.
struct Scene {
    waves: Vec<[f64; 5]>,
    bg_motion: (i64, i64),
    fg_motion: (i64, i64),
    center: (f64, f64),
    radius: f64,
    tint: [f64; 3],
}

impl Scene {
    fn random<R: Rng>(rng: &mut R, h: usize, w: usize) -> Self {
        let waves = (0..6)
            .map(|_| {
                [
                    rng.gen_range(0.02..0.25),
                    rng.gen_range(0.02..0.25),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.5..1.5),
                ]
            })
            .collect();
        let mut motion = || (rng.gen_range(-3..=3), rng.gen_range(-3..=3));
        let bg_motion = motion();
        let fg_motion = motion();
        let side = h.min(w) as f64;
        Scene {
            waves,
            bg_motion,
            fg_motion,
            center: (
                rng.gen_range(0.3..0.7) * w as f64,
                rng.gen_range(0.3..0.7) * h as f64,
            ),
            radius: rng.gen_range(0.12..0.25) * side,
            tint: [
                rng.gen_range(0.2..0.9),
                rng.gen_range(0.2..0.9),
                rng.gen_range(0.2..0.9),
            ],
        }
    }

    fn texture(&self, x: f64, y: f64, c: usize) -> f64 {
        let mut v = 0.0;
        for (i, [fx, fy, p0, p1, amp]) in self.waves.iter().enumerate() {
            let phase = p0 + (c as f64) * p1 * 0.3 + i as f64;
            v += amp * (fx * x + fy * y + phase).sin();
        }
        0.5 + 0.1 * v
    }

    fn sample(&self, t: i64, x: usize, y: usize, c: usize) -> f64 {
        let (x, y) = (x as f64, y as f64);
        let cx = self.center.0 + (t * self.fg_motion.0) as f64;
        let cy = self.center.1 + (t * self.fg_motion.1) as f64;
        let (dx, dy) = (x - cx, y - cy);
        let v = if dx * dx + dy * dy <= self.radius * self.radius {
            self.tint[c] + 0.08 * ((dx * 0.4).sin() + (dy * 0.3).cos())
        } else {
            let bx = x - (t * self.bg_motion.0) as f64;
            let by = y - (t * self.bg_motion.1) as f64;
            self.texture(bx, by, c)
        };
        v.clamp(0.0, 1.0)
    }

    fn frame(&self, t: i64, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([1, 3, h, w], |_, c, y, x| self.sample(t, x, y, c) as f32)
    }
}

/// The three frames of one synthetic sequence.
pub fn synthetic_frames(h: usize, w: usize, seed: u64) -> [Tensor<f32>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(&mut rng, h, w);
    [
        scene.frame(-1, h, w),
        scene.frame(0, h, w),
        scene.frame(1, h, w),
    ]
}

/// Writes `count` sequences under `root/sequences/00001/` and a list file
/// `root/<list_name>` naming them. Returns the list file path.
pub fn write_synthetic_dataset(
    root: impl AsRef<Path>,
    list_name: &str,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<PathBuf> {
    let root = root.as_ref();
    ensure_arg!(
        count > 0 && height > 0 && width > 0,
        "dataset must have at least one non-empty frame"
    );
    let mut list = String::new();
    for i in 0..count {
        let id = format!("00001/{:04}", i + 1);
        let dir = root.join("sequences").join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let frames = synthetic_frames(height, width, seed.wrapping_add(i as u64));
        for (f, name) in frames.iter().zip(super::dataset::FRAME_NAMES) {
            save_image(f, dir.join(name))?;
        }
        list.push_str(&id);
        list.push('\n');
    }
    let list_path = root.join(list_name);
    fs::write(&list_path, list).map_err(|e| Error::io(&list_path, e))?;
    Ok(list_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_are_deterministic_and_differ() {
        let a = synthetic_frames(16, 24, 5);
        let b = synthetic_frames(16, 24, 5);
        assert_eq!(a[0].to_vec(), b[0].to_vec());
        assert_ne!(a[0].to_vec(), a[2].to_vec());
        assert!(a
            .iter()
            .all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
