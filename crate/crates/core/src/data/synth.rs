//! Procedural texture dataset with injected defects, for smoke runs.
//!
//! Normal images are a sum of oriented sinusoidal gratings with random
//! phases plus mild pixel noise. Defective images add either a filled blob
//! or a straight scratch in a colour far from the texture palette; the
//! defect footprint is written as a mask.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Label, Manifest, Record, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: u32,
    pub train_normal: usize,
    pub test_normal: usize,
    pub test_defect: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            train_normal: 200,
            test_normal: 50,
            test_defect: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defect {
    Blob,
    Scratch,
}

impl Defect {
    pub fn tag(self) -> &'static str {
        match self {
            Defect::Blob => "blob",
            Defect::Scratch => "scratch",
        }
    }
}

/// Grating wave vectors shared by every image, in cycles per image.
const GRATINGS: [(f64, f64, f64); 3] = [(3.0, 1.0, 0.45), (-1.0, 4.0, 0.35), (5.0, 5.0, 0.2)];
/// Per-channel palette: mean and amplitude.
const PALETTE: [(f64, f64); 3] = [(0.55, 0.25), (0.45, 0.2), (0.35, 0.15)];

fn rng_for(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 1024);
    rng
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One normal texture image.
pub fn texture(size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let phases: Vec<f64> = GRATINGS.iter().map(|_| rng.gen_range(0.0..TAU)).collect();
    let noise = Normal::new(0.0, 0.03).expect("positive std");
    let s = f64::from(size);
    RgbImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (f64::from(x) / s, f64::from(y) / s);
        let wave: f64 = GRATINGS
            .iter()
            .zip(&phases)
            .map(|(&(kx, ky, a), &p)| a * (TAU * (kx * fx + ky * fy) + p).sin())
            .sum();
        let px = PALETTE.map(|(mean, amp)| to_u8(mean + amp * wave + noise.sample(rng)));
        Rgb(px)
    })
}

/// Paints a defect into `img` and returns its mask.
pub fn inject(img: &mut RgbImage, defect: Defect, rng: &mut ChaCha8Rng) -> GrayImage {
    let size = img.width();
    let s = f64::from(size);
    let colour = if rng.gen_bool(0.5) {
        Rgb([20, 230, 235])
    } else {
        Rgb([245, 245, 30])
    };
    let inside: Box<dyn Fn(f64, f64) -> bool> = match defect {
        Defect::Blob => {
            let r = rng.gen_range(0.08..0.14) * s;
            let (cx, cy) = (rng.gen_range(r..s - r), rng.gen_range(r..s - r));
            let aspect = rng.gen_range(0.6..1.0);
            Box::new(move |x, y| ((x - cx) / r).powi(2) + ((y - cy) / (r * aspect)).powi(2) <= 1.0)
        }
        Defect::Scratch => {
            let margin = 0.15 * s;
            let (x0, y0) = (rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin));
            let angle = rng.gen_range(0.0..TAU / 2.0);
            let half = rng.gen_range(0.2..0.3) * s;
            let width = rng.gen_range(1.2..2.0);
            let (dx, dy) = (angle.cos(), angle.sin());
            Box::new(move |x, y| {
                let (px, py) = (x - x0, y - y0);
                let along = px * dx + py * dy;
                let across = (-px * dy + py * dx).abs();
                along.abs() <= half && across <= width
            })
        }
    };
    let mut mask = GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            if inside(f64::from(x) + 0.5, f64::from(y) + 0.5) {
                img.put_pixel(x, y, colour);
                mask.put_pixel(x, y, Luma([255]));
            }
        }
    }
    mask
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Writes the dataset under `root` in the directory layout
/// `train/good`, `test/{good,blob,scratch}`, `ground_truth/<class>`, and
/// returns its train and test manifests.
pub fn generate(root: &Path, config: &SynthConfig) -> Result<(Manifest, Manifest)> {
    if config.size < 32 || config.train_normal == 0 || config.test_normal == 0 || config.test_defect == 0 {
        return Err(Error::Config(format!("degenerate synthetic dataset: {config:?}")));
    }
    for dir in ["train/good", "test/good", "test/blob", "test/scratch", "ground_truth/blob", "ground_truth/scratch"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut train = Vec::new();
    for i in 0..config.train_normal {
        let path = root.join(format!("train/good/{i:04}.png"));
        save_rgb(&texture(config.size, &mut rng_for(config.seed, 1, i)), &path)?;
        train.push(Record::new(path, Label::Normal, "good"));
    }
    let mut test = Vec::new();
    for i in 0..config.test_normal {
        let path = root.join(format!("test/good/{i:04}.png"));
        save_rgb(&texture(config.size, &mut rng_for(config.seed, 2, i)), &path)?;
        test.push(Record::new(path, Label::Normal, "good"));
    }
    for i in 0..config.test_defect {
        let defect = if i % 2 == 0 { Defect::Blob } else { Defect::Scratch };
        let mut rng = rng_for(config.seed, 3, i);
        let mut img = texture(config.size, &mut rng);
        let mask = inject(&mut img, defect, &mut rng);
        let path = root.join(format!("test/{}/{i:04}.png", defect.tag()));
        let mask_path = root.join(format!("ground_truth/{}/{i:04}_mask.png", defect.tag()));
        save_rgb(&img, &path)?;
        mask.save(&mask_path).map_err(|e| Error::image(&mask_path, e))?;
        test.push(Record::new(path, Label::Anomalous, defect.tag()).with_mask(mask_path));
    }
    Ok((Manifest::new(Split::Train, train)?, Manifest::new(Split::Test, test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let a = texture(32, &mut rng_for(7, 1, 3));
        assert_eq!(a, texture(32, &mut rng_for(7, 1, 3)));
        assert_ne!(a, texture(32, &mut rng_for(7, 1, 4)));
    }

    #[test]
    fn defects_have_masks() {
        for defect in [Defect::Blob, Defect::Scratch] {
            let mut rng = rng_for(1, 3, 0);
            let mut img = texture(64, &mut rng);
            let mask = inject(&mut img, defect, &mut rng);
            let on = mask.pixels().filter(|p| p.0[0] > 0).count();
            assert!(on > 20, "{defect:?} covers {on} pixels");
        }
    }

    #[test]
    fn writes_layout_and_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            size: 32,
            train_normal: 3,
            test_normal: 2,
            test_defect: 2,
            seed: 5,
        };
        let (train, test) = generate(dir.path(), &cfg).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.count(Label::Anomalous), 2);
        test.validate_files().unwrap();
        let scanned = super::super::split::scan_dataset(dir.path()).unwrap();
        assert_eq!(scanned.len(), 7);
        assert_eq!(scanned.iter().filter(|s| s.mask.is_some()).count(), 2);
    }
}
