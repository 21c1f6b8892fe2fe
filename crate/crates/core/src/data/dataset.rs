//! Manifest records expanded into model-sized samples, and batch loading.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use anomgan_tensor::Tensor;
use rand::Rng;

use super::manifest::{Label, Manifest, Record};
use super::patch::{apply_roi_mask, crop, reflect_pad, resize, PatchSpec};
use crate::error::{Error, Result};

/// Decodes an 8-bit image to `(channels, H, W)` scaled to `[-1, 1]`.
/// Grayscale sources are replicated when three channels are requested.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = |v: u8| f64::from(v) / 127.5 - 1.0;
    let data: Vec<f64> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(scale).collect(),
        3 => {
            let raw = img.to_rgb8().into_raw();
            (0..3)
                .flat_map(|c| raw.iter().skip(c).step_by(3).map(|&v| scale(v)))
                .collect()
        }
        c => return Err(Error::Config(format!("unsupported channel count {c}"))),
    };
    Ok(Tensor::from_vec([channels, h, w], data))
}

/// Decodes a mask; nonzero pixels mark the region.
pub fn load_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw().into_iter().map(|v| v != 0).collect(), h, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    /// Grid tile of the (possibly upscaled) padded image.
    Patch { row: usize, col: usize, top: usize, left: usize },
    /// Mask region of interest resized to one patch.
    Roi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    /// Index into the manifest's records.
    pub record: usize,
    pub kind: SampleKind,
}

/// Samples of one manifest. Decoded images are cached on first use.
pub struct Dataset {
    manifest: Manifest,
    spec: PatchSpec,
    channels: usize,
    samples: Vec<Sample>,
    cache: RefCell<HashMap<usize, Rc<Tensor>>>,
}

impl Dataset {
    /// Expands every record into its samples. With `use_roi`, masked
    /// records contribute one region-of-interest sample instead of tiles.
    pub fn new(manifest: Manifest, spec: PatchSpec, channels: usize, use_roi: bool) -> Result<Self> {
        spec.validate()?;
        if manifest.is_empty() {
            return Err(Error::Config(format!(
                "{} manifest has no records",
                manifest.split.as_str()
            )));
        }
        let mut samples = Vec::new();
        let mut failures = Vec::new();
        for (i, r) in manifest.records.iter().enumerate() {
            if use_roi && r.mask.is_some() {
                samples.push(Sample {
                    record: i,
                    kind: SampleKind::Roi,
                });
                continue;
            }
            match image::image_dimensions(&r.path) {
                Ok((w, h)) => {
                    let (rows, cols) = spec.grid(h as usize, w as usize);
                    for row in 0..rows {
                        for col in 0..cols {
                            let kind = SampleKind::Patch {
                                row,
                                col,
                                top: row * spec.stride(),
                                left: col * spec.stride(),
                            };
                            samples.push(Sample { record: i, kind });
                        }
                    }
                }
                Err(e) => failures.push((r.path.clone(), e.to_string())),
            }
        }
        if !failures.is_empty() {
            return Err(Error::Batch { failures });
        }
        Ok(Self {
            manifest,
            spec,
            channels,
            samples,
            cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.spec.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn record(&self, sample: usize) -> &Record {
        &self.manifest.records[self.samples[sample].record]
    }

    pub fn label(&self, sample: usize) -> Label {
        self.record(sample).label
    }

    /// The padded working image for tiling, or the finished ROI patch.
    fn prepared(&self, sample: &Sample) -> Result<Rc<Tensor>> {
        if let Some(t) = self.cache.borrow().get(&sample.record) {
            return Ok(Rc::clone(t));
        }
        let r = &self.manifest.records[sample.record];
        let image = load_image(&r.path, self.channels)?;
        let prepared = match sample.kind {
            SampleKind::Roi => {
                let mask_path = r.mask.as_deref().expect("ROI samples come from masked records");
                let (mask, mh, mw) = load_mask(mask_path)?;
                if (mh, mw) != (image.dim(1), image.dim(2)) {
                    return Err(Error::Dataset(format!(
                        "mask {} is {mw}x{mh}, image is {}x{}",
                        mask_path.display(),
                        image.dim(2),
                        image.dim(1)
                    )));
                }
                apply_roi_mask(&image, &mask, self.spec.patch_size)?.0
            }
            SampleKind::Patch { .. } => {
                let (h, w) = (image.dim(1), image.dim(2));
                let (wh, ww) = self.spec.working_size(h, w);
                let working = if (wh, ww) != (h, w) {
                    log::warn!(
                        "{} is {w}x{h}, smaller than a {1}x{1} patch; upscaling",
                        r.path.display(),
                        self.spec.patch_size
                    );
                    resize(&image, wh, ww)?
                } else {
                    image
                };
                reflect_pad(&working, self.spec.padded_len(wh), self.spec.padded_len(ww))?
            }
        };
        let prepared = Rc::new(prepared);
        self.cache.borrow_mut().insert(sample.record, Rc::clone(&prepared));
        Ok(prepared)
    }

    /// One `(C, P, P)` sample.
    pub fn load_sample(&self, index: usize) -> Result<Tensor> {
        let sample = self.samples[index];
        let prepared = self.prepared(&sample)?;
        Ok(match sample.kind {
            SampleKind::Roi => (*prepared).clone(),
            SampleKind::Patch { top, left, .. } => {
                let ps = self.spec.patch_size;
                crop(&prepared, top, left, ps, ps)
            }
        })
    }

    /// `(N, C, P, P)` batch. With `flip`, each sample is mirrored
    /// horizontally with probability one half, drawn in index order.
    /// Every failing record is reported.
    pub fn load_batch<R: Rng>(&self, indices: &[usize], mut flip: Option<&mut R>) -> Result<Tensor> {
        let mut items = Vec::with_capacity(indices.len());
        let mut failures = Vec::new();
        for &i in indices {
            if i >= self.samples.len() {
                return Err(Error::Dataset(format!(
                    "sample index {i} out of range for {} samples",
                    self.samples.len()
                )));
            }
            let mirror = flip.as_deref_mut().is_some_and(|rng| rng.gen_bool(0.5));
            match self.load_sample(i) {
                Ok(t) if mirror => items.push(flip_horizontal(&t)),
                Ok(t) => items.push(t),
                Err(e) => failures.push((self.record(i).path.clone(), e.to_string())),
            }
        }
        if !failures.is_empty() {
            return Err(Error::Batch { failures });
        }
        Ok(Tensor::stack(&items))
    }
}

pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let w = image.dim(image.ndim() - 1);
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}
