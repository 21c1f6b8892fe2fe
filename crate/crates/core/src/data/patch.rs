//! Grid-wise patch extraction, reassembly and ROI cropping over `(C, H, W)`
//! tensors.

use anomgan_tensor::Tensor;
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted patch side, and the minimum ROI window.
pub const MIN_PATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadMode {
    #[default]
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    pub patch_size: usize,
    /// Defaults to `patch_size`, giving non-overlapping tiles.
    pub stride: Option<usize>,
    pub pad_mode: PadMode,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self::new(256)
    }
}

impl PatchSpec {
    pub fn new(patch_size: usize) -> Self {
        Self {
            patch_size,
            stride: None,
            pad_mode: PadMode::Reflect,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < MIN_PATCH {
            return Err(Error::Config(format!(
                "patch_size {} below the {MIN_PATCH}-pixel minimum",
                self.patch_size
            )));
        }
        if self.stride() == 0 {
            return Err(Error::Config("patch stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of patch origins along an axis of `len` pixels.
    pub fn positions(&self, len: usize) -> usize {
        let len = len.max(self.patch_size);
        (len - self.patch_size).div_ceil(self.stride()) + 1
    }

    /// Axis length after padding so the last patch fits exactly.
    pub fn padded_len(&self, len: usize) -> usize {
        (self.positions(len) - 1) * self.stride() + self.patch_size
    }

    /// `(height, width)` an image is brought to before tiling: upscaled when
    /// smaller than a patch in both dimensions, otherwise unchanged.
    pub fn working_size(&self, height: usize, width: usize) -> (usize, usize) {
        let ps = self.patch_size;
        if height < ps && width < ps {
            let scale = ps as f64 / height.min(width) as f64;
            (
                ((height as f64 * scale).round() as usize).max(ps),
                ((width as f64 * scale).round() as usize).max(ps),
            )
        } else {
            (height, width)
        }
    }

    pub fn grid(&self, height: usize, width: usize) -> (usize, usize) {
        let (h, w) = self.working_size(height, width);
        (self.positions(h), self.positions(w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Grid row and column.
    pub row: usize,
    pub col: usize,
    /// Pixel origin in the padded image.
    pub top: usize,
    pub left: usize,
    /// `(C, patch_size, patch_size)`.
    pub data: Tensor,
}

/// Index into an axis of `len` under mirror reflection without repeating
/// the edge sample.
pub fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let r = i % period;
    if r < len {
        r
    } else {
        period - r
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        s => Err(Error::Shape(format!("expected a non-empty (C, H, W) image, got {s:?}"))),
    }
}

/// Bilinear resize of every channel.
pub fn resize(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(c * height * width);
    for ch in image.data().chunks(h * w).take(c) {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w as u32, h as u32, ch.iter().map(|&v| v as f32).collect())
                .expect("buffer length matches dimensions");
        let resized = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        out.extend(resized.into_raw().into_iter().map(f64::from));
    }
    Ok(Tensor::from_vec([c, height, width], out))
}

/// Reflect-pads `image` to `(height, width)` at the bottom and right.
pub fn reflect_pad(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    if height < h || width < w {
        return Err(Error::Shape(format!("cannot pad {h}x{w} down to {height}x{width}")));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let row = ch * h * w + reflect_index(y, h) * w;
            out.extend((0..width).map(|x| src[row + reflect_index(x, w)]));
        }
    }
    Ok(Tensor::from_vec([c, height, width], out))
}

pub(crate) fn crop(image: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Tensor {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    debug_assert!(top + height <= h && left + width <= w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in top..top + height {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&src[row + left..row + left + width]);
        }
    }
    Tensor::from_vec([c, height, width], out)
}

/// Tiles `image` left-to-right, top-to-bottom after reflect-padding the
/// bottom and right remainders.
pub fn extract_patches(image: &Tensor, spec: &PatchSpec) -> Result<Vec<Patch>> {
    spec.validate()?;
    let (_, h, w) = dims(image)?;
    let (wh, ww) = spec.working_size(h, w);
    let working = if (wh, ww) != (h, w) {
        log::warn!(
            "{h}x{w} image is smaller than a {0}x{0} patch; upscaling to {wh}x{ww}",
            spec.patch_size
        );
        resize(image, wh, ww)?
    } else {
        image.clone()
    };
    let padded = reflect_pad(&working, spec.padded_len(wh), spec.padded_len(ww))?;
    let (rows, cols) = (spec.positions(wh), spec.positions(ww));
    let mut patches = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let (top, left) = (row * spec.stride(), col * spec.stride());
            patches.push(Patch {
                row,
                col,
                top,
                left,
                data: crop(&padded, top, left, spec.patch_size, spec.patch_size),
            });
        }
    }
    Ok(patches)
}

/// Writes patches back at their origins into a `(C, height, width)` canvas.
/// Overlapping regions take the later patch.
pub fn reassemble(patches: &[Patch], height: usize, width: usize) -> Result<Tensor> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Shape("no patches to reassemble".into()))?;
    let (c, ps, _) = dims(&first.data)?;
    let mut out = Tensor::zeros([c, height, width]);
    let dst = out.data_mut();
    for p in patches {
        if p.top + ps > height || p.left + ps > width {
            return Err(Error::Shape(format!(
                "patch at ({}, {}) exceeds a {height}x{width} canvas",
                p.top, p.left
            )));
        }
        let src = p.data.data();
        for ch in 0..c {
            for y in 0..ps {
                let d = ch * height * width + (p.top + y) * width + p.left;
                let s = ch * ps * ps + y * ps;
                dst[d..d + ps].copy_from_slice(&src[s..s + ps]);
            }
        }
    }
    Ok(out)
}

/// Crop window in pixel coordinates; bottom/right exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl RoiBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }
}

/// Tight bounding box of the nonzero mask, grown to a square of side at
/// least [`MIN_PATCH`] about its centre, then clipped to the image.
/// `None` for an empty mask.
pub fn roi_box(mask: &[bool], height: usize, width: usize) -> Option<RoiBox> {
    assert_eq!(mask.len(), height * width);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (y, x) = (i / width, i % width);
        r0 = r0.min(y);
        r1 = r1.max(y);
        c0 = c0.min(x);
        c1 = c1.max(x);
    }
    if r0 == usize::MAX {
        return None;
    }
    let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
    let side = bh.max(bw).max(MIN_PATCH) as isize;
    let axis = |start: usize, extent: usize, len: usize| {
        let lo = start as isize + (extent / 2) as isize - side / 2;
        (lo.max(0) as usize, ((lo + side) as usize).min(len))
    };
    let (top, bottom) = axis(r0, bh, height);
    let (left, right) = axis(c0, bw, width);
    Some(RoiBox {
        top,
        left,
        bottom,
        right,
    })
}

/// Crops the mask's region of interest and resizes it to a square patch.
pub fn apply_roi_mask(image: &Tensor, mask: &[bool], patch_size: usize) -> Result<(Tensor, RoiBox)> {
    let (_, h, w) = dims(image)?;
    if mask.len() != h * w {
        return Err(Error::Shape(format!(
            "mask has {} pixels, image is {h}x{w}",
            mask.len()
        )));
    }
    let b = roi_box(mask, h, w).ok_or_else(|| Error::Dataset("mask has no nonzero pixels".into()))?;
    let region = crop(image, b.top, b.left, b.height(), b.width());
    Ok((resize(&region, patch_size, patch_size)?, b))
}
