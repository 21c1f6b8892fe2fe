//! Unlabelled PNG plots: score histogram and ROC curve.

use std::path::Path;

use image::RgbImage;
use plotters::prelude::*;

use super::{RocPoint, ScoreHistogram};
use crate::error::{Error, Result};

const SIZE: (u32, u32) = (640, 480);
const MARGIN: i32 = 30;
const NORMAL: RGBColor = RGBColor(40, 110, 200);
const ANOMALOUS: RGBColor = RGBColor(210, 60, 40);

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn render(path: &Path, draw: impl FnOnce(&DrawingArea<BitMapBackend<'_>, plotters::coord::Shift>) -> Result<()>) -> Result<()> {
    let mut buf = vec![0u8; (SIZE.0 * SIZE.1 * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        draw(&root)?;
        root.present().map_err(plot_err)?;
    }
    let img = RgbImage::from_raw(SIZE.0, SIZE.1, buf).expect("buffer matches plot size");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Maps unit coordinates to pixels inside the margin, y pointing up.
fn to_px(x: f64, y: f64) -> (i32, i32) {
    let w = SIZE.0 as i32 - 2 * MARGIN;
    let h = SIZE.1 as i32 - 2 * MARGIN;
    (MARGIN + (x * w as f64).round() as i32, MARGIN + h - (y * h as f64).round() as i32)
}

fn axes(root: &DrawingArea<BitMapBackend<'_>, plotters::coord::Shift>) -> Result<()> {
    root.draw(&PathElement::new(vec![to_px(0.0, 1.0), to_px(0.0, 0.0), to_px(1.0, 0.0)], BLACK))
        .map_err(plot_err)
}

/// Overlaid per-label bars, each scaled to its own peak.
pub fn histogram_png(h: &ScoreHistogram, path: &Path) -> Result<()> {
    render(path, |root| {
        for (counts, color) in [(&h.normal, NORMAL), (&h.anomalous, ANOMALOUS)] {
            let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
            for (b, &c) in counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let x0 = b as f64 / h.bins as f64;
                let x1 = (b + 1) as f64 / h.bins as f64;
                let rect = Rectangle::new([to_px(x0, c as f64 / peak), to_px(x1, 0.0)], color.mix(0.5).filled());
                root.draw(&rect).map_err(plot_err)?;
            }
        }
        axes(root)
    })
}

/// ROC curve with the chance diagonal.
pub fn roc_png(points: &[RocPoint], path: &Path) -> Result<()> {
    render(path, |root| {
        root.draw(&PathElement::new(vec![to_px(0.0, 0.0), to_px(1.0, 1.0)], RGBColor(180, 180, 180)))
            .map_err(plot_err)?;
        let curve: Vec<(i32, i32)> = points.iter().map(|p| to_px(p.fpr, p.tpr)).collect();
        root.draw(&PathElement::new(curve, ANOMALOUS.stroke_width(2)))
            .map_err(plot_err)?;
        axes(root)
    })
}
