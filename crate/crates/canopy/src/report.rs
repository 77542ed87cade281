//! Markdown tables, bar charts and mask thumbnails.

use std::path::Path;

use canopy_core::metrics::MetricsReport;
use canopy_core::Mask;
use image::{Rgb, RgbImage};

use crate::error::{CanopyError, IoContext, Result};

pub const THUMB_SIZE: usize = 128;

const CHART_W: u32 = 240;
const CHART_H: u32 = 160;
const BAR_COLORS: [[u8; 3]; 3] = [[70, 130, 180], [46, 139, 87], [218, 165, 32]];

pub fn metrics_markdown(m: &MetricsReport) -> String {
    let c = &m.confusion;
    format!(
        "| metric | value |\n|---|---|\n| pixel accuracy | {:.4} |\n| F1 | {:.4} |\n| IoU | {:.4} |\n\n\
         | | truth 1 | truth 0 |\n|---|---|---|\n| pred 1 | {} | {} |\n| pred 0 | {} | {} |\n",
        m.pixel_accuracy, m.f1, m.iou, c.tp, c.fp, c.fn_, c.tn
    )
}

/// Three bars (accuracy, F1, IoU) on a 0..1 axis with gridlines every 0.1.
pub fn bar_chart(m: &MetricsReport) -> RgbImage {
    let mut img = RgbImage::from_pixel(CHART_W, CHART_H, Rgb([255, 255, 255]));
    let plot_h = CHART_H - 20;
    for tick in 0..=10 {
        let y = 10 + plot_h - plot_h * tick / 10;
        for x in 10..CHART_W - 10 {
            img.put_pixel(x, y.min(CHART_H - 1), Rgb([220, 220, 220]));
        }
    }
    for (i, (value, color)) in [m.pixel_accuracy, m.f1, m.iou].into_iter().zip(BAR_COLORS).enumerate() {
        let height = (value.clamp(0.0, 1.0) * f64::from(plot_h)).round() as u32;
        let x0 = 30 + i as u32 * 70;
        for x in x0..x0 + 40 {
            for y in (10 + plot_h - height)..=(10 + plot_h) {
                img.put_pixel(x, y.min(CHART_H - 1), Rgb(color));
            }
        }
    }
    img
}

/// Nearest-neighbour thumbnail no larger than `max_side`.
///
/// Without truth: white for 1, black for 0. With truth: true positives white,
/// false positives red, false negatives blue, true negatives black.
pub fn thumbnail(pred: &Mask, truth: Option<&Mask>, max_side: usize) -> Result<RgbImage> {
    if let Some(t) = truth {
        if t.shape() != pred.shape() {
            return Err(CanopyError::Usage(format!(
                "prediction is {:?} but truth is {:?}",
                pred.shape(),
                t.shape()
            )));
        }
    }
    let (h, w) = pred.shape();
    let scale = (h.max(w) as f64 / max_side as f64).max(1.0);
    let (th, tw) = (((h as f64 / scale).round() as usize).max(1), ((w as f64 / scale).round() as usize).max(1));
    Ok(RgbImage::from_fn(tw as u32, th as u32, |x, y| {
        let r = (y as usize * h / th).min(h - 1);
        let c = (x as usize * w / tw).min(w - 1);
        let p = pred.get(r, c);
        let color = match (p, truth.map(|t| t.get(r, c))) {
            (1, Some(0)) => [220, 40, 40],
            (0, Some(1)) => [40, 90, 220],
            (1, _) => [255, 255, 255],
            _ => [0, 0, 0],
        };
        Rgb(color)
    }))
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| CanopyError::Image { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use canopy_core::metrics::Confusion;

    #[test]
    fn markdown_lists_all_metrics() {
        let m = Confusion { tp: 3, fp: 1, fn_: 1, tn: 3 }.report();
        let md = metrics_markdown(&m);
        assert!(md.contains("| F1 | 0.7500 |"), "{md}");
        assert!(md.contains("| IoU | 0.6000 |"), "{md}");
        assert!(md.contains("| pred 1 | 3 | 1 |"), "{md}");
    }

    #[test]
    fn thumbnail_colors_confusion() {
        let pred = Mask::from_rows(&[[1u8, 1], [0, 0]]).unwrap();
        let truth = Mask::from_rows(&[[1u8, 0], [1, 0]]).unwrap();
        let img = thumbnail(&pred, Some(&truth), 128).unwrap();
        assert_eq!(img.dimensions(), (2, 2));
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(1, 0).0, [220, 40, 40]);
        assert_eq!(img.get_pixel(0, 1).0, [40, 90, 220]);
        assert_eq!(img.get_pixel(1, 1).0, [0, 0, 0]);
    }

    #[test]
    fn thumbnail_downsamples_large_masks() {
        let img = thumbnail(&Mask::ones(256, 200), None, 128).unwrap();
        assert_eq!(img.dimensions(), (100, 128));
    }

    #[test]
    fn bar_height_tracks_value() {
        let m = Confusion { tp: 1, fp: 0, fn_: 0, tn: 1 }.report();
        let img = bar_chart(&m);
        assert_eq!(img.get_pixel(40, 12).0, BAR_COLORS[0]);
    }
}
