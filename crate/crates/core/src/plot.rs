//! Minimal chart rendering for pool-usage reports. One panel per weather
//! label, one bar per pool row, heights normalized within the panel.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::prompt_pool::SelectionRecord;

const BAR_W: u32 = 9;
const BAR_GAP: u32 = 3;
const PANEL_H: u32 = 72;
const MARGIN: u32 = 6;
const BASELINE: Rgb<u8> = Rgb([60, 60, 60]);
const BACKGROUND: Rgb<u8> = Rgb([250, 250, 250]);

/// Fixed palette cycled over label panels.
const PALETTE: [Rgb<u8>; 5] = [
    Rgb([66, 133, 244]),
    Rgb([219, 68, 55]),
    Rgb([244, 180, 0]),
    Rgb([15, 157, 88]),
    Rgb([171, 71, 188]),
];

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, color);
        }
    }
}

/// Renders per-label selection histograms stacked vertically and writes a
/// PNG. Bars are scaled to the tallest count within their own panel, so
/// every panel uses its full height. Fails when nothing was recorded.
pub fn save_selection_histogram(path: &Path, record: &SelectionRecord) -> Result<()> {
    let labels = record.labels();
    if labels.is_empty() {
        return Err(Error::Image("no selections recorded to plot".into()));
    }
    let n = record.pool_size() as u32;
    let width = 2 * MARGIN + n * (BAR_W + BAR_GAP);
    let height = MARGIN + labels.len() as u32 * (PANEL_H + MARGIN);
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);

    for (li, &label) in labels.iter().enumerate() {
        let counts = record.counts(label).expect("labels() only lists recorded labels");
        let top = MARGIN + li as u32 * (PANEL_H + MARGIN);
        let base = top + PANEL_H - 1;
        let peak = counts.iter().copied().max().unwrap_or(0).max(1);
        let color = PALETTE[li % PALETTE.len()];
        for (bi, &c) in counts.iter().enumerate() {
            let x0 = MARGIN + bi as u32 * (BAR_W + BAR_GAP);
            let h = ((c as f64 / peak as f64) * (PANEL_H - 2) as f64).round() as u32;
            if h > 0 {
                fill_rect(&mut img, x0, base - h, BAR_W, h, color);
            }
        }
        fill_rect(&mut img, MARGIN, base, width - 2 * MARGIN, 1, BASELINE);
    }

    img.save(path)
        .map_err(|e| Error::Image(format!("write {}: {e}", path.display())))
}
