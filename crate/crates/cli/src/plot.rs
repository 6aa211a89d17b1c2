//! Metrics-log curves rendered as stacked panels in one PNG.

use std::path::Path;

use hmer_core::trainer::IterationRecord;
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

const PANEL_W: u32 = 640;
const PANEL_H: u32 = 120;
const PAD: u32 = 10;

/// Reads a metrics log; errors name the offending line.
pub fn read_metrics(path: &Path) -> Result<Vec<IterationRecord>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r = IterationRecord::parse(line).map_err(|e| format!("{} line {}: {e}", path.display(), n + 1))?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(format!("{} has no records", path.display()));
    }
    Ok(records)
}

/// Series drawn, top to bottom.
pub fn series(records: &[IterationRecord]) -> Vec<(&'static str, Vec<f64>)> {
    let pick = |f: fn(&IterationRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    vec![
        ("total", pick(|r| r.loss.total)),
        ("sup", pick(|r| r.loss.sup)),
        ("cross_l", pick(|r| r.loss.cross_labeled)),
        ("cross_u", pick(|r| r.loss.cross_unlabeled)),
        ("counting", pick(|r| r.loss.counting)),
        ("lr", pick(|r| r.lr)),
    ]
}

const COLORS: [Rgb<u8>; 6] =
    [Rgb([20, 20, 20]), Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44]), Rgb([214, 39, 40]), Rgb([148, 103, 189])];

pub fn render(records: &[IterationRecord]) -> RgbImage {
    let all = series(records);
    let height = all.len() as u32 * (PANEL_H + PAD) + PAD;
    let mut img = RgbImage::from_pixel(PANEL_W + 2 * PAD, height, Rgb([255, 255, 255]));
    for (k, ((_, values), color)) in all.iter().zip(COLORS).enumerate() {
        let top = PAD + k as u32 * (PANEL_H + PAD);
        draw_hollow_rect_mut(&mut img, Rect::at(PAD as i32, top as i32).of_size(PANEL_W, PANEL_H), Rgb([190, 190, 190]));
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let point = |i: usize, v: f64| {
            let x = PAD as f64 + 2.0 + (PANEL_W as f64 - 4.0) * i as f64 / (values.len().max(2) - 1) as f64;
            let y = top as f64 + PANEL_H as f64 - 2.0 - (PANEL_H as f64 - 4.0) * (v - lo) / span;
            (x as f32, y as f32)
        };
        if values.len() == 1 {
            let p = point(0, values[0]);
            draw_line_segment_mut(&mut img, p, (p.0 + 1.0, p.1), color);
        }
        for (i, w) in values.windows(2).enumerate() {
            draw_line_segment_mut(&mut img, point(i, w[0]), point(i + 1, w[1]), color);
        }
    }
    img
}

pub fn cmd_plot(metrics: &Path, out: &Path) -> Result<(), String> {
    let records = read_metrics(metrics)?;
    render(&records).save(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let names: Vec<&str> = series(&records).iter().map(|(n, _)| *n).collect();
    println!("{} points per curve; panels top to bottom: {}", records.len(), names.join(", "));
    Ok(())
}
