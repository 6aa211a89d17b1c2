//! Stroke rasterisation shared by InkML rendering and synthetic formulas.

use super::inkml::{InkDocument, Point};
use super::Image;
use crate::error::{Error, Result};

pub const MARGIN: usize = 4;
/// Widest accepted width/height ratio of the scaled ink.
const MAX_ASPECT: f64 = 8.0;

/// Line thickness used for a given output height.
pub fn default_thickness(target_height: usize) -> f64 {
    (target_height / 32).max(1) as f64
}

/// Sets every pixel whose centre lies within `radius` of segment `a`–`b`.
/// Coordinates are continuous, with pixel `(x, y)` covering `[x, x+1) × [y, y+1)`.
pub fn draw_segment(img: &mut Image, a: Point, b: Point, radius: f64) {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let x0 = (a.x.min(b.x) - radius - 1.0).floor().max(0.0) as isize;
    let x1 = ((a.x.max(b.x) + radius + 1.0).ceil() as isize).min(w - 1);
    let y0 = (a.y.min(b.y) - radius - 1.0).floor().max(0.0) as isize;
    let y1 = ((a.y.max(b.y) + radius + 1.0).ceil() as isize).min(h - 1);
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let r2 = radius * radius;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 { (((px - a.x) * dx + (py - a.y) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (cx, cy) = (a.x + t * dx - px, a.y + t * dy - py);
            if cx * cx + cy * cy <= r2 {
                img.set(y as usize, x as usize, 1.0);
            }
        }
    }
    // Always mark the pixels under the endpoints so thin strokes never vanish.
    for p in [a, b] {
        let (x, y) = (p.x.floor() as isize, p.y.floor() as isize);
        if x >= 0 && y >= 0 && x < w && y < h {
            img.set(y as usize, x as usize, 1.0);
        }
    }
}

pub fn draw_polyline(img: &mut Image, points: &[Point], radius: f64) {
    match points {
        [] => {}
        [p] => draw_segment(img, *p, *p, radius),
        _ => points.windows(2).for_each(|w| draw_segment(img, w[0], w[1], radius)),
    }
}

/// Renders with the default thickness `max(1, target_height / 32)`.
pub fn render_strokes(doc: &InkDocument, target_height: usize) -> Result<Image> {
    render_strokes_with(doc, target_height, default_thickness(target_height))
}

/// Scales the ink (aspect preserved) to fill `target_height` minus a fixed
/// margin and draws each stroke as connected segments.
pub fn render_strokes_with(doc: &InkDocument, target_height: usize, thickness: f64) -> Result<Image> {
    if doc.strokes.is_empty() || doc.strokes.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput("document has no strokes or an empty stroke".into()));
    }
    if target_height < super::MIN_SIDE {
        return Err(Error::InvalidInput(format!("target height {target_height} below {}", super::MIN_SIDE)));
    }
    let (min_x, min_y, max_x, max_y) = doc.bounds().expect("non-empty document");
    let (bw, bh) = (max_x - min_x, max_y - min_y);
    let inner = (target_height - 2 * MARGIN) as f64;
    let extent = bh.max(bw / MAX_ASPECT);
    let scale = if extent > 0.0 { inner / extent } else { 0.0 };
    let content_w = bw * scale;
    let width = (content_w.ceil() as usize + 2 * MARGIN + 1).max(super::MIN_SIDE);
    let off_x = MARGIN as f64 + ((width - 2 * MARGIN) as f64 - content_w) / 2.0;
    let off_y = MARGIN as f64 + (inner - bh * scale) / 2.0;
    let mut img = Image::blank(target_height, width);
    let radius = thickness / 2.0;
    for stroke in &doc.strokes {
        let pts: Vec<Point> = stroke
            .iter()
            .map(|p| Point { x: off_x + (p.x - min_x) * scale, y: off_y + (p.y - min_y) * scale })
            .collect();
        draw_polyline(&mut img, &pts, radius);
    }
    Ok(img)
}

/// Number of 8-connected ink components (pixels > 0.5).
pub fn connected_components(img: &Image) -> usize {
    let (h, w) = (img.height(), img.width());
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || img.pixels()[start] <= 0.5 {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && img.pixels()[j] > 0.5 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}
