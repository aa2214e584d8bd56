//! Minimal raster line plots for ROC curves and loss traces.

use std::path::Path;

use image::{Rgb, RgbImage};

const SIZE: u32 = 400;
const MARGIN: u32 = 30;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

pub struct Series {
    pub points: Vec<(f64, f64)>,
}

struct Canvas {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
        let axis = Rgb([0, 0, 0]);
        for t in MARGIN..=SIZE - MARGIN {
            img.put_pixel(t, SIZE - MARGIN, axis);
            img.put_pixel(MARGIN, t, axis);
        }
        Self { img, x, y }
    }

    fn to_pixel(&self, (px, py): (f64, f64)) -> (f64, f64) {
        let span = (SIZE - 2 * MARGIN) as f64;
        let fx = if self.x.1 > self.x.0 {
            (px - self.x.0) / (self.x.1 - self.x.0)
        } else {
            0.5
        };
        let fy = if self.y.1 > self.y.0 {
            (py - self.y.0) / (self.y.1 - self.y.0)
        } else {
            0.5
        };
        (MARGIN as f64 + fx * span, (SIZE - MARGIN) as f64 - fy * span)
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
        let (x0, y0) = self.to_pixel(a);
        let (x1, y1) = self.to_pixel(b);
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            if x >= 0.0 && y >= 0.0 && x < SIZE as f64 && y < SIZE as f64 {
                self.img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|p| p.0.is_finite() && p.1.is_finite());
    pts.fold(
        ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY)),
        |((x0, x1), (y0, y1)), &(x, y)| ((x0.min(x), x1.max(x)), (y0.min(y), y1.max(y))),
    )
}

/// Draws every series in its own color. `unit_square` fixes both axes to
/// [0, 1] and adds the chance diagonal.
pub fn render(path: &Path, series: &[Series], unit_square: bool) -> image::ImageResult<()> {
    let (x, y) = if unit_square {
        ((0.0, 1.0), (0.0, 1.0))
    } else {
        bounds(series)
    };
    let mut canvas = Canvas::new(x, y);
    if unit_square {
        canvas.line((0.0, 0.0), (1.0, 1.0), Rgb([190, 190, 190]));
    }
    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        for w in s.points.windows(2) {
            canvas.line(w[0], w[1], color);
        }
    }
    canvas.img.save(path)
}
