use super::Aggregate;
use crate::error::{Error, Result};
use image::{Rgb, RgbImage};
use std::path::Path;

const W: u32 = 640;
const H: u32 = 300;
const PANEL_W: u32 = 300;
const MARGIN: u32 = 20;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=steps {
        let x = x0 + (x1 - x0) * i / steps;
        let y = y0 + (y1 - y0) * i / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn dot(img: &mut RgbImage, (x, y): (i64, i64), c: Rgb<u8>) {
    for dy in -2..=2 {
        for dx in -2..=2 {
            line(img, (x + dx, y + dy), (x + dx, y + dy), c);
        }
    }
}

/// One panel: setting on x, metric on y, both min-max scaled. Missing points
/// leave a gap in the curve.
fn panel(img: &mut RgbImage, left: u32, points: &[(f64, Option<f64>)], colour: Rgb<u8>) {
    let (x0, x1) = (i64::from(left + MARGIN), i64::from(left + PANEL_W - MARGIN));
    let (y0, y1) = (i64::from(H - MARGIN), i64::from(MARGIN));
    let axis = Rgb([0, 0, 0]);
    line(img, (x0, y0), (x1, y0), axis);
    line(img, (x0, y0), (x0, y1), axis);
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().filter_map(|p| p.1).collect();
    if ys.is_empty() {
        return;
    }
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (xlo, xr) = range(&xs);
    let (ylo, yr) = range(&ys);
    let map = |x: f64, y: f64| {
        (
            x0 + ((x - xlo) / xr * (x1 - x0) as f64).round() as i64,
            y0 + ((y - ylo) / yr * (y1 - y0) as f64).round() as i64,
        )
    };
    let mut prev = None;
    for &(x, y) in points {
        match y {
            Some(y) => {
                let p = map(x, y);
                if let Some(q) = prev {
                    line(img, q, p, colour);
                }
                dot(img, p, colour);
                prev = Some(p);
            }
            None => prev = None,
        }
    }
}

/// MSE (left, red) and SSIM (right, blue) against the sweep setting.
pub fn plot_curves(path: &Path, aggregates: &[Aggregate]) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let mse: Vec<(f64, Option<f64>)> = aggregates.iter().map(|a| (a.setting, a.mse)).collect();
    let ssim: Vec<(f64, Option<f64>)> = aggregates.iter().map(|a| (a.setting, a.ssim)).collect();
    panel(&mut img, 0, &mse, Rgb([200, 30, 30]));
    panel(&mut img, W - PANEL_W, &ssim, Rgb([30, 60, 200]));
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}
