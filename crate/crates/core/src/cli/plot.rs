use image::{Rgb, RgbImage};

use super::CurvePoint;
use crate::error::Result;
use crate::trainer::Policy;

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 30;

fn color(p: Policy) -> Rgb<u8> {
    match p {
        Policy::DesMoe => Rgb([200, 40, 40]),
        Policy::StaticEsft => Rgb([40, 120, 200]),
        Policy::Fft => Rgb([60, 160, 60]),
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Retention against N, one colored line per policy (red DES-MoE, blue
/// STATIC_ESFT, green FFT) on a 0..max(1, peak) vertical scale. The gray
/// horizontal line marks retention 1.
pub fn retention_plot(curve: &[CurvePoint]) -> Result<RgbImage> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let n_lo = curve.iter().map(|p| p.n).min().unwrap_or(0) as f64;
    let n_hi = curve.iter().map(|p| p.n).max().unwrap_or(1) as f64;
    let y_hi = curve.iter().map(|p| p.mean_retention).fold(1.0, f64::max) * 1.05;
    let px = |n: f64| MARGIN as f64 + (n - n_lo) / (n_hi - n_lo).max(1.0) * (W - 2 * MARGIN) as f64;
    let py = |r: f64| (H - MARGIN) as f64 - r / y_hi * (H - 2 * MARGIN) as f64;
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (MARGIN as i64, (H - MARGIN) as i64), ((W - MARGIN) as i64, (H - MARGIN) as i64), axis);
    line(&mut img, (MARGIN as i64, MARGIN as i64), (MARGIN as i64, (H - MARGIN) as i64), axis);
    let one = py(1.0).round() as i64;
    line(&mut img, (MARGIN as i64, one), ((W - MARGIN) as i64, one), Rgb([180, 180, 180]));
    for policy in Policy::ALL {
        let pts: Vec<(i64, i64)> = curve
            .iter()
            .filter(|p| p.policy == policy)
            .map(|p| (px(p.n as f64).round() as i64, py(p.mean_retention).round() as i64))
            .collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], color(policy));
        }
        for &(x, y) in &pts {
            for d in -2..=2 {
                line(&mut img, (x - 2, y + d), (x + 2, y + d), color(policy));
            }
        }
    }
    Ok(img)
}
