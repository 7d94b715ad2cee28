//! Frame-quality metrics for images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Array;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(a: &Array, b: &Array) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.len().max(1) as f64)
}

/// `10·log10(1 / MSE)` with peak value 1; identical inputs give `+∞`.
pub fn psnr(a: &Array, b: &Array) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Mean SSIM over all valid 7×7 windows and channels of two `[H, W, C]` frames.
///
/// Uses a uniform window with population (1/N) statistics, data range 1,
/// `C1 = (0.01)²`, `C2 = (0.03)²`.
pub fn ssim(a: &Array, b: &Array) -> Result<f64> {
    check_same(a, b)?;
    if a.rank() != 3 {
        return Err(Error::InvalidShape(format!("ssim expects [H, W, C], got {:?}", a.shape())));
    }
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let win = SSIM_WINDOW;
    if h < win || w < win {
        return Err(Error::InvalidShape(format!("frame {h}x{w} smaller than the {win}x{win} window")));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = (win * win) as f64;
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        let i = (y * w + x) * c + ch;
                        let (p, q) = (ad[i] as f64, bd[i] as f64);
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-frame metric averaged over the frames of `[T, H, W, C]` videos.
pub fn video_metric(a: &Array, b: &Array, metric: fn(&Array, &Array) -> Result<f64>) -> Result<f64> {
    check_same(a, b)?;
    if a.rank() != 4 || a.shape()[0] == 0 {
        return Err(Error::InvalidShape(format!("expected [T, H, W, C], got {:?}", a.shape())));
    }
    let t = a.shape()[0];
    let per = a.len() / t;
    let fshape = a.shape()[1..].to_vec();
    let mut sum = 0.0;
    for i in 0..t {
        let fa = Array::new(fshape.clone(), a.data()[i * per..(i + 1) * per].to_vec())?;
        let fb = Array::new(fshape.clone(), b.data()[i * per..(i + 1) * per].to_vec())?;
        sum += metric(&fa, &fb)?;
    }
    Ok(sum / t as f64)
}
