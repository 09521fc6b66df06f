//! Image similarity and classification metrics.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => dim_err(format!("expected [H,W] or [C,H,W] image, got {:?}", t.shape())),
    }
}

fn same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Summed-area table with a zero border row and column.
fn integral(src: impl Fn(usize, usize) -> f64, h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += src(y, x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let w1 = w + 1;
    s[(y + k) * w1 + x + k] - s[y * w1 + x + k] - s[(y + k) * w1 + x] + s[y * w1 + x]
}

/// Mean structural similarity over all `8×8` windows (stride 1) of every
/// channel. Windows shrink to the image size for images smaller than 8.
///
/// Local statistics use population (biased) variances; `range` is the
/// dynamic range `L` of the pixel values.
pub fn ssim(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    same(a, b)?;
    let (c, h, w) = planes(a)?;
    let k = SSIM_WINDOW.min(h).min(w);
    if k == 0 {
        return dim_err("ssim of an empty image");
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let n = (k * k) as f64;
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let off = ch * h * w;
        let pa = |y: usize, x: usize| ad[off + y * w + x] as f64;
        let pb = |y: usize, x: usize| bd[off + y * w + x] as f64;
        let sa = integral(pa, h, w);
        let sb = integral(pb, h, w);
        let saa = integral(|y, x| pa(y, x) * pa(y, x), h, w);
        let sbb = integral(|y, x| pb(y, x) * pb(y, x), h, w);
        let sab = integral(|y, x| pa(y, x) * pb(y, x), h, w);
        for y in 0..=h - k {
            for x in 0..=w - k {
                let ma = box_sum(&sa, w, y, x, k) / n;
                let mb = box_sum(&sb, w, y, x, k) / n;
                let va = (box_sum(&saa, w, y, x, k) / n - ma * ma).max(0.0);
                let vb = (box_sum(&sbb, w, y, x, k) / n - mb * mb).max(0.0);
                let cov = box_sum(&sab, w, y, x, k) / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same(a, b)?;
    if a.is_empty() {
        return dim_err("mse of empty tensors");
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, range))
}

pub fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (range * range / mse).log10()).min(PSNR_CAP)
}

/// Mean absolute difference.
pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    same(a, b)?;
    if a.is_empty() {
        return dim_err("l1 distance of empty tensors");
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(s / a.len() as f64)
}

/// Index of the largest logit per row; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let [n, k] = *logits.shape() else {
        return dim_err(format!("logits must be [N,K], got {:?}", logits.shape()));
    };
    Ok((0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Fraction of rows whose argmax equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = argmax_rows(logits)?;
    if pred.len() != labels.len() {
        return dim_err(format!("{} logit rows but {} labels", pred.len(), labels.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> Tensor {
        Tensor::new(&[c, h, w], (0..c * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn ssim_of_identical_is_one() {
        let a = img(3, 10, 12, |i| ((i * 37) % 11) as f32 / 10.0);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_black_vs_white_closed_form() {
        let a = Tensor::zeros(&[1, 8, 8]);
        let b = Tensor::full(&[1, 8, 8], 255.0);
        let l = 255.0f64;
        let c1 = (0.01 * l).powi(2);
        // zero variances: (c1)(c2) / ((L² + c1)(c2))
        let want = c1 / (l * l + c1);
        assert!((ssim(&a, &b, l).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_rejects_mismatch() {
        let a = img(1, 9, 9, |i| (i % 7) as f32 / 7.0);
        let b = img(1, 9, 9, |i| (i % 5) as f32 / 5.0);
        assert_eq!(ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
        assert!(ssim(&a, &Tensor::zeros(&[1, 9, 8]), 1.0).is_err());
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::zeros(&[4]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        // MSE = L²/100 gives 20 dB
        let b = Tensor::full(&[4], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr_from_mse(0.01, 1.0) > psnr_from_mse(0.02, 1.0));
    }

    #[test]
    fn l1_and_top1() {
        let a = img(1, 2, 2, |i| i as f32);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        let logits = Tensor::new(
            &[4, 3],
            vec![
                0.9, 0.1, 0.0, //
                0.0, 1.0, 0.2, //
                0.3, 0.2, 0.1, //
                0.0, 0.0, 5.0,
            ],
        )
        .unwrap();
        assert_eq!(top1_accuracy(&logits, &[0, 1, 2, 2]).unwrap(), 0.75);
    }
}
