//! PSNR and SSIM on the BT.601 luma channel, plus rank correlation.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Full-range BT.601 RGB to YCbCr.
pub fn rgb_to_ycbcr(x: &Tensor) -> Result<Tensor> {
    if x.channels() != 3 {
        return shape_err(format!("expected 3 channels, got {}", x.channels()));
    }
    let (_, h, w) = x.shape();
    let mut out = Tensor::zeros(3, h, w);
    let n = h * w;
    for i in 0..n {
        let (r, g, b) = (x.data()[i], x.data()[n + i], x.data()[2 * n + i]);
        let d = out.data_mut();
        d[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        d[n + i] = 0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b;
        d[2 * n + i] = 0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    }
    Ok(out)
}

/// Luma plane as a one-channel tensor. One-channel input passes through.
pub fn luma(x: &Tensor) -> Result<Tensor> {
    match x.channels() {
        1 => Ok(x.clone()),
        3 => {
            let ycc = rgb_to_ycbcr(x)?;
            Tensor::from_vec(1, x.height(), x.width(), ycc.channel(0).to_vec())
        }
        c => shape_err(format!("expected 1 or 3 channels, got {c}")),
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / n
}

/// `10 log10(1 / MSE)` over luma (`on_y`) or all RGB values, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, on_y: bool) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let e = if on_y { mse(&luma(a)?, &luma(b)?) } else { mse(a, b) };
    if e <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable weighted filter over valid windows only.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &x[y * w..(y + 1) * w];
        for xo in 0..ow {
            rows[y * ow + xo] = taps.iter().zip(&src[xo..xo + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(yo + i) * ow + xo])
                .sum();
        }
    }
    out
}

/// Mean SSIM on the luma channel with an 11×11 Gaussian window (σ = 1.5),
/// over every window that fits inside the image.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let (_, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (ya, yb) = (luma(a)?, luma(b)?);
    let (pa, pb) = (ya.data(), yb.data());
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        pa.iter().zip(pb).map(|(x, y)| f(*x, *y)).collect()
    };
    let mu_a = filter_valid(pa, h, w, &taps);
    let mu_b = filter_valid(pb, h, w, &taps);
    let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share their average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return shape_err("spearman needs two equal-length samples of at least 2");
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ycbcr_primaries() {
        let px = |r, g, b| Tensor::from_vec(3, 1, 1, vec![r, g, b]).unwrap();
        assert!((rgb_to_ycbcr(&px(1.0, 1.0, 1.0)).unwrap().data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(rgb_to_ycbcr(&px(0.0, 0.0, 0.0)).unwrap().data()[0], 0.0);
        assert!((rgb_to_ycbcr(&px(1.0, 0.0, 0.0)).unwrap().data()[0] - 0.299).abs() < 1e-15);
        let gray = rgb_to_ycbcr(&px(0.4, 0.4, 0.4)).unwrap();
        assert!((gray.data()[1] - 0.5).abs() < 1e-12 && (gray.data()[2] - 0.5).abs() < 1e-12);
        assert!(rgb_to_ycbcr(&Tensor::zeros(2, 1, 1)).is_err());
    }

    #[test]
    fn psnr_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 8, 8).map(|v| v * 0.4);
        assert_eq!(psnr(&a, &a, true).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, true).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&a, &b, false).unwrap() - 20.0).abs() < 1e-9);
        let c = a.map(|v| v + 0.5);
        assert!((psnr(&a, &c, true).unwrap() - 6.0206).abs() < 1e-3);
        let d = random(&mut rng, 3, 8, 8);
        assert_eq!(psnr(&a, &d, true).unwrap(), psnr(&d, &a, true).unwrap());
        assert!(psnr(&a, &Tensor::zeros(3, 8, 7), true).is_err());
    }

    // Direct sliding-window evaluation with the 2-D Gaussian, written
    // independently of the separable filter.
    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let ya = luma(a).unwrap();
        let yb = luma(b).unwrap();
        let (h, w) = (ya.height(), ya.width());
        let mut win = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(dx * dx + dy * dy) / 4.5).exp();
                s += *v;
            }
        }
        let mut total = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = win[i][j] / s;
                        ma += wt * ya.at(0, y0 + i, x0 + j);
                        mb += wt * yb.at(0, y0 + i, x0 + j);
                    }
                }
                let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = win[i][j] / s;
                        let da = ya.at(0, y0 + i, x0 + j) - ma;
                        let db = yb.at(0, y0 + i, x0 + j) - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cv += wt * da * db;
                    }
                }
                let c1 = 0.0001;
                let c2 = 0.0009;
                total += (2.0 * ma * mb + c1) * (2.0 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 3, 16, 19);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 1.0);
        let b = random(&mut rng, 3, 16, 19);
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-8);
        let c = a.map(|v| 0.8 * v + 0.05);
        assert!((ssim(&a, &c).unwrap() - ssim_oracle(&a, &c)).abs() < 1e-8);
        assert!(matches!(ssim(&Tensor::zeros(3, 10, 12), &Tensor::zeros(3, 10, 12)), Err(Error::Size(_))));
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // hand-computed: ranks x = 1,2,3,4 and y = 1,3,2,4 give 1 − 6·2/60
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.3, 0.2, 0.4]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }
}
