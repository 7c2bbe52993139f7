use crate::error::{Error, Result};
use crate::nn::hwc_dims;
use crate::tensor::{Real, Tensor};

/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

fn clamped<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect()
}

fn same_image_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<[usize; 3]> {
    let dims = hwc_dims(a, op)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(dims)
}

/// `10·log10(peak² / MSE)` on inputs clamped to `[0, 1]`, capped at
/// [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_image_shape(a, b, "psnr")?;
    Ok(psnr_from_mse(mse(&clamped(a), &clamped(b)), peak))
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

fn gaussian(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over Gaussian-weighted windows, computed per channel on the
/// valid region and averaged over channels. Inputs are clamped to `[0, 1]`.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    let [h, w, c] = same_image_shape(a, b, "ssim")?;
    if h < cfg.window || w < cfg.window {
        return Err(Error::Config(format!(
            "ssim needs images of at least {0}x{0}, got {h}x{w}",
            cfg.window
        )));
    }
    let (av, bv) = (clamped(a), clamped(b));
    let k = gaussian(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    let plane = |v: &[f64], ch: usize| -> Vec<f64> { (0..h * w).map(|p| v[p * c + ch]).collect() };
    let mut total = 0.0;
    for ch in 0..c {
        let x = plane(&av, ch);
        let y = plane(&bv, ch);
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let xx: Vec<f64> = x.iter().map(|p| p * p).collect();
        let yy: Vec<f64> = y.iter().map(|q| q * q).collect();
        let (mx, oh, ow) = filter_valid(&x, h, w, &k);
        let (my, _, _) = filter_valid(&y, h, w, &k);
        let (sxx, _, _) = filter_valid(&xx, h, w, &k);
        let (syy, _, _) = filter_valid(&yy, h, w, &k);
        let (sxy, _, _) = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn img(seed: u64) -> Tensor<f64> {
        Tensor::create(&[16, 16, 3], Init::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn psnr_oracles() {
        let a = img(1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
        let zeros = Tensor::<f64>::create(&[4, 4, 3], Init::Zero).unwrap();
        let ones = Tensor::<f64>::create(&[4, 4, 3], Init::One).unwrap();
        assert_eq!(psnr(&zeros, &ones, 1.0).unwrap(), 0.0);
        let tenth = Tensor::<f64>::create(&[4, 4, 3], Init::Constant(0.1)).unwrap();
        assert!((psnr(&zeros, &tenth, 1.0).unwrap() - 20.0).abs() < 1e-6);
    }

    #[test]
    fn psnr_clamps_inputs() {
        let a = Tensor::<f64>::create(&[2, 2, 3], Init::Constant(1.5)).unwrap();
        let b = Tensor::<f64>::create(&[2, 2, 3], Init::One).unwrap();
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 99.0);
    }

    #[test]
    fn ssim_self_symmetry_and_ordering() {
        let cfg = SsimConfig::default();
        let a = img(2);
        let b = img(3);
        assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(ssim(&a, &b, &cfg).unwrap(), ssim(&b, &a, &cfg).unwrap());
        let inv = a.scale(-1.0).add_scalar(1.0);
        assert!(ssim(&a, &inv, &cfg).unwrap() < ssim(&a, &a, &cfg).unwrap());
    }

    #[test]
    fn ssim_constant_images_match_luminance_term() {
        let cfg = SsimConfig::default();
        let a = Tensor::<f64>::create(&[12, 12, 3], Init::Constant(0.2)).unwrap();
        let b = Tensor::<f64>::create(&[12, 12, 3], Init::Constant(0.8)).unwrap();
        let c1: f64 = 1e-4;
        let expected = (2.0 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
        let got = ssim(&a, &b, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-4, "{got} vs {expected}");
        assert!((expected - 0.4706).abs() < 1e-4);
        assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f64>::create(&[10, 12, 3], Init::Zero).unwrap();
        assert!(matches!(ssim(&a, &a, &SsimConfig::default()), Err(Error::Config(_))));
    }
}
