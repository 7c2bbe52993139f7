//! Gamma prediction (global scalar and per-pixel map) and gamma application.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{hwc_dims, hwc_to_nchw, Conv, Linear};
use crate::tensor::{ParamStore, Real, Tensor};

/// Lower clamp applied to intensities before taking logarithms.
pub const DEFAULT_FLOOR: f64 = 1e-4;

/// Scalar correction factor, stored as a one-element tensor in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct GlobalGamma<T: Real = f32> {
    pub value: Tensor<T>,
}

impl<T: Real> GlobalGamma<T> {
    pub fn get(&self) -> f64 {
        self.value.item().as_f64()
    }
}

/// Per-pixel, per-channel correction factors `[H, W, 3]` in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct LocalGammaMap<T: Real = f32> {
    pub map: Tensor<T>,
}

impl<T: Real> AsRef<Tensor<T>> for GlobalGamma<T> {
    fn as_ref(&self) -> &Tensor<T> {
        &self.value
    }
}

impl<T: Real> AsRef<Tensor<T>> for LocalGammaMap<T> {
    fn as_ref(&self) -> &Tensor<T> {
        &self.map
    }
}

fn check_rgb<T: Real>(image: &Tensor<T>, op: &'static str) -> Result<()> {
    let [_, _, c] = hwc_dims(image, op)?;
    if c != 3 {
        return Err(Error::shape(op, format!("expected 3 channels, got {c}")));
    }
    Ok(())
}

/// Global gamma predictor: `sigmoid(FC(AvgPool(Conv(I))))`.
#[derive(Clone, Debug)]
pub struct Ggcm {
    pub conv: Conv,
    pub fc: Linear,
}

impl Ggcm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Ggcm {
            conv: Conv::new(ps, &format!("{name}.conv"), 3, channels, 3, rng)?,
            fc: Linear::new(ps, &format!("{name}.fc"), channels, 1, true, rng)?,
        })
    }

    pub fn predict<T: Real>(&self, ps: &ParamStore<T>, image: &Tensor<T>) -> Result<GlobalGamma<T>> {
        check_rgb(image, "ggcm")?;
        let f = hwc_to_nchw(image)?.conv2d(ps.get(self.conv.weight), Some(ps.get(self.conv.bias)), 1, 1)?;
        let pooled = f.global_avg_pool()?; // [1, c]
        let value = self.fc.forward(ps, &pooled)?.sigmoid().reshape(&[1])?;
        Ok(GlobalGamma { value })
    }
}

/// Local gamma predictor: three 3×3 convolutions `3 → c → c → 3` with GELU
/// between them and a sigmoid at the end.
#[derive(Clone, Debug)]
pub struct Lgcm {
    pub convs: [Conv; 3],
}

impl Lgcm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Lgcm {
            convs: [
                Conv::new(ps, &format!("{name}.conv1"), 3, channels, 3, rng)?,
                Conv::new(ps, &format!("{name}.conv2"), channels, channels, 3, rng)?,
                Conv::new(ps, &format!("{name}.conv3"), channels, 3, 3, rng)?,
            ],
        })
    }

    pub fn predict<T: Real>(&self, ps: &ParamStore<T>, image: &Tensor<T>) -> Result<LocalGammaMap<T>> {
        check_rgb(image, "lgcm")?;
        let h = self.convs[0].forward(ps, image)?.gelu();
        let h = self.convs[1].forward(ps, &h)?.gelu();
        let map = self.convs[2].forward(ps, &h)?.sigmoid();
        Ok(LocalGammaMap { map })
    }
}

/// `exp(Γ ⊙ ln(clamp(I, floor, 1)))`.
///
/// `gamma` is either a one-element tensor or has the shape of `image`.
pub fn apply_gamma_exact<T: Real>(image: &Tensor<T>, gamma: &Tensor<T>, floor: f64) -> Result<Tensor<T>> {
    Ok(image.clamp(floor, 1.0).ln()?.mul(gamma)?.exp())
}

/// Truncated Taylor expansion of `I^Γ` around `Γ ln I = 0`:
/// `Σ_{j=0..order} (Γ ln I)^j / j!`.
///
/// The expansion is evaluated with Horner's rule, so neither the forward
/// nor the backward pass calls `exp` or `pow`.
pub fn apply_gamma_taylor<T: Real>(
    image: &Tensor<T>,
    gamma: &Tensor<T>,
    order: usize,
    floor: f64,
) -> Result<Tensor<T>> {
    if order < 1 {
        return Err(Error::InvalidOrder(order));
    }
    let x = image.clamp(floor, 1.0).ln()?.mul(gamma)?;
    Ok(x.polynomial(&taylor_coefficients(order)))
}

/// `1/j!` for `j = 0..=order`.
pub fn taylor_coefficients(order: usize) -> Vec<f64> {
    let mut c = Vec::with_capacity(order + 1);
    let mut f = 1.0;
    for j in 0..=order {
        if j > 0 {
            f /= j as f64;
        }
        c.push(f);
    }
    c
}

/// Lagrange remainder bound of the order-`order` expansion of `e^x`:
/// `|x|^(order+1) e^max(0,x) / (order+1)!`.
pub fn taylor_error_bound(x: f64, order: usize) -> f64 {
    let k = order as i32 + 1;
    let fact: f64 = (1..=k).map(f64::from).product();
    x.abs().powi(k) * x.max(0.0).exp() / fact
}

#[derive(Clone, Debug)]
pub struct GammaBenchReport {
    pub element_count: usize,
    pub iterations: usize,
    pub exact_forward_ns: u64,
    pub exact_backward_ns: u64,
    pub taylor_forward_ns: u64,
    pub taylor_backward_ns: u64,
    /// Largest `|taylor − exact|` over the whole sample.
    pub max_abs_error: f64,
    /// Largest `|taylor − exact|` over samples with `|γ ln I| ≤ 0.5`.
    pub max_abs_error_bounded: f64,
    /// Per-iteration raw timings `[exact_fwd, exact_bwd, taylor_fwd, taylor_bwd]`.
    pub samples: Vec<[u64; 4]>,
}

impl GammaBenchReport {
    pub fn exact_total_ns(&self) -> u64 {
        self.exact_forward_ns + self.exact_backward_ns
    }

    pub fn taylor_total_ns(&self) -> u64 {
        self.taylor_forward_ns + self.taylor_backward_ns
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "element_count={}\niterations={}\nexact_forward_ns={}\nexact_backward_ns={}\n\
             taylor_forward_ns={}\ntaylor_backward_ns={}\nexact_total_ns={}\ntaylor_total_ns={}\n\
             max_abs_error={:.6e}\nmax_abs_error_bounded={:.6e}\n",
            self.element_count,
            self.iterations,
            self.exact_forward_ns,
            self.exact_backward_ns,
            self.taylor_forward_ns,
            self.taylor_backward_ns,
            self.exact_total_ns(),
            self.taylor_total_ns(),
            self.max_abs_error,
            self.max_abs_error_bounded,
        )
    }

    /// One CSV row per iteration.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,exact_forward_ns,exact_backward_ns,taylor_forward_ns,taylor_backward_ns\n");
        for (i, r) in self.samples.iter().enumerate() {
            s.push_str(&format!("{i},{},{},{},{}\n", r[0], r[1], r[2], r[3]));
        }
        s
    }
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2].max(1)
}

/// Time forward and backward of both gamma paths on the same random data,
/// `I ∈ [0.05, 1]`, `γ ∈ [0.3, 1]`, one γ per element.
pub fn bench_gamma(n_elements: usize, iterations: usize, seed: u64) -> Result<GammaBenchReport> {
    if n_elements == 0 || iterations == 0 {
        return Err(Error::Config("bench_gamma needs at least one element and one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image: Vec<f32> = (0..n_elements).map(|_| rng.random_range(0.05..=1.0)).collect();
    let gamma: Vec<f32> = (0..n_elements).map(|_| rng.random_range(0.3..=1.0)).collect();
    let shape = [n_elements];

    let time = |taylor: bool| -> Result<(u64, u64, Vec<f32>)> {
        let i = Tensor::parameter(&shape, image.clone())?;
        let g = Tensor::parameter(&shape, gamma.clone())?;
        let t0 = Instant::now();
        let out = if taylor {
            apply_gamma_taylor(&i, &g, 2, DEFAULT_FLOOR)?
        } else {
            apply_gamma_exact(&i, &g, DEFAULT_FLOOR)?
        };
        let fwd = t0.elapsed().as_nanos() as u64;
        let t1 = Instant::now();
        out.sum().backward()?;
        let bwd = t1.elapsed().as_nanos() as u64;
        Ok((fwd, bwd, out.to_vec()))
    };

    // Untimed warm-up so both paths start with the allocator in the same state.
    time(false)?;
    time(true)?;
    let mut samples = Vec::with_capacity(iterations);
    let mut exact_out = Vec::new();
    let mut taylor_out = Vec::new();
    for it in 0..iterations {
        // Alternate which path runs first to cancel warm-up bias.
        let (e, t) = if it % 2 == 0 {
            let e = time(false)?;
            (e, time(true)?)
        } else {
            let t = time(true)?;
            (time(false)?, t)
        };
        samples.push([e.0, e.1, t.0, t.1]);
        exact_out = e.2;
        taylor_out = t.2;
    }

    let mut max_abs_error = 0.0f64;
    let mut max_abs_error_bounded = 0.0f64;
    for k in 0..n_elements {
        let err = (f64::from(taylor_out[k]) - f64::from(exact_out[k])).abs();
        max_abs_error = max_abs_error.max(err);
        let x = f64::from(gamma[k]) * f64::from(image[k].max(DEFAULT_FLOOR as f32)).ln();
        if x.abs() <= 0.5 {
            max_abs_error_bounded = max_abs_error_bounded.max(err);
        }
    }
    let col = |j: usize| median(samples.iter().map(|s| s[j]).collect());
    Ok(GammaBenchReport {
        element_count: n_elements,
        iterations,
        exact_forward_ns: col(0),
        exact_backward_ns: col(1),
        taylor_forward_ns: col(2),
        taylor_backward_ns: col(3),
        max_abs_error,
        max_abs_error_bounded,
        samples,
    })
}
