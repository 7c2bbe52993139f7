//! Synthetic low-light pairs: procedural ground truth, degraded with an
//! inverse gamma, an exposure scale and Gaussian noise.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ppm::{self, Rgb8};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Gradient,
    Checkers,
    Blobs,
    Strokes,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Self::Gradient, Self::Checkers, Self::Blobs, Self::Strokes];
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gradient => "gradient",
            Self::Checkers => "checkers",
            Self::Blobs => "blobs",
            Self::Strokes => "strokes",
        })
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gradient" | "gradients" => Ok(Self::Gradient),
            "checkers" => Ok(Self::Checkers),
            "blobs" => Ok(Self::Blobs),
            "strokes" => Ok(Self::Strokes),
            _ => Err(Error::Config(format!(
                "unknown pattern `{s}` (expected gradient, checkers, blobs or strokes)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Pair `i` uses `patterns[i % len]`.
    pub patterns: Vec<Pattern>,
    pub gamma_range: (f64, f64),
    pub alpha_range: (f64, f64),
    pub noise_range: (f64, f64),
    /// Intensity range of the ground-truth images.
    pub gt_range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            count: 4,
            height: 64,
            width: 64,
            patterns: Pattern::ALL.to_vec(),
            gamma_range: (2.0, 5.0),
            alpha_range: (0.1, 0.5),
            noise_range: (0.0, 0.05),
            gt_range: (0.5, 1.0),
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min && hi <= max {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} range [{lo}, {hi}] must lie within [{min}, {max}]")))
            }
        };
        if self.count == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("count, height and width must be at least 1".into()));
        }
        if self.patterns.is_empty() {
            return Err(Error::Config("at least one pattern is required".into()));
        }
        range("gamma", self.gamma_range, 0.0, f64::MAX)?;
        range("alpha", self.alpha_range, 0.0, 1.0)?;
        range("noise", self.noise_range, 0.0, 1.0)?;
        range("gt", self.gt_range, 0.0, 1.0)
    }
}

/// Degradation parameters of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub index: usize,
    pub pattern: Pattern,
    pub gamma_d: f64,
    pub alpha: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct ImagePair<T: Real = f32> {
    pub name: String,
    pub low: Tensor<T>,
    pub gt: Tensor<T>,
}

/// `clamp(gt^γ · α + noise, 0, 1)`.
pub fn degrade(gt: f64, gamma_d: f64, alpha: f64, noise: f64) -> f64 {
    (gt.powf(gamma_d) * alpha + noise).clamp(0.0, 1.0)
}

fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Pattern intensities in `[0, 1]`, `[H, W, 3]` row-major.
fn render(pattern: Pattern, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![0.0; h * w * 3];
    let mut put = |y: usize, x: usize, c: [f64; 3]| {
        let i = (y * w + x) * 3;
        img[i..i + 3].copy_from_slice(&c);
    };
    match pattern {
        Pattern::Gradient => {
            let (a, b) = (color(rng), color(rng));
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            let span = dx.abs() * w as f64 + dy.abs() * h as f64;
            let off = dx.min(0.0) * w as f64 + dy.min(0.0) * h as f64;
            for y in 0..h {
                for x in 0..w {
                    let t = ((x as f64 * dx + y as f64 * dy - off) / span).clamp(0.0, 1.0);
                    put(y, x, std::array::from_fn(|k| a[k] * (1.0 - t) + b[k] * t));
                }
            }
        }
        Pattern::Checkers => {
            let (a, b) = (color(rng), color(rng));
            let cell = rng.random_range(4..=16usize);
            for y in 0..h {
                for x in 0..w {
                    put(y, x, if (y / cell + x / cell) % 2 == 0 { a } else { b });
                }
            }
        }
        Pattern::Blobs => {
            let bg = color(rng);
            let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..rng.random_range(3..=6))
                .map(|_| {
                    let c = color(rng);
                    let cy = rng.random_range(0.0..h as f64);
                    let cx = rng.random_range(0.0..w as f64);
                    let r = rng.random_range(0.08..0.3) * h.min(w) as f64;
                    (c, cy, cx, r)
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let mut px = bg;
                    for (c, cy, cx, r) in &blobs {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let wgt = (-d2 / (2.0 * r * r)).exp();
                        for k in 0..3 {
                            px[k] = px[k] * (1.0 - wgt) + c[k] * wgt;
                        }
                    }
                    put(y, x, px);
                }
            }
        }
        Pattern::Strokes => {
            let bg = color(rng);
            for y in 0..h {
                for x in 0..w {
                    put(y, x, bg);
                }
            }
            let ink = color(rng);
            let n = rng.random_range(4..=9);
            for _ in 0..n {
                let (y0, x0): (f64, f64) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
                let len = rng.random_range(0.2..0.6) * h.min(w) as f64;
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let half = rng.random_range(0.8..2.0);
                let (ux, uy) = (theta.cos(), theta.sin());
                for y in 0..h {
                    for x in 0..w {
                        let (px, py) = (x as f64 - x0, y as f64 - y0);
                        let t = (px * ux + py * uy).clamp(0.0, len);
                        let d = ((px - t * ux).powi(2) + (py - t * uy).powi(2)).sqrt();
                        if d <= half {
                            put(y, x, ink);
                        }
                    }
                }
            }
        }
    }
    img
}

/// Generate one pair as 8-bit images plus its record.
pub fn generate_pair(spec: &SyntheticDatasetSpec, index: usize) -> (Rgb8, Rgb8, PairRecord) {
    let mut rng = pair_rng(spec.seed, index);
    let pattern = spec.patterns[index % spec.patterns.len()];
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let gamma_d = draw(&mut rng, spec.gamma_range);
    let alpha = draw(&mut rng, spec.alpha_range);
    let sigma = draw(&mut rng, spec.noise_range);
    let (h, w) = (spec.height, spec.width);
    let (glo, ghi) = spec.gt_range;
    let gt: Vec<u8> = render(pattern, h, w, &mut rng)
        .into_iter()
        .map(|v| ppm::quantize(glo + (ghi - glo) * v))
        .collect();
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("sigma is finite and non-negative");
    let low = gt
        .iter()
        .map(|&g| {
            let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            ppm::quantize(degrade(f64::from(g) / 255.0, gamma_d, alpha, n))
        })
        .collect();
    let record = PairRecord {
        index,
        pattern,
        gamma_d,
        alpha,
        sigma,
    };
    let img = |pixels| Rgb8 {
        width: w,
        height: h,
        pixels,
    };
    (img(low), img(gt), record)
}

pub fn pair_name(index: usize) -> String {
    format!("{index:04}.ppm")
}

pub const MANIFEST: &str = "manifest.csv";

/// In-memory pairs, identical to what [`gen_synthetic`] writes.
pub fn generate_pairs<T: Real>(spec: &SyntheticDatasetSpec) -> Result<Vec<(ImagePair<T>, PairRecord)>> {
    spec.validate()?;
    Ok((0..spec.count)
        .map(|i| {
            let (low, gt, rec) = generate_pair(spec, i);
            let pair = ImagePair {
                name: pair_name(i),
                low: ppm::to_tensor(&low),
                gt: ppm::to_tensor(&gt),
            };
            (pair, rec)
        })
        .collect())
}

/// Write `low/NNNN.ppm`, `gt/NNNN.ppm` and `manifest.csv` under `dir`.
pub fn gen_synthetic(spec: &SyntheticDatasetSpec, dir: &Path) -> Result<Vec<PairRecord>> {
    spec.validate()?;
    let (low_dir, gt_dir) = (dir.join("low"), dir.join("gt"));
    for d in [&low_dir, &gt_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = String::from("index,file,pattern,gamma_d,alpha,sigma\n");
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let (low, gt, rec) = generate_pair(spec, i);
        let name = pair_name(i);
        for (d, img) in [(&low_dir, &low), (&gt_dir, &gt)] {
            let p = d.join(&name);
            fs::write(&p, ppm::encode_ppm(img)).map_err(|e| Error::io(&p, e))?;
        }
        manifest.push_str(&format!(
            "{},{},{},{:.17},{:.17},{:.17}\n",
            rec.index, name, rec.pattern, rec.gamma_d, rec.alpha, rec.sigma
        ));
        records.push(rec);
    }
    let mp = dir.join(MANIFEST);
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    Ok(records)
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    Ok(files)
}

/// Pairs of same-named images from `low_dir` and `gt_dir`, sorted by name.
pub fn load_pairs_from<T: Real>(low_dir: &Path, gt_dir: &Path) -> Result<Vec<ImagePair<T>>> {
    let mut pairs = Vec::new();
    for low_path in ppm_files(low_dir)? {
        let name = low_path.file_name().unwrap().to_string_lossy().into_owned();
        let gt_path = gt_dir.join(&name);
        if !gt_path.exists() {
            return Err(Error::Config(format!("{} has no counterpart {}", low_path.display(), gt_path.display())));
        }
        let low = ppm::read_image(&low_path)?;
        let gt = ppm::read_image(&gt_path)?;
        if low.shape() != gt.shape() {
            return Err(Error::shape("load_pairs", format!("{name}: {:?} vs {:?}", low.shape(), gt.shape())));
        }
        pairs.push(ImagePair { name, low, gt });
    }
    if pairs.is_empty() {
        return Err(Error::Config(format!("no .ppm images found in {}", low_dir.display())));
    }
    Ok(pairs)
}

/// Pairs of a dataset directory with `low/` and `gt/` subdirectories.
pub fn load_pairs<T: Real>(dir: &Path) -> Result<Vec<ImagePair<T>>> {
    load_pairs_from(&dir.join("low"), &dir.join("gt"))
}
