use std::fmt;
use std::str::FromStr;

use super::model::StageOutputs;
use crate::error::{Error, Result};
use crate::nn::hwc_dims;
use crate::tensor::{Real, Tensor};

/// How the Charbonnier term aggregates the residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CharbonnierMode {
    /// `sqrt(‖d‖² + ε²)` over the whole tensor.
    #[default]
    Whole,
    /// Mean over elements of `sqrt(d² + ε²)`.
    Pixel,
}

impl fmt::Display for CharbonnierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Whole => "whole",
            Self::Pixel => "pixel",
        })
    }
}

impl FromStr for CharbonnierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "whole" => Ok(Self::Whole),
            "pixel" => Ok(Self::Pixel),
            _ => Err(Error::Config(format!("charbonnier must be `whole` or `pixel`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub eps: f64,
    pub charbonnier: CharbonnierMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eps: 1e-3,
            charbonnier: CharbonnierMode::Whole,
        }
    }
}

pub fn charbonnier<T: Real>(d: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    let sq = d.mul(d)?;
    let eps2 = cfg.eps * cfg.eps;
    match cfg.charbonnier {
        CharbonnierMode::Whole => sq.sum().add_scalar(eps2).sqrt(),
        CharbonnierMode::Pixel => Ok(sq.add_scalar(eps2).sqrt()?.mean()),
    }
}

/// Horizontal and vertical forward differences with a replicated last
/// row/column, so the differences at the far edges are zero.
pub fn image_gradients<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let [h, w, c] = hwc_dims(x, "image_gradients")?;
    let mut right = Vec::with_capacity(x.numel());
    let mut down = Vec::with_capacity(x.numel());
    for y in 0..h {
        for xx in 0..w {
            let r = (y * w + (xx + 1).min(w - 1)) * c;
            let d = ((y + 1).min(h - 1) * w + xx) * c;
            right.extend(r..r + c);
            down.extend(d..d + c);
        }
    }
    let shape = x.shape().to_vec();
    let dx = x.gather(right.into(), shape.clone())?.sub(x)?;
    let dy = x.gather(down.into(), shape)?.sub(x)?;
    Ok((dx, dy))
}

/// `‖∇R − ∇G‖²`, using linearity of `∇` on `d = R − G`.
pub fn gradient_loss<T: Real>(d: &Tensor<T>) -> Result<Tensor<T>> {
    let (dx, dy) = image_gradients(d)?;
    dx.mul(&dx)?.sum().add(&dy.mul(&dy)?.sum())
}

/// Charbonnier plus gradient loss of one stage.
pub fn stage_loss<T: Real>(r: &Tensor<T>, g: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    if r.shape() != g.shape() {
        return Err(Error::shape(
            "loss",
            format!("prediction {:?} and target {:?} differ", r.shape(), g.shape()),
        ));
    }
    let d = r.sub(g)?;
    charbonnier(&d, cfg)?.add(&gradient_loss(&d)?)
}

/// Sum of [`stage_loss`] over the three stages.
pub fn loss_total<T: Real>(outputs: &StageOutputs<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    loss_over_stages(outputs.stages(), target, cfg)
}

pub fn loss_over_stages<T: Real>(stages: [&Tensor<T>; 3], target: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    let [a, b, c] = stages;
    stage_loss(a, target, cfg)?
        .add(&stage_loss(b, target, cfg)?)?
        .add(&stage_loss(c, target, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, GradCheckOptions, Init, ParamStore};

    fn img(seed: u64) -> Tensor<f64> {
        Tensor::create(&[4, 4, 3], Init::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn perfect_prediction_hits_the_floor() {
        let g = img(1);
        let cfg = LossConfig::default();
        let total: f64 = (0..3).map(|_| stage_loss(&g, &g, &cfg).unwrap().item()).sum();
        assert!((total - 3e-3).abs() < 1e-15);
        let px = LossConfig { charbonnier: CharbonnierMode::Pixel, ..cfg };
        assert!((stage_loss(&g, &g, &px).unwrap().item() - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn loss_is_positive() {
        let cfg = LossConfig::default();
        for s in 0..10 {
            assert!(stage_loss(&img(s), &img(s + 100), &cfg).unwrap().item() > 0.0);
        }
    }

    #[test]
    fn gradients_with_replicate_edge() {
        let x = Tensor::<f64>::from_f64(&[2, 2, 1], &[1.0, 3.0, 4.0, 8.0]).unwrap();
        let (dx, dy) = image_gradients(&x).unwrap();
        assert_eq!(dx.data(), &[2.0, 0.0, 4.0, 0.0]);
        assert_eq!(dy.data(), &[3.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_check_against_prediction() {
        for mode in [CharbonnierMode::Whole, CharbonnierMode::Pixel] {
            let g = img(7);
            let mut ps = ParamStore::<f64>::new();
            let r = ps.add("r", &[4, 4, 3], img(8).to_vec()).unwrap();
            let cfg = LossConfig { charbonnier: mode, ..LossConfig::default() };
            let report = gradient_check(|p| stage_loss(p.get(r), &g, &cfg), &mut ps, &GradCheckOptions::default()).unwrap();
            assert!(report.passed(), "{mode}: {report:?}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = img(1);
        let b = Tensor::<f64>::create(&[4, 5, 3], Init::Zero).unwrap();
        assert!(matches!(stage_loss(&a, &b, &LossConfig::default()), Err(Error::Shape { .. })));
    }
}
