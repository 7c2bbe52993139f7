//! Gamma-module (G1–G3) and attention (A1–A4) ablations on a synthetic
//! micro-set.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use super::metrics::{psnr, ssim, SsimConfig};
use super::model::{GammaVariant, IagcConfig, IagcModel};
use super::train::{TrainConfig, Trainer};
use crate::como_vit::AblationVariant;
use crate::data::synthetic::{generate_pairs, SyntheticDatasetSpec};
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationCase {
    Gamma(GammaVariant),
    Attention(AblationVariant),
}

impl AblationCase {
    pub const ALL: [AblationCase; 7] = [
        Self::Gamma(GammaVariant::G1),
        Self::Gamma(GammaVariant::G2),
        Self::Gamma(GammaVariant::G3),
        Self::Attention(AblationVariant::A1),
        Self::Attention(AblationVariant::A2),
        Self::Attention(AblationVariant::A3),
        Self::Attention(AblationVariant::A4),
    ];

    pub fn label(self) -> String {
        match self {
            Self::Gamma(g) => g.to_string(),
            Self::Attention(a) => a.to_string(),
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Self::Gamma(g) => g.describe(),
            Self::Attention(a) => a.describe(),
        }
    }

    /// The model configuration with this case applied. Gamma cases keep
    /// the full attention block, attention cases keep both gamma modules.
    pub fn apply(self, base: &IagcConfig) -> IagcConfig {
        let mut cfg = base.clone();
        match self {
            Self::Gamma(g) => {
                cfg.gamma = g;
                cfg.attention = AblationVariant::A4;
            }
            Self::Attention(a) => {
                cfg.gamma = GammaVariant::G3;
                cfg.attention = a;
            }
        }
        cfg
    }
}

impl fmt::Display for AblationCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for AblationCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.to_ascii_uppercase().starts_with('G') {
            s.parse().map(Self::Gamma)
        } else {
            s.parse().map(Self::Attention).map_err(|_| {
                Error::Config(format!("unknown ablation variant `{s}` (expected G1..G3 or A1..A4)"))
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationSetup {
    pub train_data: SyntheticDatasetSpec,
    /// Held-out pairs scored after training.
    pub eval_data: SyntheticDatasetSpec,
    pub model: IagcConfig,
    pub train: TrainConfig,
    /// Initialization seed, shared by every case.
    pub init_seed: u64,
}

impl Default for AblationSetup {
    fn default() -> Self {
        let size = 32;
        let train_data = SyntheticDatasetSpec {
            count: 4,
            height: size,
            width: size,
            seed: 11,
            ..Default::default()
        };
        let eval_data = SyntheticDatasetSpec {
            seed: 12,
            ..train_data.clone()
        };
        AblationSetup {
            train_data,
            eval_data,
            model: IagcConfig {
                crop_size: size,
                ..IagcConfig::default()
            },
            train: TrainConfig {
                epochs: 40,
                batch_size: 2,
                crop_size: size,
                checkpoint_every: 0,
                probe_every: 0,
                ..TrainConfig::desk()
            },
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub description: String,
    pub params: usize,
    pub steps: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Mean over held-out pairs of PSNR(R_s3, GT).
    pub psnr: f64,
    pub ssim: f64,
    pub seconds: f64,
}

fn mean_scores(model: &IagcModel, ps: &ParamStore<f32>, pairs: &[ImagePair<f32>]) -> Result<(f64, f64)> {
    let cfg = SsimConfig::default();
    let (mut p, mut s) = (0.0, 0.0);
    for pair in pairs {
        let out = model.infer(ps, &pair.low)?;
        p += psnr(&out.r_s3, &pair.gt, 1.0)?;
        s += ssim(&out.r_s3, &pair.gt, &cfg)?;
    }
    let n = pairs.len() as f64;
    Ok((p / n, s / n))
}

pub fn run_case(case: AblationCase, setup: &AblationSetup) -> Result<AblationRow> {
    let start = Instant::now();
    let strip = |v: Vec<(ImagePair<f32>, _)>| v.into_iter().map(|(p, _)| p).collect::<Vec<_>>();
    let train_pairs = strip(generate_pairs(&setup.train_data)?);
    let eval_pairs = strip(generate_pairs(&setup.eval_data)?);
    let mut ps = ParamStore::new();
    let model = IagcModel::new(case.apply(&setup.model), &mut ps, setup.init_seed)?;
    let params = ps.total_elements();
    let mut trainer = Trainer::new(model, ps, setup.train.clone(), train_pairs)?;
    let summary = trainer.run(None, None, |_| {})?;
    let (psnr, ssim) = mean_scores(&trainer.model, &trainer.params, &eval_pairs)?;
    let loss = |r: &Option<super::train::StepRecord>| r.as_ref().map_or(f64::NAN, |r| r.loss);
    Ok(AblationRow {
        label: case.label(),
        description: case.describe().to_string(),
        params,
        steps: summary.steps_run,
        first_loss: loss(&summary.first),
        final_loss: loss(&summary.last),
        psnr,
        ssim,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_ablation(
    cases: &[AblationCase],
    setup: &AblationSetup,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    cases
        .iter()
        .map(|&c| {
            let row = run_case(c, setup)?;
            on_row(&row);
            Ok(row)
        })
        .collect()
}

pub const TABLE_HEADER: &str = "variant,description,params,steps,first_loss,final_loss,psnr,ssim,seconds";

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.4},{:.4},{:.1}\n",
            r.label, r.description, r.params, r.steps, r.first_loss, r.final_loss, r.psnr, r.ssim, r.seconds
        ));
    }
    s
}

/// Fixed-width comparison table.
pub fn format_table(rows: &[AblationRow]) -> String {
    let desc_w = rows.iter().map(|r| r.description.len()).max().unwrap_or(0).max(11);
    let mut s = format!(
        "{:<7} {:<desc_w$} {:>8} {:>6} {:>10} {:>10} {:>8} {:>7} {:>8}\n",
        "variant", "description", "params", "steps", "loss@1", "loss@end", "PSNR", "SSIM", "time s"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<7} {:<desc_w$} {:>8} {:>6} {:>10.4} {:>10.4} {:>8.2} {:>7.4} {:>8.1}\n",
            r.label, r.description, r.params, r.steps, r.first_loss, r.final_loss, r.psnr, r.ssim, r.seconds
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_parse_back() {
        for c in AblationCase::ALL {
            assert_eq!(c.label().parse::<AblationCase>().unwrap(), c);
        }
        assert!(matches!("A9".parse::<AblationCase>(), Err(Error::Config(_))));
        assert!(matches!("G7".parse::<AblationCase>(), Err(Error::Config(_))));
    }

    #[test]
    fn cases_change_only_their_axis() {
        let base = IagcConfig::default();
        let g1 = AblationCase::Gamma(GammaVariant::G1).apply(&base);
        assert_eq!(g1.gamma, GammaVariant::G1);
        assert_eq!(g1.attention, AblationVariant::A4);
        let a2 = AblationCase::Attention(AblationVariant::A2).apply(&base);
        assert_eq!(a2.gamma, GammaVariant::G3);
        assert_eq!(a2.attention, AblationVariant::A2);
    }

    #[test]
    fn tiny_run_emits_a_labelled_row() {
        let mut setup = AblationSetup::default();
        for d in [&mut setup.train_data, &mut setup.eval_data] {
            d.count = 2;
            d.height = 12;
            d.width = 12;
        }
        setup.model = IagcConfig {
            embed_dim: 4,
            heads: 2,
            depth: 1,
            window_size: 4,
            crop_size: 12,
            ..IagcConfig::default()
        };
        setup.train.epochs = 2;
        setup.train.crop_size = 12;
        let rows = run_ablation(&[AblationCase::Attention(AblationVariant::A2)], &setup, |_| {}).unwrap();
        assert_eq!(rows[0].label, "A2");
        assert_eq!(rows[0].steps, 2);
        assert!(rows[0].psnr.is_finite() && rows[0].ssim.is_finite());
        let table = format_table(&rows);
        assert!(table.lines().nth(1).unwrap().starts_with("A2"));
        assert_eq!(to_csv(&rows).lines().count(), 2);
    }
}
