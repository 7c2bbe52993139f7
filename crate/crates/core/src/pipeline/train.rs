//! Seeded, single-threaded training loop.
//!
//! Every random draw of step `s` comes from a generator keyed on
//! `(seed, s, slot)`, and each epoch's shuffle from `(seed, epoch)`. A run
//! resumed from a checkpoint therefore replays exactly the draws an
//! uninterrupted run would have made.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::loss::{loss_total, LossConfig};
use super::metrics::psnr;
use super::model::IagcModel;
use super::optim::{adam_step, lr_schedule, AdamConfig, AdamState};
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::nn::DropPath;
use crate::tensor::{ParamStore, Tensor};

pub const LOSS_LOG: &str = "loss_log.csv";
pub const LOSS_LOG_HEADER: &str = "step,lr,loss,psnr_s1,psnr_s2,psnr_s3";
pub const CHECKPOINT: &str = "checkpoint.iagc";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub drop_path: f64,
    pub crop_size: usize,
    pub seed: u64,
    /// 0 means `ceil(pairs / batch_size)`.
    pub steps_per_epoch: usize,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_every: u64,
    /// 0 disables the probe; otherwise every k-th step and the last one.
    pub probe_every: u64,
    /// Random horizontal flips.
    pub flip: bool,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl TrainConfig {
    /// Published training schedule.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            lr: 4e-4,
            drop_path: 0.1,
            crop_size: 512,
            seed: 0,
            steps_per_epoch: 0,
            checkpoint_every: 1000,
            probe_every: 50,
            flip: true,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }

    /// Small-scale schedule: 4 pairs at batch 2 give 500 steps.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 250,
            batch_size: 2,
            lr: 2e-3,
            crop_size: 64,
            checkpoint_every: 100,
            probe_every: 1,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.crop_size == 0 {
            return Err(Error::Config("batch_size, epochs and crop_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop_path must lie in [0, 1), got {}", self.drop_path)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return Err(Error::Config("adam requires betas in [0, 1), eps > 0 and weight_decay ≥ 0".into()));
        }
        if !(self.loss.eps > 0.0) {
            return Err(Error::Config("charbonnier_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch_for(&self, pairs: usize) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            pairs.div_ceil(self.batch_size)
        }
    }

    pub fn total_steps(&self, pairs: usize) -> u64 {
        (self.epochs * self.steps_per_epoch_for(pairs)) as u64
    }
}

/// One loss-log row.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Probe PSNR of `R_s1`, `R_s2`, `R_s3`, when measured at this step.
    pub psnr: Option<[f64; 3]>,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let probe = match self.psnr {
            Some([a, b, c]) => format!("{a:.4},{b:.4},{c:.4}"),
            None => ",,".into(),
        };
        format!("{},{:e},{:e},{probe}", self.step, self.lr, self.loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub first: Option<StepRecord>,
    pub last: Option<StepRecord>,
    pub steps_run: u64,
    pub seconds: f64,
}

/// Generator for `(seed, tag, a, b)`; distinct tags never share a stream.
fn keyed_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, w) in [seed, tag, a, b].iter().enumerate() {
        key[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

const TAG_EPOCH: u64 = 1;
const TAG_SAMPLE: u64 = 2;

/// Random crop of side `min(size, H, W)`, optionally mirrored left-right,
/// applied identically to both images.
fn augment(pair: &ImagePair<f32>, size: usize, flip: bool, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = (pair.low.shape()[0], pair.low.shape()[1]);
    let (ch, cw) = (size.min(h), size.min(w));
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let mirror = flip && rng.random::<bool>();
    let cut = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let src = t.data();
        let mut out = Vec::with_capacity(ch * cw * 3);
        for y in 0..ch {
            for x in 0..cw {
                let sx = if mirror { x0 + cw - 1 - x } else { x0 + x };
                let i = ((y0 + y) * w + sx) * 3;
                out.extend_from_slice(&src[i..i + 3]);
            }
        }
        Tensor::from_vec(&[ch, cw, 3], out)
    };
    Ok((cut(&pair.low)?, cut(&pair.gt)?))
}

fn grad_norm_report(ps: &ParamStore<f32>) -> String {
    let mut norms: Vec<(f64, &str)> = ps
        .iter()
        .filter_map(|(_, name, t)| {
            t.grad_vec()
                .map(|g| (g.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt(), name))
        })
        .collect();
    let bad: Vec<&str> = norms.iter().filter(|(n, _)| !n.is_finite()).map(|(_, n)| *n).collect();
    norms.retain(|(n, _)| n.is_finite());
    norms.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top: Vec<String> = norms.iter().take(5).map(|(n, name)| format!("{name}={n:.3e}")).collect();
    format!(
        "non-finite gradients in [{}]; largest finite gradient norms: {}",
        bad.join(", "),
        top.join(", ")
    )
}

pub struct Trainer {
    pub model: IagcModel,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pairs: Vec<ImagePair<f32>>,
    total_steps: u64,
}

impl Trainer {
    pub fn new(model: IagcModel, params: ParamStore<f32>, config: TrainConfig, pairs: Vec<ImagePair<f32>>) -> Result<Self> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(Error::Config("the training set is empty".into()));
        }
        IagcModel::bind(model.config.clone(), &params)?;
        let adam = AdamState::new(&params);
        let total_steps = config.total_steps(pairs.len());
        Ok(Trainer {
            model,
            params,
            adam,
            config,
            pairs,
            total_steps,
        })
    }

    /// Continue from a checkpoint written by an earlier run of the same
    /// configuration.
    pub fn resume(mut self, ck: Checkpoint) -> Result<Self> {
        IagcModel::bind(self.model.config.clone(), &ck.params)?;
        let adam = ck
            .adam
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state to resume from".into()))?;
        if !adam.matches(&ck.params) {
            return Err(Error::Format("checkpoint optimizer state does not match its parameters".into()));
        }
        if adam.step > self.total_steps {
            return Err(Error::Config(format!(
                "checkpoint is at step {}, beyond the configured {} steps",
                adam.step, self.total_steps
            )));
        }
        self.params = ck.params;
        self.adam = adam;
        Ok(self)
    }

    pub fn completed_steps(&self) -> u64 {
        self.adam.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn pairs(&self) -> &[ImagePair<f32>] {
        &self.pairs
    }

    /// Pair indices of 1-based `step`, sorted.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.pairs.len();
        let spe = self.config.steps_per_epoch_for(n) as u64;
        let (epoch, slot) = ((step - 1) / spe, ((step - 1) % spe) as usize);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut keyed_rng(self.config.seed, TAG_EPOCH, epoch, 0));
        let b = self.config.batch_size;
        let mut idx: Vec<usize> = (0..b).map(|k| perm[(slot * b + k) % n]).collect();
        idx.sort_unstable();
        idx
    }

    /// Forward and backward over `indices` at 1-based `step`, accumulating
    /// gradients of the batch-mean loss. Returns that loss.
    ///
    /// Indices are processed in sorted order, so any permutation of the same
    /// batch yields the same loss and gradients.
    pub fn accumulate_batch(&self, indices: &[usize], step: u64) -> Result<f64> {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        let inv_b = 1.0 / idx.len() as f64;
        let mut total = 0.0;
        for (slot, &i) in idx.iter().enumerate() {
            let mut rng = keyed_rng(self.config.seed, TAG_SAMPLE, step, slot as u64);
            let (low, gt) = augment(&self.pairs[i], self.config.crop_size, self.config.flip, &mut rng)?;
            let mut drop = DropPath::train(self.config.drop_path, rng.random());
            let out = self.model.forward(&self.params, &low, &mut drop)?;
            let loss = loss_total(&out, &gt, &self.config.loss)?.scale(inv_b);
            total += f64::from(loss.item());
            loss.backward()?;
        }
        Ok(total)
    }

    /// Per-stage PSNR on the first pair, full resolution, inference mode.
    pub fn probe(&self) -> Result<[f64; 3]> {
        let pair = &self.pairs[0];
        let out = self.model.infer(&self.params, &pair.low)?;
        let [a, b, c] = out.stages();
        Ok([psnr(a, &pair.gt, 1.0)?, psnr(b, &pair.gt, 1.0)?, psnr(c, &pair.gt, 1.0)?])
    }

    /// Run the next step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.adam.step + 1;
        if step > self.total_steps {
            return Err(Error::Config(format!("training already finished at step {}", self.total_steps)));
        }
        let lr = lr_schedule(step, self.total_steps, self.config.lr);
        self.params.zero_grad();
        let idx = self.batch_indices(step);
        let loss = self.accumulate_batch(&idx, step)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                lr,
                diagnostics: grad_norm_report(&self.params),
            });
        }
        adam_step(&mut self.params, &mut self.adam, lr, &self.config.adam)?;
        let k = self.config.probe_every;
        let psnr = if k > 0 && (step.is_multiple_of(k) || step == self.total_steps) {
            Some(self.probe()?)
        } else {
            None
        };
        Ok(StepRecord { step, lr, loss, psnr })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params, Some(&self.adam))
    }

    /// Train up to `until` completed steps (the configured total when
    /// `None`). With `out_dir`, rows go to `loss_log.csv` as they are
    /// produced and `checkpoint.iagc` is written every `checkpoint_every`
    /// steps and when the loop stops. A resumed run keeps the first
    /// `completed` rows of an existing log and appends after them.
    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        until: Option<u64>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<TrainSummary> {
        let until = until.unwrap_or(self.total_steps).min(self.total_steps);
        let mut log = match out_dir {
            Some(dir) => Some(self.open_log(dir)?),
            None => None,
        };
        let ck_path: Option<PathBuf> = out_dir.map(|d| d.join(CHECKPOINT));
        let start = Instant::now();
        let mut summary = TrainSummary {
            first: None,
            last: None,
            steps_run: 0,
            seconds: 0.0,
        };
        while self.adam.step < until {
            let rec = self.step()?;
            if let Some((f, path)) = log.as_mut() {
                writeln!(f, "{}", rec.csv_line()).map_err(|e| Error::io(path.as_path(), e))?;
                f.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            let k = self.config.checkpoint_every;
            if let Some(p) = &ck_path {
                if k > 0 && rec.step % k == 0 && rec.step != until {
                    self.save(p)?;
                }
            }
            on_step(&rec);
            summary.first.get_or_insert_with(|| rec.clone());
            summary.last = Some(rec);
            summary.steps_run += 1;
        }
        if let Some(p) = &ck_path {
            self.save(p)?;
        }
        summary.seconds = start.elapsed().as_secs_f64();
        Ok(summary)
    }

    fn open_log(&self, dir: &Path) -> Result<(fs::File, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOSS_LOG);
        let done = self.adam.step as usize;
        let mut keep = format!("{LOSS_LOG_HEADER}\n");
        if done > 0 {
            let old = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let rows: Vec<&str> = old.lines().skip(1).take(done).collect();
            if rows.len() < done {
                return Err(Error::Format(format!(
                    "{} has {} rows but the checkpoint is at step {done}",
                    path.display(),
                    rows.len()
                )));
            }
            for r in rows {
                keep.push_str(r);
                keep.push('\n');
            }
        }
        fs::write(&path, keep).map_err(|e| Error::io(&path, e))?;
        let f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok((f, path))
    }
}
