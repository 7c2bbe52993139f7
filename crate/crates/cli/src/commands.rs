use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use iagc_core::data::config::parse_entries;
use iagc_core::data::synthetic::{load_pairs_from, Pattern, SyntheticDatasetSpec};
use iagc_core::data::{gen_synthetic, load_pairs, read_image, write_image, RunConfig};
use iagc_core::gamma::bench_gamma as run_gamma_bench;
use iagc_core::gradsuite::run_suite;
use iagc_core::pipeline::ablation::{format_table, run_ablation, to_csv, AblationCase, AblationSetup};
use iagc_core::pipeline::checkpoint::{encode, write_atomic, Entry};
use iagc_core::pipeline::train::{CHECKPOINT, LOSS_LOG};
use iagc_core::pipeline::{load_checkpoint, psnr, ssim, IagcModel, SsimConfig, Trainer};
use iagc_core::tensor::GradCheckOptions;
use iagc_core::{Error, ParamStore, Tensor};

use crate::{AblateArgs, BenchArgs, EvalArgs, GenDataArgs, GradCheckArgs, InferArgs, TrainArgs};

pub const CONFIG_ECHO: &str = "config.txt";
pub const RUN_LOG: &str = "run.log";

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// A check ran to completion and reported failure.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult = Result<(), CliError>;

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn resolve_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, Error> {
    let entries = match file {
        Some(p) => parse_entries(&read_text(p)?)?,
        None => Vec::new(),
    };
    RunConfig::resolve(&entries, overrides)
}

fn range(name: &str, v: &[f64]) -> Result<(f64, f64), Error> {
    match v {
        [lo, hi] => Ok((*lo, *hi)),
        _ => Err(Error::Config(format!("--{name} expects lo,hi"))),
    }
}

pub fn gen_data(a: GenDataArgs) -> CliResult {
    let spec = SyntheticDatasetSpec {
        count: a.count,
        height: a.height,
        width: a.width,
        patterns: a.patterns.iter().map(|p| p.parse::<Pattern>()).collect::<Result<_, _>>()?,
        gamma_range: range("gamma-range", &a.gamma_range)?,
        alpha_range: range("alpha-range", &a.alpha_range)?,
        noise_range: range("noise-range", &a.noise_range)?,
        gt_range: range("gt-range", &a.gt_range)?,
        seed: a.seed,
    };
    let records = gen_synthetic(&spec, &a.out)?;
    println!("wrote {} pairs to {}", records.len(), a.out.display());
    Ok(())
}

struct RunLog {
    file: fs::File,
    path: PathBuf,
}

impl RunLog {
    fn open(path: PathBuf, append: bool) -> Result<Self, Error> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(RunLog { file, path })
    }

    fn line(&mut self, s: &str) -> Result<(), Error> {
        writeln!(self.file, "{s}").map_err(|e| Error::io(&self.path, e))
    }
}

pub fn train(a: TrainArgs) -> CliResult {
    let cfg = resolve_config(a.config.config.as_deref(), &a.config.overrides)?;
    let pairs = load_pairs::<f32>(&cfg.data_dir)?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let ck_path = out.join(CHECKPOINT);
    let resuming = a.resume && ck_path.exists();

    let mut ps = ParamStore::new();
    let model = IagcModel::new(cfg.model.clone(), &mut ps, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, ps, cfg.train.clone(), pairs)?;
    if resuming {
        trainer = trainer.resume(load_checkpoint(&ck_path)?)?;
    }
    let echo = cfg.echo();
    fs::write(out.join(CONFIG_ECHO), &echo).map_err(|e| Error::io(out.join(CONFIG_ECHO), e))?;
    let mut log = RunLog::open(out.join(RUN_LOG), resuming)?;
    if resuming {
        log.line(&format!("# resumed at step {}", trainer.completed_steps()))?;
    }
    for l in echo.lines() {
        log.line(&format!("# {l}"))?;
    }
    log.line(&format!(
        "# {} pairs, {} steps, {} parameters",
        trainer.pairs().len(),
        trainer.total_steps(),
        trainer.params.total_elements()
    ))?;
    eprintln!(
        "training {} steps on {} pairs from {} (starting at step {})",
        trainer.total_steps(),
        trainer.pairs().len(),
        cfg.data_dir.display(),
        trainer.completed_steps() + 1
    );

    let start = std::time::Instant::now();
    let log_every = a.log_every.max(1);
    let total = trainer.total_steps();
    let mut log_err = None;
    let summary = trainer.run(Some(&out), a.until, |rec| {
        let line = format!("{} t={:.1}s", rec.csv_line(), start.elapsed().as_secs_f64());
        if let Err(e) = log.line(&line) {
            log_err.get_or_insert(e);
        }
        if rec.step % log_every == 0 || rec.step == total {
            let probe = rec.psnr.map_or(String::new(), |[a, b, c]| format!("  psnr {a:.2}/{b:.2}/{c:.2} dB"));
            eprintln!("step {:>6}/{total}  lr {:.3e}  loss {:.5}{probe}", rec.step, rec.lr, rec.loss);
        }
    });
    let summary = match summary {
        Ok(s) => s,
        Err(e) => {
            let _ = log.line(&format!("# aborted: {e}"));
            return Err(e.into());
        }
    };
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.line(&format!("# finished {} steps in {:.1}s", summary.steps_run, summary.seconds))?;
    if let Some(last) = &summary.last {
        println!("step {} loss {:.6}", last.step, last.loss);
        if let Some([a, b, c]) = last.psnr {
            println!("probe psnr R_s1 {a:.3} dB, R_s2 {b:.3} dB, R_s3 {c:.3} dB");
        }
    }
    println!(
        "wrote {} and {}",
        out.join(LOSS_LOG).display(),
        out.join(CHECKPOINT).display()
    );
    Ok(())
}

fn stage_name(i: usize) -> String {
    format!("r_s{}.ppm", i + 1)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn infer(a: InferArgs) -> CliResult {
    let config_path = a
        .config
        .clone()
        .or_else(|| Some(a.checkpoint.parent()?.join(CONFIG_ECHO)).filter(|p| p.exists()));
    let cfg = resolve_config(config_path.as_deref(), &[])?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = IagcModel::bind(cfg.model.clone(), &ck.params)?;
    let image: Tensor<f32> = read_image(&a.input)?;
    let out = model.infer(&ck.params, &image)?;
    write_image(&a.output, &out.r_s3)?;
    eprintln!("wrote {}", a.output.display());
    if let Some(dir) = &a.dump_stages {
        create_dir(dir)?;
        for (i, s) in out.stages().iter().enumerate() {
            write_image(&dir.join(stage_name(i)), s)?;
        }
        if let Some(g) = &out.gamma_l {
            write_image(&dir.join("gamma_l.ppm"), &g.map)?;
        }
        if let Some(g) = &out.gamma_g {
            let p = dir.join("gamma_g.txt");
            fs::write(&p, format!("{}\n", g.get())).map_err(|e| Error::io(&p, e))?;
        }
        eprintln!("wrote stages to {}", dir.display());
    }
    if let Some(dir) = &a.dump_attn {
        create_dir(dir)?;
        write_image(&dir.join("sam_input.ppm"), &out.attn_input.map)?;
        write_image(&dir.join("sam_stage1.ppm"), &out.attn_stage1.map)?;
        let mut entries = Vec::new();
        for (l, (loc, glo)) in out.local_attention.iter().zip(&out.global_attention).enumerate() {
            for (kind, t) in [("local", loc), ("global", glo)] {
                if let Some(t) = t {
                    entries.push(Entry {
                        name: format!("block{l}.{kind}"),
                        shape: t.shape().to_vec(),
                        data: t.to_vec(),
                    });
                }
            }
        }
        write_atomic(&dir.join("attention.iagc"), &encode(&entries)?)?;
        eprintln!("wrote attention maps to {}", dir.display());
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult {
    let pairs = load_pairs_from::<f32>(&a.pred, &a.gt)?;
    let cfg = SsimConfig::default();
    let (mut p_sum, mut s_sum) = (0.0, 0.0);
    for pair in &pairs {
        let p = psnr(&pair.low, &pair.gt, 1.0)?;
        let s = ssim(&pair.low, &pair.gt, &cfg)?;
        println!("{}\tPSNR {p:.4} dB\tSSIM {s:.6}", pair.name);
        p_sum += p;
        s_sum += s;
    }
    let n = pairs.len() as f64;
    println!("mean over {} images\tPSNR {:.4} dB\tSSIM {:.6}", pairs.len(), p_sum / n, s_sum / n);
    Ok(())
}

pub fn bench_gamma(a: BenchArgs) -> CliResult {
    let report = run_gamma_bench(a.elements, a.iterations, a.seed)?;
    print!("{}", report.to_key_values());
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    let faster = report.taylor_total_ns() <= report.exact_total_ns();
    println!("taylor_not_slower={faster}");
    if !faster {
        eprintln!(
            "taylor path median {} ns exceeds exact path median {} ns",
            report.taylor_total_ns(),
            report.exact_total_ns()
        );
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> CliResult {
    let cases: Vec<AblationCase> = if a.variants.is_empty() {
        AblationCase::ALL.to_vec()
    } else {
        a.variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?
    };
    let mut setup = AblationSetup::default();
    for d in [&mut setup.train_data, &mut setup.eval_data] {
        d.count = a.count;
        d.height = a.size;
        d.width = a.size;
    }
    setup.train_data.seed = a.seed.wrapping_mul(2).wrapping_add(11);
    setup.eval_data.seed = a.seed.wrapping_mul(2).wrapping_add(12);
    setup.model.crop_size = a.size;
    setup.train.crop_size = a.size;
    setup.train.epochs = a.epochs;
    setup.train.seed = a.seed;
    setup.init_seed = a.seed;
    let rows = run_ablation(&cases, &setup, |r| {
        eprintln!("{}: PSNR {:.2} dB, SSIM {:.4} ({:.1}s)", r.label, r.psnr, r.ssim, r.seconds)
    })?;
    print!("{}", format_table(&rows));
    if let Some(p) = &a.csv {
        fs::write(p, to_csv(&rows)).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

pub fn grad_check(a: GradCheckArgs) -> CliResult {
    let opts = GradCheckOptions {
        step: a.step,
        tol: a.tol,
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    let results = run_suite(&opts, a.filter.as_deref(), |r| {
        let worst = r.report.worst().map_or(String::from("-"), |w| w.name.clone());
        println!(
            "{} {:<24} max_rel_err {:.3e} (worst {worst}) {:.2}s",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.report.max_rel_err,
            r.seconds
        );
    })?;
    if results.is_empty() {
        return Err(Error::Config("no gradient-check case matches the filter".into()).into());
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} cases passed (tol {:e})", results.len(), a.tol);
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed: {}", failed.join(", "))))
    }
}
