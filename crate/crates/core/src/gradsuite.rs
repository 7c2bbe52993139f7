//! Finite-difference checks for every differentiable op, every layer and
//! the full pipeline, in 64-bit.

use std::rc::Rc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::como_vit::{make_ablation, window_merge, window_partition, AblationVariant, BlockConfig, Decoder};
use crate::data::synthetic::{generate_pairs, SyntheticDatasetSpec};
use crate::error::Result;
use crate::fusion::Fusion;
use crate::gamma::{apply_gamma_exact, apply_gamma_taylor, Ggcm, Lgcm, DEFAULT_FLOOR};
use crate::nn::{Conv, DropPath, LayerNorm, Linear, MultiHeadAttention, TransformerLayer};
use crate::pipeline::loss::{loss_over_stages, loss_total, CharbonnierMode, LossConfig};
use crate::pipeline::model::{IagcConfig, IagcModel};
use crate::tensor::{gradient_check, GradCheckOptions, GradCheckReport, Init, ParamStore, Tensor};

type Objective = Box<dyn Fn(&ParamStore<f64>) -> Result<Tensor<f64>>>;

pub struct Case {
    pub name: &'static str,
    build: Box<dyn Fn() -> Result<(ParamStore<f64>, Objective)>>,
    /// Entries sampled per parameter; `None` checks all of them.
    entries: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn uniform(lo: f64, hi: f64, seed: u64) -> Init {
    Init::Uniform { lo, hi, seed }
}

fn normal(seed: u64) -> Init {
    Init::Normal { mean: 0.0, std: 1.0, seed }
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output entry matters.
fn weighted(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let r = Tensor::create(y.shape(), Init::Normal { mean: 0.0, std: 1.0, seed: seed ^ 0xA5A5 })?;
    Ok(y.mul(&r)?.sum())
}

fn store(inputs: &[(&str, &[usize], Init)]) -> Result<ParamStore<f64>> {
    let mut ps = ParamStore::new();
    for (name, shape, init) in inputs {
        ps.add_init(*name, shape, *init)?;
    }
    Ok(ps)
}

fn get<'a>(ps: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    ps.by_name(name).expect("registered input")
}

macro_rules! unary {
    ($name:literal, $init:expr, |$x:ident| $body:expr) => {
        Case {
            name: $name,
            entries: None,
            build: Box::new(|| {
                let ps = store(&[("x", &[3, 4], $init)])?;
                let f: Objective = Box::new(|p| {
                    let $x = get(p, "x");
                    weighted(&$body, 1)
                });
                Ok((ps, f))
            }),
        }
    };
}

macro_rules! binary {
    ($name:literal, $sa:expr, $sb:expr, |$a:ident, $b:ident| $body:expr) => {
        Case {
            name: $name,
            entries: None,
            build: Box::new(|| {
                let ps = store(&[("a", &$sa, normal(1)), ("b", &$sb, normal(2))])?;
                let f: Objective = Box::new(|p| {
                    let ($a, $b) = (get(p, "a"), get(p, "b"));
                    weighted(&$body, 3)
                });
                Ok((ps, f))
            }),
        }
    };
}

fn layer_case(name: &'static str, entries: Option<usize>, build: impl Fn() -> Result<(ParamStore<f64>, Objective)> + 'static) -> Case {
    Case {
        name,
        entries,
        build: Box::new(build),
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(17)
}

fn pipeline_config(attention: AblationVariant) -> IagcConfig {
    IagcConfig {
        window_size: 8,
        crop_size: 16,
        attention,
        ..IagcConfig::default()
    }
}

/// The full suite. The pipeline case runs the default architecture
/// (c = 15, 5 heads, 2 blocks) on a 16×16 image with 8×8 windows, so the
/// window-level attention sees a 2×2 grid.
pub fn cases() -> Vec<Case> {
    let mut v = vec![
        binary!("add", [3, 4], [3, 4], |a, b| a.add(b)?),
        binary!("add_broadcast", [2, 3, 4], [4], |a, b| a.add(b)?),
        binary!("sub", [3, 4], [1, 4], |a, b| a.sub(b)?),
        binary!("mul", [2, 3, 4], [3, 1], |a, b| a.mul(b)?),
        binary!("matmul", [3, 5], [5, 4], |a, b| a.matmul(b)?),
        binary!("matmul_batched", [2, 3, 5], [2, 5, 4], |a, b| a.matmul(b)?),
        binary!("matmul_shared_rhs", [2, 3, 5], [5, 4], |a, b| a.matmul(b)?),
        binary!("conv2d", [2, 3, 5, 6], [4, 3, 3, 3], |a, b| a.conv2d(b, None, 1, 1)?),
        binary!("conv2d_strided", [1, 2, 7, 7], [3, 2, 3, 3], |a, b| a.conv2d(b, None, 2, 0)?),
        unary!("exp", uniform(-1.0, 1.0, 4), |x| x.exp()),
        unary!("ln", uniform(0.3, 2.0, 5), |x| x.ln()?),
        unary!("sqrt", uniform(0.3, 2.0, 6), |x| x.sqrt()?),
        unary!("sigmoid", normal(7), |x| x.sigmoid()),
        unary!("relu", normal(8), |x| x.relu()),
        unary!("gelu", normal(9), |x| x.gelu()),
        unary!("scale", normal(10), |x| x.scale(-1.7)),
        unary!("add_scalar", normal(11), |x| x.add_scalar(0.3)),
        unary!("powi", normal(12), |x| x.powi(3)),
        unary!("clamp", uniform(-1.0, 1.0, 13), |x| x.clamp(-0.5, 0.5)),
        unary!("polynomial", normal(14), |x| x.polynomial(&[1.0, 1.0, 0.5, -0.2])),
        unary!("softmax_last", normal(15), |x| x.softmax(1)?),
        unary!("softmax_first", normal(16), |x| x.softmax(0)?),
        unary!("sum", normal(17), |x| x.sum()),
        unary!("mean", normal(18), |x| x.mean()),
        unary!("reshape", normal(19), |x| x.reshape(&[2, 6])?),
        unary!("transpose", normal(20), |x| x.transpose(0, 1)?),
        unary!("narrow", normal(21), |x| x.narrow(1, 1, 2)?),
        unary!("gather_repeating", normal(22), |x| {
            let idx: Rc<[usize]> = Rc::from(vec![0, 5, 5, 11, 3, 0, 7]);
            x.gather(idx, vec![7])?
        }),
        layer_case("permute", None, || {
            let ps = store(&[("x", &[2, 3, 4], normal(23))])?;
            let f: Objective = Box::new(|p| weighted(&get(p, "x").permute(&[2, 0, 1])?, 1));
            Ok((ps, f))
        }),
        layer_case("global_avg_pool", None, || {
            let ps = store(&[("x", &[2, 3, 4, 5], normal(24))])?;
            let f: Objective = Box::new(|p| weighted(&get(p, "x").global_avg_pool()?, 1));
            Ok((ps, f))
        }),
        layer_case("layernorm", None, || {
            let ps = store(&[
                ("x", &[3, 6], normal(25)),
                ("g", &[6], uniform(0.5, 1.5, 26)),
                ("o", &[6], normal(27)),
            ])?;
            let f: Objective = Box::new(|p| weighted(&get(p, "x").layernorm(get(p, "g"), get(p, "o"), 1e-5)?, 1));
            Ok((ps, f))
        }),
        layer_case("conv2d_bias", None, || {
            let ps = store(&[
                ("x", &[1, 2, 4, 4], normal(28)),
                ("w", &[3, 2, 3, 3], normal(29)),
                ("b", &[3], normal(30)),
            ])?;
            let f: Objective = Box::new(|p| weighted(&get(p, "x").conv2d(get(p, "w"), Some(get(p, "b")), 1, 1)?, 1));
            Ok((ps, f))
        }),
        layer_case("gamma_taylor", None, || {
            let ps = store(&[("img", &[3, 4, 3], uniform(0.05, 1.0, 31)), ("gamma", &[3, 4, 3], uniform(0.1, 0.9, 32))])?;
            let f: Objective = Box::new(|p| weighted(&apply_gamma_taylor(get(p, "img"), get(p, "gamma"), 2, DEFAULT_FLOOR)?, 1));
            Ok((ps, f))
        }),
        layer_case("gamma_taylor_scalar", None, || {
            let ps = store(&[("img", &[3, 4, 3], uniform(0.05, 1.0, 33)), ("gamma", &[1], uniform(0.1, 0.9, 34))])?;
            let f: Objective = Box::new(|p| weighted(&apply_gamma_taylor(get(p, "img"), get(p, "gamma"), 3, DEFAULT_FLOOR)?, 1));
            Ok((ps, f))
        }),
        layer_case("gamma_exact", None, || {
            let ps = store(&[("img", &[3, 4, 3], uniform(0.05, 1.0, 35)), ("gamma", &[3, 4, 3], uniform(0.1, 0.9, 36))])?;
            let f: Objective = Box::new(|p| weighted(&apply_gamma_exact(get(p, "img"), get(p, "gamma"), DEFAULT_FLOOR)?, 1));
            Ok((ps, f))
        }),
        layer_case("linear", None, || {
            let mut ps = store(&[("x", &[2, 3, 4], normal(37))])?;
            let l = Linear::new(&mut ps, "lin", 4, 5, true, &mut rng())?;
            let f: Objective = Box::new(move |p| weighted(&l.forward(p, get(p, "x"))?, 1));
            Ok((ps, f))
        }),
        layer_case("conv_layer", None, || {
            let mut ps = store(&[("x", &[5, 4, 3], normal(38))])?;
            let c = Conv::new(&mut ps, "conv", 3, 2, 3, &mut rng())?;
            let f: Objective = Box::new(move |p| weighted(&c.forward(p, get(p, "x"))?, 1));
            Ok((ps, f))
        }),
        layer_case("layernorm_layer", None, || {
            let mut ps = store(&[("x", &[4, 6], normal(39))])?;
            let l = LayerNorm::new(&mut ps, "ln", 6)?;
            let f: Objective = Box::new(move |p| weighted(&l.forward(p, get(p, "x"))?, 1));
            Ok((ps, f))
        }),
        layer_case("attention", None, || {
            let mut ps = store(&[("x", &[2, 5, 6], normal(40))])?;
            let a = MultiHeadAttention::new(&mut ps, "mha", 6, 2, &mut rng())?;
            let f: Objective = Box::new(move |p| weighted(&a.forward(p, get(p, "x"))?.0, 1));
            Ok((ps, f))
        }),
        layer_case("transformer_layer", Some(16), || {
            let mut ps = store(&[("x", &[2, 5, 6], normal(41))])?;
            let t = TransformerLayer::new(&mut ps, "tl", 6, 2, 2, &mut rng())?;
            let f: Objective = Box::new(move |p| weighted(&t.forward(p, get(p, "x"), &mut DropPath::eval())?.0, 1));
            Ok((ps, f))
        }),
        layer_case("window_partition_merge", None, || {
            let ps = store(&[("x", &[8, 4, 2], normal(42))])?;
            let f: Objective = Box::new(|p| {
                let (win, grid) = window_partition(get(p, "x"), 4)?;
                let win = win.mul(&win)?;
                weighted(&window_merge(&win, &grid)?, 1)
            });
            Ok((ps, f))
        }),
        layer_case("ggcm", Some(16), || {
            let mut ps = store(&[("img", &[6, 6, 3], uniform(0.0, 1.0, 43))])?;
            let g = Ggcm::new(&mut ps, "ggcm", 4, &mut rng())?;
            let f: Objective = Box::new(move |p| weighted(&g.predict(p, get(p, "img"))?.value, 1));
            Ok((ps, f))
        }),
        layer_case("lgcm", Some(16), || {
            let mut ps = store(&[("img", &[5, 6, 3], uniform(0.0, 1.0, 44))])?;
            let l = Lgcm::new(&mut ps, "lgcm", 4, &mut rng())?;
            let f: Objective = Box::new(move |p| weighted(&l.predict(p, get(p, "img"))?.map, 1));
            Ok((ps, f))
        }),
        layer_case("fusion_sam", Some(16), || {
            let mut ps = store(&[("img", &[5, 6, 3], uniform(0.0, 1.0, 45)), ("s1", &[5, 6, 3], uniform(0.5, 1.0, 46))])?;
            let fu = Fusion::new(&mut ps, "fusion", 4, &mut rng())?;
            let f: Objective = Box::new(move |p| weighted(&fu.forward(p, get(p, "img"), get(p, "s1"))?.fused.tensor, 1));
            Ok((ps, f))
        }),
        layer_case("decoder", None, || {
            let mut ps = store(&[("f", &[4, 4, 4], normal(47))])?;
            let d = Decoder::new(&mut ps, "dec", 4, &mut rng())?;
            let f: Objective = Box::new(move |p| weighted(&d.decode(p, get(p, "f"))?, 1));
            Ok((ps, f))
        }),
        layer_case("loss_total_whole", None, || loss_case(CharbonnierMode::Whole)),
        layer_case("loss_total_pixel", None, || loss_case(CharbonnierMode::Pixel)),
    ];
    for (name, variant) in [
        ("como_vit_a1", AblationVariant::A1),
        ("como_vit_a2", AblationVariant::A2),
        ("como_vit_a3", AblationVariant::A3),
        ("como_vit_a4", AblationVariant::A4),
    ] {
        v.push(layer_case(name, Some(8), move || {
            let mut ps = store(&[("f", &[8, 8, 4], normal(48))])?;
            let b = make_ablation(variant, &BlockConfig::new(4, 2, 4, 2), &mut ps, "blk", &mut rng())?;
            let f: Objective = Box::new(move |p| weighted(&b.forward(p, get(p, "f"), &mut DropPath::eval())?.features, 1));
            Ok((ps, f))
        }));
    }
    v.push(layer_case("iagc_pipeline_16x16", Some(6), || {
        // A noiseless synthetic pair rather than iid noise: on noisy input the
        // gradient loss is in the hundreds, and its rounding error then swamps
        // the small attention-bias gradients.
        let (pair, _) = generate_pairs::<f64>(&SyntheticDatasetSpec {
            count: 1,
            height: 16,
            width: 16,
            seed: 49,
            noise_range: (0.0, 0.0),
            ..SyntheticDatasetSpec::default()
        })?
        .remove(0);
        let mut ps = ParamStore::new();
        ps.add("image", &[16, 16, 3], pair.low.to_vec())?;
        ps.add("gt", &[16, 16, 3], pair.gt.to_vec())?;
        let model = IagcModel::new(pipeline_config(AblationVariant::A4), &mut ps, 5)?;
        let f: Objective = Box::new(move |p| {
            let out = model.infer(p, get(p, "image"))?;
            loss_total(&out, get(p, "gt"), &LossConfig::default())
        });
        Ok((ps, f))
    }));
    v
}

fn loss_case(mode: CharbonnierMode) -> Result<(ParamStore<f64>, Objective)> {
    let mut ps = ParamStore::new();
    for (i, n) in ["r1", "r2", "r3", "g"].iter().enumerate() {
        ps.add_init(*n, &[4, 4, 3], Init::Uniform { lo: 0.0, hi: 1.0, seed: 60 + i as u64 })?;
    }
    let cfg = LossConfig { charbonnier: mode, ..LossConfig::default() };
    let f: Objective = Box::new(move |p| {
        loss_over_stages([get(p, "r1"), get(p, "r2"), get(p, "r3")], get(p, "g"), &cfg)
    });
    Ok((ps, f))
}

pub fn run_case(case: &Case, opts: &GradCheckOptions) -> Result<CaseResult> {
    let start = Instant::now();
    let (mut ps, f) = (case.build)()?;
    let opts = GradCheckOptions {
        max_entries_per_param: case.entries.or(opts.max_entries_per_param),
        ..opts.clone()
    };
    let report = gradient_check(|p| f(p), &mut ps, &opts)?;
    Ok(CaseResult {
        name: case.name,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Run every case whose name contains `filter` (all when `None`).
pub fn run_suite(opts: &GradCheckOptions, filter: Option<&str>, mut on_case: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for case in cases() {
        if filter.is_some_and(|f| !case.name.contains(f)) {
            continue;
        }
        let r = run_case(&case, opts)?;
        on_case(&r);
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = cases().iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn primitive_cases_pass() {
        let opts = GradCheckOptions::default();
        for case in cases().iter().filter(|c| c.entries.is_none()) {
            let r = run_case(case, &opts).unwrap();
            assert!(r.passed(), "{}: {:?}", r.name, r.report.worst());
        }
    }
}
