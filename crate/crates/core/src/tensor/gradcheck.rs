//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen entries of each parameter.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compare analytic gradients of the scalar `f(params)` against
/// `(f(θ+h) − f(θ−h)) / 2h`, entry by entry.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, 1e-8)`.
/// `f` is evaluated twice up front; differing results abort with
/// [`Error::NonDeterministicFunction`].
pub fn gradient_check<F>(mut f: F, params: &mut ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<Tensor<f64>>,
{
    params.zero_grad();
    let first = f(params)?;
    let second = f(params)?;
    if first.numel() != 1 {
        return Err(Error::shape(
            "gradient_check",
            format!("function must return one element, got {:?}", first.shape()),
        ));
    }
    if first.item().to_bits() != second.item().to_bits() {
        return Err(Error::NonDeterministicFunction {
            first: first.item(),
            second: second.item(),
        });
    }
    drop(second);
    first.backward()?;
    drop(first);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let mut per_param = Vec::new();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let base = params.get(id).to_vec();
        let analytic = params
            .get(id)
            .grad_vec()
            .unwrap_or_else(|| vec![0.0; base.len()]);
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < base.len() => {
                let mut e = rand::seq::index::sample(&mut rng, base.len(), k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..base.len()).collect(),
        };
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            checked: entries.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for &i in &entries {
            let mut plus = base.clone();
            plus[i] += h;
            params.set_data(id, plus)?;
            let fp = f(params)?.item();
            let mut minus = base.clone();
            minus[i] -= h;
            params.set_data(id, minus)?;
            let fm = f(params)?.item();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
        }
        params.set_data(id, base)?;
        per_param.push(check);
    }
    let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        tol: opts.tol,
        per_param,
    })
}
