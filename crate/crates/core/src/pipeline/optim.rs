use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-7,
        }
    }
}

/// First and second moment estimates, one buffer per parameter in store
/// order, plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(ps: &ParamStore<T>) -> Self {
        let zeros = |n| vec![T::zero(); n];
        AdamState {
            step: 0,
            m: ps.iter().map(|(_, _, t)| zeros(t.numel())).collect(),
            v: ps.iter().map(|(_, _, t)| zeros(t.numel())).collect(),
        }
    }

    pub fn matches(&self, ps: &ParamStore<T>) -> bool {
        self.m.len() == ps.len()
            && self.v.len() == ps.len()
            && ps
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, _, t), (m, v))| m.len() == t.numel() && v.len() == t.numel())
    }
}

/// One Adam update with bias correction and decoupled weight decay
/// `θ ← θ·(1 − lr·wd) − lr·m̂/(sqrt(v̂) + eps)`.
///
/// Parameters without a gradient buffer are left untouched.
pub fn adam_step<T: Real>(ps: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if !state.matches(ps) {
        return Err(Error::Config("optimizer state does not match the parameter store".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (ob1, ob2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let step_size = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(cfg.eps);
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let Some(grad) = ps.get(id).grad_vec() else {
            continue;
        };
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let mut data = ps.get(id).to_vec();
        for k in 0..data.len() {
            let g = grad[k];
            m[k] = b1 * m[k] + ob1 * g;
            v[k] = b2 * v[k] + ob2 * g * g;
            data[k] = data[k] * decay - step_size * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
        }
        ps.set_data(id, data)?;
    }
    Ok(())
}

/// Cosine decay `base · (1 + cos(π·step/total)) / 2`.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let p = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 100, 4e-4), 4e-4);
        assert!(lr_schedule(100, 100, 4e-4).abs() < 1e-20);
        assert!((lr_schedule(50, 100, 4e-4) - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", &[2], vec![1.0, -2.0]).unwrap();
        let mut st = AdamState::new(&ps);
        ps.get(id).accumulate_grad(&[0.0, 0.0]);
        let cfg = AdamConfig { weight_decay: 0.1, ..AdamConfig::default() };
        adam_step(&mut ps, &mut st, 0.5, &cfg).unwrap();
        assert_eq!(ps.get(id).data(), &[0.95, -1.9]);
    }

    #[test]
    fn parameters_without_gradient_are_untouched() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", &[1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, 0.5, &AdamConfig::default()).unwrap();
        assert_eq!(ps.get(id).data(), &[1.0]);
    }

    #[test]
    fn constant_gradient_gives_unit_steps() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", &[1], vec![0.0]).unwrap();
        let mut st = AdamState::new(&ps);
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let lr = 1e-3;
        let mut prev = 0.0;
        for _ in 0..2000 {
            ps.get(id).accumulate_grad(&[0.37]);
            adam_step(&mut ps, &mut st, lr, &cfg).unwrap();
            let now = ps.get(id).data()[0];
            let step = (now - prev).abs();
            assert!((step - lr).abs() < 1e-6 * lr + 1e-9, "{step}");
            prev = now;
        }
    }

    #[test]
    fn identical_runs_give_identical_trajectories() {
        let run = || {
            let mut ps = ParamStore::<f32>::new();
            let id = ps.add_init("w", &[8], Init::Normal { mean: 0.0, std: 1.0, seed: 3 }).unwrap();
            let mut st = AdamState::new(&ps);
            for k in 0..50 {
                let x = ps.get(id);
                x.mul(x).unwrap().sum().scale(1.0 + k as f64).backward().unwrap();
                adam_step(&mut ps, &mut st, 1e-2, &AdamConfig::default()).unwrap();
            }
            ps.get(id).to_vec()
        };
        assert_eq!(run(), run());
    }
}
