//! Inner (AdamW, SGD) and outer (Nesterov momentum) optimizers.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear warmup to `peak`, then cosine decay to `peak * final_frac`
    /// at `total_steps`, held flat afterwards.
    CosineWarmup {
        peak: f64,
        warmup_steps: u64,
        total_steps: u64,
        final_frac: f64,
    },
}

impl LrSchedule {
    pub fn cosine(peak: f64, warmup_steps: u64, total_steps: u64) -> Self {
        LrSchedule::CosineWarmup {
            peak,
            warmup_steps,
            total_steps,
            final_frac: 0.1,
        }
    }

    /// Learning rate used by the update with zero-based index `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr.max(0.0),
            LrSchedule::CosineWarmup {
                peak,
                warmup_steps,
                total_steps,
                final_frac,
            } => {
                let peak = peak.max(0.0);
                if step < warmup_steps {
                    return peak * (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total_steps.saturating_sub(warmup_steps).max(1);
                let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
                let floor = peak * final_frac.clamp(0.0, 1.0);
                floor + (peak - floor) * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            schedule: LrSchedule::Constant { lr: 1e-3 },
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: ParamTree,
    pub v: ParamTree,
    pub cfg: AdamWConfig,
}

impl AdamWState {
    pub fn new(params: &ParamTree, cfg: AdamWConfig) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            cfg,
        }
    }
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_step(params: &mut ParamTree, grads: &ParamTree, state: &mut AdamWState) -> Result<()> {
    adamw_step_accum(params, grads, state, None)
}

/// As [`adamw_step`], also adding the applied update `u` (where
/// `p <- p - u`) into `acc`.
pub fn adamw_step_accum(
    params: &mut ParamTree,
    grads: &ParamTree,
    state: &mut AdamWState,
    acc: Option<&mut ParamTree>,
) -> Result<()> {
    params.check_congruent(grads, "adamw grads")?;
    if let Some(a) = acc.as_deref() {
        params.check_congruent(a, "update accumulator")?;
    }
    params.check_congruent(&state.m, "adamw moments")?;
    if !grads.all_finite() {
        return Err(Error::NonFinite("adamw gradient".into()));
    }
    let cfg = &state.cfg;
    let lr = cfg.schedule.lr_at(state.step);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let iter = params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut());
    let mut acc_iter = acc.map(|a| a.iter_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in iter {
        let acc_t = acc_iter
            .as_mut()
            .and_then(Iterator::next)
            .map(|(_, t)| t.data_mut());
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        let mut u = vec![0.0; p.len()];
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            u[i] = lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
            p[i] -= u[i];
        }
        if let Some(a) = acc_t {
            a.iter_mut().zip(&u).for_each(|(x, ui)| *x += ui);
        }
    }
    state.step += 1;
    Ok(())
}

pub fn sgd_step(params: &mut ParamTree, grads: &ParamTree, lr: f64) -> Result<()> {
    sgd_step_accum(params, grads, lr, None)
}

pub fn sgd_step_accum(
    params: &mut ParamTree,
    grads: &ParamTree,
    lr: f64,
    acc: Option<&mut ParamTree>,
) -> Result<()> {
    params.check_congruent(grads, "sgd grads")?;
    if let Some(a) = acc.as_deref() {
        params.check_congruent(a, "update accumulator")?;
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("sgd gradient".into()));
    }
    let mut acc_iter = acc.map(|a| a.iter_mut());
    for ((_, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
        let acc_t = acc_iter
            .as_mut()
            .and_then(Iterator::next)
            .map(|(_, t)| t.data_mut());
        match acc_t {
            Some(a) => {
                for ((pv, gv), av) in p.data_mut().iter_mut().zip(g.data()).zip(a) {
                    let u = lr * gv;
                    *pv -= u;
                    *av += u;
                }
            }
            None => {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuterConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            lr: 0.7,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NesterovState {
    pub velocity: ParamTree,
    pub cfg: OuterConfig,
}

impl NesterovState {
    pub fn new(params: &ParamTree, cfg: OuterConfig) -> Self {
        Self {
            velocity: params.zeros_like(),
            cfg,
        }
    }
}

/// Treats `delta` as a gradient:
/// `v <- mu*v + delta`, `theta <- theta - lr*(mu*v + delta)`.
pub fn nesterov_outer_step(
    theta: &mut ParamTree,
    delta: &ParamTree,
    state: &mut NesterovState,
) -> Result<()> {
    theta.check_congruent(delta, "outer delta")?;
    theta.check_congruent(&state.velocity, "outer velocity")?;
    if !delta.all_finite() {
        return Err(Error::NonFinite("outer delta".into()));
    }
    let OuterConfig { lr, momentum: mu } = state.cfg;
    for (((_, p), (_, d)), (_, v)) in theta
        .iter_mut()
        .zip(delta.iter())
        .zip(state.velocity.iter_mut())
    {
        let (p, d, v) = (p.data_mut(), d.data(), v.data_mut());
        for i in 0..p.len() {
            v[i] = mu * v[i] + d[i];
            p[i] -= lr * (mu * v[i] + d[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tree(vals: &[f64]) -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        t
    }

    fn vals(t: &ParamTree) -> Vec<f64> {
        t.get("w").unwrap().data().to_vec()
    }

    fn adam(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            schedule: LrSchedule::Constant { lr },
            weight_decay: wd,
            ..Default::default()
        }
    }

    #[test]
    fn zero_grad_no_decay_keeps_params() {
        let mut p = tree(&[1.0, -2.0]);
        let mut s = AdamWState::new(&p, adam(0.1, 0.0));
        adamw_step(&mut p, &tree(&[0.0, 0.0]), &mut s).unwrap();
        assert_eq!(vals(&p), [1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // After bias correction m_hat = g and v_hat = g^2 on step one.
        let g = [0.5, -3.0, 1e-3];
        let p0 = [0.1, 0.2, 0.3];
        let mut p = tree(&p0);
        let cfg = adam(0.01, 0.0);
        let mut s = AdamWState::new(&p, cfg.clone());
        adamw_step(&mut p, &tree(&g), &mut s).unwrap();
        for i in 0..3 {
            let want = p0[i] - 0.01 * g[i] / (g[i].abs() + cfg.eps);
            assert!((vals(&p)[i] - want).abs() < 1e-15, "{i}");
        }
    }

    #[test]
    fn decay_shrinks_multiplicatively() {
        let mut p = tree(&[2.0, -4.0]);
        let mut s = AdamWState::new(&p, adam(0.01, 0.1));
        adamw_step(&mut p, &tree(&[0.0, 0.0]), &mut s).unwrap();
        assert!((vals(&p)[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
        assert!((vals(&p)[1] + 4.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn sign_flip_symmetry_on_first_step() {
        let mut a = tree(&[0.3, -0.7]);
        let mut b = tree(&[-0.3, 0.7]);
        let mut sa = AdamWState::new(&a, adam(0.05, 0.0));
        let mut sb = sa.clone();
        adamw_step(&mut a, &tree(&[0.2, 1.5]), &mut sa).unwrap();
        adamw_step(&mut b, &tree(&[-0.2, -1.5]), &mut sb).unwrap();
        assert_eq!(vals(&a), vals(&b).iter().map(|x| -x).collect::<Vec<_>>());
    }

    #[test]
    fn non_finite_gradients_rejected() {
        let mut p = tree(&[1.0]);
        let mut s = AdamWState::new(&p, adam(0.1, 0.0));
        assert!(adamw_step(&mut p, &tree(&[f64::NAN]), &mut s).is_err());
        assert!(sgd_step(&mut p, &tree(&[f64::INFINITY]), 0.1).is_err());
        let mut n = NesterovState::new(&p, OuterConfig::default());
        assert!(nesterov_outer_step(&mut p, &tree(&[f64::NAN]), &mut n).is_err());
    }

    #[test]
    fn sgd_cases() {
        let mut p = tree(&[1.0, 2.0]);
        sgd_step(&mut p, &tree(&[0.0, 0.0]), 0.5).unwrap();
        assert_eq!(vals(&p), [1.0, 2.0]);
        sgd_step(&mut p, &tree(&[1.0, -2.0]), 0.5).unwrap();
        assert_eq!(vals(&p), [0.5, 3.0]);
        sgd_step(&mut p, &tree(&[4.0, 4.0]), 0.0).unwrap();
        assert_eq!(vals(&p), [0.5, 3.0]);
    }

    #[test]
    fn plain_outer_step_lands_on_worker_mean() {
        let prev = [1.0, -1.0];
        let workers = [[0.5, -0.5], [0.0, -2.0]];
        let mean = [0.25, -1.25];
        let delta: Vec<f64> = (0..2).map(|i| prev[i] - mean[i]).collect();
        let mut theta = tree(&prev);
        let mut s = NesterovState::new(
            &theta,
            OuterConfig {
                lr: 1.0,
                momentum: 0.0,
            },
        );
        nesterov_outer_step(&mut theta, &tree(&delta), &mut s).unwrap();
        assert_eq!(vals(&theta), mean);
        let _ = workers;
    }

    #[test]
    fn two_nesterov_steps_closed_form() {
        // v1 = d, theta1 = theta0 - lr*(mu*d + d)
        // v2 = mu*d + d, theta2 = theta1 - lr*(mu*(mu+1)*d + d)
        let (lr, mu, d, t0) = (0.7, 0.9, 0.2, 1.0);
        let t1 = t0 - lr * (mu * d + d);
        let t2 = t1 - lr * (mu * (mu * d + d) + d);
        let mut theta = tree(&[t0]);
        let mut s = NesterovState::new(&theta, OuterConfig { lr, momentum: mu });
        nesterov_outer_step(&mut theta, &tree(&[d]), &mut s).unwrap();
        assert!((vals(&theta)[0] - t1).abs() < 1e-15);
        nesterov_outer_step(&mut theta, &tree(&[d]), &mut s).unwrap();
        assert!((vals(&theta)[0] - t2).abs() < 1e-15);
        assert!((vals(&s.velocity)[0] - (mu * d + d)).abs() < 1e-15);
    }

    #[test]
    fn zero_delta_zero_velocity_is_identity() {
        let mut theta = tree(&[0.3, 0.4]);
        let mut s = NesterovState::new(&theta, OuterConfig::default());
        nesterov_outer_step(&mut theta, &tree(&[0.0, 0.0]), &mut s).unwrap();
        assert_eq!(vals(&theta), [0.3, 0.4]);
    }

    #[test]
    fn cosine_schedule_peaks_after_warmup_and_stays_nonnegative() {
        let s = LrSchedule::cosine(1e-3, 10, 100);
        assert_eq!(s.lr_at(9), 1e-3);
        assert!((s.lr_at(10) - 1e-3).abs() < 1e-18);
        for step in 0..300 {
            let lr = s.lr_at(step);
            assert!(lr >= 0.0 && lr <= 1e-3 + 1e-18);
        }
        assert!((s.lr_at(100) - 1e-4).abs() < 1e-15);
    }
}
