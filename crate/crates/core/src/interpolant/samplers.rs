use rand_distr::StandardNormal;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::losses::score_from_velocity;
use super::schedule::Schedule;
use crate::error::{Error, Result};
use crate::fields::FieldSeries;
use crate::rng::Rng;

/// A velocity field over flat state vectors; any conditioning is captured by
/// the implementor.
pub trait VelocityModel {
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<F> VelocityModel for F
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self(x, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OdeIntegrator {
    #[default]
    Heun,
    Euler,
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

fn eval(model: &impl VelocityModel, x: &[f64], t: f64, step: usize) -> Result<Vec<f64>> {
    let v = model.velocity(x, t)?;
    if v.len() != x.len() {
        return Err(Error::shape(format!("model returned {} entries for a state of {}", v.len(), x.len())));
    }
    check_finite(&v, step)?;
    Ok(v)
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` to `t = 0` on a uniform grid.
pub fn ode_integrate(model: &impl VelocityModel, noise: &[f64], steps: usize, method: OdeIntegrator) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::arg("sampler needs at least one step"));
    }
    let h = 1.0 / steps as f64;
    let mut x = noise.to_vec();
    for i in 0..steps {
        let t = 1.0 - i as f64 * h;
        let k1 = eval(model, &x, t, i)?;
        match method {
            OdeIntegrator::Euler => {
                for (x, k) in x.iter_mut().zip(&k1) {
                    *x -= h * k;
                }
            }
            OdeIntegrator::Heun => {
                let pred: Vec<f64> = x.iter().zip(&k1).map(|(x, k)| x - h * k).collect();
                let t_next = 1.0 - (i + 1) as f64 * h;
                let k2 = eval(model, &pred, t_next.max(0.0), i)?;
                for ((x, a), b) in x.iter_mut().zip(&k1).zip(&k2) {
                    *x -= 0.5 * h * (a + b);
                }
            }
        }
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// Probability-flow sampling with Heun's method.
pub fn ode_sample(model: &impl VelocityModel, noise: &FieldSeries, steps: usize) -> Result<FieldSeries> {
    let out = ode_integrate(model, &noise.to_f64_vec(), steps, OdeIntegrator::Heun)?;
    FieldSeries::from_f64(noise.shape(), &out, noise.dx, noise.dy, noise.dt)
}

/// Sampling-time diffusion coefficient `w_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionWeight {
    Zero,
    Constant { w: f64 },
    /// `w_t = c * sigma_t`, vanishing at the data end.
    SigmaScaled { c: f64 },
}

impl DiffusionWeight {
    pub fn at(&self, t: f64, schedule: Schedule) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::Constant { w } => w,
            Self::SigmaScaled { c } => c * schedule.eval_unchecked(t).sigma,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            Self::Zero => 0.0,
            Self::Constant { w } => w,
            Self::SigmaScaled { c } => c,
        };
        if v >= 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::arg("diffusion weight must be non-negative"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub weight: DiffusionWeight,
    pub steps: usize,
    /// When false the Brownian term is dropped (drift-only integration).
    pub stochastic: bool,
}

impl SdeConfig {
    pub fn new(weight: DiffusionWeight, steps: usize) -> Self {
        Self {
            weight,
            steps,
            stochastic: true,
        }
    }
}

/// Euler-Maruyama integration of the reverse SDE
/// `dx = v dt - w/2 s dt + sqrt(w) dw` from `t = 1` to `t = 0`, with the
/// score supplied by `score(v, x, t)`.
pub fn sde_integrate(
    model: &impl VelocityModel,
    score: impl Fn(&[f64], &[f64], f64) -> Result<Vec<f64>>,
    noise: &[f64],
    schedule: Schedule,
    cfg: &SdeConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if cfg.steps == 0 {
        return Err(Error::arg("sampler needs at least one step"));
    }
    cfg.weight.validate()?;
    let h = 1.0 / cfg.steps as f64;
    let mut x = noise.to_vec();
    for i in 0..cfg.steps {
        let t = 1.0 - i as f64 * h;
        let v = eval(model, &x, t, i)?;
        let w = cfg.weight.at(t, schedule);
        if w == 0.0 {
            for (x, k) in x.iter_mut().zip(&v) {
                *x -= h * k;
            }
        } else {
            let s = score(&v, &x, t)?;
            let amp = (w * h).sqrt();
            for ((x, v), s) in x.iter_mut().zip(&v).zip(&s) {
                let z: f64 = if cfg.stochastic { rng.sample(StandardNormal) } else { 0.0 };
                *x += -h * (v - 0.5 * w * s) + amp * z;
            }
        }
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// Reverse-SDE sampling with the score derived from the velocity model.
pub fn sde_sample(
    model: &impl VelocityModel,
    noise: &FieldSeries,
    schedule: Schedule,
    cfg: &SdeConfig,
    rng: &mut Rng,
) -> Result<FieldSeries> {
    let score = |v: &[f64], x: &[f64], t: f64| score_from_velocity(v, x, t, schedule);
    let out = sde_integrate(model, score, &noise.to_f64_vec(), schedule, cfg, rng)?;
    FieldSeries::from_f64(noise.shape(), &out, noise.dx, noise.dy, noise.dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpolant::interpolate;

    fn frozen_pair(n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = crate::rng::stream(21, "pair");
        (crate::rng::gaussian_vec(&mut rng, n), crate::rng::gaussian_vec(&mut rng, n))
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let noise = vec![0.5, -1.0, 2.0];
        let c = 0.25;
        let model = |x: &[f64], _t: f64| Ok(vec![c; x.len()]);
        for steps in [1, 3, 17] {
            let out = ode_integrate(&model, &noise, steps, OdeIntegrator::Heun).unwrap();
            for (o, n) in out.iter().zip(&noise) {
                assert!((o - (n - c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn transports_noise_to_data_on_frozen_pair() {
        let (x0, eps) = frozen_pair(32);
        for sch in [Schedule::Linear, Schedule::VariancePreserving] {
            let model = |_x: &[f64], t: f64| Ok(interpolate(&x0, &eps, t, sch)?.1);
            let out = ode_integrate(&model, &eps, 64, OdeIntegrator::Heun).unwrap();
            let err = out.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if sch == Schedule::Linear {
                assert!(err < 1e-6, "{err}");
            } else {
                assert!(err < 1e-3, "{err}");
            }
        }
    }

    #[test]
    fn zero_weight_sde_is_euler_bit_for_bit() {
        let (x0, eps) = frozen_pair(16);
        let model = |x: &[f64], t: f64| Ok(x.iter().zip(&x0).map(|(a, b)| a * t - b).collect());
        let euler = ode_integrate(&model, &eps, 20, OdeIntegrator::Euler).unwrap();
        let mut rng = crate::rng::stream(1, "sde");
        let cfg = SdeConfig::new(DiffusionWeight::Zero, 20);
        let score = |v: &[f64], x: &[f64], t: f64| score_from_velocity(v, x, t, Schedule::Linear);
        let sde = sde_integrate(&model, score, &eps, Schedule::Linear, &cfg, &mut rng).unwrap();
        assert_eq!(euler, sde);
    }

    #[test]
    fn drift_free_noise_free_sde_is_identity() {
        let x = vec![0.1, 0.2, -3.0];
        let model = |x: &[f64], _t: f64| Ok(vec![0.0; x.len()]);
        let zero_score = |v: &[f64], _x: &[f64], _t: f64| Ok(vec![0.0; v.len()]);
        let mut cfg = SdeConfig::new(DiffusionWeight::Constant { w: 0.3 }, 10);
        cfg.stochastic = false;
        let mut rng = crate::rng::stream(1, "sde");
        let out = sde_integrate(&model, zero_score, &x, Schedule::Linear, &cfg, &mut rng).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn divergence_reports_step() {
        let model = |x: &[f64], t: f64| Ok(x.iter().map(|_| if t < 0.5 { f64::INFINITY } else { 1.0 }).collect());
        let err = ode_integrate(&model, &[0.0], 4, OdeIntegrator::Euler).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 3 }));
    }
}
