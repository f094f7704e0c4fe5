use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::schedule::{BetaSchedule, Schedule};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::FieldSeries;
use crate::params::ParamStore;
use crate::rng::Rng;

/// Interval `t` is drawn from, keeping clear of the endpoint singularities of
/// the score conversion.
pub const T_EPS: f64 = 1e-3;

/// One point on the interpolant path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x0: FieldSeries,
    pub eps: FieldSeries,
    pub t: f64,
    pub xt: FieldSeries,
    pub v_star: FieldSeries,
}

/// `(x_t, v*)` for flat data.
pub fn interpolate(x0: &[f64], eps: &[f64], t: f64, schedule: Schedule) -> Result<(Vec<f64>, Vec<f64>)> {
    if x0.len() != eps.len() {
        return Err(Error::shape(format!("x0 has {} entries, eps {}", x0.len(), eps.len())));
    }
    let s = schedule.eval(t)?;
    let xt = x0.iter().zip(eps).map(|(a, e)| s.alpha * a + s.sigma * e).collect();
    let v = x0.iter().zip(eps).map(|(a, e)| s.d_alpha * a + s.d_sigma * e).collect();
    Ok((xt, v))
}

pub fn sample_path(x0: &FieldSeries, eps: &FieldSeries, t: f64, schedule: Schedule) -> Result<PathSample> {
    x0.same_shape(eps)?;
    let (xt, v) = interpolate(&x0.to_f64_vec(), &eps.to_f64_vec(), t, schedule)?;
    let build = |d: &[f64]| FieldSeries::from_f64(x0.shape(), d, x0.dx, x0.dy, x0.dt);
    Ok(PathSample {
        x0: x0.clone(),
        eps: eps.clone(),
        t,
        xt: build(&xt)?,
        v_star: build(&v)?,
    })
}

/// Uniform draw on `[T_EPS, 1 - T_EPS]`.
pub fn draw_time(rng: &mut Rng) -> f64 {
    rng.gen_range(T_EPS..=1.0 - T_EPS)
}

pub fn draw_noise(rng: &mut Rng, like: &Tensor) -> Tensor {
    Tensor::from_fn(like.rows, like.cols, |_, _| rng.sample(StandardNormal))
}

/// Score from velocity: `(alpha v - alpha' x) / (sigma (sigma alpha' - alpha sigma'))`.
///
/// The extra `1 / sigma` makes the result the true score `-E[eps | x] / sigma`
/// of the interpolant rather than the noise prediction `-E[eps | x]`.
pub fn score_from_velocity(v: &[f64], x: &[f64], t: f64, schedule: Schedule) -> Result<Vec<f64>> {
    if v.len() != x.len() {
        return Err(Error::shape("velocity and state sizes differ"));
    }
    let s = schedule.eval(t)?;
    let den = s.sigma * (s.sigma * s.d_alpha - s.alpha * s.d_sigma);
    if den == 0.0 || !den.is_finite() {
        return Err(Error::arg(format!("score conversion is degenerate at t = {t}")));
    }
    Ok(v.iter().zip(x).map(|(v, x)| (s.alpha * v - s.d_alpha * x) / den).collect())
}

/// Loss value with parameter gradients summed over the batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grads: BTreeMap<String, Tensor>,
}

/// Adds `scale * src` into `dst`, inserting missing entries.
pub fn accumulate_grads(dst: &mut BTreeMap<String, Tensor>, src: BTreeMap<String, Tensor>, scale: f64) {
    for (name, g) in src {
        let g = g.scale(scale);
        match dst.get_mut(&name) {
            Some(d) => d.add_assign(&g),
            None => {
                dst.insert(name, g);
            }
        }
    }
}

/// Per-sample graph: `model(g, input, t, sample)` returns a prediction of the
/// same shape as the input, which is regressed onto `target`.
fn regression_loss<M>(
    store: &ParamStore,
    inputs: Vec<(Tensor, Tensor, f64)>,
    model: &M,
) -> Result<LossOutput>
where
    M: Fn(&mut Graph, Var, f64, usize) -> Result<Var>,
{
    let b = inputs.len();
    if b == 0 {
        return Err(Error::arg("empty batch"));
    }
    let mut grads = BTreeMap::new();
    let mut per_sample = Vec::with_capacity(b);
    for (i, (input, target, t)) in inputs.into_iter().enumerate() {
        let mut g = Graph::new();
        let x = g.constant(input);
        let pred = model(&mut g, x, t, i)?;
        if g.shape(pred) != target.shape() {
            return Err(Error::shape(format!(
                "model output {:?} does not match target {:?}",
                g.shape(pred),
                target.shape()
            )));
        }
        let target = g.constant(target);
        let loss = g.mse(pred, target);
        per_sample.push(g.item(loss));
        accumulate_grads(&mut grads, g.backward(loss).into_param_grads(store), 1.0 / b as f64);
    }
    Ok(LossOutput {
        loss: per_sample.iter().sum::<f64>() / b as f64,
        per_sample,
        grads,
    })
}

/// Flow-matching loss: mean over batch and entries of `|v_theta(x_t, t) - v*|^2`
/// with `t` and `eps` drawn per sample.
pub fn cfm_loss<M>(store: &ParamStore, x0: &[Tensor], schedule: Schedule, rng: &mut Rng, model: &M) -> Result<LossOutput>
where
    M: Fn(&mut Graph, Var, f64, usize) -> Result<Var>,
{
    let mut inputs = Vec::with_capacity(x0.len());
    for x in x0 {
        let t = draw_time(rng);
        let eps = draw_noise(rng, x);
        let (xt, v) = interpolate(&x.data, &eps.data, t, schedule)?;
        inputs.push((Tensor::new(x.rows, x.cols, xt), Tensor::new(x.rows, x.cols, v), t));
    }
    regression_loss(store, inputs, model)
}

/// DDPM noise-prediction loss; the model receives `k / K` as its time input.
pub fn ddpm_loss<M>(store: &ParamStore, x0: &[Tensor], betas: &BetaSchedule, rng: &mut Rng, model: &M) -> Result<LossOutput>
where
    M: Fn(&mut Graph, Var, f64, usize) -> Result<Var>,
{
    let kk = betas.steps();
    let mut inputs = Vec::with_capacity(x0.len());
    for x in x0 {
        let k = rng.gen_range(1..=kk);
        let eps = draw_noise(rng, x);
        let ab = betas.alpha_bar(k);
        let noised = x.zip_map(&eps, |a, e| ab.sqrt() * a + (1.0 - ab).sqrt() * e);
        inputs.push((noised, eps, k as f64 / kk as f64));
    }
    regression_loss(store, inputs, model)
}

/// Score loss `|sigma_t s_theta(x_t, t) + eps|^2`, averaged.
pub fn score_loss<M>(store: &ParamStore, x0: &[Tensor], schedule: Schedule, rng: &mut Rng, model: &M) -> Result<LossOutput>
where
    M: Fn(&mut Graph, Var, f64, usize) -> Result<Var>,
{
    let mut inputs = Vec::with_capacity(x0.len());
    let mut sigmas = Vec::with_capacity(x0.len());
    for x in x0 {
        let t = draw_time(rng);
        let eps = draw_noise(rng, x);
        let (xt, _) = interpolate(&x.data, &eps.data, t, schedule)?;
        sigmas.push(schedule.eval(t)?.sigma);
        inputs.push((Tensor::new(x.rows, x.cols, xt), eps.scale(-1.0), t));
    }
    // sigma * s_theta regressed onto -eps
    let wrapped = |g: &mut Graph, x: Var, t: f64, i: usize| -> Result<Var> {
        let s = model(g, x, t, i)?;
        Ok(g.scale(s, sigmas[i]))
    };
    regression_loss(store, inputs, &wrapped)
}
