//! Stochastic interpolants: schedules, training objectives and samplers.
//!
//! Convention: data sits at `t = 0` and white noise at `t = 1`, so sampling
//! integrates from `t = 1` down to `t = 0`.

mod losses;
mod samplers;
mod schedule;

pub use losses::{
    accumulate_grads, cfm_loss, ddpm_loss, draw_noise, draw_time, interpolate, sample_path, score_from_velocity,
    score_loss, LossOutput, PathSample, T_EPS,
};
pub use samplers::{
    ode_integrate, ode_sample, sde_integrate, sde_sample, DiffusionWeight, OdeIntegrator, SdeConfig, VelocityModel,
};
pub use schedule::{schedule_eval, BetaSchedule, Schedule, ScheduleValues};
