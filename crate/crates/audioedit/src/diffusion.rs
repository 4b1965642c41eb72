//! Noise schedule, deterministic DDIM stepping, exact DDIM inversion,
//! and classifier-free guidance composition.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::{Error, Result};

/// Training-horizon schedule: linear betas and cumulative alpha products,
/// with `alpha_bar[0] = 1` so index 0 is the clean latent.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if t < 2 {
            return Err(Error::InvalidSchedule(format!("T={} < 2", t)));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got ({}, {})",
                beta_start, beta_end
            )));
        }
        let mut beta = Vec::with_capacity(t);
        let mut alpha_bar = Vec::with_capacity(t + 1);
        alpha_bar.push(1.0);
        for i in 0..t {
            let b = beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64;
            beta.push(b);
            alpha_bar.push(alpha_bar[i] * (1.0 - b));
        }
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Inference schedule with `n` strided steps over this training
    /// schedule. `train_step[i]` is the training timestep fed to the
    /// denoiser when stepping from inference index i.
    pub fn subsample(&self, n: usize) -> Result<SampleSchedule> {
        let t = self.steps();
        if n < 2 || n > t || t % n != 0 {
            return Err(Error::InvalidSchedule(format!(
                "cannot subsample {} steps into {}",
                t, n
            )));
        }
        let stride = t / n;
        let alpha_bar = (0..=n).map(|i| self.alpha_bar[i * stride]).collect();
        let train_step = (0..=n).map(|i| i * stride).collect();
        Ok(SampleSchedule {
            alpha_bar,
            train_step,
        })
    }
}

/// Strided inference schedule used by DDIM stepping.
#[derive(Debug, Clone)]
pub struct SampleSchedule {
    /// Length T+1, `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
    /// Length T+1, training timestep per inference index (entry 0 unused).
    pub train_step: Vec<usize>,
}

impl SampleSchedule {
    /// Schedule from explicit alpha_bar values (tests, custom schedules).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<SampleSchedule> {
        if alpha_bar.len() < 2 || (alpha_bar[0] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSchedule(
                "alpha_bar must start at 1 and have at least 2 entries".into(),
            ));
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] > 0.0 && w[1] < w[0]) {
                return Err(Error::InvalidSchedule(
                    "alpha_bar must be strictly decreasing in (0, 1]".into(),
                ));
            }
        }
        let train_step = (0..alpha_bar.len()).collect();
        Ok(SampleSchedule {
            alpha_bar,
            train_step,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }
}

/// Guidance scale for classifier-free guidance; 7.5 for guided denoising,
/// 1.0 for pivotal inversion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
}

pub const GUIDANCE_DENOISE: f64 = 7.5;
pub const GUIDANCE_INVERT: f64 = 1.0;

/// w * eps_cond + (1 - w) * eps_uncond. At w = 1 the unconditional
/// branch is inert and the result is bit-identical to `eps_cond`.
pub fn cfg_predict(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_predict",
            detail: format!("{:?} vs {:?}", eps_cond.shape(), eps_uncond.shape()),
        });
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_cond.scale(w)?.add(&eps_uncond.scale(1.0 - w)?)
}

fn step_coeffs(ab_from: f64, ab_to: f64) -> (f64, f64) {
    let rescale = (ab_to / ab_from).sqrt();
    let eps_coeff =
        ab_to.sqrt() * (((1.0 - ab_to) / ab_to).sqrt() - ((1.0 - ab_from) / ab_from).sqrt());
    (rescale, eps_coeff)
}

/// Deterministic DDIM update z_t -> z_{t-1}, 1 <= t <= T.
pub fn ddim_step(z_t: &Tensor, t: usize, eps: &Tensor, sched: &SampleSchedule) -> Result<Tensor> {
    let max = sched.steps();
    if t < 1 || t > max {
        return Err(Error::StepOutOfRange { t, max });
    }
    let (a, b) = step_coeffs(sched.alpha_bar[t], sched.alpha_bar[t - 1]);
    z_t.scale(a)?.add(&eps.scale(b)?)
}

/// Exact algebraic inverse of [`ddim_step`] under frozen eps,
/// z_t -> z_{t+1}, 0 <= t <= T-1.
pub fn ddim_invert_step(
    z_t: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &SampleSchedule,
) -> Result<Tensor> {
    let max = sched.steps();
    if t >= max {
        return Err(Error::StepOutOfRange { t: t + 1, max });
    }
    let (a, b) = step_coeffs(sched.alpha_bar[t], sched.alpha_bar[t + 1]);
    z_t.scale(a)?.add(&eps.scale(b)?)
}

/// Inversion update without the sqrt(alpha_bar_{t+1}) factor on the eps
/// coefficient. Kept for comparison; it is not the exact inverse of
/// [`ddim_step`].
pub fn ddim_invert_step_unscaled(
    z_t: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &SampleSchedule,
) -> Result<Tensor> {
    let max = sched.steps();
    if t >= max {
        return Err(Error::StepOutOfRange { t: t + 1, max });
    }
    let (ab_from, ab_to) = (sched.alpha_bar[t], sched.alpha_bar[t + 1]);
    let a = (ab_to / ab_from).sqrt();
    let b = ((1.0 - ab_to) / ab_to).sqrt() - ((1.0 - ab_from) / ab_from).sqrt();
    z_t.scale(a)?.add(&eps.scale(b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InversionVariant {
    /// Exact algebraic inverse of the DDIM update (round-trip identity).
    ExactInverse,
    /// The unscaled eps coefficient, for comparison only.
    Unscaled,
}

/// Pivotal states {z_t*}, t = 0..=T, from inversion.
#[derive(Debug, Clone)]
pub struct LatentTrajectory {
    pub states: Vec<Tensor>,
}

impl LatentTrajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Fixed-point refinements per inversion step under
/// [`InversionVariant::ExactInverse`]. The exact inverse of the DDIM
/// update needs eps evaluated at the state being solved for; a few
/// Picard iterations converge because the eps coefficient of one step
/// is small.
const EXACT_INVERSE_ITERS: usize = 8;

/// Invert z_0 up to z_T, predicting eps at each visited state.
/// `eps_fn(z_t, t)` is evaluated with t in 1..=T: the training timestep
/// conditioning belongs to the interval being crossed.
///
/// With `ExactInverse`, each step solves the implicit equation
/// z_{t+1} = invert(z_t, eps(z_{t+1})) by fixed-point iteration, so a
/// w-matched denoising pass retraces the trajectory to round-off. The
/// `Unscaled` variant is the conventional single-evaluation
/// approximation.
pub fn invert_trajectory(
    z_0: &Tensor,
    sched: &SampleSchedule,
    variant: InversionVariant,
    mut eps_fn: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<LatentTrajectory> {
    let t_max = sched.steps();
    let mut states = Vec::with_capacity(t_max + 1);
    states.push(z_0.detached());
    for t in 0..t_max {
        let z = states.last().unwrap();
        let eps = eps_fn(z, t + 1)?;
        let next = match variant {
            InversionVariant::ExactInverse => {
                let mut up = ddim_invert_step(z, t, &eps, sched)?;
                for _ in 0..EXACT_INVERSE_ITERS {
                    let e = eps_fn(&up, t + 1)?;
                    let refined = ddim_invert_step(z, t, &e, sched)?;
                    let delta = refined.sub(&up)?.squared_frobenius_norm()?.value()?;
                    up = refined;
                    if delta <= 1e-26 {
                        break;
                    }
                }
                up
            }
            InversionVariant::Unscaled => ddim_invert_step_unscaled(z, t, &eps, sched)?,
        };
        states.push(next);
    }
    Ok(LatentTrajectory { states })
}

/// JSON sidecar stored next to a trajectory dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub t: usize,
    pub w: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
}

pub fn write_trajectory(
    path: &Path,
    meta_path: &Path,
    traj: &LatentTrajectory,
    meta: &TrajectoryMeta,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in &traj.states {
        write_tensor(&mut w, s)?;
    }
    serde_json::to_writer_pretty(BufWriter::new(File::create(meta_path)?), meta)?;
    Ok(())
}

pub fn read_trajectory(path: &Path, steps: usize) -> Result<LatentTrajectory> {
    let mut r = BufReader::new(File::open(path)?);
    let states = (0..=steps)
        .map(|_| read_tensor(&mut r))
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentTrajectory { states })
}
