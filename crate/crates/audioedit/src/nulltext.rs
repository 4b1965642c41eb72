//! Per-step null-text embedding optimization against a pivotal
//! inversion trajectory, and reconstruction with the optimized nulls.
//!
//! For each step t = T..1 the null embedding is refined by gradient
//! descent on the squared distance between the pivotal state z*_{t-1}
//! and the guided DDIM prediction from the current state. The chained
//! initialization (null_{t-1} = null_t) follows the trajectory update.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{predict_noise_matrix, DenoiserParams, PromptEmbedding};
use crate::diffusion::{cfg_predict, ddim_step, LatentTrajectory, SampleSchedule};
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor};
use crate::{Error, Result};

pub const DEFAULT_ETA: f64 = 0.01;
pub const DEFAULT_INNER_ITERS: usize = 10;
const MAX_HALVINGS: usize = 3;

/// Optimized null embeddings, stored in optimization order t = T..1.
#[derive(Debug, Clone)]
pub struct NullTextSet {
    pub embeddings: Vec<Tensor>,
    pub eta: f64,
    pub inner_iters: usize,
    pub w: f64,
}

impl NullTextSet {
    /// The same (unoptimized) null embedding at every step.
    pub fn constant(null_matrix: &Tensor, steps: usize, w: f64) -> NullTextSet {
        NullTextSet {
            embeddings: vec![null_matrix.detached(); steps],
            eta: 0.0,
            inner_iters: 0,
            w,
        }
    }

    /// Null embedding for diffusion step t (1..=T).
    pub fn for_step(&self, t: usize) -> Result<&Tensor> {
        let steps = self.embeddings.len();
        if t < 1 || t > steps {
            return Err(Error::StepOutOfRange { t, max: steps });
        }
        Ok(&self.embeddings[steps - t])
    }

    pub fn steps(&self) -> usize {
        self.embeddings.len()
    }
}

/// Inner-loop losses per step, in optimization order t = T..1.
pub type StepLosses = Vec<Vec<f64>>;

/// Eq.-style single-step objective: 10 gradient iterations per step on
/// the null embedding, with halving-on-increase as a divergence guard.
/// Neither the prompt, the trajectory, nor the model weights change.
pub fn optimize_null_texts(
    params: &DenoiserParams,
    traj: &LatentTrajectory,
    prompt: &PromptEmbedding,
    sched: &SampleSchedule,
    w: f64,
    eta: f64,
    inner_iters: usize,
) -> Result<(NullTextSet, StepLosses)> {
    let steps = sched.steps();
    if traj.steps() != steps {
        return Err(Error::LengthMismatch(format!(
            "trajectory has {} steps, schedule {}",
            traj.steps(),
            steps
        )));
    }
    if inner_iters < 1 {
        return Err(Error::Config("inner_iters must be >= 1".into()));
    }

    let null_init = crate::denoiser::embed_prompt(params, &[])?;
    let mut null = null_init.matrix.detached();
    let mut z_bar = traj.states[steps].detached();
    let mut embeddings = Vec::with_capacity(steps);
    let mut all_losses = Vec::with_capacity(steps);

    for t in (1..=steps).rev() {
        let t_train = sched.train_step[t];
        let target = &traj.states[t - 1];
        let (eps_cond, _) = predict_noise_matrix(params, &z_bar, t_train, &prompt.matrix)?;

        let mut losses = Vec::with_capacity(inner_iters);
        if w == 1.0 {
            // The null branch is inert: gradient is exactly zero.
            let z_prev = ddim_step(&z_bar, t, &eps_cond, sched)?;
            let loss = target.sub(&z_prev)?.squared_frobenius_norm()?.value()?;
            losses.push(loss);
        } else {
            let mut step_eta = eta;
            let mut halvings = 0;
            let mut prev: Option<(f64, Tensor)> = None;
            for _ in 0..inner_iters {
                let tape = Tape::new();
                let null_leaf = tape.leaf(&null)?;
                let (eps_unc, _) = predict_noise_matrix(params, &z_bar, t_train, &null_leaf)?;
                let eps = cfg_predict(&eps_cond, &eps_unc, w)?;
                let z_prev = ddim_step(&z_bar, t, &eps, sched)?;
                let loss = target.sub(&z_prev)?.squared_frobenius_norm()?;
                let loss_val = loss.value()?;

                if let Some((prev_loss, prev_null)) = &prev {
                    if loss_val > *prev_loss {
                        null = prev_null.detached();
                        halvings += 1;
                        if halvings > MAX_HALVINGS {
                            break;
                        }
                        step_eta *= 0.5;
                        continue;
                    }
                }
                losses.push(loss_val);
                let grad = loss.backward()?.wrt(&null_leaf)?;
                prev = Some((loss_val, null.detached()));
                null = null.sub(&grad.scale(step_eta)?)?.detached();
            }
            // Keep the best-seen embedding if the last candidate regressed.
            if let Some((prev_loss, prev_null)) = prev {
                let (eps_unc, _) = predict_noise_matrix(params, &z_bar, t_train, &null)?;
                let eps = cfg_predict(&eps_cond, &eps_unc, w)?;
                let z_prev = ddim_step(&z_bar, t, &eps, sched)?;
                let final_loss = target.sub(&z_prev)?.squared_frobenius_norm()?.value()?;
                if final_loss > prev_loss {
                    null = prev_null;
                } else {
                    losses.push(final_loss);
                }
            }
        }

        let (eps_unc, _) = predict_noise_matrix(params, &z_bar, t_train, &null)?;
        let eps = cfg_predict(&eps_cond, &eps_unc, w)?;
        z_bar = ddim_step(&z_bar, t, &eps, sched)?;
        embeddings.push(null.detached());
        all_losses.push(losses);
    }

    Ok((
        NullTextSet {
            embeddings,
            eta,
            inner_iters,
            w,
        },
        all_losses,
    ))
}

/// Deterministic guided denoising from z_T using per-step nulls.
/// Returns the final latent and, when a pivotal trajectory is supplied,
/// the per-step squared distance to it (in step order t = T..1).
pub fn reconstruct(
    params: &DenoiserParams,
    z_top: &Tensor,
    prompt: &PromptEmbedding,
    nulls: &NullTextSet,
    sched: &SampleSchedule,
    w: f64,
    pivot: Option<&LatentTrajectory>,
) -> Result<(Tensor, Vec<f64>)> {
    let steps = sched.steps();
    if nulls.steps() != steps {
        return Err(Error::LengthMismatch(format!(
            "null set has {} entries, schedule {} steps",
            nulls.steps(),
            steps
        )));
    }
    let mut z = z_top.detached();
    let mut diags = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let t_train = sched.train_step[t];
        let (eps_cond, _) = predict_noise_matrix(params, &z, t_train, &prompt.matrix)?;
        let (eps_unc, _) = predict_noise_matrix(params, &z, t_train, nulls.for_step(t)?)?;
        let eps = cfg_predict(&eps_cond, &eps_unc, w)?;
        z = ddim_step(&z, t, &eps, sched)?;
        let diag = match pivot {
            Some(p) => z
                .sub(&p.states[t - 1])?
                .squared_frobenius_norm()?
                .value()?,
            None => 0.0,
        };
        diags.push(diag);
    }
    Ok((z, diags))
}

#[derive(Debug, Serialize, Deserialize)]
struct NullHeader {
    t: usize,
    eta: f64,
    inner_iters: usize,
    w: f64,
}

pub fn write_null_set(path: &Path, nulls: &NullTextSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = serde_json::to_vec(&NullHeader {
        t: nulls.steps(),
        eta: nulls.eta,
        inner_iters: nulls.inner_iters,
        w: nulls.w,
    })?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for e in &nulls.embeddings {
        write_tensor(&mut w, e)?;
    }
    Ok(())
}

pub fn read_null_set(path: &Path) -> Result<NullTextSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let len = u32::from_le_bytes(b4) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: NullHeader = serde_json::from_slice(&header)?;
    let embeddings = (0..header.t)
        .map(|_| read_tensor(&mut r))
        .collect::<Result<Vec<_>>>()?;
    Ok(NullTextSet {
        embeddings,
        eta: header.eta,
        inner_iters: header.inner_iters,
        w: header.w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{embed_prompt, DenoiserConfig, DenoiserParams};
    use crate::diffusion::{invert_trajectory, InversionVariant, NoiseSchedule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randomized_params(seed: u64) -> DenoiserParams {
        // Random output head so predictions depend on the conditioning.
        let mut p = DenoiserParams::init(DenoiserConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..64 * 16)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.05)
            .collect();
        p.out_proj = Tensor::new(vec![64, 16], data).unwrap();
        p
    }

    fn random_latent(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![64, 16],
            (0..64 * 16)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
        .unwrap()
    }

    fn small_sched() -> SampleSchedule {
        NoiseSchedule::linear(100, 1e-3, 0.02)
            .unwrap()
            .subsample(5)
            .unwrap()
    }

    fn pivotal(
        params: &DenoiserParams,
        z0: &Tensor,
        prompt: &crate::denoiser::PromptEmbedding,
        sched: &SampleSchedule,
    ) -> LatentTrajectory {
        invert_trajectory(z0, sched, InversionVariant::ExactInverse, |z, t| {
            let (eps, _) = predict_noise_matrix(params, z, sched.train_step[t], &prompt.matrix)?;
            Ok(eps)
        })
        .unwrap()
    }

    #[test]
    fn for_step_indexes_from_the_top() {
        let e0 = Tensor::scalar(0.0);
        let nulls = NullTextSet {
            embeddings: vec![Tensor::scalar(3.0), Tensor::scalar(2.0), Tensor::scalar(1.0)],
            eta: 0.01,
            inner_iters: 10,
            w: 7.5,
        };
        assert_eq!(nulls.for_step(3).unwrap().value().unwrap(), 3.0);
        assert_eq!(nulls.for_step(1).unwrap().value().unwrap(), 1.0);
        assert!(nulls.for_step(0).is_err());
        assert!(nulls.for_step(4).is_err());
        let c = NullTextSet::constant(&e0, 3, 7.5);
        assert_eq!(c.steps(), 3);
    }

    #[test]
    fn w1_leaves_null_unchanged() {
        let params = randomized_params(1);
        let prompt = embed_prompt(&params, &[3, 8]).unwrap();
        let sched = small_sched();
        let z0 = random_latent(2);
        let traj = pivotal(&params, &z0, &prompt, &sched);
        let (nulls, losses) =
            optimize_null_texts(&params, &traj, &prompt, &sched, 1.0, 0.01, 10).unwrap();
        let init = embed_prompt(&params, &[]).unwrap().matrix;
        for e in &nulls.embeddings {
            assert_eq!(e.data(), init.data());
        }
        // the gradient is identically zero at w = 1, so exactly one loss
        // (the plain round-trip error) is recorded per step
        let steps = sched.steps();
        let mut z = traj.states[steps].detached();
        for (i, l) in losses.iter().enumerate() {
            assert_eq!(l.len(), 1);
            let t = steps - i;
            let (eps, _) =
                predict_noise_matrix(&params, &z, sched.train_step[t], &prompt.matrix).unwrap();
            z = ddim_step(&z, t, &eps, &sched).unwrap();
            let expect = traj.states[t - 1]
                .sub(&z)
                .unwrap()
                .squared_frobenius_norm()
                .unwrap()
                .value()
                .unwrap();
            assert_eq!(l[0], expect);
        }
    }

    #[test]
    fn inner_loop_losses_non_increasing() {
        let params = randomized_params(3);
        let prompt = embed_prompt(&params, &[1, 12]).unwrap();
        let sched = small_sched();
        let z0 = random_latent(4);
        let traj = pivotal(&params, &z0, &prompt, &sched);
        let (_, losses) =
            optimize_null_texts(&params, &traj, &prompt, &sched, 7.5, 0.01, 10).unwrap();
        for step in &losses {
            assert!(!step.is_empty());
            for w in step.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "increase {:?}", w);
            }
        }
    }

    #[test]
    fn optimized_nulls_beat_constant_null() {
        let params = randomized_params(5);
        let prompt = embed_prompt(&params, &[2, 7]).unwrap();
        let sched = small_sched();
        let z0 = random_latent(6);
        let traj = pivotal(&params, &z0, &prompt, &sched);
        let w = 7.5;
        let (nulls, _) =
            optimize_null_texts(&params, &traj, &prompt, &sched, w, 0.01, 10).unwrap();
        let constant = NullTextSet::constant(
            &embed_prompt(&params, &[]).unwrap().matrix,
            sched.steps(),
            w,
        );
        let top = &traj.states[sched.steps()];
        let (z_opt, _) =
            reconstruct(&params, top, &prompt, &nulls, &sched, w, None).unwrap();
        let (z_const, _) =
            reconstruct(&params, top, &prompt, &constant, &sched, w, None).unwrap();
        let mse = |z: &Tensor| {
            z.sub(&z0)
                .unwrap()
                .squared_frobenius_norm()
                .unwrap()
                .value()
                .unwrap()
        };
        assert!(mse(&z_opt) < mse(&z_const), "{} vs {}", mse(&z_opt), mse(&z_const));
    }

    #[test]
    fn reconstruct_is_deterministic() {
        let params = randomized_params(7);
        let prompt = embed_prompt(&params, &[5]).unwrap();
        let sched = small_sched();
        let z0 = random_latent(8);
        let traj = pivotal(&params, &z0, &prompt, &sched);
        let nulls = NullTextSet::constant(
            &embed_prompt(&params, &[]).unwrap().matrix,
            sched.steps(),
            7.5,
        );
        let top = &traj.states[sched.steps()];
        let (a, _) = reconstruct(&params, top, &prompt, &nulls, &sched, 7.5, Some(&traj)).unwrap();
        let (b, _) = reconstruct(&params, top, &prompt, &nulls, &sched, 7.5, Some(&traj)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn length_mismatch_rejected() {
        let params = randomized_params(9);
        let prompt = embed_prompt(&params, &[5]).unwrap();
        let sched = small_sched();
        let nulls = NullTextSet::constant(&prompt.matrix, 2, 7.5);
        let z = random_latent(10);
        assert!(matches!(
            reconstruct(&params, &z, &prompt, &nulls, &sched, 7.5, None),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn null_set_io_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let nulls = NullTextSet {
            embeddings: vec![random_latent(11), random_latent(12)],
            eta: 0.02,
            inner_iters: 4,
            w: 7.5,
        };
        let path = dir.path().join("nulls.bin");
        write_null_set(&path, &nulls).unwrap();
        let back = read_null_set(&path).unwrap();
        assert_eq!(back.steps(), 2);
        assert_eq!(back.eta, 0.02);
        assert_eq!(back.inner_iters, 4);
        assert_eq!(back.w, 7.5);
        for (a, b) in back.embeddings.iter().zip(&nulls.embeddings) {
            assert_eq!(a, b);
        }
    }
}
