//! End-to-end editing pipeline: pivotal inversion, null-text
//! optimization, EOT-suppression, and attention-guided denoising, plus
//! the deterministic run-directory writer.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{embed_prompt, predict_noise_matrix, DenoiserParams, PromptEmbedding};
use crate::diffusion::{
    cfg_predict, ddim_step, invert_trajectory, InversionVariant, LatentTrajectory, NoiseSchedule,
    SampleSchedule, GUIDANCE_DENOISE, GUIDANCE_INVERT,
};
use crate::nulltext::{optimize_null_texts, NullTextSet, DEFAULT_ETA, DEFAULT_INNER_ITERS};
use crate::promptedit::{
    attention_loss, average_maps, classify_tokens, eot_suppress, split_attention,
    update_prompt_embedding, AttnLossConfig, EditMode, EditSpec, SuppressionConfig,
};
use crate::synthbench::tokens_to_image;
use crate::tensor::{write_tensor, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub null_opt: bool,
    pub eot_sup: bool,
    pub attn_loss: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            null_opt: true,
            eot_sup: true,
            attn_loss: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EditRunConfig {
    pub t_train: usize,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub w_invert: f64,
    pub w_denoise: f64,
    pub eta: f64,
    pub inner_iters: usize,
    pub attn: AttnLossConfig,
    pub toggles: StageToggles,
    pub exact_inverse: bool,
    /// Use e^(-alpha sigma) instead of e^(+alpha sigma) in the
    /// EOT-suppression rule. The printed formula amplifies a deleted
    /// token's singular values, which raises rather than suppresses the
    /// concept in the predicted noise; the damped variant is the one that
    /// actually deletes, so it is the default. Set to `false` for the
    /// formula as printed; the ablation report shows both.
    pub flipped_suppression: bool,
    pub seed: u64,
}

impl Default for EditRunConfig {
    fn default() -> Self {
        EditRunConfig {
            t_train: 1000,
            t_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            w_invert: GUIDANCE_INVERT,
            w_denoise: GUIDANCE_DENOISE,
            eta: DEFAULT_ETA,
            inner_iters: DEFAULT_INNER_ITERS,
            attn: AttnLossConfig::default(),
            toggles: StageToggles::default(),
            exact_inverse: true,
            flipped_suppression: true,
            seed: 0,
        }
    }
}

impl EditRunConfig {
    pub fn schedule(&self) -> Result<SampleSchedule> {
        NoiseSchedule::linear(self.t_train, self.beta_start, self.beta_end)?
            .subsample(self.t_steps)
    }

    pub fn variant(&self) -> InversionVariant {
        if self.exact_inverse {
            InversionVariant::ExactInverse
        } else {
            InversionVariant::Unscaled
        }
    }

    /// Suppression constants for the edit, honoring per-spec overrides.
    pub fn suppression(&self, spec: &EditSpec) -> SuppressionConfig {
        let mut cfg = SuppressionConfig::for_mode(spec.mode);
        cfg.flipped = self.flipped_suppression;
        if let Some(b) = spec.overrides.beta {
            cfg.beta = b;
        }
        if let Some(a) = spec.overrides.alpha {
            cfg.alpha = a;
        }
        cfg
    }

    pub fn attn_for(&self, spec: &EditSpec) -> AttnLossConfig {
        let mut cfg = self.attn;
        if let Some(v) = spec.overrides.lambda_pos {
            cfg.lambda_pos = v;
        }
        if let Some(v) = spec.overrides.lambda_neg {
            cfg.lambda_neg = v;
        }
        if let Some(v) = spec.overrides.embed_lr {
            cfg.embed_lr = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepDiag {
    pub t: usize,
    pub null_loss: f64,
    pub attn_loss: f64,
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub output: Tensor,
    pub trajectory: LatentTrajectory,
    pub nulls: NullTextSet,
    pub prompt_before: PromptEmbedding,
    pub prompt_after: PromptEmbedding,
    pub diagnostics: Vec<StepDiag>,
}

/// Run the full editing pipeline on a clean latent.
pub fn edit(
    params: &DenoiserParams,
    z_0: &Tensor,
    spec: &EditSpec,
    cfg: &EditRunConfig,
) -> Result<EditResult> {
    spec.validate().map_err(|e| e.in_stage("config"))?;
    let sched = cfg.schedule().map_err(|e| e.in_stage("config"))?;

    let prompt = embed_prompt(params, &spec.target_caption).map_err(|e| e.in_stage("config"))?;
    let classified = if spec.mode == EditMode::ReconstructOnly {
        prompt.clone()
    } else {
        classify_tokens(&prompt, spec).map_err(|e| e.in_stage("config"))?
    };

    // (1) Pivotal inversion under the conditional prompt, w = w_invert.
    let traj = invert_trajectory(z_0, &sched, cfg.variant(), |z, t| {
        let t_train = sched.train_step[t];
        let (eps_cond, _) = predict_noise_matrix(params, z, t_train, &classified.matrix)?;
        if cfg.w_invert == 1.0 {
            return Ok(eps_cond);
        }
        let null = embed_prompt(params, &[])?;
        let (eps_unc, _) = predict_noise_matrix(params, z, t_train, &null.matrix)?;
        cfg_predict(&eps_cond, &eps_unc, cfg.w_invert)
    })
    .map_err(|e| e.in_stage("inversion"))?;

    // (2) Null-text optimization against the pivotal trajectory.
    let (nulls, null_losses) = if cfg.toggles.null_opt {
        optimize_null_texts(
            params,
            &traj,
            &classified,
            &sched,
            cfg.w_denoise,
            cfg.eta,
            cfg.inner_iters,
        )
        .map_err(|e| e.in_stage("null-opt"))?
    } else {
        let null = embed_prompt(params, &[]).map_err(|e| e.in_stage("null-opt"))?;
        (
            NullTextSet::constant(&null.matrix, sched.steps(), cfg.w_denoise),
            vec![Vec::new(); sched.steps()],
        )
    };

    // (3) EOT-suppression of the edited prompt.
    let do_edit_stages = spec.mode != EditMode::ReconstructOnly;
    let mut p_hat = if do_edit_stages && cfg.toggles.eot_sup {
        eot_suppress(&classified, spec, &cfg.suppression(spec))
            .map_err(|e| e.in_stage("suppression"))?
    } else {
        classified.clone()
    };

    // (4)-(5) Guided denoising with per-step attention-loss refinement.
    let attn_cfg = cfg.attn_for(spec);
    let steps = sched.steps();
    let mut z = traj.states[steps].detached();
    let mut diagnostics = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let t_train = sched.train_step[t];
        let null = nulls.for_step(t).map_err(|e| e.in_stage("denoise"))?;

        let mut step_attn = 0.0;
        if do_edit_stages && cfg.toggles.attn_loss {
            step_attn = refine_prompt(params, &z, t_train, &classified, &mut p_hat, &attn_cfg)
                .map_err(|e| e.in_stage("attn-loss"))?;
        }

        let (eps_cond, _) = predict_noise_matrix(params, &z, t_train, &p_hat.matrix)
            .map_err(|e| e.in_stage("denoise"))?;
        let (eps_unc, _) = predict_noise_matrix(params, &z, t_train, null)
            .map_err(|e| e.in_stage("denoise"))?;
        let eps =
            cfg_predict(&eps_cond, &eps_unc, cfg.w_denoise).map_err(|e| e.in_stage("denoise"))?;
        z = ddim_step(&z, t, &eps, &sched).map_err(|e| e.in_stage("denoise"))?;

        diagnostics.push(StepDiag {
            t,
            null_loss: null_losses[steps - t].last().copied().unwrap_or(0.0),
            attn_loss: step_attn,
        });
    }

    Ok(EditResult {
        output: z,
        trajectory: traj,
        nulls,
        prompt_before: classified,
        prompt_after: p_hat,
        diagnostics,
    })
}

/// One attention-loss refinement step: reference maps come from the
/// unedited prompt at the same latent state, the tracked branch from the
/// current edited prompt. The update persists across steps.
fn refine_prompt(
    params: &DenoiserParams,
    z: &Tensor,
    t_train: usize,
    reference: &PromptEmbedding,
    p_hat: &mut PromptEmbedding,
    cfg: &AttnLossConfig,
) -> Result<f64> {
    let (_, ref_rec) = predict_noise_matrix(params, z, t_train, &reference.matrix)?;
    let ref_avg = average_maps(&ref_rec.maps)?;
    let (a_pos, a_neg) = split_attention(&ref_avg, &reference.polarity)?;

    let tape = Tape::new();
    let hat_leaf = tape.leaf(&p_hat.matrix)?;
    let (_, hat_rec) = predict_noise_matrix(params, z, t_train, &hat_leaf)?;
    let hat_avg = average_maps(&hat_rec.maps)?;
    let (a_hat_pos, a_hat_neg) = split_attention(&hat_avg, &p_hat.polarity)?;

    let loss = attention_loss(
        &a_hat_pos,
        &a_pos.detached(),
        a_hat_neg.as_ref(),
        a_neg.as_ref().map(|t| t.detached()).as_ref(),
        cfg,
    )?;
    let loss_val = loss.value()?;
    let grad = loss.backward()?.wrt(&hat_leaf)?;
    *p_hat = update_prompt_embedding(p_hat, &grad, cfg.embed_lr)?;
    Ok(loss_val)
}

/// Reconstruction path: same pipeline with the editing stages disabled.
pub fn reconstruct_only(
    params: &DenoiserParams,
    z_0: &Tensor,
    caption: Vec<u16>,
    cfg: &EditRunConfig,
) -> Result<EditResult> {
    edit(params, z_0, &EditSpec::reconstruct_only(caption), cfg)
}

/// 8-bit min-max normalized P5 rendering of a token latent.
pub fn write_pgm(path: &Path, latent: &Tensor) -> Result<()> {
    let img = tokens_to_image(latent)?;
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "P5")?;
    writeln!(w, "32 32")?;
    writeln!(w, "255")?;
    let bytes: Vec<u8> = img
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Serialize a finished run into `dir`: config, trajectory, nulls,
/// prompt matrices before/after refinement, the output latent, its PGM
/// rendering, and per-step diagnostics. Nothing written depends on wall
/// time, so identical runs produce byte-identical directories.
pub fn write_run_dir(
    dir: &Path,
    cfg: &EditRunConfig,
    spec: &EditSpec,
    result: &EditResult,
) -> Result<()> {
    fs::create_dir_all(dir)?;

    #[derive(Serialize)]
    struct RunConfigFile<'a> {
        config: &'a EditRunConfig,
        spec: &'a EditSpec,
    }
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(dir.join("config.json"))?),
        &RunConfigFile { config: cfg, spec },
    )?;

    let mut w = BufWriter::new(File::create(dir.join("trajectory.bin"))?);
    for s in &result.trajectory.states {
        write_tensor(&mut w, s)?;
    }
    drop(w);

    crate::nulltext::write_null_set(&dir.join("nulls.bin"), &result.nulls)?;

    for (name, m) in [
        ("prompt_before.bin", &result.prompt_before.matrix),
        ("prompt_after.bin", &result.prompt_after.matrix),
        ("output.bin", &result.output),
    ] {
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        write_tensor(&mut w, m)?;
    }

    write_pgm(&dir.join("output.pgm"), &result.output)?;

    let mut w = BufWriter::new(File::create(dir.join("diagnostics.csv"))?);
    writeln!(w, "step,null_loss,attn_loss")?;
    for d in &result.diagnostics {
        writeln!(w, "{},{},{}", d.t, d.null_loss, d.attn_loss)?;
    }
    Ok(())
}

/// Sample a latent from scratch: seeded Gaussian z_T, then guided
/// denoising conditioned on the caption with a constant null embedding.
/// The toy analogue of regenerating audio from the target prompt alone.
pub fn generate(
    params: &DenoiserParams,
    caption: &[u16],
    cfg: &EditRunConfig,
    seed: u64,
) -> Result<Tensor> {
    use rand::{Rng, SeedableRng};
    let sched = cfg.schedule()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = params.config.latent_shape();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let z_top = Tensor::new(shape, data)?;
    let prompt = embed_prompt(params, caption)?;
    let nulls = NullTextSet::constant(
        &embed_prompt(params, &[])?.matrix,
        sched.steps(),
        cfg.w_denoise,
    );
    let (z, _) = crate::nulltext::reconstruct(
        params,
        &z_top,
        &prompt,
        &nulls,
        &sched,
        cfg.w_denoise,
        None,
    )?;
    Ok(z)
}

/// Per-sample evaluation record comparing the original latent, a latent
/// regenerated from the target caption alone, and the edited latent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: usize,
    pub group: EditMode,
    pub alignment_original: f64,
    pub alignment_regenerated: f64,
    pub alignment_edited: f64,
    pub preservation_regenerated: f64,
    pub preservation_edited: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub rows: Vec<SampleMetrics>,
    /// FD of each set against the original-latent feature set; None when
    /// the sets are too small for a stable covariance.
    pub fd_regenerated: Option<f64>,
    pub fd_edited: Option<f64>,
}

const REGEN_SALT: u64 = 0x7265_6765;

/// Caption tokens preserved by the edit: present both before and after.
fn preserved_tokens(sample: &crate::synthbench::BenchSample) -> Vec<u16> {
    sample
        .caption
        .iter()
        .filter(|t| sample.edit.post_edit_caption.contains(t))
        .copied()
        .collect()
}

fn eval_one(
    params: &DenoiserParams,
    sample: &crate::synthbench::BenchSample,
    cfg: &EditRunConfig,
) -> Result<(SampleMetrics, Vec<f64>, Vec<f64>, Vec<f64>)> {
    use crate::synthbench::{alignment_score, feature_vector, preservation_error, sample_seed};
    let target = &sample.edit.post_edit_caption;
    let preserved = preserved_tokens(sample);

    let regen = generate(
        params,
        target,
        cfg,
        sample_seed(cfg.seed ^ REGEN_SALT, sample.id),
    )?;
    let edited = edit(params, &sample.latent, &sample.edit.spec, cfg)?.output;

    let metrics = SampleMetrics {
        id: sample.id,
        group: sample.group,
        alignment_original: alignment_score(&sample.latent, target)?,
        alignment_regenerated: alignment_score(&regen, target)?,
        alignment_edited: alignment_score(&edited, target)?,
        preservation_regenerated: preservation_error(&regen, &sample.latent, &preserved)?,
        preservation_edited: preservation_error(&edited, &sample.latent, &preserved)?,
    };
    Ok((
        metrics,
        feature_vector(params, &sample.latent)?,
        feature_vector(params, &regen)?,
        feature_vector(params, &edited)?,
    ))
}

/// Plain-data copy of a sample; tensors carry a thread-local tape
/// handle, so fan-out ships raw buffers and rebuilds per thread.
struct SamplePayload {
    id: usize,
    group: EditMode,
    caption: Vec<u16>,
    latent: Vec<f64>,
    spec: EditSpec,
    post_edit_caption: Vec<u16>,
}

impl SamplePayload {
    fn of(s: &crate::synthbench::BenchSample) -> SamplePayload {
        SamplePayload {
            id: s.id,
            group: s.group,
            caption: s.caption.clone(),
            latent: s.latent.data().to_vec(),
            spec: s.edit.spec.clone(),
            post_edit_caption: s.edit.post_edit_caption.clone(),
        }
    }

    fn rebuild(self, shape: Vec<usize>) -> Result<crate::synthbench::BenchSample> {
        Ok(crate::synthbench::BenchSample {
            id: self.id,
            group: self.group,
            caption: self.caption,
            latent: Tensor::new(shape, self.latent)?,
            edit: crate::synthbench::EditTriple {
                spec: self.spec,
                post_edit_caption: self.post_edit_caption,
                target_latent: Tensor::default(),
            },
        })
    }
}

fn params_snapshot(params: &DenoiserParams) -> Vec<(Vec<usize>, Vec<f64>)> {
    params
        .tensors()
        .iter()
        .map(|t| (t.shape().to_vec(), t.data().to_vec()))
        .collect()
}

fn params_restore(
    config: crate::denoiser::DenoiserConfig,
    snapshot: &[(Vec<usize>, Vec<f64>)],
) -> Result<DenoiserParams> {
    let mut p = DenoiserParams::init(config);
    for (slot, (shape, data)) in p.tensors_mut().into_iter().zip(snapshot) {
        *slot = Tensor::new(shape.clone(), data.clone())?;
    }
    Ok(p)
}

/// Evaluate every sample; `jobs > 1` fans out across threads. Per-sample
/// work is pure, so results are identical at any job count and are
/// merged in sample order.
pub fn evaluate(
    params: &DenoiserParams,
    samples: &[crate::synthbench::BenchSample],
    cfg: &EditRunConfig,
    jobs: usize,
) -> Result<EvalOutcome> {
    let per_sample: Vec<_> = if jobs > 1 && samples.len() > 1 {
        let snapshot = params_snapshot(params);
        let config = params.config;
        let shape = config.latent_shape();
        let mut payloads: Vec<Option<SamplePayload>> =
            samples.iter().map(|s| Some(SamplePayload::of(s))).collect();
        let n = payloads.len();
        let mut slots: Vec<Option<Result<_>>> = (0..n).map(|_| None).collect();

        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            // round-robin partition; merged back by sample index below
            for worker in 0..jobs.min(n) {
                let chunk: Vec<(usize, SamplePayload)> = payloads
                    .iter_mut()
                    .enumerate()
                    .filter(|(i, _)| i % jobs == worker)
                    .map(|(i, p)| (i, p.take().unwrap()))
                    .collect();
                let snapshot = &snapshot;
                let shape = &shape;
                handles.push(scope.spawn(move || {
                    let params = params_restore(config, snapshot)?;
                    chunk
                        .into_iter()
                        .map(|(i, payload)| {
                            let sample = payload.rebuild(shape.clone())?;
                            Ok((i, eval_one(&params, &sample, cfg)?))
                        })
                        .collect::<Result<Vec<_>>>()
                }));
            }
            for h in handles {
                let worker_out = h
                    .join()
                    .unwrap_or_else(|_| Err(Error::Config("eval worker panicked".into())));
                match worker_out {
                    Ok(list) => {
                        for (i, out) in list {
                            slots[i] = Some(Ok(out));
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(())
        })?;
        slots
            .into_iter()
            .map(|s| s.expect("every sample evaluated"))
            .collect::<Result<Vec<_>>>()?
    } else {
        samples
            .iter()
            .map(|s| eval_one(params, s, cfg))
            .collect::<Result<Vec<_>>>()?
    };

    let mut rows = Vec::with_capacity(per_sample.len());
    let mut feats_orig = Vec::with_capacity(per_sample.len());
    let mut feats_regen = Vec::with_capacity(per_sample.len());
    let mut feats_edit = Vec::with_capacity(per_sample.len());
    for (m, fo, fr, fe) in per_sample {
        rows.push(m);
        feats_orig.push(fo);
        feats_regen.push(fr);
        feats_edit.push(fe);
    }

    let dim = feats_orig.first().map(|f| f.len()).unwrap_or(0);
    let (fd_regenerated, fd_edited) = if feats_orig.len() > dim {
        (
            Some(crate::synthbench::frechet_distance(
                &feats_regen,
                &feats_orig,
            )?),
            Some(crate::synthbench::frechet_distance(&feats_edit, &feats_orig)?),
        )
    } else {
        (None, None)
    };
    Ok(EvalOutcome {
        rows,
        fd_regenerated,
        fd_edited,
    })
}

/// Paired reconstruction MSEs at guided scale: with per-step optimized
/// nulls vs the constant null embedding. Both share one inversion.
pub fn reconstruction_pair(
    params: &DenoiserParams,
    z_0: &Tensor,
    caption: &[u16],
    cfg: &EditRunConfig,
) -> Result<(f64, f64)> {
    let sched = cfg.schedule()?;
    let prompt = embed_prompt(params, caption)?;
    let traj = invert_trajectory(z_0, &sched, cfg.variant(), |z, t| {
        let (eps, _) = predict_noise_matrix(params, z, sched.train_step[t], &prompt.matrix)?;
        Ok(eps)
    })?;
    let top = &traj.states[sched.steps()];
    let (nulls, _) = optimize_null_texts(
        params,
        &traj,
        &prompt,
        &sched,
        cfg.w_denoise,
        cfg.eta,
        cfg.inner_iters,
    )?;
    let constant = NullTextSet::constant(
        &embed_prompt(params, &[])?.matrix,
        sched.steps(),
        cfg.w_denoise,
    );
    let mse = |z: &Tensor| -> Result<f64> {
        Ok(z.sub(z_0)?.squared_frobenius_norm()?.value()? / z_0.len() as f64)
    };
    let (z_opt, _) = crate::nulltext::reconstruct(
        params, top, &prompt, &nulls, &sched, cfg.w_denoise, None,
    )?;
    let (z_const, _) = crate::nulltext::reconstruct(
        params, top, &prompt, &constant, &sched, cfg.w_denoise, None,
    )?;
    Ok((mse(&z_opt)?, mse(&z_const)?))
}

/// Relative MSE of the w = 1 invert-then-denoise round trip.
pub fn round_trip_relative_mse(
    params: &DenoiserParams,
    z_0: &Tensor,
    caption: &[u16],
    cfg: &EditRunConfig,
) -> Result<f64> {
    let mut w1 = cfg.clone();
    w1.w_denoise = 1.0;
    w1.toggles = StageToggles {
        null_opt: false,
        eot_sup: false,
        attn_loss: false,
    };
    let out = reconstruct_only(params, z_0, caption.to_vec(), &w1)?;
    let num = out.output.sub(z_0)?.squared_frobenius_norm()?.value()?;
    let den = z_0.squared_frobenius_norm()?.value()?.max(1e-12);
    Ok(num / den)
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Catch-all validation for user-supplied run configs.
pub fn validate_config(cfg: &EditRunConfig) -> Result<()> {
    if cfg.t_steps < 2 {
        return Err(Error::Config("t_steps must be >= 2".into()));
    }
    if cfg.inner_iters < 1 {
        return Err(Error::Config("inner_iters must be >= 1".into()));
    }
    if !(cfg.eta > 0.0) {
        return Err(Error::Config("eta must be positive".into()));
    }
    cfg.schedule().map(|_| ())
}
