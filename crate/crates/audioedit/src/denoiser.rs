//! Trainable conditional noise predictor with cross-attention over
//! prompt embeddings, plus its DDPM training loop, the prompt embedding
//! table, and checkpoint I/O.
//!
//! The latent is 64 tokens of 16 values each (a 32x32 grid of 4x4
//! patches). Two transformer-style blocks attend to the L x d prompt
//! matrix; the output head is zero-initialized so an untrained model
//! predicts zero noise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DenoiserConfig {
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub latent_tokens: usize,
    pub token_dim: usize,
    pub t_train: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            vocab_size: 16,
            prompt_len: 8,
            embed_dim: 32,
            hidden: 64,
            heads: 4,
            latent_tokens: 64,
            token_dim: 16,
            t_train: 1000,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn sot_id(&self) -> u16 {
        self.vocab_size as u16
    }
    pub fn eot_id(&self) -> u16 {
        self.vocab_size as u16 + 1
    }
    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.latent_tokens, self.token_dim]
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub token_table: Tensor,
    pub time_embed: Tensor,
    /// Learned positional embedding for the latent tokens; without it the
    /// tokens are exchangeable and caption-conditioned spatial structure
    /// cannot be expressed.
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub out_proj: Tensor,
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            v * std
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig) -> DenoiserParams {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6e6f6973);
        let d = config.embed_dim;
        let h = config.hidden;
        let dz = config.token_dim;
        let mut token_table =
            randn(&mut rng, vec![config.vocab_size + 2, d], 1.0 / (d as f64).sqrt());
        {
            // SOT carries no content; keep it near zero. EOT is padding
            // and is pinned to exactly zero (and never updated, like a
            // `padding_idx` embedding): otherwise the model co-opts the
            // padding rows as an attention sink, and rescaling them by
            // e^{±ασ} during EOT-suppression throws the trajectory far
            // off-distribution.
            let mut data = token_table.data().to_vec();
            let sot = config.sot_id() as usize;
            for v in &mut data[sot * d..(sot + 1) * d] {
                *v *= 0.05;
            }
            let eot = config.eot_id() as usize;
            for v in &mut data[eot * d..(eot + 1) * d] {
                *v = 0.0;
            }
            token_table = Tensor::new(vec![config.vocab_size + 2, d], data).unwrap();
        }
        let time_embed = randn(&mut rng, vec![config.t_train, h], 0.1);
        let pos_embed = {
            // Sinusoidal features over the patch grid (then learned):
            // 2-D Fourier features across a few frequencies and
            // orientations, padded with small random dims.
            let mut base = randn(&mut rng, vec![config.latent_tokens, h], 0.1)
                .data()
                .to_vec();
            let side = (config.latent_tokens as f64).sqrt() as usize;
            for i in 0..config.latent_tokens {
                let (pr, pc) = (i / side, i % side);
                let (y, x) = ((pr * 4) as f64, (pc * 4) as f64);
                let mut col = 0;
                for freq in 2..=5 {
                    for angle_idx in 0..4 {
                        let theta = std::f64::consts::PI / 4.0 * angle_idx as f64;
                        let u = x * theta.cos() + y * theta.sin();
                        let phase = 2.0 * std::f64::consts::PI * freq as f64 * u / 32.0;
                        if col + 1 < h {
                            base[i * h + col] = 0.5 * phase.sin();
                            base[i * h + col + 1] = 0.5 * phase.cos();
                        }
                        col += 2;
                    }
                }
            }
            Tensor::new(vec![config.latent_tokens, h], base).unwrap()
        };
        let blocks = (0..2)
            .map(|bi| {
                let in_dim = if bi == 0 { dz } else { h };
                BlockParams {
                    proj_w: randn(&mut rng, vec![in_dim, h], 1.0 / (in_dim as f64).sqrt()),
                    proj_b: Tensor::zeros(vec![1, h]),
                    wq: randn(&mut rng, vec![h, h], 1.0 / (h as f64).sqrt()),
                    wk: randn(&mut rng, vec![d, h], 1.0 / (d as f64).sqrt()),
                    wv: randn(&mut rng, vec![d, h], 1.0 / (d as f64).sqrt()),
                    wo: randn(&mut rng, vec![h, h], 1.0 / (h as f64).sqrt()),
                    ff1_w: randn(&mut rng, vec![h, h], 1.0 / (h as f64).sqrt()),
                    ff1_b: Tensor::zeros(vec![1, h]),
                    ff2_w: randn(&mut rng, vec![h, h], 1.0 / (h as f64).sqrt()),
                    ff2_b: Tensor::zeros(vec![1, h]),
                }
            })
            .collect();
        let out_proj = Tensor::zeros(vec![h, dz]);
        DenoiserParams {
            config,
            token_table,
            time_embed,
            pos_embed,
            blocks,
            out_proj,
        }
    }

    /// Every learnable tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.token_table, &self.time_embed, &self.pos_embed];
        for b in &self.blocks {
            v.extend([
                &b.proj_w, &b.proj_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.ff1_w, &b.ff1_b, &b.ff2_w,
                &b.ff2_b,
            ]);
        }
        v.push(&self.out_proj);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.token_table, &mut self.time_embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            v.extend([
                &mut b.proj_w,
                &mut b.proj_b,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ff1_w,
                &mut b.ff1_b,
                &mut b.ff2_w,
                &mut b.ff2_b,
            ]);
        }
        v.push(&mut self.out_proj);
        v
    }

    /// Copy with every tensor registered as a leaf on `tape`.
    pub fn tracked(&self, tape: &Tape) -> Result<DenoiserParams> {
        Ok(DenoiserParams {
            config: self.config,
            token_table: tape.leaf(&self.token_table)?,
            time_embed: tape.leaf(&self.time_embed)?,
            pos_embed: tape.leaf(&self.pos_embed)?,
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    Ok(BlockParams {
                        proj_w: tape.leaf(&b.proj_w)?,
                        proj_b: tape.leaf(&b.proj_b)?,
                        wq: tape.leaf(&b.wq)?,
                        wk: tape.leaf(&b.wk)?,
                        wv: tape.leaf(&b.wv)?,
                        wo: tape.leaf(&b.wo)?,
                        ff1_w: tape.leaf(&b.ff1_w)?,
                        ff1_b: tape.leaf(&b.ff1_b)?,
                        ff2_w: tape.leaf(&b.ff2_w)?,
                        ff2_b: tape.leaf(&b.ff2_b)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            out_proj: tape.leaf(&self.out_proj)?,
        })
    }

    /// Checksum over all parameter bytes; used to assert weights are
    /// never mutated by the editing pipeline.
    pub fn checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf29ce484222325;
        for t in self.tensors() {
            for v in t.data() {
                acc ^= v.to_bits();
                acc = acc.wrapping_mul(0x100000001b3);
            }
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Sot,
    Word(u16),
    Eot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    None,
    Positive,
    Negative,
}

/// Token-embedding matrix with SOT/word/EOT layout and a
/// positive/negative role mask over the word rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub matrix: Tensor,
    pub roles: Vec<Role>,
    pub polarity: Vec<Polarity>,
}

impl PromptEmbedding {
    pub fn word_rows(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter_map(|(i, r)| matches!(r, Role::Word(_)).then_some(i))
            .collect()
    }

    pub fn eot_rows(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter_map(|(i, r)| matches!(r, Role::Eot).then_some(i))
            .collect()
    }
}

/// Embedding matrix for a caption, built from the token table with
/// tracked ops so gradients reach the table during training.
pub fn embed_matrix(table: &Tensor, config: &DenoiserConfig, caption: &[u16]) -> Result<Tensor> {
    if caption.len() > config.prompt_len - 2 {
        return Err(Error::CaptionTooLong(caption.len(), config.prompt_len - 2));
    }
    let row = |id: u16| -> Result<Tensor> {
        if (id as usize) >= config.vocab_size + 2 {
            return Err(Error::UnknownToken(id));
        }
        table.slice(id as usize, id as usize + 1)
    };
    let mut rows = vec![row(config.sot_id())?];
    for id in caption {
        if (*id as usize) >= config.vocab_size {
            return Err(Error::UnknownToken(*id));
        }
        rows.push(row(*id)?);
    }
    for _ in 0..(config.prompt_len - 1 - caption.len()) {
        rows.push(row(config.eot_id())?);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    Tensor::concat(&refs)
}

/// Prompt layout [SOT, words..., EOT padding]; the empty caption is the
/// null-text embedding.
pub fn embed_prompt(params: &DenoiserParams, caption: &[u16]) -> Result<PromptEmbedding> {
    let config = &params.config;
    let matrix = embed_matrix(&params.token_table, config, caption)?;
    let mut roles = vec![Role::Sot];
    roles.extend(caption.iter().map(|id| Role::Word(*id)));
    roles.resize(config.prompt_len, Role::Eot);
    Ok(PromptEmbedding {
        matrix,
        roles,
        polarity: vec![Polarity::None; config.prompt_len],
    })
}

/// Row-stochastic cross-attention maps (latent tokens x prompt rows),
/// one per (block, head), at diffusion step `t`.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub maps: Vec<Tensor>,
    pub t: usize,
}

fn col_slice(m: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    m.transpose()?.slice(start, end)?.transpose()
}

fn add_row_broadcast(m: &Tensor, row: &Tensor) -> Result<Tensor> {
    // ones (rows x 1) @ row (1 x cols), then elementwise add.
    let rows = m.shape()[0];
    let ones = Tensor::new(vec![rows, 1], vec![1.0; rows])?;
    m.add(&ones.matmul(row)?)
}

struct ForwardOut {
    eps: Tensor,
    maps: Vec<Tensor>,
    mid: Tensor,
}

/// One denoiser evaluation. All tensor ops, so the output is
/// differentiable w.r.t. any tracked input (z, cond, or parameters).
fn forward(params: &DenoiserParams, z: &Tensor, t: usize, cond: &Tensor) -> Result<ForwardOut> {
    let config = &params.config;
    if z.shape() != config.latent_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "predict_noise",
            detail: format!("latent {:?}, expected {:?}", z.shape(), config.latent_shape()),
        });
    }
    if cond.shape() != [config.prompt_len, config.embed_dim] {
        return Err(Error::ShapeMismatch {
            op: "predict_noise",
            detail: format!("cond {:?}", cond.shape()),
        });
    }
    if t < 1 || t > config.t_train {
        return Err(Error::StepOutOfRange {
            t,
            max: config.t_train,
        });
    }

    let head_dim = config.hidden / config.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let time_row = params.time_embed.slice(t - 1, t)?;

    let mut x = z.clone();
    let mut maps = Vec::with_capacity(2 * config.heads);
    let mut mid = None;
    for (bi, b) in params.blocks.iter().enumerate() {
        let mut u = add_row_broadcast(&x.matmul(&b.proj_w)?, &b.proj_b)?;
        u = add_row_broadcast(&u, &time_row)?;
        if bi == 0 {
            u = u.add(&params.pos_embed)?;
        }

        let q = u.matmul(&b.wq)?;
        let k = cond.matmul(&b.wk)?;
        let v = cond.matmul(&b.wv)?;
        let mut heads = Vec::with_capacity(config.heads);
        for hi in 0..config.heads {
            let (s, e) = (hi * head_dim, (hi + 1) * head_dim);
            let qh = col_slice(&q, s, e)?;
            let kh = col_slice(&k, s, e)?;
            let vh = col_slice(&v, s, e)?;
            let attn = qh.matmul(&kh.transpose()?)?.scale(scale)?.row_softmax()?;
            heads.push(attn.matmul(&vh)?.transpose()?);
            maps.push(attn);
        }
        let head_refs: Vec<&Tensor> = heads.iter().collect();
        let attn_out = Tensor::concat(&head_refs)?.transpose()?.matmul(&b.wo)?;
        u = u.add(&attn_out)?;

        let f1 = add_row_broadcast(&u.matmul(&b.ff1_w)?, &b.ff1_b)?.relu()?;
        let f2 = add_row_broadcast(&f1.matmul(&b.ff2_w)?, &b.ff2_b)?;
        u = u.add(&f2)?;

        if bi == 0 {
            mid = Some(u.clone());
        }
        x = u;
    }
    let eps = x.matmul(&params.out_proj)?;

    // Mid-block features: token-pooled hidden state after block 0.
    let mid = mid.unwrap();
    let n = mid.shape()[0];
    let pool = Tensor::new(vec![1, n], vec![1.0 / n as f64; n])?;
    let mid = pool.matmul(&mid)?;

    Ok(ForwardOut { eps, maps, mid })
}

/// Predicted noise plus the cross-attention record for this call.
pub fn predict_noise(
    params: &DenoiserParams,
    z: &Tensor,
    t: usize,
    cond: &PromptEmbedding,
) -> Result<(Tensor, AttentionRecord)> {
    predict_noise_matrix(params, z, t, &cond.matrix)
}

/// Same as [`predict_noise`] but conditioning on a raw embedding matrix
/// (tracked matrices keep the attention maps differentiable).
pub fn predict_noise_matrix(
    params: &DenoiserParams,
    z: &Tensor,
    t: usize,
    cond: &Tensor,
) -> Result<(Tensor, AttentionRecord)> {
    let out = forward(params, z, t, cond)?;
    Ok((out.eps, AttentionRecord { maps: out.maps, t }))
}

/// Token-pooled hidden state after the first block; the feature vector
/// used by the toy Frechet distance.
pub fn mid_features(params: &DenoiserParams, z: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
    Ok(forward(params, z, t, cond)?.mid)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub cond_dropout: f64,
    /// Probability of importance-sampling the training timestep from the
    /// mid-noise band (alpha_bar in [0.3, 0.95]) instead of uniformly.
    /// Uniform sampling spends most updates where eps is trivially
    /// recoverable (alpha_bar near 1) or content-free (near 0); the mid
    /// band is where conditioning is learnable. 0 disables the mixture.
    pub mid_t_bias: f64,
    /// Probability of applying per-event gain augmentation to a training
    /// sample: each caption token's embedding row is scaled by a random
    /// gain s in [0, 1.3) and the token's event amplitude in the latent is
    /// shifted by `JITTER_CONTENT_GAIN * (s - 1)` of its full amplitude.
    /// This teaches the denoiser that rescaling a token row means a small
    /// loudness change of that event — the semantics the singular-value
    /// reweighting rule assumes — at a gain weak enough that w = 7.5
    /// guidance amplifies it to roughly a full event, instead of the raw
    /// (untrained, incoherent) sensitivity to row norms. 0 disables it.
    pub event_gain_jitter: f64,
    pub seed: u64,
}

/// Content shift per unit of row-scale jitter, as a fraction of the full
/// event amplitude. Chosen near 1 / w_denoise so that guided editing maps
/// a full row rescale to roughly one full event.
const JITTER_CONTENT_GAIN: f64 = 0.3;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 16,
            cond_dropout: 0.1,
            mid_t_bias: 0.0,
            event_gain_jitter: 0.0,
            seed: 0,
        }
    }
}

/// DDPM eps-prediction training with classifier-free conditioning
/// dropout. SGD with momentum, deterministic batch order from the seed.
/// Returns the per-epoch mean loss curve.
pub fn train(
    params: &mut DenoiserParams,
    dataset: &[(Tensor, Vec<u16>)],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<f64>> = params
        .tensors()
        .iter()
        .map(|t| vec![0.0; t.len()])
        .collect();
    let null_caption: Vec<u16> = Vec::new();
    // Padding embedding stays frozen at zero (token_table is slot 0).
    let eot_span = {
        let d = params.config.embed_dim;
        let start = params.config.eot_id() as usize * d;
        start..start + d
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mid_band: Vec<usize> = (1..=sched.steps())
        .filter(|&t| (0.3..=0.95).contains(&sched.alpha_bar[t]))
        .collect();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let tp = params.tracked(&tape).map_err(nonfinite_at(epoch))?;
            let mut loss: Option<Tensor> = None;
            for &idx in batch {
                let (z0, caption) = &dataset[idx];
                let t = if cfg.mid_t_bias > 0.0 && !mid_band.is_empty() {
                    if rng.gen::<f64>() < cfg.mid_t_bias {
                        mid_band[rng.gen_range(0..mid_band.len())]
                    } else {
                        rng.gen_range(1..=sched.steps())
                    }
                } else {
                    rng.gen_range(1..=sched.steps())
                };
                let eps = randn(&mut rng, z0.shape().to_vec(), 1.0);
                let drop_cond: f64 = rng.gen();
                let cap: &[u16] = if drop_cond < cfg.cond_dropout {
                    &null_caption
                } else {
                    caption
                };
                let jitter: Option<Vec<f64>> = if cfg.event_gain_jitter > 0.0
                    && !cap.is_empty()
                    && rng.gen::<f64>() < cfg.event_gain_jitter
                {
                    Some(cap.iter().map(|_| rng.gen_range(0.0..1.3)).collect())
                } else {
                    None
                };
                let z0 = match &jitter {
                    Some(scales) => {
                        let mut x = z0.clone();
                        for (&tok, &s) in cap.iter().zip(scales) {
                            let pat = crate::synthbench::gen_event_pattern(tok)?;
                            let shift = (s - 1.0)
                                * JITTER_CONTENT_GAIN
                                * crate::synthbench::EVENT_AMPLITUDE;
                            x = x.add(&pat.tokens.scale(shift)?)?;
                        }
                        x
                    }
                    None => z0.clone(),
                };
                let ab = sched.alpha_bar[t];
                let z_t = z0.scale(ab.sqrt())?.add(&eps.scale((1.0 - ab).sqrt())?)?;
                let mut cond = embed_matrix(&tp.token_table, &params.config, cap)
                    .map_err(nonfinite_at(epoch))?;
                if let Some(scales) = &jitter {
                    // Row 0 is SOT; word rows follow in caption order.
                    let (rows, d) = (cond.shape()[0], cond.shape()[1]);
                    let mut m = vec![1.0; rows * d];
                    for (j, &s) in scales.iter().enumerate() {
                        for v in &mut m[(j + 1) * d..(j + 2) * d] {
                            *v = s;
                        }
                    }
                    cond = cond.mul(&Tensor::new(vec![rows, d], m)?)?;
                }
                let out = forward(&tp, &z_t, t, &cond).map_err(nonfinite_at(epoch))?;
                let sample_loss = out
                    .eps
                    .sub(&eps)
                    .and_then(|d| d.squared_frobenius_norm())
                    .and_then(|n| n.scale(1.0 / (eps.len() * batch.len()) as f64))
                    .map_err(nonfinite_at(epoch))?;
                loss = Some(match loss {
                    Some(acc) => acc.add(&sample_loss).map_err(nonfinite_at(epoch))?,
                    None => sample_loss,
                });
            }
            let loss = loss.unwrap();
            let loss_val = loss.value()?;
            if !loss_val.is_finite() {
                return Err(Error::TrainingDiverged(epoch));
            }
            epoch_loss += loss_val;
            batches += 1;

            let grads = loss.backward().map_err(nonfinite_at(epoch))?;
            let tracked = tp.tensors();
            let mut own = params.tensors_mut();
            for (slot, (tracked_t, vel)) in tracked.iter().zip(velocity.iter_mut()).enumerate() {
                let g = grads.wrt(tracked_t)?;
                let p = own[slot].data().to_vec();
                let mut new_data = p;
                for (i, ((pv, vv), gv)) in
                    new_data.iter_mut().zip(vel.iter_mut()).zip(g.data()).enumerate()
                {
                    if slot == 0 && eot_span.contains(&i) {
                        continue;
                    }
                    *vv = cfg.momentum * *vv + gv;
                    *pv -= cfg.lr * *vv;
                }
                *own[slot] = Tensor::new(own[slot].shape().to_vec(), new_data)
                    .map_err(nonfinite_at(epoch))?;
            }
        }
        curve.push(epoch_loss / batches as f64);
    }
    Ok(curve)
}

fn nonfinite_at(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::TrainingDiverged(epoch),
        other => other,
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"AEDN";

pub fn save_checkpoint(path: &Path, params: &DenoiserParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let cfg = serde_json::to_vec(&params.config)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    for t in params.tensors() {
        write_tensor(&mut w, t)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected AEDN".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let len = u32::from_le_bytes(b4) as usize;
    let mut cfg_bytes = vec![0u8; len];
    r.read_exact(&mut cfg_bytes)?;
    let config: DenoiserConfig = serde_json::from_slice(&cfg_bytes)?;
    let mut params = DenoiserParams::init(config);
    let mut loaded = Vec::new();
    for _ in 0..params.tensors().len() {
        loaded.push(read_tensor(&mut r)?);
    }
    for (slot, t) in params.tensors_mut().into_iter().zip(loaded) {
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor shape {:?} does not match config ({:?})",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(params)
}

pub fn write_loss_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,loss")?;
    for (i, l) in curve.iter().enumerate() {
        writeln!(w, "{},{}", i, l)?;
    }
    Ok(())
}
