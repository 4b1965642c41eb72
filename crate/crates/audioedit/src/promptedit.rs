//! Positive/negative token classification, EOT-suppression through
//! singular-value regularization, attention-map splitting, the attention
//! loss, and the per-step prompt embedding update.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Polarity, PromptEmbedding, Role};
use crate::tensor::{svd, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditMode {
    Delete,
    Add,
    Replace,
    ReconstructOnly,
}

/// A target caption plus which of its word positions are being edited.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditSpec {
    pub mode: EditMode,
    pub target_caption: Vec<u16>,
    /// Indices into the word rows of the target caption (0 = first word).
    #[serde(default)]
    pub negative_positions: Vec<usize>,
    #[serde(default)]
    pub overrides: EditOverrides,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EditOverrides {
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub lambda_pos: Option<f64>,
    pub lambda_neg: Option<f64>,
    pub embed_lr: Option<f64>,
}

impl EditSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mode != EditMode::ReconstructOnly && self.negative_positions.is_empty() {
            return Err(Error::Config(
                "negative_positions must be nonempty unless mode is reconstruct-only".into(),
            ));
        }
        for &p in &self.negative_positions {
            if p >= self.target_caption.len() {
                return Err(Error::IndexOutOfRange(format!(
                    "negative position {} in a {}-word caption",
                    p,
                    self.target_caption.len()
                )));
            }
        }
        Ok(())
    }

    pub fn reconstruct_only(caption: Vec<u16>) -> EditSpec {
        EditSpec {
            mode: EditMode::ReconstructOnly,
            target_caption: caption,
            negative_positions: Vec::new(),
            overrides: EditOverrides::default(),
        }
    }
}

/// Constants for the sigma reweighting rule sigma_hat = beta * e^(alpha
/// sigma) * sigma. `flipped` switches the exponent to e^(-alpha sigma),
/// the damping variant kept for the ablation harness.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SuppressionConfig {
    pub beta: f64,
    pub alpha: f64,
    #[serde(default)]
    pub flipped: bool,
}

impl SuppressionConfig {
    pub fn for_mode(mode: EditMode) -> SuppressionConfig {
        match mode {
            EditMode::Delete => SuppressionConfig {
                beta: 1.0,
                alpha: 1.0,
                flipped: false,
            },
            _ => SuppressionConfig {
                beta: 1.2,
                alpha: 0.001,
                flipped: false,
            },
        }
    }

    pub fn identity() -> SuppressionConfig {
        SuppressionConfig {
            beta: 1.0,
            alpha: 0.0,
            flipped: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AttnLossConfig {
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub embed_lr: f64,
}

impl Default for AttnLossConfig {
    fn default() -> Self {
        AttnLossConfig {
            lambda_pos: 1.0,
            lambda_neg: 0.5,
            embed_lr: 0.01,
        }
    }
}

/// Tag the word rows: edited positions negative, the rest positive.
/// SOT and EOT rows stay untagged.
pub fn classify_tokens(p: &PromptEmbedding, spec: &EditSpec) -> Result<PromptEmbedding> {
    spec.validate()?;
    let word_rows = p.word_rows();
    for &pos in &spec.negative_positions {
        if pos >= word_rows.len() {
            return Err(Error::IndexOutOfRange(format!(
                "negative position {} but prompt has {} word rows",
                pos,
                word_rows.len()
            )));
        }
    }
    let mut polarity = vec![Polarity::None; p.roles.len()];
    for (i, &row) in word_rows.iter().enumerate() {
        polarity[row] = if spec.negative_positions.contains(&i) {
            Polarity::Negative
        } else {
            Polarity::Positive
        };
    }
    Ok(PromptEmbedding {
        matrix: p.matrix.clone(),
        roles: p.roles.clone(),
        polarity,
    })
}

/// Stack the negative word rows (caption order) on top of the EOT rows
/// (position order). Returns the matrix and the source row of each row.
pub fn build_suppression_matrix(p: &PromptEmbedding) -> Result<(Tensor, Vec<usize>)> {
    let mut provenance: Vec<usize> = p
        .polarity
        .iter()
        .enumerate()
        .filter_map(|(i, pol)| (*pol == Polarity::Negative).then_some(i))
        .collect();
    provenance.extend(p.eot_rows());
    let rows: Vec<Tensor> = provenance
        .iter()
        .map(|&i| p.matrix.slice(i, i + 1))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = rows.iter().collect();
    Ok((Tensor::concat(&refs)?, provenance))
}

/// sigma_hat_i = beta * e^(alpha * sigma_i) * sigma_i.
pub fn regularize_singular_values(sigma: &[f64], cfg: &SuppressionConfig) -> Vec<f64> {
    let sign = if cfg.flipped { -1.0 } else { 1.0 };
    sigma
        .iter()
        .map(|s| cfg.beta * (sign * cfg.alpha * s).exp() * s)
        .collect()
}

/// Classify, extract negative+EOT rows, reweight their singular values,
/// and splice the reconstruction back. Positive rows are bit-identical
/// to the input.
pub fn eot_suppress(
    p: &PromptEmbedding,
    spec: &EditSpec,
    cfg: &SuppressionConfig,
) -> Result<PromptEmbedding> {
    let classified = classify_tokens(p, spec)?;
    let (x, provenance) = build_suppression_matrix(&classified)?;
    let (u, sigma, v) = svd(&x)?;
    let sigma_hat = regularize_singular_values(&sigma, cfg);

    let k = sigma_hat.len();
    let rows = u.shape()[0];
    let mut scaled = u.data().to_vec();
    for i in 0..rows {
        for j in 0..k {
            scaled[i * k + j] *= sigma_hat[j];
        }
    }
    let x_hat = Tensor::new(vec![rows, k], scaled)?.matmul(&v.transpose()?)?;

    let cols = classified.matrix.shape()[1];
    let mut data = classified.matrix.data().to_vec();
    for (xi, &row) in provenance.iter().enumerate() {
        data[row * cols..(row + 1) * cols]
            .copy_from_slice(&x_hat.data()[xi * cols..(xi + 1) * cols]);
    }
    Ok(PromptEmbedding {
        matrix: Tensor::new(classified.matrix.shape().to_vec(), data)?,
        roles: classified.roles,
        polarity: classified.polarity,
    })
}

/// Mean of the per-(block, head) attention maps; stays on the tape when
/// the maps are tracked.
pub fn average_maps(maps: &[Tensor]) -> Result<Tensor> {
    let mut acc = maps[0].clone();
    for m in &maps[1..] {
        acc = acc.add(m)?;
    }
    acc.scale(1.0 / maps.len() as f64)
}

/// Column groups of an averaged map, keyed by the polarity mask.
/// Word columns only; groups come back transposed (group rows x latent
/// tokens), which is irrelevant to the Frobenius losses downstream.
pub fn split_attention(
    avg_map: &Tensor,
    polarity: &[Polarity],
) -> Result<(Tensor, Option<Tensor>)> {
    if avg_map.shape().len() != 2 || avg_map.shape()[1] != polarity.len() {
        return Err(Error::ShapeMismatch {
            op: "split_attention",
            detail: format!("map {:?} vs mask of {}", avg_map.shape(), polarity.len()),
        });
    }
    let t = avg_map.transpose()?;
    let select = |want: Polarity| -> Result<Option<Tensor>> {
        let rows: Vec<Tensor> = polarity
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == want)
            .map(|(i, _)| t.slice(i, i + 1))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok(Some(Tensor::concat(&refs)?))
    };
    // A fully negative caption is legal; the positive group is then empty
    // and contributes zero loss.
    let pos = select(Polarity::Positive)?.unwrap_or_else(|| Tensor::zeros(vec![0]));
    Ok((pos, select(Polarity::Negative)?))
}

/// lambda_pos * |d_pos|^2_F - lambda_neg * |d_neg|^2_F. Tracked when the
/// hat-side maps are tracked.
pub fn attention_loss(
    a_hat_pos: &Tensor,
    a_pos: &Tensor,
    a_hat_neg: Option<&Tensor>,
    a_neg: Option<&Tensor>,
    cfg: &AttnLossConfig,
) -> Result<Tensor> {
    let mut loss = if a_hat_pos.is_empty() {
        Tensor::scalar(0.0)
    } else {
        a_hat_pos
            .sub(a_pos)?
            .squared_frobenius_norm()?
            .scale(cfg.lambda_pos)?
    };
    match (a_hat_neg, a_neg) {
        (Some(hn), Some(n)) => {
            let neg_term = hn.sub(n)?.squared_frobenius_norm()?.scale(cfg.lambda_neg)?;
            loss = loss.sub(&neg_term)?;
        }
        (None, None) => {}
        _ => {
            return Err(Error::ShapeMismatch {
                op: "attention_loss",
                detail: "negative groups present on only one side".into(),
            })
        }
    }
    Ok(loss)
}

/// Gradient step on the word and EOT rows; the SOT row is frozen.
pub fn update_prompt_embedding(
    p_hat: &PromptEmbedding,
    grad: &Tensor,
    embed_lr: f64,
) -> Result<PromptEmbedding> {
    if grad.shape() != p_hat.matrix.shape() {
        return Err(Error::ShapeMismatch {
            op: "update_prompt_embedding",
            detail: format!("{:?} vs {:?}", grad.shape(), p_hat.matrix.shape()),
        });
    }
    let cols = p_hat.matrix.shape()[1];
    let mut data = p_hat.matrix.data().to_vec();
    for (i, role) in p_hat.roles.iter().enumerate() {
        if *role == Role::Sot {
            continue;
        }
        for j in 0..cols {
            data[i * cols + j] -= embed_lr * grad.data()[i * cols + j];
        }
    }
    Ok(PromptEmbedding {
        matrix: Tensor::new(p_hat.matrix.shape().to_vec(), data)?,
        roles: p_hat.roles.clone(),
        polarity: p_hat.polarity.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{embed_prompt, DenoiserConfig, DenoiserParams};
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prompt(caption: &[u16]) -> PromptEmbedding {
        let params = DenoiserParams::init(DenoiserConfig::default());
        embed_prompt(&params, caption).unwrap()
    }

    fn delete_spec(caption: Vec<u16>, neg: Vec<usize>) -> EditSpec {
        EditSpec {
            mode: EditMode::Delete,
            target_caption: caption,
            negative_positions: neg,
            overrides: EditOverrides::default(),
        }
    }

    #[test]
    fn classify_sets_expected_mask() {
        let p = prompt(&[4, 9]);
        let spec = delete_spec(vec![4, 9], vec![1]);
        let c = classify_tokens(&p, &spec).unwrap();
        assert_eq!(c.polarity[0], Polarity::None);
        assert_eq!(c.polarity[1], Polarity::Positive);
        assert_eq!(c.polarity[2], Polarity::Negative);
        assert!(c.polarity[3..].iter().all(|p| *p == Polarity::None));
    }

    #[test]
    fn classify_allows_all_negative() {
        let p = prompt(&[4, 9]);
        let spec = delete_spec(vec![4, 9], vec![0, 1]);
        let c = classify_tokens(&p, &spec).unwrap();
        assert_eq!(c.polarity[1], Polarity::Negative);
        assert_eq!(c.polarity[2], Polarity::Negative);
    }

    #[test]
    fn spec_validation_errors() {
        assert!(delete_spec(vec![4], vec![]).validate().is_err());
        assert!(delete_spec(vec![4], vec![1]).validate().is_err());
        assert!(EditSpec::reconstruct_only(vec![4]).validate().is_ok());
    }

    #[test]
    fn suppression_matrix_rows_and_provenance() {
        let p = prompt(&[4, 9]);
        let c = classify_tokens(&p, &delete_spec(vec![4, 9], vec![1])).unwrap();
        let (x, prov) = build_suppression_matrix(&c).unwrap();
        // 1 negative word row + 5 EOT rows
        assert_eq!(x.shape(), [6, 32]);
        assert_eq!(prov, vec![2, 3, 4, 5, 6, 7]);
        for (xi, &row) in prov.iter().enumerate() {
            assert_eq!(
                &x.data()[xi * 32..(xi + 1) * 32],
                &c.matrix.data()[row * 32..(row + 1) * 32]
            );
        }
    }

    #[test]
    fn sigma_rule_matches_paper_constants() {
        let del = SuppressionConfig::for_mode(EditMode::Delete);
        let add = SuppressionConfig::for_mode(EditMode::Add);
        assert_eq!((del.beta, del.alpha), (1.0, 1.0));
        assert_eq!((add.beta, add.alpha), (1.2, 0.001));

        let out = regularize_singular_values(&[2.0], &del);
        assert!((out[0] - 2.0 * (2.0f64).exp()).abs() < 1e-12);
        assert!((out[0] - 14.778112).abs() < 1e-6);

        let out = regularize_singular_values(&[2.0], &add);
        assert!((out[0] - 1.2 * (0.002f64).exp() * 2.0).abs() < 1e-12);
        assert!((out[0] - 2.4048048).abs() < 1e-7);

        assert_eq!(regularize_singular_values(&[0.0], &del), vec![0.0]);
    }

    #[test]
    fn sigma_rule_is_monotone() {
        // The as-printed rule is monotone for alpha >= 0; the flipped
        // damping variant intentionally is not (sigma * e^(-sigma) peaks
        // at sigma = 1), so it is excluded here.
        for cfg in [
            SuppressionConfig::for_mode(EditMode::Delete),
            SuppressionConfig::for_mode(EditMode::Add),
        ] {
            let sig = vec![5.0, 3.0, 1.0, 0.5, 0.0];
            let out = regularize_singular_values(&sig, &cfg);
            for w in out.windows(2) {
                assert!(w[0] >= w[1], "not monotone under {:?}", cfg);
            }
        }
    }

    #[test]
    fn identity_config_round_trips_suppression() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let caption: Vec<u16> = (0..3).map(|_| rng.gen_range(0..16)).collect();
            let p = prompt(&caption);
            let spec = delete_spec(caption, vec![1]);
            let out = eot_suppress(&p, &spec, &SuppressionConfig::identity()).unwrap();
            for (a, b) in out.matrix.data().iter().zip(p.matrix.data()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn suppression_touches_only_negative_and_eot_rows() {
        let p = prompt(&[4, 9, 2]);
        let spec = delete_spec(vec![4, 9, 2], vec![2]);
        let out = eot_suppress(&p, &spec, &SuppressionConfig::for_mode(EditMode::Delete)).unwrap();
        // SOT and the positive word rows (1, 2) bit-identical
        for row in [0usize, 1, 2] {
            assert_eq!(
                &out.matrix.data()[row * 32..(row + 1) * 32],
                &p.matrix.data()[row * 32..(row + 1) * 32]
            );
        }
        // the negative row changed norm
        let norm = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let before = norm(&p.matrix.data()[3 * 32..4 * 32]);
        let after = norm(&out.matrix.data()[3 * 32..4 * 32]);
        assert!((before - after).abs() > 1e-6);
    }

    #[test]
    fn split_attention_partitions_word_columns() {
        // 3 latent rows x 8 prompt columns, constant columns for clarity
        let mut data = vec![0.0; 3 * 8];
        for r in 0..3 {
            for c in 0..8 {
                data[r * 8 + c] = c as f64;
            }
        }
        let map = Tensor::new(vec![3, 8], data).unwrap();
        let mut polarity = vec![Polarity::None; 8];
        polarity[1] = Polarity::Positive;
        polarity[2] = Polarity::Negative;
        polarity[3] = Polarity::Positive;
        let (pos, neg) = split_attention(&map, &polarity).unwrap();
        assert_eq!(pos.shape(), [2, 3]);
        assert_eq!(pos.data(), [1.0, 1.0, 1.0, 3.0, 3.0, 3.0]);
        let neg = neg.unwrap();
        assert_eq!(neg.shape(), [1, 3]);
        assert_eq!(neg.data(), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn split_attention_handles_empty_groups() {
        let map = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        let polarity = vec![Polarity::Positive, Polarity::Positive];
        let (pos, neg) = split_attention(&map, &polarity).unwrap();
        assert_eq!(pos.shape(), [2, 2]);
        assert!(neg.is_none());
    }

    #[test]
    fn average_maps_matches_manual_mean() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 2.0, 1.0, 0.0]).unwrap();
        let avg = average_maps(&[a, b]).unwrap();
        assert_eq!(avg.data(), [2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn attention_loss_worked_example() {
        // |dpos|^2 = 0.04, |dneg|^2 = 0.1, lambda = (1.0, 0.5) -> -0.01
        let hat_pos = Tensor::new(vec![1, 1], vec![0.2]).unwrap();
        let pos = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let hat_neg = Tensor::new(vec![2, 1], vec![0.1, 0.3]).unwrap();
        let neg = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        let cfg = AttnLossConfig::default();
        let loss = attention_loss(&hat_pos, &pos, Some(&hat_neg), Some(&neg), &cfg).unwrap();
        assert!((loss.value().unwrap() + 0.01).abs() < 1e-12);
    }

    #[test]
    fn attention_loss_zero_when_identical() {
        let m = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let loss =
            attention_loss(&m, &m, Some(&m), Some(&m), &AttnLossConfig::default()).unwrap();
        assert_eq!(loss.value().unwrap(), 0.0);
    }

    #[test]
    fn attention_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rand_mat = |rng: &mut ChaCha8Rng| {
            Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let hat_pos = rand_mat(&mut rng);
        let pos = rand_mat(&mut rng);
        let hat_neg = rand_mat(&mut rng);
        let neg = rand_mat(&mut rng);
        let cfg = AttnLossConfig::default();

        let tape = Tape::new();
        let hp = tape.leaf(&hat_pos).unwrap();
        let hn = tape.leaf(&hat_neg).unwrap();
        let loss = attention_loss(&hp, &pos, Some(&hn), Some(&neg), &cfg).unwrap();
        let grads = loss.backward().unwrap();
        let gp = grads.wrt(&hp).unwrap();
        let gn = grads.wrt(&hn).unwrap();

        let f = |hp: &Tensor, hn: &Tensor| {
            attention_loss(hp, &pos, Some(hn), Some(&neg), &cfg)
                .unwrap()
                .value()
                .unwrap()
        };
        let h = 1e-5;
        for idx in 0..6 {
            for (mat, grad, other, swap) in
                [(&hat_pos, &gp, &hat_neg, false), (&hat_neg, &gn, &hat_pos, true)]
            {
                let mut lo = mat.data().to_vec();
                let mut hi = lo.clone();
                lo[idx] -= h;
                hi[idx] += h;
                let lo = Tensor::new(vec![2, 3], lo).unwrap();
                let hi = Tensor::new(vec![2, 3], hi).unwrap();
                let (flo, fhi) = if swap {
                    (f(other, &lo), f(other, &hi))
                } else {
                    (f(&lo, other), f(&hi, other))
                };
                let fd = (fhi - flo) / (2.0 * h);
                let an = grad.data()[idx];
                assert!((an - fd).abs() / fd.abs().max(1e-3) <= 1e-5);
            }
        }
    }

    #[test]
    fn attention_loss_rejects_one_sided_negatives() {
        let m = Tensor::new(vec![1, 1], vec![0.1]).unwrap();
        assert!(attention_loss(&m, &m, Some(&m), None, &AttnLossConfig::default()).is_err());
    }

    #[test]
    fn update_freezes_sot_row() {
        let p = prompt(&[4, 9]);
        let grad = Tensor::new(vec![8, 32], vec![1.0; 8 * 32]).unwrap();
        let out = update_prompt_embedding(&p, &grad, 0.01).unwrap();
        assert_eq!(&out.matrix.data()[..32], &p.matrix.data()[..32]);
        for i in 32..8 * 32 {
            assert!((out.matrix.data()[i] - (p.matrix.data()[i] - 0.01)).abs() < 1e-15);
        }
    }

    #[test]
    fn update_with_zero_grad_is_identity() {
        let p = prompt(&[4]);
        let out = update_prompt_embedding(&p, &Tensor::zeros(vec![8, 32]), 0.01).unwrap();
        assert_eq!(out.matrix, p.matrix);
    }

    #[test]
    fn flipped_variant_damps_large_sigmas() {
        let flipped = SuppressionConfig {
            beta: 1.0,
            alpha: 1.0,
            flipped: true,
        };
        let out = regularize_singular_values(&[2.0], &flipped);
        assert!((out[0] - 2.0 * (-2.0f64).exp()).abs() < 1e-12);
        assert!(out[0] < 2.0);
    }
}
