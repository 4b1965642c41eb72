//! Temporary diagnostic: caption sensitivity of the trained denoiser.

use audioedit::denoiser::{embed_prompt, load_checkpoint, predict_noise_matrix};
use audioedit::diffusion::NoiseSchedule;
use audioedit::synthbench::{gen_event_pattern, image_to_tokens, EVENT_AMPLITUDE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> audioedit::Result<()> {
    let path = std::env::args().nth(1).expect("checkpoint path");
    let params = load_checkpoint(std::path::Path::new(&path))?;
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // latent with events {2, 7}; probe removing token 7 from the caption
    let pa = gen_event_pattern(2)?;
    let pb = gen_event_pattern(7)?;
    let z0 = pa
        .tokens
        .add(&pb.tokens)?
        .scale(EVENT_AMPLITUDE)?;
    let pat_b = pb.tokens.clone();

    let full = embed_prompt(&params, &[2, 7])?;
    let only_a = embed_prompt(&params, &[2])?;

    println!("t      ab        |dEps|   cos(dEps, pat_b)   ideal|dEps|");
    for &t in &[100usize, 300, 500, 700, 800, 900, 980] {
        let ab = sched.alpha_bar[t];
        let noise: Vec<f64> = (0..z0.len())
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                v
            })
            .collect();
        let zt_data: Vec<f64> = z0
            .data()
            .iter()
            .zip(&noise)
            .map(|(z, e)| ab.sqrt() * z + (1.0 - ab).sqrt() * e)
            .collect();
        let zt = audioedit::tensor::Tensor::new(z0.shape().to_vec(), zt_data)?;
        let (eps_full, _) = predict_noise_matrix(&params, &zt, t, &full.matrix)?;
        let (eps_a, _) = predict_noise_matrix(&params, &zt, t, &only_a.matrix)?;
        let d = eps_a.sub(&eps_full)?;
        let dn = d.squared_frobenius_norm()?.value()?.sqrt();
        let dot: f64 = d
            .data()
            .iter()
            .zip(pat_b.data())
            .map(|(x, y)| x * y)
            .sum();
        let cos = dot / (dn * 1.0).max(1e-12);
        let ideal = (ab.sqrt() / (1.0 - ab).sqrt()) * EVENT_AMPLITUDE;
        println!(
            "{:4}  {:8.5}  {:8.4}  {:8.4}          {:8.4}",
            t, ab, dn, cos, ideal
        );
    }

    let d = params.config.embed_dim;
    println!("token row norms:");
    for row in 0..(params.config.vocab_size as usize + 2) {
        let norm: f64 = params.token_table.data()[row * d..(row + 1) * d]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        println!("  row {:2}: {:.4}", row, norm);
    }
    Ok(())
}
