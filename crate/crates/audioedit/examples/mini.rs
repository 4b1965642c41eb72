//! Temporary diagnostic: eps sensitivity to a 1.2x row rescale and to
//! eot_suppress output, on an add-mode prompt.

use audioedit::denoiser::{embed_prompt, load_checkpoint, predict_noise_matrix};
use audioedit::diffusion::NoiseSchedule;
use audioedit::promptedit::{eot_suppress, EditMode, EditSpec, SuppressionConfig};
use audioedit::synthbench::{gen_event_pattern, EVENT_AMPLITUDE};
use audioedit::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> audioedit::Result<()> {
    let path = std::env::args().nth(1).expect("checkpoint path");
    let params = load_checkpoint(std::path::Path::new(&path))?;
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // original content: event 2 only; add-edit target caption [2, 7]
    let pa = gen_event_pattern(2)?;
    let pb = gen_event_pattern(7)?;
    let z0 = pa.tokens.scale(EVENT_AMPLITUDE)?;
    let pat_b = pb.tokens.clone();

    let target = embed_prompt(&params, &[2, 7])?;
    let spec = EditSpec {
        mode: EditMode::Add,
        target_caption: vec![2, 7],
        negative_positions: vec![1],
        overrides: Default::default(),
    };
    let mut cfg = SuppressionConfig::for_mode(EditMode::Add);
    cfg.flipped = true;
    let p_hat = eot_suppress(&target, &spec, &cfg)?;

    // row-by-row diff of the suppressed prompt
    let d = params.config.embed_dim;
    println!("row |P| -> |P_hat| (L2 of diff):");
    for r in 0..target.matrix.shape()[0] {
        let a = &target.matrix.data()[r * d..(r + 1) * d];
        let b = &p_hat.matrix.data()[r * d..(r + 1) * d];
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nd: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        println!("  row {}: {:.4} -> {:.4}  |diff| {:.4}", r, na, nb, nd);
    }

    // manual 1.2x rescale of row 2 (word b at prompt position 2: SOT, a, b)
    let mut scaled = target.matrix.data().to_vec();
    for v in &mut scaled[2 * d..3 * d] {
        *v *= 1.2;
    }
    let scaled = Tensor::new(target.matrix.shape().to_vec(), scaled)?;

    println!("\nt     |dEps(sup)|  cos_b   |dEps(1.2x)|  cos_b   ideal");
    for &t in &[100usize, 200, 300, 500] {
        let ab = sched.alpha_bar[t];
        let noise: Vec<f64> = (0..z0.len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let zt_data: Vec<f64> = z0
            .data()
            .iter()
            .zip(&noise)
            .map(|(z, e)| ab.sqrt() * z + (1.0 - ab).sqrt() * e)
            .collect();
        let zt = Tensor::new(z0.shape().to_vec(), zt_data)?;
        let (eps_t, _) = predict_noise_matrix(&params, &zt, t, &target.matrix)?;
        let (eps_s, _) = predict_noise_matrix(&params, &zt, t, &p_hat.matrix)?;
        let (eps_m, _) = predict_noise_matrix(&params, &zt, t, &scaled)?;
        let stat = |e: &Tensor| -> (f64, f64) {
            let dv = e.sub(&eps_t).unwrap();
            let n = dv.squared_frobenius_norm().unwrap().value().unwrap().sqrt();
            let dot: f64 = dv
                .data()
                .iter()
                .zip(pat_b.data())
                .map(|(x, y)| x * y)
                .sum();
            (n, dot / n.max(1e-12))
        };
        let (ns, cs) = stat(&eps_s);
        let (nm, cm) = stat(&eps_m);
        let ideal = (ab.sqrt() / (1.0 - ab).sqrt()) * EVENT_AMPLITUDE;
        println!(
            "{:4}  {:10.4}  {:6.3}  {:11.4}  {:6.3}  {:7.2}",
            t, ns, cs, nm, cm, ideal
        );
    }
    Ok(())
}
