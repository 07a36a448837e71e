//! DDPM and DDIM on a target whose optimal noise predictor is known in
//! closed form: x0 ~ N(mu, s^2 I) gives eps*(x_t) = sqrt(1-ab)(x_t - sqrt(ab) mu) / (ab s^2 + 1 - ab).

use pcsc::diffusion::{ddim_sample, ddpm_sample, make_subsequence, DdpmVariance, DiffusionSchedule, SigmaMode};
use pcsc::nn::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn moments(x: &Mat) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    (mean, (x.mapv(|v| (v - mean).powi(2)).sum() / n).sqrt())
}

fn main() -> pcsc::Result<()> {
    let (mu, s) = (0.5, 0.2);
    let schedule = DiffusionSchedule::linear(200, 1e-4, 0.1)?;
    let oracle = |x: &Mat, t: usize| {
        let ab = schedule.alpha_bar(t);
        x.mapv(|v| (1.0 - ab).sqrt() * (v - ab.sqrt() * mu) / (ab * s * s + 1.0 - ab))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = ddpm_sample(&oracle, &schedule, 4000, DdpmVariance::Beta, &mut rng)?;
    let (m, sd) = moments(&x);
    println!("target       mean {mu:.3} sd {s:.3}");
    println!("ddpm (200)   mean {m:.3} sd {sd:.3}");
    for steps in [50, 8, 2] {
        let taus = make_subsequence(200, steps)?;
        let x = ddim_sample(&oracle, &schedule, &taus, SigmaMode::Deterministic, None, 4000, &mut rng)?;
        let (m, sd) = moments(&x);
        println!("ddim ({steps:>3})   mean {m:.3} sd {sd:.3}");
    }
    Ok(())
}
