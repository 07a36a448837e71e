//! Few-step sampling with the original and the rectified backbone of a
//! trained run, against the full ancestral sampler.
//!
//! `cargo run --release --example rectified_sampling -- [output_dir]`
//!
//! Expects a run directory produced by the `train_pipeline` example (the
//! default) or by the `pcsc` stages through `rectify`.

use std::path::PathBuf;
use std::time::Instant;

use pcsc::config::{RunConfig, Sampler};
use pcsc::experiment::{load_backbone, load_encoder, load_split, RunDir};
use pcsc::metrics::chamfer;
use pcsc::system::generate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The resolved config of the run directory given as the first argument,
/// or the micro config.
fn run_config() -> pcsc::Result<RunConfig> {
    let micro = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/micro.toml");
    let Some(dir) = std::env::args().nth(1).map(PathBuf::from) else {
        return RunConfig::load(&micro);
    };
    let resolved = dir.join("config.resolved.toml");
    let mut cfg = RunConfig::load(if resolved.exists() { &resolved } else { &micro })?;
    cfg.output_dir = dir;
    Ok(cfg)
}

fn main() -> pcsc::Result<()> {
    let cfg = run_config()?;
    let dir = RunDir::new(&cfg);
    let encoder = load_encoder(&cfg, &dir.checkpoint("encoder"))?;
    let original = load_backbone(&cfg, &dir.checkpoint("backbone"))?;
    let rectified = load_backbone(&cfg, &dir.checkpoint("backbone-rd"))?;
    let schedule = cfg.diffusion.schedule()?;
    let test = load_split(&cfg, "test")?;

    println!("{:<10} {:<10} {:>10} {:>10}", "backbone", "sampler", "chamfer", "ms/cloud");
    for (name, bb) in [("original", &original), ("rectified", &rectified)] {
        for sampler in [Sampler::Ddpm, Sampler::Ddim(8), Sampler::Ddim(4), Sampler::Ddim(2)] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let start = Instant::now();
            let mut cd = 0.0;
            for s in &test {
                let f = encoder.extract(&s.cloud, &s.keypoints, &mut rng, false)?;
                let x = generate(bb, &schedule, &f, s.cloud.len(), sampler, &mut rng)?;
                cd += chamfer(&s.cloud, &x)?;
            }
            let ms = start.elapsed().as_secs_f64() * 1e3 / test.len() as f64;
            println!("{name:<10} {:<10} {:>10.4} {ms:>10.2}", sampler.to_string(), cd / test.len() as f64);
        }
    }
    Ok(())
}
