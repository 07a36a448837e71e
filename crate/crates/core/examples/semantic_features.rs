//! Semantic features of the test clouds: how far apart different clouds
//! land compared with two masked views of the same cloud.
//!
//! `cargo run --release --example semantic_features -- [output_dir]`
//!
//! Uses the trained encoder of the run directory when present, otherwise
//! a freshly initialized one on newly generated clouds.

use std::path::PathBuf;

use pcsc::config::RunConfig;
use pcsc::dataio::gen_dataset;
use pcsc::experiment::{load_encoder, load_split, new_encoder, RunDir};
use pcsc::nn::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sq(a: &Mat, b: &Mat) -> f64 {
    (a - b).mapv(|v| v * v).sum()
}

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
    let trained = RunDir::new(&cfg).checkpoint("encoder");
    let (encoder, test) = if trained.exists() {
        println!("trained encoder from {}", trained.display());
        (load_encoder(&cfg, &trained)?, load_split(&cfg, "test")?)
    } else {
        println!("untrained encoder");
        (new_encoder(&cfg)?, gen_dataset(&cfg.data, 0)?.test)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut views = Vec::new();
    for s in &test {
        let a = encoder.extract(&s.cloud, &s.keypoints, &mut rng, false)?;
        let b = encoder.extract(&s.cloud, &s.keypoints, &mut rng, false)?;
        views.push((s.cloud.class_label.clone(), a, b));
    }
    let within = views.iter().map(|(_, a, b)| sq(a, b)).sum::<f64>() / views.len() as f64;
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for (i, (ci, fi, _)) in views.iter().enumerate() {
        for (cj, fj, _) in &views[i + 1..] {
            if ci == cj {
                same += sq(fi, fj);
                ns += 1;
            } else {
                cross += sq(fi, fj);
                nc += 1;
            }
        }
    }
    println!("feature width {}", encoder.config().d);
    println!("squared distance, two masks of one cloud: {within:.4}");
    println!("squared distance, same class:             {:.4}", same / ns.max(1) as f64);
    println!("squared distance, different class:        {:.4}", cross / nc.max(1) as f64);
    Ok(())
}
