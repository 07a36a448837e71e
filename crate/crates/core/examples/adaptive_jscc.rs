//! The adaptive codec: symbol count per rate, and how well the feature
//! survives AWGN and Rayleigh channels at each SNR.
//!
//! `cargo run --release --example adaptive_jscc -- [output_dir]`
//!
//! Uses the trained codec and encoder of the run directory when present.

use std::path::PathBuf;

use pcsc::channel::{transmit, ChannelKind};
use pcsc::config::RunConfig;
use pcsc::dataio::gen_dataset;
use pcsc::experiment::{load_codec, load_encoder, load_split, new_encoder, RunDir};
use pcsc::jscc::JsccCodec;
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
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (encoder, codec, test) = if dir.checkpoint("codec").exists() {
        println!("trained codec from {}", dir.root.display());
        (load_encoder(&cfg, &dir.checkpoint("encoder"))?, load_codec(&cfg, &dir.checkpoint("codec"))?, load_split(&cfg, "test")?)
    } else {
        println!("untrained codec");
        (new_encoder(&cfg)?, JsccCodec::new(&cfg.jscc, &mut rng)?, gen_dataset(&cfg.data, 0)?.test)
    };

    let mut features = Vec::new();
    for s in &test {
        features.push(encoder.extract(&s.cloud, &s.keypoints, &mut rng, false)?);
    }
    let power = features.iter().map(|f| f.mapv(|v| v * v).mean().unwrap_or(0.0)).sum::<f64>() / features.len() as f64;

    let rates = &cfg.jscc.rates;
    print!("{:>9} {:>6}", "channel", "snr");
    for r in rates {
        print!(" {:>8}", format!("r={r}"));
    }
    println!("   (feature nmse)");
    for kind in [ChannelKind::Awgn, ChannelKind::Rayleigh] {
        for snr in [-10.0, 0.0, 10.0, 20.0] {
            print!("{kind:>9} {snr:>6.1}");
            for &rate in rates {
                let mut err = 0.0;
                for f in &features {
                    let sent = codec.encode(f, snr, rate)?;
                    assert_eq!(sent.len(), rate);
                    let got = codec.decode(&transmit(kind, &sent, snr, &mut rng)?)?;
                    err += (&got - f).mapv(|v| v * v).mean().unwrap_or(0.0);
                }
                print!(" {:>8.4}", err / features.len() as f64 / power);
            }
            println!();
        }
    }
    Ok(())
}
