//! Runs every training stage on the small config in `configs/micro.toml`,
//! then a short sweep and the octree baseline.
//!
//! `cargo run --release --example train_pipeline -- [output_dir]`
//!
//! The same stages are available one at a time from the `pcsc` binary.

use std::path::PathBuf;

use pcsc::config::RunConfig;
use pcsc::experiment::{cmd_baseline, cmd_finetune, cmd_gen_data, cmd_pretrain, cmd_rectify, cmd_sweep, cmd_train_jscc};
use pcsc::experiment::{BaselineArgs, SweepArgs};
use pcsc::training::TrainLog;

fn summary(name: &str, log: &TrainLog) {
    let first = log.rows.first().map_or(f64::NAN, |r| r.loss);
    let last = log.rows.last().map_or(f64::NAN, |r| r.loss);
    println!("{name:<10} {:>5} steps  loss {first:.4} -> {last:.4}", log.rows.len());
}

fn main() -> pcsc::Result<()> {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/micro.toml");
    let mut cfg = RunConfig::load(&config)?;
    if let Some(dir) = std::env::args().nth(1) {
        cfg.output_dir = dir.into();
    }

    cmd_gen_data(&cfg)?;
    summary("pretrain", &cmd_pretrain(&cfg)?);
    summary("finetune", &cmd_finetune(&cfg)?);
    summary("codec", &cmd_train_jscc(&cfg)?);
    summary("rectify", &cmd_rectify(&cfg)?);

    let (path, rows) = cmd_sweep(&cfg, &SweepArgs::default())?;
    println!("\n{:>6} {:>5} {:>10}", "snr", "rate", "chamfer");
    for r in &rows {
        println!("{:>6.1} {:>5} {:>10.4}", r.snr_db, r.rate, r.cd);
    }
    println!("wrote {}", path.display());

    let (path, rows) = cmd_baseline(&cfg, &BaselineArgs::default())?;
    let ok = rows.iter().filter(|r| r.outcome == "ok").count();
    println!("baseline: {ok}/{} delivered, wrote {}", rows.len(), path.display());
    Ok(())
}
