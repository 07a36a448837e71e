//! Batch commands behind the `pcsc` binary. Each command reads a resolved
//! [`RunConfig`], works inside `output_dir`, and leaves a run record
//! (`run-<command>.toml`: seed, resolved config, SHA-256 of every
//! checkpoint read or written).
//!
//! Layout of `output_dir`:
//!
//! ```text
//! data/            clouds/*.ply, train.toml, test.toml
//! checkpoints/     encoder-pretrain, backbone-pretrain, encoder, backbone,
//!                  codec, backbone-rd, rd-triplets (all .pcsc)
//! logs/            <phase>.csv training logs
//! sweep.csv, baseline.csv, transmit/*.ply
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::channel::ChannelKind;
use crate::config::{RunConfig, Sampler};
use crate::dataio::{gen_dataset, load_manifest, load_ply, save_ply, write_dataset, Sample};
use crate::diffusion::CpcBackbone;
use crate::encoder::SemanticEncoder;
use crate::error::{Error, Result};
use crate::geometry::KeypointSet;
use crate::jscc::JsccCodec;
use crate::metrics::MetricReport;
use crate::nn::ParamStore;
use crate::octree::{baseline_transmit, Coding, DigitalLinkConfig, Modulation};
use crate::system::SemanticSystem;
use crate::training::{
    rd_generate, save_triplets, train_diffusion, train_jscc_pruned, train_rd, DiffusionPhase, TrainLog,
};

/// Stable 64-bit seed for a labelled sub-task of a run.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.output_dir.clone(),
        }
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.pcsc"))
    }

    pub fn log(&self, phase: &str) -> PathBuf {
        self.root.join("logs").join(format!("{phase}.csv"))
    }

    fn ensure(&self, sub: &str) -> Result<PathBuf> {
        let p = self.root.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    seed: u64,
    checkpoints: std::collections::BTreeMap<String, String>,
    config: &'a RunConfig,
}

fn write_record(cfg: &RunConfig, command: &str, checkpoints: &[PathBuf]) -> Result<()> {
    let dir = RunDir::new(cfg);
    dir.ensure(".")?;
    let mut hashes = std::collections::BTreeMap::new();
    for p in checkpoints {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        hashes.insert(name, file_sha256(p)?);
    }
    let rec = RunRecord {
        command,
        seed: cfg.seed,
        checkpoints: hashes,
        config: cfg,
    };
    let text = toml::to_string_pretty(&rec).map_err(|e| Error::config(e.to_string()))?;
    let path = dir.root.join(format!("run-{command}.toml"));
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let resolved = dir.root.join("config.resolved.toml");
    std::fs::write(&resolved, cfg.to_toml()?).map_err(|e| Error::io(&resolved, e))
}

fn load_store(store: &mut ParamStore, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    store.load(path)
}

pub fn new_encoder(cfg: &RunConfig) -> Result<SemanticEncoder> {
    SemanticEncoder::new(&cfg.encoder, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init/encoder")))
}

pub fn new_backbone(cfg: &RunConfig) -> Result<CpcBackbone> {
    CpcBackbone::new(&cfg.diffusion, cfg.encoder.d, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init/backbone")))
}

pub fn load_encoder(cfg: &RunConfig, path: &Path) -> Result<SemanticEncoder> {
    let mut e = new_encoder(cfg)?;
    load_store(&mut e.params, path)?;
    Ok(e)
}

pub fn load_backbone(cfg: &RunConfig, path: &Path) -> Result<CpcBackbone> {
    let mut b = new_backbone(cfg)?;
    load_store(&mut b.params, path)?;
    Ok(b)
}

pub fn load_codec(cfg: &RunConfig, path: &Path) -> Result<JsccCodec> {
    let mut c = JsccCodec::new(&cfg.jscc, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_store(&mut c.params, path)?;
    Ok(c)
}

/// Trained system from a run directory; `rectified` picks the retrained
/// backbone.
pub fn load_system(cfg: &RunConfig, rectified: bool) -> Result<SemanticSystem> {
    let dir = RunDir::new(cfg);
    let backbone = if rectified { "backbone-rd" } else { "backbone" };
    Ok(SemanticSystem {
        encoder: load_encoder(cfg, &dir.checkpoint("encoder"))?,
        codec: load_codec(cfg, &dir.checkpoint("codec"))?,
        backbone: load_backbone(cfg, &dir.checkpoint(backbone))?,
        schedule: cfg.diffusion.schedule()?,
    })
}

pub fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<Sample>> {
    load_manifest(&cfg.dataset_dir().join(format!("{split}.toml")))?.load_samples()
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.dataset_dir();
    let ds = gen_dataset(&cfg.data, derive_seed(cfg.seed, "data"))?;
    write_dataset(&ds, &dir)?;
    write_record(cfg, "gen-data", &[])?;
    Ok(dir)
}

fn save_log(dir: &RunDir, phase: &str, log: &TrainLog) -> Result<()> {
    dir.ensure("logs")?;
    log.write_csv(&dir.log(phase))
}

fn save(store: &ParamStore, path: &Path) -> Result<PathBuf> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    store.save(path)?;
    Ok(path.to_owned())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<TrainLog> {
    let dir = RunDir::new(cfg);
    let train = load_split(cfg, "train")?;
    let mut enc = new_encoder(cfg)?;
    let mut bb = new_backbone(cfg)?;
    enc.params.round_to_f32();
    bb.params.round_to_f32();
    let mut log = TrainLog::default();
    let s = cfg.diffusion.schedule()?;
    train_diffusion(&mut enc, &mut bb, &train, &cfg.training, DiffusionPhase::Pretrain, &s, derive_seed(cfg.seed, "pretrain"), &mut log)?;
    let written = [
        save(&enc.params, &dir.checkpoint("encoder-pretrain"))?,
        save(&bb.params, &dir.checkpoint("backbone-pretrain"))?,
    ];
    save_log(&dir, "pretrain", &log)?;
    write_record(cfg, "pretrain", &written)?;
    Ok(log)
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<TrainLog> {
    let dir = RunDir::new(cfg);
    let train = load_split(cfg, "train")?;
    let (ein, bin) = (dir.checkpoint("encoder-pretrain"), dir.checkpoint("backbone-pretrain"));
    let mut enc = load_encoder(cfg, &ein)?;
    let mut bb = load_backbone(cfg, &bin)?;
    let mut log = TrainLog::default();
    let s = cfg.diffusion.schedule()?;
    train_diffusion(&mut enc, &mut bb, &train, &cfg.training, DiffusionPhase::Finetune, &s, derive_seed(cfg.seed, "finetune"), &mut log)?;
    let written = [ein, bin, save(&enc.params, &dir.checkpoint("encoder"))?, save(&bb.params, &dir.checkpoint("backbone"))?];
    save_log(&dir, "finetune", &log)?;
    write_record(cfg, "finetune", &written)?;
    Ok(log)
}

pub fn cmd_train_jscc(cfg: &RunConfig) -> Result<TrainLog> {
    let dir = RunDir::new(cfg);
    let train = load_split(cfg, "train")?;
    let (ein, bin) = (dir.checkpoint("encoder"), dir.checkpoint("backbone"));
    let mut enc = load_encoder(cfg, &ein)?;
    let mut bb = load_backbone(cfg, &bin)?;
    let mut log = TrainLog::default();
    let s = cfg.diffusion.schedule()?;
    let (codec, deviations) = train_jscc_pruned(&mut enc, &mut bb, &cfg.jscc, &train, &cfg.training, &s, derive_seed(cfg.seed, "jscc"), &mut log)?;
    let out = save(&codec.params, &dir.checkpoint("codec"))?;
    let dev: std::collections::BTreeMap<String, Vec<f64>> =
        deviations.into_iter().map(|(f, v)| (format!("{f:?}").to_lowercase(), v)).collect();
    let dev_path = dir.ensure("logs")?.join("gate-deviations.json");
    std::fs::write(&dev_path, serde_json::to_string_pretty(&dev).expect("plain map")).map_err(|e| Error::io(&dev_path, e))?;
    save_log(&dir, "jscc", &log)?;
    write_record(cfg, "train-jscc", &[ein, bin, out])?;
    Ok(log)
}

pub fn cmd_rectify(cfg: &RunConfig) -> Result<TrainLog> {
    let dir = RunDir::new(cfg);
    let train = load_split(cfg, "train")?;
    let (ein, bin) = (dir.checkpoint("encoder"), dir.checkpoint("backbone"));
    let enc = load_encoder(cfg, &ein)?;
    let mut bb = load_backbone(cfg, &bin)?;
    let s = cfg.diffusion.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "rd/generate"));
    let triplets = rd_generate(&enc, &bb, &train, cfg.training.rd_triplets, cfg.training.rd_teacher_steps, &s, &mut rng)?;
    let tpath = dir.checkpoint("rd-triplets");
    if let Some(p) = tpath.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    save_triplets(&tpath, &triplets)?;
    let mut log = TrainLog::default();
    train_rd(&mut bb, &triplets, &cfg.training, &s, derive_seed(cfg.seed, "rd/train"), &mut log)?;
    let out = save(&bb.params, &dir.checkpoint("backbone-rd"))?;
    save_log(&dir, "rd", &log)?;
    write_record(cfg, "rectify", &[ein, bin, tpath, out])?;
    Ok(log)
}

/// Options of a single transmission.
#[derive(Debug, Clone)]
pub struct TransmitArgs {
    /// A dataset id (test split first, then train) or a PLY path.
    pub cloud: String,
    /// Keypoint indices for a PLY input.
    pub keypoints: Vec<usize>,
    pub snr_db: f64,
    pub rate: usize,
    pub channel: Option<ChannelKind>,
    pub sampler: Option<Sampler>,
    pub seed: u64,
    pub rectified: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TransmitReport {
    pub output: PathBuf,
    pub symbols: usize,
    pub metrics: MetricReport,
}

impl std::fmt::Display for TransmitReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"));
        write!(
            f,
            "symbols={} mse={} cd={:.6e} hd={:.6e} emd={} output={}",
            self.symbols,
            opt(self.metrics.mse),
            self.metrics.cd,
            self.metrics.hd,
            opt(self.metrics.emd),
            self.output.display()
        )
    }
}

fn find_sample(cfg: &RunConfig, args: &TransmitArgs) -> Result<Sample> {
    let as_path = Path::new(&args.cloud);
    if as_path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        let mut cloud = load_ply(as_path)?;
        cloud.id = as_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let keypoints = KeypointSet::new(args.keypoints.clone());
        keypoints.validate(cloud.len())?;
        return Ok(Sample { cloud, keypoints });
    }
    for split in ["test", "train"] {
        let m = load_manifest(&cfg.dataset_dir().join(format!("{split}.toml")))?;
        if let Some(e) = m.entries.iter().find(|e| e.id == args.cloud) {
            return m.load_entry(e);
        }
    }
    Err(Error::invalid(format!("no cloud with id {:?} and not a .ply path", args.cloud)))
}

pub fn cmd_transmit(cfg: &RunConfig, args: &TransmitArgs) -> Result<TransmitReport> {
    let system = load_system(cfg, args.rectified)?;
    let sample = find_sample(cfg, args)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let channel = args.channel.unwrap_or(cfg.transmit.channel);
    let sampler = args.sampler.unwrap_or(cfg.transmit.sampler);
    let tx = system.transmit(&sample, channel, args.snr_db, args.rate, sampler, &mut rng)?;
    let metrics = MetricReport::compute(&sample.cloud, &tx.reconstruction)?;
    let output = match &args.out {
        Some(p) => p.clone(),
        None => RunDir::new(cfg).ensure("transmit")?.join(format!(
            "{}_{channel}_{}dB_r{}_{}.ply",
            sample.cloud.id,
            args.snr_db,
            args.rate,
            sampler.to_string().replace(':', "")
        )),
    };
    save_ply(&tx.reconstruction, &output)?;
    let dir = RunDir::new(cfg);
    let bb = if args.rectified { "backbone-rd" } else { "backbone" };
    write_record(cfg, "transmit", &[dir.checkpoint("encoder"), dir.checkpoint("codec"), dir.checkpoint(bb)])?;
    Ok(TransmitReport {
        output,
        symbols: tx.symbols,
        metrics,
    })
}

/// One line of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub cloud_id: String,
    pub channel: ChannelKind,
    pub snr_db: f64,
    pub rate: usize,
    pub repeat: usize,
    pub mse: Option<f64>,
    pub cd: f64,
    pub hd: f64,
    pub emd: Option<f64>,
    pub symbols: usize,
    pub sampler: Sampler,
    pub seconds: f64,
}

/// Seed of one sweep cell; a row is reproducible from it alone.
pub fn sweep_row_seed(seed: u64, cloud_id: &str, channel: ChannelKind, snr_db: f64, rate: usize, repeat: usize) -> u64 {
    derive_seed(seed, &format!("sweep/{cloud_id}/{channel}/{}/{rate}/{repeat}", snr_db.to_bits()))
}

/// Overrides of the configured sweep.
#[derive(Debug, Clone, Default)]
pub struct SweepArgs {
    pub snr_list: Option<Vec<f64>>,
    pub rate_list: Option<Vec<usize>>,
    pub repeats: Option<usize>,
    pub channel: Option<ChannelKind>,
    pub sampler: Option<Sampler>,
    pub clouds: Option<usize>,
    pub rectified: bool,
    pub out: Option<PathBuf>,
}

/// Rows are computed in parallel and written in (cloud, snr, rate, repeat)
/// order.
pub fn run_sweep(system: &SemanticSystem, clouds: &[Sample], seed: u64, channel: ChannelKind, sampler: Sampler, snrs: &[f64], rates: &[usize], repeats: usize) -> Result<Vec<SweepRow>> {
    let mut cells = Vec::new();
    for (ci, _) in clouds.iter().enumerate() {
        for &snr in snrs {
            for &rate in rates {
                for repeat in 0..repeats {
                    cells.push((ci, snr, rate, repeat));
                }
            }
        }
    }
    cells
        .into_par_iter()
        .map(|(ci, snr, rate, repeat)| {
            let s = &clouds[ci];
            let start = Instant::now();
            let mut rng = ChaCha8Rng::seed_from_u64(sweep_row_seed(seed, &s.cloud.id, channel, snr, rate, repeat));
            let tx = system.transmit(s, channel, snr, rate, sampler, &mut rng)?;
            let m = MetricReport::compute(&s.cloud, &tx.reconstruction)?;
            Ok(SweepRow {
                cloud_id: s.cloud.id.clone(),
                channel,
                snr_db: snr,
                rate,
                repeat,
                mse: m.mse,
                cd: m.cd,
                hd: m.hd,
                emd: m.emd,
                symbols: tx.symbols,
                sampler,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<(PathBuf, Vec<SweepRow>)> {
    let system = load_system(cfg, args.rectified)?;
    let test = load_split(cfg, "test")?;
    let n = args.clouds.unwrap_or(cfg.sweep.clouds).min(test.len());
    let rates = args.rate_list.clone().unwrap_or_else(|| cfg.sweep.rate_list.clone());
    for &r in &rates {
        if !cfg.jscc.rates.contains(&r) {
            return Err(Error::UnsupportedRate {
                rate: r,
                available: cfg.jscc.rates.clone(),
            });
        }
    }
    let rows = run_sweep(
        &system,
        &test[..n],
        cfg.seed,
        args.channel.unwrap_or(cfg.sweep.channel),
        args.sampler.unwrap_or(cfg.sweep.sampler),
        args.snr_list.as_deref().unwrap_or(&cfg.sweep.snr_list),
        &rates,
        args.repeats.unwrap_or(cfg.sweep.repeats),
    )?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("sweep.csv"));
    write_csv(&out, &rows)?;
    let dir = RunDir::new(cfg);
    let bb = if args.rectified { "backbone-rd" } else { "backbone" };
    write_record(cfg, "sweep", &[dir.checkpoint("encoder"), dir.checkpoint("codec"), dir.checkpoint(bb)])?;
    Ok((out, rows))
}

/// One line of `baseline.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct BaselineRow {
    pub cloud_id: String,
    pub depth: u8,
    pub modulation: Modulation,
    pub coding: Coding,
    pub snr_db: f64,
    pub payload_bits: usize,
    pub mse: Option<f64>,
    pub cd: Option<f64>,
    pub hd: Option<f64>,
    pub emd: Option<f64>,
    pub outcome: String,
    pub symbols: usize,
}

#[derive(Debug, Clone, Default)]
pub struct BaselineArgs {
    pub depth: Option<u8>,
    pub modulation: Option<Modulation>,
    pub coding: Option<Coding>,
    pub snr_list: Option<Vec<f64>>,
    pub clouds: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn run_baseline(clouds: &[Sample], seed: u64, depth: u8, modulation: Modulation, coding: Coding, snrs: &[f64]) -> Result<Vec<BaselineRow>> {
    let cells: Vec<(usize, f64)> = (0..clouds.len()).flat_map(|c| snrs.iter().map(move |&s| (c, s))).collect();
    cells
        .into_par_iter()
        .map(|(ci, snr)| {
            let s = &clouds[ci];
            let link = DigitalLinkConfig {
                modulation,
                coding,
                snr_db: snr,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("baseline/{}/{}", s.cloud.id, snr.to_bits())));
            let out = baseline_transmit(&s.cloud, depth, &link, &mut rng)?;
            let m = out.metrics;
            Ok(BaselineRow {
                cloud_id: s.cloud.id.clone(),
                depth,
                modulation,
                coding,
                snr_db: snr,
                payload_bits: out.payload_bits,
                mse: m.and_then(|m| m.mse),
                cd: m.map(|m| m.cd),
                hd: m.map(|m| m.hd),
                emd: m.and_then(|m| m.emd),
                outcome: if out.reconstruction.is_ok() { "ok" } else { "decode_failure" }.to_string(),
                symbols: out.symbols,
            })
        })
        .collect()
}

pub fn cmd_baseline(cfg: &RunConfig, args: &BaselineArgs) -> Result<(PathBuf, Vec<BaselineRow>)> {
    let test = load_split(cfg, "test")?;
    let n = args.clouds.unwrap_or(cfg.baseline.clouds).min(test.len());
    let rows = run_baseline(
        &test[..n],
        cfg.seed,
        args.depth.unwrap_or(cfg.baseline.depth),
        args.modulation.unwrap_or(cfg.baseline.modulation),
        args.coding.unwrap_or(cfg.baseline.coding),
        args.snr_list.as_deref().unwrap_or(&cfg.baseline.snr_list),
    )?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("baseline.csv"));
    write_csv(&out, &rows)?;
    write_record(cfg, "baseline", &[])?;
    Ok((out, rows))
}
