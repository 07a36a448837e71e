//! Run configuration: a preset (`paper` or `toy`) deep-merged with a TOML
//! file. Unknown keys are rejected after merging.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelKind;
use crate::dataio::SyntheticDatasetConfig;
use crate::diffusion::DiffusionConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::jscc::JsccConfig;
use crate::octree::{Coding, Modulation};
use crate::training::TrainingConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "PCSC_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    #[default]
    Toy,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "toy" => Ok(Self::Toy),
            other => Err(Error::config(format!("unknown preset {other:?}"))),
        }
    }
}

/// Receiver-side sampler: full ancestral sampling or `k`-step deterministic
/// DDIM. Written `ddpm` or `ddim:<k>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Sampler {
    Ddpm,
    Ddim(usize),
}

impl std::str::FromStr for Sampler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "ddpm" {
            return Ok(Self::Ddpm);
        }
        match s.strip_prefix("ddim:").map(str::parse::<usize>) {
            Some(Ok(k)) if k > 0 => Ok(Self::Ddim(k)),
            _ => Err(Error::config(format!("sampler {s:?} is neither 'ddpm' nor 'ddim:<steps>'"))),
        }
    }
}

impl TryFrom<String> for Sampler {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Sampler> for String {
    fn from(s: Sampler) -> String {
        s.to_string()
    }
}

impl std::fmt::Display for Sampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Ddpm => f.write_str("ddpm"),
            Self::Ddim(k) => write!(f, "ddim:{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmitConfig {
    pub channel: ChannelKind,
    pub sampler: Sampler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub channel: ChannelKind,
    pub sampler: Sampler,
    pub snr_list: Vec<f64>,
    pub rate_list: Vec<usize>,
    pub repeats: usize,
    /// Test clouds used, from the start of the test split.
    pub clouds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub depth: u8,
    pub modulation: Modulation,
    pub coding: Coding,
    pub snr_list: Vec<f64>,
    pub clouds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Directory holding `train.toml` and `test.toml`; defaults to
    /// `<output_dir>/data`.
    pub dataset_dir: Option<PathBuf>,
    pub data: SyntheticDatasetConfig,
    pub encoder: EncoderConfig,
    pub jscc: JsccConfig,
    pub diffusion: DiffusionConfig,
    pub training: TrainingConfig,
    pub transmit: TransmitConfig,
    pub sweep: SweepConfig,
    pub baseline: BaselineConfig,
}

const SNR_GRID: [f64; 8] = [-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0];

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => {
                let jscc = JsccConfig::paper();
                Self {
                    preset: p,
                    seed: 0,
                    output_dir: "runs/paper".into(),
                    dataset_dir: None,
                    data: SyntheticDatasetConfig::paper(),
                    encoder: EncoderConfig::paper(),
                    diffusion: DiffusionConfig::paper(),
                    training: TrainingConfig::paper(),
                    transmit: TransmitConfig {
                        channel: ChannelKind::Awgn,
                        sampler: Sampler::Ddpm,
                    },
                    sweep: SweepConfig {
                        channel: ChannelKind::Awgn,
                        sampler: Sampler::Ddpm,
                        snr_list: SNR_GRID.to_vec(),
                        rate_list: jscc.rates.clone(),
                        repeats: 10,
                        clouds: 250,
                    },
                    baseline: BaselineConfig {
                        depth: 8,
                        modulation: Modulation::Bpsk,
                        coding: Coding::IdealRateHalf,
                        snr_list: SNR_GRID.to_vec(),
                        clouds: 250,
                    },
                    jscc,
                }
            }
            Preset::Toy => {
                let jscc = JsccConfig::toy();
                Self {
                    preset: p,
                    seed: 0,
                    output_dir: "runs/toy".into(),
                    dataset_dir: None,
                    data: SyntheticDatasetConfig::toy(),
                    encoder: EncoderConfig::toy(),
                    diffusion: DiffusionConfig::toy(),
                    training: TrainingConfig::toy(),
                    transmit: TransmitConfig {
                        channel: ChannelKind::Awgn,
                        sampler: Sampler::Ddpm,
                    },
                    sweep: SweepConfig {
                        channel: ChannelKind::Awgn,
                        sampler: Sampler::Ddim(8),
                        snr_list: SNR_GRID.to_vec(),
                        rate_list: jscc.rates.clone(),
                        repeats: 2,
                        clouds: 60,
                    },
                    baseline: BaselineConfig {
                        depth: 8,
                        modulation: Modulation::Bpsk,
                        coding: Coding::IdealRateHalf,
                        snr_list: SNR_GRID.to_vec(),
                        clouds: 60,
                    },
                    jscc,
                }
            }
        }
    }

    /// Preset named by the text's `preset` key (default `toy`), overridden
    /// key by key with the text.
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, origin, &e))?;
        let preset = match overrides.get("preset") {
            None => Preset::Toy,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::config(format!("preset must be a string, got {other}"))),
        };
        Self::with_overrides(preset, overrides)
    }

    pub fn with_overrides(preset: Preset, overrides: toml::Table) -> Result<Self> {
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::config(e.to_string()))?;
        let mut merged = base;
        deep_merge(&mut merged, overrides);
        merged.insert("preset".into(), toml::Value::String(format!("{preset:?}").to_lowercase()));
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    /// `path`, else the file named by `PCSC_CONFIG`, else the toy preset.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::preset(Preset::Toy)),
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.jscc.validate()?;
        self.diffusion.validate()?;
        self.training.validate()?;
        if self.encoder.d != self.jscc.d {
            return Err(Error::config(format!("encoder.d = {} but jscc.d = {}", self.encoder.d, self.jscc.d)));
        }
        for &r in &self.sweep.rate_list {
            if !self.jscc.rates.contains(&r) {
                return Err(Error::UnsupportedRate {
                    rate: r,
                    available: self.jscc.rates.clone(),
                });
            }
        }
        if self.sweep.repeats == 0 || self.sweep.snr_list.is_empty() || self.sweep.rate_list.is_empty() {
            return Err(Error::config("sweep needs repeats and non-empty SNR and rate lists"));
        }
        if self.baseline.depth == 0 || self.baseline.depth > 21 {
            return Err(Error::config("baseline depth must lie in 1..=21"));
        }
        for s in [&self.transmit.sampler, &self.sweep.sampler] {
            if let Sampler::Ddim(k) = s {
                if *k > self.diffusion.steps {
                    return Err(Error::config(format!("{s} exceeds {} diffusion steps", self.diffusion.steps)));
                }
            }
        }
        Ok(())
    }
}

fn parse_error(text: &str, origin: &Path, e: &toml::de::Error) -> Error {
    Error::Parse {
        path: origin.to_owned(),
        line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
        msg: e.message().to_string(),
    }
}

/// Tables merge recursively; any other value replaces.
fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::Paper, Preset::Toy] {
            let c = RunConfig::preset(p);
            c.validate().unwrap();
            let back = RunConfig::from_toml_str(&c.to_toml().unwrap(), Path::new("x.toml")).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn paper_constants() {
        let c = RunConfig::preset(Preset::Paper);
        assert_eq!((c.data.n_points, c.encoder.groups, c.encoder.group_size), (1024, 64, 32));
        assert_eq!((c.encoder.d1, c.encoder.d2, c.encoder.d), (384, 512, 1024));
        assert_eq!((c.diffusion.steps, c.jscc.cond_width), (2000, 128));
        assert_eq!(c.encoder.mask_fraction, 0.8);
        assert_eq!(c.jscc.rates[..2], [1024, 896]);
        assert_eq!(c.training.pretrain.epochs, 500);
        assert_eq!(c.training.segments, 12);
    }

    #[test]
    fn overrides_merge_deeply() {
        let text = "preset = \"toy\"\nseed = 7\n[training.pretrain]\nepochs = 3\n[sweep]\nsampler = \"ddim:4\"\n";
        let c = RunConfig::from_toml_str(text, Path::new("o.toml")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.training.pretrain.epochs, 3);
        assert_eq!(c.training.pretrain.batch_size, 8);
        assert_eq!(c.sweep.sampler, Sampler::Ddim(4));
        assert_eq!(c.encoder, EncoderConfig::toy());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let p = Path::new("bad.toml");
        assert!(RunConfig::from_toml_str("bogus = 1\n", p).is_err());
        assert!(RunConfig::from_toml_str("[training]\nepoch = 1\n", p).is_err());
        assert!(RunConfig::from_toml_str("preset = \"huge\"\n", p).is_err());
        assert!(RunConfig::from_toml_str("[sweep]\nrate_list = [3]\n", p).is_err());
        assert!(RunConfig::from_toml_str("[sweep]\nsampler = \"ddim:0\"\n", p).is_err());
        assert!(RunConfig::from_toml_str("[jscc]\nd = 64\n", p).is_err());
        assert!(matches!(RunConfig::from_toml_str("seed = \n", p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn sampler_strings() {
        assert_eq!("ddpm".parse::<Sampler>().unwrap(), Sampler::Ddpm);
        assert_eq!("ddim:8".parse::<Sampler>().unwrap(), Sampler::Ddim(8));
        assert_eq!(Sampler::Ddim(8).to_string(), "ddim:8");
        assert!("ddim".parse::<Sampler>().is_err());
    }
}
