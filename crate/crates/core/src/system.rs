//! The assembled transmitter/receiver chain: feature extraction, adaptive
//! codec, channel, and diffusion reconstruction.

use rand::Rng;

use crate::channel::{transmit, ChannelKind};
use crate::config::Sampler;
use crate::dataio::Sample;
use crate::diffusion::{
    ddim_sample, ddpm_sample, make_subsequence, CpcBackbone, DdpmVariance, DiffusionSchedule, SigmaMode,
};
use crate::encoder::SemanticEncoder;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::jscc::JsccCodec;
use crate::nn::Mat;

#[derive(Debug, Clone)]
pub struct SemanticSystem {
    pub encoder: SemanticEncoder,
    pub codec: JsccCodec,
    pub backbone: CpcBackbone,
    pub schedule: DiffusionSchedule,
}

/// Result of one end-to-end transmission.
#[derive(Debug, Clone)]
pub struct Transmission {
    pub reconstruction: PointCloud,
    /// Channel uses.
    pub symbols: usize,
    pub feature: Mat,
    pub recovered_feature: Mat,
}

pub fn mat_to_cloud(m: &Mat) -> PointCloud {
    PointCloud::new(m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect())
}

/// Draws a cloud of `points` points conditioned on `features`.
pub fn generate<R: Rng + ?Sized>(
    backbone: &CpcBackbone,
    schedule: &DiffusionSchedule,
    features: &Mat,
    points: usize,
    sampler: Sampler,
    rng: &mut R,
) -> Result<PointCloud> {
    let model = backbone.conditioned(features, schedule);
    let x = match sampler {
        Sampler::Ddpm => ddpm_sample(&model, schedule, points, DdpmVariance::Beta, rng)?,
        Sampler::Ddim(k) => {
            let taus = make_subsequence(schedule.steps(), k)?;
            ddim_sample(&model, schedule, &taus, SigmaMode::Deterministic, backbone.net.cfg.x0_clip, points, rng)?
        }
    };
    Ok(mat_to_cloud(&x))
}

impl SemanticSystem {
    /// Random draws happen in a fixed order: encoder, channel, sampler.
    pub fn transmit<R: Rng + ?Sized>(
        &self,
        sample: &Sample,
        channel: ChannelKind,
        snr_db: f64,
        rate: usize,
        sampler: Sampler,
        rng: &mut R,
    ) -> Result<Transmission> {
        if sample.cloud.is_empty() {
            return Err(Error::invalid("cannot transmit an empty cloud"));
        }
        let feature = self.encoder.extract(&sample.cloud, &sample.keypoints, rng, false)?;
        let sent = self.codec.encode(&feature, snr_db, rate)?;
        let received = transmit(channel, &sent, snr_db, rng)?;
        let recovered_feature = self.codec.decode(&received)?;
        let reconstruction = generate(&self.backbone, &self.schedule, &recovered_feature, sample.cloud.len(), sampler, rng)?;
        Ok(Transmission {
            reconstruction,
            symbols: sent.len(),
            feature,
            recovered_feature,
        })
    }
}
