//! Training procedures: diffusion pretraining, dual-metric fine-tuning,
//! codec training with frozen ends (plus stage pruning) and rectified
//! retraining on generated noise/sample pairs.
//!
//! Every step builds one graph for a whole batch. Diffusion batches stack
//! one block of `N` rows per (cloud, timestep) pair, cloud-major.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelKind, ChannelRealization, SymbolVector};
use crate::dataio::Sample;
use crate::diffusion::{
    ddim_sample_from, make_subsequence, q_sample, stack_rows, standard_normal, CpcBackbone, DiffusionSchedule, SigmaMode,
};
use crate::encoder::{EncoderInput, SemanticEncoder};
use crate::error::{Error, Result};
use crate::geometry::{augment, Interval, PointCloud};
use crate::jscc::{Family, JsccCodec, JsccConfig, StageCounts};
use crate::nn::checkpoint::{self, StoredTensor};
use crate::nn::{cosine_warmup_lr, AdamW, Grads, Graph, Mat, NodeId, ParamStore};

/// Optimizer schedule of one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
}

impl PhaseConfig {
    pub const fn new(epochs: usize, batch_size: usize, lr: f64, weight_decay: f64, warmup_epochs: usize) -> Self {
        Self {
            epochs,
            batch_size,
            lr,
            weight_decay,
            warmup_epochs,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(format!("{name}: epochs and batch_size must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("{name}: lr must be positive and weight_decay non-negative")));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config(format!("{name}: warmup longer than training")));
        }
        Ok(())
    }
}

/// What the fine-tuning Chamfer term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneTarget {
    /// True versus predicted noise, each read as a point set.
    #[default]
    Noise,
    /// Clean cloud versus its one-step estimate from the predicted noise.
    Sample,
}

/// Per-timestep weighting of the rectification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RdWeighting {
    /// Plain noise regression.
    Uniform,
    /// Weight `(1 - abar_t) / abar_t`, which turns each term into the squared
    /// error of the implied clean-sample estimate. Weights are divided by
    /// their batch mean.
    #[default]
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale: Interval,
    pub translate: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    /// Feature-only codec training that precedes `jscc`.
    pub jscc_warmup: Option<PhaseConfig>,
    /// Codec with the full stage count, before pruning.
    pub jscc: PhaseConfig,
    /// Codec after pruning.
    pub jscc_retrain: PhaseConfig,
    pub rd: PhaseConfig,
    pub segments: usize,
    pub jscc_base_stages: usize,
    pub jscc_ddim_steps: usize,
    pub jscc_channel: ChannelKind,
    /// Per-cloud Chamfer values above this contribute no gradient.
    pub jscc_cd_cap: Option<f64>,
    /// Transmissions used to score gates before pruning.
    pub prune_calibration: usize,
    pub rd_triplets: usize,
    /// Deterministic DDIM steps used to generate triplets.
    pub rd_teacher_steps: usize,
    pub rd_weighting: RdWeighting,
    pub augment: Option<AugmentConfig>,
    pub finetune_cd: FinetuneTarget,
}

impl TrainingConfig {
    pub fn paper() -> Self {
        let pretrain = PhaseConfig::new(500, 32, 6e-4, 0.05, 10);
        let jscc = PhaseConfig::new(300, 16, 3e-4, 1e-4, 10);
        Self {
            pretrain,
            finetune: PhaseConfig::new(100, 32, 1e-4, 1e-4, 0),
            jscc_warmup: Some(PhaseConfig::new(30, 16, 1e-3, 1e-4, 2)),
            jscc,
            jscc_retrain: jscc,
            rd: pretrain,
            segments: 12,
            jscc_base_stages: 5,
            jscc_ddim_steps: 8,
            jscc_channel: ChannelKind::Awgn,
            jscc_cd_cap: Some(1.0),
            prune_calibration: 256,
            rd_triplets: 560_000,
            rd_teacher_steps: 100,
            rd_weighting: RdWeighting::Sample,
            augment: Some(AugmentConfig {
                scale: Interval::new(2.0 / 3.0, 1.5),
                translate: Interval::new(-0.2, 0.2),
            }),
            finetune_cd: FinetuneTarget::Noise,
        }
    }

    pub fn toy() -> Self {
        Self {
            pretrain: PhaseConfig::new(50, 8, 1e-3, 0.05, 2),
            finetune: PhaseConfig::new(20, 8, 1e-4, 1e-4, 0),
            jscc_warmup: Some(PhaseConfig::new(10, 8, 1e-3, 1e-4, 1)),
            jscc: PhaseConfig::new(20, 8, 3e-4, 1e-4, 1),
            jscc_retrain: PhaseConfig::new(20, 8, 3e-4, 1e-4, 1),
            rd: PhaseConfig::new(10, 8, 5e-4, 1e-4, 1),
            segments: 12,
            jscc_base_stages: 5,
            jscc_ddim_steps: 8,
            jscc_channel: ChannelKind::Awgn,
            jscc_cd_cap: Some(1.0),
            prune_calibration: 64,
            rd_triplets: 512,
            rd_teacher_steps: 50,
            rd_weighting: RdWeighting::Sample,
            augment: None,
            finetune_cd: FinetuneTarget::Noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune),
            ("jscc", &self.jscc),
            ("jscc_retrain", &self.jscc_retrain),
            ("rd", &self.rd),
        ] {
            p.validate(name)?;
        }
        if let Some(w) = &self.jscc_warmup {
            w.validate("jscc_warmup")?;
        }
        if self.jscc_cd_cap.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("jscc_cd_cap must be positive"));
        }
        if self.segments == 0 || self.jscc_ddim_steps == 0 || self.rd_teacher_steps == 0 {
            return Err(Error::config("segments and sampler step counts must be positive"));
        }
        if self.jscc_base_stages == 0 || self.prune_calibration == 0 {
            return Err(Error::config("jscc_base_stages and prune_calibration must be positive"));
        }
        if self.rd_triplets == 0 {
            return Err(Error::config("rd_triplets must be positive"));
        }
        if let Some(a) = &self.augment {
            if !(a.scale.lo > 0.0 && a.scale.hi >= a.scale.lo && a.translate.hi >= a.translate.lo) {
                return Err(Error::config("augment ranges must be ordered with a positive scale"));
            }
        }
        Ok(())
    }
}

/// One draw from each of `segments` equal slices of `1..=steps`; slice `k`
/// covers `floor((k-1) T / S) + 1 ..= floor(k T / S)`.
pub fn segmented_timesteps<R: Rng + ?Sized>(steps: usize, segments: usize, rng: &mut R) -> Result<Vec<usize>> {
    if segments == 0 || steps < segments {
        return Err(Error::config(format!("cannot split {steps} steps into {segments} segments")));
    }
    Ok((1..=segments)
        .map(|k| {
            let lo = (k - 1) * steps / segments + 1;
            let hi = k * steps / segments;
            rng.gen_range(lo..=hi)
        })
        .collect())
}

/// Squared noise error summed over coordinates and averaged over rows.
pub fn noise_prediction_loss(g: &mut Graph<'_>, predicted: NodeId, target: NodeId) -> NodeId {
    let rows = g.shape(target).0 as f64;
    let diff = g.sub(predicted, target);
    g.sum_squares(diff, rows)
}

/// Loss, gradients and the channel condition used (codec steps only).
pub struct StepResult {
    pub loss: f64,
    pub grads: Grads,
    pub snr_db: Option<f64>,
    pub rate: Option<usize>,
}

fn check_loss(loss: f64, phase: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::TrainingDivergence(format!("{phase}: loss is {loss}")))
    }
}

fn cloud_mat(c: &PointCloud) -> Mat {
    Array2::from_shape_fn((c.len(), 3), |(i, k)| c.points[i][k])
}

fn common_size(batch: &[Sample]) -> Result<usize> {
    let n = batch.first().ok_or_else(|| Error::invalid("empty batch"))?.cloud.len();
    if batch.iter().any(|s| s.cloud.len() != n) {
        return Err(Error::invalid("clouds in one batch must share a point count"));
    }
    Ok(n)
}

/// Constant scaling every row of each `n`-row block by its own factor.
fn block_scale(factors: &[f64], n: usize) -> Mat {
    Array2::from_shape_fn((factors.len() * n, 3), |(r, _)| factors[r / n])
}

fn diffusion_step<R: Rng + ?Sized>(
    encoder: &SemanticEncoder,
    backbone: &CpcBackbone,
    batch: &[Sample],
    schedule: &DiffusionSchedule,
    segments: usize,
    chamfer: Option<FinetuneTarget>,
    rng: &mut R,
) -> Result<StepResult> {
    let n = common_size(batch)?;
    let mut g = Graph::new();
    let mut feats = Vec::with_capacity(batch.len());
    for s in batch {
        let input = EncoderInput::prepare(&s.cloud, &s.keypoints, encoder.config(), true, rng)?;
        feats.push(encoder.net.forward(&mut g, &encoder.params, &input)?);
    }
    let feats = g.concat_rows(&feats);

    let mut ts = Vec::new();
    let mut owners = Vec::new();
    let (mut x0s, mut xts, mut epss) = (Vec::new(), Vec::new(), Vec::new());
    for (b, s) in batch.iter().enumerate() {
        let x0 = cloud_mat(&s.cloud);
        for t in segmented_timesteps(schedule.steps(), segments, rng)? {
            let eps = standard_normal(n, 3, rng);
            xts.push(q_sample(&x0, t, &eps, schedule)?);
            epss.push(eps);
            x0s.push(x0.clone());
            ts.push(t);
            owners.push(b);
        }
    }
    let per_row = g.gather_rows(feats, &owners);
    let cond = backbone.net.condition_per_row(&mut g, per_row, &ts, schedule)?;
    let x_t = stack_rows(&xts);
    let x = g.constant(x_t.clone());
    let eps_hat = backbone.net.eps_predict(&mut g, &backbone.params, x, cond, n)?;
    let eps = g.constant(stack_rows(&epss));
    let mut loss = noise_prediction_loss(&mut g, eps_hat, eps);
    match chamfer {
        None => {}
        Some(FinetuneTarget::Noise) => {
            let cd = g.chamfer(eps, eps_hat, n);
            loss = g.add(loss, cd);
        }
        Some(FinetuneTarget::Sample) => {
            // x0_hat = x_t / sqrt(ab) - eps_hat * sqrt(1 - ab) / sqrt(ab)
            let inv: Vec<f64> = ts.iter().map(|&t| 1.0 / schedule.alpha_bar(t).sqrt()).collect();
            let k: Vec<f64> = ts.iter().map(|&t| -(1.0 - schedule.alpha_bar(t)).sqrt() / schedule.alpha_bar(t).sqrt()).collect();
            let base = g.constant(&x_t * &block_scale(&inv, n));
            let kk = g.constant(block_scale(&k, n));
            let e = g.mul(eps_hat, kk);
            let x0_hat = g.add(base, e);
            let x0 = g.constant(stack_rows(&x0s));
            let cd = g.chamfer(x0, x0_hat, n);
            loss = g.add(loss, cd);
        }
    }
    let value = check_loss(g.scalar(loss), "diffusion")?;
    Ok(StepResult {
        loss: value,
        grads: g.backward(loss),
        snr_db: None,
        rate: None,
    })
}

/// Noise-prediction loss over `segments` timesteps per cloud; gradients
/// cover encoder and backbone.
pub fn pretrain_step<R: Rng + ?Sized>(
    encoder: &SemanticEncoder,
    backbone: &CpcBackbone,
    batch: &[Sample],
    schedule: &DiffusionSchedule,
    segments: usize,
    rng: &mut R,
) -> Result<StepResult> {
    diffusion_step(encoder, backbone, batch, schedule, segments, None, rng)
}

/// [`pretrain_step`] plus a Chamfer term per (cloud, timestep) block.
pub fn finetune_step<R: Rng + ?Sized>(
    encoder: &SemanticEncoder,
    backbone: &CpcBackbone,
    batch: &[Sample],
    schedule: &DiffusionSchedule,
    segments: usize,
    target: FinetuneTarget,
    rng: &mut R,
) -> Result<StepResult> {
    diffusion_step(encoder, backbone, batch, schedule, segments, Some(target), rng)
}

/// One SNR level and one rate for a whole batch.
pub fn draw_channel_condition<R: Rng + ?Sized>(cfg: &JsccConfig, rng: &mut R) -> (f64, usize) {
    let snr = *cfg.snr_levels.choose(rng).expect("validated snr levels");
    let rate = *cfg.rates.choose(rng).expect("validated rates");
    (snr, rate)
}

/// Which terms the codec loss uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JsccObjective {
    /// Feature MSE only; the backbone is not run.
    Feature,
    /// Feature MSE plus the mean per-cloud reconstruction Chamfer. Clouds
    /// whose Chamfer exceeds `cap` are left out of the sum.
    Joint { ddim_steps: usize, cap: Option<f64> },
}

/// Codec loss through the channel and, for [`JsccObjective::Joint`], an
/// unrolled deterministic DDIM. Encoder and backbone stores must be frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_jscc_step<R: Rng + ?Sized>(
    encoder: &SemanticEncoder,
    backbone: &CpcBackbone,
    codec: &JsccCodec,
    batch: &[Sample],
    channel: ChannelKind,
    snr_db: f64,
    rate: usize,
    objective: JsccObjective,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<StepResult> {
    if !encoder.params.is_frozen() || !backbone.params.is_frozen() {
        return Err(Error::Invariant("codec training needs frozen encoder and backbone".into()));
    }
    let n = common_size(batch)?;
    let mut feats = Vec::with_capacity(batch.len());
    for s in batch {
        feats.push(encoder.extract(&s.cloud, &s.keypoints, rng, false)?);
    }
    let f_s = stack_rows(&feats);

    let mut g = Graph::new();
    let f = g.constant(f_s);
    let sent = codec.net.encode(&mut g, &codec.params, f, snr_db, rate)?;
    let sv = g.value(sent).clone();
    let (mut gains, mut noise) = (Array2::zeros(sv.dim()), Array2::zeros(sv.dim()));
    for (r, row) in sv.rows().into_iter().enumerate() {
        let sym = SymbolVector::new(row.to_vec());
        let re = ChannelRealization::draw(channel, &sym, snr_db, rng)?;
        for k in 0..sym.len() {
            gains[[r, k]] = re.gains[k];
            noise[[r, k]] = re.noise[k];
        }
    }
    let gains = g.constant(gains);
    let noise = g.constant(noise);
    let faded = g.mul(sent, gains);
    let received = g.add(faded, noise);
    let f_hat = codec.net.decode(&mut g, &codec.params, received)?;
    let feat_loss = g.mse(f, f_hat);
    let loss = match objective {
        JsccObjective::Feature => feat_loss,
        JsccObjective::Joint { ddim_steps, cap } => {
            let taus = make_subsequence(schedule.steps(), ddim_steps)?;
            let x_t = standard_normal(batch.len() * n, 3, rng);
            let x_hat = backbone.net.ddim_on_graph(&mut g, &backbone.params, f_hat, x_t, &taus, schedule)?;
            let clouds: Vec<Mat> = batch.iter().map(|s| cloud_mat(&s.cloud)).collect();
            let x = g.constant(stack_rows(&clouds));
            let cd = match cap {
                None => g.chamfer(x, x_hat, n),
                Some(cap) => {
                    let mut kept = Vec::new();
                    for k in 0..batch.len() {
                        let rows: Vec<usize> = (k * n..(k + 1) * n).collect();
                        let a = g.gather_rows(x, &rows);
                        let b = g.gather_rows(x_hat, &rows);
                        let c = g.chamfer(a, b, n);
                        if g.scalar(c) <= cap {
                            kept.push(c);
                        }
                    }
                    let mut total = g.scale(feat_loss, 0.0);
                    for c in kept {
                        total = g.add(total, c);
                    }
                    g.scale(total, 1.0 / batch.len() as f64)
                }
            };
            g.add(feat_loss, cd)
        }
    };
    let value = check_loss(g.scalar(loss), "jscc")?;
    Ok(StepResult {
        loss: value,
        grads: g.backward(loss),
        snr_db: Some(snr_db),
        rate: Some(rate),
    })
}

/// Generated pair: start noise, sampler output and the condition feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RdTriplet {
    pub x_t: Mat,
    pub x0: Mat,
    pub features: Mat,
}

fn round_f32(m: &Mat) -> Mat {
    m.mapv(|v| v as f32 as f64)
}

/// Deterministic teacher sample for one triplet's noise and feature.
pub fn rd_teacher_sample(backbone: &CpcBackbone, x_t: &Mat, features: &Mat, teacher_steps: usize, schedule: &DiffusionSchedule) -> Result<Mat> {
    let taus = make_subsequence(schedule.steps(), teacher_steps)?;
    let model = backbone.conditioned(features, schedule);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    ddim_sample_from(&model, schedule, &taus, SigmaMode::Deterministic, backbone.net.cfg.x0_clip, x_t.clone(), &mut unused, None)
}

/// `count` triplets cycling through `data`. Noise and features are rounded
/// to `f32` first, so stored triplets regenerate exactly. Samples are
/// generated in parallel; results do not depend on the thread count.
pub fn rd_generate<R: Rng + ?Sized>(
    encoder: &SemanticEncoder,
    backbone: &CpcBackbone,
    data: &[Sample],
    count: usize,
    teacher_steps: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<RdTriplet>> {
    if data.is_empty() {
        return Err(Error::invalid("rd_generate needs a non-empty dataset"));
    }
    let mut feats = Vec::with_capacity(data.len().min(count));
    for s in data.iter().take(count) {
        feats.push(round_f32(&encoder.extract(&s.cloud, &s.keypoints, rng, false)?));
    }
    let jobs: Vec<(Mat, usize)> = (0..count)
        .map(|i| {
            let n = data[i % data.len()].cloud.len();
            (round_f32(&standard_normal(n, 3, rng)), i % feats.len())
        })
        .collect();
    jobs.into_par_iter()
        .map(|(x_t, fi)| {
            let features = feats[fi].clone();
            let x0 = round_f32(&rd_teacher_sample(backbone, &x_t, &features, teacher_steps, schedule)?);
            Ok(RdTriplet { x_t, x0, features })
        })
        .collect()
}

/// Noise that puts `x_T` on the straight line from `x0`:
/// `x_T = sqrt(ab_T) x0 + sqrt(1 - ab_T) eps`.
pub fn straight_noise(triplet: &RdTriplet, schedule: &DiffusionSchedule) -> Mat {
    let ab = schedule.alpha_bar(schedule.steps());
    (&triplet.x_t - &(&triplet.x0 * ab.sqrt())) / (1.0 - ab).sqrt()
}

/// Regresses predicted noise onto the straight-pair noise at segmented
/// timesteps. Gradients cover the backbone only.
pub fn rd_retrain_step<R: Rng + ?Sized>(
    backbone: &CpcBackbone,
    batch: &[RdTriplet],
    schedule: &DiffusionSchedule,
    segments: usize,
    weighting: RdWeighting,
    rng: &mut R,
) -> Result<StepResult> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let n = first.x0.nrows();
    if batch.iter().any(|t| t.x0.nrows() != n || t.x_t.dim() != t.x0.dim()) {
        return Err(Error::invalid("triplets in one batch must share a shape"));
    }
    let mut g = Graph::new();
    let feats: Vec<Mat> = batch.iter().map(|t| t.features.clone()).collect();
    let feats = g.constant(stack_rows(&feats));
    let (mut ts, mut owners, mut xts, mut epss) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (b, tr) in batch.iter().enumerate() {
        let eps = straight_noise(tr, schedule);
        for t in segmented_timesteps(schedule.steps(), segments, rng)? {
            xts.push(q_sample(&tr.x0, t, &eps, schedule)?);
            epss.push(eps.clone());
            ts.push(t);
            owners.push(b);
        }
    }
    let per_row = g.gather_rows(feats, &owners);
    let cond = backbone.net.condition_per_row(&mut g, per_row, &ts, schedule)?;
    let x = g.constant(stack_rows(&xts));
    let eps_hat = backbone.net.eps_predict(&mut g, &backbone.params, x, cond, n)?;
    let eps = g.constant(stack_rows(&epss));
    let loss = match weighting {
        RdWeighting::Uniform => noise_prediction_loss(&mut g, eps_hat, eps),
        RdWeighting::Sample => {
            let w: Vec<f64> = ts.iter().map(|&t| (1.0 - schedule.alpha_bar(t)) / schedule.alpha_bar(t)).collect();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let mut scale = Array2::zeros((ts.len() * n, 3));
            for (k, wk) in w.iter().enumerate() {
                scale.slice_mut(ndarray::s![k * n..(k + 1) * n, ..]).fill((wk / mean).sqrt());
            }
            let scale = g.constant(scale);
            let diff = g.sub(eps_hat, eps);
            let diff = g.mul(diff, scale);
            g.sum_squares(diff, (ts.len() * n) as f64)
        }
    };
    let value = check_loss(g.scalar(loss), "rd")?;
    Ok(StepResult {
        loss: value,
        grads: g.backward(loss),
        snr_db: None,
        rate: None,
    })
}

pub fn save_triplets(path: &Path, triplets: &[RdTriplet]) -> Result<()> {
    let mut tensors = Vec::with_capacity(3 * triplets.len());
    for (i, t) in triplets.iter().enumerate() {
        tensors.push(StoredTensor::from_matrix(format!("xT/{i}"), &t.x_t));
        tensors.push(StoredTensor::from_matrix(format!("x0/{i}"), &t.x0));
        tensors.push(StoredTensor::from_matrix(format!("Fs/{i}"), &t.features));
    }
    checkpoint::write_file(path, &tensors)
}

pub fn load_triplets(path: &Path) -> Result<Vec<RdTriplet>> {
    let mut by_name: BTreeMap<String, Mat> = BTreeMap::new();
    for t in checkpoint::read_file(path)? {
        let m = t.to_matrix()?;
        by_name.insert(t.name, m);
    }
    if by_name.len() % 3 != 0 {
        return Err(Error::Checkpoint("triplet store holds a partial triplet".into()));
    }
    let mut out = Vec::with_capacity(by_name.len() / 3);
    for i in 0..by_name.len() / 3 {
        let mut take = |p: &str| {
            by_name
                .remove(&format!("{p}/{i}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing {p}/{i}")))
        };
        let (x_t, x0, features) = (take("xT")?, take("x0")?, take("Fs")?);
        if x_t.dim() != x0.dim() || x0.ncols() != 3 || features.nrows() != 1 {
            return Err(Error::Checkpoint(format!("triplet {i} has inconsistent shapes")));
        }
        out.push(RdTriplet { x_t, x0, features });
    }
    Ok(out)
}

/// One row of a training-log CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub snr_db: Option<f64>,
    pub rate: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { rows })
    }

    pub fn phase<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a LogRow> + 'a {
        self.rows.iter().filter(move |r| r.phase == name)
    }
}

/// Per-epoch shuffled batches with a warm-up/cosine learning rate, logging
/// one row per step.
fn run_phase<S>(name: &str, pc: &PhaseConfig, items: usize, seed: u64, log: &mut TrainLog, mut step: S) -> Result<()>
where
    S: FnMut(&[usize], f64, &mut ChaCha8Rng) -> Result<(f64, Option<f64>, Option<usize>)>,
{
    pc.validate(name)?;
    if items == 0 {
        return Err(Error::invalid(format!("{name}: no training items")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_epoch = items.div_ceil(pc.batch_size);
    let total = per_epoch * pc.epochs;
    let warmup = per_epoch * pc.warmup_epochs;
    let mut order: Vec<usize> = (0..items).collect();
    let mut k = 0;
    for epoch in 0..pc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(pc.batch_size) {
            let lr = cosine_warmup_lr(k + 1, total, warmup, pc.lr);
            let (loss, snr_db, rate) = step(chunk, lr, &mut rng)?;
            log.rows.push(LogRow {
                phase: name.to_string(),
                epoch,
                step: k,
                loss,
                lr,
                snr_db,
                rate,
                seed,
            });
            k += 1;
        }
    }
    Ok(())
}

fn apply(store: &mut ParamStore, opt: &mut AdamW, grads: &Grads, lr: f64) -> Result<()> {
    store.zero_grad();
    store.accumulate(grads);
    opt.lr = lr;
    opt.step(store)
}

fn optimizer(store: &ParamStore, pc: &PhaseConfig) -> AdamW {
    let mut o = AdamW::new(store, pc.lr, pc.weight_decay);
    o.f32_params = true;
    o
}

fn batch_of<R: Rng + ?Sized>(data: &[Sample], idx: &[usize], augment_cfg: Option<&AugmentConfig>, rng: &mut R) -> Result<Vec<Sample>> {
    idx.iter()
        .map(|&i| {
            let s = &data[i];
            Ok(match augment_cfg {
                None => s.clone(),
                Some(a) => Sample {
                    cloud: augment(&s.cloud, rng, a.scale, a.translate)?,
                    keypoints: s.keypoints.clone(),
                },
            })
        })
        .collect()
}

/// Which diffusion objective [`train_diffusion`] optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionPhase {
    Pretrain,
    Finetune,
}

/// Trains encoder and backbone jointly.
pub fn train_diffusion(
    encoder: &mut SemanticEncoder,
    backbone: &mut CpcBackbone,
    data: &[Sample],
    cfg: &TrainingConfig,
    phase: DiffusionPhase,
    schedule: &DiffusionSchedule,
    seed: u64,
    log: &mut TrainLog,
) -> Result<()> {
    let (name, pc, cd) = match phase {
        DiffusionPhase::Pretrain => ("pretrain", &cfg.pretrain, None),
        DiffusionPhase::Finetune => ("finetune", &cfg.finetune, Some(cfg.finetune_cd)),
    };
    let mut opt_e = optimizer(&encoder.params, pc);
    let mut opt_b = optimizer(&backbone.params, pc);
    run_phase(name, pc, data.len(), seed, log, |idx, lr, rng| {
        let batch = batch_of(data, idx, cfg.augment.as_ref(), rng)?;
        let r = diffusion_step(encoder, backbone, &batch, schedule, cfg.segments, cd, rng)?;
        apply(&mut encoder.params, &mut opt_e, &r.grads, lr)?;
        apply(&mut backbone.params, &mut opt_b, &r.grads, lr)?;
        Ok((r.loss, None, None))
    })
}

/// Trains only the codec; encoder and backbone are frozen for the duration
/// and restored to their previous freeze state afterwards.
#[allow(clippy::too_many_arguments)]
pub fn train_jscc(
    encoder: &mut SemanticEncoder,
    backbone: &mut CpcBackbone,
    codec: &mut JsccCodec,
    data: &[Sample],
    cfg: &TrainingConfig,
    pc: &PhaseConfig,
    name: &str,
    objective: JsccObjective,
    schedule: &DiffusionSchedule,
    seed: u64,
    log: &mut TrainLog,
) -> Result<()> {
    let was = (encoder.params.is_frozen(), backbone.params.is_frozen());
    encoder.params.set_frozen(true);
    backbone.params.set_frozen(true);
    let mut opt = optimizer(&codec.params, pc);
    let jcfg = codec.config().clone();
    let (enc, bb) = (&*encoder, &*backbone);
    let out = run_phase(name, pc, data.len(), seed, log, |idx, lr, rng| {
        let batch = batch_of(data, idx, cfg.augment.as_ref(), rng)?;
        let (snr, rate) = draw_channel_condition(&jcfg, rng);
        let r = train_jscc_step(enc, bb, codec, &batch, cfg.jscc_channel, snr, rate, objective, schedule, rng)?;
        apply(&mut codec.params, &mut opt, &r.grads, lr)?;
        Ok((r.loss, r.snr_db, r.rate))
    });
    encoder.params.set_frozen(was.0);
    backbone.params.set_frozen(was.1);
    out
}

/// Codec with `base_stages` stages per family, trained, pruned to
/// `jscc_cfg.stages` by gate deviation, then retrained.
#[allow(clippy::too_many_arguments)]
pub fn train_jscc_pruned(
    encoder: &mut SemanticEncoder,
    backbone: &mut CpcBackbone,
    jscc_cfg: &JsccConfig,
    data: &[Sample],
    cfg: &TrainingConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
    log: &mut TrainLog,
) -> Result<(JsccCodec, BTreeMap<Family, Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_cfg = JsccConfig {
        stages: StageCounts::uniform(cfg.jscc_base_stages),
        ..jscc_cfg.clone()
    };
    let mut base = JsccCodec::new(&base_cfg, &mut rng)?;
    let joint = JsccObjective::Joint { ddim_steps: cfg.jscc_ddim_steps, cap: cfg.jscc_cd_cap };
    if let Some(pc) = &cfg.jscc_warmup {
        train_jscc(encoder, backbone, &mut base, data, cfg, pc, "jscc-warmup", JsccObjective::Feature, schedule, seed.wrapping_add(3), log)?;
    }
    train_jscc(encoder, backbone, &mut base, data, cfg, &cfg.jscc, "jscc-base", joint, schedule, seed.wrapping_add(1), log)?;

    let mut calibration = Vec::with_capacity(cfg.prune_calibration);
    for i in 0..cfg.prune_calibration {
        let s = &data[i % data.len()];
        let f = encoder.extract(&s.cloud, &s.keypoints, &mut rng, false)?;
        let snr = jscc_cfg.snr_levels[i % jscc_cfg.snr_levels.len()];
        let rate = jscc_cfg.rates[(i / jscc_cfg.snr_levels.len()) % jscc_cfg.rates.len()];
        calibration.push((f, snr, rate));
    }
    let deviations = base.gate_deviations(&calibration, cfg.jscc_channel, &mut rng)?;
    let mut pruned = base.prune_adaptation_stages(&deviations, jscc_cfg.stages)?;
    train_jscc(encoder, backbone, &mut pruned, data, cfg, &cfg.jscc_retrain, "jscc-pruned", joint, schedule, seed.wrapping_add(2), log)?;
    Ok((pruned, deviations))
}

/// Retrains the backbone on generated triplets.
pub fn train_rd(
    backbone: &mut CpcBackbone,
    triplets: &[RdTriplet],
    cfg: &TrainingConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
    log: &mut TrainLog,
) -> Result<()> {
    let mut opt = optimizer(&backbone.params, &cfg.rd);
    run_phase("rd", &cfg.rd, triplets.len(), seed, log, |idx, lr, rng| {
        let batch: Vec<RdTriplet> = idx.iter().map(|&i| triplets[i].clone()).collect();
        let r = rd_retrain_step(backbone, &batch, schedule, cfg.segments, cfg.rd_weighting, rng)?;
        apply(&mut backbone.params, &mut opt, &r.grads, lr)?;
        Ok((r.loss, None, None))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, ShapeFamily, SyntheticShapeSpec};
    use crate::diffusion::DiffusionConfig;
    use crate::encoder::EncoderConfig;
    use crate::metrics;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_encoder_cfg() -> EncoderConfig {
        EncoderConfig {
            d1: 16,
            d2: 16,
            d: 16,
            groups: 8,
            group_size: 8,
            heads: 2,
            depth: 1,
            ffn_hidden: 16,
            ..EncoderConfig::toy()
        }
    }

    fn tiny_diffusion_cfg() -> DiffusionConfig {
        DiffusionConfig {
            steps: 24,
            widths: vec![16, 16, 3],
            ..DiffusionConfig::toy()
        }
    }

    fn tiny_jscc_cfg() -> JsccConfig {
        JsccConfig {
            d: 16,
            cond_width: 8,
            rates: vec![16, 8, 4],
            stages: StageCounts::uniform(1),
            ..JsccConfig::toy()
        }
    }

    fn samples(count: usize, n: usize, seed: u64) -> Vec<Sample> {
        let mut r = rng(seed);
        let fams = [ShapeFamily::Box, ShapeFamily::Cylinder, ShapeFamily::Cone];
        (0..count)
            .map(|i| {
                let spec = SyntheticShapeSpec::random(fams[i % 3], n, &mut r);
                let s = gen_synthetic(&spec, &mut r).unwrap();
                Sample {
                    cloud: s.cloud,
                    keypoints: s.keypoints,
                }
            })
            .collect()
    }

    #[test]
    fn segments_single_values() {
        assert_eq!(segmented_timesteps(12, 12, &mut rng(1)).unwrap(), (1..=12).collect::<Vec<_>>());
        assert!(segmented_timesteps(5, 12, &mut rng(1)).is_err());
    }

    #[test]
    fn segments_bounds_and_reproducibility() {
        let ts = segmented_timesteps(2000, 12, &mut rng(3)).unwrap();
        assert_eq!(ts.len(), 12);
        for (i, &t) in ts.iter().enumerate() {
            let k = i + 1;
            assert!(t > (k - 1) * 2000 / 12 && t <= k * 2000 / 12);
        }
        assert_eq!(ts, segmented_timesteps(2000, 12, &mut rng(3)).unwrap());
    }

    #[test]
    fn segments_uniform_chi_square() {
        let (steps, segs) = (200, 12);
        let mut r = rng(7);
        let mut counts: Vec<Vec<f64>> = (1..=segs)
            .map(|k| vec![0.0; k * steps / segs - (k - 1) * steps / segs])
            .collect();
        for _ in 0..1000 {
            for (k, t) in segmented_timesteps(steps, segs, &mut r).unwrap().into_iter().enumerate() {
                counts[k][t - ((k * steps) / segs + 1)] += 1.0;
            }
        }
        for c in &counts {
            let expected = 1000.0 / c.len() as f64;
            let stat: f64 = c.iter().map(|o| (o - expected).powi(2) / expected).sum();
            let p = 1.0 - ChiSquared::new((c.len() - 1) as f64).unwrap().cdf(stat);
            assert!(p > 0.01, "p = {p}");
        }
    }

    #[test]
    fn noise_loss_oracles() {
        let mut r = rng(2);
        let eps = standard_normal(20_000, 3, &mut r);
        let mut g = Graph::new();
        let e = g.constant(eps.clone());
        let same = g.constant(eps.clone());
        let zero = g.constant(Array2::zeros((20_000, 3)));
        let l0 = noise_prediction_loss(&mut g, same, e);
        let l3 = noise_prediction_loss(&mut g, zero, e);
        assert_eq!(g.scalar(l0), 0.0);
        // chi^2 with 3 degrees of freedom: mean 3, sd sqrt(6 / 20000).
        assert!((g.scalar(l3) - 3.0).abs() < 5.0 * (6.0f64 / 20_000.0).sqrt());
    }

    #[test]
    fn chamfer_term_matches_metric() {
        let mut r = rng(4);
        let a = standard_normal(64, 3, &mut r);
        let b = standard_normal(64, 3, &mut r);
        let mut g = Graph::new();
        let (na, nb) = (g.constant(a.clone()), g.constant(b.clone()));
        let cd = g.chamfer(na, nb, 64);
        let to_cloud = |m: &Mat| PointCloud::new(m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect());
        assert_eq!(g.scalar(cd), metrics::chamfer(&to_cloud(&a), &to_cloud(&b)).unwrap());
    }

    #[test]
    fn finetune_loss_dominates_pretrain_loss() {
        let data = samples(2, 64, 1);
        let enc = SemanticEncoder::new(&tiny_encoder_cfg(), &mut rng(1)).unwrap();
        let bb = CpcBackbone::new(&tiny_diffusion_cfg(), 16, &mut rng(2)).unwrap();
        let s = tiny_diffusion_cfg().schedule().unwrap();
        let p = pretrain_step(&enc, &bb, &data, &s, 4, &mut rng(5)).unwrap();
        for target in [FinetuneTarget::Noise, FinetuneTarget::Sample] {
            let f = finetune_step(&enc, &bb, &data, &s, 4, target, &mut rng(5)).unwrap();
            assert!(f.loss >= p.loss && p.loss >= 0.0);
        }
        // Both ends receive gradients.
        let touched: std::collections::HashSet<u64> = p.grads.param_grads().map(|(u, _, _)| u).collect();
        assert!(touched.contains(&enc.params.uid()) && touched.contains(&bb.params.uid()));
    }

    #[test]
    fn jscc_step_freezes_ends_and_reports_condition() {
        let data = samples(2, 64, 2);
        let mut enc = SemanticEncoder::new(&tiny_encoder_cfg(), &mut rng(1)).unwrap();
        let mut bb = CpcBackbone::new(&tiny_diffusion_cfg(), 16, &mut rng(2)).unwrap();
        let codec = JsccCodec::new(&tiny_jscc_cfg(), &mut rng(3)).unwrap();
        let s = tiny_diffusion_cfg().schedule().unwrap();
        let joint = JsccObjective::Joint { ddim_steps: 4, cap: None };
        let err = train_jscc_step(&enc, &bb, &codec, &data, ChannelKind::Awgn, 10.0, 8, joint, &s, &mut rng(4));
        assert!(matches!(err, Err(Error::Invariant(_))));
        enc.params.set_frozen(true);
        bb.params.set_frozen(true);
        let r = train_jscc_step(&enc, &bb, &codec, &data, ChannelKind::Rayleigh, 10.0, 8, joint, &s, &mut rng(4)).unwrap();
        assert_eq!((r.snr_db, r.rate), (Some(10.0), Some(8)));
        assert!(r.loss > 0.0);
        for (uid, _, _) in r.grads.param_grads() {
            assert_eq!(uid, codec.params.uid());
        }
    }

    #[test]
    fn chamfer_cap_drops_diverged_clouds() {
        let data = samples(3, 64, 5);
        let mut enc = SemanticEncoder::new(&tiny_encoder_cfg(), &mut rng(1)).unwrap();
        let mut bb = CpcBackbone::new(&tiny_diffusion_cfg(), 16, &mut rng(2)).unwrap();
        enc.params.set_frozen(true);
        bb.params.set_frozen(true);
        let codec = JsccCodec::new(&tiny_jscc_cfg(), &mut rng(3)).unwrap();
        let s = tiny_diffusion_cfg().schedule().unwrap();
        let run = |o| train_jscc_step(&enc, &bb, &codec, &data, ChannelKind::Awgn, 5.0, 8, o, &s, &mut rng(6)).unwrap();
        let feature = run(JsccObjective::Feature);
        let none = run(JsccObjective::Joint { ddim_steps: 3, cap: None });
        let loose = run(JsccObjective::Joint { ddim_steps: 3, cap: Some(1e12) });
        let tight = run(JsccObjective::Joint { ddim_steps: 3, cap: Some(1e-12) });
        assert!(none.loss > feature.loss);
        assert!((loose.loss - none.loss).abs() < 1e-9 * none.loss);
        assert!((tight.loss - feature.loss).abs() < 1e-12);
        let grads = |r: &StepResult| {
            let mut p = codec.params.clone();
            p.zero_grad();
            p.accumulate(&r.grads);
            p.tensors().iter().map(|t| t.grad.clone()).collect::<Vec<_>>()
        };
        for (ga, gb) in grads(&tight).iter().zip(grads(&feature).iter()) {
            assert!((ga - gb).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn jscc_training_keeps_ends_bit_identical() {
        let data = samples(4, 64, 3);
        let mut enc = SemanticEncoder::new(&tiny_encoder_cfg(), &mut rng(1)).unwrap();
        let mut bb = CpcBackbone::new(&tiny_diffusion_cfg(), 16, &mut rng(2)).unwrap();
        let mut cfg = TrainingConfig::toy();
        cfg.jscc = PhaseConfig::new(2, 2, 1e-3, 1e-4, 0);
        cfg.jscc_retrain = cfg.jscc;
        cfg.jscc_base_stages = 2;
        cfg.jscc_ddim_steps = 2;
        cfg.prune_calibration = 4;
        let s = tiny_diffusion_cfg().schedule().unwrap();
        let (fe, fb) = (enc.params.fingerprint(), bb.params.fingerprint());
        let mut log = TrainLog::default();
        let (codec, dev) = train_jscc_pruned(&mut enc, &mut bb, &tiny_jscc_cfg(), &data, &cfg, &s, 9, &mut log).unwrap();
        assert_eq!((fe, fb), (enc.params.fingerprint(), bb.params.fingerprint()));
        assert!(!enc.params.is_frozen() && !bb.params.is_frozen());
        assert_eq!(codec.net.stages(Family::Snr).len(), 1);
        assert_eq!(dev[&Family::Feature].len(), 2);
        assert_eq!(log.phase("jscc-base").count(), 4);
        assert_eq!(log.phase("jscc-pruned").count(), 4);
        let levels = tiny_jscc_cfg();
        for row in &log.rows {
            assert!(levels.snr_levels.contains(&row.snr_db.unwrap()));
            assert!(levels.rates.contains(&row.rate.unwrap()));
        }
    }

    #[test]
    fn straight_noise_reconstructs_start() {
        let s = tiny_diffusion_cfg().schedule().unwrap();
        let mut r = rng(6);
        let t = RdTriplet {
            x_t: standard_normal(32, 3, &mut r),
            x0: standard_normal(32, 3, &mut r),
            features: Array2::zeros((1, 16)),
        };
        let eps = straight_noise(&t, &s);
        let ab = s.alpha_bar(s.steps());
        let back = &t.x0 * ab.sqrt() + &eps * (1.0 - ab).sqrt();
        assert!(back.iter().zip(t.x_t.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn rd_triplets_regenerate_and_round_trip() {
        let data = samples(2, 64, 4);
        let enc = SemanticEncoder::new(&tiny_encoder_cfg(), &mut rng(1)).unwrap();
        let bb = CpcBackbone::new(&tiny_diffusion_cfg(), 16, &mut rng(2)).unwrap();
        let s = tiny_diffusion_cfg().schedule().unwrap();
        let fp = (enc.params.fingerprint(), bb.params.fingerprint());
        let trip = rd_generate(&enc, &bb, &data, 5, 6, &s, &mut rng(3)).unwrap();
        assert_eq!(fp, (enc.params.fingerprint(), bb.params.fingerprint()));
        assert_eq!(trip.len(), 5);
        for t in &trip {
            assert_eq!((t.x_t.dim(), t.x0.dim(), t.features.dim()), ((64, 3), (64, 3), (1, 16)));
            assert_eq!(round_f32(&rd_teacher_sample(&bb, &t.x_t, &t.features, 6, &s).unwrap()), t.x0);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rd.bin");
        save_triplets(&path, &trip).unwrap();
        assert_eq!(load_triplets(&path).unwrap(), trip);
        let r = rd_retrain_step(&bb, &trip[..2], &s, 4, RdWeighting::Uniform, &mut rng(1)).unwrap();
        assert!(r.loss > 0.0);
    }

    #[test]
    fn rd_loss_weightings_match_direct_computation() {
        let data = samples(2, 64, 4);
        let enc = SemanticEncoder::new(&tiny_encoder_cfg(), &mut rng(1)).unwrap();
        let bb = CpcBackbone::new(&tiny_diffusion_cfg(), 16, &mut rng(2)).unwrap();
        let s = tiny_diffusion_cfg().schedule().unwrap();
        let trip = rd_generate(&enc, &bb, &data, 3, 6, &s, &mut rng(3)).unwrap();
        let mut draws = rng(8);
        let ts: Vec<Vec<usize>> = trip.iter().map(|_| segmented_timesteps(s.steps(), 4, &mut draws).unwrap()).collect();
        // Noise error and clean-sample error per (triplet, timestep) block.
        let (mut noise, mut clean, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for (tr, tt) in trip.iter().zip(&ts) {
            let eps = straight_noise(tr, &s);
            for &t in tt {
                let x_t = q_sample(&tr.x0, t, &eps, &s).unwrap();
                let eps_hat = bb.eps_predict(&x_t, &tr.features, t, &s).unwrap();
                let ab = s.alpha_bar(t);
                let x0_hat = (&x_t - &(&eps_hat * (1.0 - ab).sqrt())) / ab.sqrt();
                noise.push((&eps_hat - &eps).mapv(|v| v * v).sum() / 64.0);
                clean.push((&x0_hat - &tr.x0).mapv(|v| v * v).sum() / 64.0);
                weights.push((1.0 - ab) / ab);
            }
        }
        let k = noise.len() as f64;
        let uniform = rd_retrain_step(&bb, &trip, &s, 4, RdWeighting::Uniform, &mut rng(8)).unwrap();
        assert!((uniform.loss - noise.iter().sum::<f64>() / k).abs() < 1e-9 * uniform.loss);
        let sample = rd_retrain_step(&bb, &trip, &s, 4, RdWeighting::Sample, &mut rng(8)).unwrap();
        let expect = clean.iter().sum::<f64>() / k / (weights.iter().sum::<f64>() / k);
        assert!((sample.loss - expect).abs() < 1e-9 * expect, "{} vs {expect}", sample.loss);
    }

    #[test]
    fn pretrain_loss_falls_on_tiny_set() {
        let data = samples(6, 64, 5);
        let mut enc = SemanticEncoder::new(&tiny_encoder_cfg(), &mut rng(1)).unwrap();
        let mut bb = CpcBackbone::new(&tiny_diffusion_cfg(), 16, &mut rng(2)).unwrap();
        let mut cfg = TrainingConfig::toy();
        cfg.pretrain = PhaseConfig::new(30, 3, 3e-3, 0.0, 1);
        cfg.segments = 6;
        let s = tiny_diffusion_cfg().schedule().unwrap();
        let mut log = TrainLog::default();
        train_diffusion(&mut enc, &mut bb, &data, &cfg, DiffusionPhase::Pretrain, &s, 1, &mut log).unwrap();
        let losses: Vec<f64> = log.phase("pretrain").map(|r| r.loss).collect();
        assert_eq!(losses.len(), 60);
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.8 * head, "{head} -> {tail}");
        // Parameters stay exactly representable in a checkpoint.
        assert!(bb.params.tensors().iter().all(|t| t.value.iter().all(|v| *v == *v as f32 as f64)));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        assert_eq!(TrainLog::read_csv(&p).unwrap(), log);
    }
}
