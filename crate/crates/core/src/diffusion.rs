//! Conditioned point-cloud diffusion: noise schedule, forward corruption,
//! the gated noise-prediction backbone and the DDPM / DDIM samplers.
//!
//! Point rows are independent given the condition, so a batch of clouds is a
//! stack of `rows_per_cond`-row blocks, one condition row per block.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Gate2, Graph, Init, Linear, Mat, NodeId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear `beta` from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::config(format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start))
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())))
        } else {
            Ok(())
        }
    }

    /// Panics if `t` is outside `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `alpha_bar(0)` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &Mat, t: usize, eps: &Mat, schedule: &DiffusionSchedule) -> Result<Mat> {
    schedule.check(t)?;
    if x0.dim() != eps.dim() {
        return Err(Error::invalid(format!("x0 {:?} vs eps {:?}", x0.dim(), eps.dim())));
    }
    let ab = schedule.alpha_bar(t);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// `[beta_t, sin beta_t, cos beta_t]`.
pub fn time_embed(t: usize, schedule: &DiffusionSchedule) -> Result<[f64; 3]> {
    schedule.check(t)?;
    let b = schedule.beta(t);
    Ok([b, b.sin(), b.cos()])
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Output width of each block; the last must be 3.
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
    /// Per-coordinate clamp on the clean-sample estimate inside DDIM steps.
    #[serde(default)]
    pub x0_clip: Option<f64>,
}

impl DiffusionConfig {
    pub fn paper() -> Self {
        Self {
            steps: 2000,
            beta_start: 1e-4,
            beta_end: 1e-2,
            widths: vec![128, 256, 512, 256, 128, 3],
            leaky_slope: 0.1,
            x0_clip: Some(1.0),
        }
    }

    pub fn toy() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.1,
            widths: vec![64, 128, 128, 64, 3],
            leaky_slope: 0.1,
            x0_clip: Some(1.0),
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.widths.last() != Some(&3) || self.widths.contains(&0) {
            return Err(Error::config("backbone widths must be positive and end in 3"));
        }
        if self.x0_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("x0_clip must be positive"));
        }
        Ok(())
    }
}

/// `H = Gate(c) * Trunk(H_prev) + Bias(c)` with `Gate = 2 sigmoid(linear)`.
#[derive(Debug, Clone)]
pub struct CpcBlock {
    pub trunk: Linear,
    pub gate: Gate2,
    pub bias: Linear,
}

impl CpcBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, w_in: usize, w_out: usize, cond: usize, rng: &mut R) -> Self {
        Self {
            trunk: Linear::new(store, &format!("{name}.trunk"), w_in, w_out, false, Init::FanIn, rng),
            gate: Gate2::new(store, &format!("{name}.gate"), cond, w_out, rng),
            bias: Linear::new(store, &format!("{name}.bias"), cond, w_out, true, Init::FanIn, rng),
        }
    }

    /// `h`: `C * rows_per_cond` rows; `cond`: `C` rows.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        h: NodeId,
        cond: NodeId,
        rows_per_cond: usize,
    ) -> Result<NodeId> {
        let (rows, w) = g.shape(h);
        let (c, cw) = g.shape(cond);
        if w != self.trunk.d_in || cw != self.bias.d_in {
            return Err(Error::invalid(format!(
                "block expects widths ({}, {}), got ({w}, {cw})",
                self.trunk.d_in, self.bias.d_in
            )));
        }
        if c * rows_per_cond != rows {
            return Err(Error::invalid(format!("{rows} rows for {c} conditions of {rows_per_cond}")));
        }
        let x = self.trunk.forward(g, store, h);
        let gate = self.gate.forward(g, store, cond);
        let bias = self.bias.forward(g, store, cond);
        Ok(if c == 1 {
            let y = g.mul_row(x, gate);
            g.add_row(y, bias)
        } else {
            let gate = g.repeat_rows(gate, rows_per_cond);
            let bias = g.repeat_rows(bias, rows_per_cond);
            let y = g.mul(x, gate);
            g.add(y, bias)
        })
    }
}

#[derive(Debug, Clone)]
pub struct CpcNet {
    pub cfg: DiffusionConfig,
    pub feature_width: usize,
    pub blocks: Vec<CpcBlock>,
}

impl CpcNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DiffusionConfig, feature_width: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let cond = feature_width + 3;
        let mut w_in = 3;
        let blocks = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let b = CpcBlock::new(store, &format!("backbone.block{i}"), w_in, w, cond, rng);
                w_in = w;
                b
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            feature_width,
            blocks,
        })
    }

    /// Leaky ReLU between blocks, none after the last.
    pub fn eps_predict<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x_t: NodeId,
        cond: NodeId,
        rows_per_cond: usize,
    ) -> Result<NodeId> {
        let act = Activation::LeakyRelu(self.cfg.leaky_slope);
        let mut h = x_t;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(g, store, h, cond, rows_per_cond)?;
            if i + 1 < self.blocks.len() {
                h = act.apply(g, h);
            }
        }
        Ok(h)
    }

    /// `[F_s, t_bar]` rows for each feature row.
    pub fn condition<'a>(
        &self,
        g: &mut Graph<'a>,
        features: NodeId,
        t: usize,
        schedule: &DiffusionSchedule,
    ) -> Result<NodeId> {
        let tb = time_embed(t, schedule)?;
        let c = g.shape(features).0;
        let tnode = g.constant(Array2::from_shape_fn((c, 3), |(_, k)| tb[k]));
        Ok(g.concat_cols(&[features, tnode]))
    }

    /// Like [`CpcNet::condition`] with one timestep per feature row.
    pub fn condition_per_row<'a>(
        &self,
        g: &mut Graph<'a>,
        features: NodeId,
        ts: &[usize],
        schedule: &DiffusionSchedule,
    ) -> Result<NodeId> {
        let mut rows = Array2::zeros((ts.len(), 3));
        for (i, &t) in ts.iter().enumerate() {
            let tb = time_embed(t, schedule)?;
            for k in 0..3 {
                rows[[i, k]] = tb[k];
            }
        }
        let tnode = g.constant(rows);
        Ok(g.concat_cols(&[features, tnode]))
    }

    /// Deterministic DDIM unrolled on the tape, for training through the
    /// sampler. `features` holds one row per cloud; `x_t` stacks the clouds.
    pub fn ddim_on_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        features: NodeId,
        x_t: Mat,
        taus: &[usize],
        schedule: &DiffusionSchedule,
    ) -> Result<NodeId> {
        let c = g.shape(features).0;
        let n = x_t.nrows() / c.max(1);
        let mut x = g.constant(x_t);
        for i in (0..taus.len()).rev() {
            let t = taus[i];
            let prev = if i == 0 { 0 } else { taus[i - 1] };
            let (ab, abp) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
            let cond = self.condition(g, features, t, schedule)?;
            let eps = self.eps_predict(g, store, x, cond, n)?;
            // x_prev = sqrt(abp) (x - sqrt(1-ab) eps) / sqrt(ab) + sqrt(1-abp) eps
            let k = (abp / ab).sqrt();
            let xs = g.scale(x, k);
            let ke = (1.0 - abp).sqrt() - k * (1.0 - ab).sqrt();
            let es = g.scale(eps, ke);
            x = g.add(xs, es);
        }
        Ok(x)
    }
}

/// Backbone parameters plus layout.
#[derive(Debug, Clone)]
pub struct CpcBackbone {
    pub params: ParamStore,
    pub net: CpcNet,
}

impl CpcBackbone {
    pub fn new<R: Rng + ?Sized>(cfg: &DiffusionConfig, feature_width: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = CpcNet::new(&mut params, cfg, feature_width, rng)?;
        Ok(Self { params, net })
    }

    /// Noise prediction for stacked clouds `x_t` (`features.nrows()` blocks).
    pub fn eps_predict(&self, x_t: &Mat, features: &Mat, t: usize, schedule: &DiffusionSchedule) -> Result<Mat> {
        let c = features.nrows();
        if c == 0 || x_t.nrows() % c != 0 || x_t.ncols() != 3 {
            return Err(Error::invalid(format!("x_t {:?} for {c} conditions", x_t.dim())));
        }
        if features.ncols() != self.net.feature_width {
            return Err(Error::invalid(format!("feature width {} != {}", features.ncols(), self.net.feature_width)));
        }
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let cond = self.net.condition(&mut g, f, t, schedule)?;
        let x = g.constant(x_t.clone());
        let out = self.net.eps_predict(&mut g, &self.params, x, cond, x_t.nrows() / c)?;
        Ok(g.value(out).clone())
    }

    /// Binds features and schedule into a sampler-ready predictor.
    pub fn conditioned<'m>(&'m self, features: &'m Mat, schedule: &'m DiffusionSchedule) -> Conditioned<'m> {
        Conditioned {
            backbone: self,
            features,
            schedule,
        }
    }
}

/// Anything that predicts the noise in `x_t` at step `t`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Mat, t: usize) -> Result<Mat>;
}

impl<F: Fn(&Mat, usize) -> Mat> NoisePredictor for F {
    fn predict(&self, x_t: &Mat, t: usize) -> Result<Mat> {
        Ok(self(x_t, t))
    }
}

pub struct Conditioned<'m> {
    backbone: &'m CpcBackbone,
    features: &'m Mat,
    schedule: &'m DiffusionSchedule,
}

impl NoisePredictor for Conditioned<'_> {
    fn predict(&self, x_t: &Mat, t: usize) -> Result<Mat> {
        self.backbone.eps_predict(x_t, self.features, t, self.schedule)
    }
}

/// Per-step variance of ancestral sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DdpmVariance {
    /// `sigma_t^2 = beta_t`.
    #[default]
    Beta,
    /// `sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) beta_t`.
    Posterior,
}

fn finite_or_diverged(x: &Mat, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::SamplingDivergence { step })
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` with `rows` points.
pub fn ddpm_sample<P: NoisePredictor, R: Rng + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    rows: usize,
    variance: DdpmVariance,
    rng: &mut R,
) -> Result<Mat> {
    let x_t = standard_normal(rows, 3, rng);
    ddpm_sample_from(model, schedule, x_t, variance, rng, None)
}

/// Runs `t = T..1` from a given `x_T`. With `trace`, every `x_{t-1}` is
/// recorded (so `trace[k]` is `x_{T-1-k}`).
pub fn ddpm_sample_from<P: NoisePredictor, R: Rng + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    mut x: Mat,
    variance: DdpmVariance,
    rng: &mut R,
    mut trace: Option<&mut Vec<Mat>>,
) -> Result<Mat> {
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict(&x, t)?;
        let (a, ab, b) = (schedule.alpha(t), schedule.alpha_bar(t), schedule.beta(t));
        let mut next = (&x - &(eps * (b / (1.0 - ab).sqrt()))) / a.sqrt();
        if t > 1 {
            let var = match variance {
                DdpmVariance::Beta => b,
                DdpmVariance::Posterior => schedule.posterior_variance(t),
            };
            let z = standard_normal(x.nrows(), 3, rng);
            next.scaled_add(var.sqrt(), &z);
        }
        finite_or_diverged(&next, t)?;
        x = next;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(x.clone());
        }
    }
    Ok(x)
}

/// `S` evenly spaced steps `floor(i T / S)`, `i = 1..=S`.
pub fn make_subsequence(steps: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > steps {
        return Err(Error::config(format!("subsequence length {count} outside 1..={steps}")));
    }
    Ok((1..=count).map(|i| i * steps / count).collect())
}

/// Noise level of each DDIM step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    #[default]
    Deterministic,
    /// Posterior variance of the skipped step, so the full subsequence
    /// reproduces ancestral sampling.
    DdpmMatched,
    /// Multiple of the matched standard deviation.
    Eta(f64),
}

fn ddim_sigma2(mode: SigmaMode, ab: f64, abp: f64) -> f64 {
    let matched = (1.0 - abp) / (1.0 - ab) * (1.0 - ab / abp);
    match mode {
        SigmaMode::Deterministic => 0.0,
        SigmaMode::DdpmMatched => matched,
        SigmaMode::Eta(eta) => eta * eta * matched,
    }
}

/// Rejects subsequences and sigma modes that make a step ill-defined.
pub fn validate_ddim(schedule: &DiffusionSchedule, taus: &[usize], mode: SigmaMode) -> Result<()> {
    if taus.is_empty() || taus.windows(2).any(|w| w[0] >= w[1]) || taus[0] == 0 || *taus.last().unwrap() > schedule.steps() {
        return Err(Error::config("subsequence must be strictly increasing within 1..=T"));
    }
    for i in 0..taus.len() {
        let prev = if i == 0 { 0 } else { taus[i - 1] };
        let (ab, abp) = (schedule.alpha_bar(taus[i]), schedule.alpha_bar(prev));
        let s2 = ddim_sigma2(mode, ab, abp);
        if !(s2 >= 0.0) || s2 > 1.0 - abp + 1e-15 {
            return Err(Error::config(format!("sigma^2 = {s2} exceeds 1 - abar = {} at step {}", 1.0 - abp, taus[i])));
        }
    }
    Ok(())
}

pub fn ddim_sample<P: NoisePredictor, R: Rng + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    taus: &[usize],
    mode: SigmaMode,
    clip: Option<f64>,
    rows: usize,
    rng: &mut R,
) -> Result<Mat> {
    validate_ddim(schedule, taus, mode)?;
    let x_t = standard_normal(rows, 3, rng);
    ddim_sample_from(model, schedule, taus, mode, clip, x_t, rng, None)
}

/// Runs the subsequence downward from a given `x_T`. The last step maps to
/// the `x_0` estimate (`abar_0 = 1`). Noise is drawn only on non-final steps
/// of stochastic modes, in the same order as [`ddpm_sample_from`]. With
/// `clip`, the `x_0` estimate is clamped and the noise re-derived from it.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample_from<P: NoisePredictor, R: Rng + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    taus: &[usize],
    mode: SigmaMode,
    clip: Option<f64>,
    mut x: Mat,
    rng: &mut R,
    mut trace: Option<&mut Vec<Mat>>,
) -> Result<Mat> {
    validate_ddim(schedule, taus, mode)?;
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let prev = if i == 0 { 0 } else { taus[i - 1] };
        let (ab, abp) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        let s2 = ddim_sigma2(mode, ab, abp);
        let mut eps = model.predict(&x, t)?;
        let mut x0 = (&x - &(&eps * (1.0 - ab).sqrt())) / ab.sqrt();
        if let Some(c) = clip {
            x0.mapv_inplace(|v| v.clamp(-c, c));
            eps = (&x - &(&x0 * ab.sqrt())) / (1.0 - ab).sqrt();
        }
        let mut next = x0 * abp.sqrt();
        next.scaled_add((1.0 - abp - s2).max(0.0).sqrt(), &eps);
        if prev > 0 && mode != SigmaMode::Deterministic {
            let z = standard_normal(x.nrows(), 3, rng);
            next.scaled_add(s2.sqrt(), &z);
        }
        finite_or_diverged(&next, t)?;
        x = next;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(x.clone());
        }
    }
    Ok(x)
}

/// Row-stacks equal-size clouds.
pub fn stack_rows(parts: &[Mat]) -> Mat {
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}
