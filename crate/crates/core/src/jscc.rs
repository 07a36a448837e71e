//! Asymmetric channel-adaptive joint source-channel codec.
//!
//! Encoder: `FC -> SNR-adaptive stages -> rate-adaptive stages -> per-rate
//! compression branch` (with a skip from the input feature). Decoder: a
//! per-length decompression branch chosen from the received length alone,
//! rate-adaptive stages, feature-adaptive stages, then an output FC plus a
//! skip from the decompressed feature. The decoder never sees the SNR.
//!
//! Every adaptation stage computes `fc(W * F)` with `W = 2 * sigmoid(...)` in
//! `(0, 2)`. Decoder stages are numbered downward (the first one applied has
//! the highest index), mirroring the encoder.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelKind, ChannelRealization, SymbolVector};
use crate::error::{Error, Result};
use crate::nn::{Gate2, Graph, Init, Linear, Mat, NodeId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageCounts {
    pub snr: usize,
    pub enc_rate: usize,
    pub dec_rate: usize,
    pub feature: usize,
}

impl StageCounts {
    pub const fn uniform(n: usize) -> Self {
        Self {
            snr: n,
            enc_rate: n,
            dec_rate: n,
            feature: n,
        }
    }

    fn get(&self, f: Family) -> usize {
        match f {
            Family::Snr => self.snr,
            Family::EncRate => self.enc_rate,
            Family::DecRate => self.dec_rate,
            Family::Feature => self.feature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsccConfig {
    pub d: usize,
    /// Width of the SNR / rate embeddings.
    pub cond_width: usize,
    /// Supported symbol counts, descending.
    pub rates: Vec<usize>,
    /// SNR levels (dB) drawn during training.
    pub snr_levels: Vec<f64>,
    pub stages: StageCounts,
}

impl JsccConfig {
    pub fn paper() -> Self {
        Self {
            d: 1024,
            cond_width: 128,
            rates: vec![1024, 896, 768, 640, 512, 384, 256, 128, 64, 32],
            snr_levels: vec![-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
            stages: StageCounts::uniform(3),
        }
    }

    /// Paper rate grid scaled by `d / 1024`.
    pub fn toy() -> Self {
        Self {
            d: 128,
            cond_width: 32,
            rates: vec![128, 112, 96, 80, 64, 48, 32, 16, 8, 4],
            snr_levels: vec![-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
            stages: StageCounts::uniform(3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.cond_width == 0 {
            return Err(Error::config("jscc widths must be positive"));
        }
        if self.rates.is_empty() {
            return Err(Error::config("rate list is empty"));
        }
        let mut sorted = self.rates.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.rates.len() {
            return Err(Error::config("rates must be distinct"));
        }
        if let Some(&r) = self.rates.iter().find(|&&r| r == 0 || r > self.d) {
            return Err(Error::config(format!("rate {r} outside 1..={}", self.d)));
        }
        let s = self.stages;
        if [s.snr, s.enc_rate, s.dec_rate, s.feature].contains(&0) {
            return Err(Error::config("every stage count must be at least 1"));
        }
        if self.snr_levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("non-finite SNR level"));
        }
        Ok(())
    }
}

/// Adaptation family, used when pruning and in parameter names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Snr,
    EncRate,
    DecRate,
    Feature,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Snr, Family::EncRate, Family::DecRate, Family::Feature];

    fn prefix(self) -> &'static str {
        match self {
            Family::Snr => "jscc.enc.sac",
            Family::EncRate => "jscc.enc.rac",
            Family::DecRate => "jscc.dec.rac",
            Family::Feature => "jscc.dec.fac",
        }
    }

    fn numbered_downward(self) -> bool {
        matches!(self, Family::DecRate | Family::Feature)
    }
}

fn stage_name(f: Family, pos: usize, count: usize) -> String {
    let k = if f.numbered_downward() { count - pos } else { pos + 1 };
    format!("{}{k}", f.prefix())
}

/// Scalar condition kind for [`JsccNet::embed_condition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionKind {
    Snr,
    EncRate,
    DecRate,
}

/// One adaptation stage: `fc(gate(cond) * F)`.
#[derive(Debug, Clone)]
pub struct AdaptStage {
    pub gate: Gate2,
    pub fc: Linear,
}

impl AdaptStage {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cond: usize, d: usize, rng: &mut R) -> Self {
        Self {
            gate: Gate2::new(store, &format!("{name}.gate"), cond, d, rng),
            fc: Linear::new(store, &format!("{name}.fc"), d, d, true, Init::FanIn, rng),
        }
    }

    /// `cond` is either one row shared by the batch or one row per batch row.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, f: NodeId, cond: NodeId) -> NodeId {
        let w = self.gate.forward(g, store, cond);
        let m = if g.shape(w).0 == 1 && g.shape(f).0 != 1 {
            g.mul_row(f, w)
        } else {
            g.mul(f, w)
        };
        self.fc.forward(g, store, m)
    }

    fn copy_from(&self, dst: &mut ParamStore, src_stage: &AdaptStage, src: &ParamStore) {
        let pairs = [
            (self.gate.lin.w, src_stage.gate.lin.w),
            (self.gate.lin.b.expect("gate bias"), src_stage.gate.lin.b.expect("gate bias")),
            (self.fc.w, src_stage.fc.w),
            (self.fc.b.expect("fc bias"), src_stage.fc.b.expect("fc bias")),
        ];
        for (d, s) in pairs {
            dst.get_mut(d).value.assign(src.value(s));
        }
    }
}

#[derive(Debug, Clone)]
pub struct JsccNet {
    pub cfg: JsccConfig,
    pub enc_in: Linear,
    pub snr_embed: Linear,
    pub sac: Vec<AdaptStage>,
    pub enc_rate_embed: Linear,
    pub enc_rac: Vec<AdaptStage>,
    pub enc_branches: BTreeMap<usize, Linear>,
    pub dec_branches: BTreeMap<usize, Linear>,
    pub dec_rate_embed: Linear,
    pub dec_rac: Vec<AdaptStage>,
    /// Gates conditioned on the feature itself.
    pub fac: Vec<AdaptStage>,
    pub dec_out: Linear,
}

impl JsccNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &JsccConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, l) = (cfg.d, cfg.cond_width);
        let stages = |store: &mut ParamStore, f: Family, cond: usize, rng: &mut R| -> Vec<AdaptStage> {
            let n = cfg.stages.get(f);
            (0..n).map(|p| AdaptStage::new(store, &stage_name(f, p, n), cond, d, rng)).collect()
        };
        let enc_in = Linear::new(store, "jscc.enc.in", d, d, true, Init::FanIn, rng);
        let snr_embed = Linear::new(store, "jscc.enc.snr_embed", 1, l, true, Init::FanIn, rng);
        let sac = stages(store, Family::Snr, l, rng);
        let enc_rate_embed = Linear::new(store, "jscc.enc.rate_embed", 1, l, true, Init::FanIn, rng);
        let enc_rac = stages(store, Family::EncRate, l, rng);
        let enc_branches = cfg
            .rates
            .iter()
            .map(|&r| (r, Linear::new(store, &format!("jscc.enc.cmbc.r{r}"), d, r, true, Init::FanIn, rng)))
            .collect();
        let dec_branches = cfg
            .rates
            .iter()
            .map(|&r| (r, Linear::new(store, &format!("jscc.dec.cmbc.r{r}"), r, d, true, Init::FanIn, rng)))
            .collect();
        let dec_rate_embed = Linear::new(store, "jscc.dec.rate_embed", 1, l, true, Init::FanIn, rng);
        let dec_rac = stages(store, Family::DecRate, l, rng);
        let fac = stages(store, Family::Feature, d, rng);
        let dec_out = Linear::new(store, "jscc.dec.out", d, d, true, Init::FanIn, rng);
        Ok(Self {
            cfg: cfg.clone(),
            enc_in,
            snr_embed,
            sac,
            enc_rate_embed,
            enc_rac,
            enc_branches,
            dec_branches,
            dec_rate_embed,
            dec_rac,
            fac,
            dec_out,
        })
    }

    pub fn stages(&self, f: Family) -> &[AdaptStage] {
        match f {
            Family::Snr => &self.sac,
            Family::EncRate => &self.enc_rac,
            Family::DecRate => &self.dec_rac,
            Family::Feature => &self.fac,
        }
    }

    /// Rate-conditioning scalar: symbol count over feature width.
    pub fn rate_value(&self, rate: usize) -> f64 {
        rate as f64 / self.cfg.d as f64
    }

    fn check_rate(&self, rate: usize) -> Result<()> {
        if self.enc_branches.contains_key(&rate) {
            Ok(())
        } else {
            Err(Error::UnsupportedRate {
                rate,
                available: self.cfg.rates.clone(),
            })
        }
    }

    /// `GELU(linear(value))`, one `1 x L` row. Rates are passed already
    /// normalized (see [`JsccNet::rate_value`]).
    pub fn embed_condition<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, value: f64, kind: ConditionKind) -> NodeId {
        let lin = match kind {
            ConditionKind::Snr => &self.snr_embed,
            ConditionKind::EncRate => &self.enc_rate_embed,
            ConditionKind::DecRate => &self.dec_rate_embed,
        };
        let x = g.constant(Array2::from_elem((1, 1), value));
        let h = lin.forward(g, store, x);
        g.gelu(h)
    }

    pub fn sac_forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, i: usize, f: NodeId, snr_db: f64) -> NodeId {
        let c = self.embed_condition(g, store, snr_db, ConditionKind::Snr);
        self.sac[i].forward(g, store, f, c)
    }

    pub fn rac_forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        encoder_side: bool,
        i: usize,
        f: NodeId,
        rate: usize,
    ) -> NodeId {
        let kind = if encoder_side { ConditionKind::EncRate } else { ConditionKind::DecRate };
        let c = self.embed_condition(g, store, self.rate_value(rate), kind);
        let stage = if encoder_side { &self.enc_rac[i] } else { &self.dec_rac[i] };
        stage.forward(g, store, f, c)
    }

    pub fn fac_forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, i: usize, f: NodeId) -> NodeId {
        self.fac[i].forward(g, store, f, f)
    }

    pub fn cmbc_encode<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        f: NodeId,
        skip: NodeId,
        rate: usize,
    ) -> Result<NodeId> {
        self.check_rate(rate)?;
        let x = g.add(f, skip);
        Ok(self.enc_branches[&rate].forward(g, store, x))
    }

    /// Branch chosen by the received width.
    pub fn cmbc_decode<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, received: NodeId) -> Result<NodeId> {
        let rate = g.shape(received).1;
        let branch = self.dec_branches.get(&rate).ok_or_else(|| Error::UnsupportedRate {
            rate,
            available: self.cfg.rates.clone(),
        })?;
        Ok(branch.forward(g, store, received))
    }

    /// Rows of `f_s` are independent features sharing one SNR and rate.
    pub fn encode<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        f_s: NodeId,
        snr_db: f64,
        rate: usize,
    ) -> Result<NodeId> {
        self.check_rate(rate)?;
        if g.shape(f_s).1 != self.cfg.d {
            return Err(Error::invalid(format!("feature width {} != {}", g.shape(f_s).1, self.cfg.d)));
        }
        let mut f = self.enc_in.forward(g, store, f_s);
        if !self.sac.is_empty() {
            let c = self.embed_condition(g, store, snr_db, ConditionKind::Snr);
            for s in &self.sac {
                f = s.forward(g, store, f, c);
            }
        }
        if !self.enc_rac.is_empty() {
            let c = self.embed_condition(g, store, self.rate_value(rate), ConditionKind::EncRate);
            for s in &self.enc_rac {
                f = s.forward(g, store, f, c);
            }
        }
        self.cmbc_encode(g, store, f, f_s, rate)
    }

    pub fn decode<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, received: NodeId) -> Result<NodeId> {
        let rate = g.shape(received).1;
        let post = self.cmbc_decode(g, store, received)?;
        let mut f = post;
        if !self.dec_rac.is_empty() {
            let c = self.embed_condition(g, store, self.rate_value(rate), ConditionKind::DecRate);
            for s in &self.dec_rac {
                f = s.forward(g, store, f, c);
            }
        }
        for s in &self.fac {
            f = s.forward(g, store, f, f);
        }
        let out = self.dec_out.forward(g, store, f);
        Ok(g.add(out, post))
    }
}

/// Codec parameters plus layout.
#[derive(Debug, Clone)]
pub struct JsccCodec {
    pub params: ParamStore,
    pub net: JsccNet,
}

impl JsccCodec {
    pub fn new<R: Rng + ?Sized>(cfg: &JsccConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = JsccNet::new(&mut params, cfg, rng)?;
        Ok(Self { params, net })
    }

    pub fn config(&self) -> &JsccConfig {
        &self.net.cfg
    }

    pub fn encode(&self, f_s: &Mat, snr_db: f64, rate: usize) -> Result<SymbolVector> {
        if f_s.nrows() != 1 {
            return Err(Error::invalid("expected a single 1 x d feature"));
        }
        let mut g = Graph::new();
        let x = g.constant(f_s.clone());
        let s = self.net.encode(&mut g, &self.params, x, snr_db, rate)?;
        Ok(SymbolVector::new(g.value(s).iter().copied().collect()))
    }

    /// Pure function of the received vector and the parameters.
    pub fn decode(&self, received: &SymbolVector) -> Result<Mat> {
        let mut g = Graph::new();
        let x = g.constant(Array2::from_shape_vec((1, received.len()), received.symbols.clone()).expect("row"));
        let f = self.net.decode(&mut g, &self.params, x)?;
        Ok(g.value(f).clone())
    }

    /// Mean `|W - 1|` per stage of every family, averaged over calibration
    /// transmissions `(feature, snr_db, rate)` sent through `kind`.
    pub fn gate_deviations<R: Rng + ?Sized>(
        &self,
        calibration: &[(Mat, f64, usize)],
        kind: ChannelKind,
        rng: &mut R,
    ) -> Result<BTreeMap<Family, Vec<f64>>> {
        let mut sums: BTreeMap<Family, Vec<f64>> =
            Family::ALL.iter().map(|&f| (f, vec![0.0; self.net.stages(f).len()])).collect();
        let dev = |w: &Mat| w.iter().map(|v| (v - 1.0).abs()).sum::<f64>() / w.len() as f64;
        for (feature, snr, rate) in calibration {
            let net = &self.net;
            let store = &self.params;
            let mut g = Graph::new();
            let x = g.constant(feature.clone());
            let mut f = net.enc_in.forward(&mut g, store, x);
            let c = net.embed_condition(&mut g, store, *snr, ConditionKind::Snr);
            for (k, s) in net.sac.iter().enumerate() {
                let w = s.gate.forward(&mut g, store, c);
                sums.get_mut(&Family::Snr).unwrap()[k] += dev(g.value(w));
                f = s.forward(&mut g, store, f, c);
            }
            let c = net.embed_condition(&mut g, store, net.rate_value(*rate), ConditionKind::EncRate);
            for (k, s) in net.enc_rac.iter().enumerate() {
                let w = s.gate.forward(&mut g, store, c);
                sums.get_mut(&Family::EncRate).unwrap()[k] += dev(g.value(w));
                f = s.forward(&mut g, store, f, c);
            }
            let sent = net.cmbc_encode(&mut g, store, f, x, *rate)?;
            let sent = SymbolVector::new(g.value(sent).iter().copied().collect());
            let received = ChannelRealization::draw(kind, &sent, *snr, rng)?.apply(&sent);
            let rx = g.constant(Array2::from_shape_vec((1, received.len()), received.symbols).expect("row"));
            let mut f = net.cmbc_decode(&mut g, store, rx)?;
            let c = net.embed_condition(&mut g, store, net.rate_value(*rate), ConditionKind::DecRate);
            for (k, s) in net.dec_rac.iter().enumerate() {
                let w = s.gate.forward(&mut g, store, c);
                sums.get_mut(&Family::DecRate).unwrap()[k] += dev(g.value(w));
                f = s.forward(&mut g, store, f, c);
            }
            for (k, s) in net.fac.iter().enumerate() {
                let w = s.gate.forward(&mut g, store, f);
                sums.get_mut(&Family::Feature).unwrap()[k] += dev(g.value(w));
                f = s.forward(&mut g, store, f, f);
            }
        }
        let n = calibration.len().max(1) as f64;
        for v in sums.values_mut() {
            v.iter_mut().for_each(|x| *x /= n);
        }
        Ok(sums)
    }

    /// Keeps, per family, the `target` stages whose gates deviate most from
    /// identity (ties favor earlier stages), preserving their relative order.
    pub fn prune_adaptation_stages(&self, deviations: &BTreeMap<Family, Vec<f64>>, target: StageCounts) -> Result<Self> {
        let mut kept: BTreeMap<Family, Vec<usize>> = BTreeMap::new();
        for f in Family::ALL {
            let have = self.net.stages(f).len();
            let want = target.get(f);
            if want == 0 || want > have {
                return Err(Error::config(format!("cannot prune {f:?} from {have} to {want} stages")));
            }
            let dev = deviations
                .get(&f)
                .filter(|d| d.len() == have)
                .ok_or_else(|| Error::invalid(format!("missing deviations for {f:?}")))?;
            let mut order: Vec<usize> = (0..have).collect();
            order.sort_by(|&a, &b| dev[b].total_cmp(&dev[a]).then(a.cmp(&b)));
            let mut keep = order[..want].to_vec();
            keep.sort_unstable();
            kept.insert(f, keep);
        }
        let mut cfg = self.net.cfg.clone();
        cfg.stages = target;
        let mut params = ParamStore::new();
        let net = JsccNet::new(&mut params, &cfg, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        // Shared tensors keep their names; stage tensors move by position.
        let stage_prefixes: Vec<&str> = Family::ALL.iter().map(|f| f.prefix()).collect();
        for t in params.tensors_mut() {
            if stage_prefixes.iter().any(|p| t.name.starts_with(p)) {
                continue;
            }
            let src = self.params.id(&t.name).ok_or_else(|| Error::Invariant(format!("{} missing", t.name)))?;
            t.value.assign(self.params.value(src));
        }
        for f in Family::ALL {
            for (new_pos, &old_pos) in kept[&f].iter().enumerate() {
                net.stages(f)[new_pos].copy_from(&mut params, &self.net.stages(f)[old_pos], &self.params);
            }
        }
        Ok(Self { params, net })
    }
}
