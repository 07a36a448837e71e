//! Keypoint-aware semantic encoder.
//!
//! Pipeline: keypoint-seeded FPS centers, KNN patches (centered), random
//! patch masking, a per-point PointNet-style patch embedding, position
//! embedding of visible centers, a transformer over visible tokens, mask-token
//! interleaving in original patch order, keypoint embedding added to rows whose
//! center is a keypoint, then local/global aggregation into one `1 x d`
//! semantic feature.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{knn_group, kp_fps, random_mask, KeypointSet, PatchSet, Point3, PointCloud};
use crate::nn::{pool_tokens, Activation, Graph, Init, Mat, Mlp, NodeId, ParamId, ParamStore, PoolMode, TransformerEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Token width.
    pub d1: usize,
    /// Local-feature width.
    pub d2: usize,
    /// Semantic feature width.
    pub d: usize,
    pub groups: usize,
    pub group_size: usize,
    /// Share of patches masked (not kept).
    pub mask_fraction: f64,
    pub heads: usize,
    pub depth: usize,
    pub ffn_hidden: usize,
    pub pool: PoolMode,
    /// Keep masking when extracting features for transmission.
    pub mask_at_inference: bool,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            d1: 384,
            d2: 512,
            d: 1024,
            groups: 64,
            group_size: 32,
            mask_fraction: 0.8,
            heads: 6,
            depth: 3,
            ffn_hidden: 4 * 384,
            pool: PoolMode::Max,
            mask_at_inference: true,
        }
    }

    pub fn toy() -> Self {
        Self {
            d1: 64,
            d2: 128,
            d: 128,
            groups: 16,
            group_size: 32,
            mask_fraction: 0.8,
            heads: 2,
            depth: 2,
            ffn_hidden: 128,
            pool: PoolMode::Max,
            mask_at_inference: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d1, self.d2, self.d, self.groups, self.group_size, self.heads].contains(&0) {
            return Err(Error::config("encoder widths and counts must be positive"));
        }
        if self.d1 % self.heads != 0 {
            return Err(Error::config(format!("d1 = {} not divisible by {} heads", self.d1, self.heads)));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::config("mask_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Geometry-side encoder input: patches (with mask) plus keypoint bookkeeping.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    pub patches: PatchSet,
    pub keypoints: KeypointSet,
    /// Absolute coordinates of every keypoint.
    pub keypoint_coords: Vec<Point3>,
}

impl EncoderInput {
    /// Groups and (optionally) masks a cloud. Keypoints become mandatory centers.
    pub fn prepare<R: Rng + ?Sized>(
        cloud: &PointCloud,
        keypoints: &KeypointSet,
        cfg: &EncoderConfig,
        mask: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cloud.validate()?;
        keypoints.validate(cloud.len())?;
        let centers = kp_fps(cloud, keypoints, cfg.groups)?;
        let grouped = knn_group(cloud, &centers, cfg.group_size)?;
        let patches = if mask {
            random_mask(&grouped, cfg.mask_fraction, rng)?
        } else {
            grouped
        };
        Ok(Self {
            patches,
            keypoints: keypoints.clone(),
            keypoint_coords: keypoints.indices.iter().map(|&i| cloud.points[i]).collect(),
        })
    }
}

fn points_to_mat(points: &[Point3]) -> Mat {
    Array2::from_shape_fn((points.len(), 3), |(i, k)| points[i][k])
}

/// Layer layout of the encoder; parameters live in a separate store.
#[derive(Debug, Clone)]
pub struct EncoderNet {
    pub cfg: EncoderConfig,
    pub patch_embed: Mlp,
    pub pos_embed: Mlp,
    pub transformer: TransformerEncoder,
    pub mask_token: ParamId,
    pub keypoint_embed: Mlp,
    pub local_mlp: Mlp,
    pub global_mlp: Mlp,
}

impl EncoderNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d1, d2, d) = (cfg.d1, cfg.d2, cfg.d);
        let gelu = Activation::Gelu;
        Ok(Self {
            patch_embed: Mlp::new(store, "encoder.patch_embed", 3, d1, d1, gelu, Init::FanIn, rng),
            pos_embed: Mlp::new(store, "encoder.pos_embed", 3, d1, d1, gelu, Init::FanIn, rng),
            transformer: TransformerEncoder::new(
                store,
                "encoder.transformer",
                d1,
                cfg.heads,
                cfg.depth,
                cfg.ffn_hidden,
                rng,
            )?,
            mask_token: store.uniform("encoder.mask_token", 1, d1, 0.02, rng),
            // Output layer starts at zero: the keypoint branch begins as a no-op.
            keypoint_embed: Mlp::new(store, "encoder.keypoint_embed", 3, d1, d1, gelu, Init::Zero, rng),
            local_mlp: Mlp::new(store, "encoder.local_mlp", d1, d2, d2, gelu, Init::FanIn, rng),
            global_mlp: Mlp::new(store, "encoder.global_mlp", 2 * d2, d, d, gelu, Init::FanIn, rng),
            cfg: cfg.clone(),
        })
    }

    /// One `d1` token per patch: shared per-point MLP, then max over the
    /// patch's points.
    pub fn embed_patches<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, patches: &[&[Point3]]) -> NodeId {
        let s = patches.first().map_or(1, |p| p.len());
        let flat: Vec<Point3> = patches.iter().flat_map(|p| p.iter().copied()).collect();
        let x = g.constant(points_to_mat(&flat));
        let h = self.patch_embed.forward(g, store, x);
        g.group_max(h, s)
    }

    pub fn embed_positions<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, centers: &[Point3]) -> NodeId {
        let x = g.constant(points_to_mat(centers));
        self.pos_embed.forward(g, store, x)
    }

    /// Adds position embeddings to patch tokens and runs the transformer over
    /// the visible set only.
    pub fn encode_visible<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        tokens: NodeId,
        positions: NodeId,
    ) -> Result<NodeId> {
        if g.shape(tokens) != g.shape(positions) {
            return Err(Error::invalid(format!(
                "token shape {:?} vs position shape {:?}",
                g.shape(tokens),
                g.shape(positions)
            )));
        }
        let x = g.add(tokens, positions);
        Ok(self.transformer.forward(g, store, x))
    }

    /// Interleaves visible features with the shared mask token, following
    /// the original patch order. `visible_features` has one row per visible
    /// patch in that order, or is `None` when every patch is masked.
    pub fn assemble_tokens<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        visible_features: Option<NodeId>,
        visible: &[bool],
    ) -> Result<NodeId> {
        let v = visible.iter().filter(|f| **f).count();
        let rows = visible_features.map_or(0, |f| g.shape(f).0);
        if rows != v {
            return Err(Error::invalid(format!("{rows} visible features for {v} visible patches")));
        }
        let mask = g.param(store, self.mask_token);
        let table = match visible_features {
            Some(f) => g.concat_rows(&[f, mask]),
            None => mask,
        };
        let mut next = 0;
        let idx: Vec<usize> = visible
            .iter()
            .map(|&vis| {
                if vis {
                    next += 1;
                    next - 1
                } else {
                    v
                }
            })
            .collect();
        Ok(g.gather_rows(table, &idx))
    }

    /// Adds the keypoint embedding to every row whose patch center is a
    /// keypoint, whether that patch is visible or masked.
    pub fn add_keypoint_embedding<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        tokens: NodeId,
        center_indices: &[usize],
        keypoints: &KeypointSet,
        keypoint_coords: &[Point3],
    ) -> Result<NodeId> {
        if keypoints.is_empty() {
            return Ok(tokens);
        }
        let d1 = g.shape(tokens).1;
        let mut row_of_kp = vec![None; center_indices.len()];
        for (k, kp) in keypoints.indices.iter().enumerate() {
            let pos = center_indices
                .iter()
                .position(|c| c == kp)
                .ok_or_else(|| Error::Invariant(format!("keypoint {kp} is not a patch center")))?;
            row_of_kp[pos] = Some(k);
        }
        let coords = g.constant(points_to_mat(keypoint_coords));
        let emb = self.keypoint_embed.forward(g, store, coords);
        let zero = g.constant(Array2::zeros((1, d1)));
        let table = g.concat_rows(&[emb, zero]);
        let idx: Vec<usize> = row_of_kp.iter().map(|k| k.unwrap_or(keypoints.len())).collect();
        let spread = g.gather_rows(table, &idx);
        Ok(g.add(tokens, spread))
    }

    /// Local MLP per token, pooled global context tiled back and concatenated,
    /// a second MLP, then a final pool to `1 x d`.
    pub fn aggregate<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, tokens: NodeId) -> NodeId {
        let rows = g.shape(tokens).0;
        let local = self.local_mlp.forward(g, store, tokens);
        let global = pool_tokens(g, local, self.cfg.pool);
        let tiled = g.repeat_rows(global, rows);
        let cat = g.concat_cols(&[local, tiled]);
        let h = self.global_mlp.forward(g, store, cat);
        pool_tokens(g, h, self.cfg.pool)
    }

    /// Full encoder on a prepared input.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, input: &EncoderInput) -> Result<NodeId> {
        let ps = &input.patches;
        let vis_pos = ps.visible_positions();
        let visible_features = if vis_pos.is_empty() {
            None
        } else {
            let patches: Vec<&[Point3]> = vis_pos.iter().map(|&i| ps.patches[i].as_slice()).collect();
            let centers: Vec<Point3> = vis_pos.iter().map(|&i| ps.centers[i]).collect();
            let t = self.embed_patches(g, store, &patches);
            let e = self.embed_positions(g, store, &centers);
            Some(self.encode_visible(g, store, t, e)?)
        };
        let seq = self.assemble_tokens(g, store, visible_features, &ps.visible)?;
        let seq = self.add_keypoint_embedding(
            g,
            store,
            seq,
            &ps.center_indices,
            &input.keypoints,
            &input.keypoint_coords,
        )?;
        Ok(self.aggregate(g, store, seq))
    }
}

/// Encoder parameters plus layout.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    pub params: ParamStore,
    pub net: EncoderNet,
}

impl SemanticEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = EncoderNet::new(&mut params, cfg, rng)?;
        Ok(Self { params, net })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.net.cfg
    }

    /// Semantic feature `F_s` (a `1 x d` row) of one cloud.
    ///
    /// Training mode always masks; inference masks when
    /// [`EncoderConfig::mask_at_inference`] is set.
    pub fn extract<R: Rng + ?Sized>(
        &self,
        cloud: &PointCloud,
        keypoints: &KeypointSet,
        rng: &mut R,
        training_mode: bool,
    ) -> Result<Mat> {
        let mask = training_mode || self.net.cfg.mask_at_inference;
        let input = EncoderInput::prepare(cloud, keypoints, &self.net.cfg, mask, rng)?;
        self.extract_prepared(&input)
    }

    pub fn extract_prepared(&self, input: &EncoderInput) -> Result<Mat> {
        let mut g = Graph::new();
        let f = self.net.forward(&mut g, &self.params, input)?;
        Ok(g.value(f).clone())
    }
}
