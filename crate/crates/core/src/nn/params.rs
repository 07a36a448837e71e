use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::Rng;

use super::graph::Grads;
use super::Mat;
use crate::error::{Error, Result};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a tensor inside one [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
}

impl ParamTensor {
    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

/// Named parameter tensors of one model component.
///
/// Every store carries a unique id so that a [`super::Graph`] can mix
/// parameters from several stores and route gradients back to the right one.
/// Cloning yields an independent store with a new id.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    tensors: Vec<ParamTensor>,
    by_name: HashMap<String, ParamId>,
    frozen: bool,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            tensors: self.tensors.clone(),
            by_name: self.by_name.clone(),
            frozen: self.frozen,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: fresh_uid(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
            frozen: false,
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Frozen stores act as constants inside a graph: gradients still flow
    /// through them but none are recorded for their tensors.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        let grad = Array2::zeros(value.dim());
        self.by_name.insert(name.clone(), id);
        self.tensors.push(ParamTensor { name, value, grad });
        id
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let v = Array2::from_shape_fn((rows, cols), |_| {
            if bound > 0.0 {
                rng.gen_range(-bound..=bound)
            } else {
                0.0
            }
        });
        self.add(name, v)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), v))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0].value
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    /// Adds this store's share of `grads` into the `.grad` buffers.
    pub fn accumulate(&mut self, grads: &Grads) {
        if self.frozen {
            return;
        }
        for (uid, pid, g) in grads.param_grads() {
            if uid == self.uid {
                self.tensors[pid.0].grad += g;
            }
        }
    }

    pub fn scale_grads(&mut self, k: f64) {
        for t in &mut self.tensors {
            t.grad *= k;
        }
    }

    /// Rounds every value to the nearest `f32`, so the store is exactly
    /// representable in a checkpoint.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.value.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Copies values from `other` by name; every tensor here must exist there
    /// with an identical shape.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for t in &mut self.tensors {
            let src = other
                .id(&t.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", t.name)))?;
            if src.value.dim() != t.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name,
                    src.value.dim(),
                    t.value.dim()
                )));
            }
            t.value.assign(&src.value);
        }
        Ok(())
    }

    /// Order-sensitive SHA-256 over names, shapes and `f64` bit patterns.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            let (r, c) = t.value.dim();
            h.update((r as u64).to_le_bytes());
            h.update((c as u64).to_le_bytes());
            for v in t.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.iter().all(|v| v.is_finite()))
    }
}
