//! Central-difference gradient checking for any block built on [`Graph`].

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::Mat;

/// Entries probed per tensor; larger tensors are sampled.
const MAX_PROBES: usize = 48;

fn reduce<'a>(g: &mut Graph<'a>, out: NodeId, weights: &Mat) -> NodeId {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w);
    g.sum(p)
}

fn probes(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_PROBES {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, MAX_PROBES).into_vec()
    }
}

/// Compares the reverse-mode gradient of a random linear functional of the
/// block output against central differences with step `eps`, both for the
/// inputs and for every tensor of `store`.
///
/// Returns the largest per-tensor error `|analytic - numeric|_inf /
/// max(|analytic|_inf, |numeric|_inf, 1e-3 * global scale)`.
pub fn grad_check<F>(store: &mut ParamStore, inputs: &[Mat], build: F, eps: f64) -> f64
where
    F: for<'a> Fn(&'a ParamStore, &mut Graph<'a>, &[NodeId]) -> NodeId,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(store, &mut g, &ids);
        g.shape(out)
    };
    let weights = Array2::from_shape_fn(out_shape, |_| rng.gen_range(-1.0..1.0));

    let loss_at = |store: &ParamStore, inputs: &[Mat]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(store, &mut g, &ids);
        let l = reduce(&mut g, out, &weights);
        g.scalar(l)
    };

    // Analytic pass.
    let (input_grads, param_grads): (Vec<Mat>, Vec<Mat>) = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| g.variable(x.clone())).collect();
        let out = build(store, &mut g, &ids);
        let l = reduce(&mut g, out, &weights);
        let grads = g.backward(l);
        let ig = ids
            .iter()
            .zip(inputs)
            .map(|(id, x)| grads.wrt(*id).cloned().unwrap_or_else(|| Array2::zeros(x.dim())))
            .collect();
        let mut pg: Vec<Mat> = store.tensors().iter().map(|t| Array2::zeros(t.value.dim())).collect();
        for (uid, pid, gm) in grads.param_grads() {
            if uid == store.uid() {
                pg[pid.0] = gm.clone();
            }
        }
        (ig, pg)
    };

    // Numeric pass: (analytic, numeric) pairs per tensor.
    let mut pairs: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut xs: Vec<Mat> = inputs.to_vec();
    for (k, ag) in input_grads.iter().enumerate() {
        let mut pts = Vec::new();
        for flat in probes(xs[k].len(), &mut rng) {
            let idx = (flat / xs[k].ncols(), flat % xs[k].ncols());
            let orig = xs[k][idx];
            xs[k][idx] = orig + eps;
            let up = loss_at(store, &xs);
            xs[k][idx] = orig - eps;
            let down = loss_at(store, &xs);
            xs[k][idx] = orig;
            pts.push((ag[idx], (up - down) / (2.0 * eps)));
        }
        pairs.push(pts);
    }
    for (t, ag) in param_grads.iter().enumerate() {
        let mut pts = Vec::new();
        let cols = ag.ncols();
        for flat in probes(ag.len(), &mut rng) {
            let idx = (flat / cols, flat % cols);
            let orig = store.tensors()[t].value[idx];
            store.tensors_mut()[t].value[idx] = orig + eps;
            let up = loss_at(store, &xs);
            store.tensors_mut()[t].value[idx] = orig - eps;
            let down = loss_at(store, &xs);
            store.tensors_mut()[t].value[idx] = orig;
            pts.push((ag[idx], (up - down) / (2.0 * eps)));
        }
        pairs.push(pts);
    }

    let inf = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0_f64, |m, v| m.max(v.abs()));
    let global = pairs
        .iter()
        .flat_map(|p| p.iter().flat_map(|(a, n)| [*a, *n]))
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    pairs
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| {
            let diff = inf(&mut p.iter().map(|(a, n)| a - n));
            let scale = inf(&mut p.iter().map(|(a, _)| *a))
                .max(inf(&mut p.iter().map(|(_, n)| *n)))
                .max(1e-3 * global)
                .max(f64::MIN_POSITIVE);
            diff / scale
        })
        .fold(0.0, f64::max)
}
