use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Pointwise nonlinearity between layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Gelu,
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Identity => x,
        }
    }
}

/// How the initial weights of a layer are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and bias.
    FanIn,
    Zero,
}

/// `y = x W + b` applied to every row of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let bound = match init {
            Init::FanIn => 1.0 / (d_in as f64).sqrt(),
            Init::Zero => 0.0,
        };
        let w = store.uniform(format!("{name}.weight"), d_in, d_out, bound, rng);
        let b = bias.then(|| store.uniform(format!("{name}.bias"), 1, d_out, bound, rng));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    /// Shape-checked forward for callers handing in external data.
    pub fn try_forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId) -> Result<NodeId> {
        let (_, c) = g.shape(x);
        if c != self.d_in {
            return Err(Error::invalid(format!("linear expects width {}, got {c}", self.d_in)));
        }
        Ok(self.forward(g, store, x))
    }
}

/// Two linear layers with a nonlinearity between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        act: Activation,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, true, Init::FanIn, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, true, out_init, rng),
            act,
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId) -> NodeId {
        let h = self.l1.forward(g, store, x);
        let h = self.act.apply(g, h);
        self.l2.forward(g, store, h)
    }
}

/// `2 * sigmoid(linear(cond))`: modulation weights in `(0, 2)`, equal to 1
/// when the pre-activation is zero.
#[derive(Debug, Clone)]
pub struct Gate2 {
    pub lin: Linear,
}

impl Gate2 {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            lin: Linear::new(store, name, d_in, d_out, true, Init::FanIn, rng),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, cond: NodeId) -> NodeId {
        let z = self.lin.forward(g, store, cond);
        let s = g.sigmoid(z);
        g.scale(s, 2.0)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.filled(format!("{name}.gamma"), 1, d, 1.0),
            beta: store.zeros(format!("{name}.beta"), 1, d),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId) -> NodeId {
        let n = g.layer_norm_rows(x, 1e-5);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// Pre-norm encoder layer: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
    pub width: usize,
    pub heads: usize,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        depth: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!("width {width} not divisible by {heads} heads")));
        }
        let layers = (0..depth)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                TransformerLayer {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), width),
                    q: Linear::new(store, &format!("{n}.q"), width, width, true, Init::FanIn, rng),
                    k: Linear::new(store, &format!("{n}.k"), width, width, true, Init::FanIn, rng),
                    v: Linear::new(store, &format!("{n}.v"), width, width, true, Init::FanIn, rng),
                    out: Linear::new(store, &format!("{n}.out"), width, width, true, Init::FanIn, rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), width),
                    ffn: Mlp::new(
                        store,
                        &format!("{n}.ffn"),
                        width,
                        ffn_hidden,
                        width,
                        Activation::Gelu,
                        Init::FanIn,
                        rng,
                    ),
                }
            })
            .collect();
        Ok(Self {
            layers,
            final_ln: LayerNorm::new(store, &format!("{name}.ln_final"), width),
            width,
            heads,
        })
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId) -> NodeId {
        self.forward_with_attention(g, store, x).0
    }

    /// Also returns every attention-probability node, layer-major then head.
    pub fn forward_with_attention<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Vec::new();
        let mut h = x;
        for layer in &self.layers {
            let n = layer.ln1.forward(g, store, h);
            let q = layer.q.forward(g, store, n);
            let k = layer.k.forward(g, store, n);
            let v = layer.v.forward(g, store, n);
            let mut heads = Vec::with_capacity(self.heads);
            for hi in 0..self.heads {
                let qh = g.slice_cols(q, hi * dh, dh);
                let kh = g.slice_cols(k, hi * dh, dh);
                let vh = g.slice_cols(v, hi * dh, dh);
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt);
                let scores = g.scale(scores, scale);
                let p = g.softmax_rows(scores);
                attn.push(p);
                heads.push(g.matmul(p, vh));
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
            let o = layer.out.forward(g, store, cat);
            h = g.add(h, o);
            let n2 = layer.ln2.forward(g, store, h);
            let f = layer.ffn.forward(g, store, n2);
            h = g.add(h, f);
        }
        (self.final_ln.forward(g, store, h), attn)
    }
}

/// Row reduction used to aggregate tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

/// Collapses a `G x d` token matrix to `1 x d`.
pub fn pool_tokens(g: &mut Graph<'_>, tokens: NodeId, mode: PoolMode) -> NodeId {
    let rows = g.shape(tokens).0;
    match mode {
        PoolMode::Max => g.group_max(tokens, rows),
        PoolMode::Mean => g.group_mean(tokens, rows),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use crate::nn::Mat;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 2, 2, true, Init::Zero, &mut rng());
        store.get_mut(lin.w).value.assign(&array![[1.0, 0.0], [0.0, 1.0]]);
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0]]);
        let y = lin.forward(&mut g, &store, x);
        assert_eq!(g.value(y), &array![[1.0, 2.0]]);
        drop(g);
        store.get_mut(lin.b.unwrap()).value.fill(3.0);
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0]]);
        let y = lin.forward(&mut g, &store, x);
        assert_eq!(g.value(y), &array![[4.0, 5.0]]);
        let bad = g.constant(array![[1.0, 2.0, 3.0]]);
        assert!(lin.try_forward(&mut g, &store, bad).is_err());
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng();
        for _ in 0..10 {
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut store, "l", 4, 3, true, Init::FanIn, &mut r);
            let x = rand_mat(&mut r, 5, 4);
            let err = grad_check(&mut store, &[x], |s, g, xs| lin.forward(g, s, xs[0]), 1e-6);
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn mlp_zero_weights_and_hand_case() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 2, 1, 2, Activation::Gelu, Init::Zero, &mut rng());
        store.get_mut(mlp.l2.b.unwrap()).value.assign(&array![[0.5, -0.5]]);
        let mut g = Graph::new();
        let x = g.constant(array![[3.0, -1.0]]);
        let y = mlp.forward(&mut g, &store, x);
        assert_eq!(g.value(y), &array![[0.5, -0.5]]);
        drop(g);

        // One hidden unit: h = gelu(1*3 + 2*(-1) + 0) = gelu(1); y = 2 h + 1.
        store.get_mut(mlp.l1.w).value.assign(&array![[1.0], [2.0]]);
        store.get_mut(mlp.l1.b.unwrap()).value.fill(0.0);
        store.get_mut(mlp.l2.w).value.assign(&array![[2.0, 0.0]]);
        store.get_mut(mlp.l2.b.unwrap()).value.assign(&array![[1.0, 0.0]]);
        let gelu1 = 0.5 * (1.0 + statrs::function::erf::erf(std::f64::consts::FRAC_1_SQRT_2));
        let mut g = Graph::new();
        let x = g.constant(array![[3.0, -1.0]]);
        let y = mlp.forward(&mut g, &store, x);
        assert!((g.value(y)[[0, 0]] - (2.0 * gelu1 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn mlp_gradients() {
        let mut r = rng();
        for act in [Activation::Gelu, Activation::LeakyRelu(0.1)] {
            for _ in 0..10 {
                let mut store = ParamStore::new();
                let mlp = Mlp::new(&mut store, "m", 3, 6, 2, act, Init::FanIn, &mut r);
                let x = rand_mat(&mut r, 4, 3);
                let err = grad_check(&mut store, &[x], |s, g, xs| mlp.forward(g, s, xs[0]), 1e-6);
                assert!(err < 1e-5, "{act:?}: relative error {err}");
            }
        }
    }

    #[test]
    fn gate2_limits_and_gradient() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let gate = Gate2::new(&mut store, "g", 1, 3, &mut r);
        store.get_mut(gate.lin.w).value.assign(&array![[1.0, -1.0, 0.0]]);
        store.get_mut(gate.lin.b.unwrap()).value.fill(0.0);
        let mut g = Graph::new();
        let zero = g.constant(array![[0.0]]);
        let w0 = gate.forward(&mut g, &store, zero);
        assert_eq!(g.value(w0), &array![[1.0, 1.0, 1.0]]);
        let big = g.constant(array![[30.0]]);
        let w = gate.forward(&mut g, &store, big);
        let w = g.value(w);
        assert!((w[[0, 0]] - 2.0).abs() < 1e-9 && w[[0, 1]].abs() < 1e-9);
        drop(g);

        for _ in 0..10 {
            let mut store = ParamStore::new();
            let gate = Gate2::new(&mut store, "g", 4, 5, &mut r);
            let x = rand_mat(&mut r, 1, 4);
            let err = grad_check(&mut store, &[x], |s, g, xs| gate.forward(g, s, xs[0]), 1e-6);
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn transformer_single_token_attends_to_itself() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = TransformerEncoder::new(&mut store, "t", 8, 2, 2, 16, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_mat(&mut r, 1, 8));
        let (y, attn) = enc.forward_with_attention(&mut g, &store, x);
        assert_eq!(g.shape(y), (1, 8));
        for a in attn {
            assert_eq!(g.value(a), &array![[1.0]]);
        }
    }

    #[test]
    fn transformer_attention_rows_sum_to_one() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = TransformerEncoder::new(&mut store, "t", 8, 2, 2, 16, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_mat(&mut r, 5, 8));
        let (_, attn) = enc.forward_with_attention(&mut g, &store, x);
        for a in attn {
            for row in g.value(a).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transformer_is_permutation_equivariant() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = TransformerEncoder::new(&mut store, "t", 8, 2, 2, 16, &mut r).unwrap();
        let x = rand_mat(&mut r, 4, 8);
        let perm = [2, 0, 3, 1];
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let ya = enc.forward(&mut g, &store, a);
        let b = g.constant(x.select(ndarray::Axis(0), &perm));
        let yb = enc.forward(&mut g, &store, b);
        let expect = g.value(ya).select(ndarray::Axis(0), &perm);
        let diff = (&expect - g.value(yb)).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
        assert!(diff < 1e-12);
    }

    #[test]
    fn transformer_gradients() {
        let mut r = rng();
        for _ in 0..10 {
            let mut store = ParamStore::new();
            let enc = TransformerEncoder::new(&mut store, "t", 8, 2, 1, 16, &mut r).unwrap();
            let x = rand_mat(&mut r, 2, 8);
            let err = grad_check(&mut store, &[x], |s, g, xs| enc.forward(g, s, xs[0]), 1e-6);
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn transformer_rejects_bad_heads() {
        let mut store = ParamStore::new();
        assert!(matches!(
            TransformerEncoder::new(&mut store, "t", 10, 3, 1, 8, &mut rng()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn pooling_cases() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 5.0], [3.0, 2.0]]);
        let m = pool_tokens(&mut g, x, PoolMode::Max);
        assert_eq!(g.value(m), &array![[3.0, 5.0]]);
        let single = g.constant(array![[4.0, -1.0]]);
        let s = pool_tokens(&mut g, single, PoolMode::Max);
        assert_eq!(g.value(s), &array![[4.0, -1.0]]);
        let mean = pool_tokens(&mut g, x, PoolMode::Mean);
        assert_eq!(g.value(mean), &array![[2.0, 3.5]]);
    }

    #[test]
    fn max_pool_gradient_routes_to_argmax() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let x = rand_mat(&mut r, 6, 4);
        let err = grad_check(&mut store, &[x.clone()], |_, g, xs| pool_tokens(g, xs[0], PoolMode::Max), 1e-6);
        assert!(err < 1e-5);
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let p = pool_tokens(&mut g, v, PoolMode::Max);
        let s = g.sum(p);
        let grads = g.backward(s);
        let gx = grads.wrt(v).unwrap();
        for j in 0..4 {
            let col = x.column(j);
            let arg = (0..6).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            for i in 0..6 {
                assert_eq!(gx[[i, j]], if i == arg { 1.0 } else { 0.0 });
            }
        }
    }
}
