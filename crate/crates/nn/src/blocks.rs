//! MLP and multi-head attention building blocks.
//!
//! A block is a naming convention over a [`ParamStore`] plus a forward
//! builder that appends the corresponding graph nodes. Layer norm and the
//! residual connections wrap both the attention sub-block and the
//! position-wise feed-forward network.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use rand::Rng;

const LAYER_NORM_EPS: f64 = 1e-5;

/// `x W + b` with b broadcast over rows.
pub fn affine<T: Scalar>(g: &mut Graph<T>, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
    let xw = g.matmul(x, w);
    g.add_bias(xw, b)
}

/// Graph leaves bound to the entries of a store, in store order.
pub struct BoundParams {
    ids: Vec<TensorId>,
}

impl BoundParams {
    /// Loads every store entry into the graph. With `trainable = false`
    /// the leaves are constants and backward skips them.
    pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, trainable: bool) -> Self {
        let ids = store
            .entries()
            .iter()
            .map(|e| g.leaf(e.rows, e.cols, e.data.clone(), trainable))
            .collect();
        BoundParams { ids }
    }

    pub fn id<T: Scalar>(&self, store: &ParamStore<T>, name: &str) -> TensorId {
        let idx = store
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} is not registered"));
        self.ids[idx]
    }

    /// Gradients accumulated into the bound leaves, in store order.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Vec<Vec<T>> {
        self.ids.iter().map(|&id| g.grad(id).to_vec()).collect()
    }
}

/// Fully-connected stack: affine layers with ReLU between them and a
/// plain affine output.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub prefix: String,
    pub dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(prefix: impl Into<String>, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        MlpSpec {
            prefix: prefix.into(),
            dims: dims.to_vec(),
        }
    }

    pub fn register<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for i in 0..self.dims.len() - 1 {
            store.add_kaiming(
                &format!("{}.w{i}", self.prefix),
                self.dims[i],
                self.dims[i + 1],
                self.dims[i],
                rng,
            );
            store.add_zeros(&format!("{}.b{i}", self.prefix), 1, self.dims[i + 1]);
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bound: &BoundParams,
        x: TensorId,
    ) -> TensorId {
        let mut h = x;
        let last = self.dims.len() - 2;
        for i in 0..=last {
            let w = bound.id(store, &format!("{}.w{i}", self.prefix));
            let b = bound.id(store, &format!("{}.b{i}", self.prefix));
            h = affine(g, h, w, b);
            if i != last {
                h = g.relu(h);
            }
        }
        h
    }
}

/// Single-head scaled dot-product attention; returns the output and the
/// row-stochastic attention matrix.
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> (TensorId, TensorId) {
    let (_, dk) = g.shape(q);
    let scores = g.matmul_nt(q, k);
    let scaled = g.scale(scores, T::from_f64(1.0 / (dk as f64).sqrt()));
    let attn = g.softmax_rows(scaled);
    let out = g.matmul(attn, v);
    (out, attn)
}

/// Multi-head attention weights. Per-head projections are stored packed:
/// `wq` holds `[W_1^Q | ... | W_h^Q]` column blocks of width `d_model/heads`,
/// and likewise for `wk`/`wv`.
#[derive(Debug, Clone)]
pub struct MhaSpec {
    pub prefix: String,
    pub d_model: usize,
    pub heads: usize,
}

impl MhaSpec {
    pub fn new(prefix: impl Into<String>, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by head count {heads}"
            )));
        }
        Ok(MhaSpec {
            prefix: prefix.into(),
            d_model,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn register<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let d = self.d_model;
        for name in ["wq", "wk", "wv", "wo"] {
            store.add_kaiming(&format!("{}.{name}", self.prefix), d, d, d, rng);
        }
        store.add_const(&format!("{}.ln1_gain", self.prefix), 1, d, 1.0);
        store.add_zeros(&format!("{}.ln1_bias", self.prefix), 1, d);
        store.add_kaiming(&format!("{}.ffn_w1", self.prefix), d, 2 * d, d, rng);
        store.add_zeros(&format!("{}.ffn_b1", self.prefix), 1, 2 * d);
        store.add_kaiming(&format!("{}.ffn_w2", self.prefix), 2 * d, d, 2 * d, rng);
        store.add_zeros(&format!("{}.ffn_b2", self.prefix), 1, d);
        store.add_const(&format!("{}.ln2_gain", self.prefix), 1, d, 1.0);
        store.add_zeros(&format!("{}.ln2_bias", self.prefix), 1, d);
    }

    /// `MHA(x, y, z)`: queries from `x`, keys from `y`, values from `z`,
    /// with residual + layer norm around both the attention sub-block and
    /// the feed-forward network.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bound: &BoundParams,
        x: TensorId,
        y: TensorId,
        z: TensorId,
    ) -> TensorId {
        let p = |g: &str| format!("{}.{g}", self.prefix);
        let wq = bound.id(store, &p("wq"));
        let wk = bound.id(store, &p("wk"));
        let wv = bound.id(store, &p("wv"));
        let wo = bound.id(store, &p("wo"));

        let q = g.matmul(x, wq);
        let k = g.matmul(y, wk);
        let v = g.matmul(z, wv);

        let dk = self.head_dim();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dk, dk);
            let kh = g.slice_cols(k, h * dk, dk);
            let vh = g.slice_cols(v, h * dk, dk);
            let (out, _) = scaled_dot_attention(g, qh, kh, vh);
            heads.push(out);
        }
        let cat = g.concat_cols(&heads);
        let proj = g.matmul(cat, wo);

        let eps = T::from_f64(LAYER_NORM_EPS);
        let res1 = g.add(x, proj);
        let ln1_g = bound.id(store, &p("ln1_gain"));
        let ln1_b = bound.id(store, &p("ln1_bias"));
        let n1 = g.layer_norm_rows(res1, ln1_g, ln1_b, eps);

        let w1 = bound.id(store, &p("ffn_w1"));
        let b1 = bound.id(store, &p("ffn_b1"));
        let w2 = bound.id(store, &p("ffn_w2"));
        let b2 = bound.id(store, &p("ffn_b2"));
        let hidden = affine(g, n1, w1, b1);
        let hidden = g.relu(hidden);
        let ffn = affine(g, hidden, w2, b2);

        let res2 = g.add(n1, ffn);
        let ln2_g = bound.id(store, &p("ln2_gain"));
        let ln2_b = bound.id(store, &p("ln2_bias"));
        g.layer_norm_rows(res2, ln2_g, ln2_b, eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weight_mlp_outputs_bias() {
        let mut store = ParamStore::<f64>::new();
        let spec = MlpSpec::new("m", &[3, 2]);
        store.add_zeros("m.w0", 3, 2);
        store.add("m.b0", 1, 2, vec![0.5, -1.5]);
        let _ = spec; // registered manually above
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &store, false);
        let x = g.constant(4, 3, vec![1.0; 12]);
        let spec = MlpSpec::new("m", &[3, 2]);
        let y = spec.forward(&mut g, &store, &bound, x);
        for row in g.value(y).chunks_exact(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let mut store = ParamStore::<f64>::new();
        store.add("m.w0", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        store.add_zeros("m.b0", 1, 2);
        let spec = MlpSpec::new("m", &[2, 2]);
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &store, false);
        let x = g.constant(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        let y = spec.forward(&mut g, &store, &bound, x);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn mlp_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let spec = MlpSpec::new("m", &[3, 5, 2]);
        spec.register(&mut store, &mut rng);
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &store, true);
        let x = g.param(
            4,
            3,
            (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect(),
        );
        let y = spec.forward(&mut g, &store, &bound, x);
        let sq = g.square(y);
        let s0 = g.sum_axis0(sq);
        let loss = g.sum_axis1(s0);
        let mut leaves = vec![x];
        for e in store.entries() {
            leaves.push(bound.id(&store, &e.name));
        }
        let report = grad_check(&mut g, loss, &leaves, 1e-6);
        assert!(report.passed(), "max rel err {:.3e}", report.max_rel_err);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        // With all value rows identical, every output row equals that row
        // regardless of the attention pattern.
        let mut g = Graph::<f64>::new();
        let q = g.constant(3, 2, vec![0.3, -1.0, 0.5, 0.2, -0.7, 0.9]);
        let k = g.constant(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5]);
        let v = g.constant(3, 2, vec![0.4, -0.6, 0.4, -0.6, 0.4, -0.6]);
        let (out, attn) = scaled_dot_attention(&mut g, q, k, v);
        for row in g.value(out).chunks_exact(2) {
            assert!((row[0] - 0.4).abs() < 1e-12);
            assert!((row[1] + 0.6).abs() < 1e-12);
        }
        for row in g.value(attn).chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mha_rejects_bad_head_count() {
        assert!(MhaSpec::new("a", 6, 4).is_err());
        assert!(MhaSpec::new("a", 8, 4).is_ok());
    }

    #[test]
    fn mha_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let spec = MhaSpec::new("mha", 4, 2).unwrap();
        spec.register(&mut store, &mut rng);
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &store, true);
        let data: Vec<f64> = (0..12).map(|i| ((i * 5 % 13) as f64 - 6.0) / 6.0).collect();
        let x = g.param(3, 4, data);
        let y = spec.forward(&mut g, &store, &bound, x, x, x);
        let sq = g.square(y);
        let s0 = g.sum_axis0(sq);
        let loss = g.sum_axis1(s0);
        let mut leaves = vec![x];
        for e in store.entries() {
            leaves.push(bound.id(&store, &e.name));
        }
        let report = grad_check(&mut g, loss, &leaves, 1e-5);
        assert!(report.passed(), "max rel err {:.3e}", report.max_rel_err);
    }
}
