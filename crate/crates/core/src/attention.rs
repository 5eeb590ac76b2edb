//! Scaled dot-product and multi-head attention over token sequences.
//!
//! Spatial maps are tokenised by flattening `H x W` into `L = H*W` rows with
//! channels last (see [`Graph::tokens_from_map`]). No positional encoding is
//! added anywhere.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `L x C` matrix of token activations.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence(Tensor);

impl TokenSequence {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[0] == 0 || t.shape()[1] == 0 {
            return Err(dim_err(format!(
                "token sequence must be a non-empty L x C matrix, got {:?}",
                t.shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("token sequence"));
        }
        Ok(Self(t))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(dim_err("ragged token rows"));
        }
        Self::new(Tensor::new(vec![rows.len(), c], rows.concat())?)
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.channels();
        &self.0.data()[i * c..(i + 1) * c]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Projections of one multi-head attention block.
///
/// `wq`, `wk`, `wv` are stored as `C x C` matrices whose column block
/// `n*C_h..(n+1)*C_h` is the per-head projection `W^n`. `wo` is the output
/// projection applied to the concatenated heads.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub channels: usize,
    pub heads: usize,
    /// Softmax temperature `d` in `QK^T / sqrt(d)`.
    pub d: f64,
}

impl AttentionParams {
    /// Registers randomly initialised projections named `{prefix}.wq` etc.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(channels, heads)?;
        let mut mk = |n: &str| {
            store.add_lecun(
                format!("{prefix}.{n}"),
                group,
                &[channels, channels],
                channels,
                rng,
            )
        };
        let (wq, wk, wv, wo) = (mk("wq"), mk("wk"), mk("wv"), mk("wo"));
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            channels,
            heads,
            d: (channels / heads) as f64,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{heads} heads do not tile {channels} channels"
        )));
    }
    Ok(())
}

/// Multi-head attention on the tape: `Cat(H^1..H^N) W` with
/// `H^n = Attention(Q W_q^n, K W_k^n, V W_v^n)`.
pub fn multi_head_node(
    g: &mut Graph,
    p: &AttentionParams,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> NodeId {
    let (wq, wk, wv, wo) = (g.param(p.wq), g.param(p.wk), g.param(p.wv), g.param(p.wo));
    let qp = g.matmul(q, wq);
    let kp = g.matmul(k, wk);
    let vp = g.matmul(v, wv);
    let ch = p.head_dim();
    let scale = 1.0 / p.d.sqrt();
    let heads: Vec<NodeId> = if p.heads == 1 {
        vec![g.attention(qp, kp, vp, scale)]
    } else {
        (0..p.heads)
            .map(|n| {
                let (a, b) = (n * ch, (n + 1) * ch);
                let qh = g.slice_cols(qp, a, b);
                let kh = g.slice_cols(kp, a, b);
                let vh = g.slice_cols(vp, a, b);
                g.attention(qh, kh, vh, scale)
            })
            .collect()
    };
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    g.matmul(cat, wo)
}

/// `Softmax(Q K^T / sqrt(d)) V`.
pub fn scaled_dot_attention(
    q: &TokenSequence,
    k: &TokenSequence,
    v: &TokenSequence,
    d: f64,
) -> Result<TokenSequence> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::Config(format!(
            "attention scale d must be positive, got {d}"
        )));
    }
    if k.len() != v.len() {
        return Err(dim_err(format!("{} keys but {} values", k.len(), v.len())));
    }
    if q.channels() != k.channels() || k.channels() != v.channels() {
        return Err(dim_err(format!(
            "channel counts differ: q {}, k {}, v {}",
            q.channels(),
            k.channels(),
            v.channels()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let (qn, kn, vn) = (
        g.input(q.0.clone()),
        g.input(k.0.clone()),
        g.input(v.0.clone()),
    );
    let out = g.attention(qn, kn, vn, 1.0 / d.sqrt());
    TokenSequence::new(g.value(out).clone())
}

/// Value-level multi-head attention using projections held in `store`.
pub fn multi_head(
    store: &ParamStore,
    q: &TokenSequence,
    k: &TokenSequence,
    v: &TokenSequence,
    params: &AttentionParams,
) -> Result<TokenSequence> {
    check_heads(params.channels, params.heads)?;
    for (what, t) in [("query", q), ("key", k), ("value", v)] {
        if t.channels() != params.channels {
            return Err(dim_err(format!(
                "{what} has {} channels, block expects {}",
                t.channels(),
                params.channels
            )));
        }
    }
    if k.len() != v.len() {
        return Err(dim_err(format!("{} keys but {} values", k.len(), v.len())));
    }
    let mut g = Graph::inference(store);
    let (qn, kn, vn) = (
        g.input(q.0.clone()),
        g.input(k.0.clone()),
        g.input(v.0.clone()),
    );
    let out = multi_head_node(&mut g, params, qn, kn, vn);
    TokenSequence::new(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, weighted_sum, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_seq(l: usize, c: usize, seed: u64) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenSequence::new(Tensor::randn(&[l, c], 1.0, &mut rng)).unwrap()
    }

    /// Materialises the full weight matrix, then mixes values row by row.
    fn oracle_attention(
        q: &TokenSequence,
        k: &TokenSequence,
        v: &TokenSequence,
        d: f64,
    ) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for i in 0..q.len() {
            let logits: Vec<f64> = (0..k.len())
                .map(|j| {
                    q.row(i)
                        .iter()
                        .zip(k.row(j))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d.sqrt()
                })
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut row = vec![0.0; v.channels()];
            for j in 0..k.len() {
                for (c, r) in row.iter_mut().enumerate() {
                    *r += e[j] / z * v.row(j)[c];
                }
            }
            out.push(row);
        }
        out
    }

    fn matmul(a: &[Vec<f64>], b: &Tensor) -> Vec<Vec<f64>> {
        let n = b.shape()[1];
        a.iter()
            .map(|row| {
                (0..n)
                    .map(|j| {
                        row.iter()
                            .enumerate()
                            .map(|(p, x)| x * b.get(&[p, j]))
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    fn rows(t: &TokenSequence) -> Vec<Vec<f64>> {
        (0..t.len()).map(|i| t.row(i).to_vec()).collect()
    }

    fn assert_rows_close(a: &TokenSequence, b: &[Vec<f64>], tol: f64) {
        for (i, r) in b.iter().enumerate() {
            for (x, y) in a.row(i).iter().zip(r) {
                assert!((x - y).abs() < tol, "row {i}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn single_key_returns_the_value() {
        let q = rand_seq(5, 3, 1);
        let k = rand_seq(1, 3, 2);
        let v = rand_seq(1, 3, 3);
        let out = scaled_dot_attention(&q, &k, &v, 3.0).unwrap();
        for i in 0..5 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn identical_keys_average_the_values() {
        let q = rand_seq(4, 3, 4);
        let krow = vec![0.3, -1.0, 2.0];
        let k = TokenSequence::from_rows(&vec![krow; 5]).unwrap();
        let v = rand_seq(5, 3, 5);
        let out = scaled_dot_attention(&q, &k, &v, 3.0).unwrap();
        let mean: Vec<f64> = (0..3)
            .map(|c| (0..5).map(|j| v.row(j)[c]).sum::<f64>() / 5.0)
            .collect();
        for i in 0..4 {
            for c in 0..3 {
                assert!((out.row(i)[c] - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_brute_force_softmax() {
        let (q, k, v) = (rand_seq(3, 4, 6), rand_seq(3, 4, 7), rand_seq(3, 4, 8));
        let out = scaled_dot_attention(&q, &k, &v, 4.0).unwrap();
        assert_rows_close(&out, &oracle_attention(&q, &k, &v, 4.0), 1e-12);
    }

    #[test]
    fn validates_inputs() {
        let (q, k) = (rand_seq(2, 3, 1), rand_seq(2, 4, 2));
        assert!(matches!(
            scaled_dot_attention(&q, &k, &k, 1.0),
            Err(Error::Dimension(_))
        ));
        let bad = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(TokenSequence::new(bad), Err(Error::NonFinite(_))));
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            AttentionParams::init(&mut store, "mh", ParamGroup::Head, 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identity_projections_reduce_to_single_head() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = AttentionParams::init(&mut store, "mh", ParamGroup::Head, 4, 1, &mut rng).unwrap();
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.set(&[i, i], 1.0);
        }
        for id in [p.wq, p.wk, p.wv, p.wo] {
            *store.get_mut(id) = eye.clone();
        }
        let (q, k, v) = (rand_seq(3, 4, 1), rand_seq(5, 4, 2), rand_seq(5, 4, 3));
        let a = multi_head(&store, &q, &k, &v, &p).unwrap();
        let b = scaled_dot_attention(&q, &k, &v, 4.0).unwrap();
        assert_rows_close(&a, &rows(&b), 1e-12);
    }

    #[test]
    fn zero_values_give_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = AttentionParams::init(&mut store, "mh", ParamGroup::Head, 6, 2, &mut rng).unwrap();
        let v = TokenSequence::new(Tensor::zeros(&[4, 6])).unwrap();
        let out = multi_head(&store, &rand_seq(4, 6, 1), &rand_seq(4, 6, 2), &v, &p).unwrap();
        assert!(out.as_tensor().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_heads_match_per_head_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = AttentionParams::init(&mut store, "mh", ParamGroup::Head, 6, 2, &mut rng).unwrap();
        let (q, k, v) = (rand_seq(4, 6, 1), rand_seq(4, 6, 2), rand_seq(4, 6, 3));
        let got = multi_head(&store, &q, &k, &v, &p).unwrap();

        let (qp, kp, vp) = (
            matmul(&rows(&q), store.get(p.wq)),
            matmul(&rows(&k), store.get(p.wk)),
            matmul(&rows(&v), store.get(p.wv)),
        );
        let block = |m: &[Vec<f64>], h: usize| {
            TokenSequence::from_rows(
                &m.iter()
                    .map(|r| r[h * 3..(h + 1) * 3].to_vec())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let mut cat = vec![Vec::new(); 4];
        for h in 0..2 {
            let head = oracle_attention(&block(&qp, h), &block(&kp, h), &block(&vp, h), 3.0);
            for (c, r) in cat.iter_mut().zip(head) {
                c.extend(r);
            }
        }
        assert_rows_close(&got, &matmul(&cat, store.get(p.wo)), 1e-12);
    }

    #[test]
    fn multi_head_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = AttentionParams::init(&mut store, "mh", ParamGroup::Head, 6, 3, &mut rng).unwrap();
        let (q, k) = (rand_seq(4, 6, 1), rand_seq(5, 6, 2));
        let r = check_params(
            "multi_head",
            &store,
            &[p.wq, p.wk, p.wv, p.wo],
            DEFAULT_STEP,
            64,
            |g| {
                let qn = g.input(q.as_tensor().clone());
                let kn = g.input(k.as_tensor().clone());
                let o = multi_head_node(g, &p, qn, kn, kn);
                weighted_sum(g, o, 3)
            },
        );
        assert!(r.passed(DEFAULT_TOLERANCE), "{r:?}");
    }

    fn seq_strategy(l: usize, c: usize) -> impl Strategy<Value = TokenSequence> {
        proptest::collection::vec(-3.0f64..3.0, l * c)
            .prop_map(move |d| TokenSequence::new(Tensor::new(vec![l, c], d).unwrap()).unwrap())
    }

    proptest! {
        #[test]
        fn permuting_keys_and_values_is_harmless(
            q in seq_strategy(3, 4),
            k in seq_strategy(5, 4),
            v in seq_strategy(5, 4),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let a = scaled_dot_attention(&q, &k, &v, 4.0).unwrap();
            let kp = TokenSequence::from_rows(&perm.iter().map(|&i| k.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let vp = TokenSequence::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let b = scaled_dot_attention(&q, &kp, &vp, 4.0).unwrap();
            prop_assert!(a.as_tensor().max_abs_diff(b.as_tensor()) < 1e-6);
        }

        #[test]
        fn softmax_rows_sum_to_one(q in seq_strategy(3, 4), k in seq_strategy(6, 4)) {
            // With V = I (one-hot value per key) the output rows are the weights.
            let mut eye = Tensor::zeros(&[6, 6]);
            for i in 0..6 { eye.set(&[i, i], 1.0); }
            let pad = |t: &TokenSequence| -> Vec<f64> {
                t.as_tensor().data().chunks(4).flat_map(|r| r.iter().copied().chain([0.0, 0.0])).collect()
            };
            let qw = TokenSequence::new(Tensor::new(vec![3, 6], pad(&q)).unwrap()).unwrap();
            let kw = TokenSequence::new(Tensor::new(vec![6, 6], pad(&k)).unwrap()).unwrap();
            let w = scaled_dot_attention(&qw, &kw, &TokenSequence::new(eye).unwrap(), 4.0).unwrap();
            for i in 0..3 {
                prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(w.row(i).iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn constant_logit_shift_is_invisible(
            q in seq_strategy(2, 3),
            k in seq_strategy(4, 3),
            v in seq_strategy(4, 3),
            c in -5.0f64..5.0,
        ) {
            // Appending a constant channel to every key and a matching channel
            // to the queries adds the same c to each logit row.
            let pad = |t: &TokenSequence, x: f64| TokenSequence::from_rows(
                &(0..t.len()).map(|i| { let mut r = t.row(i).to_vec(); r.push(x); r }).collect::<Vec<_>>()).unwrap();
            let base = oracle_attention(&q, &k, &v, 3.0);
            let shifted = oracle_attention(&pad(&q, c), &pad(&k, 1.0), &pad(&v, 0.0), 3.0);
            for (a, b) in base.iter().zip(&shifted) {
                for (x, y) in a.iter().zip(b) { prop_assert!((x - y).abs() < 1e-6); }
            }
            let ours = scaled_dot_attention(&pad(&q, c), &pad(&k, 1.0), &pad(&v, 0.0), 3.0).unwrap();
            for (i, r) in shifted.iter().enumerate() {
                for (x, y) in ours.row(i).iter().zip(r) { prop_assert!((x - y).abs() < 1e-9); }
            }
        }
    }
}
