//! Adaptive temporal transformer over similarity maps.
//!
//! Maps are handled as `L x C` token matrices (`L = H*W`). The encoder folds
//! the current map `F_t` into a fixed-size prior `F^m`:
//!
//! ```text
//! F1  = Norm(F_t + MH(F^m_{t-1}, F_t, F_t))
//! F2  = Norm(F1 + MH(F1, F1, F1))
//! a   = FFN(GAP(G(F1)))
//! Ff  = F2 + Fuse(Cat(F2, F1)) * a
//! F^m = Norm(Ff + MH(Ff, Ff, Ff))
//! ```
//!
//! and the decoder refines `F_t` with the prior:
//!
//! ```text
//! F3 = Norm(F_t + MH(F_t, F_t, F_t))
//! F4 = Norm(F3 + MH(F3, F^m, F^m))
//! F* = Norm(F4 + FFN(F4))
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_node, AttentionParams};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{FeedForward, Init, LayerNorm, Linear};
use crate::params::{ParamGroup, ParamStore, TensorArchive};
use crate::tensor::{FeatureMap, Tensor};

/// Which operand plays the query in the encoder's first attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryRole {
    /// Previous prior is the query, the current map gives keys and values.
    Prior,
    /// Roles reversed: the current map queries the previous prior.
    Current,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Learned,
    /// Gate forced to zero, so `Ff = F2`.
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub ln_eps: f64,
    pub query: QueryRole,
    pub gate: GateMode,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            channels: 192,
            heads: 6,
            ffn_expansion: 2,
            ln_eps: 1e-5,
            query: QueryRole::Prior,
            gate: GateMode::Learned,
        }
    }
}

impl TransformerConfig {
    pub fn toy() -> Self {
        Self {
            channels: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not tile {} transformer channels",
                self.heads, self.channels
            )));
        }
        if self.ffn_expansion == 0 || !(self.ln_eps > 0.0) {
            return Err(Error::Config(
                "ffn expansion and norm eps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed-size similarity-level temporal knowledge, stored as tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalPrior {
    tokens: Tensor,
    h: usize,
    w: usize,
}

impl TemporalPrior {
    pub fn from_map(map: &FeatureMap) -> Result<Self> {
        let (c, h, w) = map_dims(map)?;
        let mut t = Tensor::zeros(&[h * w, c]);
        for ch in 0..c {
            for p in 0..h * w {
                t.data_mut()[p * c + ch] = map.data()[ch * h * w + p];
            }
        }
        Ok(Self { tokens: t, h, w })
    }

    /// From `[h * w, C]` tokens.
    pub fn from_tokens(tokens: Tensor, h: usize, w: usize) -> Result<Self> {
        match tokens.shape() {
            &[n, c] if n == h * w && c > 0 && n > 0 => Ok(Self { tokens, h, w }),
            s => Err(dim_err(format!("expected {h}x{w} tokens, got {s:?}"))),
        }
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    /// `C x H x W` view of the prior.
    pub fn to_map(&self) -> FeatureMap {
        tokens_to_map(&self.tokens, self.h, self.w)
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.push("prior", self.to_map());
        a
    }

    pub fn serialized_len(&self) -> usize {
        self.to_archive().to_bytes().len()
    }
}

fn map_dims(map: &FeatureMap) -> Result<(usize, usize, usize)> {
    match map.shape() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        s => Err(dim_err(format!("expected a C x H x W map, got {s:?}"))),
    }
}

fn tokens_to_map(t: &Tensor, h: usize, w: usize) -> FeatureMap {
    let c = t.shape()[1];
    let mut m = Tensor::zeros(&[c, h, w]);
    for p in 0..h * w {
        for ch in 0..c {
            m.data_mut()[ch * h * w + p] = t.data()[p * c + ch];
        }
    }
    m
}

/// Intermediate encoder values, exposed for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    pub f1: NodeId,
    pub f2: NodeId,
    pub alpha: NodeId,
    pub filtered: NodeId,
    pub prior: NodeId,
}

#[derive(Clone, Debug)]
pub struct AtTrans {
    /// Backbone channels to transformer channels, applied to every `F_t`.
    pub adapter: Linear,
    /// Initial prior from the first raw correlation map.
    pub f_init: Linear,
    pub enc_cross: AttentionParams,
    pub enc_norm1: LayerNorm,
    pub enc_self: AttentionParams,
    pub enc_norm2: LayerNorm,
    pub gate_conv: Linear,
    pub gate_ffn: FeedForward,
    pub fuse: Linear,
    pub enc_out: AttentionParams,
    pub enc_norm3: LayerNorm,
    pub dec_self: AttentionParams,
    pub dec_norm1: LayerNorm,
    pub dec_cross: AttentionParams,
    pub dec_norm2: LayerNorm,
    pub dec_ffn: FeedForward,
    pub dec_norm3: LayerNorm,
    pub cfg: TransformerConfig,
}

impl AtTrans {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_channels: usize,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, n, eps) = (cfg.channels, cfg.heads, cfg.ln_eps);
        let hidden = c * cfg.ffn_expansion;
        let grp = ParamGroup::Head;
        Ok(Self {
            adapter: Linear::init(
                store,
                "trans.adapter",
                grp,
                in_channels,
                c,
                Init::Lecun,
                rng,
            ),
            f_init: Linear::init(store, "trans.f_init", grp, in_channels, c, Init::Lecun, rng),
            enc_cross: AttentionParams::init(store, "trans.enc.cross", grp, c, n, rng)?,
            enc_norm1: LayerNorm::init(store, "trans.enc.norm1", grp, c, eps),
            enc_self: AttentionParams::init(store, "trans.enc.self", grp, c, n, rng)?,
            enc_norm2: LayerNorm::init(store, "trans.enc.norm2", grp, c, eps),
            gate_conv: Linear::init(store, "trans.enc.gate_conv", grp, c, c, Init::Lecun, rng),
            gate_ffn: FeedForward::init(store, "trans.enc.gate_ffn", grp, c, hidden, c, false, rng),
            fuse: Linear::init(store, "trans.enc.fuse", grp, 2 * c, c, Init::Lecun, rng),
            enc_out: AttentionParams::init(store, "trans.enc.out", grp, c, n, rng)?,
            enc_norm3: LayerNorm::init(store, "trans.enc.norm3", grp, c, eps),
            dec_self: AttentionParams::init(store, "trans.dec.self", grp, c, n, rng)?,
            dec_norm1: LayerNorm::init(store, "trans.dec.norm1", grp, c, eps),
            dec_cross: AttentionParams::init(store, "trans.dec.cross", grp, c, n, rng)?,
            dec_norm2: LayerNorm::init(store, "trans.dec.norm2", grp, c, eps),
            dec_ffn: FeedForward::init(store, "trans.dec.ffn", grp, c, hidden, c, false, rng),
            dec_norm3: LayerNorm::init(store, "trans.dec.norm3", grp, c, eps),
            cfg: *cfg,
        })
    }

    pub fn channels(&self) -> usize {
        self.cfg.channels
    }

    /// `F^m_0 = F_init(R_1)` as tokens.
    pub fn init_prior_node(&self, g: &mut Graph, raw_map: NodeId) -> NodeId {
        let t = g.tokens_from_map(raw_map);
        self.f_init.forward(g, t)
    }

    /// Tokenises an adjusted similarity map into transformer channels.
    pub fn input_node(&self, g: &mut Graph, adjusted_map: NodeId) -> NodeId {
        let t = g.tokens_from_map(adjusted_map);
        self.adapter.forward(g, t)
    }

    fn residual_norm(&self, g: &mut Graph, x: NodeId, delta: NodeId, norm: &LayerNorm) -> NodeId {
        let s = g.add(x, delta);
        norm.forward(g, s)
    }

    pub fn encode_nodes(&self, g: &mut Graph, prior: NodeId, ft: NodeId) -> EncoderNodes {
        let att = match self.cfg.query {
            QueryRole::Prior => multi_head_node(g, &self.enc_cross, prior, ft, ft),
            QueryRole::Current => multi_head_node(g, &self.enc_cross, ft, prior, prior),
        };
        let f1 = self.residual_norm(g, ft, att, &self.enc_norm1);
        let att = multi_head_node(g, &self.enc_self, f1, f1, f1);
        let f2 = self.residual_norm(g, f1, att, &self.enc_norm2);

        let alpha = match self.cfg.gate {
            GateMode::Learned => {
                let gated = self.gate_conv.forward(g, f1);
                let per_channel = g.transpose(gated);
                let desc = g.global_avg_pool(per_channel);
                self.gate_ffn.forward_vec(g, desc)
            }
            GateMode::Closed => g.input(Tensor::zeros(&[self.cfg.channels])),
        };
        let cat = g.concat_cols(&[f2, f1]);
        let fused = self.fuse.forward(g, cat);
        let gated = g.mul_row(fused, alpha);
        let filtered = g.add(f2, gated);

        let att = multi_head_node(g, &self.enc_out, filtered, filtered, filtered);
        let prior = self.residual_norm(g, filtered, att, &self.enc_norm3);
        EncoderNodes {
            f1,
            f2,
            alpha,
            filtered,
            prior,
        }
    }

    pub fn encode_node(&self, g: &mut Graph, prior: NodeId, ft: NodeId) -> NodeId {
        self.encode_nodes(g, prior, ft).prior
    }

    pub fn decode_node(&self, g: &mut Graph, prior: NodeId, ft: NodeId) -> NodeId {
        let att = multi_head_node(g, &self.dec_self, ft, ft, ft);
        let f3 = self.residual_norm(g, ft, att, &self.dec_norm1);
        let att = multi_head_node(g, &self.dec_cross, f3, prior, prior);
        let f4 = self.residual_norm(g, f3, att, &self.dec_norm2);
        let ff = self.dec_ffn.forward(g, f4);
        self.residual_norm(g, f4, ff, &self.dec_norm3)
    }

    /// Encode then decode; returns `(new prior, refined map)` tokens.
    pub fn step_node(&self, g: &mut Graph, prior: NodeId, ft: NodeId) -> (NodeId, NodeId) {
        let p = self.encode_node(g, prior, ft);
        let refined = self.decode_node(g, p, ft);
        (p, refined)
    }

    fn check_map(&self, map: &FeatureMap, channels: usize, what: &str) -> Result<(usize, usize)> {
        let (c, h, w) = map_dims(map)?;
        if c != channels {
            return Err(dim_err(format!(
                "{what} has {c} channels, expected {channels}"
            )));
        }
        if !map.all_finite() {
            return Err(Error::NonFinite("similarity map"));
        }
        Ok((h, w))
    }

    fn check_pair(&self, prior: &TemporalPrior, ft: &FeatureMap) -> Result<(usize, usize)> {
        let (h, w) = self.check_map(ft, self.cfg.channels, "similarity map")?;
        if (h, w) != (prior.h, prior.w) || prior.tokens.shape()[1] != self.cfg.channels {
            return Err(dim_err(format!(
                "prior {}x{}x{} does not match map {}x{h}x{w}",
                prior.tokens.shape()[1],
                prior.h,
                prior.w,
                self.cfg.channels
            )));
        }
        Ok((h, w))
    }

    /// `F^m_0 = F_init(R_1)` from the first raw correlation map.
    pub fn init_prior(&self, store: &ParamStore, raw: &FeatureMap) -> Result<TemporalPrior> {
        let (h, w) = self.check_map(raw, self.f_init.d_in, "raw correlation map")?;
        let mut g = Graph::inference(store);
        let r = g.input(raw.clone());
        let p = self.init_prior_node(&mut g, r);
        Ok(TemporalPrior {
            tokens: g.value(p).clone(),
            h,
            w,
        })
    }

    /// Projects an adjusted similarity map to transformer channels.
    pub fn adapt(&self, store: &ParamStore, adjusted: &FeatureMap) -> Result<FeatureMap> {
        let (h, w) = self.check_map(adjusted, self.adapter.d_in, "adjusted similarity map")?;
        let mut g = Graph::inference(store);
        let a = g.input(adjusted.clone());
        let t = self.input_node(&mut g, a);
        Ok(tokens_to_map(g.value(t), h, w))
    }

    /// Encoder on a transformer-channel map `ft`.
    pub fn encode(
        &self,
        store: &ParamStore,
        prior: &TemporalPrior,
        ft: &FeatureMap,
    ) -> Result<TemporalPrior> {
        let (h, w) = self.check_pair(prior, ft)?;
        let mut g = Graph::inference(store);
        let p = g.input(prior.tokens.clone());
        let f = TemporalPrior::from_map(ft)?;
        let fn_ = g.input(f.tokens);
        let out = self.encode_node(&mut g, p, fn_);
        Ok(TemporalPrior {
            tokens: g.value(out).clone(),
            h,
            w,
        })
    }

    /// Decoder; returns the refined map with the shape of `ft`.
    pub fn decode(
        &self,
        store: &ParamStore,
        prior: &TemporalPrior,
        ft: &FeatureMap,
    ) -> Result<FeatureMap> {
        let (h, w) = self.check_pair(prior, ft)?;
        let mut g = Graph::inference(store);
        let p = g.input(prior.tokens.clone());
        let f = TemporalPrior::from_map(ft)?;
        let fn_ = g.input(f.tokens);
        let out = self.decode_node(&mut g, p, fn_);
        Ok(tokens_to_map(g.value(out), h, w))
    }

    pub fn step(
        &self,
        store: &ParamStore,
        prior: &TemporalPrior,
        ft: &FeatureMap,
    ) -> Result<(TemporalPrior, FeatureMap)> {
        let next = self.encode(store, prior, ft)?;
        let refined = self.decode(store, &next, ft)?;
        Ok((next, refined))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, weighted_sum, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use crate::params::ParamId;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn setup(cin: usize, cfg: TransformerConfig, seed: u64) -> (ParamStore, AtTrans) {
        let mut store = ParamStore::new();
        let t = AtTrans::init(&mut store, cin, &cfg, &mut rng(seed)).unwrap();
        (store, t)
    }

    fn randomise_all(store: &mut ParamStore, std: f64, seed: u64) {
        let mut r = rng(seed);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            let base = store.get(id).clone();
            // Keep norm scales near one.
            let noise = Tensor::randn(&shape, std, &mut r);
            let v = if store.name(id).ends_with("gamma") {
                Tensor::new(
                    shape,
                    base.data()
                        .iter()
                        .zip(noise.data())
                        .map(|(a, b)| a + b)
                        .collect(),
                )
                .unwrap()
            } else {
                noise
            };
            *store.get_mut(id) = v;
        }
    }

    fn vecmat(v: &[f64], m: &Tensor) -> Vec<f64> {
        let n = m.shape()[1];
        (0..n)
            .map(|j| v.iter().enumerate().map(|(i, x)| x * m.get(&[i, j])).sum())
            .collect()
    }

    fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    fn norm(v: &[f64], ln: &LayerNorm, store: &ParamStore) -> Vec<f64> {
        let n = v.len() as f64;
        let mu = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
        let (g, b) = (store.get(ln.gamma), store.get(ln.beta));
        v.iter()
            .enumerate()
            .map(|(i, x)| (x - mu) / (var + ln.eps).sqrt() * g.data()[i] + b.data()[i])
            .collect()
    }

    /// With a single key, attention returns the value: MH(q, k, v) = v Wv Wo.
    fn mh1(v: &[f64], p: &AttentionParams, store: &ParamStore) -> Vec<f64> {
        vecmat(&vecmat(v, store.get(p.wv)), store.get(p.wo))
    }

    fn linear(v: &[f64], l: &Linear, store: &ParamStore) -> Vec<f64> {
        add(&vecmat(v, store.get(l.weight)), store.get(l.bias).data())
    }

    fn ffn(v: &[f64], f: &FeedForward, store: &ParamStore) -> Vec<f64> {
        let h: Vec<f64> = linear(v, &f.l1, store)
            .into_iter()
            .map(|x| x.max(0.0))
            .collect();
        linear(&h, &f.l2, store)
    }

    fn map1(v: &[f64]) -> FeatureMap {
        Tensor::new(vec![v.len(), 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn init_prior_is_a_pointwise_projection() {
        let (store, t) = setup(4, TransformerConfig::toy(), 1);
        let zero = t.init_prior(&store, &Tensor::zeros(&[4, 3, 3])).unwrap();
        assert!(zero.tokens().data().iter().all(|&v| v == 0.0));
        let r1 = Tensor::randn(&[4, 3, 3], 1.0, &mut rng(2));
        let p = t.init_prior(&store, &r1).unwrap();
        assert_eq!(p.to_map().shape(), &[12, 3, 3]);
        for pos in 0..9 {
            let v: Vec<f64> = (0..4).map(|c| r1.data()[c * 9 + pos]).collect();
            let want = linear(&v, &t.f_init, &store);
            for (c, w) in want.iter().enumerate() {
                assert!((p.tokens().get(&[pos, c]) - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_gate_gives_f2_exactly() {
        let cfg = TransformerConfig {
            gate: GateMode::Closed,
            ..TransformerConfig::toy()
        };
        let (mut store, t) = setup(4, cfg, 3);
        randomise_all(&mut store, 0.3, 4);
        let mut g = Graph::inference(&store);
        let mut r = rng(5);
        let p = g.input(Tensor::randn(&[9, 12], 1.0, &mut r));
        let f = g.input(Tensor::randn(&[9, 12], 1.0, &mut r));
        let e = t.encode_nodes(&mut g, p, f);
        assert_eq!(g.value(e.filtered), g.value(e.f2));
    }

    #[test]
    fn one_token_encoder_chain() {
        let (mut store, t) = setup(4, TransformerConfig::toy(), 6);
        randomise_all(&mut store, 0.3, 7);
        let mut r = rng(8);
        let prior_v = Tensor::randn(&[12], 1.0, &mut r);
        let f_v = Tensor::randn(&[12], 1.0, &mut r);
        let prior = TemporalPrior::from_map(&map1(prior_v.data())).unwrap();
        let got = t.encode(&store, &prior, &map1(f_v.data())).unwrap();

        let f = f_v.data();
        let f1 = norm(&add(f, &mh1(f, &t.enc_cross, &store)), &t.enc_norm1, &store);
        let f2 = norm(
            &add(&f1, &mh1(&f1, &t.enc_self, &store)),
            &t.enc_norm2,
            &store,
        );
        let alpha = ffn(&linear(&f1, &t.gate_conv, &store), &t.gate_ffn, &store);
        let cat: Vec<f64> = f2.iter().chain(&f1).copied().collect();
        let fused = linear(&cat, &t.fuse, &store);
        let ff: Vec<f64> = (0..12).map(|i| f2[i] + fused[i] * alpha[i]).collect();
        let fm = norm(
            &add(&ff, &mh1(&ff, &t.enc_out, &store)),
            &t.enc_norm3,
            &store,
        );
        for (a, b) in got.tokens().data().iter().zip(&fm) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn one_token_decoder_chain() {
        let (mut store, t) = setup(4, TransformerConfig::toy(), 9);
        randomise_all(&mut store, 0.3, 10);
        let mut r = rng(11);
        let prior_v = Tensor::randn(&[12], 1.0, &mut r);
        let f_v = Tensor::randn(&[12], 1.0, &mut r);
        let prior = TemporalPrior::from_map(&map1(prior_v.data())).unwrap();
        let got = t.decode(&store, &prior, &map1(f_v.data())).unwrap();
        let f = f_v.data();
        let f3 = norm(&add(f, &mh1(f, &t.dec_self, &store)), &t.dec_norm1, &store);
        let f4 = norm(
            &add(&f3, &mh1(prior_v.data(), &t.dec_cross, &store)),
            &t.dec_norm2,
            &store,
        );
        let fs = norm(
            &add(&f4, &ffn(&f4, &t.dec_ffn, &store)),
            &t.dec_norm3,
            &store,
        );
        assert_eq!(got.shape(), &[12, 1, 1]);
        for (a, b) in got.data().iter().zip(&fs) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_cross_values_reduce_f4_to_norm_f3() {
        let (mut store, t) = setup(4, TransformerConfig::toy(), 12);
        randomise_all(&mut store, 0.3, 13);
        *store.get_mut(t.dec_cross.wv) = Tensor::zeros(&[12, 12]);
        let mut r = rng(14);
        let ft = Tensor::randn(&[12, 3, 3], 1.0, &mut r);
        let prior = TemporalPrior::from_map(&Tensor::zeros(&[12, 3, 3])).unwrap();
        let got = t.decode(&store, &prior, &ft).unwrap();

        let mut g = Graph::inference(&store);
        let f = TemporalPrior::from_map(&ft).unwrap();
        let fn_ = g.input(f.tokens().clone());
        let att = multi_head_node(&mut g, &t.dec_self, fn_, fn_, fn_);
        let s = g.add(fn_, att);
        let f3 = t.dec_norm1.forward(&mut g, s);
        let f4 = t.dec_norm2.forward(&mut g, f3);
        let ff = t.dec_ffn.forward(&mut g, f4);
        let s = g.add(f4, ff);
        let want = t.dec_norm3.forward(&mut g, s);
        assert!(got.max_abs_diff(&tokens_to_map(g.value(want), 3, 3)) < 1e-12);
    }

    #[test]
    fn shapes_are_preserved_on_full_size_maps() {
        let (store, t) = setup(8, TransformerConfig::toy(), 15);
        let mut r = rng(16);
        let raw = Tensor::randn(&[8, 21, 21], 1.0, &mut r);
        let prior = t.init_prior(&store, &raw).unwrap();
        let ft = t
            .adapt(&store, &Tensor::randn(&[8, 21, 21], 1.0, &mut r))
            .unwrap();
        let (next, refined) = t.step(&store, &prior, &ft).unwrap();
        assert_eq!(refined.shape(), &[12, 21, 21]);
        assert_eq!(next.to_map().shape(), &[12, 21, 21]);
        assert_ne!(next, prior);
    }

    #[test]
    fn step_is_encode_then_decode() {
        let (mut store, t) = setup(4, TransformerConfig::toy(), 17);
        randomise_all(&mut store, 0.3, 18);
        let mut r = rng(19);
        let p0 = t
            .init_prior(&store, &Tensor::randn(&[4, 3, 3], 1.0, &mut r))
            .unwrap();
        let f1 = Tensor::randn(&[12, 3, 3], 1.0, &mut r);
        let f2 = Tensor::randn(&[12, 3, 3], 1.0, &mut r);
        let (p1, _) = t.step(&store, &p0, &f1).unwrap();
        let (p2, out2) = t.step(&store, &p1, &f2).unwrap();
        let m1 = t.encode(&store, &p0, &f1).unwrap();
        let m2 = t.encode(&store, &m1, &f2).unwrap();
        assert_eq!(p2, m2);
        assert_eq!(out2, t.decode(&store, &m2, &f2).unwrap());
    }

    #[test]
    fn prior_memory_is_constant() {
        let (store, t) = setup(4, TransformerConfig::toy(), 20);
        let mut r = rng(21);
        let mut p = t
            .init_prior(&store, &Tensor::randn(&[4, 3, 3], 1.0, &mut r))
            .unwrap();
        let n = p.serialized_len();
        for _ in 0..100 {
            p = t
                .step(&store, &p, &Tensor::randn(&[12, 3, 3], 1.0, &mut r))
                .unwrap()
                .0;
            assert_eq!(p.serialized_len(), n);
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let (store, t) = setup(4, TransformerConfig::toy(), 22);
        let prior = TemporalPrior::from_map(&Tensor::zeros(&[12, 3, 3])).unwrap();
        assert!(matches!(
            t.encode(&store, &prior, &Tensor::zeros(&[12, 4, 3])),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            t.decode(&store, &prior, &Tensor::zeros(&[6, 3, 3])),
            Err(Error::Dimension(_))
        ));
        let bad = TransformerConfig {
            channels: 10,
            ..TransformerConfig::toy()
        };
        assert!(AtTrans::init(&mut ParamStore::new(), 4, &bad, &mut rng(0)).is_err());
    }

    #[test]
    fn swapped_query_role_changes_the_prior() {
        let (store, t) = setup(4, TransformerConfig::toy(), 23);
        let swapped = AtTrans {
            cfg: TransformerConfig {
                query: QueryRole::Current,
                ..t.cfg
            },
            ..t.clone()
        };
        let mut r = rng(24);
        let prior = TemporalPrior::from_map(&Tensor::randn(&[12, 4, 4], 1.0, &mut r)).unwrap();
        let ft = Tensor::randn(&[12, 4, 4], 1.0, &mut r);
        let a = t.encode(&store, &prior, &ft).unwrap();
        let b = swapped.encode(&store, &prior, &ft).unwrap();
        assert!(a.tokens().max_abs_diff(b.tokens()) > 1e-3);
    }

    #[test]
    fn encode_decode_gradients() {
        let (mut store, t) = setup(4, TransformerConfig::toy(), 25);
        randomise_all(&mut store, 0.3, 26);
        let mut r = rng(27);
        let raw = Tensor::randn(&[4, 3, 3], 1.0, &mut r);
        let adj = Tensor::randn(&[4, 3, 3], 1.0, &mut r);
        let all: Vec<ParamId> = store.ids().collect();
        let res = check_params("encode/decode", &store, &all, DEFAULT_STEP, 16, |g| {
            let rn = g.input(raw.clone());
            let an = g.input(adj.clone());
            let p0 = t.init_prior_node(g, rn);
            let ft = t.input_node(g, an);
            let (p1, refined) = t.step_node(g, p0, ft);
            let cat = g.concat_leading(&[p1, refined]);
            weighted_sum(g, cat, 5)
        });
        assert!(res.passed(DEFAULT_TOLERANCE), "{res:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn norm_outputs_are_standardised(seed in 0u64..10_000) {
            let (store, t) = setup(4, TransformerConfig::toy(), seed);
            let mut r = rng(seed + 1);
            let prior = TemporalPrior::from_map(&Tensor::randn(&[12, 3, 3], 2.0, &mut r)).unwrap();
            let ft = Tensor::randn(&[12, 3, 3], 2.0, &mut r);
            // Fresh norms have gamma = 1, beta = 0, so outputs are the raw
            // normalised values.
            let p = t.encode(&store, &prior, &ft).unwrap();
            let d = t.decode(&store, &p, &ft).unwrap();
            let dt = TemporalPrior::from_map(&d).unwrap();
            for tok in [p.tokens(), dt.tokens()] {
                for row in tok.data().chunks(12) {
                    let mu = row.iter().sum::<f64>() / 12.0;
                    let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 12.0;
                    prop_assert!(mu.abs() < 1e-6);
                    prop_assert!((var - 1.0).abs() < 1e-4);
                }
            }
        }
    }
}
