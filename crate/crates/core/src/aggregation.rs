//! Utterance-level aggregation: stacked multi-head self-attention,
//! statistic pooling, and the accent classifier head.
//!
//! The attention path is the transformer encoder (pre-norm variant) with
//! padded key positions masked out of the softmax. Q, K, V and output
//! projections are pure matrix products; per-head projections are column
//! slices of the full matrices. Statistic pooling concatenates the mean
//! and standard deviation over valid frames.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Dropout, LayerNorm, Linear, ParamStore, TrainState};
use crate::tape::NodeId;

pub const STAT_POOL_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    pub d_attn: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub n_layers: usize,
    pub d_accent: usize,
    /// width of the incoming embedding (d_emb)
    pub d_input: usize,
    pub dropout: f64,
    /// sinusoidal positions added after the input projection
    pub positional_encoding: bool,
}

impl AggregationConfig {
    /// Full-scale settings: 256-dim attention, 4 heads, 3 layers,
    /// 1024-dim feed-forward, 8 accents.
    pub fn full_scale(d_input: usize) -> Self {
        Self {
            d_attn: 256,
            d_ff: 1024,
            heads: 4,
            n_layers: 3,
            d_accent: 8,
            d_input,
            dropout: 0.1,
            positional_encoding: true,
        }
    }

    pub fn tiny(d_input: usize, d_accent: usize) -> Self {
        Self {
            d_attn: 8,
            d_ff: 16,
            heads: 2,
            n_layers: 1,
            d_accent,
            d_input,
            dropout: 0.0,
            positional_encoding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_attn % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_attn {} not divisible by {} heads",
                self.d_attn, self.heads
            )));
        }
        if self.d_attn == 0 || self.d_ff == 0 || self.n_layers == 0 || self.d_accent == 0 {
            return Err(Error::Config("aggregation dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One multi-head self-attention layer: bias-free Q/K/V/output
/// projections, softmax over valid key positions only.
pub struct MhaParams {
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
    pub d_attn: usize,
    pub heads: usize,
}

impl MhaParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_attn: usize, heads: usize, seed: u64) -> Self {
        let names = ["wq", "wk", "wv", "wo"].map(|s| format!("{prefix}.{s}"));
        for n in &names {
            if !store.contains(n) {
                store.insert(n, crate::nn::xavier(seed, n, d_attn, d_attn));
            }
        }
        let [wq, wk, wv, wo] = names;
        Self {
            wq,
            wk,
            wv,
            wo,
            d_attn,
            heads,
        }
    }
}

/// Multi-head self-attention over `x` (T x d_attn). `valid` marks how
/// many leading positions are real; keys beyond it receive no attention.
pub fn mha(
    ctx: &mut Ctx,
    x: NodeId,
    params: &MhaParams,
    valid: usize,
    trainable: bool,
) -> Result<NodeId> {
    let t_len = ctx.t.value(x).nrows();
    if valid == 0 || valid > t_len {
        return Err(Error::Contract(format!(
            "valid length {valid} out of range for {t_len} frames"
        )));
    }
    let d_k = params.d_attn / params.heads;
    let wq = ctx.bind(&params.wq, trainable);
    let wk = ctx.bind(&params.wk, trainable);
    let wv = ctx.bind(&params.wv, trainable);
    let wo = ctx.bind(&params.wo, trainable);
    let q = ctx.t.matmul(x, wq);
    let k = ctx.t.matmul(x, wk);
    let v = ctx.t.matmul(x, wv);
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qi = ctx.t.slice_cols(q, h * d_k, d_k);
        let ki = ctx.t.slice_cols(k, h * d_k, d_k);
        let vi = ctx.t.slice_cols(v, h * d_k, d_k);
        let kt = ctx.t.transpose(ki);
        let scores = ctx.t.matmul(qi, kt);
        let scaled = ctx.t.scale(scores, 1.0 / (d_k as f64).sqrt());
        let attn = ctx.t.softmax_rows_masked(scaled, valid);
        heads.push(ctx.t.matmul(attn, vi));
    }
    let cat = ctx.t.concat_cols(&heads);
    Ok(ctx.t.matmul(cat, wo))
}

/// Mean and standard deviation over the first `valid` frames,
/// concatenated to 1 x 2d. Population variance with a 1e-5 floor inside
/// the square root.
pub fn statistic_pool(ctx: &mut Ctx, x: NodeId, valid: usize) -> Result<NodeId> {
    let (t_len, d) = ctx.t.value(x).dim();
    if valid == 0 || valid > t_len {
        return Err(Error::Contract(format!(
            "valid length {valid} out of range for {t_len} frames"
        )));
    }
    let sliced = ctx.t.slice_rows(x, 0, valid);
    let mean = ctx.t.mean_rows(sliced);
    let neg_mean = ctx.t.scale(mean, -1.0);
    let centered = ctx.t.add_row(sliced, neg_mean);
    let sq = ctx.t.mul(centered, centered);
    let var = ctx.t.mean_rows(sq);
    let eps = ctx.t.leaf(Array2::from_elem((1, d), STAT_POOL_EPS));
    let var_eps = ctx.t.add(var, eps);
    let std = ctx.t.pow_const(var_eps, 0.5);
    Ok(ctx.t.concat_cols(&[mean, std]))
}

struct EncoderLayer {
    ln1: LayerNorm,
    attn: MhaParams,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

pub struct Aggregator {
    pub cfg: AggregationConfig,
    input_proj: Linear,
    layers: Vec<EncoderLayer>,
    pool_proj: Linear,
    classifier: Linear,
    dropout: Dropout,
}

/// Tape handles of one aggregation pass.
pub struct AggregateNodes {
    /// 1 x d_attn utterance embedding (pre-classifier)
    pub pooled: NodeId,
    /// 1 x d_accent logits
    pub logits: NodeId,
}

/// Evaluated prediction for one utterance.
#[derive(Clone, Debug)]
pub struct AccentPrediction {
    pub logits: Vec<f64>,
    pub pooled: Vec<f64>,
    pub predicted: usize,
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Aggregator {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: AggregationConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let input_proj = Linear::new(
            store,
            &format!("{prefix}.input_proj"),
            cfg.d_input,
            cfg.d_attn,
            seed,
        );
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let base = format!("{prefix}.layer{l}");
            layers.push(EncoderLayer {
                ln1: LayerNorm::new(store, &format!("{base}.ln1"), cfg.d_attn),
                attn: MhaParams::new(store, &format!("{base}.attn"), cfg.d_attn, cfg.heads, seed),
                ln2: LayerNorm::new(store, &format!("{base}.ln2"), cfg.d_attn),
                ff1: Linear::new(store, &format!("{base}.ff1"), cfg.d_attn, cfg.d_ff, seed),
                ff2: Linear::new(store, &format!("{base}.ff2"), cfg.d_ff, cfg.d_attn, seed),
            });
        }
        let pool_proj = Linear::new(
            store,
            &format!("{prefix}.pool_proj"),
            2 * cfg.d_attn,
            cfg.d_attn,
            seed,
        );
        let classifier = Linear::new(
            store,
            &format!("{prefix}.classifier"),
            cfg.d_attn,
            cfg.d_accent,
            seed,
        );
        let dropout = Dropout::new(cfg.dropout);
        Ok(Self {
            cfg,
            input_proj,
            layers,
            pool_proj,
            classifier,
            dropout,
        })
    }

    /// Sinusoidal positions for `t_len` frames.
    fn positional_encoding(&self, t_len: usize) -> Array2<f64> {
        let d = self.cfg.d_attn;
        Array2::from_shape_fn((t_len, d), |(pos, j)| {
            let i = j / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
    }

    /// Map a T x d_input embedding to accent logits. Rows at `valid` and
    /// beyond are padding and cannot influence the output.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: NodeId,
        valid: usize,
        trainable: bool,
        mut train: Option<&mut TrainState>,
    ) -> Result<AggregateNodes> {
        let t_len = ctx.t.value(x).nrows();
        if valid == 0 || valid > t_len {
            return Err(Error::Contract(format!(
                "valid length {valid} out of range for {t_len} frames"
            )));
        }
        let mut h = self.input_proj.forward(ctx, x, trainable);
        if self.cfg.positional_encoding {
            let pe = ctx.t.leaf(self.positional_encoding(t_len));
            h = ctx.t.add(h, pe);
        }
        for layer in &self.layers {
            let normed = layer.ln1.forward(ctx, h, trainable);
            let attended = mha(ctx, normed, &layer.attn, valid, trainable)?;
            let attended = self.dropout.forward(ctx, attended, train.as_deref_mut());
            h = ctx.t.add(h, attended);
            let normed = layer.ln2.forward(ctx, h, trainable);
            let ff = layer.ff1.forward(ctx, normed, trainable);
            let ff = ctx.t.relu(ff);
            let ff = layer.ff2.forward(ctx, ff, trainable);
            let ff = self.dropout.forward(ctx, ff, train.as_deref_mut());
            h = ctx.t.add(h, ff);
        }
        let stats = statistic_pool(ctx, h, valid)?;
        let pooled = self.pool_proj.forward(ctx, stats, trainable);
        let logits = self.classifier.forward(ctx, pooled, trainable);
        Ok(AggregateNodes { pooled, logits })
    }

    /// Convenience eval pass returning plain values.
    pub fn predict(&self, store: &ParamStore, x: &Array2<f64>, valid: usize) -> Result<AccentPrediction> {
        let mut ctx = Ctx::new(store);
        let xid = ctx.t.leaf(x.clone());
        let nodes = self.forward(&mut ctx, xid, valid, false, None)?;
        let logits: Vec<f64> = ctx.t.value(nodes.logits).iter().cloned().collect();
        let pooled: Vec<f64> = ctx.t.value(nodes.pooled).iter().cloned().collect();
        let predicted = argmax_lowest(&logits);
        Ok(AccentPrediction {
            logits,
            pooled,
            predicted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_model_params;
    use crate::nn::grads_by_name;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_m(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Scalar transcription of scaled dot-product attention and the
    /// multi-head combination, using per-head sub-matrices.
    fn mha_by_hand(
        x: &Array2<f64>,
        wq: &Array2<f64>,
        wk: &Array2<f64>,
        wv: &Array2<f64>,
        wo: &Array2<f64>,
        heads: usize,
    ) -> Array2<f64> {
        let (t_len, d) = x.dim();
        let d_k = d / heads;
        let mut concat = Array2::zeros((t_len, d));
        for h in 0..heads {
            // per-head projections: columns h*d_k .. (h+1)*d_k
            let proj = |w: &Array2<f64>, t: usize, j: usize| -> f64 {
                (0..d).map(|i| x[[t, i]] * w[[i, h * d_k + j]]).sum()
            };
            for t in 0..t_len {
                // scores against every key, scaled by 1/sqrt(d_k)
                let mut scores = vec![0.0; t_len];
                for s in 0..t_len {
                    let mut dot = 0.0;
                    for j in 0..d_k {
                        dot += proj(wq, t, j) * proj(wk, s, j);
                    }
                    scores[s] = dot / (d_k as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                let weights: Vec<f64> = scores.iter().map(|s| (s - m).exp() / z).collect();
                for j in 0..d_k {
                    let mut out = 0.0;
                    for s in 0..t_len {
                        out += weights[s] * proj(wv, s, j);
                    }
                    concat[[t, h * d_k + j]] = out;
                }
            }
        }
        let mut y = Array2::zeros((t_len, d));
        for t in 0..t_len {
            for j in 0..d {
                y[[t, j]] = (0..d).map(|i| concat[[t, i]] * wo[[i, j]]).sum();
            }
        }
        y
    }

    #[test]
    fn mha_matches_the_scalar_oracle() {
        let (d, heads) = (4usize, 2usize);
        let mut store = ParamStore::new();
        let params = MhaParams::new(&mut store, "attn", d, heads, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for n in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            *store.get_mut(n) = rand_m(&mut rng, d, d);
        }
        let x = rand_m(&mut rng, 3, d);

        let expected = mha_by_hand(
            &x,
            store.get("attn.wq"),
            store.get("attn.wk"),
            store.get("attn.wv"),
            store.get("attn.wo"),
            heads,
        );
        let mut ctx = Ctx::new(&store);
        let xid = ctx.t.leaf(x.clone());
        let out = mha(&mut ctx, xid, &params, 3, false).unwrap();
        for (a, b) in ctx.t.value(out).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn mha_singleton_sequence_is_the_value_projection() {
        let (d, heads) = (6usize, 3usize);
        let mut store = ParamStore::new();
        let params = MhaParams::new(&mut store, "attn", d, heads, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_m(&mut rng, 1, d);
        let mut ctx = Ctx::new(&store);
        let xid = ctx.t.leaf(x.clone());
        let out = mha(&mut ctx, xid, &params, 1, false).unwrap();
        // with one frame the softmax weight is exactly 1
        let expected = x.dot(store.get("attn.wv")).dot(store.get("attn.wo"));
        for (a, b) in ctx.t.value(out).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // zero valid length is a contract error
        let mut ctx = Ctx::new(&store);
        let xid = ctx.t.leaf(x);
        assert!(matches!(
            mha(&mut ctx, xid, &params, 0, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn statistic_pool_examples() {
        let store = ParamStore::new();
        // constant sequence: std = sqrt(eps)
        let mut ctx = Ctx::new(&store);
        let x = ctx.t.leaf(Array2::from_elem((4, 3), 2.5));
        let p = statistic_pool(&mut ctx, x, 4).unwrap();
        let v = ctx.t.value(p);
        assert_eq!(v.dim(), (1, 6));
        for j in 0..3 {
            assert!((v[[0, j]] - 2.5).abs() < 1e-12);
            assert!((v[[0, 3 + j]] - STAT_POOL_EPS.sqrt()).abs() < 1e-12);
        }
        // single frame: mean is the frame itself
        let mut ctx = Ctx::new(&store);
        let x = ctx.t.leaf(ndarray::array![[1.0, -2.0]]);
        let p = statistic_pool(&mut ctx, x, 1).unwrap();
        let v = ctx.t.value(p);
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[0, 1]], -2.0);
        assert!((v[[0, 2]] - STAT_POOL_EPS.sqrt()).abs() < 1e-12);
        // frames {0, 2}: mean 1, std sqrt(1 + eps)
        let mut ctx = Ctx::new(&store);
        let x = ctx.t.leaf(ndarray::array![[0.0], [2.0]]);
        let p = statistic_pool(&mut ctx, x, 2).unwrap();
        let v = ctx.t.value(p);
        assert!((v[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((v[[0, 1]] - (1.0 + STAT_POOL_EPS).sqrt()).abs() < 1e-12);
        // pooling ignores padded rows entirely
        let mut ctx = Ctx::new(&store);
        let x = ctx.t.leaf(ndarray::array![[0.0], [2.0], [999.0]]);
        let p = statistic_pool(&mut ctx, x, 2).unwrap();
        assert!((ctx.t.value(p)[[0, 0]] - 1.0).abs() < 1e-12);
        // empty valid range is a contract error
        let mut ctx = Ctx::new(&store);
        let x = ctx.t.leaf(Array2::zeros((2, 2)));
        assert!(statistic_pool(&mut ctx, x, 0).is_err());
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_m(&mut rng, 6, 4);
        let mut perm_x = x.clone();
        for (dst, &src) in [5usize, 2, 0, 1, 4, 3].iter().enumerate() {
            perm_x.row_mut(dst).assign(&x.row(src));
        }
        let pool = |m: &Array2<f64>| {
            let mut ctx = Ctx::new(&store);
            let id = ctx.t.leaf(m.clone());
            let p = statistic_pool(&mut ctx, id, 6).unwrap();
            ctx.t.value(p).clone()
        };
        let (a, b) = (pool(&x), pool(&perm_x));
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_frames_never_change_the_logits() {
        let cfg = AggregationConfig::tiny(5, 3);
        let mut store = ParamStore::new();
        let agg = Aggregator::new(&mut store, "agg", cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut a = rand_m(&mut rng, 7, 5);
        let mut b = a.clone();
        // different garbage in the padded tail
        for t in 4..7 {
            for j in 0..5 {
                a[[t, j]] = 100.0;
                b[[t, j]] = -55.0 * (t + j) as f64;
            }
        }
        let pa = agg.predict(&store, &a, 4).unwrap();
        let pb = agg.predict(&store, &b, 4).unwrap();
        for (x, y) in pa.logits.iter().zip(&pb.logits) {
            assert!((x - y).abs() < 1e-9, "padding leaked into logits");
        }
    }

    #[test]
    fn full_scale_logits_shape_is_eight() {
        let cfg = AggregationConfig::full_scale(16);
        let mut store = ParamStore::new();
        let agg = Aggregator::new(&mut store, "agg", cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_m(&mut rng, 5, 16);
        let pred = agg.predict(&store, &x, 5).unwrap();
        assert_eq!(pred.logits.len(), 8);
        assert_eq!(pred.pooled.len(), 256);
    }

    #[test]
    fn aggregate_permutation_behaviour_matches_positional_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_m(&mut rng, 5, 4);
        let mut perm_x = x.clone();
        for (dst, &src) in [4usize, 0, 3, 1, 2].iter().enumerate() {
            perm_x.row_mut(dst).assign(&x.row(src));
        }
        // positions disabled: fully permutation invariant
        let mut cfg = AggregationConfig::tiny(4, 3);
        cfg.positional_encoding = false;
        let mut store = ParamStore::new();
        let agg = Aggregator::new(&mut store, "agg", cfg, 4).unwrap();
        let pa = agg.predict(&store, &x, 5).unwrap();
        let pb = agg.predict(&store, &perm_x, 5).unwrap();
        for (a, b) in pa.logits.iter().zip(&pb.logits) {
            assert!((a - b).abs() < 1e-9);
        }
        // positions enabled: the permutation must be visible
        let cfg = AggregationConfig::tiny(4, 3);
        let mut store = ParamStore::new();
        let agg = Aggregator::new(&mut store, "agg", cfg, 4).unwrap();
        let pa = agg.predict(&store, &x, 5).unwrap();
        let pb = agg.predict(&store, &perm_x, 5).unwrap();
        let diff: f64 = pa
            .logits
            .iter()
            .zip(&pb.logits)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "positional encoding had no effect");
    }

    #[test]
    fn argmax_is_invariant_to_shift_and_positive_scale() {
        let logits = [0.3, 1.7, 1.7, -0.2];
        let base = argmax_lowest(&logits);
        assert_eq!(base, 1); // tie resolves to the lowest index
        let shifted: Vec<f64> = logits.iter().map(|x| x + 5.0).collect();
        let scaled: Vec<f64> = logits.iter().map(|x| x * 3.0).collect();
        assert_eq!(argmax_lowest(&shifted), base);
        assert_eq!(argmax_lowest(&scaled), base);
    }

    #[test]
    fn attention_rows_sum_to_one_for_any_input() {
        let (d, heads) = (8usize, 4usize);
        let mut store = ParamStore::new();
        let params = MhaParams::new(&mut store, "attn", d, heads, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // verified indirectly: pull the softmax node out by reconstructing
        // the score path and checking normalization over valid columns
        for valid in [1usize, 3, 5] {
            let x = rand_m(&mut rng, 5, d);
            let mut ctx = Ctx::new(&store);
            let xid = ctx.t.leaf(x);
            let wq = ctx.bind(&params.wq, false);
            let wk = ctx.bind(&params.wk, false);
            let q = ctx.t.matmul(xid, wq);
            let k = ctx.t.matmul(xid, wk);
            let d_k = d / heads;
            let qi = ctx.t.slice_cols(q, 0, d_k);
            let ki = ctx.t.slice_cols(k, 0, d_k);
            let kt = ctx.t.transpose(ki);
            let scores = ctx.t.matmul(qi, kt);
            let scaled = ctx.t.scale(scores, 1.0 / (d_k as f64).sqrt());
            let attn = ctx.t.softmax_rows_masked(scaled, valid);
            for row in ctx.t.value(attn).rows() {
                let s: f64 = row.iter().take(valid).sum();
                assert!((s - 1.0).abs() < 1e-6);
                for &masked in row.iter().skip(valid) {
                    assert_eq!(masked, 0.0);
                }
            }
        }
    }

    #[test]
    fn aggregate_gradients_match_finite_differences() {
        let cfg = AggregationConfig::tiny(5, 3);
        let mut store = ParamStore::new();
        let agg = Aggregator::new(&mut store, "agg", cfg, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_m(&mut rng, 3, 5);
        let w = Array2::from_shape_fn((1, 3), |(_, j)| 0.4 - 0.3 * j as f64);

        fn loss_of<'a>(
            agg: &Aggregator,
            x: &Array2<f64>,
            w: &Array2<f64>,
            store: &'a ParamStore,
        ) -> (Ctx<'a>, crate::tape::NodeId) {
            let mut ctx = Ctx::new(store);
            let xid = ctx.t.leaf(x.clone());
            let out = agg.forward(&mut ctx, xid, 3, true, None).unwrap();
            let ww = ctx.t.leaf(w.clone());
            let weighted = ctx.t.mul(out.logits, ww);
            let l = ctx.t.sum_all(weighted);
            (ctx, l)
        }
        let (mut ctx, loss) = loss_of(&agg, &x, &w, &store);
        let grads = ctx.t.backward(loss);
        let analytic = grads_by_name(&store, &ctx.t, &grads);
        let names: Vec<String> = analytic.keys().cloned().collect();
        let worst = check_model_params(&store, &names, &analytic, 1e-4, |s| {
            let (ctx, l) = loss_of(&agg, &x, &w, s);
            ctx.t.scalar(l)
        });
        assert!(worst < 1e-4, "aggregate gradients: {worst:.3e}");
    }
}
