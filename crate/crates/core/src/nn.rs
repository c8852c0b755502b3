//! Layers, parameter storage and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! (`am_t.block0.sub1.conv.w`). A [`Ctx`] wraps one tape and binds each
//! parameter at most once per forward pass, either trainable (gradient
//! tracked, optimizer visible) or frozen (plain constant).

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tape::{Gradients, NodeId, Tape};

/// Named parameter tensors. BTreeMap so every iteration is ordered and
/// checkpoints/checksums are reproducible.
#[derive(Default, Clone)]
pub struct ParamStore {
    map: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Copy every `src_prefix.*` entry of `other` into this store under
    /// `dst_prefix.*`. Returns how many tensors were copied.
    pub fn adopt(&mut self, other: &ParamStore, src_prefix: &str, dst_prefix: &str) -> usize {
        let mut n = 0;
        for (name, value) in &other.map {
            if let Some(rest) = name.strip_prefix(src_prefix) {
                self.map.insert(format!("{dst_prefix}{rest}"), value.clone());
                n += 1;
            }
        }
        n
    }

    /// Like [`ParamStore::adopt`] but copies only shape-compatible
    /// tensors that already exist here, leaving the rest at their fresh
    /// initialization. Returns (copied, skipped). Used when a checkpoint
    /// head was trained for a different label alphabet.
    pub fn adopt_matching(
        &mut self,
        other: &ParamStore,
        src_prefix: &str,
        dst_prefix: &str,
    ) -> (usize, usize) {
        let mut copied = 0;
        let mut skipped = 0;
        for (name, value) in &other.map {
            if let Some(rest) = name.strip_prefix(src_prefix) {
                let dst = format!("{dst_prefix}{rest}");
                match self.map.get_mut(&dst) {
                    Some(existing) if existing.dim() == value.dim() => {
                        *existing = value.clone();
                        copied += 1;
                    }
                    _ => skipped += 1,
                }
            }
        }
        (copied, skipped)
    }

    /// SHA-256 over names and raw little-endian bytes, in name order.
    /// Restricted to names starting with `prefix` ("" hashes everything).
    pub fn checksum(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, value) in &self.map {
            if !name.starts_with(prefix) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            for v in value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Stable 64-bit FNV-1a, used to derive per-parameter init seeds so that
/// initialization does not depend on construction order.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive_seed(base: u64, label: &str) -> u64 {
    fnv1a(&[&base.to_le_bytes()[..], label.as_bytes()].concat())
}

fn init_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name))
}

/// Xavier-uniform matrix.
pub fn xavier(seed: u64, name: &str, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = init_rng(seed, name);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Small uniform noise, used for squeeze-excite weights so the channel
/// gate starts out near 0.5.
pub fn small_uniform(seed: u64, name: &str, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    let mut rng = init_rng(seed, name);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

// ── Forward context ──────────────────────────────────────────────────

/// Mutable training-pass state: dropout randomness and pending batch-norm
/// running-statistic updates (applied by the trainer after the step).
pub struct TrainState {
    pub rng: ChaCha8Rng,
    pub bn_updates: Vec<(String, Array2<f64>, Array2<f64>)>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }
}

/// One forward pass: a tape plus the store it binds parameters from.
pub struct Ctx<'s> {
    pub t: Tape,
    pub store: &'s ParamStore,
    trainable_bound: BTreeMap<String, NodeId>,
    frozen_bound: BTreeMap<String, NodeId>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            t: Tape::new(),
            store,
            trainable_bound: BTreeMap::new(),
            frozen_bound: BTreeMap::new(),
        }
    }

    /// Bind a parameter, caching so each name maps to one leaf per pass.
    pub fn bind(&mut self, name: &str, trainable: bool) -> NodeId {
        if trainable {
            debug_assert!(
                !self.frozen_bound.contains_key(name),
                "{name} bound both frozen and trainable"
            );
            if let Some(&id) = self.trainable_bound.get(name) {
                return id;
            }
            let id = self.t.param(name, self.store.get(name).clone());
            self.trainable_bound.insert(name.to_string(), id);
            id
        } else {
            debug_assert!(
                !self.trainable_bound.contains_key(name),
                "{name} bound both frozen and trainable"
            );
            if let Some(&id) = self.frozen_bound.get(name) {
                return id;
            }
            let id = self.t.leaf(self.store.get(name).clone());
            self.frozen_bound.insert(name.to_string(), id);
            id
        }
    }
}

// ── Layers ───────────────────────────────────────────────────────────

/// Fully connected layer; also serves as the pointwise (kernel-size-1)
/// convolution used for channel reshaping.
#[derive(Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, seed: u64) -> Self {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        if !store.contains(&w) {
            store.insert(&w, xavier(seed, &w, d_in, d_out));
            store.insert(&b, Array2::zeros((1, d_out)));
        }
        Self { w, b, d_in, d_out }
    }

    /// Same shape contract, but initialized with small uniform noise.
    pub fn new_small(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        seed: u64,
        bound: f64,
    ) -> Self {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        if !store.contains(&w) {
            store.insert(&w, small_uniform(seed, &w, d_in, d_out, bound));
            store.insert(&b, Array2::zeros((1, d_out)));
        }
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId, trainable: bool) -> NodeId {
        let w = ctx.bind(&self.w, trainable);
        let b = ctx.bind(&self.b, trainable);
        let y = ctx.t.matmul(x, w);
        ctx.t.add_row(y, b)
    }
}

/// 1-D convolution over the time axis with "same"-style padding:
/// the output length is ceil(T / stride), right-padding with zeros when
/// the tail window runs past the input.
#[derive(Clone)]
pub struct Conv1d {
    pub w: String,
    pub b: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        seed: u64,
    ) -> Self {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        if !store.contains(&w) {
            store.insert(&w, xavier(seed, &w, kernel * c_in, c_out));
            store.insert(&b, Array2::zeros((1, c_out)));
        }
        Self {
            w,
            b,
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        t_in.div_ceil(self.stride)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId, trainable: bool) -> NodeId {
        let t_in = ctx.t.value(x).nrows();
        let t_out = self.out_len(t_in);
        let pad_left = (self.kernel - 1) / 2;
        let span = (t_out - 1) * self.stride + self.kernel;
        let pad_right = span.saturating_sub(t_in + pad_left);
        let w = ctx.bind(&self.w, trainable);
        let b = ctx.bind(&self.b, trainable);
        ctx.t
            .conv1d(x, w, b, self.kernel, self.stride, pad_left, pad_right)
    }
}

/// Per-channel batch normalization over the time axis. Training passes
/// normalize with the statistics of the current sequence and queue a
/// running-statistic update; eval passes use the running statistics, so
/// a frozen model is independent of input order.
#[derive(Clone)]
pub struct BatchNorm {
    pub gamma: String,
    pub beta: String,
    pub run_mean: String,
    pub run_var: String,
    pub dim: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gamma = format!("{prefix}.gamma");
        let beta = format!("{prefix}.beta");
        let run_mean = format!("{prefix}.run_mean");
        let run_var = format!("{prefix}.run_var");
        if !store.contains(&gamma) {
            store.insert(&gamma, Array2::ones((1, dim)));
            store.insert(&beta, Array2::zeros((1, dim)));
            store.insert(&run_mean, Array2::zeros((1, dim)));
            store.insert(&run_var, Array2::ones((1, dim)));
        }
        Self {
            gamma,
            beta,
            run_mean,
            run_var,
            dim,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: NodeId,
        trainable: bool,
        train: Option<&mut TrainState>,
    ) -> NodeId {
        let gamma = ctx.bind(&self.gamma, trainable);
        let beta = ctx.bind(&self.beta, trainable);
        match train {
            Some(state) => {
                let mu = ctx.t.mean_rows(x);
                let neg_mu = ctx.t.scale(mu, -1.0);
                let centered = ctx.t.add_row(x, neg_mu);
                let sq = ctx.t.mul(centered, centered);
                let var = ctx.t.mean_rows(sq);
                let eps_row = ctx.t.leaf(Array2::from_elem((1, self.dim), self.eps));
                let var_eps = ctx.t.add(var, eps_row);
                let inv = ctx.t.pow_const(var_eps, -0.5);
                let xhat = ctx.t.mul_row(centered, inv);
                state.bn_updates.push((
                    self.run_mean.clone(),
                    ctx.t.value(mu).clone(),
                    ctx.t.value(var).clone(),
                ));
                let scaled = ctx.t.mul_row(xhat, gamma);
                ctx.t.add_row(scaled, beta)
            }
            None => {
                let mean = ctx.store.get(&self.run_mean);
                let var = ctx.store.get(&self.run_var);
                let neg_mu = ctx.t.leaf(mean * -1.0);
                let inv = ctx.t.leaf(var.mapv(|v| 1.0 / (v + self.eps).sqrt()));
                let centered = ctx.t.add_row(x, neg_mu);
                let xhat = ctx.t.mul_row(centered, inv);
                let scaled = ctx.t.mul_row(xhat, gamma);
                ctx.t.add_row(scaled, beta)
            }
        }
    }

    /// Fold a queued (mean, var) pair into the running statistics.
    pub fn apply_update(
        store: &mut ParamStore,
        run_mean: &str,
        mean: &Array2<f64>,
        var: &Array2<f64>,
        momentum: f64,
    ) {
        let run_var = run_mean.replace("run_mean", "run_var");
        {
            let rm = store.get_mut(run_mean);
            *rm = &*rm * (1.0 - momentum) + mean * momentum;
        }
        let rv = store.get_mut(&run_var);
        *rv = &*rv * (1.0 - momentum) + var * momentum;
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gamma = format!("{prefix}.gamma");
        let beta = format!("{prefix}.beta");
        if !store.contains(&gamma) {
            store.insert(&gamma, Array2::ones((1, dim)));
            store.insert(&beta, Array2::zeros((1, dim)));
        }
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId, trainable: bool) -> NodeId {
        let gamma = ctx.bind(&self.gamma, trainable);
        let beta = ctx.bind(&self.beta, trainable);
        ctx.t.layer_norm_rows(x, gamma, beta, self.eps)
    }
}

/// Inverted dropout; identity when no training state is supplied.
#[derive(Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Self { rate }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId, train: Option<&mut TrainState>) -> NodeId {
        let state = match train {
            Some(s) if self.rate > 0.0 => s,
            _ => return x,
        };
        let keep = 1.0 - self.rate;
        let dim = ctx.t.value(x).dim();
        let mask = Array2::from_shape_fn(dim, |_| {
            if state.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = ctx.t.leaf(mask);
        ctx.t.mul(x, m)
    }
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Adam with bias correction. Moment buffers are keyed by parameter name
/// and created lazily.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Aggregate gradients over all bindings of the tape (a parameter may
    /// be bound by several sub-graphs) and apply one update.
    pub fn step(&mut self, store: &mut ParamStore, tape: &Tape, grads: &Gradients) {
        let mut total: BTreeMap<&str, Array2<f64>> = BTreeMap::new();
        for binding in tape.bindings() {
            let shape = store.get(&binding.name).dim();
            let g = grads.of(binding.id, shape);
            match total.get_mut(binding.name.as_str()) {
                Some(acc) => *acc += &g,
                None => {
                    total.insert(&binding.name, g);
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in total {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *m = &*m * self.beta1 + &g * (1.0 - self.beta1);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *v = &*v * self.beta2 + &(&g * &g) * (1.0 - self.beta2);
            let m_hat = &*m / bc1;
            let v_hat = &*v / bc2;
            let p = store.get_mut(name);
            *p -= &(m_hat / (v_hat.mapv(f64::sqrt) + self.eps) * self.lr);
        }
    }
}

/// Aggregate a backward pass into per-parameter gradients, summing over
/// repeated bindings the same way the optimizer does.
pub fn grads_by_name(
    store: &ParamStore,
    tape: &Tape,
    grads: &Gradients,
) -> BTreeMap<String, Array2<f64>> {
    let mut total: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for binding in tape.bindings() {
        let g = grads.of(binding.id, store.get(&binding.name).dim());
        match total.get_mut(&binding.name) {
            Some(acc) => *acc += &g,
            None => {
                total.insert(binding.name.clone(), g);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", array![[4.0, -3.0]]);
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let mut ctx = Ctx::new(&store);
            let x = ctx.bind("x", true);
            let sq = ctx.t.mul(x, x);
            let loss = ctx.t.sum_all(sq);
            let grads = ctx.t.backward(loss);
            let tape = ctx.t;
            adam.step(&mut store, &tape, &grads);
        }
        let x = store.get("x");
        assert!(x[[0, 0]].abs() < 1e-3 && x[[0, 1]].abs() < 1e-3);
    }

    #[test]
    fn adam_sums_gradients_over_repeated_bindings() {
        // One binding used twice in the graph vs the same loss written out
        // once: x appears in both halves, gradient must be the sum.
        let mut store = ParamStore::new();
        store.insert("x", array![[2.0]]);
        let mut ctx = Ctx::new(&store);
        let x1 = ctx.bind("x", true);
        let x2 = ctx.bind("x", true);
        assert_eq!(x1, x2, "binding cache should reuse the leaf");
        let y = ctx.t.mul(x1, x2); // x^2
        let loss = ctx.t.sum_all(y);
        let grads = ctx.t.backward(loss);
        assert_eq!(grads.of(x1, (1, 1))[[0, 0]], 4.0); // d(x^2)/dx at 2
    }

    #[test]
    fn batch_norm_eval_is_affine_and_train_normalizes() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = array![[1.0, 10.0], [3.0, 30.0], [5.0, 50.0]];

        // eval with default running stats (mean 0, var 1): y ~ x
        let mut ctx = Ctx::new(&store);
        let xid = ctx.t.leaf(x.clone());
        let y = bn.forward(&mut ctx, xid, true, None);
        let yv = ctx.t.value(y);
        assert!((yv[[0, 0]] - 1.0).abs() < 1e-4);

        // train mode: output columns have ~zero mean, unit variance
        let mut state = TrainState::new(0);
        let mut ctx = Ctx::new(&store);
        let xid = ctx.t.leaf(x.clone());
        let y = bn.forward(&mut ctx, xid, true, Some(&mut state));
        let yv = ctx.t.value(y);
        for j in 0..2 {
            let col: Vec<f64> = (0..3).map(|i| yv[[i, j]]).collect();
            let mean = col.iter().sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-10);
        }
        assert_eq!(state.bn_updates.len(), 1);
        let (name, mean, var) = &state.bn_updates[0];
        assert_eq!(name, "bn.run_mean");
        assert!((mean[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((var[[0, 1]] - 800.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let mut store = ParamStore::new();
        store.insert("x", Array2::ones((4, 4)));
        let drop = Dropout::new(0.5);

        let mut ctx = Ctx::new(&store);
        let x = ctx.bind("x", false);
        let y = drop.forward(&mut ctx, x, None);
        assert_eq!(x, y);

        let run = |seed| {
            let mut state = TrainState::new(seed);
            let mut ctx = Ctx::new(&store);
            let x = ctx.bind("x", false);
            let y = drop.forward(&mut ctx, x, Some(&mut state));
            ctx.t.value(y).clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn checksum_changes_with_values_and_respects_prefix() {
        let mut store = ParamStore::new();
        store.insert("a.w", array![[1.0]]);
        store.insert("b.w", array![[2.0]]);
        let before = store.checksum("a.");
        let all_before = store.checksum("");
        *store.get_mut("b.w") = array![[3.0]];
        assert_eq!(store.checksum("a."), before);
        assert_ne!(store.checksum(""), all_before);
    }
}
