//! Model assembly and the four training regimes: accent-only training,
//! ASR-initialized training, ASR multi-task training, and the hybrid
//! setup that fuses a frozen reference acoustic model into the trainable
//! one. The combined objective is `l = l_c + lambda * l_asr`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::acoustic::{greedy_ctc_decode, levenshtein, AcousticConfig, AcousticModel};
use crate::aggregation::{argmax_lowest, AggregationConfig, Aggregator};
use crate::checkpoint::Checkpoint;
use crate::data::UtteranceRecord;
use crate::error::{Error, Result};
use crate::features::{self, FeatureSequence, SpecAugPolicy};
use crate::fusion::{FusionBlock, FusionConfig, FusionMode};
use crate::nn::{derive_seed, Adam, BatchNorm, Ctx, ParamStore, TrainState};
use crate::tape::NodeId;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// train the whole model for accent recognition only
    ArOnly,
    /// initialize the acoustic model from an ASR checkpoint, then train
    /// for accent recognition only
    AsrInit,
    /// ASR-initialized plus the auxiliary CTC task during training
    Mtl,
    /// multi-task plus the frozen reference acoustic model and fusion
    Hybrid,
}

impl Regime {
    pub fn uses_ctc(self) -> bool {
        matches!(self, Regime::Mtl | Regime::Hybrid)
    }

    pub fn wants_pretrained_init(self) -> bool {
        matches!(self, Regime::AsrInit | Regime::Mtl | Regime::Hybrid)
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::ArOnly => write!(f, "ar_only"),
            Regime::AsrInit => write!(f, "asr_init"),
            Regime::Mtl => write!(f, "mtl"),
            Regime::Hybrid => write!(f, "hybrid"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub spec_augment: Option<SpecAugPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Mtl,
            lambda: 0.1,
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 15,
            seed: 0,
            spec_augment: None,
        }
    }
}

/// Full architecture description; the checkpoint config echo.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub acoustic: AcousticConfig,
    pub aggregation: AggregationConfig,
    /// present in hybrid assemblies
    pub fusion: Option<FusionConfig>,
}

impl ModelConfig {
    pub fn desk(n_accents: usize) -> Self {
        let acoustic = AcousticConfig::desk();
        let mut aggregation = AggregationConfig::full_scale(acoustic.d_emb);
        aggregation.d_accent = n_accents;
        Self {
            acoustic,
            aggregation,
            fusion: None,
        }
    }

    pub fn full_scale() -> Self {
        let acoustic = AcousticConfig::full_scale();
        let aggregation = AggregationConfig::full_scale(acoustic.d_emb);
        Self {
            acoustic,
            aggregation,
            fusion: None,
        }
    }

    pub fn with_fusion(mut self, mode: FusionMode, squeeze_ratio: usize) -> Self {
        self.fusion = Some(FusionConfig {
            mode,
            d_emb: self.acoustic.d_emb,
            squeeze_ratio,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.acoustic.validate()?;
        self.aggregation.validate()?;
        if self.aggregation.d_input != self.acoustic.d_emb {
            return Err(Error::Config(format!(
                "aggregation expects {} input dims, acoustic emits {}",
                self.aggregation.d_input, self.acoustic.d_emb
            )));
        }
        if let Some(f) = &self.fusion {
            f.validate()?;
            if f.d_emb != self.acoustic.d_emb {
                return Err(Error::Config("fusion width must equal d_emb".into()));
            }
        }
        Ok(())
    }

    pub fn echo_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// The assembled accent recognizer. The reference acoustic model, when
/// present, is always bound frozen and always runs in eval mode.
pub struct AccentModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub am_t: AcousticModel,
    pub am_f: Option<AcousticModel>,
    pub fusion: Option<FusionBlock>,
    pub agg: Aggregator,
}

pub const PREFIX_TRAINABLE_AM: &str = "am_t";
pub const PREFIX_FROZEN_AM: &str = "am_f";

/// Named intermediate activations of one evaluated utterance.
pub struct ActivationBundle {
    pub trainable_embedding: Array2<f64>,
    pub reference_embedding: Option<Array2<f64>>,
    pub merged_embedding: Array2<f64>,
    pub phoneme_logits: Array2<f64>,
    pub channel_attention: Option<Vec<f64>>,
    pub pooled: Vec<f64>,
    pub accent_logits: Vec<f64>,
    pub predicted: usize,
}

/// Tape handles of one training-mode forward pass.
pub struct ModelNodes {
    pub phoneme_logits: NodeId,
    pub accent_logits: NodeId,
    pub pooled: NodeId,
    pub channel_attention: Option<NodeId>,
    pub valid_frames: usize,
}

/// Build a model for a regime. `init_am` seeds the trainable acoustic
/// model from an ASR checkpoint (exact copy); `frozen_am` installs the
/// reference model and is mandatory whenever fusion is configured.
pub fn build_model(
    cfg: &ModelConfig,
    seed: u64,
    init_am: Option<&Checkpoint>,
    frozen_am: Option<&Checkpoint>,
) -> Result<AccentModel> {
    cfg.validate()?;
    if cfg.fusion.is_some() && frozen_am.is_none() {
        return Err(Error::Config(
            "hybrid assembly requires a frozen reference checkpoint".into(),
        ));
    }
    let mut cfg_mut = cfg.clone();
    let mut model = build_model_unchecked(&mut cfg_mut, seed, frozen_am.is_some())?;

    let acoustic_echo = serde_json::to_string(&cfg.acoustic)?;
    for (ckpt, dst, what) in [
        (init_am, PREFIX_TRAINABLE_AM, "init"),
        (frozen_am, PREFIX_FROZEN_AM, "frozen"),
    ] {
        let Some(ckpt) = ckpt else { continue };
        if ckpt.config_json != acoustic_echo {
            return Err(Error::Checkpoint(format!(
                "{what} checkpoint config mismatch:\n  stored:   {}\n  expected: {}",
                ckpt.config_json, acoustic_echo
            )));
        }
        let n = model.store.adopt(&ckpt.params, "am.", &format!("{dst}."));
        if n == 0 {
            return Err(Error::Checkpoint(format!(
                "{what} checkpoint holds no am.* tensors"
            )));
        }
    }
    Ok(model)
}

/// Build a model whose label alphabet differs from the checkpoints'
/// (degraded corpora grow the CTC head): configs must agree on
/// everything except `d_label`, and only shape-compatible tensors are
/// adopted — the heads stay freshly initialized.
pub fn build_model_adopt_body(
    cfg: &ModelConfig,
    seed: u64,
    init_am: Option<&Checkpoint>,
    frozen_am: Option<&Checkpoint>,
) -> Result<AccentModel> {
    cfg.validate()?;
    if cfg.fusion.is_some() && frozen_am.is_none() {
        return Err(Error::Config(
            "hybrid assembly requires a frozen reference checkpoint".into(),
        ));
    }
    let mut cfg_mut = cfg.clone();
    let mut model = build_model_unchecked(&mut cfg_mut, seed, frozen_am.is_some())?;
    for (ckpt, dst) in [
        (init_am, PREFIX_TRAINABLE_AM),
        (frozen_am, PREFIX_FROZEN_AM),
    ] {
        let Some(ckpt) = ckpt else { continue };
        let mut stored: AcousticConfig = serde_json::from_str(&ckpt.config_json)?;
        stored.d_label = cfg.acoustic.d_label;
        if stored != cfg.acoustic {
            return Err(Error::Checkpoint(
                "checkpoint differs from the model in more than the label alphabet".into(),
            ));
        }
        let (copied, _skipped) = model
            .store
            .adopt_matching(&ckpt.params, "am.", &format!("{dst}."));
        if copied == 0 {
            return Err(Error::Checkpoint("checkpoint holds no adoptable tensors".into()));
        }
    }
    Ok(model)
}

fn build_model_unchecked(cfg: &mut ModelConfig, seed: u64, with_frozen: bool) -> Result<AccentModel> {
    let mut store = ParamStore::new();
    let am_t = AcousticModel::new(
        &mut store,
        PREFIX_TRAINABLE_AM,
        cfg.acoustic.clone(),
        derive_seed(seed, "am_t"),
    )?;
    let (am_f, fusion) = match (&cfg.fusion, with_frozen) {
        (Some(fcfg), true) => {
            let am_f = AcousticModel::new(
                &mut store,
                PREFIX_FROZEN_AM,
                cfg.acoustic.clone(),
                derive_seed(seed, "am_f"),
            )?;
            let fusion = FusionBlock::new(
                &mut store,
                "fusion",
                fcfg.clone(),
                derive_seed(seed, "fusion"),
            )?;
            (Some(am_f), Some(fusion))
        }
        _ => (None, None),
    };
    let agg = Aggregator::new(
        &mut store,
        "agg",
        cfg.aggregation.clone(),
        derive_seed(seed, "agg"),
    )?;
    Ok(AccentModel {
        cfg: cfg.clone(),
        store,
        am_t,
        am_f,
        fusion,
        agg,
    })
}

/// Checkpoint kind tag for assembled accent models.
pub const MODEL_CHECKPOINT_KIND: &str = "accent-model";

/// Rebuild a trained model from its own checkpoint: the config echo
/// describes the architecture, the stored tensors replace every fresh
/// parameter. Missing tensors are rejected.
pub fn load_model(ckpt: &Checkpoint) -> Result<AccentModel> {
    if ckpt.kind != MODEL_CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {MODEL_CHECKPOINT_KIND} checkpoint, found {:?}",
            ckpt.kind
        )));
    }
    let mut cfg: ModelConfig = serde_json::from_str(&ckpt.config_json)?;
    let with_frozen = cfg.fusion.is_some();
    let mut model = build_model_unchecked(&mut cfg, 0, with_frozen)?;
    for name in model.store.names() {
        if !ckpt.params.contains(name) {
            return Err(Error::Checkpoint(format!("checkpoint missing tensor {name}")));
        }
    }
    model.store = ckpt.params.clone();
    Ok(model)
}

impl AccentModel {
    /// Forward pass on one utterance. `trainable` binds the trainable
    /// side for gradients; the reference model is always frozen.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        feats: &FeatureSequence,
        trainable: bool,
        mut train: Option<&mut TrainState>,
    ) -> Result<ModelNodes> {
        let am_out = self
            .am_t
            .forward(ctx, feats, trainable, train.as_deref_mut())?;
        let (merged, ca) = match (&self.am_f, &self.fusion) {
            (Some(am_f), Some(fusion)) => {
                // frozen reference: constants, eval-mode batch norm
                let ref_out = am_f.forward(ctx, feats, false, None)?;
                let nodes = fusion.forward(ctx, am_out.embedding, ref_out.embedding, trainable)?;
                (nodes.merged, nodes.channel_attention)
            }
            _ => (am_out.embedding, None),
        };
        let agg_out = self
            .agg
            .forward(ctx, merged, am_out.valid_length, trainable, train)?;
        Ok(ModelNodes {
            phoneme_logits: am_out.logits,
            accent_logits: agg_out.logits,
            pooled: agg_out.pooled,
            channel_attention: ca,
            valid_frames: am_out.valid_length,
        })
    }

    /// Eval-mode pass returning every named activation.
    pub fn predict(&self, feats: &FeatureSequence) -> Result<ActivationBundle> {
        let mut ctx = Ctx::new(&self.store);
        let am_out = self.am_t.forward(&mut ctx, feats, false, None)?;
        let trainable_embedding = ctx.t.value(am_out.embedding).clone();
        let phoneme_logits = ctx.t.value(am_out.logits).clone();
        let (merged_id, ca, reference_embedding) = match (&self.am_f, &self.fusion) {
            (Some(am_f), Some(fusion)) => {
                let ref_out = am_f.forward(&mut ctx, feats, false, None)?;
                let reference = ctx.t.value(ref_out.embedding).clone();
                let nodes =
                    fusion.forward(&mut ctx, am_out.embedding, ref_out.embedding, false)?;
                let ca = nodes
                    .channel_attention
                    .map(|id| ctx.t.value(id).iter().cloned().collect());
                (nodes.merged, ca, Some(reference))
            }
            _ => (am_out.embedding, None, None),
        };
        let merged_embedding = ctx.t.value(merged_id).clone();
        let agg_out = self
            .agg
            .forward(&mut ctx, merged_id, am_out.valid_length, false, None)?;
        let accent_logits: Vec<f64> = ctx.t.value(agg_out.logits).iter().cloned().collect();
        let pooled: Vec<f64> = ctx.t.value(agg_out.pooled).iter().cloned().collect();
        let predicted = argmax_lowest(&accent_logits);
        Ok(ActivationBundle {
            trainable_embedding,
            reference_embedding,
            merged_embedding,
            phoneme_logits,
            channel_attention: ca,
            pooled,
            accent_logits,
            predicted,
        })
    }
}

// ── Losses ───────────────────────────────────────────────────────────

/// Cross-entropy on the tape: -log softmax(logits)[label].
pub fn ce_loss_node(ctx: &mut Ctx, logits: NodeId, label: usize) -> Result<NodeId> {
    let classes = ctx.t.value(logits).ncols();
    if label >= classes {
        return Err(Error::LabelRange { label, classes });
    }
    let logp = ctx.t.log_softmax_rows(logits);
    let picked = ctx.t.slice_cols(logp, label, 1);
    Ok(ctx.t.scale(picked, -1.0))
}

/// Plain cross-entropy over a logit vector.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelRange {
            label,
            classes: logits.len(),
        });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// CTC loss on the tape over raw logits (T x d_label): slice to the
/// valid frames, log-softmax, then the forward-algorithm loss.
pub fn ctc_loss_node(
    ctx: &mut Ctx,
    logits: NodeId,
    target: &[usize],
    valid: usize,
) -> Result<NodeId> {
    let t_len = ctx.t.value(logits).nrows();
    if valid == 0 || valid > t_len {
        return Err(Error::Contract(format!(
            "valid length {valid} out of range for {t_len} frames"
        )));
    }
    if target.len() > valid {
        return Err(Error::InfeasibleAlignment {
            frames: valid,
            needed: target.len(),
        });
    }
    let sliced = ctx.t.slice_rows(logits, 0, valid);
    let logp = ctx.t.log_softmax_rows(sliced);
    ctx.t.ctc_loss(logp, target)
}

/// Plain CTC loss over raw logits.
pub fn ctc_loss(logits: &Array2<f64>, target: &[usize], valid: usize) -> Result<f64> {
    let store = ParamStore::new();
    let mut ctx = Ctx::new(&store);
    let id = ctx.t.leaf(logits.clone());
    let node = ctc_loss_node(&mut ctx, id, target, valid)?;
    Ok(ctx.t.scalar(node))
}

// ── Metrics ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub l_c: f64,
    pub l_asr: f64,
    pub l: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub per_accent_accuracy: Vec<f64>,
    pub total_accuracy: f64,
    pub validation_per: Option<f64>,
}

#[derive(Debug, Default)]
pub struct TrainMetrics {
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub early_stopped: bool,
}

/// Incremental CSV sink for the two metric streams.
pub struct MetricsWriter {
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(dir: &Path, accent_names: &[String]) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut steps = BufWriter::new(File::create(dir.join("steps.csv"))?);
        writeln!(steps, "step,l_c,l_asr,l,lr")?;
        let mut epochs = BufWriter::new(File::create(dir.join("epochs.csv"))?);
        writeln!(epochs, "epoch,{},total,per", accent_names.join(","))?;
        Ok(Self { steps, epochs })
    }

    pub fn step(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(
            self.steps,
            "{},{},{},{},{}",
            m.step, m.l_c, m.l_asr, m.l, m.lr
        )?;
        self.steps.flush()?;
        Ok(())
    }

    pub fn epoch(&mut self, m: &EpochMetrics) -> Result<()> {
        let accs: Vec<String> = m
            .per_accent_accuracy
            .iter()
            .map(|a| format!("{a}"))
            .collect();
        let per = m
            .validation_per
            .map(|p| format!("{p}"))
            .unwrap_or_default();
        writeln!(
            self.epochs,
            "{},{},{},{}",
            m.epoch,
            accs.join(","),
            m.total_accuracy,
            per
        )?;
        self.epochs.flush()?;
        Ok(())
    }
}

/// Default accent column names: the AESRC eight when the corpus has
/// eight accents, generic labels otherwise.
pub fn accent_names(n_accents: usize, named: bool) -> Vec<String> {
    if named && n_accents == 8 {
        ["US", "UK", "CN", "IN", "JP", "KR", "PT", "RU"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    } else {
        (0..n_accents).map(|i| format!("accent_{i}")).collect()
    }
}

// ── Training ─────────────────────────────────────────────────────────

/// In-memory training set: records plus their loaded features.
pub struct LoadedCorpus {
    pub records: Vec<UtteranceRecord>,
    pub features: Vec<FeatureSequence>,
    pub n_accents: usize,
}

impl LoadedCorpus {
    pub fn load(records: &[UtteranceRecord], n_accents: usize) -> Result<Self> {
        let mut feats = Vec::with_capacity(records.len());
        for r in records {
            feats.push(features::read_feature_file(&r.features_path)?);
        }
        Ok(Self {
            records: records.to_vec(),
            features: feats,
            n_accents,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One optimizer step over a batch of utterance indices. Returns the
/// logged losses; the combined loss is exactly `l_c + lambda * l_asr`.
pub fn train_step(
    model: &mut AccentModel,
    corpus: &LoadedCorpus,
    batch: &[usize],
    opt: &mut Adam,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    let use_ctc = cfg.regime.uses_ctc();
    let mut state = TrainState::new(derive_seed(cfg.seed, &format!("dropout:{step}")));
    let mut ctx = Ctx::new(&model.store);
    let mut ce_nodes = Vec::with_capacity(batch.len());
    let mut ctc_nodes = Vec::with_capacity(batch.len());
    for (k, &idx) in batch.iter().enumerate() {
        let record = &corpus.records[idx];
        let feats = match &cfg.spec_augment {
            Some(policy) => {
                let mut p = policy.clone();
                p.seed = derive_seed(cfg.seed, &format!("specaug:{step}:{k}"));
                features::spec_augment(&corpus.features[idx], &p)
            }
            None => corpus.features[idx].clone(),
        };
        let nodes = model.forward(&mut ctx, &feats, true, Some(&mut state))?;
        ce_nodes.push(ce_loss_node(&mut ctx, nodes.accent_logits, record.accent)?);
        if use_ctc {
            ctc_nodes.push(ctc_loss_node(
                &mut ctx,
                nodes.phoneme_logits,
                &record.transcript_phonemes,
                nodes.valid_frames,
            )?);
        }
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut l_c = ce_nodes[0];
    for &n in &ce_nodes[1..] {
        l_c = ctx.t.add(l_c, n);
    }
    l_c = ctx.t.scale(l_c, inv_b);
    let (loss, l_asr_val) = if use_ctc {
        let mut l_asr = ctc_nodes[0];
        for &n in &ctc_nodes[1..] {
            l_asr = ctx.t.add(l_asr, n);
        }
        l_asr = ctx.t.scale(l_asr, inv_b);
        let weighted = ctx.t.scale(l_asr, cfg.lambda);
        (ctx.t.add(l_c, weighted), ctx.t.scalar(l_asr))
    } else {
        (l_c, 0.0)
    };
    let l_c_val = ctx.t.scalar(l_c);
    let l_val = ctx.t.scalar(loss);
    if !l_val.is_finite() {
        let term = if !l_c_val.is_finite() {
            "accent cross-entropy"
        } else if !l_asr_val.is_finite() {
            "ctc"
        } else {
            "combined"
        };
        return Err(Error::Diverged(format!(
            "{term} loss is non-finite at step {step}"
        )));
    }

    let grads = ctx.t.backward(loss);
    let tape = ctx.t;
    opt.step(&mut model.store, &tape, &grads);
    for (name, mean, var) in state.bn_updates {
        BatchNorm::apply_update(&mut model.store, &name, &mean, &var, 0.1);
    }
    Ok(StepMetrics {
        step,
        l_c: l_c_val,
        l_asr: l_asr_val,
        l: l_val,
        lr: opt.lr,
    })
}

/// Accuracy / PER report over a corpus.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_accent_correct: Vec<usize>,
    pub per_accent_total: Vec<usize>,
    pub total_accuracy: f64,
    pub per: Option<f64>,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn per_accent_accuracy(&self) -> Vec<f64> {
        self.per_accent_correct
            .iter()
            .zip(&self.per_accent_total)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect()
    }
}

/// Eval-mode scoring: accent accuracy per class plus greedy-decode PER
/// when the CTC head is meaningful for the corpus labels.
pub fn evaluate(model: &AccentModel, corpus: &LoadedCorpus, with_per: bool) -> Result<EvalReport> {
    let n = corpus.n_accents;
    let mut correct = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut predictions = Vec::with_capacity(corpus.len());
    let mut edit_sum = 0usize;
    let mut ref_sum = 0usize;
    for (record, feats) in corpus.records.iter().zip(&corpus.features) {
        let bundle = model.predict(feats)?;
        predictions.push(bundle.predicted);
        total[record.accent] += 1;
        if bundle.predicted == record.accent {
            correct[record.accent] += 1;
        }
        if with_per {
            let hyp = greedy_ctc_decode(&bundle.phoneme_logits);
            edit_sum += levenshtein(&record.transcript_phonemes, &hyp);
            ref_sum += record.transcript_phonemes.len();
        }
    }
    let total_accuracy =
        correct.iter().sum::<usize>() as f64 / total.iter().sum::<usize>().max(1) as f64;
    let per = if with_per && ref_sum > 0 {
        Some(edit_sum as f64 / ref_sum as f64)
    } else {
        None
    };
    Ok(EvalReport {
        per_accent_correct: correct,
        per_accent_total: total,
        total_accuracy,
        per,
        predictions,
    })
}

/// Full training loop with per-epoch validation. Model selection is by
/// overall validation accent accuracy; the best parameters are restored
/// into the model before returning.
pub fn train(
    model: &mut AccentModel,
    train_set: &LoadedCorpus,
    val_set: &LoadedCorpus,
    cfg: &TrainConfig,
    mut writer: Option<&mut MetricsWriter>,
) -> Result<TrainMetrics> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("empty training or validation set".into()));
    }
    let mut opt = Adam::new(cfg.learning_rate);
    let mut metrics = TrainMetrics::default();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params: Option<ParamStore> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        crate::data::seeded_shuffle(&mut order, derive_seed(cfg.seed, &format!("epoch:{epoch}")));
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let m = train_step(model, train_set, batch, &mut opt, cfg, step)?;
            if let Some(w) = writer.as_deref_mut() {
                w.step(&m)?;
            }
            metrics.steps.push(m);
            step += 1;
        }
        let report = evaluate(model, val_set, cfg.regime.uses_ctc())?;
        let em = EpochMetrics {
            epoch,
            per_accent_accuracy: report.per_accent_accuracy(),
            total_accuracy: report.total_accuracy,
            validation_per: report.per,
        };
        if let Some(w) = writer.as_deref_mut() {
            w.epoch(&em)?;
        }
        if report.total_accuracy > best_acc {
            best_acc = report.total_accuracy;
            best_params = Some(model.store.clone());
            metrics.best_epoch = epoch;
        }
        metrics.epochs.push(em);
    }
    if let Some(best) = best_params {
        model.store = best;
    }
    Ok(metrics)
}

/// CTC-only pretraining of an acoustic model; keeps the epoch with the
/// lowest validation phone error rate. Stops early (with a flag, not an
/// error) when PER has not improved for `patience` epochs.
pub struct PretrainResult {
    pub params: ParamStore,
    pub best_per: f64,
    pub best_epoch: usize,
    pub early_stopped: bool,
    pub per_curve: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn pretrain_asr(
    acoustic_cfg: &AcousticConfig,
    train_set: &LoadedCorpus,
    val_set: &LoadedCorpus,
    learning_rate: f64,
    batch_size: usize,
    max_epochs: usize,
    patience: usize,
    seed: u64,
) -> Result<PretrainResult> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("empty training or validation set".into()));
    }
    let mut store = ParamStore::new();
    let model = AcousticModel::new(&mut store, "am", acoustic_cfg.clone(), derive_seed(seed, "am"))?;
    let mut opt = Adam::new(learning_rate);
    let mut best_per = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params = store.clone();
    let mut per_curve = Vec::new();
    let mut early_stopped = false;
    let mut step = 0usize;
    for epoch in 0..max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        crate::data::seeded_shuffle(&mut order, derive_seed(seed, &format!("epoch:{epoch}")));
        for batch in order.chunks(batch_size.max(1)) {
            let mut state = TrainState::new(derive_seed(seed, &format!("dropout:{step}")));
            let mut ctx = Ctx::new(&store);
            let mut losses = Vec::new();
            for &idx in batch {
                let out = ctx_forward(&model, &mut ctx, &train_set.features[idx], &mut state)?;
                losses.push(ctc_loss_node(
                    &mut ctx,
                    out.1,
                    &train_set.records[idx].transcript_phonemes,
                    out.2,
                )?);
            }
            let mut loss = losses[0];
            for &n in &losses[1..] {
                loss = ctx.t.add(loss, n);
            }
            loss = ctx.t.scale(loss, 1.0 / batch.len() as f64);
            if !ctx.t.scalar(loss).is_finite() {
                return Err(Error::Diverged(format!("ctc loss non-finite at step {step}")));
            }
            let grads = ctx.t.backward(loss);
            let tape = ctx.t;
            opt.step(&mut store, &tape, &grads);
            for (name, mean, var) in state.bn_updates {
                BatchNorm::apply_update(&mut store, &name, &mean, &var, 0.1);
            }
            step += 1;
        }
        let per = acoustic_per(&model, &store, val_set)?;
        per_curve.push(per);
        if per < best_per {
            best_per = per;
            best_epoch = epoch;
            best_params = store.clone();
        } else if epoch - best_epoch >= patience {
            early_stopped = true;
            break;
        }
    }
    Ok(PretrainResult {
        params: best_params,
        best_per,
        best_epoch,
        early_stopped,
        per_curve,
    })
}

fn ctx_forward(
    model: &AcousticModel,
    ctx: &mut Ctx,
    feats: &FeatureSequence,
    state: &mut TrainState,
) -> Result<(NodeId, NodeId, usize)> {
    let out = model.forward(ctx, feats, true, Some(state))?;
    Ok((out.embedding, out.logits, out.valid_length))
}

/// Corpus-level greedy-decode phone error rate of a bare acoustic model.
pub fn acoustic_per(
    model: &AcousticModel,
    store: &ParamStore,
    corpus: &LoadedCorpus,
) -> Result<f64> {
    let mut edit_sum = 0usize;
    let mut ref_sum = 0usize;
    for (record, feats) in corpus.records.iter().zip(&corpus.features) {
        let mut ctx = Ctx::new(store);
        let out = model.forward(&mut ctx, feats, false, None)?;
        let hyp = greedy_ctc_decode(ctx.t.value(out.logits));
        edit_sum += levenshtein(&record.transcript_phonemes, &hyp);
        ref_sum += record.transcript_phonemes.len();
    }
    if ref_sum == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(edit_sum as f64 / ref_sum as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, split_speaker_disjoint, SyntheticCorpusSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive CTC oracle: depth-first walk over every label path,
    /// abandoning a branch only once its collapsed prefix already
    /// mismatches the target (those paths contribute exactly zero).
    pub(crate) fn ctc_brute_force(probs: &Array2<f64>, target: &[usize]) -> f64 {
        fn rec(
            probs: &Array2<f64>,
            target: &[usize],
            t: usize,
            prev: usize,
            matched: usize,
            acc: f64,
        ) -> f64 {
            if t == probs.nrows() {
                return if matched == target.len() { acc } else { 0.0 };
            }
            let mut sum = 0.0;
            for label in 0..probs.ncols() {
                let p = probs[[t, label]];
                let (ok, matched2) = if label == crate::tape::CTC_BLANK || label == prev {
                    (true, matched)
                } else if matched < target.len() && label == target[matched] {
                    (true, matched + 1)
                } else {
                    (false, matched)
                };
                if ok {
                    sum += rec(probs, target, t + 1, label, matched2, acc * p);
                }
            }
            sum
        }
        rec(probs, target, 0, usize::MAX, 0, 1.0)
    }

    /// Raw full enumeration over every C^T tuple, no pruning at all.
    fn ctc_full_enumeration(probs: &Array2<f64>, target: &[usize]) -> f64 {
        let (t_len, c) = probs.dim();
        let mut total = 0.0;
        let n_paths = c.pow(t_len as u32);
        for code in 0..n_paths {
            let mut path = Vec::with_capacity(t_len);
            let mut rem = code;
            for _ in 0..t_len {
                path.push(rem % c);
                rem /= c;
            }
            // collapse repeats then drop blanks
            let mut collapsed = Vec::new();
            let mut prev = usize::MAX;
            for &l in &path {
                if l != prev && l != crate::tape::CTC_BLANK {
                    collapsed.push(l);
                }
                prev = l;
            }
            if collapsed == target {
                let p: f64 = path.iter().enumerate().map(|(t, &l)| probs[[t, l]]).product();
                total += p;
            }
        }
        total
    }

    fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
        let mut p = logits.clone();
        for mut row in p.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            row.mapv_inplace(|x| (x - m).exp() / z);
        }
        p
    }

    #[test]
    fn pruned_oracle_agrees_with_raw_full_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (t_len, c) in [(2usize, 6usize), (3, 6), (3, 5)] {
            let logits = Array2::from_shape_fn((t_len, c), |_| rng.gen_range(-2.0..2.0));
            let probs = softmax_rows(&logits);
            for target in [vec![], vec![1], vec![2, 3], vec![1, 1]] {
                let a = ctc_brute_force(&probs, &target);
                let b = ctc_full_enumeration(&probs, &target);
                assert!(
                    (a - b).abs() <= 1e-12 * b.abs().max(1.0),
                    "oracles disagree for {target:?}"
                );
            }
        }
    }

    #[test]
    fn ctc_single_forced_alignment_is_free() {
        // one frame, target [AE]: the only path is AE itself
        let mut logits = Array2::from_elem((1, 40), -50.0);
        logits[[0, 2]] = 50.0; // overwhelming margin: P(label 2) ~ 1
        let loss = ctc_loss(&logits, &[2], 1).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn ctc_uniform_two_frames_matches_hand_count() {
        // uniform over 40 classes: P = 1/1600 per path, 3 valid paths
        let logits = Array2::zeros((2, 40));
        let loss = ctc_loss(&logits, &[5], 2).unwrap();
        let expect = -(3.0 / 1600.0f64).ln();
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn ctc_matches_exhaustive_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..50 {
            let t_len = rng.gen_range(1..=4usize);
            let logits = Array2::from_shape_fn((t_len, 40), |_| rng.gen_range(-2.0..2.0));
            let len = rng.gen_range(0..=2usize.min(t_len));
            let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..40)).collect();
            let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
            if target.len() + repeats > t_len {
                continue;
            }
            let loss = ctc_loss(&logits, &target, t_len).unwrap();
            let brute = -ctc_brute_force(&softmax_rows(&logits), &target).ln();
            let rel = (loss - brute).abs() / brute.abs().max(1e-9);
            assert!(rel < 1e-6, "case {case}: {loss} vs {brute}");
        }
    }

    #[test]
    fn ce_loss_examples() {
        // uniform logits over 8 classes
        let l = ce_loss(&[0.0; 8], 3).unwrap();
        assert!((l - (8.0f64).ln()).abs() < 1e-12);
        // monotone in the margin
        let mut last = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0] {
            let mut logits = vec![0.0; 8];
            logits[2] = margin;
            let l = ce_loss(&logits, 2).unwrap();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-4);
        // shift invariance
        let raw = [0.3, -1.2, 0.7, 2.0];
        let shifted: Vec<f64> = raw.iter().map(|x| x + 5.0).collect();
        let a = ce_loss(&raw, 1).unwrap();
        let b = ce_loss(&shifted, 1).unwrap();
        assert!((a - b).abs() < 1e-6);
        assert!(matches!(
            ce_loss(&raw, 4),
            Err(Error::LabelRange { label: 4, classes: 4 })
        ));
    }

    fn tiny_model_cfg(n_accents: usize) -> ModelConfig {
        let mut acoustic = AcousticConfig::tiny(8);
        acoustic.dropout = 0.0;
        let mut aggregation = AggregationConfig::tiny(8, n_accents);
        aggregation.dropout = 0.0;
        ModelConfig {
            acoustic,
            aggregation,
            fusion: None,
        }
    }

    fn tiny_corpus(seed: u64) -> (tempfile::TempDir, LoadedCorpus, LoadedCorpus) {
        let spec = SyntheticCorpusSpec::sampled(2, 3, 4, seed);
        let dir = tempfile::tempdir().unwrap();
        let (records, info) = generate_synthetic_corpus(&spec, dir.path()).unwrap();
        let (train_recs, val_recs) = split_speaker_disjoint(&records, &info, 1, seed).unwrap();
        let train = LoadedCorpus::load(&train_recs, info.n_accents).unwrap();
        let val = LoadedCorpus::load(&val_recs, info.n_accents).unwrap();
        (dir, train, val)
    }

    #[test]
    fn lambda_zero_mtl_step_equals_ar_only_step() {
        let (_dir, train_set, _val) = tiny_corpus(3);
        let cfg = tiny_model_cfg(2);
        let batch: Vec<usize> = (0..4).collect();

        let run = |regime: Regime, lambda: f64| {
            let mut model = build_model(&cfg, 99, None, None).unwrap();
            let mut opt = Adam::new(1e-3);
            let tc = TrainConfig {
                regime,
                lambda,
                learning_rate: 1e-3,
                batch_size: 4,
                max_epochs: 1,
                seed: 7,
                spec_augment: None,
            };
            train_step(&mut model, &train_set, &batch, &mut opt, &tc, 0).unwrap();
            model.store.checksum("")
        };
        assert_eq!(run(Regime::Mtl, 0.0), run(Regime::ArOnly, 0.0));
        assert_ne!(run(Regime::Mtl, 0.5), run(Regime::ArOnly, 0.0));
    }

    #[test]
    fn combined_loss_is_exactly_additive() {
        let (_dir, train_set, _val) = tiny_corpus(5);
        let cfg = tiny_model_cfg(2);
        let mut model = build_model(&cfg, 1, None, None).unwrap();
        let mut opt = Adam::new(1e-3);
        let tc = TrainConfig {
            regime: Regime::Mtl,
            lambda: 0.3,
            learning_rate: 1e-3,
            batch_size: 4,
            max_epochs: 1,
            seed: 2,
            spec_augment: None,
        };
        for step in 0..3 {
            let batch: Vec<usize> = (step * 4..step * 4 + 4).collect();
            let m = train_step(&mut model, &train_set, &batch, &mut opt, &tc, step).unwrap();
            assert!((m.l - (m.l_c + 0.3 * m.l_asr)).abs() < 1e-6);
        }
    }

    #[test]
    fn hybrid_step_never_touches_the_frozen_model() {
        let (_dir, train_set, _val) = tiny_corpus(6);
        let cfg = tiny_model_cfg(2).with_fusion(FusionMode::ConcatCa, 4);
        // any acoustic checkpoint with the right config works as a frozen side
        let mut seed_store = ParamStore::new();
        AcousticModel::new(&mut seed_store, "am", cfg.acoustic.clone(), 555).unwrap();
        let ckpt = Checkpoint {
            kind: "acoustic".into(),
            config_json: serde_json::to_string(&cfg.acoustic).unwrap(),
            params: seed_store,
        };
        let mut model = build_model(&cfg, 4, None, Some(&ckpt)).unwrap();
        let frozen_before = model.store.checksum("am_f.");
        let trainable_before = model.store.checksum("am_t.");
        let mut opt = Adam::new(1e-3);
        let tc = TrainConfig {
            regime: Regime::Hybrid,
            lambda: 0.1,
            learning_rate: 1e-3,
            batch_size: 4,
            max_epochs: 1,
            seed: 3,
            spec_augment: None,
        };
        let batch: Vec<usize> = (0..4).collect();
        train_step(&mut model, &train_set, &batch, &mut opt, &tc, 0).unwrap();
        assert_eq!(model.store.checksum("am_f."), frozen_before);
        assert_ne!(model.store.checksum("am_t."), trainable_before);

        // hybrid assembly without a frozen checkpoint is a config error
        assert!(matches!(
            build_model(&cfg, 4, None, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn init_checkpoint_is_adopted_bit_exactly() {
        let cfg = tiny_model_cfg(2);
        let mut pre_store = ParamStore::new();
        AcousticModel::new(&mut pre_store, "am", cfg.acoustic.clone(), 777).unwrap();
        // make it distinctive
        pre_store.get_mut("am.head.w")[[0, 0]] = 0.123456789;
        let ckpt = Checkpoint {
            kind: "acoustic".into(),
            config_json: serde_json::to_string(&cfg.acoustic).unwrap(),
            params: pre_store.clone(),
        };
        let model = build_model(&cfg, 9, Some(&ckpt), None).unwrap();
        for (name, value) in pre_store.iter() {
            let adopted = model.store.get(&name.replace("am.", "am_t."));
            assert_eq!(adopted, value, "{name} not copied exactly");
        }
        // config mismatch is rejected
        let mut other = cfg.acoustic.clone();
        other.d_emb = 16;
        let bad = Checkpoint {
            kind: "acoustic".into(),
            config_json: serde_json::to_string(&other).unwrap(),
            params: pre_store,
        };
        assert!(build_model(&cfg, 9, Some(&bad), None).is_err());
    }

    #[test]
    fn two_identical_runs_produce_identical_metrics() {
        let (_dir, train_set, val_set) = tiny_corpus(8);
        let cfg = tiny_model_cfg(2);
        let tc = TrainConfig {
            regime: Regime::ArOnly,
            lambda: 0.0,
            learning_rate: 1e-3,
            batch_size: 4,
            max_epochs: 2,
            seed: 11,
            spec_augment: Some(SpecAugPolicy::default()),
        };
        let run = || {
            let mut model = build_model(&cfg, 31, None, None).unwrap();
            let m = train(&mut model, &train_set, &val_set, &tc, None).unwrap();
            (m.steps, model.store.checksum(""))
        };
        let (steps_a, sum_a) = run();
        let (steps_b, sum_b) = run();
        assert_eq!(steps_a, steps_b);
        assert_eq!(sum_a, sum_b);
    }

    #[test]
    fn single_utterance_pretraining_memorizes() {
        let spec = SyntheticCorpusSpec::sampled(1, 2, 1, 21);
        let dir = tempfile::tempdir().unwrap();
        let (records, info) = generate_synthetic_corpus(&spec, dir.path()).unwrap();
        let one = LoadedCorpus::load(&records[..1], info.n_accents).unwrap();
        let mut cfg = AcousticConfig::tiny(16);
        cfg.dropout = 0.0;
        let result = pretrain_asr(&cfg, &one, &one, 3e-3, 1, 150, 150, 5).unwrap();
        assert_eq!(result.best_per, 0.0, "curve: {:?}", result.per_curve);
    }

    #[test]
    fn pretraining_beats_the_all_blank_baseline() {
        let (_dir, train_set, val_set) = tiny_corpus(13);
        let mut cfg = AcousticConfig::tiny(16);
        cfg.dropout = 0.0;
        let result = pretrain_asr(&cfg, &train_set, &val_set, 3e-3, 4, 40, 40, 6).unwrap();
        // an all-blank decoder deletes every reference token: PER 1.0
        assert!(
            result.best_per < 1.0,
            "validation PER {} not below the all-blank baseline",
            result.best_per
        );
    }
}
