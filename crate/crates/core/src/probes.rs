//! Analysis probes: how much speaker identity leaks into the accent
//! features, where the channel attention puts its weight, and a raw
//! embedding export for external visualization.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::argmax_lowest;
use crate::data::{seeded_shuffle, UtteranceRecord};
use crate::error::{Error, Result};
use crate::fusion::{reference_attention_ratio, FusionMode};
use crate::nn::{derive_seed, Adam, Ctx, Linear, ParamStore};
use crate::training::{ce_loss_node, AccentModel, LoadedCorpus};

/// Reference-attention ratios reported for the full-scale channel
/// attention analysis: near-balanced with normal transcripts, shifted
/// toward the reference model when transcripts are random. Context for
/// desk runs, not reproducible at this scale.
pub const FULL_SCALE_RHO_NORMAL: f64 = 1.02;
pub const FULL_SCALE_RHO_RANDOM: f64 = 1.63;

/// Loss / accuracy curves of one linear probe run.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub loss_curve: Vec<(usize, f64)>,
    pub accuracy_curve: Vec<(usize, f64)>,
    pub final_accuracy: f64,
}

/// Channel-attention snapshot averaged over a corpus.
#[derive(Clone, Debug)]
pub struct AttentionReport {
    pub channel_attention: Vec<f64>,
    pub rho: f64,
}

/// 80/20 split by utterances, stratified per speaker so every speaker
/// appears on both sides. Errors when a speaker has too few utterances
/// to be split.
pub fn split_by_utterance(
    records: &[UtteranceRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>)> {
    let mut by_speaker: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, r) in records.iter().enumerate() {
        by_speaker.entry(r.speaker).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (speaker, mut idxs) in by_speaker {
        if idxs.len() < 2 {
            return Err(Error::Split(format!(
                "speaker {speaker} has {} utterance(s), cannot appear in both splits",
                idxs.len()
            )));
        }
        seeded_shuffle(&mut idxs, derive_seed(seed, &format!("utt-split:{speaker}")));
        let n_val = ((idxs.len() as f64 * val_fraction).round() as usize)
            .clamp(1, idxs.len() - 1);
        for (k, idx) in idxs.into_iter().enumerate() {
            if k < n_val {
                val.push(records[idx].clone());
            } else {
                train.push(records[idx].clone());
            }
        }
    }
    Ok((train, val))
}

/// Utterance embeddings of a frozen model: one pooled vector per record.
pub fn pooled_embeddings(model: &AccentModel, corpus: &LoadedCorpus) -> Result<Vec<Vec<f64>>> {
    corpus
        .features
        .iter()
        .map(|f| Ok(model.predict(f)?.pooled))
        .collect()
}

/// Train a fresh linear head from the frozen pooled embeddings to
/// speaker labels. Nothing but the head is updated; the backbone is
/// untouched by construction (only `model.predict` is called).
pub fn speaker_probe(
    model: &AccentModel,
    probe_train: &LoadedCorpus,
    probe_val: &LoadedCorpus,
    n_speakers: usize,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<ProbeResult> {
    for r in &probe_val.records {
        if !probe_train.records.iter().any(|t| t.speaker == r.speaker) {
            return Err(Error::Split(format!(
                "speaker {} present in probe-val but not probe-train",
                r.speaker
            )));
        }
    }
    let train_x = pooled_embeddings(model, probe_train)?;
    let val_x = pooled_embeddings(model, probe_val)?;
    let d = train_x[0].len();

    let mut store = ParamStore::new();
    let head = Linear::new(&mut store, "probe", d, n_speakers, derive_seed(seed, "probe"));
    let mut opt = Adam::new(learning_rate);
    let mut loss_curve = Vec::new();
    let mut accuracy_curve = Vec::new();
    let mut step = 0usize;
    let batch_size = 8usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train_x.len()).collect();
        seeded_shuffle(&mut order, derive_seed(seed, &format!("probe-epoch:{epoch}")));
        for batch in order.chunks(batch_size) {
            let mut ctx = Ctx::new(&store);
            let mut losses = Vec::new();
            for &i in batch {
                let x = ctx.t.leaf(Array2::from_shape_vec((1, d), train_x[i].clone()).unwrap());
                let logits = head.forward(&mut ctx, x, true);
                losses.push(ce_loss_node(
                    &mut ctx,
                    logits,
                    probe_train.records[i].speaker,
                )?);
            }
            let mut loss = losses[0];
            for &n in &losses[1..] {
                loss = ctx.t.add(loss, n);
            }
            loss = ctx.t.scale(loss, 1.0 / batch.len() as f64);
            loss_curve.push((step, ctx.t.scalar(loss)));
            let grads = ctx.t.backward(loss);
            let tape = ctx.t;
            opt.step(&mut store, &tape, &grads);
            step += 1;
        }
        let mut correct = 0usize;
        for (i, x) in val_x.iter().enumerate() {
            let mut ctx = Ctx::new(&store);
            let xid = ctx.t.leaf(Array2::from_shape_vec((1, d), x.clone()).unwrap());
            let logits = head.forward(&mut ctx, xid, false);
            let pred = argmax_lowest(&ctx.t.value(logits).iter().cloned().collect::<Vec<_>>());
            if pred == probe_val.records[i].speaker {
                correct += 1;
            }
        }
        accuracy_curve.push((epoch, correct as f64 / val_x.len() as f64));
    }
    let final_accuracy = accuracy_curve.last().map(|&(_, a)| a).unwrap_or(0.0);
    Ok(ProbeResult {
        loss_curve,
        accuracy_curve,
        final_accuracy,
    })
}

/// Average the channel-attention vector over a corpus and compute the
/// reference/trainable attention ratio. Requires concat-channel-attention
/// fusion.
pub fn attention_ratio(model: &AccentModel, corpus: &LoadedCorpus) -> Result<AttentionReport> {
    match &model.cfg.fusion {
        Some(f) if f.mode == FusionMode::ConcatCa => {}
        _ => {
            return Err(Error::Contract(
                "attention ratio requires concat_ca fusion".into(),
            ))
        }
    }
    let d_emb = model.cfg.acoustic.d_emb;
    let mut mean = vec![0.0; 2 * d_emb];
    let mut count = 0usize;
    for feats in &corpus.features {
        let bundle = model.predict(feats)?;
        let ca = bundle
            .channel_attention
            .ok_or_else(|| Error::Contract("no channel attention emitted".into()))?;
        for (m, v) in mean.iter_mut().zip(&ca) {
            *m += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("empty corpus".into()));
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let ca = Array2::from_shape_vec((1, 2 * d_emb), mean.clone()).unwrap();
    let rho = reference_attention_ratio(&ca, d_emb)?;
    Ok(AttentionReport {
        channel_attention: mean,
        rho,
    })
}

/// Write per-utterance pooled embeddings with labels:
/// `utt_id,accent,speaker,e0..e{d-1}`. Returns the row count.
pub fn export_embeddings(
    model: &AccentModel,
    corpus: &LoadedCorpus,
    path: &Path,
) -> Result<usize> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let d = model.cfg.aggregation.d_attn;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let cols: Vec<String> = (0..d).map(|i| format!("e{i}")).collect();
    writeln!(w, "utt_id,accent,speaker,{}", cols.join(","))?;
    for (record, feats) in corpus.records.iter().zip(&corpus.features) {
        let bundle = model.predict(feats)?;
        if bundle.pooled.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: "pooled embedding".into(),
            });
        }
        let values: Vec<String> = bundle.pooled.iter().map(|v| format!("{v}")).collect();
        writeln!(
            w,
            "{},{},{},{}",
            record.utt_id,
            record.accent,
            record.speaker,
            values.join(",")
        )?;
    }
    w.flush()?;
    Ok(corpus.records.len())
}

/// Write the averaged channel-attention vector plus the ratio:
/// one `channel,value` row per channel and a final `rho` row.
pub fn write_attention_report(report: &AttentionReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "channel,value")?;
    for (c, v) in report.channel_attention.iter().enumerate() {
        writeln!(w, "{c},{v}")?;
    }
    writeln!(w, "rho,{}", report.rho)?;
    w.flush()?;
    Ok(())
}

/// Minimal gradient-descent softmax regression, independent of the tape
/// machinery. Used as the external oracle that checks embedding dumps
/// carry a linearly decodable accent signal.
pub fn linear_probe_oracle(
    xs: &[Vec<f64>],
    ys: &[usize],
    n_classes: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let d = xs[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = vec![vec![0.0; n_classes]; d];
    for row in w.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-0.01..0.01);
        }
    }
    let mut b = vec![0.0; n_classes];
    for _ in 0..steps {
        let mut gw = vec![vec![0.0; n_classes]; d];
        let mut gb = vec![0.0; n_classes];
        for (x, &y) in xs.iter().zip(ys) {
            let mut logits = b.clone();
            for (i, &xi) in x.iter().enumerate() {
                for c in 0..n_classes {
                    logits[c] += xi * w[i][c];
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
            for c in 0..n_classes {
                let p = (logits[c] - m).exp() / z - f64::from(u8::from(c == y));
                gb[c] += p;
                for (i, &xi) in x.iter().enumerate() {
                    gw[i][c] += p * xi;
                }
            }
        }
        let n = xs.len() as f64;
        for c in 0..n_classes {
            b[c] -= lr * gb[c] / n;
            for i in 0..d {
                w[i][c] -= lr * gw[i][c] / n;
            }
        }
    }
    // return per-sample logits for the caller to score
    xs.iter()
        .map(|x| {
            let mut logits = b.clone();
            for (i, &xi) in x.iter().enumerate() {
                for c in 0..n_classes {
                    logits[c] += xi * w[i][c];
                }
            }
            logits
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::AcousticConfig;
    use crate::aggregation::AggregationConfig;
    use crate::data::{generate_synthetic_corpus, SyntheticCorpusSpec};
    use crate::training::{build_model, ModelConfig};

    fn tiny_model(n_accents: usize, seed: u64) -> AccentModel {
        let mut acoustic = AcousticConfig::tiny(8);
        acoustic.dropout = 0.0;
        let mut aggregation = AggregationConfig::tiny(8, n_accents);
        aggregation.dropout = 0.0;
        let cfg = ModelConfig {
            acoustic,
            aggregation,
            fusion: None,
        };
        build_model(&cfg, seed, None, None).unwrap()
    }

    fn corpus(seed: u64) -> (tempfile::TempDir, LoadedCorpus, usize) {
        let spec = SyntheticCorpusSpec::sampled(2, 2, 10, seed);
        let dir = tempfile::tempdir().unwrap();
        let (records, info) = generate_synthetic_corpus(&spec, dir.path()).unwrap();
        let n_speakers = info.n_speakers();
        let loaded = LoadedCorpus::load(&records, info.n_accents).unwrap();
        (dir, loaded, n_speakers)
    }

    #[test]
    fn utterance_split_keeps_every_speaker_on_both_sides() {
        let (_d, corpus, _) = corpus(3);
        let (train, val) = split_by_utterance(&corpus.records, 0.2, 5).unwrap();
        assert_eq!(train.len() + val.len(), corpus.records.len());
        let speakers: std::collections::BTreeSet<usize> =
            corpus.records.iter().map(|r| r.speaker).collect();
        for &s in &speakers {
            assert!(train.iter().any(|r| r.speaker == s));
            assert!(val.iter().any(|r| r.speaker == s));
        }
        // a singleton speaker cannot be split
        let mut records = corpus.records.clone();
        records[0].speaker = 99;
        let lone: Vec<_> = records
            .iter()
            .filter(|r| r.speaker == 99 || r.speaker == 0)
            .cloned()
            .collect();
        assert!(matches!(
            split_by_utterance(&lone, 0.2, 5),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn probe_leaves_the_backbone_untouched() {
        let (_d, corpus, n_speakers) = corpus(7);
        let model = tiny_model(2, 11);
        let before = model.store.checksum("");
        let (train_recs, val_recs) = split_by_utterance(&corpus.records, 0.2, 1).unwrap();
        let train = LoadedCorpus::load(&train_recs, corpus.n_accents).unwrap();
        let val = LoadedCorpus::load(&val_recs, corpus.n_accents).unwrap();
        let result = speaker_probe(&model, &train, &val, n_speakers, 2, 1e-4, 3).unwrap();
        assert_eq!(model.store.checksum(""), before);
        // curves are monotone in their indices
        for pair in result.loss_curve.windows(2) {
            assert!(pair[0].0 < pair[1].0);
        }
        for pair in result.accuracy_curve.windows(2) {
            assert!(pair[0].0 < pair[1].0);
        }
        assert!((0.0..=1.0).contains(&result.final_accuracy));
    }

    #[test]
    fn attention_ratio_needs_concat_ca() {
        let (_d, corpus, _) = corpus(9);
        let model = tiny_model(2, 1);
        assert!(matches!(
            attention_ratio(&model, &corpus),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn attention_ratio_is_order_invariant() {
        use crate::fusion::FusionMode;
        let (_d, corpus, _) = corpus(13);
        let mut acoustic = AcousticConfig::tiny(8);
        acoustic.dropout = 0.0;
        let mut aggregation = AggregationConfig::tiny(8, 2);
        aggregation.dropout = 0.0;
        let cfg = ModelConfig {
            acoustic,
            aggregation,
            fusion: None,
        }
        .with_fusion(FusionMode::ConcatCa, 4);
        let mut seed_store = ParamStore::new();
        crate::acoustic::AcousticModel::new(&mut seed_store, "am", cfg.acoustic.clone(), 5).unwrap();
        let ckpt = crate::checkpoint::Checkpoint {
            kind: "acoustic".into(),
            config_json: serde_json::to_string(&cfg.acoustic).unwrap(),
            params: seed_store,
        };
        let model = build_model(&cfg, 2, None, Some(&ckpt)).unwrap();

        let forward = attention_ratio(&model, &corpus).unwrap();
        let mut reversed_records = corpus.records.clone();
        reversed_records.reverse();
        let mut reversed_features = corpus.features.clone();
        reversed_features.reverse();
        let reversed = LoadedCorpus {
            records: reversed_records,
            features: reversed_features,
            n_accents: corpus.n_accents,
        };
        let backward = attention_ratio(&model, &reversed).unwrap();
        assert!((forward.rho - backward.rho).abs() < 1e-12);
        for v in &forward.channel_attention {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn embedding_dump_shape_and_determinism() {
        let (_d, corpus, _) = corpus(15);
        let model = tiny_model(2, 4);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("dump1.csv");
        let p2 = dir.path().join("dump2.csv");
        let n1 = export_embeddings(&model, &corpus, &p1).unwrap();
        let n2 = export_embeddings(&model, &corpus, &p2).unwrap();
        assert_eq!(n1, corpus.len());
        assert_eq!(n2, corpus.len());
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b, "dumps differ across runs");
        let text = String::from_utf8(a).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("utt_id,accent,speaker,e0"));
        assert_eq!(lines.count(), corpus.len());
    }
}
