//! Transcript degradation: stochastic mapping of phonemes to their
//! articulatory groups, and fully random replacement transcripts.
//!
//! Group labels are new classes appended after the 39 phonemes, so a
//! degraded corpus grows the CTC alphabet to 40 + n_groups and the CTC
//! head is rebuilt accordingly. Per-token uniform draws are taken from
//! the seed independently of theta, which couples the randomness across
//! theta values: raising theta can only add mapped positions.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PhonemeId, PhonemeVocabulary, UtteranceRecord, D_PHONEME, N_PHONEMES};
use crate::error::{Error, Result};
use crate::nn::derive_seed;

/// Built-in grouping, identical to `assets/phoneme_hierarchy.tsv`.
const STANDARD_TABLE: &str = include_str!("../assets/phoneme_hierarchy.tsv");

/// Maps every phoneme to one coarser articulatory group.
#[derive(Clone, Debug)]
pub struct PhonemeHierarchy {
    /// phoneme id (1..=39) -> group id (0..n_groups)
    group_of: Vec<usize>,
    pub group_names: Vec<String>,
}

impl PhonemeHierarchy {
    pub fn standard(vocab: &PhonemeVocabulary) -> Self {
        Self::parse(STANDARD_TABLE, "<built-in>", vocab).expect("built-in table is total")
    }

    pub fn load(path: &Path, vocab: &PhonemeVocabulary) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        Self::parse(&content, &path.display().to_string(), vocab)
    }

    fn parse(content: &str, origin: &str, vocab: &PhonemeVocabulary) -> Result<Self> {
        let mut group_ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut group_names = Vec::new();
        let mut group_of = vec![usize::MAX; D_PHONEME];
        for (n, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (phoneme, group) = line.split_once('\t').ok_or_else(|| Error::ManifestParse {
                path: origin.to_string(),
                line: n + 1,
                msg: "expected PHONEME<TAB>GROUP".into(),
            })?;
            let pid = vocab
                .id(phoneme.trim())
                .filter(|&i| i != 0)
                .ok_or_else(|| Error::UnknownPhoneme(phoneme.to_string()))?;
            let gid = *group_ids.entry(group.trim().to_string()).or_insert_with(|| {
                group_names.push(group.trim().to_string());
                group_names.len() - 1
            });
            group_of[pid] = gid;
        }
        for pid in 1..D_PHONEME {
            if group_of[pid] == usize::MAX {
                return Err(Error::Config(format!(
                    "hierarchy does not cover phoneme {}",
                    vocab.symbol(pid)
                )));
            }
        }
        Ok(Self {
            group_of,
            group_names,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn group_of(&self, phoneme: PhonemeId) -> usize {
        self.group_of[phoneme]
    }

    /// Label id of a group in the grown alphabet: appended after the
    /// 39 phonemes.
    pub fn group_label(&self, group: usize) -> usize {
        D_PHONEME + group
    }

    /// Alphabet size including blank, phonemes and groups.
    pub fn d_label(&self) -> usize {
        D_PHONEME + self.n_groups()
    }
}

/// Symbol table over the grown alphabet: blank, phonemes, then groups.
#[derive(Clone, Debug)]
pub struct LabelAlphabet {
    symbols: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LabelAlphabet {
    pub fn phonemes_only(vocab: &PhonemeVocabulary) -> Self {
        let symbols: Vec<String> = (0..vocab.len()).map(|i| vocab.symbol(i).to_string()).collect();
        Self::from_symbols(symbols)
    }

    pub fn with_hierarchy(vocab: &PhonemeVocabulary, hierarchy: &PhonemeHierarchy) -> Self {
        let mut symbols: Vec<String> =
            (0..vocab.len()).map(|i| vocab.symbol(i).to_string()).collect();
        symbols.extend(hierarchy.group_names.iter().cloned());
        Self::from_symbols(symbols)
    }

    fn from_symbols(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { symbols, index }
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DegradationMode {
    Hierarchy,
    Random,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    /// mapping probability, used in hierarchy mode only
    pub theta: f64,
    pub mode: DegradationMode,
    pub seed: u64,
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta {} not in [0,1]", self.theta)));
        }
        Ok(())
    }
}

/// Degrade one transcript. The rng supplies one uniform draw per token
/// in hierarchy mode (regardless of theta, for coupled randomness) and
/// one phoneme per token in random mode.
pub fn degrade_transcript(
    transcript: &[usize],
    hierarchy: &PhonemeHierarchy,
    mode: DegradationMode,
    theta: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    match mode {
        DegradationMode::Hierarchy => transcript
            .iter()
            .map(|&w| {
                let p: f64 = rng.gen();
                if p < theta {
                    hierarchy.group_label(hierarchy.group_of(w))
                } else {
                    w
                }
            })
            .collect(),
        DegradationMode::Random => transcript
            .iter()
            .map(|_| rng.gen_range(1..=N_PHONEMES))
            .collect(),
    }
}

/// Degrade every record of a corpus; per-utterance randomness is derived
/// from the config seed and the utterance id.
pub fn degrade_corpus(
    records: &[UtteranceRecord],
    hierarchy: &PhonemeHierarchy,
    config: &DegradationConfig,
) -> Result<Vec<UtteranceRecord>> {
    config.validate()?;
    Ok(records
        .iter()
        .map(|r| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("degrade:{}", r.utt_id)));
            let labels = degrade_transcript(
                &r.transcript_phonemes,
                hierarchy,
                config.mode,
                config.theta,
                &mut rng,
            );
            UtteranceRecord {
                transcript_phonemes: labels,
                ..r.clone()
            }
        })
        .collect())
}

/// Provenance header lines for a degraded manifest.
pub fn provenance_header(config: &DegradationConfig) -> Vec<String> {
    vec![format!(
        "degraded mode={:?} theta={} seed={}",
        config.mode, config.theta, config.seed
    )]
}

// ── Robustness suite ─────────────────────────────────────────────────

use crate::checkpoint::Checkpoint;
use crate::fusion::FusionMode;
use crate::probes::attention_ratio;
use crate::training::{
    build_model, build_model_adopt_body, evaluate, train, LoadedCorpus, ModelConfig, Regime,
    TrainConfig,
};

/// Full-scale validation totals reported for the robustness conditions
/// (theta = 0, 0.5, 1, random transcripts). Context for reading desk
/// runs; these numbers need the licensed corpora and multi-GPU training.
pub const FULL_SCALE_MTL_TOTALS: [f64; 4] = [79.9, 76.8, 74.7, 51.5];
pub const FULL_SCALE_HYBRID_TOTALS: [f64; 4] = [81.1, 79.3, 77.5, 64.8];

#[derive(Clone, Debug)]
pub struct RobustnessCell {
    pub condition: String,
    pub regime: Regime,
    pub per_accent: Vec<f64>,
    pub total: Option<f64>,
    pub rho: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct RobustnessReport {
    pub cells: Vec<RobustnessCell>,
}

#[derive(Clone, Debug)]
pub struct RobustnessConfig {
    pub thetas: Vec<f64>,
    pub include_random: bool,
    pub fusion_mode: FusionMode,
    pub squeeze_ratio: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

/// Train and score one (condition, regime) pair per cell: each theta in
/// hierarchy mode plus, optionally, the random-transcript condition, for
/// both the multi-task and the hybrid regime. Hierarchy conditions adopt
/// the pretrained trainable model (head rebuilt for the grown alphabet);
/// the random condition starts the trainable model from scratch. Cell
/// failures are recorded in the table rather than aborting the run.
#[allow(clippy::too_many_arguments)]
pub fn run_robustness_suite(
    base_cfg: &ModelConfig,
    hierarchy: &PhonemeHierarchy,
    train_records: &[UtteranceRecord],
    val_records: &[UtteranceRecord],
    n_accents: usize,
    init_am: Option<&Checkpoint>,
    frozen_am: &Checkpoint,
    cfg: &RobustnessConfig,
) -> Result<RobustnessReport> {
    let mut report = RobustnessReport::default();
    let mut conditions: Vec<(String, Option<f64>)> = cfg
        .thetas
        .iter()
        .map(|&t| (format!("degraded_theta_{t}"), Some(t)))
        .collect();
    if cfg.include_random {
        conditions.push(("random".into(), None));
    }
    for (condition, theta) in conditions {
        for regime in [Regime::Mtl, Regime::Hybrid] {
            let cell = run_cell(
                base_cfg,
                hierarchy,
                train_records,
                val_records,
                n_accents,
                init_am,
                frozen_am,
                cfg,
                &condition,
                theta,
                regime,
            );
            report.cells.push(match cell {
                Ok(c) => c,
                Err(e) => RobustnessCell {
                    condition: condition.clone(),
                    regime,
                    per_accent: vec![],
                    total: None,
                    rho: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    base_cfg: &ModelConfig,
    hierarchy: &PhonemeHierarchy,
    train_records: &[UtteranceRecord],
    val_records: &[UtteranceRecord],
    n_accents: usize,
    init_am: Option<&Checkpoint>,
    frozen_am: &Checkpoint,
    cfg: &RobustnessConfig,
    condition: &str,
    theta: Option<f64>,
    regime: Regime,
) -> Result<RobustnessCell> {
    let mut model_cfg = base_cfg.clone();
    if regime == Regime::Hybrid {
        model_cfg = model_cfg.with_fusion(cfg.fusion_mode, cfg.squeeze_ratio);
    }
    let mut tc = cfg.train.clone();
    tc.regime = regime;
    tc.seed = crate::nn::derive_seed(cfg.seed, &format!("{condition}:{regime}"));

    let (train_labs, val_labs, model) = match theta {
        Some(theta) => {
            // hierarchy condition: labels degrade, alphabet grows, the
            // pretrained body is adopted under a rebuilt head
            let dcfg = DegradationConfig {
                theta,
                mode: DegradationMode::Hierarchy,
                seed: crate::nn::derive_seed(cfg.seed, condition),
            };
            let train_labs = degrade_corpus(train_records, hierarchy, &dcfg)?;
            let val_labs = degrade_corpus(val_records, hierarchy, &dcfg)?;
            model_cfg.acoustic.d_label = hierarchy.d_label();
            let frozen = (regime == Regime::Hybrid).then_some(frozen_am);
            let model = build_model_adopt_body(&model_cfg, tc.seed, init_am, frozen)?;
            (train_labs, val_labs, model)
        }
        None => {
            // random transcripts: plain alphabet, no pretraining of the
            // trainable side
            let dcfg = DegradationConfig {
                theta: 0.0,
                mode: DegradationMode::Random,
                seed: crate::nn::derive_seed(cfg.seed, condition),
            };
            let train_labs = degrade_corpus(train_records, hierarchy, &dcfg)?;
            let val_labs = degrade_corpus(val_records, hierarchy, &dcfg)?;
            let frozen = (regime == Regime::Hybrid).then_some(frozen_am);
            let model = build_model(&model_cfg, tc.seed, None, frozen)?;
            (train_labs, val_labs, model)
        }
    };
    let train_set = LoadedCorpus::load(&train_labs, n_accents)?;
    let val_set = LoadedCorpus::load(&val_labs, n_accents)?;
    let mut model = model;
    train(&mut model, &train_set, &val_set, &tc, None)?;
    let report = evaluate(&model, &val_set, false)?;
    let rho = if regime == Regime::Hybrid && cfg.fusion_mode == FusionMode::ConcatCa {
        Some(attention_ratio(&model, &val_set)?.rho)
    } else {
        None
    };
    Ok(RobustnessCell {
        condition: condition.to_string(),
        regime,
        per_accent: report.per_accent_accuracy(),
        total: Some(report.total_accuracy),
        rho,
        error: None,
    })
}

/// CSV rendering of the robustness table: one row per cell.
pub fn write_robustness_csv(
    report: &RobustnessReport,
    accent_names: &[String],
    path: &Path,
) -> Result<()> {
    use std::io::Write as _;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "condition,regime,{},total,rho,error", accent_names.join(","))?;
    for cell in &report.cells {
        let accs = if cell.per_accent.is_empty() {
            vec![String::new(); accent_names.len()]
        } else {
            cell.per_accent.iter().map(|a| format!("{a}")).collect()
        };
        writeln!(
            w,
            "{},{},{},{},{},{}",
            cell.condition,
            cell.regime,
            accs.join(","),
            cell.total.map(|t| format!("{t}")).unwrap_or_default(),
            cell.rho.map(|r| format!("{r}")).unwrap_or_default(),
            cell.error.clone().unwrap_or_default()
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (PhonemeVocabulary, PhonemeHierarchy) {
        let v = PhonemeVocabulary::standard();
        let h = PhonemeHierarchy::standard(&v);
        (v, h)
    }

    #[test]
    fn hierarchy_is_total_with_nonempty_groups() {
        let (v, h) = setup();
        assert_eq!(h.n_groups(), 8);
        let mut counts = vec![0usize; h.n_groups()];
        for pid in 1..=N_PHONEMES {
            counts[h.group_of(pid)] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "empty group: {counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), 39);
        // a few spot checks against the table
        assert_eq!(h.group_names[h.group_of(v.id("AA").unwrap())], "MONOPHTHONG");
        assert_eq!(h.group_names[h.group_of(v.id("CH").unwrap())], "AFFRICATE");
        assert_eq!(h.group_names[h.group_of(v.id("W").unwrap())], "SEMIVOWEL");
        assert_eq!(h.d_label(), 48);
    }

    #[test]
    fn hierarchy_file_round_trip_and_validation() {
        let (v, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.tsv");
        std::fs::write(&path, STANDARD_TABLE).unwrap();
        let h = PhonemeHierarchy::load(&path, &v).unwrap();
        assert_eq!(h.n_groups(), 8);
        // missing phoneme is rejected
        std::fs::write(&path, "AA\tVOWEL\n").unwrap();
        assert!(PhonemeHierarchy::load(&path, &v).is_err());
    }

    #[test]
    fn theta_zero_is_identity_theta_one_maps_everything() {
        let (_, h) = setup();
        let transcript: Vec<usize> = (1..=20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let same = degrade_transcript(&transcript, &h, DegradationMode::Hierarchy, 0.0, &mut rng);
        assert_eq!(same, transcript);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = degrade_transcript(&transcript, &h, DegradationMode::Hierarchy, 1.0, &mut rng);
        for (i, (&orig, &out)) in transcript.iter().zip(&all).enumerate() {
            assert_eq!(out, h.group_label(h.group_of(orig)), "token {i}");
            assert!(out >= D_PHONEME);
        }
        assert_eq!(all.len(), transcript.len());
    }

    #[test]
    fn empirical_rate_near_theta_at_ten_thousand_tokens() {
        let (_, h) = setup();
        let transcript: Vec<usize> = (0..10_000).map(|i| 1 + i % N_PHONEMES).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let out = degrade_transcript(&transcript, &h, DegradationMode::Hierarchy, 0.5, &mut rng);
        let mapped = out.iter().filter(|&&l| l >= D_PHONEME).count();
        let rate = mapped as f64 / out.len() as f64;
        assert!((rate - 0.5).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn coupled_randomness_gives_monotone_coverage() {
        let (_, h) = setup();
        let transcript: Vec<usize> = (0..5_000).map(|i| 1 + (i * 7) % N_PHONEMES).collect();
        let run = |theta: f64| -> Vec<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            degrade_transcript(&transcript, &h, DegradationMode::Hierarchy, theta, &mut rng)
                .iter()
                .enumerate()
                .filter(|(_, &l)| l >= D_PHONEME)
                .map(|(i, _)| i)
                .collect()
        };
        let low = run(0.3);
        let high = run(0.7);
        let high_set: std::collections::BTreeSet<_> = high.iter().collect();
        assert!(low.len() < high.len());
        for pos in &low {
            assert!(high_set.contains(pos), "position {pos} mapped at 0.3 but not 0.7");
        }
    }

    #[test]
    fn random_mode_is_uniform_by_chi_square() {
        let (_, h) = setup();
        let transcript = vec![1usize; 100_000];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = degrade_transcript(&transcript, &h, DegradationMode::Random, 0.0, &mut rng);
        let mut counts = vec![0usize; N_PHONEMES + 1];
        for &l in &out {
            assert!((1..=N_PHONEMES).contains(&l));
            counts[l] += 1;
        }
        let expected = 100_000.0 / N_PHONEMES as f64;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // chi-square 0.99 quantile at 38 degrees of freedom
        assert!(chi2 < 61.162, "chi2 {chi2}");
    }

    #[test]
    fn robustness_suite_emits_the_full_grid_with_partial_failures() {
        use crate::acoustic::{AcousticConfig, AcousticModel};
        use crate::aggregation::AggregationConfig;
        use crate::data::{generate_synthetic_corpus, split_speaker_disjoint, SyntheticCorpusSpec};
        use crate::nn::ParamStore;

        let (v, h) = setup();
        let spec = SyntheticCorpusSpec::sampled(2, 3, 3, 19);
        let dir = tempfile::tempdir().unwrap();
        let (records, info) = generate_synthetic_corpus(&spec, dir.path()).unwrap();
        let (train_recs, val_recs) = split_speaker_disjoint(&records, &info, 1, 19).unwrap();

        let mut acoustic = AcousticConfig::tiny(8);
        acoustic.dropout = 0.0;
        let mut aggregation = AggregationConfig::tiny(8, 2);
        aggregation.dropout = 0.0;
        let base = ModelConfig {
            acoustic: acoustic.clone(),
            aggregation,
            fusion: None,
        };
        let mut frozen_store = ParamStore::new();
        AcousticModel::new(&mut frozen_store, "am", acoustic.clone(), 3).unwrap();
        let frozen = Checkpoint {
            kind: "acoustic".into(),
            config_json: serde_json::to_string(&acoustic).unwrap(),
            params: frozen_store,
        };
        let cfg = RobustnessConfig {
            thetas: vec![0.0, 0.5, 1.0],
            include_random: true,
            fusion_mode: FusionMode::ConcatCa,
            squeeze_ratio: 4,
            train: TrainConfig {
                regime: Regime::Mtl,
                lambda: 0.1,
                learning_rate: 1e-3,
                batch_size: 8,
                max_epochs: 1,
                seed: 0,
                spec_augment: None,
            },
            seed: 77,
        };
        let report = run_robustness_suite(
            &base,
            &h,
            &train_recs,
            &val_recs,
            info.n_accents,
            None,
            &frozen,
            &cfg,
        )
        .unwrap();
        assert_eq!(report.cells.len(), 8, "4 conditions x 2 regimes");
        for cell in &report.cells {
            assert!(
                cell.error.is_none(),
                "cell {} {} failed: {:?}",
                cell.condition,
                cell.regime,
                cell.error
            );
            assert!(cell.total.is_some());
            if cell.regime == Regime::Hybrid {
                assert!(cell.rho.is_some(), "hybrid cell missing rho");
            }
        }
        let path = dir.path().join("robustness.csv");
        let names = crate::training::accent_names(2, false);
        write_robustness_csv(&report, &names, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 9); // header + 8 cells
        let _ = v;
    }

    #[test]
    fn corpus_degradation_is_deterministic_and_labelled() {
        let (v, h) = setup();
        let records: Vec<UtteranceRecord> = (0..4)
            .map(|i| UtteranceRecord {
                utt_id: format!("u{i}"),
                features_path: "x".into(),
                transcript_words: vec![],
                transcript_phonemes: vec![1 + i, 2, 3 + i, 4],
                accent: 0,
                speaker: 0,
            })
            .collect();
        let cfg = DegradationConfig {
            theta: 0.6,
            mode: DegradationMode::Hierarchy,
            seed: 12,
        };
        let a = degrade_corpus(&records, &h, &cfg).unwrap();
        let b = degrade_corpus(&records, &h, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.transcript_phonemes, y.transcript_phonemes);
            assert_eq!(x.transcript_phonemes.len(), 4);
        }
        let alpha = LabelAlphabet::with_hierarchy(&v, &h);
        assert_eq!(alpha.len(), h.d_label());
        assert_eq!(alpha.id("MONOPHTHONG"), Some(40));
        assert_eq!(alpha.symbol(1), "AA");
        // invalid theta rejected
        let bad = DegradationConfig {
            theta: 1.5,
            mode: DegradationMode::Hierarchy,
            seed: 0,
        };
        assert!(degrade_corpus(&records, &h, &bad).is_err());
    }
}
