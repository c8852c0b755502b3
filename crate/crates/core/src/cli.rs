//! Command-line surface: corpus synthesis, feature extraction, ASR
//! pretraining, accent training, evaluation, transcript degradation,
//! the robustness grid, probes and reports.
//!
//! Every invocation creates one run directory (timestamp + seed, or the
//! exact path given with `--run-dir`) and writes a resolved-config echo
//! next to its outputs, so a run is reproducible from the echo alone.
//! Exit codes: 0 success, 1 user error, 2 internal error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticConfig;
use crate::aggregation::AggregationConfig;
use crate::checkpoint;
use crate::data::{
    self, generate_synthetic_corpus, load_manifest, split_speaker_disjoint, Lexicon,
    PhonemeVocabulary, SyntheticCorpusSpec, TranscriptMode, UtteranceRecord,
};
use crate::degradation::{
    degrade_corpus, provenance_header, run_robustness_suite, write_robustness_csv,
    DegradationConfig, DegradationMode, LabelAlphabet, PhonemeHierarchy, RobustnessConfig,
};
use crate::error::{Error, Result};
use crate::features::{extract_fbank, read_wav_mono_16k, write_feature_file, SpecAugPolicy};
use crate::fusion::FusionMode;
use crate::nn::derive_seed;
use crate::probes::{
    attention_ratio, export_embeddings, speaker_probe, split_by_utterance, write_attention_report,
};
use crate::training::{
    accent_names, build_model, build_model_adopt_body, evaluate, load_model, pretrain_asr, train,
    LoadedCorpus, MetricsWriter, ModelConfig, Regime, TrainConfig, MODEL_CHECKPOINT_KIND,
};

pub const RUN_ROOT_ENV: &str = "ACCENT_HYBRID_RUNS";

/// Resolved configuration mirroring every module's knobs. Loaded from
/// `--config` JSON (unknown keys rejected), then overridden by explicit
/// flags, then echoed into the run directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub acoustic: AcousticConfig,
    pub aggregation: AggregationConfig,
    pub fusion_mode: FusionMode,
    pub squeeze_ratio: usize,
    pub regime: Regime,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub spec_augment: Option<SpecAugPolicy>,
    pub val_speakers_per_accent: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_epochs: usize,
    pub pretrain_patience: usize,
    pub probe_epochs: usize,
    pub probe_learning_rate: f64,
    pub probe_val_fraction: f64,
    /// use the eight AESRC column names when the corpus has 8 accents
    pub aesrc_names: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            acoustic: AcousticConfig::desk(),
            aggregation: AggregationConfig::full_scale(AcousticConfig::desk().d_emb),
            fusion_mode: FusionMode::ConcatCa,
            squeeze_ratio: 16,
            regime: Regime::Mtl,
            lambda: 0.1,
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 15,
            spec_augment: None,
            val_speakers_per_accent: 2,
            pretrain_learning_rate: 1e-4,
            pretrain_epochs: 15,
            pretrain_patience: 5,
            probe_epochs: 20,
            probe_learning_rate: 1e-4,
            probe_val_fraction: 0.2,
            aesrc_names: false,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "accent-hybrid",
    about = "Accent recognition with hybrid phonetic features",
    version
)]
struct Cli {
    /// JSON config file; explicit flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// root for run directories (env ACCENT_HYBRID_RUNS, default ./runs)
    #[arg(long, global = true)]
    run_root: Option<PathBuf>,
    /// exact run directory (bypasses the timestamped name)
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// global seed; per-stage seeds derive from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct CorpusArgs {
    /// manifest of the corpus (line-delimited records)
    #[arg(long)]
    manifest: PathBuf,
    /// lexicon for word-level manifests; absent means the text field
    /// holds phoneme symbols
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// fail on out-of-vocabulary words instead of letter fallback
    #[arg(long, default_value_t = false)]
    strict_oov: bool,
    /// interpret transcripts over the hierarchy-grown label alphabet
    #[arg(long, default_value_t = false)]
    hierarchy_labels: bool,
    /// phoneme hierarchy table (defaults to the built-in grouping)
    #[arg(long)]
    hierarchy: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic accented corpus
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        accents: usize,
        #[arg(long, default_value_t = 8)]
        speakers_per_accent: usize,
        #[arg(long, default_value_t = 50)]
        utts_per_speaker: usize,
        /// no substitutions, single accent (reference corpus)
        #[arg(long, default_value_t = false)]
        non_accented: bool,
    },
    /// Extract filterbank features from 16 kHz mono PCM WAV files
    Features {
        #[arg(long)]
        wav_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// CTC pretraining of the acoustic model
    PretrainAsr {
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Train an accent recognizer under a regime
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        #[arg(long, value_parser = parse_fusion)]
        fusion: Option<FusionMode>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// pretrained acoustic checkpoint for asr_init / mtl / hybrid
        #[arg(long)]
        init_am: Option<PathBuf>,
        /// frozen reference acoustic checkpoint (hybrid)
        #[arg(long)]
        frozen_am: Option<PathBuf>,
    },
    /// Score a trained model on a manifest
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Write a degraded copy of a manifest
    Degrade {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "random")]
        theta: Option<f64>,
        /// replace transcripts with uniform random phonemes
        #[arg(long, default_value_t = false)]
        random: bool,
    },
    /// Train and score the full degradation grid
    Robustness {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// comma separated theta list
        #[arg(long, default_value = "0,0.5,1", value_delimiter = ',')]
        theta: Vec<f64>,
        /// include the random-transcript condition
        #[arg(long, default_value_t = true)]
        random: bool,
        #[arg(long)]
        init_am: Option<PathBuf>,
        #[arg(long)]
        frozen_am: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Retrain only a speaker classification head on frozen features
    ProbeSpeaker {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Average channel attention and the reference/trainable ratio
    AttentionReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Dump per-utterance pooled embeddings with labels
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Summarize the metric streams of a finished run directory
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    match s {
        "ar_only" => Ok(Regime::ArOnly),
        "asr_init" => Ok(Regime::AsrInit),
        "mtl" => Ok(Regime::Mtl),
        "hybrid" => Ok(Regime::Hybrid),
        other => Err(format!(
            "unknown regime {other:?} (expected ar_only|asr_init|mtl|hybrid)"
        )),
    }
}

fn parse_fusion(s: &str) -> std::result::Result<FusionMode, String> {
    match s {
        "add" => Ok(FusionMode::Add),
        "concat" => Ok(FusionMode::Concat),
        "concat_ca" => Ok(FusionMode::ConcatCa),
        other => Err(format!(
            "unknown fusion mode {other:?} (expected add|concat|concat_ca)"
        )),
    }
}

/// Entry point behind `main`: parse, dispatch, map errors to exit codes.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage text; --help/--version exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. }
                | Error::Diverged(_)
                | Error::Contract(_)
                | Error::ShapeMismatch(_)
                | Error::InfeasibleAlignment { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_dir(cli: &Cli, command: &str, seed: u64) -> Result<PathBuf> {
    if let Some(dir) = &cli.run_dir {
        std::fs::create_dir_all(dir)?;
        return Ok(dir.clone());
    }
    let root = cli
        .run_root
        .clone()
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let dir = root.join(format!("{command}-{stamp}-{seed}"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn echo_config(dir: &Path, command: &str, args_json: serde_json::Value, cfg: &RunConfig) -> Result<()> {
    let echo = serde_json::json!({
        "command": command,
        "args": args_json,
        "config": cfg,
    });
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&echo)?)?;
    Ok(())
}

struct Corpus {
    records: Vec<UtteranceRecord>,
    n_accents: usize,
    speaker_names: Vec<String>,
    d_label: usize,
    hierarchy: PhonemeHierarchy,
}

fn load_corpus(args: &CorpusArgs) -> Result<Corpus> {
    let vocab = PhonemeVocabulary::standard();
    let hierarchy = match &args.hierarchy {
        Some(path) => PhonemeHierarchy::load(path, &vocab)?,
        None => PhonemeHierarchy::standard(&vocab),
    };
    let (alphabet, d_label) = if args.hierarchy_labels {
        let a = LabelAlphabet::with_hierarchy(&vocab, &hierarchy);
        let d = a.len();
        (a, d)
    } else {
        let a = LabelAlphabet::phonemes_only(&vocab);
        let d = a.len();
        (a, d)
    };
    let lexicon = match &args.lexicon {
        Some(path) => Some(Lexicon::load(path, &vocab)?),
        None => None,
    };
    let (records, info) = match &lexicon {
        Some(lex) => load_manifest(
            &args.manifest,
            &TranscriptMode::Words {
                lexicon: lex,
                vocab: &vocab,
                strict: args.strict_oov,
            },
        )?,
        None => {
            let table = |s: &str| alphabet.id(s).filter(|&i| i != 0);
            load_manifest(&args.manifest, &TranscriptMode::Symbols(&table))?
        }
    };
    Ok(Corpus {
        records,
        n_accents: info.n_accents,
        speaker_names: info.speaker_names,
        d_label,
        hierarchy,
    })
}

fn write_eval_csv(
    path: &Path,
    names: &[String],
    per_accent: &[f64],
    total: f64,
    per: Option<f64>,
) -> Result<()> {
    use std::io::Write as _;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{},total,per", names.join(","))?;
    let accs: Vec<String> = per_accent.iter().map(|a| format!("{a}")).collect();
    writeln!(
        w,
        "{},{},{}",
        accs.join(","),
        total,
        per.map(|p| format!("{p}")).unwrap_or_default()
    )?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_run_config(&cli)?;
    match &cli.cmd {
        Cmd::Synth {
            out,
            accents,
            speakers_per_accent,
            utts_per_speaker,
            non_accented,
        } => {
            let spec = if *non_accented {
                SyntheticCorpusSpec::non_accented(
                    speakers_per_accent * accents,
                    *utts_per_speaker,
                    cfg.seed,
                )
            } else {
                SyntheticCorpusSpec::sampled(
                    *accents,
                    *speakers_per_accent,
                    *utts_per_speaker,
                    cfg.seed,
                )
            };
            let (records, info) = generate_synthetic_corpus(&spec, out)?;
            std::fs::write(out.join("corpus_spec.json"), serde_json::to_string_pretty(&spec)?)?;
            println!(
                "wrote {} utterances / {} speakers / {} accents under {}",
                records.len(),
                info.n_speakers(),
                info.n_accents,
                out.display()
            );
            Ok(())
        }

        Cmd::Features { wav_dir, out } => {
            let mut wavs: Vec<PathBuf> = std::fs::read_dir(wav_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "wav"))
                .collect();
            wavs.sort();
            if wavs.is_empty() {
                return Err(Error::Config(format!(
                    "no .wav files under {}",
                    wav_dir.display()
                )));
            }
            std::fs::create_dir_all(out)?;
            for wav in &wavs {
                let utt_id = wav
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_default();
                let pcm = read_wav_mono_16k(wav)?;
                let feats = extract_fbank(&pcm, crate::features::SAMPLE_RATE, &utt_id)?;
                write_feature_file(&out.join(format!("{utt_id}.feat")), &feats)?;
            }
            println!("extracted {} feature files into {}", wavs.len(), out.display());
            Ok(())
        }

        Cmd::PretrainAsr { corpus } => {
            let dir = run_dir(&cli, "pretrain-asr", cfg.seed)?;
            let loaded = load_corpus(corpus)?;
            cfg.acoustic.d_label = loaded.d_label;
            echo_config(
                &dir,
                "pretrain-asr",
                serde_json::json!({"manifest": corpus.manifest}),
                &cfg,
            )?;
            let (train_recs, val_recs) = split_speaker_disjoint(
                &loaded.records,
                &corpus_info(&loaded),
                cfg.val_speakers_per_accent,
                derive_seed(cfg.seed, "split"),
            )?;
            let train_set = LoadedCorpus::load(&train_recs, loaded.n_accents)?;
            let val_set = LoadedCorpus::load(&val_recs, loaded.n_accents)?;
            let result = pretrain_asr(
                &cfg.acoustic,
                &train_set,
                &val_set,
                cfg.pretrain_learning_rate,
                cfg.batch_size,
                cfg.pretrain_epochs,
                cfg.pretrain_patience,
                derive_seed(cfg.seed, "pretrain"),
            )?;
            if result.early_stopped {
                eprintln!(
                    "warning: no validation improvement for {} epochs, stopped at epoch {}",
                    cfg.pretrain_patience,
                    result.per_curve.len()
                );
            }
            let ckpt_path = dir.join("acoustic.ckpt");
            checkpoint::save(
                &ckpt_path,
                "acoustic",
                &serde_json::to_string(&cfg.acoustic)?,
                &result.params,
            )?;
            println!(
                "best validation PER {:.4} at epoch {}; checkpoint: {}",
                result.best_per,
                result.best_epoch,
                ckpt_path.display()
            );
            Ok(())
        }

        Cmd::Train {
            corpus,
            regime,
            fusion,
            lambda,
            epochs,
            init_am,
            frozen_am,
        } => {
            if let Some(r) = regime {
                cfg.regime = *r;
            }
            if let Some(f) = fusion {
                cfg.fusion_mode = *f;
            }
            if let Some(l) = lambda {
                cfg.lambda = *l;
            }
            if let Some(e) = epochs {
                cfg.max_epochs = *e;
            }
            let dir = run_dir(&cli, "train", cfg.seed)?;
            let loaded = load_corpus(corpus)?;
            cfg.acoustic.d_label = loaded.d_label;
            cfg.aggregation.d_accent = loaded.n_accents;
            cfg.aggregation.d_input = cfg.acoustic.d_emb;
            echo_config(
                &dir,
                "train",
                serde_json::json!({
                    "manifest": corpus.manifest,
                    "init_am": init_am,
                    "frozen_am": frozen_am,
                    "hierarchy_labels": corpus.hierarchy_labels,
                }),
                &cfg,
            )?;
            let mut model_cfg = ModelConfig {
                acoustic: cfg.acoustic.clone(),
                aggregation: cfg.aggregation.clone(),
                fusion: None,
            };
            if cfg.regime == Regime::Hybrid {
                model_cfg = model_cfg.with_fusion(cfg.fusion_mode, cfg.squeeze_ratio);
            }
            let init = init_am
                .as_ref()
                .map(|p| checkpoint::load_expected(p, "acoustic", ""))
                .transpose()
                .or_else(|_| init_am.as_ref().map(|p| checkpoint::load(p)).transpose())?;
            let frozen = frozen_am.as_ref().map(|p| checkpoint::load(p)).transpose()?;
            if cfg.regime.wants_pretrained_init() && init.is_none() && cfg.regime != Regime::Hybrid
            {
                return Err(Error::Config(format!(
                    "regime {} requires --init-am",
                    cfg.regime
                )));
            }
            let mut model = if corpus.hierarchy_labels {
                build_model_adopt_body(
                    &model_cfg,
                    derive_seed(cfg.seed, "model"),
                    init.as_ref(),
                    frozen.as_ref(),
                )?
            } else {
                build_model(
                    &model_cfg,
                    derive_seed(cfg.seed, "model"),
                    init.as_ref(),
                    frozen.as_ref(),
                )?
            };
            let (train_recs, val_recs) = split_speaker_disjoint(
                &loaded.records,
                &corpus_info(&loaded),
                cfg.val_speakers_per_accent,
                derive_seed(cfg.seed, "split"),
            )?;
            let train_set = LoadedCorpus::load(&train_recs, loaded.n_accents)?;
            let val_set = LoadedCorpus::load(&val_recs, loaded.n_accents)?;
            let names = accent_names(loaded.n_accents, cfg.aesrc_names);
            let mut writer = MetricsWriter::create(&dir, &names)?;
            let tc = TrainConfig {
                regime: cfg.regime,
                lambda: cfg.lambda,
                learning_rate: cfg.learning_rate,
                batch_size: cfg.batch_size,
                max_epochs: cfg.max_epochs,
                seed: derive_seed(cfg.seed, "train"),
                spec_augment: cfg.spec_augment.clone(),
            };
            let metrics = train(&mut model, &train_set, &val_set, &tc, Some(&mut writer))?;
            let ckpt_path = dir.join("model.ckpt");
            checkpoint::save(
                &ckpt_path,
                MODEL_CHECKPOINT_KIND,
                &model_cfg.echo_json(),
                &model.store,
            )?;
            let report = evaluate(&model, &val_set, tc.regime.uses_ctc())?;
            write_eval_csv(
                &dir.join("validation.csv"),
                &names,
                &report.per_accent_accuracy(),
                report.total_accuracy,
                report.per,
            )?;
            println!(
                "best epoch {} validation accuracy {:.4}; checkpoint: {}",
                metrics.best_epoch,
                report.total_accuracy,
                ckpt_path.display()
            );
            Ok(())
        }

        Cmd::Evaluate { checkpoint: ckpt_path, corpus } => {
            let dir = run_dir(&cli, "evaluate", cfg.seed)?;
            let loaded = load_corpus(corpus)?;
            if loaded.records.is_empty() {
                return Err(Error::Config(format!(
                    "manifest {} holds no records",
                    corpus.manifest.display()
                )));
            }
            echo_config(
                &dir,
                "evaluate",
                serde_json::json!({"manifest": corpus.manifest, "checkpoint": ckpt_path}),
                &cfg,
            )?;
            let model = load_model(&checkpoint::load(ckpt_path)?)?;
            let set = LoadedCorpus::load(&loaded.records, loaded.n_accents)?;
            let report = evaluate(&model, &set, true)?;
            let names = accent_names(loaded.n_accents, cfg.aesrc_names);
            let out = dir.join("evaluation.csv");
            write_eval_csv(
                &out,
                &names,
                &report.per_accent_accuracy(),
                report.total_accuracy,
                report.per,
            )?;
            let accs: Vec<String> = names
                .iter()
                .zip(report.per_accent_accuracy())
                .map(|(n, a)| format!("{n}={a:.4}"))
                .collect();
            println!("{} total={:.4}", accs.join(" "), report.total_accuracy);
            println!("report: {}", out.display());
            Ok(())
        }

        Cmd::Degrade {
            corpus,
            out,
            theta,
            random,
        } => {
            if theta.is_none() && !random {
                return Err(Error::Config("pass --theta or --random".into()));
            }
            let loaded = load_corpus(corpus)?;
            let dcfg = DegradationConfig {
                theta: theta.unwrap_or(0.0),
                mode: if *random {
                    DegradationMode::Random
                } else {
                    DegradationMode::Hierarchy
                },
                seed: derive_seed(cfg.seed, "degrade"),
            };
            let degraded = degrade_corpus(&loaded.records, &loaded.hierarchy, &dcfg)?;
            let vocab = PhonemeVocabulary::standard();
            let alphabet = LabelAlphabet::with_hierarchy(&vocab, &loaded.hierarchy);
            let sym = |i: usize| alphabet.symbol(i).to_string();
            let info = corpus_info(&loaded);
            data::write_manifest(out, &degraded, &info, &sym, &provenance_header(&dcfg))?;
            println!("wrote degraded manifest: {}", out.display());
            Ok(())
        }

        Cmd::Robustness {
            corpus,
            theta,
            random,
            init_am,
            frozen_am,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.max_epochs = *e;
            }
            let dir = run_dir(&cli, "robustness", cfg.seed)?;
            let loaded = load_corpus(corpus)?;
            cfg.aggregation.d_accent = loaded.n_accents;
            cfg.aggregation.d_input = cfg.acoustic.d_emb;
            echo_config(
                &dir,
                "robustness",
                serde_json::json!({
                    "manifest": corpus.manifest,
                    "theta": theta,
                    "random": random,
                    "init_am": init_am,
                    "frozen_am": frozen_am,
                }),
                &cfg,
            )?;
            let init = init_am.as_ref().map(|p| checkpoint::load(p)).transpose()?;
            let frozen = checkpoint::load(frozen_am)?;
            let (train_recs, val_recs) = split_speaker_disjoint(
                &loaded.records,
                &corpus_info(&loaded),
                cfg.val_speakers_per_accent,
                derive_seed(cfg.seed, "split"),
            )?;
            let base = ModelConfig {
                acoustic: cfg.acoustic.clone(),
                aggregation: cfg.aggregation.clone(),
                fusion: None,
            };
            let rcfg = RobustnessConfig {
                thetas: theta.clone(),
                include_random: *random,
                fusion_mode: cfg.fusion_mode,
                squeeze_ratio: cfg.squeeze_ratio,
                train: TrainConfig {
                    regime: Regime::Mtl,
                    lambda: cfg.lambda,
                    learning_rate: cfg.learning_rate,
                    batch_size: cfg.batch_size,
                    max_epochs: cfg.max_epochs,
                    seed: 0,
                    spec_augment: cfg.spec_augment.clone(),
                },
                seed: derive_seed(cfg.seed, "robustness"),
            };
            let report = run_robustness_suite(
                &base,
                &loaded.hierarchy,
                &train_recs,
                &val_recs,
                loaded.n_accents,
                init.as_ref(),
                &frozen,
                &rcfg,
            )?;
            let names = accent_names(loaded.n_accents, cfg.aesrc_names);
            let out = dir.join("robustness.csv");
            write_robustness_csv(&report, &names, &out)?;
            for cell in &report.cells {
                match (cell.total, &cell.error) {
                    (Some(t), _) => println!(
                        "{:<22} {:<7} total={:.4}{}",
                        cell.condition,
                        cell.regime.to_string(),
                        t,
                        cell.rho.map(|r| format!(" rho={r:.3}")).unwrap_or_default()
                    ),
                    (None, Some(e)) => {
                        println!("{:<22} {:<7} FAILED: {e}", cell.condition, cell.regime.to_string())
                    }
                    _ => {}
                }
            }
            println!("table: {}", out.display());
            Ok(())
        }

        Cmd::ProbeSpeaker {
            checkpoint: ckpt_path,
            corpus,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.probe_epochs = *e;
            }
            let dir = run_dir(&cli, "probe-speaker", cfg.seed)?;
            let loaded = load_corpus(corpus)?;
            echo_config(
                &dir,
                "probe-speaker",
                serde_json::json!({"manifest": corpus.manifest, "checkpoint": ckpt_path}),
                &cfg,
            )?;
            let model = load_model(&checkpoint::load(ckpt_path)?)?;
            let (train_recs, val_recs) = split_by_utterance(
                &loaded.records,
                cfg.probe_val_fraction,
                derive_seed(cfg.seed, "probe-split"),
            )?;
            let n_speakers = loaded.speaker_names.len();
            let train_set = LoadedCorpus::load(&train_recs, loaded.n_accents)?;
            let val_set = LoadedCorpus::load(&val_recs, loaded.n_accents)?;
            let result = speaker_probe(
                &model,
                &train_set,
                &val_set,
                n_speakers,
                cfg.probe_epochs,
                cfg.probe_learning_rate,
                derive_seed(cfg.seed, "probe"),
            )?;
            use std::io::Write as _;
            let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("probe_loss.csv"))?);
            writeln!(w, "step,ce")?;
            for (s, l) in &result.loss_curve {
                writeln!(w, "{s},{l}")?;
            }
            let mut w =
                std::io::BufWriter::new(std::fs::File::create(dir.join("probe_accuracy.csv"))?);
            writeln!(w, "epoch,accuracy")?;
            for (e, a) in &result.accuracy_curve {
                writeln!(w, "{e},{a}")?;
            }
            println!(
                "speaker probe accuracy {:.4} over {} speakers ({} epochs)",
                result.final_accuracy, n_speakers, cfg.probe_epochs
            );
            Ok(())
        }

        Cmd::AttentionReport {
            checkpoint: ckpt_path,
            corpus,
        } => {
            let dir = run_dir(&cli, "attention-report", cfg.seed)?;
            let loaded = load_corpus(corpus)?;
            echo_config(
                &dir,
                "attention-report",
                serde_json::json!({"manifest": corpus.manifest, "checkpoint": ckpt_path}),
                &cfg,
            )?;
            let model = load_model(&checkpoint::load(ckpt_path)?)?;
            let set = LoadedCorpus::load(&loaded.records, loaded.n_accents)?;
            let report = attention_ratio(&model, &set)?;
            let out = dir.join("attention.csv");
            write_attention_report(&report, &out)?;
            println!("rho = {:.4}; report: {}", report.rho, out.display());
            Ok(())
        }

        Cmd::ExportEmbeddings {
            checkpoint: ckpt_path,
            corpus,
        } => {
            let dir = run_dir(&cli, "export-embeddings", cfg.seed)?;
            let loaded = load_corpus(corpus)?;
            echo_config(
                &dir,
                "export-embeddings",
                serde_json::json!({"manifest": corpus.manifest, "checkpoint": ckpt_path}),
                &cfg,
            )?;
            let model = load_model(&checkpoint::load(ckpt_path)?)?;
            let set = LoadedCorpus::load(&loaded.records, loaded.n_accents)?;
            let out = dir.join("embeddings.csv");
            let n = export_embeddings(&model, &set, &out)?;
            println!("wrote {n} embeddings: {}", out.display());
            Ok(())
        }

        Cmd::Report { dir } => {
            let steps = dir.join("steps.csv");
            let epochs = dir.join("epochs.csv");
            if !steps.exists() && !epochs.exists() {
                return Err(Error::Config(format!(
                    "{} holds no metric streams",
                    dir.display()
                )));
            }
            if steps.exists() {
                let text = std::fs::read_to_string(&steps)?;
                let mut first = None;
                let mut last = None;
                for line in text.lines().skip(1) {
                    let l: Vec<&str> = line.split(',').collect();
                    if l.len() >= 4 {
                        let v: f64 = l[3].parse().unwrap_or(f64::NAN);
                        if first.is_none() {
                            first = Some(v);
                        }
                        last = Some(v);
                    }
                }
                if let (Some(f), Some(l)) = (first, last) {
                    println!("combined loss: first step {f:.6}, last step {l:.6}");
                }
            }
            if epochs.exists() {
                let text = std::fs::read_to_string(&epochs)?;
                let mut best: Option<(usize, f64)> = None;
                let mut cols = 0usize;
                for (i, line) in text.lines().enumerate() {
                    let l: Vec<&str> = line.split(',').collect();
                    if i == 0 {
                        cols = l.len();
                        continue;
                    }
                    if l.len() == cols {
                        if let (Ok(e), Ok(t)) = (l[0].parse::<usize>(), l[cols - 2].parse::<f64>())
                        {
                            if best.map_or(true, |(_, b)| t > b) {
                                best = Some((e, t));
                            }
                        }
                    }
                }
                if let Some((e, t)) = best {
                    println!("best validation accuracy {t:.4} at epoch {e}");
                }
            }
            Ok(())
        }
    }
}

fn corpus_info(c: &Corpus) -> data::CorpusInfo {
    // speaker ids were assigned in first-appearance order by the loader
    let mut speaker_accent = vec![0usize; c.speaker_names.len()];
    for r in &c.records {
        speaker_accent[r.speaker] = r.accent;
    }
    data::CorpusInfo {
        n_accents: c.n_accents,
        speaker_names: c.speaker_names.clone(),
        speaker_accent,
    }
}
