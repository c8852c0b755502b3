//! Corpus ingestion, grapheme-to-phoneme conversion and the synthetic
//! accented-speech generator.
//!
//! Manifests are line-delimited JSON, one record per line; lines starting
//! with `#` carry provenance comments and are skipped. Feature paths are
//! resolved relative to the manifest location.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, FeatureSequence, D_FBANK};
use crate::nn::{derive_seed, fnv1a};

pub type PhonemeId = usize;

/// Index 0 is the CTC blank; 1..=39 are the stress-free ARPAbet phonemes.
pub const BLANK_SYMBOL: &str = "<BLANK>";
pub const N_PHONEMES: usize = 39;
pub const D_PHONEME: usize = N_PHONEMES + 1;

const ARPABET: [&str; N_PHONEMES] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

/// The 40-symbol CTC vocabulary: blank plus 39 phonemes, a bijection
/// between indices and symbols.
#[derive(Clone, Debug)]
pub struct PhonemeVocabulary {
    symbols: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl PhonemeVocabulary {
    pub fn standard() -> Self {
        let mut symbols = vec![BLANK_SYMBOL.to_string()];
        symbols.extend(ARPABET.iter().map(|s| s.to_string()));
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, symbol: &str) -> Option<PhonemeId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: PhonemeId) -> &str {
        &self.symbols[id]
    }

    /// Parse a whitespace-separated phoneme string such as "AE P AH L".
    pub fn parse(&self, text: &str) -> Result<Vec<PhonemeId>> {
        text.split_whitespace()
            .map(|tok| {
                self.id(tok)
                    .filter(|&i| i != 0)
                    .ok_or_else(|| Error::UnknownPhoneme(tok.to_string()))
            })
            .collect()
    }
}

// ── Lexicon and G2P ──────────────────────────────────────────────────

/// Per-letter fallback pronunciations for out-of-vocabulary words.
const LETTER_FALLBACK: [(char, &[&str]); 26] = [
    ('A', &["AE"]),
    ('B', &["B"]),
    ('C', &["K"]),
    ('D', &["D"]),
    ('E', &["EH"]),
    ('F', &["F"]),
    ('G', &["G"]),
    ('H', &["HH"]),
    ('I', &["IH"]),
    ('J', &["JH"]),
    ('K', &["K"]),
    ('L', &["L"]),
    ('M', &["M"]),
    ('N', &["N"]),
    ('O', &["OW"]),
    ('P', &["P"]),
    ('Q', &["K"]),
    ('R', &["R"]),
    ('S', &["S"]),
    ('T', &["T"]),
    ('U', &["AH"]),
    ('V', &["V"]),
    ('W', &["W"]),
    ('X', &["K", "S"]),
    ('Y', &["Y"]),
    ('Z', &["Z"]),
];

/// Word-to-phoneme dictionary in CMU style (stress digits stripped on
/// load so pronunciations land on the 39-phoneme set).
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<PhonemeId>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: &str, phonemes: Vec<PhonemeId>) {
        self.entries.insert(word.to_uppercase(), phonemes);
    }

    pub fn get(&self, word: &str) -> Option<&Vec<PhonemeId>> {
        self.entries.get(&word.to_uppercase())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load "WORD<TAB>PH1 PH2 ..." lines. Stress digits are stripped,
    /// comment lines (`#`, `;;;`) and blanks are skipped.
    pub fn load(path: &Path, vocab: &PhonemeVocabulary) -> Result<Self> {
        let content = fs::read_to_string(path)?;
        let mut lex = Self::new();
        for (n, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(";;;") {
                continue;
            }
            let (word, pron) = line.split_once('\t').ok_or_else(|| Error::ManifestParse {
                path: path.display().to_string(),
                line: n + 1,
                msg: "expected WORD<TAB>PHONEMES".into(),
            })?;
            let ids = pron
                .split_whitespace()
                .map(|tok| {
                    let bare: String =
                        tok.chars().filter(|c| !c.is_ascii_digit()).collect();
                    vocab
                        .id(&bare)
                        .filter(|&i| i != 0)
                        .ok_or_else(|| Error::UnknownPhoneme(tok.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            lex.insert(word, ids);
        }
        Ok(lex)
    }
}

/// Grapheme-to-phoneme conversion: concatenation of per-word lookups.
/// OOV words fall back to the per-letter table unless `strict` is set.
pub fn g2p(
    words: &[String],
    lexicon: &Lexicon,
    vocab: &PhonemeVocabulary,
    strict: bool,
) -> Result<Vec<PhonemeId>> {
    let mut out = Vec::new();
    for word in words {
        if let Some(ids) = lexicon.get(word) {
            out.extend_from_slice(ids);
        } else if strict {
            return Err(Error::OovWord(word.clone()));
        } else {
            for ch in word.to_uppercase().chars() {
                if let Some((_, phones)) = LETTER_FALLBACK.iter().find(|(c, _)| *c == ch) {
                    for p in *phones {
                        out.push(vocab.id(p).expect("fallback phoneme in vocabulary"));
                    }
                }
            }
        }
    }
    Ok(out)
}

// ── Manifest ─────────────────────────────────────────────────────────

/// One labelled utterance. `transcript_phonemes` holds label ids: plain
/// phonemes (1..=39) for ordinary corpora, or extended label ids when a
/// degraded manifest was loaded with a grown alphabet.
#[derive(Clone, Debug)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub features_path: PathBuf,
    pub transcript_words: Vec<String>,
    pub transcript_phonemes: Vec<usize>,
    pub accent: usize,
    pub speaker: usize,
}

/// Frozen vocabularies of a loaded corpus.
#[derive(Clone, Debug, Default)]
pub struct CorpusInfo {
    pub n_accents: usize,
    pub speaker_names: Vec<String>,
    pub speaker_accent: Vec<usize>,
}

impl CorpusInfo {
    pub fn n_speakers(&self) -> usize {
        self.speaker_names.len()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    utt_id: String,
    features_path: String,
    text: String,
    accent: usize,
    speaker: String,
}

/// How manifest `text` fields become label ids.
pub enum TranscriptMode<'a> {
    /// Tokens are symbols of the given table (phonemes, or phonemes plus
    /// hierarchy groups for degraded corpora).
    Symbols(&'a dyn Fn(&str) -> Option<usize>),
    /// Tokens are words, converted through a lexicon.
    Words {
        lexicon: &'a Lexicon,
        vocab: &'a PhonemeVocabulary,
        strict: bool,
    },
}

/// Load a manifest, build frozen accent/speaker vocabularies, and check
/// that accent is a function of speaker.
pub fn load_manifest(
    path: &Path,
    mode: &TranscriptMode,
) -> Result<(Vec<UtteranceRecord>, CorpusInfo)> {
    let content = fs::read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut info = CorpusInfo::default();
    let mut speaker_ids: BTreeMap<String, usize> = BTreeMap::new();

    for (n, line) in content.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parsed: ManifestLine =
            serde_json::from_str(trimmed).map_err(|e| Error::ManifestParse {
                path: path.display().to_string(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        let words: Vec<String> = parsed
            .text
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let labels = match mode {
            TranscriptMode::Symbols(table) => words
                .iter()
                .map(|w| table(w).ok_or_else(|| Error::UnknownPhoneme(w.clone())))
                .collect::<Result<Vec<_>>>()?,
            TranscriptMode::Words {
                lexicon,
                vocab,
                strict,
            } => g2p(&words, lexicon, vocab, *strict)?,
        };
        if labels.is_empty() {
            return Err(Error::ManifestParse {
                path: path.display().to_string(),
                line: n + 1,
                msg: "empty transcript".into(),
            });
        }

        let speaker = match speaker_ids.get(&parsed.speaker) {
            Some(&id) => {
                let prev = info.speaker_accent[id];
                if prev != parsed.accent {
                    return Err(Error::SpeakerAccentConflict {
                        speaker: parsed.speaker.clone(),
                        first: prev,
                        second: parsed.accent,
                    });
                }
                id
            }
            None => {
                let id = info.speaker_names.len();
                speaker_ids.insert(parsed.speaker.clone(), id);
                info.speaker_names.push(parsed.speaker.clone());
                info.speaker_accent.push(parsed.accent);
                id
            }
        };
        info.n_accents = info.n_accents.max(parsed.accent + 1);
        records.push(UtteranceRecord {
            utt_id: parsed.utt_id,
            features_path: base.join(parsed.features_path),
            transcript_words: words,
            transcript_phonemes: labels,
            accent: parsed.accent,
            speaker,
        });
    }
    Ok((records, info))
}

/// Write records back out as a manifest. `text` is re-rendered from the
/// label ids through `symbol_of`; feature paths are made relative to the
/// manifest directory when possible.
pub fn write_manifest(
    path: &Path,
    records: &[UtteranceRecord],
    info: &CorpusInfo,
    symbol_of: &dyn Fn(usize) -> String,
    header: &[String],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut w = BufWriter::new(fs::File::create(path)?);
    for h in header {
        writeln!(w, "# {h}")?;
    }
    for r in records {
        // keep paths manifest-relative when possible; otherwise absolute,
        // so records stay valid from any manifest location
        let rel = match r.features_path.strip_prefix(&base) {
            Ok(rel) => rel.to_path_buf(),
            Err(_) => std::path::absolute(&r.features_path)?,
        };
        let line = ManifestLine {
            utt_id: r.utt_id.clone(),
            features_path: rel.display().to_string(),
            text: r
                .transcript_phonemes
                .iter()
                .map(|&i| symbol_of(i))
                .collect::<Vec<_>>()
                .join(" "),
            accent: r.accent,
            speaker: info.speaker_names[r.speaker].clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    w.flush()?;
    Ok(())
}

// ── Synthetic corpus ─────────────────────────────────────────────────

/// Specification of a synthetic accented corpus. Accent structure lives
/// in `accent_shift_table` (systematic phoneme substitutions applied to
/// the audio features only, never to the transcript); speaker identity
/// is an additive per-speaker timbre bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub n_accents: usize,
    pub n_speakers_per_accent: usize,
    pub n_utts_per_speaker: usize,
    /// accent -> {phoneme -> (substitute, probability)}
    pub accent_shift_table: Vec<BTreeMap<usize, (usize, f64)>>,
    /// speaker -> additive bias over the feature dims
    pub speaker_timbre: Vec<Vec<f64>>,
    pub seed: u64,
    pub min_transcript_len: usize,
    pub max_transcript_len: usize,
}

impl SyntheticCorpusSpec {
    /// Default recipe: each accent substitutes a disjoint set of phonemes
    /// with probability 0.9; every speaker gets a uniform random timbre.
    pub fn sampled(
        n_accents: usize,
        n_speakers_per_accent: usize,
        n_utts_per_speaker: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shift-table"));
        let per_accent = 6usize;
        let mut order: Vec<usize> = (1..=N_PHONEMES).collect();
        // seeded shuffle so each accent owns a disjoint source set
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut table = Vec::new();
        for a in 0..n_accents {
            let mut shifts = BTreeMap::new();
            for k in 0..per_accent {
                let src = order[(a * per_accent + k) % order.len()];
                let mut dst = rng.gen_range(1..=N_PHONEMES);
                while dst == src {
                    dst = rng.gen_range(1..=N_PHONEMES);
                }
                shifts.insert(src, (dst, 0.9));
            }
            table.push(shifts);
        }
        let n_speakers = n_accents * n_speakers_per_accent;
        let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "timbre"));
        let speaker_timbre = (0..n_speakers)
            .map(|_| (0..D_FBANK).map(|_| trng.gen_range(-1.2..1.2)).collect())
            .collect();
        Self {
            n_accents,
            n_speakers_per_accent,
            n_utts_per_speaker,
            accent_shift_table: table,
            speaker_timbre,
            seed,
            min_transcript_len: 4,
            max_transcript_len: 9,
        }
    }

    /// Reference-style corpus: one "accent" with no substitutions, used
    /// to pretrain the frozen reference acoustic model.
    pub fn non_accented(n_speakers: usize, n_utts_per_speaker: usize, seed: u64) -> Self {
        let mut spec = Self::sampled(1, n_speakers, n_utts_per_speaker, seed);
        spec.accent_shift_table = vec![BTreeMap::new()];
        spec
    }

    pub fn n_speakers(&self) -> usize {
        self.n_accents * self.n_speakers_per_accent
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_accents == 0 || self.n_speakers_per_accent == 0 || self.n_utts_per_speaker == 0 {
            return Err(Error::Config("synthetic corpus dimensions must be positive".into()));
        }
        if self.accent_shift_table.len() != self.n_accents {
            return Err(Error::Config(format!(
                "shift table has {} accents, spec says {}",
                self.accent_shift_table.len(),
                self.n_accents
            )));
        }
        if self.speaker_timbre.len() != self.n_speakers() {
            return Err(Error::Config(format!(
                "timbre table has {} speakers, spec says {}",
                self.speaker_timbre.len(),
                self.n_speakers()
            )));
        }
        for shifts in &self.accent_shift_table {
            for (&src, &(dst, p)) in shifts {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("substitution probability {p} not in [0,1]")));
                }
                if src == 0 || src > N_PHONEMES || dst == 0 || dst > N_PHONEMES {
                    return Err(Error::Config("substitution phoneme id out of range".into()));
                }
            }
        }
        for t in &self.speaker_timbre {
            if t.len() != D_FBANK {
                return Err(Error::Config("timbre vector has wrong dimension".into()));
            }
        }
        if self.min_transcript_len == 0 || self.min_transcript_len > self.max_transcript_len {
            return Err(Error::Config("bad transcript length range".into()));
        }
        Ok(())
    }
}

/// Phoneme prototype bank. Anchored to a fixed seed, not the corpus
/// seed, so that independently generated corpora (accented / reference)
/// share the same underlying "language".
const PROTOTYPE_SEED: u64 = 0x70686f6e; // "phon"

pub fn phoneme_prototype(p: PhonemeId) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(PROTOTYPE_SEED, &format!("proto-{p}")));
    (0..D_FBANK).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Render one utterance: per token, the prototype of the *pronounced*
/// phoneme repeated 3-8 frames, plus the speaker timbre on every frame.
/// Frame durations are a function of the transcript (not the speaker),
/// so identical transcripts render identically when timbre is zero and
/// no substitution fires.
pub fn render_features(
    spec: &SyntheticCorpusSpec,
    transcript: &[PhonemeId],
    pronounced: &[PhonemeId],
    speaker: usize,
) -> Array2<f64> {
    let dur_key = transcript
        .iter()
        .map(|p| p.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut dur_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("dur:{dur_key}")));
    let durations: Vec<usize> = transcript.iter().map(|_| dur_rng.gen_range(3..=8)).collect();
    let total: usize = durations.iter().sum();
    let timbre = &spec.speaker_timbre[speaker];
    let mut values = Array2::zeros((total, D_FBANK));
    let mut row = 0;
    for (tok, &dur) in pronounced.iter().zip(&durations) {
        let proto = phoneme_prototype(*tok);
        for _ in 0..dur {
            for j in 0..D_FBANK {
                values[[row, j]] = proto[j] + timbre[j];
            }
            row += 1;
        }
    }
    values
}

/// Apply the accent's substitution table to a transcript, returning the
/// pronounced phoneme sequence. Draws are taken from `rng` one per token
/// that has a table entry.
pub fn pronounce(
    spec: &SyntheticCorpusSpec,
    accent: usize,
    transcript: &[PhonemeId],
    rng: &mut ChaCha8Rng,
) -> Vec<PhonemeId> {
    let shifts = &spec.accent_shift_table[accent];
    transcript
        .iter()
        .map(|&p| match shifts.get(&p) {
            Some(&(dst, prob)) if rng.gen::<f64>() < prob => dst,
            _ => p,
        })
        .collect()
}

/// Generate the corpus under `out_dir`: feature files in `features/`,
/// manifest at `manifest.jsonl`. Same spec (including seed) produces a
/// byte-identical tree.
pub fn generate_synthetic_corpus(
    spec: &SyntheticCorpusSpec,
    out_dir: &Path,
) -> Result<(Vec<UtteranceRecord>, CorpusInfo)> {
    spec.validate()?;
    let vocab = PhonemeVocabulary::standard();
    fs::create_dir_all(out_dir.join("features"))?;

    let mut records = Vec::new();
    let mut info = CorpusInfo {
        n_accents: spec.n_accents,
        ..Default::default()
    };
    let mut utt_index = 0usize;
    for accent in 0..spec.n_accents {
        for s in 0..spec.n_speakers_per_accent {
            let speaker = accent * spec.n_speakers_per_accent + s;
            info.speaker_names.push(format!("spk{speaker:03}"));
            info.speaker_accent.push(accent);
            for u in 0..spec.n_utts_per_speaker {
                let mut txt_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    spec.seed,
                    &format!("transcript:{utt_index}"),
                ));
                let len =
                    txt_rng.gen_range(spec.min_transcript_len..=spec.max_transcript_len);
                let transcript: Vec<PhonemeId> =
                    (0..len).map(|_| txt_rng.gen_range(1..=N_PHONEMES)).collect();
                let mut sub_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    spec.seed,
                    &format!("subst:{utt_index}"),
                ));
                let pronounced = pronounce(spec, accent, &transcript, &mut sub_rng);
                let values = render_features(spec, &transcript, &pronounced, speaker);

                let utt_id = format!("a{accent}-s{speaker:03}-u{u:03}");
                let rel = PathBuf::from("features").join(format!("{utt_id}.feat"));
                let feat = FeatureSequence::new(values, &utt_id);
                features::write_feature_file(&out_dir.join(&rel), &feat)?;
                records.push(UtteranceRecord {
                    utt_id,
                    features_path: out_dir.join(&rel),
                    transcript_words: transcript
                        .iter()
                        .map(|&p| vocab.symbol(p).to_string())
                        .collect(),
                    transcript_phonemes: transcript,
                    accent,
                    speaker,
                });
                utt_index += 1;
            }
        }
    }
    let sym = |i: usize| vocab.symbol(i).to_string();
    write_manifest(
        &out_dir.join("manifest.jsonl"),
        &records,
        &info,
        &sym,
        &[format!("synthetic corpus seed={}", spec.seed)],
    )?;
    Ok((records, info))
}

/// Split by speakers: `val_speakers_per_accent` speakers of every accent
/// (seeded choice) go to validation with all their utterances.
pub fn split_speaker_disjoint(
    records: &[UtteranceRecord],
    info: &CorpusInfo,
    val_speakers_per_accent: usize,
    seed: u64,
) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>)> {
    let mut by_accent: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (spk, &accent) in info.speaker_accent.iter().enumerate() {
        by_accent.entry(accent).or_default().push(spk);
    }
    let mut val_speakers = Vec::new();
    for (accent, mut speakers) in by_accent {
        if speakers.len() <= val_speakers_per_accent {
            return Err(Error::Split(format!(
                "accent {accent} has {} speakers, cannot hold out {val_speakers_per_accent}",
                speakers.len()
            )));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("val-speakers:{accent}")));
        for i in (1..speakers.len()).rev() {
            let j = rng.gen_range(0..=i);
            speakers.swap(i, j);
        }
        val_speakers.extend(speakers.into_iter().take(val_speakers_per_accent));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for r in records {
        if val_speakers.contains(&r.speaker) {
            val.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, val))
}

/// Stable deterministic shuffle used for epoch ordering.
pub fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Hash of a transcript, used where a stable per-utterance key is needed.
pub fn transcript_hash(ids: &[usize]) -> u64 {
    let bytes: Vec<u8> = ids.iter().flat_map(|i| i.to_le_bytes()).collect();
    fnv1a(&bytes)
}
