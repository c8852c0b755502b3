//! 40-dim log-mel filterbank extraction and SpecAugment masking.
//!
//! 25 ms window, 10 ms hop, HTK mel scale over 20 Hz - 7600 Hz, natural
//! log with a 1e-10 floor. No pre-emphasis, no dither, no CMVN by
//! default (a mean-variance flag exists for callers that want it).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const D_FBANK: usize = 40;
pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms at 16 kHz.
pub const WIN_SAMPLES: usize = 400;
/// 10 ms at 16 kHz.
pub const HOP_SAMPLES: usize = 160;
const N_FFT: usize = 512;
const MEL_LOW_HZ: f64 = 20.0;
const MEL_HIGH_HZ: f64 = 7600.0;
const LOG_FLOOR: f64 = 1e-10;

/// One utterance worth of features: `values` is T x 40 with the first
/// `valid_length` rows meaningful (the rest is padding).
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    pub values: Array2<f64>,
    pub valid_length: usize,
    pub utt_id: String,
}

impl FeatureSequence {
    pub fn new(values: Array2<f64>, utt_id: &str) -> Self {
        let valid_length = values.nrows();
        Self {
            values,
            valid_length,
            utt_id: utt_id.to_string(),
        }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

/// SpecAugment masking policy. Masked regions are replaced by the
/// per-utterance mean; widths of zero make the transform an identity.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SpecAugPolicy {
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub seed: u64,
}

impl Default for SpecAugPolicy {
    fn default() -> Self {
        Self {
            n_freq_masks: 2,
            max_freq_width: 8,
            n_time_masks: 2,
            max_time_width: 20,
            seed: 0,
        }
    }
}

pub fn mel_from_hz(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn hz_from_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the 40 triangular filters; exposed so the
/// tests can locate the expected peak bin for a pure tone analytically.
pub fn mel_center_freqs() -> Vec<f64> {
    let lo = mel_from_hz(MEL_LOW_HZ);
    let hi = mel_from_hz(MEL_HIGH_HZ);
    (0..D_FBANK)
        .map(|j| hz_from_mel(lo + (hi - lo) * (j + 1) as f64 / (D_FBANK + 1) as f64))
        .collect()
}

/// Triangular mel filterbank, D_FBANK x (N_FFT/2 + 1).
fn mel_filterbank() -> Array2<f64> {
    let n_bins = N_FFT / 2 + 1;
    let lo = mel_from_hz(MEL_LOW_HZ);
    let hi = mel_from_hz(MEL_HIGH_HZ);
    let points: Vec<f64> = (0..D_FBANK + 2)
        .map(|k| hz_from_mel(lo + (hi - lo) * k as f64 / (D_FBANK + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((D_FBANK, n_bins));
    for j in 0..D_FBANK {
        let (left, center, right) = (points[j], points[j + 1], points[j + 2]);
        for i in 0..n_bins {
            let f = i as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
            if f > left && f < right {
                bank[[j, i]] = if f <= center {
                    (f - left) / (center - left)
                } else {
                    (right - f) / (right - center)
                };
            }
        }
    }
    bank
}

/// Log-mel filterbank features from mono 16 kHz PCM.
pub fn extract_fbank(pcm: &[i16], sample_rate: u32, utt_id: &str) -> Result<FeatureSequence> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate {
            got: sample_rate,
            want: SAMPLE_RATE,
        });
    }
    if pcm.len() < WIN_SAMPLES {
        return Err(Error::AudioTooShort {
            samples: pcm.len(),
            min: WIN_SAMPLES,
        });
    }
    let t_in = 1 + (pcm.len() - WIN_SAMPLES) / HOP_SAMPLES;
    let bank = mel_filterbank();
    let hamming: Vec<f64> = (0..WIN_SAMPLES)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (WIN_SAMPLES - 1) as f64).cos())
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(N_FFT);

    let mut values = Array2::zeros((t_in, D_FBANK));
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for t in 0..t_in {
        let start = t * HOP_SAMPLES;
        for n in 0..N_FFT {
            buf[n] = if n < WIN_SAMPLES {
                Complex::new(pcm[start + n] as f64 / 32768.0 * hamming[n], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..N_FFT / 2 + 1]
            .iter()
            .map(|c| c.re * c.re + c.im * c.im)
            .collect();
        for j in 0..D_FBANK {
            let e: f64 = bank
                .row(j)
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            values[[t, j]] = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(FeatureSequence::new(values, utt_id))
}

/// Optional per-utterance mean-variance normalization (off by default in
/// every pipeline; kept as an explicit opt-in).
pub fn mean_var_normalize(x: &mut FeatureSequence) {
    let n = x.valid_length.max(1) as f64;
    for j in 0..x.values.ncols() {
        let mut mean = 0.0;
        for i in 0..x.valid_length {
            mean += x.values[[i, j]];
        }
        mean /= n;
        let mut var = 0.0;
        for i in 0..x.valid_length {
            let d = x.values[[i, j]] - mean;
            var += d * d;
        }
        var /= n;
        let inv = 1.0 / (var + 1e-10).sqrt();
        for i in 0..x.valid_length {
            x.values[[i, j]] = (x.values[[i, j]] - mean) * inv;
        }
    }
}

/// SpecAugment: seeded, shape preserving, masked regions set to the
/// per-utterance mean of the valid region.
pub fn spec_augment(x: &FeatureSequence, policy: &SpecAugPolicy) -> FeatureSequence {
    let mut out = x.clone();
    let valid = x.valid_length;
    if valid == 0 {
        return out;
    }
    let d = x.values.ncols();
    let mean = x
        .values
        .slice(ndarray::s![..valid, ..])
        .mean()
        .unwrap_or(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    for _ in 0..policy.n_freq_masks {
        let width = rng.gen_range(0..=policy.max_freq_width.min(d));
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=d - width);
        for i in 0..valid {
            for j in start..start + width {
                out.values[[i, j]] = mean;
            }
        }
    }
    for _ in 0..policy.n_time_masks {
        let width = rng.gen_range(0..=policy.max_time_width.min(valid));
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=valid - width);
        for i in start..start + width {
            for j in 0..d {
                out.values[[i, j]] = mean;
            }
        }
    }
    out
}

// ── Feature container file ───────────────────────────────────────────
// u32 utt_id_len | utt_id utf-8 | u32 T | u32 d | f32 LE row-major data

pub fn write_feature_file(path: &Path, x: &FeatureSequence) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(x.utt_id.len() as u32).to_le_bytes())?;
    w.write_all(x.utt_id.as_bytes())?;
    w.write_all(&(x.values.nrows() as u32).to_le_bytes())?;
    w.write_all(&(x.values.ncols() as u32).to_le_bytes())?;
    for v in x.values.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSequence> {
    let mut r = BufReader::new(File::open(path)?);
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let id_len = u32::from_le_bytes(b4) as usize;
    if id_len > 4096 {
        return Err(Error::ShapeMismatch(format!(
            "{}: implausible utt_id length {id_len}",
            path.display()
        )));
    }
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)?;
    let utt_id =
        String::from_utf8(id).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    r.read_exact(&mut b4)?;
    let rows = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let cols = u32::from_le_bytes(b4) as usize;
    let mut values = Array2::zeros((rows, cols));
    for v in values.iter_mut() {
        r.read_exact(&mut b4)?;
        *v = f32::from_le_bytes(b4) as f64;
    }
    Ok(FeatureSequence::new(values, &utt_id))
}

// ── Minimal WAV reader (mono 16 kHz PCM-16 only) ─────────────────────

pub fn read_wav_mono_16k(path: &Path) -> Result<Vec<i16>> {
    let mut f = BufReader::new(File::open(path)?);
    let mut hdr = [0u8; 12];
    f.read_exact(&mut hdr)?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(Error::Wav(format!("{}: not a RIFF/WAVE file", path.display())));
    }
    let mut fmt_seen = false;
    loop {
        let mut chunk = [0u8; 8];
        if f.read_exact(&mut chunk).is_err() {
            return Err(Error::Wav("missing data chunk".into()));
        }
        let size = u32::from_le_bytes(chunk[4..8].try_into().unwrap()) as usize;
        match &chunk[0..4] {
            b"fmt " => {
                let mut body = vec![0u8; size];
                f.read_exact(&mut body)?;
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 || bits != 16 {
                    return Err(Error::Wav("only 16-bit PCM is supported".into()));
                }
                if channels != 1 {
                    return Err(Error::Wav("only mono audio is supported".into()));
                }
                if rate != SAMPLE_RATE {
                    return Err(Error::SampleRate {
                        got: rate,
                        want: SAMPLE_RATE,
                    });
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(Error::Wav("data chunk before fmt chunk".into()));
                }
                let mut body = vec![0u8; size];
                f.read_exact(&mut body)?;
                return Ok(body
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect());
            }
            _ => {
                let mut skip = vec![0u8; size + (size & 1)];
                f.read_exact(&mut skip)?;
            }
        }
    }
}

/// Companion writer, used by tests and the corpus tooling.
pub fn write_wav_mono_16k(path: &Path, pcm: &[i16]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    let data_len = (pcm.len() * 2) as u32;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&SAMPLE_RATE.to_le_bytes())?;
    w.write_all(&(SAMPLE_RATE * 2).to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?;
    w.write_all(&16u16.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for s in pcm {
        w.write_all(&s.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_boundaries() {
        let one = extract_fbank(&vec![100; WIN_SAMPLES], SAMPLE_RATE, "u").unwrap();
        assert_eq!(one.frames(), 1);
        let short = extract_fbank(&vec![100; WIN_SAMPLES - 1], SAMPLE_RATE, "u");
        assert!(matches!(short, Err(Error::AudioTooShort { .. })));
        let n = 16_000; // exactly 1 s
        let sec = extract_fbank(&vec![0; n], SAMPLE_RATE, "u").unwrap();
        assert_eq!(sec.frames(), 1 + (n - WIN_SAMPLES) / HOP_SAMPLES);
        assert!(matches!(
            extract_fbank(&vec![0; n], 8000, "u"),
            Err(Error::SampleRate { got: 8000, .. })
        ));
    }

    #[test]
    fn silence_hits_the_log_floor_uniformly() {
        let x = extract_fbank(&vec![0; 16_000], SAMPLE_RATE, "u").unwrap();
        let expect = LOG_FLOOR.ln();
        for v in x.values.iter() {
            assert_eq!(*v, expect);
        }
        let first = x.values.row(0).to_owned();
        for row in x.values.rows() {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn pure_tone_peaks_at_the_analytically_nearest_filter() {
        // oracle: which filter center is closest to 440 Hz, computed from
        // the mel-scale formula alone
        let centers = mel_center_freqs();
        let expect = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 440.0)
                    .abs()
                    .partial_cmp(&(b.1 - 440.0).abs())
                    .unwrap()
            })
            .map(|(j, _)| j)
            .unwrap();

        let pcm: Vec<i16> = (0..16_000)
            .map(|n| {
                (8000.0 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16_000.0).sin()) as i16
            })
            .collect();
        let x = extract_fbank(&pcm, SAMPLE_RATE, "tone").unwrap();
        for row in x.values.rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            assert_eq!(argmax, expect);
        }
    }

    #[test]
    fn spec_augment_identity_bounds_and_determinism() {
        let pcm: Vec<i16> = (0..8000).map(|n| ((n * 37) % 2048) as i16 - 1024).collect();
        let x = extract_fbank(&pcm, SAMPLE_RATE, "u").unwrap();

        let identity = SpecAugPolicy {
            n_freq_masks: 3,
            max_freq_width: 0,
            n_time_masks: 3,
            max_time_width: 0,
            seed: 5,
        };
        let y = spec_augment(&x, &identity);
        assert_eq!(y.values, x.values);

        let heavy = SpecAugPolicy {
            n_freq_masks: 0,
            max_freq_width: 0,
            n_time_masks: 1,
            max_time_width: x.frames(),
            seed: 9,
        };
        let y = spec_augment(&x, &heavy);
        assert_eq!(y.values.dim(), x.values.dim());
        assert_eq!(y.valid_length, x.valid_length);
        // at most one contiguous run of changed rows
        let changed: Vec<bool> = (0..x.frames())
            .map(|i| y.values.row(i) != x.values.row(i))
            .collect();
        let runs = changed
            .windows(2)
            .filter(|w| !w[0] && w[1])
            .count()
            + usize::from(changed[0]);
        assert!(runs <= 1, "more than one time band masked");

        let a = spec_augment(&x, &SpecAugPolicy::default());
        let b = spec_augment(&x, &SpecAugPolicy::default());
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn feature_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.feat");
        let x = FeatureSequence::new(
            Array2::from_shape_fn((3, D_FBANK), |(i, j)| (i * 40 + j) as f64 * 0.5 - 7.0),
            "utt-7",
        );
        write_feature_file(&path, &x).unwrap();
        let y = read_feature_file(&path).unwrap();
        assert_eq!(y.utt_id, "utt-7");
        assert_eq!(y.valid_length, 3);
        for (a, b) in x.values.iter().zip(y.values.iter()) {
            assert!((a - b).abs() < 1e-6); // f32 storage
        }
    }

    #[test]
    fn wav_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let pcm: Vec<i16> = (0..1000).map(|n| (n % 97) as i16 * 300 - 14000).collect();
        write_wav_mono_16k(&path, &pcm).unwrap();
        assert_eq!(read_wav_mono_16k(&path).unwrap(), pcm);
    }
}
