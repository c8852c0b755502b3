//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed manifest record: {msg}")]
    ManifestParse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("speaker {speaker} appears with accents {first} and {second}; accent must be a function of speaker")]
    SpeakerAccentConflict {
        speaker: String,
        first: usize,
        second: usize,
    },

    #[error("word not in lexicon: {0}")]
    OovWord(String),

    #[error("unknown phoneme symbol: {0}")]
    UnknownPhoneme(String),

    #[error("audio too short: {samples} samples, need at least {min} for one window")]
    AudioTooShort { samples: usize, min: usize },

    #[error("unsupported sample rate {got} Hz, expected {want} Hz")]
    SampleRate { got: u32, want: u32 },

    #[error("unreadable wav file: {0}")]
    Wav(String),

    #[error("empty input sequence")]
    EmptyInput,

    #[error("non-finite activation in {layer}")]
    NonFinite { layer: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("infeasible alignment: {frames} frames cannot emit a target needing {needed}")]
    InfeasibleAlignment { frames: usize, needed: usize },

    #[error("label {label} out of range for {classes} classes (0 is reserved for blank)")]
    LabelRange { label: usize, classes: usize },

    #[error("error rate undefined for an empty reference")]
    EmptyReference,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
