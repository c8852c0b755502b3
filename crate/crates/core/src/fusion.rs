//! Fusion block merging the trainable embedding with the frozen
//! reference embedding.
//!
//! Three variants: elementwise adding, channel concatenation with a
//! pointwise convolution back to d_emb, and concatenation gated by a
//! squeeze-excite channel attention before the pointwise convolution.
//! Channel order in the concatenation is trainable first, reference
//! second; the reference-attention ratio indexes the second half.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamStore};
use crate::tape::NodeId;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Add,
    Concat,
    ConcatCa,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionMode::Add => write!(f, "add"),
            FusionMode::Concat => write!(f, "concat"),
            FusionMode::ConcatCa => write!(f, "concat_ca"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub d_emb: usize,
    /// squeeze-excite bottleneck ratio
    pub squeeze_ratio: usize,
}

impl FusionConfig {
    pub fn new(mode: FusionMode, d_emb: usize) -> Self {
        Self {
            mode,
            d_emb,
            squeeze_ratio: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.squeeze_ratio == 0 {
            return Err(Error::Config("squeeze ratio must be >= 1".into()));
        }
        if self.mode == FusionMode::ConcatCa && (2 * self.d_emb) % self.squeeze_ratio != 0 {
            return Err(Error::Config(format!(
                "squeeze ratio {} does not divide 2*d_emb = {}",
                self.squeeze_ratio,
                2 * self.d_emb
            )));
        }
        Ok(())
    }
}

pub struct FusionBlock {
    pub cfg: FusionConfig,
    proj_trainable: Linear,
    proj_reference: Linear,
    conv: Linear,
    squeeze: Linear,
    excite: Linear,
}

/// Tape handles of one fusion pass. `channel_attention` is present only
/// in concat-channel-attention mode and lies strictly inside (0, 1).
pub struct FusionNodes {
    pub merged: NodeId,
    pub channel_attention: Option<NodeId>,
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: FusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_emb;
        let proj_trainable = Linear::new(store, &format!("{prefix}.proj_t"), d, d, seed);
        let proj_reference = Linear::new(store, &format!("{prefix}.proj_r"), d, d, seed);
        let conv = Linear::new(store, &format!("{prefix}.conv"), 2 * d, d, seed);
        let d_sq = (2 * d / cfg.squeeze_ratio).max(1);
        // small noise keeps the sigmoid gate near 0.5 at initialization
        let squeeze = Linear::new_small(store, &format!("{prefix}.squeeze"), 2 * d, d_sq, seed, 0.05);
        let excite = Linear::new_small(store, &format!("{prefix}.excite"), d_sq, 2 * d, seed, 0.05);
        Ok(Self {
            cfg,
            proj_trainable,
            proj_reference,
            conv,
            squeeze,
            excite,
        })
    }

    /// Merge T x d_emb trainable and reference embeddings. All rows are
    /// assumed valid (padding is stripped before the acoustic models).
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        a_trainable: NodeId,
        a_reference: NodeId,
        trainable: bool,
    ) -> Result<FusionNodes> {
        let dim_t = ctx.t.value(a_trainable).dim();
        let dim_r = ctx.t.value(a_reference).dim();
        if dim_t != dim_r || dim_t.1 != self.cfg.d_emb {
            return Err(Error::Contract(format!(
                "fusion inputs {dim_t:?} vs {dim_r:?}, d_emb {}",
                self.cfg.d_emb
            )));
        }
        let proj_t = self.proj_trainable.forward(ctx, a_trainable, trainable);
        let proj_r = self.proj_reference.forward(ctx, a_reference, trainable);

        match self.cfg.mode {
            FusionMode::Add => Ok(FusionNodes {
                merged: ctx.t.add(proj_t, proj_r),
                channel_attention: None,
            }),
            FusionMode::Concat => {
                let cat = ctx.t.concat_cols(&[proj_t, proj_r]);
                Ok(FusionNodes {
                    merged: self.conv.forward(ctx, cat, trainable),
                    channel_attention: None,
                })
            }
            FusionMode::ConcatCa => {
                let cat = ctx.t.concat_cols(&[proj_t, proj_r]);
                let maxed = ctx.t.max_rows(cat);
                let meaned = ctx.t.mean_rows(cat);
                let pooled = ctx.t.add(maxed, meaned);
                let squeezed = self.squeeze.forward(ctx, pooled, trainable);
                let squeezed = ctx.t.relu(squeezed);
                let excited = self.excite.forward(ctx, squeezed, trainable);
                let excited = ctx.t.relu(excited);
                let ca = ctx.t.sigmoid(excited);
                let gated = ctx.t.mul_row(cat, ca);
                Ok(FusionNodes {
                    merged: self.conv.forward(ctx, gated, trainable),
                    channel_attention: Some(ca),
                })
            }
        }
    }
}

/// Summed attention on the reference half divided by the summed attention
/// on the trainable half of a channel-attention vector (1 x 2*d_emb).
pub fn reference_attention_ratio(ca: &Array2<f64>, d_emb: usize) -> Result<f64> {
    if ca.dim() != (1, 2 * d_emb) {
        return Err(Error::Contract(format!(
            "channel attention shape {:?}, expected (1, {})",
            ca.dim(),
            2 * d_emb
        )));
    }
    let trainable: f64 = (0..d_emb).map(|c| ca[[0, c]]).sum();
    let reference: f64 = (d_emb..2 * d_emb).map(|c| ca[[0, c]]).sum();
    Ok(reference / trainable)
}
