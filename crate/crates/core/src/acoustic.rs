//! Convolutional acoustic model producing frame-level phonetic
//! embeddings plus CTC label logits.
//!
//! The network follows the Jasper recipe: a strided prologue convolution
//! (which performs the x2 time downsampling), a stack of blocks whose
//! sub-blocks are Conv1d + BatchNorm + ReLU + dropout with a projected
//! residual from block input to block output, a pointwise projection to
//! the embedding width, and a linear CTC head. The same type serves as
//! both the trainable model and the frozen reference model; freezing is
//! a property of how it is bound during a forward pass.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::D_PHONEME;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::{BatchNorm, Conv1d, Ctx, Dropout, Linear, ParamStore, TrainState};
use crate::tape::NodeId;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AcousticConfig {
    pub n_blocks: usize,
    pub subblocks_per_block: usize,
    pub d_emb: usize,
    /// convolution kernel per block
    pub kernel_sizes: Vec<usize>,
    pub prologue_kernel: usize,
    pub dropout: f64,
    /// fixed at 2; the prologue stride
    pub downsample_factor: usize,
    pub d_input: usize,
    /// CTC label count including blank (40, or 40 + groups when degraded)
    pub d_label: usize,
}

impl AcousticConfig {
    /// Laptop-friendly default.
    pub fn desk() -> Self {
        Self {
            n_blocks: 2,
            subblocks_per_block: 2,
            d_emb: 256,
            kernel_sizes: vec![11, 13],
            prologue_kernel: 11,
            dropout: 0.1,
            downsample_factor: 2,
            d_input: crate::features::D_FBANK,
            d_label: D_PHONEME,
        }
    }

    /// The full-scale configuration (5 blocks x 3 sub-blocks, 1024-dim
    /// embeddings) used by the original AESRC-sized experiments.
    pub fn full_scale() -> Self {
        Self {
            n_blocks: 5,
            subblocks_per_block: 3,
            d_emb: 1024,
            kernel_sizes: vec![11, 13, 17, 21, 25],
            prologue_kernel: 11,
            dropout: 0.1,
            downsample_factor: 2,
            d_input: crate::features::D_FBANK,
            d_label: D_PHONEME,
        }
    }

    /// Minimal config for gradient checks and fast tests.
    pub fn tiny(d_emb: usize) -> Self {
        Self {
            n_blocks: 1,
            subblocks_per_block: 1,
            d_emb,
            kernel_sizes: vec![3],
            prologue_kernel: 3,
            dropout: 0.0,
            downsample_factor: 2,
            d_input: crate::features::D_FBANK,
            d_label: D_PHONEME,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor != 2 {
            return Err(Error::Config("downsample factor is fixed at 2".into()));
        }
        if self.d_emb == 0 || self.n_blocks == 0 || self.subblocks_per_block == 0 {
            return Err(Error::Config("acoustic dimensions must be positive".into()));
        }
        if self.kernel_sizes.len() != self.n_blocks {
            return Err(Error::Config(format!(
                "{} kernel sizes for {} blocks",
                self.kernel_sizes.len(),
                self.n_blocks
            )));
        }
        if self.kernel_sizes.iter().chain([&self.prologue_kernel]).any(|k| k % 2 == 0 || *k == 0) {
            return Err(Error::Config("kernels must be odd and positive".into()));
        }
        if self.d_label <= 1 {
            return Err(Error::Config("need at least blank plus one label".into()));
        }
        Ok(())
    }

    /// Output frames for a given input length: ceil(T_in / 2), odd tails
    /// covered by right zero-padding in the prologue convolution.
    pub fn out_frames(&self, t_in: usize) -> usize {
        t_in.div_ceil(self.downsample_factor)
    }
}

struct SubBlock {
    conv: Conv1d,
    bn: BatchNorm,
}

struct Block {
    subs: Vec<SubBlock>,
    res_proj: Conv1d,
    res_bn: BatchNorm,
}

pub struct AcousticModel {
    pub cfg: AcousticConfig,
    pub prefix: String,
    prologue: Conv1d,
    prologue_bn: BatchNorm,
    blocks: Vec<Block>,
    final_proj: Conv1d,
    final_bn: BatchNorm,
    head: Linear,
    dropout: Dropout,
}

/// Tape handles of one acoustic forward pass.
pub struct AcousticNodes {
    /// T x d_emb phonetic embedding
    pub embedding: NodeId,
    /// T x d_label CTC logits
    pub logits: NodeId,
    pub valid_length: usize,
}

impl AcousticModel {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: AcousticConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let prologue = Conv1d::new(
            store,
            &format!("{prefix}.prologue.conv"),
            cfg.d_input,
            cfg.d_emb,
            cfg.prologue_kernel,
            cfg.downsample_factor,
            seed,
        );
        let prologue_bn = BatchNorm::new(store, &format!("{prefix}.prologue.bn"), cfg.d_emb);
        let mut blocks = Vec::new();
        for b in 0..cfg.n_blocks {
            let mut subs = Vec::new();
            for s in 0..cfg.subblocks_per_block {
                let base = format!("{prefix}.block{b}.sub{s}");
                subs.push(SubBlock {
                    conv: Conv1d::new(
                        store,
                        &format!("{base}.conv"),
                        cfg.d_emb,
                        cfg.d_emb,
                        cfg.kernel_sizes[b],
                        1,
                        seed,
                    ),
                    bn: BatchNorm::new(store, &format!("{base}.bn"), cfg.d_emb),
                });
            }
            let res_proj = Conv1d::new(
                store,
                &format!("{prefix}.block{b}.res.conv"),
                cfg.d_emb,
                cfg.d_emb,
                1,
                1,
                seed,
            );
            let res_bn = BatchNorm::new(store, &format!("{prefix}.block{b}.res.bn"), cfg.d_emb);
            blocks.push(Block {
                subs,
                res_proj,
                res_bn,
            });
        }
        let final_proj = Conv1d::new(
            store,
            &format!("{prefix}.final.conv"),
            cfg.d_emb,
            cfg.d_emb,
            1,
            1,
            seed,
        );
        let final_bn = BatchNorm::new(store, &format!("{prefix}.final.bn"), cfg.d_emb);
        let head = Linear::new(store, &format!("{prefix}.head"), cfg.d_emb, cfg.d_label, seed);
        let dropout = Dropout::new(cfg.dropout);
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
            prologue,
            prologue_bn,
            blocks,
            final_proj,
            final_bn,
            head,
            dropout,
        })
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: &FeatureSequence,
        trainable: bool,
        mut train: Option<&mut TrainState>,
    ) -> Result<AcousticNodes> {
        if x.valid_length == 0 || x.frames() == 0 {
            return Err(Error::EmptyInput);
        }
        let input = ctx
            .t
            .leaf(x.values.slice(ndarray::s![..x.valid_length, ..]).to_owned());

        let mut h = self.prologue.forward(ctx, input, trainable);
        h = self
            .prologue_bn
            .forward(ctx, h, trainable, train.as_deref_mut());
        h = ctx.t.relu(h);
        h = self.dropout.forward(ctx, h, train.as_deref_mut());
        self.check_finite(ctx, h, "prologue")?;

        for (b, block) in self.blocks.iter().enumerate() {
            let block_input = h;
            for (s, sub) in block.subs.iter().enumerate() {
                let last = s + 1 == block.subs.len();
                h = sub.conv.forward(ctx, h, trainable);
                h = sub.bn.forward(ctx, h, trainable, train.as_deref_mut());
                if last {
                    let mut res = block.res_proj.forward(ctx, block_input, trainable);
                    res = block
                        .res_bn
                        .forward(ctx, res, trainable, train.as_deref_mut());
                    h = ctx.t.add(h, res);
                }
                h = ctx.t.relu(h);
                h = self.dropout.forward(ctx, h, train.as_deref_mut());
            }
            self.check_finite(ctx, h, &format!("block{b}"))?;
        }

        let mut emb = self.final_proj.forward(ctx, h, trainable);
        emb = self
            .final_bn
            .forward(ctx, emb, trainable, train.as_deref_mut());
        emb = ctx.t.relu(emb);
        emb = self.dropout.forward(ctx, emb, train.as_deref_mut());
        self.check_finite(ctx, emb, "final")?;

        let logits = self.head.forward(ctx, emb, trainable);
        let valid_length = self.cfg.out_frames(x.valid_length);
        debug_assert_eq!(ctx.t.value(emb).nrows(), valid_length);
        Ok(AcousticNodes {
            embedding: emb,
            logits,
            valid_length,
        })
    }

    fn check_finite(&self, ctx: &Ctx, id: NodeId, layer: &str) -> Result<()> {
        if ctx.t.value(id).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: format!("{}.{layer}", self.prefix),
            });
        }
        Ok(())
    }
}

/// Greedy CTC decoding: per-frame argmax (ties to the lowest index),
/// collapse repeats, then drop blanks.
pub fn greedy_ctc_decode(logits: &Array2<f64>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for row in logits.rows() {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best != prev && best != crate::tape::CTC_BLANK {
            out.push(best);
        }
        prev = best;
    }
    out
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let m = b.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Levenshtein distance normalized by the reference length.
pub fn phone_error_rate(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}
