//! Conditional noise-prediction network: a small U-shaped conv net over
//! [B, 4, 8, 8] latents with sinusoidal timestep embeddings added per
//! channel and cross-attention from the bottleneck to tokens derived from
//! the prompt's conditioning code.
//!
//! The output projection is zero-initialized, so an untrained denoiser
//! predicts exactly zero noise — a convenient fixed point for tests.

use rand_chacha::ChaCha8Rng;

use crate::codec::{LATENT_CHANNELS, LATENT_SIZE};
use crate::error::{Error, Result};
use crate::nn::{attention, timestep_features, Conv2dLayer, GroupNormLayer, Linear, Params};
use crate::ops;
use crate::tensor::Tensor;
use crate::text::TEXT_DIM;

/// Timestep embedding width fed to the shared MLP.
pub const TIME_FEATURES: usize = 32;
/// Width of the shared timestep embedding after the MLP.
pub const TIME_EMBED: usize = 64;
/// Number of condition tokens derived from the conditioning code.
pub const COND_TOKENS: usize = 2;
/// Attention width at the bottleneck.
const ATTN_DIM: usize = 64;
const W0: usize = 32; // width at 8x8
const W1: usize = 64; // width at 4x4

struct ResBlock {
    n1: GroupNormLayer,
    c1: Conv2dLayer,
    t_proj: Linear,
    n2: GroupNormLayer,
    c2: Conv2dLayer,
    skip: Option<Conv2dLayer>, // 1x1 when channel count changes
}

impl ResBlock {
    fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng, trainable: bool) -> ResBlock {
        ResBlock {
            n1: GroupNormLayer::new(c_in, c_in / 4, trainable),
            c1: Conv2dLayer::new(c_in, c_out, 3, 1, 1, rng, trainable),
            t_proj: Linear::new(TIME_EMBED, c_out, rng, trainable),
            n2: GroupNormLayer::new(c_out, c_out / 4, trainable),
            c2: Conv2dLayer::new(c_out, c_out, 3, 1, 1, rng, trainable),
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv2dLayer::new(c_in, c_out, 1, 1, 0, rng, trainable))
            },
        }
    }

    fn forward(&self, x: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(&self.n1.forward(x)?.silu()?)?;
        let h = h.add_chan_batched(&self.t_proj.forward(t_emb)?)?;
        let h = self.c2.forward(&self.n2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        h.add(&s)
    }
}

impl Params for ResBlock {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.n1.named_params(&format!("{prefix}.n1"), out);
        self.c1.named_params(&format!("{prefix}.c1"), out);
        self.t_proj.named_params(&format!("{prefix}.t"), out);
        self.n2.named_params(&format!("{prefix}.n2"), out);
        self.c2.named_params(&format!("{prefix}.c2"), out);
        if let Some(s) = &self.skip {
            s.named_params(&format!("{prefix}.skip"), out);
        }
    }
}

/// Cross-attention from bottleneck positions to condition tokens.
struct CrossAttention {
    norm: GroupNormLayer,
    to_tokens: Linear, // code [B, TEXT_DIM] -> COND_TOKENS * ATTN_DIM
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl CrossAttention {
    fn new(channels: usize, rng: &mut ChaCha8Rng, trainable: bool) -> CrossAttention {
        CrossAttention {
            norm: GroupNormLayer::new(channels, channels / 4, trainable),
            to_tokens: Linear::new(TEXT_DIM, COND_TOKENS * ATTN_DIM, rng, trainable),
            wq: Linear::new(channels, ATTN_DIM, rng, trainable),
            wk: Linear::new(ATTN_DIM, ATTN_DIM, rng, trainable),
            wv: Linear::new(ATTN_DIM, ATTN_DIM, rng, trainable),
            wo: Linear::new(ATTN_DIM, channels, rng, trainable),
        }
    }

    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = match x.shape() {
            [b, c, h, w] => [*b, *c, *h, *w],
            s => {
                return Err(Error::ShapeMismatch {
                    op: "cross_attention",
                    detail: format!("{s:?} vs [B, C, H, W]"),
                })
            }
        };
        let tokens = self
            .to_tokens
            .forward(cond)?
            .reshape(&[b, COND_TOKENS, ATTN_DIM])?;
        // [B, C, H*W] -> [B, H*W, C]: positions become queries
        let q = self
            .wq
            .forward(&x.reshape(&[b, c, h * w])?.transpose_last2()?)?;
        let a = attention(
            &q,
            &self.wk.forward(&tokens)?,
            &self.wv.forward(&tokens)?,
            None,
        )?;
        let a = self
            .wo
            .forward(&a)?
            .transpose_last2()?
            .reshape(&[b, c, h, w])?;
        self.norm.forward(&a)?.add(x)
    }
}

impl Params for CrossAttention {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm.named_params(&format!("{prefix}.norm"), out);
        self.to_tokens.named_params(&format!("{prefix}.tokens"), out);
        self.wq.named_params(&format!("{prefix}.wq"), out);
        self.wk.named_params(&format!("{prefix}.wk"), out);
        self.wv.named_params(&format!("{prefix}.wv"), out);
        self.wo.named_params(&format!("{prefix}.wo"), out);
    }
}

pub struct Denoiser {
    t1: Linear,
    t2: Linear,
    conv_in: Conv2dLayer,
    down_a: ResBlock,
    down_b: ResBlock,
    down_sample: Conv2dLayer, // stride 2, W0 -> W1
    mid_a: ResBlock,
    attn: CrossAttention,
    mid_b: ResBlock,
    up_conv: Conv2dLayer, // after upsample, W1 -> W0
    up_a: ResBlock,       // takes skip concat: 2*W0 -> W0
    up_b: ResBlock,
    out_norm: GroupNormLayer,
    conv_out: Conv2dLayer, // zero-initialized
}

impl Denoiser {
    pub fn new(rng: &mut ChaCha8Rng, trainable: bool) -> Denoiser {
        Denoiser {
            t1: Linear::new(TIME_FEATURES, TIME_EMBED, rng, trainable),
            t2: Linear::new(TIME_EMBED, TIME_EMBED, rng, trainable),
            conv_in: Conv2dLayer::new(LATENT_CHANNELS, W0, 3, 1, 1, rng, trainable),
            down_a: ResBlock::new(W0, W0, rng, trainable),
            down_b: ResBlock::new(W0, W0, rng, trainable),
            down_sample: Conv2dLayer::new(W0, W1, 3, 2, 1, rng, trainable),
            mid_a: ResBlock::new(W1, W1, rng, trainable),
            attn: CrossAttention::new(W1, rng, trainable),
            mid_b: ResBlock::new(W1, W1, rng, trainable),
            up_conv: Conv2dLayer::new(W1, W0, 3, 1, 1, rng, trainable),
            up_a: ResBlock::new(2 * W0, W0, rng, trainable),
            up_b: ResBlock::new(W0, W0, rng, trainable),
            out_norm: GroupNormLayer::new(W0, W0 / 4, trainable),
            conv_out: Conv2dLayer::new_zeroed(W0, LATENT_CHANNELS, 3, 1, 1, trainable),
        }
    }

    /// Replace the zero-initialized output head with a random one. A
    /// fresh net predicts exactly zero, which also zeroes all upstream
    /// gradients; tests that need gradient flow without pretraining use
    /// this to get a non-degenerate net.
    #[doc(hidden)]
    pub fn unzero_output_head(&mut self, rng: &mut ChaCha8Rng) {
        let trainable = self.conv_out.params().iter().any(|p| p.requires_grad());
        self.conv_out = Conv2dLayer::new(W0, LATENT_CHANNELS, 3, 1, 1, rng, trainable);
    }

    /// Predict the noise in `z` ([B, 4, 8, 8]) at per-sample timesteps
    /// `t` (length B, 1-based) under per-sample conditioning codes
    /// `cond` ([B, TEXT_DIM]).
    pub fn forward(&self, z: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        if s.len() != 4 || s[1] != LATENT_CHANNELS || s[2] != LATENT_SIZE || s[3] != LATENT_SIZE {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                detail: format!("{s:?} vs [B, {LATENT_CHANNELS}, {LATENT_SIZE}, {LATENT_SIZE}]"),
            });
        }
        let b = s[0];
        if t.len() != b {
            return Err(Error::invalid(format!("denoiser: {} timesteps for batch {b}", t.len())));
        }
        if cond.shape() != [b, TEXT_DIM] {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                detail: format!("cond {:?} vs [{b}, {TEXT_DIM}]", cond.shape()),
            });
        }
        let feats: Vec<Tensor> = t
            .iter()
            .map(|&ti| timestep_features(ti, TIME_FEATURES)?.reshape(&[1, TIME_FEATURES]))
            .collect::<Result<_>>()?;
        let feat_refs: Vec<&Tensor> = feats.iter().collect();
        let t_feat = ops::concat_rows(&feat_refs)?; // [B, TIME_FEATURES]
        let t_emb = self.t2.forward(&self.t1.forward(&t_feat)?.silu()?)?;

        let x = self.conv_in.forward(z)?;
        let x = self.down_a.forward(&x, &t_emb)?;
        let skip = self.down_b.forward(&x, &t_emb)?;
        let x = self.down_sample.forward(&skip)?;
        let x = self.mid_a.forward(&x, &t_emb)?;
        let x = self.attn.forward(&x, cond)?;
        let x = self.mid_b.forward(&x, &t_emb)?;
        let x = self.up_conv.forward(&x.upsample_nearest2x()?)?;
        let x = ops::concat_channels(&x, &skip)?;
        let x = self.up_a.forward(&x, &t_emb)?;
        let x = self.up_b.forward(&x, &t_emb)?;
        self.conv_out.forward(&self.out_norm.forward(&x)?.silu()?)
    }
}

impl Params for Denoiser {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.t1.named_params(&format!("{prefix}.t1"), out);
        self.t2.named_params(&format!("{prefix}.t2"), out);
        self.conv_in.named_params(&format!("{prefix}.conv_in"), out);
        self.down_a.named_params(&format!("{prefix}.down_a"), out);
        self.down_b.named_params(&format!("{prefix}.down_b"), out);
        self.down_sample.named_params(&format!("{prefix}.down_sample"), out);
        self.mid_a.named_params(&format!("{prefix}.mid_a"), out);
        self.attn.named_params(&format!("{prefix}.attn"), out);
        self.mid_b.named_params(&format!("{prefix}.mid_b"), out);
        self.up_conv.named_params(&format!("{prefix}.up_conv"), out);
        self.up_a.named_params(&format!("{prefix}.up_a"), out);
        self.up_b.named_params(&format!("{prefix}.up_b"), out);
        self.out_norm.named_params(&format!("{prefix}.out_norm"), out);
        self.conv_out.named_params(&format!("{prefix}.conv_out"), out);
    }
}
