//! Position information guidance: a single-layer self-attention encoder over
//! the deepest backbone tap, a boundary-style enhancement, and rescaling of
//! the result onto every neck level.

use crate::autograd::{ops, pool, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock, Ctx, GroupNorm, Init, Layer, LayerNorm, Linear, ParamEntry};
use crate::scalar::Scalar;

/// Shape of the encoder attached to the last backbone tap.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> Result<usize> {
        if self.heads == 0 {
            return Err(Error::Config("attention heads must be >= 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        let d = self.model_dim / self.heads;
        if d == 0 {
            return Err(Error::Config("head_dim must be >= 1".into()));
        }
        Ok(d)
    }
}

/// Row-stochastic attention matrix softmax(q k^T / sqrt(d)).
pub fn attention_weights<T: Scalar>(q: &Var<T>, k: &Var<T>, ctx: &Ctx) -> Var<T> {
    let (qs, ks) = (q.shape(), k.shape());
    assert_eq!(qs.len(), 2);
    assert_eq!(qs[1], ks[1], "attention: head dim mismatch");
    let d = qs[1];
    ctx.add_macs((qs[0] * ks[0] * d) as u64);
    let scores = ops::matmul(q, &ops::permute(k, &[1, 0]));
    let scaled = ops::scale(&scores, T::c(1.0 / (d as f64).sqrt()));
    ops::softmax_rows(&scaled)
}

/// Scaled dot-product attention over token matrices [t, d].
pub fn attention<T: Scalar>(q: &Var<T>, k: &Var<T>, v: &Var<T>, ctx: &Ctx) -> Var<T> {
    let w = attention_weights(q, k, ctx);
    let (ws, vs) = (w.shape(), v.shape());
    assert_eq!(ws[1], vs[0], "attention: key/value token count mismatch");
    ctx.add_macs((ws[0] * ws[1] * vs[1]) as u64);
    ops::matmul(&w, v)
}

/// Multi-head attention with one projection per role plus an output map.
pub struct MultiHeadAttention<T: Scalar> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(init: &mut Init, cfg: &AttentionConfig) -> Result<Self> {
        cfg.head_dim()?;
        let c = cfg.model_dim;
        Ok(MultiHeadAttention {
            wq: Linear::new(init, c, c),
            wk: Linear::new(init, c, c),
            wv: Linear::new(init, c, c),
            wo: Linear::new(init, c, c),
            heads: cfg.heads,
        })
    }

    /// Identity projections; reduces to plain attention when heads == 1.
    pub fn identity(dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            wq: Linear::identity(dim),
            wk: Linear::identity(dim),
            wv: Linear::identity(dim),
            wo: Linear::identity(dim),
            heads,
        }
    }

    pub fn forward(&self, q: &Var<T>, k: &Var<T>, v: &Var<T>, ctx: &Ctx) -> Result<Var<T>> {
        let c = q.shape()[1];
        if c != self.wq.w.shape()[0] {
            return Err(Error::Contract(format!(
                "multi_head: token dim {} does not match model dim {}",
                c,
                self.wq.w.shape()[0]
            )));
        }
        if c % self.heads != 0 {
            return Err(Error::Config(format!(
                "multi_head: dim {c} not divisible by {} heads",
                self.heads
            )));
        }
        let dk = c / self.heads;
        let qp = self.wq.forward(q, ctx);
        let kp = self.wk.forward(k, ctx);
        let vp = self.wv.forward(v, ctx);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ops::narrow(&qp, 1, h * dk, dk);
            let kh = ops::narrow(&kp, 1, h * dk, dk);
            let vh = ops::narrow(&vp, 1, h * dk, dk);
            heads.push(attention(&qh, &kh, &vh, ctx));
        }
        let cat = ops::concat(1, &heads);
        Ok(self.wo.forward(&cat, ctx))
    }
}

impl<T: Scalar> Layer<T> for MultiHeadAttention<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        self.wq.collect_params(&format!("{prefix}.wq"), out);
        self.wk.collect_params(&format!("{prefix}.wk"), out);
        self.wv.collect_params(&format!("{prefix}.wv"), out);
        self.wo.collect_params(&format!("{prefix}.wo"), out);
    }
}

/// Single transformer encoder layer, post-norm arrangement.
pub struct EncoderLayer<T: Scalar> {
    pub mha: MultiHeadAttention<T>,
    pub ln1: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
    pub ln2: LayerNorm<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn new(init: &mut Init, cfg: &AttentionConfig) -> Result<Self> {
        Ok(EncoderLayer {
            mha: MultiHeadAttention::new(init, cfg)?,
            ln1: LayerNorm::new(cfg.model_dim),
            ff1: Linear::new(init, cfg.model_dim, cfg.ff_dim),
            ff2: Linear::new(init, cfg.ff_dim, cfg.model_dim),
            ln2: LayerNorm::new(cfg.model_dim),
        })
    }

    pub fn forward(&self, tokens: &Var<T>, ctx: &Ctx) -> Result<Var<T>> {
        let attended = self.mha.forward(tokens, tokens, tokens, ctx)?;
        let a = self.ln1.forward(&ops::add(tokens, &attended));
        let ff = self.ff2.forward(&ops::gelu(&self.ff1.forward(&a, ctx)), ctx);
        Ok(self.ln2.forward(&ops::add(&a, &ff)))
    }
}

impl<T: Scalar> Layer<T> for EncoderLayer<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        self.mha.collect_params(&format!("{prefix}.mha"), out);
        self.ln1.collect_params(&format!("{prefix}.ln1"), out);
        self.ff1.collect_params(&format!("{prefix}.ff1"), out);
        self.ff2.collect_params(&format!("{prefix}.ff2"), out);
        self.ln2.collect_params(&format!("{prefix}.ln2"), out);
    }
}

/// [c, h, w] -> [h*w, c] token matrix for one sample.
fn flatten_tokens<T: Scalar>(sample: &Var<T>) -> Var<T> {
    let s = sample.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let flat = ops::reshape(sample, &[c, h * w]);
    ops::permute(&flat, &[1, 0])
}

/// Inverse of [`flatten_tokens`].
fn unflatten_tokens<T: Scalar>(tokens: &Var<T>, c: usize, h: usize, w: usize) -> Var<T> {
    let back = ops::permute(tokens, &[1, 0]);
    ops::reshape(&back, &[1, c, h, w])
}

/// The PIG block: encoder over the level-5 tap, enhancement, and per-level
/// rescaling to the neck widths.
pub struct PigBlock<T: Scalar> {
    pub cfg: AttentionConfig,
    pub encoder: EncoderLayer<T>,
    /// Learned additive token embedding, present only when configured.
    pub pos_embed: Option<Var<T>>,
    /// 1x1 projection of the raw tap inside the enhancement concat.
    pub tap_proj: Conv2d<T>,
    /// Fuses [pi, tap_proj] down to the model width.
    pub fuse: Conv2d<T>,
    pub gn: GroupNorm<T>,
    /// Final 3x3 conv after the residual add.
    pub out_conv: ConvBlock<T>,
    /// Per level 2..=5: nearest-neighbor factor and the smoothing conv that
    /// maps onto that level's neck width.
    pub rescale: Vec<(usize, ConvBlock<T>)>,
}

impl<T: Scalar> PigBlock<T> {
    /// `neck_channels[k]` is the width of the neck feature at level k+2.
    /// `tokens` is h*w of the tap, required when `pos_embed` is on.
    pub fn new(
        init: &mut Init,
        cfg: AttentionConfig,
        neck_channels: &[usize; 4],
        pos_embed_tokens: Option<usize>,
    ) -> Result<Self> {
        cfg.head_dim()?;
        let c = cfg.model_dim;
        Ok(PigBlock {
            cfg,
            encoder: EncoderLayer::new(init, &cfg)?,
            pos_embed: pos_embed_tokens
                .map(|t| Var::parameter(init.kaiming(&[t, c], c))),
            tap_proj: Conv2d::new(init, c, c, 1, 1, 1, true),
            fuse: Conv2d::new(init, 2 * c, c, 1, 1, 1, false),
            gn: GroupNorm::new(c),
            out_conv: ConvBlock::new(init, c, c, 3, 1),
            rescale: (0..4usize)
                .map(|k| {
                    let factor = 1usize << (3 - k); // level 2 -> x8 ... level 5 -> x1
                    (factor, ConvBlock::new(init, c, neck_channels[k], 3, 1))
                })
                .collect(),
        })
    }

    /// Encoder output reshaped back to the tap layout ("position" feature).
    pub fn position_feature(&self, b5: &Var<T>, ctx: &Ctx) -> Result<Var<T>> {
        let s = b5.shape();
        if s.len() != 4 || s[1] != self.cfg.model_dim {
            return Err(Error::Contract(format!(
                "pig: tap shape {s:?} does not carry model_dim {}",
                self.cfg.model_dim
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let sample = ops::narrow(b5, 0, i, 1);
            let mut tokens = flatten_tokens(&sample);
            if let Some(pe) = &self.pos_embed {
                if pe.shape()[0] != h * w {
                    return Err(Error::Contract(format!(
                        "pig: positional embedding built for {} tokens, tap has {}",
                        pe.shape()[0],
                        h * w
                    )));
                }
                tokens = ops::add(&tokens, pe);
            }
            let encoded = self.encoder.forward(&tokens, ctx)?;
            outs.push(unflatten_tokens(&encoded, c, h, w));
        }
        Ok(if outs.len() == 1 {
            outs.pop().unwrap()
        } else {
            ops::concat(0, &outs)
        })
    }

    /// Enhanced, pre-rescaling feature:
    /// out_conv(pi + silu(gn(fuse(concat(pi, tap_proj(b5)))))).
    pub fn enhanced(&self, b5: &Var<T>, ctx: &Ctx) -> Result<Var<T>> {
        let pi = self.position_feature(b5, ctx)?;
        let tap = self.tap_proj.forward(b5, ctx);
        let fused = self.fuse.forward(&ops::concat(1, &[pi.clone(), tap]), ctx);
        let branch = ops::silu(&self.gn.forward(&fused));
        Ok(self.out_conv.forward(&ops::add(&pi, &branch), ctx))
    }

    /// Per-level guidance maps, index 0 holding level 2.
    pub fn forward(&self, b5: &Var<T>, ctx: &Ctx) -> Result<Vec<Var<T>>> {
        let base = self.enhanced(b5, ctx)?;
        Ok(self
            .rescale
            .iter()
            .map(|(factor, conv)| {
                let up = pool::upsample_nearest2d(&base, *factor);
                conv.forward(&up, ctx)
            })
            .collect())
    }
}

impl<T: Scalar> Layer<T> for PigBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        self.encoder.collect_params(&format!("{prefix}.encoder"), out);
        if let Some(pe) = &self.pos_embed {
            out.push(ParamEntry {
                name: format!("{prefix}.pos_embed"),
                kind: crate::nn::ParamKind::Weight,
                var: pe.clone(),
            });
        }
        self.tap_proj.collect_params(&format!("{prefix}.tap_proj"), out);
        self.fuse.collect_params(&format!("{prefix}.fuse"), out);
        self.gn.collect_params(&format!("{prefix}.gn"), out);
        self.out_conv.collect_params(&format!("{prefix}.out_conv"), out);
        for (k, (_, conv)) in self.rescale.iter().enumerate() {
            conv.collect_params(&format!("{prefix}.rescale{}", k + 2), out);
        }
    }
}
