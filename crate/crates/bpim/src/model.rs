//! Full detector assembly: CSP backbone with taps at strides 4/8/16/32, a
//! PANet-style neck with a stride-4 small-object level, the five fusion
//! blocks spliced in behind independent flags, and anchor heads.

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, PigBlock};
use crate::autograd::{ops, pool, Arr, Var};
use crate::boundary::BigBlock;
use crate::error::{Error, Result};
use crate::fusion::AwfFusion;
use crate::geometry::{BBox, Detection};
use crate::nn::{param_count, Conv2d, ConvBlock, CspStack, Ctx, Init, Layer, ParamEntry};
use crate::scale_fusion::{CsfBlock, TffLevel};
use crate::scalar::Scalar;

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const ANCHORS_PER_CELL: usize = 3;

/// Which fusion blocks are spliced into the graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleFlags {
    #[serde(default)]
    pub big: bool,
    #[serde(default)]
    pub awf: bool,
    #[serde(default)]
    pub pig: bool,
    #[serde(default)]
    pub csf_tff: bool,
}

impl ModuleFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        ModuleFlags {
            big: true,
            awf: true,
            pig: true,
            csf_tff: true,
        }
    }

    /// Every flag combination, baseline first, all-on last.
    pub fn all_subsets() -> Vec<ModuleFlags> {
        (0u8..16)
            .map(|bits| ModuleFlags {
                big: bits & 1 != 0,
                awf: bits & 2 != 0,
                pig: bits & 4 != 0,
                csf_tff: bits & 8 != 0,
            })
            .collect()
    }

    pub fn is_subset_of(&self, other: &ModuleFlags) -> bool {
        (!self.big || other.big)
            && (!self.awf || other.awf)
            && (!self.pig || other.pig)
            && (!self.csf_tff || other.csf_tff)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.big {
            parts.push("big");
        }
        if self.awf {
            parts.push("awf");
        }
        if self.pig {
            parts.push("pig");
        }
        if self.csf_tff {
            parts.push("csf_tff");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

fn default_width() -> f64 {
    0.25
}
fn default_depth() -> f64 {
    0.33
}
fn default_classes() -> usize {
    2
}
fn default_heads() -> usize {
    8
}
fn default_ff_dim() -> usize {
    1024
}
fn default_input() -> usize {
    640
}

/// Default anchor table: square priors at 1.25x / 2.5x / 5x of each stride,
/// in input pixels. Simple per-stride scaling, no dataset clustering.
pub fn default_anchors() -> Vec<Vec<(f64, f64)>> {
    STRIDES
        .iter()
        .map(|&s| {
            [1.25, 2.5, 5.0]
                .iter()
                .map(|m| (m * s as f64, m * s as f64))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_width")]
    pub width_multiple: f64,
    #[serde(default = "default_depth")]
    pub depth_multiple: f64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub enable: ModuleFlags,
    /// Attention heads of the position-guidance encoder.
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Hidden width of the encoder feed-forward.
    #[serde(default = "default_ff_dim")]
    pub ff_dim: usize,
    /// Three (w, h) anchor priors per level, in pixels at `input_size`.
    #[serde(default = "default_anchors")]
    pub anchors: Vec<Vec<(f64, f64)>>,
    #[serde(default = "default_input")]
    pub input_size: usize,
    /// Swap the GSConv substitute for a plain convolution.
    #[serde(default)]
    pub gsconv_plain: bool,
    /// Add a learned positional embedding to the encoder tokens.
    #[serde(default)]
    pub pos_embed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width_multiple: default_width(),
            depth_multiple: default_depth(),
            num_classes: default_classes(),
            enable: ModuleFlags::none(),
            heads: default_heads(),
            ff_dim: default_ff_dim(),
            anchors: default_anchors(),
            input_size: default_input(),
            gsconv_plain: false,
            pos_embed: false,
        }
    }
}

fn make_divisible(x: f64, divisor: usize) -> usize {
    (((x / divisor as f64).round() as usize).max(1)) * divisor
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if !(self.width_multiple > 0.0) || !(self.depth_multiple > 0.0) {
            return Err(Error::Config(
                "width/depth multiples must be positive".into(),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.anchors.len() != 4 || self.anchors.iter().any(|a| a.len() != ANCHORS_PER_CELL) {
            return Err(Error::Config(
                "anchors must hold 3 (w,h) pairs for each of the 4 levels".into(),
            ));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        let c5 = self.channels()[4];
        if c5 % self.heads != 0 {
            return Err(Error::Config(format!(
                "deepest width {c5} is not divisible by {} attention heads",
                self.heads
            )));
        }
        Ok(())
    }

    /// Scaled channel widths at strides 2/4/8/16/32.
    pub fn channels(&self) -> [usize; 5] {
        let base = [64.0, 128.0, 256.0, 512.0, 1024.0];
        base.map(|b| make_divisible(b * self.width_multiple, 8))
    }

    /// Scaled repeat count for a nominal depth.
    pub fn depth(&self, nominal: usize) -> usize {
        ((nominal as f64 * self.depth_multiple).round() as usize).max(1)
    }

    /// Channels entering each detection head (levels 2..=5).
    pub fn head_channels(&self) -> [usize; 4] {
        let c = self.channels();
        [c[1], c[2], c[3], c[4]]
    }

    /// Neck mid-feature widths (levels 2..=5; level 5 is the reduced tap).
    pub fn neck_channels(&self) -> [usize; 4] {
        let c = self.channels();
        [c[1], c[2], c[3], c[3]]
    }
}

/// Raw head output for one pyramid level.
pub struct LevelPrediction<T: Scalar> {
    pub level: usize,
    pub stride: usize,
    /// [batch, anchors*(5+classes), h, w]
    pub raw: Var<T>,
}

pub struct PredictionSet<T: Scalar> {
    pub levels: Vec<LevelPrediction<T>>,
}

struct Backbone<T: Scalar> {
    stem: ConvBlock<T>,
    stages: Vec<(ConvBlock<T>, CspStack<T>)>,
}

impl<T: Scalar> Backbone<T> {
    fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let c = cfg.channels();
        let depths = [cfg.depth(3), cfg.depth(6), cfg.depth(9), cfg.depth(3)];
        let mut stages = Vec::new();
        let mut prev = c[0];
        for (k, &width) in c[1..].iter().enumerate() {
            stages.push((
                ConvBlock::new(init, prev, width, 3, 2),
                CspStack::new(init, width, width, depths[k], true),
            ));
            prev = width;
        }
        Backbone {
            stem: ConvBlock::new(init, 3, c[0], 3, 2),
            stages,
        }
    }

    fn forward(&self, x: &Var<T>, ctx: &Ctx) -> Vec<Var<T>> {
        let mut cur = self.stem.forward(x, ctx);
        let mut taps = Vec::with_capacity(4);
        for (down, csp) in &self.stages {
            cur = csp.forward(&down.forward(&cur, ctx), ctx);
            taps.push(cur.clone());
        }
        taps
    }
}

impl<T: Scalar> Layer<T> for Backbone<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        self.stem.collect_params(&format!("{prefix}.stem"), out);
        for (k, (down, csp)) in self.stages.iter().enumerate() {
            down.collect_params(&format!("{prefix}.down{}", k + 2), out);
            csp.collect_params(&format!("{prefix}.csp{}", k + 2), out);
        }
    }
}

struct TopDown<T: Scalar> {
    lat5: ConvBlock<T>,
    td4: CspStack<T>,
    lat4: ConvBlock<T>,
    td3: CspStack<T>,
    lat3: ConvBlock<T>,
    td2: CspStack<T>,
}

impl<T: Scalar> TopDown<T> {
    fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let c = cfg.channels();
        let d = cfg.depth(3);
        TopDown {
            lat5: ConvBlock::new(init, c[4], c[3], 1, 1),
            td4: CspStack::new(init, 2 * c[3], c[3], d, false),
            lat4: ConvBlock::new(init, c[3], c[2], 1, 1),
            td3: CspStack::new(init, 2 * c[2], c[2], d, false),
            lat3: ConvBlock::new(init, c[2], c[1], 1, 1),
            td2: CspStack::new(init, 2 * c[1], c[1], d, false),
        }
    }
}

impl<T: Scalar> Layer<T> for TopDown<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        self.lat5.collect_params(&format!("{prefix}.lat5"), out);
        self.td4.collect_params(&format!("{prefix}.td4"), out);
        self.lat4.collect_params(&format!("{prefix}.lat4"), out);
        self.td3.collect_params(&format!("{prefix}.td3"), out);
        self.lat3.collect_params(&format!("{prefix}.lat3"), out);
        self.td2.collect_params(&format!("{prefix}.td2"), out);
    }
}

enum BottomUp<T: Scalar> {
    /// Strided-conv downsampling concatenated with the lateral features.
    Plain {
        downs: Vec<ConvBlock<T>>,
        fuses: Vec<CspStack<T>>,
    },
    /// Three-feature fusion at every level, with CSP fusion after concat.
    Fused {
        tff: Vec<TffLevel<T>>,
        fuses: Vec<CspStack<T>>,
    },
}

impl<T: Scalar> Layer<T> for BottomUp<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        match self {
            BottomUp::Plain { downs, fuses } => {
                for (k, d) in downs.iter().enumerate() {
                    d.collect_params(&format!("{prefix}.down{}", k + 2), out);
                }
                for (k, f) in fuses.iter().enumerate() {
                    f.collect_params(&format!("{prefix}.fuse{}", k + 3), out);
                }
            }
            BottomUp::Fused { tff, fuses } => {
                for t in tff {
                    t.collect_params(&format!("{prefix}.tff{}", t.level), out);
                }
                for (k, f) in fuses.iter().enumerate() {
                    f.collect_params(&format!("{prefix}.fuse{}", k + 2), out);
                }
            }
        }
    }
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    backbone: Backbone<T>,
    top_down: TopDown<T>,
    big: Option<Vec<BigBlock<T>>>,
    pig: Option<PigBlock<T>>,
    csf: Option<CsfBlock<T>>,
    bottom_up: BottomUp<T>,
    awf: Option<AwfFusion<T>>,
    heads: Vec<Conv2d<T>>,
}

/// Build the graph described by `config`, parameters seeded from `seed`.
/// With every flag off this is the plain baseline (backbone + neck + heads).
pub fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut init = Init::new(seed);
    let c = config.channels();
    let neck_c = config.neck_channels();
    let flags = config.enable;

    let backbone = Backbone::new(&mut init, config);
    let top_down = TopDown::new(&mut init, config);

    let big = flags.big.then(|| {
        let tap_c = [c[1], c[2], c[3], c[4]];
        (0..4)
            .map(|k| BigBlock::new(&mut init, tap_c[k], neck_c[k], config.gsconv_plain))
            .collect()
    });

    let pig = if flags.pig {
        let tokens = {
            let s = config.input_size / 32;
            s * s
        };
        Some(PigBlock::new(
            &mut init,
            AttentionConfig {
                heads: config.heads,
                model_dim: c[4],
                ff_dim: config.ff_dim,
            },
            &neck_c,
            config.pos_embed.then_some(tokens),
        )?)
    } else {
        None
    };

    let csf = flags
        .csf_tff
        .then(|| CsfBlock::new(&mut init, &[c[1], c[2], c[3], c[4]], c[1], c[1]));

    let d = config.depth(3);
    let bottom_up = if flags.csf_tff {
        let tff: Vec<TffLevel<T>> = vec![
            TffLevel::new(&mut init, 2, None, neck_c[0], flags.pig),
            TffLevel::new(&mut init, 3, Some(c[1]), neck_c[1], flags.pig),
            TffLevel::new(&mut init, 4, Some(c[2]), neck_c[2], flags.pig),
            TffLevel::new(&mut init, 5, Some(c[3]), neck_c[3], flags.pig),
        ];
        let outs = [c[1], c[2], c[3], c[4]];
        let fuses = tff
            .iter()
            .zip(outs)
            .map(|(t, out)| CspStack::new(&mut init, t.out_channels(), out, d, false))
            .collect();
        BottomUp::Fused { tff, fuses }
    } else {
        BottomUp::Plain {
            downs: vec![
                ConvBlock::new(&mut init, c[1], c[1], 3, 2),
                ConvBlock::new(&mut init, c[2], c[2], 3, 2),
                ConvBlock::new(&mut init, c[3], c[3], 3, 2),
            ],
            fuses: vec![
                CspStack::new(&mut init, 2 * c[1], c[2], d, false),
                CspStack::new(&mut init, 2 * c[2], c[3], d, false),
                CspStack::new(&mut init, 2 * c[3], c[4], d, false),
            ],
        }
    };

    let awf = flags
        .awf
        .then(|| AwfFusion::new(&mut init, &config.head_channels()));

    let out_per_anchor = 5 + config.num_classes;
    let heads: Vec<Conv2d<T>> = config
        .head_channels()
        .iter()
        .map(|&ch| Conv2d::new(&mut init, ch, ANCHORS_PER_CELL * out_per_anchor, 1, 1, 1, true))
        .collect();
    // objectness/class priors so raw heads start near "background"
    for (head, &stride) in heads.iter().zip(STRIDES.iter()) {
        let cells = (config.input_size / stride) as f64;
        let obj_prior = (8.0 / (cells * cells)).ln();
        let cls_prior = (0.6 / (config.num_classes as f64 - 0.99)).ln();
        if let Some(b) = &head.b {
            b.update_value(|bias| {
                for a in 0..ANCHORS_PER_CELL {
                    bias[[a * out_per_anchor + 4]] = T::c(obj_prior);
                    for k in 5..out_per_anchor {
                        bias[[a * out_per_anchor + k]] = T::c(cls_prior);
                    }
                }
            });
        }
    }

    Ok(Model {
        config: config.clone(),
        backbone,
        top_down,
        big,
        pig,
        csf,
        bottom_up,
        awf,
        heads,
    })
}

/// The reference graph with no fusion blocks.
pub fn build_baseline<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let mut cfg = config.clone();
    cfg.enable = ModuleFlags::none();
    build(&cfg, seed)
}

impl<T: Scalar> Model<T> {
    pub fn collect_params(&self) -> Vec<ParamEntry<T>> {
        let mut out = Vec::new();
        self.backbone.collect_params("backbone", &mut out);
        self.top_down.collect_params("neck", &mut out);
        if let Some(big) = &self.big {
            for (k, b) in big.iter().enumerate() {
                b.collect_params(&format!("big{}", k + 2), &mut out);
            }
        }
        if let Some(pig) = &self.pig {
            pig.collect_params("pig", &mut out);
        }
        if let Some(csf) = &self.csf {
            csf.collect_params("csf", &mut out);
        }
        self.bottom_up.collect_params("bottom_up", &mut out);
        if let Some(awf) = &self.awf {
            awf.collect_params("awf", &mut out);
        }
        for (k, h) in self.heads.iter().enumerate() {
            h.collect_params(&format!("head{}", k + 2), &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.collect_params())
    }

    pub fn zero_grad(&self) {
        for p in self.collect_params() {
            p.var.zero_grad();
        }
    }

    /// Forward pass. Input must be [n, 3, s, s] with s = config.input_size.
    pub fn forward(&self, images: &Var<T>, ctx: &Ctx) -> Result<PredictionSet<T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.config.input_size || s[3] != self.config.input_size
        {
            return Err(Error::Contract(format!(
                "forward: expected [n,3,{0},{0}] input, got {s:?}",
                self.config.input_size
            )));
        }

        let taps = self.backbone.forward(images, ctx);
        let (b2, b3, b4, b5) = (&taps[0], &taps[1], &taps[2], &taps[3]);

        let pig_maps = match &self.pig {
            Some(pig) => Some(pig.forward(b5, ctx)?),
            None => None,
        };
        let in_tff = matches!(self.bottom_up, BottomUp::Fused { .. });

        // top-down with the fusion blocks spliced at each level's mid feature
        let mut n5 = self.top_down.lat5.forward(b5, ctx);
        if let Some(big) = &self.big {
            n5 = big[3].forward(&n5, b5, ctx)?;
        }
        if let Some(maps) = &pig_maps {
            // the level-5 guidance map always joins the deepest mid feature
            n5 = ops::add(&n5, &maps[3]);
        }

        let u4 = pool::upsample_nearest2d(&n5, 2);
        let mut n4 = self
            .top_down
            .td4
            .forward(&ops::concat(1, &[u4, b4.clone()]), ctx);
        if let Some(big) = &self.big {
            n4 = big[2].forward(&n4, b4, ctx)?;
        }
        if let (Some(maps), false) = (&pig_maps, in_tff) {
            n4 = ops::add(&n4, &maps[2]);
        }

        let x4 = self.top_down.lat4.forward(&n4, ctx);
        let u3 = pool::upsample_nearest2d(&x4, 2);
        let mut n3 = self
            .top_down
            .td3
            .forward(&ops::concat(1, &[u3, b3.clone()]), ctx);
        if let Some(big) = &self.big {
            n3 = big[1].forward(&n3, b3, ctx)?;
        }
        if let (Some(maps), false) = (&pig_maps, in_tff) {
            n3 = ops::add(&n3, &maps[1]);
        }

        let x3 = self.top_down.lat3.forward(&n3, ctx);
        let u2 = pool::upsample_nearest2d(&x3, 2);
        let mut n2 = self
            .top_down
            .td2
            .forward(&ops::concat(1, &[u2, b2.clone()]), ctx);
        if let Some(big) = &self.big {
            n2 = big[0].forward(&n2, b2, ctx)?;
        }
        if let (Some(maps), false) = (&pig_maps, in_tff) {
            n2 = ops::add(&n2, &maps[0]);
        }

        // bottom-up path
        let pyramid = match &self.bottom_up {
            BottomUp::Plain { downs, fuses } => {
                let p2 = n2;
                let d2 = downs[0].forward(&p2, ctx);
                let p3 = fuses[0].forward(&ops::concat(1, &[d2, x3]), ctx);
                let d3 = downs[1].forward(&p3, ctx);
                let p4 = fuses[1].forward(&ops::concat(1, &[d3, x4]), ctx);
                let d4 = downs[2].forward(&p4, ctx);
                let p5 = fuses[2].forward(&ops::concat(1, &[d4, n5]), ctx);
                vec![p2, p3, p4, p5]
            }
            BottomUp::Fused { tff, fuses } => {
                let gd = |k: usize| pig_maps.as_ref().map(|m| m[k].clone());
                let t2 = tff[0].forward(None, &n2, gd(0).as_ref(), ctx)?;
                let mut p2 = fuses[0].forward(&t2, ctx);
                if let Some(csf) = &self.csf {
                    let hw = (p2.shape()[2], p2.shape()[3]);
                    let inject = csf.p2_injection(&taps, hw, ctx)?;
                    p2 = ops::add(&p2, &inject);
                }
                let t3 = tff[1].forward(Some(&p2), &n3, gd(1).as_ref(), ctx)?;
                let p3 = fuses[1].forward(&t3, ctx);
                let t4 = tff[2].forward(Some(&p3), &n4, gd(2).as_ref(), ctx)?;
                let p4 = fuses[2].forward(&t4, ctx);
                let t5 = tff[3].forward(Some(&p4), &n5, None, ctx)?;
                let p5 = fuses[3].forward(&t5, ctx);
                vec![p2, p3, p4, p5]
            }
        };

        let pyramid = match &self.awf {
            Some(awf) => awf.forward(&pyramid, ctx)?,
            None => pyramid,
        };

        let levels = pyramid
            .iter()
            .zip(self.heads.iter())
            .enumerate()
            .map(|(k, (p, head))| LevelPrediction {
                level: k + 2,
                stride: STRIDES[k],
                raw: head.forward(p, ctx),
            })
            .collect();
        Ok(PredictionSet { levels })
    }

    /// Multiply-accumulate count of one forward pass at the configured
    /// input size, reported as GFLOPs (2 * MACs / 1e9).
    pub fn count_gflops(&self) -> Result<f64> {
        let ctx = Ctx::eval();
        let guard = crate::autograd::no_grad();
        let zero = Var::constant(Arr::zeros(IxDyn(&[
            1,
            3,
            self.config.input_size,
            self.config.input_size,
        ])));
        self.forward(&zero, &ctx)?;
        drop(guard);
        Ok(2.0 * ctx.macs() as f64 / 1e9)
    }

    /// Decode raw head tensors into per-image detections (no gradients).
    /// Boxes come out normalized to the input frame and clipped to it.
    pub fn decode(&self, preds: &PredictionSet<T>, conf_threshold: T) -> Vec<Vec<Detection<T>>> {
        let batch = preds.levels[0].raw.shape()[0];
        let img = self.config.input_size as f64;
        let nc = self.config.num_classes;
        let per_anchor = 5 + nc;
        let mut out: Vec<Vec<Detection<T>>> = vec![Vec::new(); batch];
        for lp in &preds.levels {
            let raw = lp.raw.value();
            let shape = raw.shape().to_vec();
            let (h, w) = (shape[2], shape[3]);
            let stride = lp.stride as f64;
            let anchors = &self.config.anchors[lp.level - 2];
            for n in 0..batch {
                for (a, &(aw, ah)) in anchors.iter().enumerate() {
                    let base = a * per_anchor;
                    for gy in 0..h {
                        for gx in 0..w {
                            let sig = |c: usize| -> f64 {
                                let v = raw[[n, base + c, gy, gx]].to_f64_lossy();
                                1.0 / (1.0 + (-v).exp())
                            };
                            let obj = sig(4);
                            if obj <= conf_threshold.to_f64_lossy() {
                                continue;
                            }
                            let (mut best_cls, mut best_p) = (0usize, f64::MIN);
                            for k in 0..nc {
                                let p = sig(5 + k);
                                if p > best_p {
                                    best_p = p;
                                    best_cls = k;
                                }
                            }
                            let conf = obj * best_p;
                            if conf <= conf_threshold.to_f64_lossy() {
                                continue;
                            }
                            let cx = ((2.0 * sig(0) - 0.5 + gx as f64) * stride) / img;
                            let cy = ((2.0 * sig(1) - 0.5 + gy as f64) * stride) / img;
                            let bw = {
                                let t = 2.0 * sig(2);
                                t * t * aw / img
                            };
                            let bh = {
                                let t = 2.0 * sig(3);
                                t * t * ah / img
                            };
                            let bbox = BBox::new(T::c(cx), T::c(cy), T::c(bw), T::c(bh))
                                .clip_unit();
                            if bbox.w <= T::zero() || bbox.h <= T::zero() {
                                continue;
                            }
                            out[n].push(Detection {
                                bbox,
                                class_idx: best_cls,
                                conf: T::c(conf),
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(flags: ModuleFlags, input: usize) -> ModelConfig {
        ModelConfig {
            width_multiple: 0.125,
            depth_multiple: 0.2,
            num_classes: 2,
            enable: flags,
            heads: 4,
            ff_dim: 32,
            input_size: input,
            ..Default::default()
        }
    }

    fn zeros_input<TS: Scalar>(n: usize, s: usize) -> Var<TS> {
        Var::constant(Arr::zeros(IxDyn(&[n, 3, s, s])))
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = toy_config(ModuleFlags::none(), 64);
        cfg.input_size = 65;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config(ModuleFlags::none(), 64);
        cfg.width_multiple = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config(ModuleFlags::none(), 64);
        cfg.heads = 7; // 128 not divisible by 7
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn head_grids_follow_strides() {
        let cfg = toy_config(ModuleFlags::none(), 64);
        let model = build::<f32>(&cfg, 1).unwrap();
        let ctx = Ctx::eval();
        let preds = model.forward(&zeros_input(2, 64), &ctx).unwrap();
        assert_eq!(preds.levels.len(), 4);
        for (lp, stride) in preds.levels.iter().zip(STRIDES) {
            let s = lp.raw.shape();
            assert_eq!(s[0], 2);
            assert_eq!(s[1], 3 * 7);
            assert_eq!(s[2], 64 / stride);
            assert_eq!(s[3], 64 / stride);
        }
        // finite outputs on a zero image
        for lp in &preds.levels {
            assert!(lp.raw.value().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn wrong_input_size_is_contract_error() {
        let cfg = toy_config(ModuleFlags::none(), 64);
        let model = build::<f32>(&cfg, 1).unwrap();
        let ctx = Ctx::eval();
        assert!(matches!(
            model.forward(&zeros_input::<f32>(1, 32), &ctx),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn baseline_equals_flags_off_bitwise() {
        let cfg = toy_config(ModuleFlags::none(), 64);
        let a = build::<f32>(&cfg, 7).unwrap();
        let b = build_baseline::<f32>(&cfg, 7).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        let ctx = Ctx::eval();
        let x = Var::constant(crate::autograd::check::randn::<f32>(&[1, 3, 64, 64], 9));
        let pa = a.forward(&x, &ctx).unwrap();
        let pb = b.forward(&x, &ctx).unwrap();
        for (la, lb) in pa.levels.iter().zip(pb.levels.iter()) {
            assert_eq!(la.raw.to_array(), lb.raw.to_array());
        }
    }

    #[test]
    fn param_count_is_flag_monotone() {
        let counts: Vec<(ModuleFlags, usize)> = ModuleFlags::all_subsets()
            .into_iter()
            .map(|f| {
                let cfg = toy_config(f, 64);
                let m = build::<f32>(&cfg, 3).unwrap();
                (f, m.param_count())
            })
            .collect();
        let baseline = counts[0].1;
        for (f, c) in &counts {
            if *f != ModuleFlags::none() {
                assert!(*c > baseline, "{} should add parameters", f.label());
            }
            for (g, d) in &counts {
                if f.is_subset_of(g) && f != g {
                    assert!(c < d, "{} vs {}", f.label(), g.label());
                }
            }
        }
    }

    #[test]
    fn all_flag_subsets_run_forward() {
        let ctx = Ctx::eval();
        for flags in ModuleFlags::all_subsets() {
            let cfg = toy_config(flags, 64);
            let model = build::<f32>(&cfg, 11).unwrap();
            let preds = model.forward(&zeros_input(1, 64), &ctx).unwrap();
            for (lp, stride) in preds.levels.iter().zip(STRIDES) {
                assert_eq!(lp.raw.shape()[2], 64 / stride, "{}", flags.label());
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic_per_image() {
        let cfg = toy_config(ModuleFlags::all(), 64);
        let model = build::<f32>(&cfg, 5).unwrap();
        let ctx = Ctx::eval();
        let one = crate::autograd::check::randn::<f32>(&[1, 3, 64, 64], 6);
        let mut two = Arr::zeros(IxDyn(&[2, 3, 64, 64]));
        two.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(0..1))
            .assign(&one);
        two.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(1..2))
            .assign(&one);
        let preds = model.forward(&Var::constant(two), &ctx).unwrap();
        for lp in &preds.levels {
            let v = lp.raw.to_array();
            let img0 = v.index_axis(ndarray::Axis(0), 0).to_owned();
            let img1 = v.index_axis(ndarray::Axis(0), 1).to_owned();
            assert_eq!(img0, img1);
        }
    }

    #[test]
    fn gflops_counter_is_positive_and_flag_monotone() {
        let base = build::<f32>(&toy_config(ModuleFlags::none(), 64), 2)
            .unwrap()
            .count_gflops()
            .unwrap();
        let full = build::<f32>(&toy_config(ModuleFlags::all(), 64), 2)
            .unwrap()
            .count_gflops()
            .unwrap();
        assert!(base > 0.0);
        assert!(full > base);
    }
}
