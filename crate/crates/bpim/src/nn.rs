//! Neural-network layers on top of the autodiff ops: convolution blocks,
//! normalization layers, CSP bottlenecks and the GSConv substitute.

use std::cell::Cell;

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{conv, norm, ops, Arr, Var};
use crate::scalar::Scalar;

/// Forward-pass context: mode plus a multiply-accumulate counter used for
/// the GFLOPs report.
pub struct Ctx {
    pub train: bool,
    macs: Cell<u64>,
}

impl Ctx {
    pub fn train() -> Self {
        Ctx {
            train: true,
            macs: Cell::new(0),
        }
    }

    pub fn eval() -> Self {
        Ctx {
            train: false,
            macs: Cell::new(0),
        }
    }

    pub fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub fn reset_macs(&self) {
        self.macs.set(0);
    }
}

/// Optimizer grouping for a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Multiplicative weights; receive weight decay.
    Weight,
    /// Additive terms (conv/linear biases, norm shifts); no decay, and the
    /// warmup schedule starts their learning rate high.
    Bias,
    /// Normalization gains; no decay.
    Norm,
    /// Non-trained state carried in checkpoints (batch-norm running stats).
    Stat,
}

pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub var: Var<T>,
}

/// Anything that owns parameters.
pub trait Layer<T: Scalar> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>);
}

/// Total trainable parameter count (running statistics excluded).
pub fn param_count<T: Scalar>(entries: &[ParamEntry<T>]) -> usize {
    entries
        .iter()
        .filter(|p| p.kind != ParamKind::Stat)
        .map(|p| p.var.value().len())
        .sum()
}

/// Deterministic weight initializer. The draw sequence depends only on the
/// seed and construction order, never on the scalar type, so f32 and f64
/// builds share initialization bit-for-bit (after rounding).
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Arr<T> {
        use rand::Rng;
        Arr::from_shape_simple_fn(IxDyn(shape), || {
            T::c(self.rng.random_range(-bound..bound))
        })
    }

    /// Fan-in scaled uniform init for conv/linear weights.
    pub fn kaiming<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Arr<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(shape, bound)
    }
}

// ---------------------------------------------------------------------------
// convolution layers
// ---------------------------------------------------------------------------

pub struct Conv2d<T: Scalar> {
    pub w: Var<T>,
    pub b: Option<Var<T>>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        assert!(c_in % groups == 0 && c_out % groups == 0);
        let fan_in = (c_in / groups) * k * k;
        let w = Var::parameter(init.kaiming(&[c_out, c_in / groups, k, k], fan_in));
        let b = bias.then(|| Var::parameter(init.kaiming(&[c_out], fan_in)));
        Conv2d {
            w,
            b,
            stride,
            pad: k / 2,
            groups,
        }
    }

    /// Conv with explicit zero padding override (1x1 reducers use pad 0).
    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn forward(&self, x: &Var<T>, ctx: &Ctx) -> Var<T> {
        let xs = x.shape();
        let ws = self.w.shape();
        let ho = conv::conv2d_out_size(xs[2], ws[2], self.stride, self.pad);
        let wo = conv::conv2d_out_size(xs[3], ws[3], self.stride, self.pad);
        ctx.add_macs((xs[0] * ws[0] * ho * wo * ws[1] * ws[2] * ws[3]) as u64);
        conv::conv2d(x, &self.w, self.b.as_ref(), self.stride, self.pad, self.groups)
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        out.push(ParamEntry {
            name: format!("{prefix}.w"),
            kind: ParamKind::Weight,
            var: self.w.clone(),
        });
        if let Some(b) = &self.b {
            out.push(ParamEntry {
                name: format!("{prefix}.b"),
                kind: ParamKind::Bias,
                var: b.clone(),
            });
        }
    }
}

pub struct Conv3d<T: Scalar> {
    pub w: Var<T>,
    pub b: Option<Var<T>>,
    pub pad: (usize, usize, usize),
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, k: (usize, usize, usize)) -> Self {
        let fan_in = c_in * k.0 * k.1 * k.2;
        let w = Var::parameter(init.kaiming(&[c_out, c_in, k.0, k.1, k.2], fan_in));
        Conv3d {
            w,
            b: None,
            pad: (k.0 / 2, k.1 / 2, k.2 / 2),
        }
    }

    pub fn forward(&self, x: &Var<T>, ctx: &Ctx) -> Var<T> {
        let xs = x.shape();
        let ws = self.w.shape();
        let so = xs[2] + 2 * self.pad.0 - ws[2] + 1;
        let ho = xs[3] + 2 * self.pad.1 - ws[3] + 1;
        let wo = xs[4] + 2 * self.pad.2 - ws[4] + 1;
        ctx.add_macs((xs[0] * ws[0] * so * ho * wo * ws[1] * ws[2] * ws[3] * ws[4]) as u64);
        conv::conv3d(x, &self.w, self.b.as_ref(), self.pad)
    }
}

impl<T: Scalar> Layer<T> for Conv3d<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        out.push(ParamEntry {
            name: format!("{prefix}.w"),
            kind: ParamKind::Weight,
            var: self.w.clone(),
        });
    }
}

// ---------------------------------------------------------------------------
// normalization layers
// ---------------------------------------------------------------------------

/// Batch normalization over axis 1, rank-agnostic (2D and 3D features).
///
/// Training uses batch statistics and maintains running averages; a batch
/// of one falls back to the running averages to avoid degenerate variance.
pub struct BatchNorm<T: Scalar> {
    pub gamma: Var<T>,
    pub beta: Var<T>,
    running_mean: Var<T>,
    running_var: Var<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Var::parameter(Arr::ones(IxDyn(&[channels]))),
            beta: Var::parameter(Arr::zeros(IxDyn(&[channels]))),
            running_mean: Var::constant(Arr::zeros(IxDyn(&[channels]))),
            running_var: Var::constant(Arr::ones(IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var<T>, ctx: &Ctx) -> Var<T> {
        let batch = x.shape()[0];
        let use_batch_stats = ctx.train && batch > 1;
        if use_batch_stats {
            let (y, stats) =
                norm::batch_norm(x, &self.gamma, &self.beta, T::c(self.eps), None);
            let (mean, var) = stats.expect("batch stats in train mode");
            let m: usize = x.value().len() / x.shape()[1];
            let bessel = if m > 1 {
                m as f64 / (m as f64 - 1.0)
            } else {
                1.0
            };
            let mom = T::c(self.momentum);
            let keep = T::one() - mom;
            let mean = mean.into_dyn();
            let var = var.into_dyn();
            self.running_mean
                .update_value(|r| r.zip_mut_with(&mean, |r, &b| *r = keep * *r + mom * b));
            self.running_var.update_value(|r| {
                r.zip_mut_with(&var, |r, &b| *r = keep * *r + mom * b * T::c(bessel))
            });
            y
        } else {
            let rm = self.running_mean.value();
            let rv = self.running_var.value();
            norm::batch_norm(x, &self.gamma, &self.beta, T::c(self.eps), Some((&rm, &rv))).0
        }
    }

    pub fn running_stats(&self) -> (Arr<T>, Arr<T>) {
        (self.running_mean.to_array(), self.running_var.to_array())
    }

    pub fn set_running_stats(&self, mean: Arr<T>, var: Arr<T>) {
        self.running_mean.set_value(mean);
        self.running_var.set_value(var);
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        out.push(ParamEntry {
            name: format!("{prefix}.gamma"),
            kind: ParamKind::Norm,
            var: self.gamma.clone(),
        });
        out.push(ParamEntry {
            name: format!("{prefix}.beta"),
            kind: ParamKind::Bias,
            var: self.beta.clone(),
        });
        out.push(ParamEntry {
            name: format!("{prefix}.running_mean"),
            kind: ParamKind::Stat,
            var: self.running_mean.clone(),
        });
        out.push(ParamEntry {
            name: format!("{prefix}.running_var"),
            kind: ParamKind::Stat,
            var: self.running_var.clone(),
        });
    }
}

/// Largest group count <= 16 that divides the channel count.
pub fn group_norm_groups(channels: usize) -> usize {
    let mut g = channels.min(16);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

pub struct GroupNorm<T: Scalar> {
    pub gamma: Var<T>,
    pub beta: Var<T>,
    pub groups: usize,
    pub eps: f64,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize) -> Self {
        GroupNorm {
            gamma: Var::parameter(Arr::ones(IxDyn(&[channels]))),
            beta: Var::parameter(Arr::zeros(IxDyn(&[channels]))),
            groups: group_norm_groups(channels),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        norm::group_norm(x, &self.gamma, &self.beta, self.groups, T::c(self.eps))
    }
}

impl<T: Scalar> Layer<T> for GroupNorm<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        out.push(ParamEntry {
            name: format!("{prefix}.gamma"),
            kind: ParamKind::Norm,
            var: self.gamma.clone(),
        });
        out.push(ParamEntry {
            name: format!("{prefix}.beta"),
            kind: ParamKind::Bias,
            var: self.beta.clone(),
        });
    }
}

pub struct LayerNorm<T: Scalar> {
    pub gamma: Var<T>,
    pub beta: Var<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Var::parameter(Arr::ones(IxDyn(&[dim]))),
            beta: Var::parameter(Arr::zeros(IxDyn(&[dim]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        norm::layer_norm_rows(x, &self.gamma, &self.beta, T::c(self.eps))
    }
}

impl<T: Scalar> Layer<T> for LayerNorm<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        out.push(ParamEntry {
            name: format!("{prefix}.gamma"),
            kind: ParamKind::Norm,
            var: self.gamma.clone(),
        });
        out.push(ParamEntry {
            name: format!("{prefix}.beta"),
            kind: ParamKind::Bias,
            var: self.beta.clone(),
        });
    }
}

// ---------------------------------------------------------------------------
// composite blocks
// ---------------------------------------------------------------------------

/// Activation selector for [`ConvBlock`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Silu,
    None,
}

/// Conv -> BatchNorm -> SiLU, the standard convolution unit here.
pub struct ConvBlock<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    pub act: Act,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        ConvBlock {
            conv: Conv2d::new(init, c_in, c_out, k, stride, 1, false),
            bn: BatchNorm::new(c_out),
            act: Act::Silu,
        }
    }

    pub fn new_grouped(
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(init, c_in, c_out, k, stride, groups, false),
            bn: BatchNorm::new(c_out),
            act: Act::Silu,
        }
    }

    pub fn with_act(mut self, act: Act) -> Self {
        self.act = act;
        self
    }

    /// Reconfigure in place so that (in eval mode) the block is the identity:
    /// 1x1 identity kernel and a normalization that cancels itself.
    pub fn make_identity_for_test(&mut self) {
        let ws = self.w_shape();
        assert_eq!(ws[0], ws[1], "identity requires c_in == c_out");
        assert_eq!(ws[2], 1, "identity requires a 1x1 kernel");
        let mut w = Arr::zeros(IxDyn(&ws));
        for c in 0..ws[0] {
            w[[c, c, 0, 0]] = T::one();
        }
        self.conv.w.set_value(w);
        let c = ws[0];
        let g = T::c((1.0 + self.bn.eps).sqrt());
        self.bn.gamma.set_value(Arr::from_elem(IxDyn(&[c]), g));
        self.bn.beta.set_value(Arr::zeros(IxDyn(&[c])));
        self.bn
            .set_running_stats(Arr::zeros(IxDyn(&[c])), Arr::ones(IxDyn(&[c])));
        self.act = Act::None;
    }

    fn w_shape(&self) -> Vec<usize> {
        self.conv.w.shape()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, x: &Var<T>, ctx: &Ctx) -> Var<T> {
        let y = self.bn.forward(&self.conv.forward(x, ctx), ctx);
        match self.act {
            Act::Silu => ops::silu(&y),
            Act::None => y,
        }
    }
}

impl<T: Scalar> Layer<T> for ConvBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
        self.bn.collect_params(&format!("{prefix}.bn"), out);
    }
}

pub struct Bottleneck<T: Scalar> {
    cv1: ConvBlock<T>,
    cv2: ConvBlock<T>,
    shortcut: bool,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new(init: &mut Init, c: usize, shortcut: bool) -> Self {
        Bottleneck {
            cv1: ConvBlock::new(init, c, c, 1, 1),
            cv2: ConvBlock::new(init, c, c, 3, 1),
            shortcut,
        }
    }

    pub fn forward(&self, x: &Var<T>, ctx: &Ctx) -> Var<T> {
        let y = self.cv2.forward(&self.cv1.forward(x, ctx), ctx);
        if self.shortcut {
            ops::add(x, &y)
        } else {
            y
        }
    }
}

impl<T: Scalar> Layer<T> for Bottleneck<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        self.cv1.collect_params(&format!("{prefix}.cv1"), out);
        self.cv2.collect_params(&format!("{prefix}.cv2"), out);
    }
}

/// CSP bottleneck stack with two parallel 1x1 paths.
pub struct CspStack<T: Scalar> {
    cv1: ConvBlock<T>,
    cv2: ConvBlock<T>,
    blocks: Vec<Bottleneck<T>>,
    cv3: ConvBlock<T>,
}

impl<T: Scalar> CspStack<T> {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, n: usize, shortcut: bool) -> Self {
        let hidden = (c_out / 2).max(1);
        CspStack {
            cv1: ConvBlock::new(init, c_in, hidden, 1, 1),
            cv2: ConvBlock::new(init, c_in, hidden, 1, 1),
            blocks: (0..n.max(1))
                .map(|_| Bottleneck::new(init, hidden, shortcut))
                .collect(),
            cv3: ConvBlock::new(init, 2 * hidden, c_out, 1, 1),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.cv3.out_channels()
    }

    pub fn forward(&self, x: &Var<T>, ctx: &Ctx) -> Var<T> {
        let mut main = self.cv1.forward(x, ctx);
        for b in &self.blocks {
            main = b.forward(&main, ctx);
        }
        let side = self.cv2.forward(x, ctx);
        self.cv3.forward(&ops::concat(1, &[main, side]), ctx)
    }
}

impl<T: Scalar> Layer<T> for CspStack<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        self.cv1.collect_params(&format!("{prefix}.cv1"), out);
        self.cv2.collect_params(&format!("{prefix}.cv2"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.m{i}"), out);
        }
        self.cv3.collect_params(&format!("{prefix}.cv3"), out);
    }
}

/// Interleave the two channel halves ([a0..an, b0..bn] -> [a0, b0, a1, ...]).
pub fn channel_shuffle2<T: Scalar>(x: &Var<T>) -> Var<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(c % 2 == 0, "channel_shuffle2: odd channel count");
    let y = ops::reshape(x, &[n, 2, c / 2, h, w]);
    let y = ops::permute(&y, &[0, 2, 1, 3, 4]);
    ops::reshape(&y, &[n, c, h, w])
}

/// Lightweight convolution used wherever backbone features are projected:
/// a dense conv producing half the output channels, a depthwise refinement
/// of that half, then concat + channel shuffle. `plain: true` swaps in a
/// single dense conv so ablations can separate this block's effect.
pub struct GsConv<T: Scalar> {
    pub dense: ConvBlock<T>,
    pub depthwise: Option<ConvBlock<T>>,
}

impl<T: Scalar> GsConv<T> {
    pub fn new(
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        plain: bool,
    ) -> Self {
        if plain {
            GsConv {
                dense: ConvBlock::new(init, c_in, c_out, k, stride),
                depthwise: None,
            }
        } else {
            assert!(c_out % 2 == 0, "gsconv: output channels must be even");
            let half = c_out / 2;
            GsConv {
                dense: ConvBlock::new(init, c_in, half, k, stride),
                depthwise: Some(ConvBlock::new_grouped(init, half, half, 3, 1, half)),
            }
        }
    }

    pub fn out_channels(&self) -> usize {
        match &self.depthwise {
            Some(_) => self.dense.out_channels() * 2,
            None => self.dense.out_channels(),
        }
    }

    pub fn forward(&self, x: &Var<T>, ctx: &Ctx) -> Var<T> {
        let a = self.dense.forward(x, ctx);
        match &self.depthwise {
            Some(dw) => {
                let b = dw.forward(&a, ctx);
                channel_shuffle2(&ops::concat(1, &[a, b]))
            }
            None => a,
        }
    }
}

impl<T: Scalar> Layer<T> for GsConv<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        self.dense.collect_params(&format!("{prefix}.dense"), out);
        if let Some(dw) = &self.depthwise {
            dw.collect_params(&format!("{prefix}.dw"), out);
        }
    }
}

pub struct Linear<T: Scalar> {
    pub w: Var<T>,
    pub b: Var<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Var::parameter(init.kaiming(&[d_in, d_out], d_in)),
            b: Var::parameter(init.kaiming(&[d_out], d_in)),
        }
    }

    /// Identity-initialized square projection (used by reduction tests).
    pub fn identity(dim: usize) -> Self {
        let mut w = Arr::zeros(IxDyn(&[dim, dim]));
        for i in 0..dim {
            w[[i, i]] = T::one();
        }
        Linear {
            w: Var::parameter(w),
            b: Var::parameter(Arr::zeros(IxDyn(&[dim]))),
        }
    }

    pub fn forward(&self, x: &Var<T>, ctx: &Ctx) -> Var<T> {
        let xs = x.shape();
        let ws = self.w.shape();
        ctx.add_macs((xs[0] * ws[0] * ws[1]) as u64);
        ops::add_rowvec(&ops::matmul(x, &self.w), &self.b)
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        out.push(ParamEntry {
            name: format!("{prefix}.w"),
            kind: ParamKind::Weight,
            var: self.w.clone(),
        });
        out.push(ParamEntry {
            name: format!("{prefix}.b"),
            kind: ParamKind::Bias,
            var: self.b.clone(),
        });
    }
}
