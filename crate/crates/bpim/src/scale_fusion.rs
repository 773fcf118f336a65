//! Cross-scale fusion (3D convolution along a synthetic scale axis over the
//! backbone taps) and the three-branch fusion that assembles each bottom-up
//! pyramid level from pooled pyramid, neck and position-guidance features.

use crate::autograd::{ops, pool, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Conv3d, ConvBlock, Ctx, Init, Layer, ParamEntry};
use crate::scalar::Scalar;

/// Nearest-neighbor resize restricted to the integer upsampling this
/// pipeline needs (pyramid sizes are power-of-two multiples).
pub fn resize_nearest<T: Scalar>(x: &Var<T>, target: (usize, usize)) -> Result<Var<T>> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    if (h, w) == target {
        return Ok(x.clone());
    }
    if target.0 % h == 0 && target.1 % w == 0 && target.0 / h == target.1 / w {
        return Ok(pool::upsample_nearest2d(x, target.0 / h));
    }
    Err(Error::Contract(format!(
        "resize_nearest: cannot map {h}x{w} onto {}x{}",
        target.0, target.1
    )))
}

/// Builds the scale sequence from the four backbone taps and collapses it
/// with a 3D conv + scale-axis max pooling.
pub struct CsfBlock<T: Scalar> {
    /// Per-level 1x1 projections onto the common width.
    pub aligners: Vec<ConvBlock<T>>,
    pub conv3: Conv3d<T>,
    pub bn3: BatchNorm<T>,
    /// Projects the collapsed map onto the consumer's width.
    pub out_align: Conv2d<T>,
}

impl<T: Scalar> CsfBlock<T> {
    pub fn new(
        init: &mut Init,
        tap_channels: &[usize; 4],
        common: usize,
        consumer_channels: usize,
    ) -> Self {
        CsfBlock {
            aligners: tap_channels
                .iter()
                .map(|&c| ConvBlock::new(init, c, common, 1, 1))
                .collect(),
            conv3: Conv3d::new(init, common, common, (3, 3, 3)),
            bn3: BatchNorm::new(common),
            out_align: Conv2d::new(init, common, consumer_channels, 1, 1, 1, true),
        }
    }

    /// Channel-align each tap, resample everything to the level-2 spatial
    /// size, and stack along a fresh scale axis: [n, c, 4, h2, w2].
    pub fn build_scale_sequence(&self, taps: &[Var<T>], ctx: &Ctx) -> Result<Var<T>> {
        if taps.len() != 4 {
            return Err(Error::Contract(format!(
                "scale sequence needs the four taps, got {}",
                taps.len()
            )));
        }
        let base = taps[0].shape();
        let (h2, w2) = (base[2], base[3]);
        for (k, t) in taps.iter().enumerate() {
            let s = t.shape();
            if s[2] != h2 >> k || s[3] != w2 >> k {
                return Err(Error::Contract(format!(
                    "tap {} has size {}x{}, expected {}x{}",
                    k + 2,
                    s[2],
                    s[3],
                    h2 >> k,
                    w2 >> k
                )));
            }
        }
        let mut slices = Vec::with_capacity(4);
        for (aligner, tap) in self.aligners.iter().zip(taps) {
            let aligned = aligner.forward(tap, ctx);
            slices.push(resize_nearest(&aligned, (h2, w2))?);
        }
        Ok(ops::stack_new_axis(2, &slices))
    }

    /// Conv3d -> BatchNorm3d -> SiLU -> max over the scale axis -> squeeze,
    /// then nearest-neighbor resize to the consumer size.
    pub fn collapse(&self, cs: &Var<T>, target: (usize, usize), ctx: &Ctx) -> Result<Var<T>> {
        let s = cs.shape();
        if s.len() != 5 || s[2] != 4 {
            return Err(Error::Contract(format!(
                "csf: scale sequence must be [n,c,4,h,w], got {s:?}"
            )));
        }
        let y = ops::silu(&self.bn3.forward(&self.conv3.forward(cs, ctx), ctx));
        let pooled = pool::max_axis_keepdim(&y, 2);
        let ps = pooled.shape();
        let squeezed = ops::reshape(&pooled, &[ps[0], ps[1], ps[3], ps[4]]);
        resize_nearest(&squeezed, target)
    }

    /// Contribution added onto the small-object pyramid level.
    pub fn p2_injection(&self, taps: &[Var<T>], target: (usize, usize), ctx: &Ctx) -> Result<Var<T>> {
        let cs = self.build_scale_sequence(taps, ctx)?;
        let collapsed = self.collapse(&cs, target, ctx)?;
        Ok(self.out_align.forward(&collapsed, ctx))
    }
}

impl<T: Scalar> Layer<T> for CsfBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        for (k, a) in self.aligners.iter().enumerate() {
            a.collect_params(&format!("{prefix}.align{}", k + 2), out);
        }
        self.conv3.collect_params(&format!("{prefix}.conv3"), out);
        self.bn3.collect_params(&format!("{prefix}.bn3"), out);
        self.out_align.collect_params(&format!("{prefix}.out_align"), out);
    }
}

/// Downsampling branch of the three-feature fusion: a shared conv followed
/// by parallel stride-2 max and average pooling, concatenated and fused.
pub struct TffPrev<T: Scalar> {
    pub inner: ConvBlock<T>,
    pub outer: ConvBlock<T>,
}

/// Three-feature fusion for one level: concatenates the pooled previous
/// pyramid level, the projected neck feature, and (when present) the
/// projected position-guidance map.
pub struct TffLevel<T: Scalar> {
    pub level: usize,
    pub prev: Option<TffPrev<T>>,
    pub mid: ConvBlock<T>,
    pub pig: Option<ConvBlock<T>>,
}

impl<T: Scalar> TffLevel<T> {
    /// `c_prev`: channels of the previous pyramid level (None at level 2);
    /// `c_mid`: channels of the neck feature; `with_pig`: whether the
    /// guidance branch exists (levels 2..4 of a PIG-enabled model).
    pub fn new(
        init: &mut Init,
        level: usize,
        c_prev: Option<usize>,
        c_mid: usize,
        with_pig: bool,
    ) -> Self {
        assert!((2..=5).contains(&level));
        assert_eq!(level == 2, c_prev.is_none(), "prev branch exists above level 2");
        TffLevel {
            level,
            prev: c_prev.map(|c| TffPrev {
                inner: ConvBlock::new(init, c, c, 3, 1),
                outer: ConvBlock::new(init, 2 * c, c, 1, 1),
            }),
            mid: ConvBlock::new(init, c_mid, c_mid, 1, 1),
            pig: (with_pig && level < 5).then(|| ConvBlock::new(init, c_mid, c_mid, 1, 1)),
        }
    }

    /// Output channel count (sum of the present primed branches).
    pub fn out_channels(&self) -> usize {
        self.prev
            .as_ref()
            .map(|p| p.outer.out_channels())
            .unwrap_or(0)
            + self.mid.out_channels()
            + self.pig.as_ref().map(|p| p.out_channels()).unwrap_or(0)
    }

    pub fn forward(
        &self,
        p_prev: Option<&Var<T>>,
        n_i: &Var<T>,
        pig_i: Option<&Var<T>>,
        ctx: &Ctx,
    ) -> Result<Var<T>> {
        if p_prev.is_some() != self.prev.is_some() {
            return Err(Error::Contract(format!(
                "tff level {}: previous-pyramid branch presence mismatch",
                self.level
            )));
        }
        if pig_i.is_some() != self.pig.is_some() {
            return Err(Error::Contract(format!(
                "tff level {}: guidance branch presence mismatch",
                self.level
            )));
        }
        let ns = n_i.shape();
        let mut parts = Vec::with_capacity(3);
        if let (Some(branch), Some(p)) = (&self.prev, p_prev) {
            let ps = p.shape();
            if ps[2] != 2 * ns[2] || ps[3] != 2 * ns[3] {
                return Err(Error::Contract(format!(
                    "tff level {}: previous level must be twice the spatial size",
                    self.level
                )));
            }
            let shared = branch.inner.forward(p, ctx);
            let pooled = ops::concat(
                1,
                &[pool::maxpool2d_2x2(&shared), pool::avgpool2d_2x2(&shared)],
            );
            parts.push(branch.outer.forward(&pooled, ctx));
        }
        parts.push(self.mid.forward(n_i, ctx));
        if let (Some(conv), Some(pig)) = (&self.pig, pig_i) {
            let gs = pig.shape();
            if gs[2] != ns[2] || gs[3] != ns[3] {
                return Err(Error::Contract(format!(
                    "tff level {}: guidance map spatial mismatch",
                    self.level
                )));
            }
            parts.push(conv.forward(pig, ctx));
        }
        Ok(ops::concat(1, &parts))
    }
}

impl<T: Scalar> Layer<T> for TffLevel<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        if let Some(p) = &self.prev {
            p.inner.collect_params(&format!("{prefix}.prev_inner"), out);
            p.outer.collect_params(&format!("{prefix}.prev_outer"), out);
        }
        self.mid.collect_params(&format!("{prefix}.mid"), out);
        if let Some(p) = &self.pig {
            p.collect_params(&format!("{prefix}.pig"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{assert_grad_matches, randn};
    use crate::autograd::{ops::mean_all, Arr};
    use ndarray::IxDyn;

    fn toy_csf(seed: u64) -> CsfBlock<f64> {
        let mut init = Init::new(seed);
        CsfBlock::new(&mut init, &[3, 4, 5, 6], 4, 8)
    }

    fn toy_taps(seed: u64, base: usize) -> Vec<Var<f64>> {
        [3usize, 4, 5, 6]
            .iter()
            .enumerate()
            .map(|(k, &c)| Var::constant(randn(&[1, c, base >> k, base >> k], seed + k as u64)))
            .collect()
    }

    #[test]
    fn scale_sequence_shape_contract() {
        let csf = toy_csf(1);
        let ctx = Ctx::eval();
        let cs = csf.build_scale_sequence(&toy_taps(2, 8), &ctx).unwrap();
        assert_eq!(cs.shape(), vec![1, 4, 4, 8, 8]);
    }

    #[test]
    fn identical_constant_maps_are_constant_along_scale() {
        let mut init = Init::new(3);
        // equal tap widths and shared aligner weights isolate the
        // resample-and-stack wiring
        let csf = CsfBlock::<f64>::new(&mut init, &[3, 3, 3, 3], 4, 8);
        let w = csf.aligners[0].conv.w.to_array();
        for a in &csf.aligners[1..] {
            a.conv.w.set_value(w.clone());
        }
        let ctx = Ctx::eval();
        let taps: Vec<Var<f64>> = (0..4)
            .map(|k| Var::constant(Arr::from_elem(IxDyn(&[1, 3, 8 >> k, 8 >> k]), 0.4)))
            .collect();
        let cs = csf.build_scale_sequence(&taps, &ctx).unwrap().to_array();
        for c in 0..4 {
            for i in 0..8 {
                for j in 0..8 {
                    let v0 = cs[[0, c, 0, i, j]];
                    for s in 1..4 {
                        assert_eq!(cs[[0, c, s, i, j]], v0);
                    }
                }
            }
        }
    }

    #[test]
    fn scale_slices_match_per_slice_resample_oracle() {
        let csf = toy_csf(4);
        let ctx = Ctx::eval();
        let taps = toy_taps(5, 8);
        let cs = csf.build_scale_sequence(&taps, &ctx).unwrap().to_array();
        for (k, tap) in taps.iter().enumerate() {
            let aligned = csf.aligners[k].forward(tap, &ctx).to_array();
            let factor = 1usize << k;
            for c in 0..4 {
                for i in 0..8 {
                    for j in 0..8 {
                        let want = aligned[[0, c, i / factor, j / factor]];
                        assert_eq!(cs[[0, c, k, i, j]], want, "slice {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn collapse_removes_scale_axis() {
        let csf = toy_csf(6);
        let ctx = Ctx::eval();
        let cs = csf.build_scale_sequence(&toy_taps(7, 8), &ctx).unwrap();
        let out = csf.collapse(&cs, (8, 8), &ctx).unwrap();
        assert_eq!(out.shape(), vec![1, 4, 8, 8]);

        let bad = Var::constant(randn::<f64>(&[1, 4, 3, 8, 8], 8));
        assert!(matches!(
            csf.collapse(&bad, (8, 8), &ctx),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identity_kernel_on_scale_constant_input_returns_slice() {
        let mut init = Init::new(9);
        let csf = CsfBlock::<f64>::new(&mut init, &[3, 3, 3, 3], 3, 8);
        // center-tap identity kernel
        let mut w = Arr::<f64>::zeros(IxDyn(&[3, 3, 3, 3, 3]));
        for c in 0..3 {
            w[[c, c, 1, 1, 1]] = 1.0;
        }
        csf.conv3.w.set_value(w);
        // normalization that cancels itself in eval mode
        let g = (1.0 + csf.bn3.eps).sqrt();
        csf.bn3.gamma.set_value(Arr::from_elem(IxDyn(&[3]), g));

        let ctx = Ctx::eval();
        let slice = randn::<f64>(&[1, 3, 4, 4], 10);
        let slice_var = Var::constant(slice.clone());
        let slices: Vec<Var<f64>> = (0..4).map(|_| slice_var.clone()).collect();
        let cs = ops::stack_new_axis(2, &slices);
        let out = csf.collapse(&cs, (4, 4), &ctx).unwrap().to_array();
        let want = ops::silu(&slice_var).to_array();
        for (a, b) in out.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn collapse_matches_scalar_oracle() {
        let csf = toy_csf(11);
        let ctx = Ctx::eval();
        let cs0 = randn::<f64>(&[1, 4, 4, 4, 4], 12);
        let out = csf
            .collapse(&Var::constant(cs0.clone()), (4, 4), &ctx)
            .unwrap()
            .to_array();

        // straight-line scalar re-evaluation: conv3d -> eval-mode norm ->
        // silu -> max over the scale axis
        let w = csf.conv3.w.to_array();
        let gamma = csf.bn3.gamma.to_array();
        let beta = csf.bn3.beta.to_array();
        let eps = csf.bn3.eps;
        let silu = |x: f64| x / (1.0 + (-x).exp());
        for co in 0..4 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut best = f64::NEG_INFINITY;
                    for s in 0..4usize {
                        let mut acc = 0.0;
                        for ci in 0..4 {
                            for kd in 0..3 {
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        let (sd, si, sj) = (
                                            s as isize + kd - 1,
                                            i as isize + ki - 1,
                                            j as isize + kj - 1,
                                        );
                                        if sd < 0 || sd >= 4 || si < 0 || si >= 4 || sj < 0 || sj >= 4 {
                                            continue;
                                        }
                                        acc += w[[co, ci, kd as usize, ki as usize, kj as usize]]
                                            * cs0[[0, ci, sd as usize, si as usize, sj as usize]];
                                    }
                                }
                            }
                        }
                        let normed = acc / (1.0 + eps).sqrt() * gamma[[co]] + beta[[co]];
                        best = best.max(silu(normed));
                    }
                    assert!((out[[0, co, i, j]] - best).abs() < 1e-12, "at {co},{i},{j}");
                }
            }
        }
    }

    #[test]
    fn csf_gradient_matches_fd() {
        let csf = toy_csf(13);
        let ctx = Ctx::eval();
        let cs0 = randn::<f64>(&[1, 4, 4, 4, 4], 14);
        assert_grad_matches(
            &cs0,
            |cs| mean_all(&csf.collapse(cs, (4, 4), &ctx).unwrap()),
            1e-6,
            1e-3,
        );
    }

    fn toy_tff(level: usize, with_pig: bool, seed: u64) -> TffLevel<f64> {
        let mut init = Init::new(seed);
        let c_prev = (level > 2).then_some(4);
        TffLevel::new(&mut init, level, c_prev, 6, with_pig)
    }

    #[test]
    fn tff_channel_accounting_per_level() {
        // level 2 with guidance: mid + pig
        let t2 = toy_tff(2, true, 20);
        assert_eq!(t2.out_channels(), 6 + 6);
        let ctx = Ctx::eval();
        let n2 = Var::constant(randn::<f64>(&[1, 6, 8, 8], 21));
        let g2 = Var::constant(randn::<f64>(&[1, 6, 8, 8], 22));
        let out = t2.forward(None, &n2, Some(&g2), &ctx).unwrap();
        assert_eq!(out.shape(), vec![1, 12, 8, 8]);

        // level 3 with all three branches
        let t3 = toy_tff(3, true, 23);
        assert_eq!(t3.out_channels(), 4 + 6 + 6);
        let p2 = Var::constant(randn::<f64>(&[1, 4, 16, 16], 24));
        let n3 = Var::constant(randn::<f64>(&[1, 6, 8, 8], 25));
        let g3 = Var::constant(randn::<f64>(&[1, 6, 8, 8], 26));
        let out = t3.forward(Some(&p2), &n3, Some(&g3), &ctx).unwrap();
        assert_eq!(out.shape(), vec![1, 16, 8, 8]);

        // level 5 drops the guidance branch even when requested
        let t5 = toy_tff(5, true, 27);
        assert!(t5.pig.is_none());
        assert_eq!(t5.out_channels(), 4 + 6);
    }

    #[test]
    fn tff_branch_presence_is_checked() {
        let t3 = toy_tff(3, false, 28);
        let ctx = Ctx::eval();
        let n3 = Var::constant(randn::<f64>(&[1, 6, 8, 8], 29));
        assert!(matches!(
            t3.forward(None, &n3, None, &ctx),
            Err(Error::Contract(_))
        ));
        let wrong_size = Var::constant(randn::<f64>(&[1, 4, 8, 8], 30));
        assert!(matches!(
            t3.forward(Some(&wrong_size), &n3, None, &ctx),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn constant_prev_collapses_pool_branches() {
        let t3 = toy_tff(3, false, 31);
        let ctx = Ctx::eval();
        let p2 = Var::constant(Arr::from_elem(IxDyn(&[1, 4, 8, 8]), 0.3f64));
        // conv of a constant map is constant per channel away from the
        // border, so compare max and avg pooling of the shared conv there
        let shared = t3.prev.as_ref().unwrap().inner.forward(&p2, &ctx);
        let mx = pool::maxpool2d_2x2(&shared).to_array();
        let av = pool::avgpool2d_2x2(&shared).to_array();
        for c in 0..4 {
            for i in 1..3 {
                for j in 1..3 {
                    assert!((mx[[0, c, i, j]] - av[[0, c, i, j]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tff_reference_composition_at_level3() {
        let t3 = toy_tff(3, true, 32);
        let ctx = Ctx::eval();
        let p2 = Var::constant(randn::<f64>(&[1, 4, 8, 8], 33));
        let n3 = Var::constant(randn::<f64>(&[1, 6, 4, 4], 34));
        let g3 = Var::constant(randn::<f64>(&[1, 6, 4, 4], 35));
        let got = t3.forward(Some(&p2), &n3, Some(&g3), &ctx).unwrap().to_array();

        let branch = t3.prev.as_ref().unwrap();
        let shared = branch.inner.forward(&p2, &ctx);
        let pooled = ops::concat(
            1,
            &[pool::maxpool2d_2x2(&shared), pool::avgpool2d_2x2(&shared)],
        );
        let prev = branch.outer.forward(&pooled, &ctx);
        let want = ops::concat(
            1,
            &[
                prev,
                t3.mid.forward(&n3, &ctx),
                t3.pig.as_ref().unwrap().forward(&g3, &ctx),
            ],
        )
        .to_array();
        assert_eq!(got, want);
    }

    #[test]
    fn tff_gradient_matches_fd() {
        let t3 = toy_tff(3, false, 36);
        let ctx = Ctx::eval();
        let n3 = Var::constant(randn::<f64>(&[1, 6, 4, 4], 37));
        let x0 = randn::<f64>(&[1, 4, 8, 8], 38);
        let w = randn::<f64>(&[1, 10, 4, 4], 39);
        assert_grad_matches(
            &x0,
            move |p| {
                let out = t3.forward(Some(p), &n3, None, &ctx).unwrap();
                mean_all(&ops::mul_const(&out, w.clone()))
            },
            1e-6,
            1e-3,
        );
    }
}
