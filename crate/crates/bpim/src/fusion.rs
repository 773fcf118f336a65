//! Adaptive weight fusion: per-pixel normalized convex blending of adjacent
//! pyramid levels in front of the detection heads.

use crate::autograd::{ops, pool, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, Layer, ParamEntry};
use crate::scalar::Scalar;

/// Keeps exp() in a safe range; the weights are scale-free after
/// normalization so saturation only freezes the gradient, never the value.
const LAMBDA_CLAMP: f64 = 20.0;
/// Strictly positive numerator floor so the per-pixel normalizer can never
/// vanish and identical contributors split the weight exactly evenly.
const WEIGHT_EPS: f64 = 1e-12;

/// Per-pixel fusion weight for one contributing layer.
pub struct FusionWeights<T: Scalar> {
    /// Pre-normalization per-pixel field, one channel.
    pub lambda: Var<T>,
    /// Normalized weight in [0,1], shape [n, 1, h, w].
    pub omega: Var<T>,
}

/// One contributing layer feeding an output level: optional channel
/// alignment plus the two 1x1 stages that produce its weight field.
pub struct AwfContributor<T: Scalar> {
    /// Source level minus output level: -1, 0 or +1.
    pub offset: isize,
    pub align: Option<Conv2d<T>>,
    pub lambda_conv: Conv2d<T>,
    pub weight_conv: Conv2d<T>,
}

/// Weight machinery for one output level.
pub struct AwfLevel<T: Scalar> {
    /// Pyramid level index (2..=5).
    pub level: usize,
    pub contributors: Vec<AwfContributor<T>>,
}

impl<T: Scalar> AwfLevel<T> {
    /// Normalized per-pixel weights for contributors already resampled (and
    /// channel-aligned) to this level. At least two contributors required.
    pub fn fusion_weights(
        &self,
        contributors: &[Var<T>],
        ctx: &Ctx,
    ) -> Result<Vec<FusionWeights<T>>> {
        if contributors.len() < 2 {
            return Err(Error::Contract(format!(
                "fusion_weights: need at least 2 contributors, got {}",
                contributors.len()
            )));
        }
        if contributors.len() != self.contributors.len() {
            return Err(Error::Contract(format!(
                "fusion_weights: level {} expects {} contributors, got {}",
                self.level,
                self.contributors.len(),
                contributors.len()
            )));
        }
        let spatial = contributors[0].shape();
        for c in contributors {
            let s = c.shape();
            if s[2] != spatial[2] || s[3] != spatial[3] {
                return Err(Error::Contract(
                    "fusion_weights: contributors must share the level's spatial size".into(),
                ));
            }
        }

        let clamp = T::c(LAMBDA_CLAMP);
        let eps = T::c(WEIGHT_EPS);
        let mut lambdas = Vec::with_capacity(contributors.len());
        let mut numerators = Vec::with_capacity(contributors.len());
        for (spec, m) in self.contributors.iter().zip(contributors) {
            let lambda = spec.lambda_conv.forward(m, ctx);
            let bounded = ops::clamp(&lambda, -clamp, clamp);
            let raw = spec.weight_conv.forward(&ops::exp(&bounded), ctx);
            numerators.push(ops::add_scalar(&ops::abs(&raw), eps));
            lambdas.push(lambda);
        }
        let mut total = numerators[0].clone();
        for n in &numerators[1..] {
            total = ops::add(&total, n);
        }
        Ok(lambdas
            .into_iter()
            .zip(numerators)
            .map(|(lambda, num)| FusionWeights {
                lambda,
                omega: ops::div(&num, &total),
            })
            .collect())
    }
}

impl<T: Scalar> Layer<T> for AwfLevel<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        for (i, c) in self.contributors.iter().enumerate() {
            if let Some(a) = &c.align {
                a.collect_params(&format!("{prefix}.c{i}.align"), out);
            }
            c.lambda_conv
                .collect_params(&format!("{prefix}.c{i}.lambda"), out);
            c.weight_conv
                .collect_params(&format!("{prefix}.c{i}.weight"), out);
        }
    }
}

/// Weighted per-pixel sum of contributors; the weight maps broadcast across
/// channels. Convex as long as the weights are a per-pixel partition of one.
pub fn fuse<T: Scalar>(contributors: &[Var<T>], omegas: &[Var<T>]) -> Result<Var<T>> {
    if contributors.is_empty() || contributors.len() != omegas.len() {
        return Err(Error::Contract(
            "fuse: contributor/weight count mismatch".into(),
        ));
    }
    let mut acc = ops::mul_bcast_axis(&contributors[0], &omegas[0], 1);
    for (m, o) in contributors.iter().zip(omegas).skip(1) {
        acc = ops::add(&acc, &ops::mul_bcast_axis(m, o, 1));
    }
    Ok(acc)
}

/// The full head-side fusion across levels 2..=5. Each level blends itself
/// with its available neighbors (two at the ends, three in the middle).
pub struct AwfFusion<T: Scalar> {
    pub levels: Vec<AwfLevel<T>>,
}

impl<T: Scalar> AwfFusion<T> {
    /// `channels[k]` is the width of pyramid level k+2.
    pub fn new(init: &mut Init, channels: &[usize; 4]) -> Self {
        let levels = (0..4usize)
            .map(|k| {
                let c_out = channels[k];
                let mut contributors = Vec::new();
                for offset in [-1isize, 0, 1] {
                    let src = k as isize + offset;
                    if !(0..4).contains(&src) {
                        continue;
                    }
                    let c_src = channels[src as usize];
                    contributors.push(AwfContributor {
                        offset,
                        align: (c_src != c_out)
                            .then(|| Conv2d::new(init, c_src, c_out, 1, 1, 1, true)),
                        lambda_conv: Conv2d::new(init, c_out, 1, 1, 1, 1, true),
                        weight_conv: Conv2d::new(init, 1, 1, 1, 1, 1, true),
                    });
                }
                AwfLevel {
                    level: k + 2,
                    contributors,
                }
            })
            .collect();
        AwfFusion { levels }
    }

    /// Resample a neighbor map onto the output level: shallower levels are
    /// stride-2 max pooled, deeper levels nearest-neighbor upsampled.
    fn resample(x: &Var<T>, offset: isize) -> Var<T> {
        match offset {
            -1 => pool::maxpool2d_2x2(x),
            0 => x.clone(),
            1 => pool::upsample_nearest2d(x, 2),
            _ => unreachable!("adjacent levels only"),
        }
    }

    pub fn forward(&self, pyramid: &[Var<T>], ctx: &Ctx) -> Result<Vec<Var<T>>> {
        if pyramid.len() != 4 {
            return Err(Error::Contract(format!(
                "awf: expected 4 pyramid levels, got {}",
                pyramid.len()
            )));
        }
        for k in 1..4 {
            let (a, b) = (pyramid[k - 1].shape(), pyramid[k].shape());
            if a[2] != 2 * b[2] || a[3] != 2 * b[3] {
                return Err(Error::Contract(
                    "awf: pyramid levels must halve in spatial size".into(),
                ));
            }
        }
        let mut out = Vec::with_capacity(4);
        for (k, level) in self.levels.iter().enumerate() {
            let mut maps = Vec::new();
            for spec in &level.contributors {
                let src = (k as isize + spec.offset) as usize;
                let mut m = pyramid[src].clone();
                if let Some(align) = &spec.align {
                    m = align.forward(&m, ctx);
                }
                maps.push(Self::resample(&m, spec.offset));
            }
            let weights = level.fusion_weights(&maps, ctx)?;
            let omegas: Vec<Var<T>> = weights.into_iter().map(|w| w.omega).collect();
            out.push(fuse(&maps, &omegas)?);
        }
        Ok(out)
    }
}

impl<T: Scalar> Layer<T> for AwfFusion<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        for level in &self.levels {
            level.collect_params(&format!("{prefix}.l{}", level.level), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{assert_grad_matches, assert_sampled_param_grad, randn};
    use crate::autograd::{ops::mean_all, Arr};
    use ndarray::IxDyn;

    fn toy_level(channels: usize, contributors: usize, seed: u64) -> AwfLevel<f64> {
        let mut init = Init::new(seed);
        AwfLevel {
            level: 3,
            contributors: (0..contributors)
                .map(|i| AwfContributor {
                    offset: i as isize - 1,
                    align: None,
                    lambda_conv: Conv2d::new(&mut init, channels, 1, 1, 1, 1, true),
                    weight_conv: Conv2d::new(&mut init, 1, 1, 1, 1, 1, true),
                })
                .collect(),
        }
    }

    #[test]
    fn identical_inputs_and_weights_split_evenly() {
        let level = toy_level(3, 2, 1);
        // copy contributor 0's convs into contributor 1
        let w = level.contributors[0].lambda_conv.w.to_array();
        let b = level.contributors[0].lambda_conv.b.as_ref().unwrap().to_array();
        level.contributors[1].lambda_conv.w.set_value(w);
        level.contributors[1]
            .lambda_conv
            .b
            .as_ref()
            .unwrap()
            .set_value(b);
        let w = level.contributors[0].weight_conv.w.to_array();
        let b = level.contributors[0].weight_conv.b.as_ref().unwrap().to_array();
        level.contributors[1].weight_conv.w.set_value(w);
        level.contributors[1]
            .weight_conv
            .b
            .as_ref()
            .unwrap()
            .set_value(b);

        let ctx = Ctx::eval();
        let m = Var::constant(randn::<f64>(&[1, 3, 4, 4], 2));
        let ws = level.fusion_weights(&[m.clone(), m.clone()], &ctx).unwrap();
        for w in &ws {
            assert!(w.omega.to_array().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn weights_normalized_and_bounded() {
        let ctx = Ctx::eval();
        for n_contrib in [2usize, 3] {
            let level = toy_level(4, n_contrib, 3 + n_contrib as u64);
            let maps: Vec<Var<f64>> = (0..n_contrib)
                .map(|i| Var::constant(randn(&[2, 4, 5, 5], 10 + i as u64)))
                .collect();
            let ws = level.fusion_weights(&maps, &ctx).unwrap();
            let mut sums = Arr::<f64>::zeros(IxDyn(&[2, 1, 5, 5]));
            for w in &ws {
                let o = w.omega.to_array();
                assert!(o.iter().all(|&v| (0.0..=1.0).contains(&v)));
                sums.zip_mut_with(&o, |a, b| *a += *b);
            }
            assert!(sums.iter().all(|&s| (s - 1.0).abs() <= 1e-6));
        }
    }

    #[test]
    fn too_few_contributors_is_contract_error() {
        let level = toy_level(4, 1, 5);
        let ctx = Ctx::eval();
        let m = Var::constant(randn::<f64>(&[1, 4, 4, 4], 6));
        assert!(matches!(
            level.fusion_weights(&[m], &ctx),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn matches_scalar_oracle() {
        // straight-line per-pixel recomputation of lambda -> exp -> 1x1 -> normalize
        let level = toy_level(2, 3, 7);
        let ctx = Ctx::eval();
        let maps: Vec<Arr<f64>> = (0..3).map(|i| randn(&[1, 2, 3, 3], 20 + i)).collect();
        let vars: Vec<Var<f64>> = maps.iter().map(|m| Var::constant(m.clone())).collect();
        let ws = level.fusion_weights(&vars, &ctx).unwrap();

        for py in 0..3 {
            for px in 0..3 {
                let mut ts = [0.0f64; 3];
                for (l, m) in maps.iter().enumerate() {
                    let spec = &level.contributors[l];
                    let lw = spec.lambda_conv.w.to_array();
                    let lb = spec.lambda_conv.b.as_ref().unwrap().to_array();
                    let mut lambda = lb[[0]];
                    for c in 0..2 {
                        lambda += lw[[0, c, 0, 0]] * m[[0, c, py, px]];
                    }
                    let lambda = lambda.clamp(-LAMBDA_CLAMP, LAMBDA_CLAMP);
                    let ww = spec.weight_conv.w.to_array();
                    let wb = spec.weight_conv.b.as_ref().unwrap().to_array();
                    ts[l] = (ww[[0, 0, 0, 0]] * lambda.exp() + wb[[0]]).abs() + WEIGHT_EPS;
                }
                let total: f64 = ts.iter().sum();
                for (l, w) in ws.iter().enumerate() {
                    let got = w.omega.to_array()[[0, 0, py, px]];
                    assert!((got - ts[l] / total).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fuse_with_hand_set_weights() {
        // two-level toy: output = 0.25 * p2 + 0.75 * up(p3)
        let p2 = randn::<f64>(&[1, 3, 4, 4], 30);
        let p3 = randn::<f64>(&[1, 3, 2, 2], 31);
        let up3 = pool::upsample_nearest2d(&Var::constant(p3.clone()), 2);
        let w0 = Var::constant(Arr::from_elem(IxDyn(&[1, 1, 4, 4]), 0.25f64));
        let w1 = Var::constant(Arr::from_elem(IxDyn(&[1, 1, 4, 4]), 0.75f64));
        let out = fuse(&[Var::constant(p2.clone()), up3.clone()], &[w0, w1])
            .unwrap()
            .to_array();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let want = 0.25 * p2[[0, c, i, j]] + 0.75 * p3[[0, c, i / 2, j / 2]];
                    assert!((out[[0, c, i, j]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_weights_make_identity() {
        let m0 = randn::<f64>(&[1, 2, 4, 4], 32);
        let m1 = randn::<f64>(&[1, 2, 4, 4], 33);
        let ones = Var::constant(Arr::ones(IxDyn(&[1, 1, 4, 4])));
        let zeros = Var::constant(Arr::zeros(IxDyn(&[1, 1, 4, 4])));
        let out = fuse(
            &[Var::constant(m0.clone()), Var::constant(m1)],
            &[ones, zeros],
        )
        .unwrap();
        assert_eq!(out.to_array(), m0);
    }

    #[test]
    fn full_block_shapes_and_convexity() {
        let mut init = Init::new(40);
        let channels = [4usize, 6, 8, 10];
        let block = AwfFusion::<f64>::new(&mut init, &channels);
        let ctx = Ctx::eval();
        let pyramid: Vec<Var<f64>> = (0..4)
            .map(|k| Var::constant(randn(&[1, channels[k], 16 >> k, 16 >> k], 41 + k as u64)))
            .collect();
        let out = block.forward(&pyramid, &ctx).unwrap();
        for (k, o) in out.iter().enumerate() {
            assert_eq!(o.shape(), pyramid[k].shape(), "shape contract at level {k}");
        }

        // convexity at level 0 (two contributors): recompute the aligned and
        // resampled maps, then check min <= fused <= max element-wise
        let level = &block.levels[0];
        let mut maps = Vec::new();
        for spec in &level.contributors {
            let src = (0 + spec.offset) as usize;
            let mut m = pyramid[src].clone();
            if let Some(a) = &spec.align {
                m = a.forward(&m, &ctx);
            }
            maps.push(AwfFusion::resample(&m, spec.offset));
        }
        let ws = level.fusion_weights(&maps, &ctx).unwrap();
        let omegas: Vec<Var<f64>> = ws.into_iter().map(|w| w.omega).collect();
        let fused = fuse(&maps, &omegas).unwrap().to_array();
        let m0 = maps[0].to_array();
        let m1 = maps[1].to_array();
        for ((f, a), b) in fused.iter().zip(m0.iter()).zip(m1.iter()) {
            let (lo, hi) = (a.min(*b), a.max(*b));
            assert!(*f >= lo - 1e-12 && *f <= hi + 1e-12);
        }
    }

    #[test]
    fn missing_level_is_contract_error() {
        let mut init = Init::new(44);
        let block = AwfFusion::<f64>::new(&mut init, &[4, 4, 4, 4]);
        let ctx = Ctx::eval();
        let p = vec![
            Var::constant(randn::<f64>(&[1, 4, 8, 8], 45)),
            Var::constant(randn::<f64>(&[1, 4, 4, 4], 46)),
            Var::constant(randn::<f64>(&[1, 4, 2, 2], 47)),
        ];
        assert!(matches!(block.forward(&p, &ctx), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_match_fd() {
        let mut init = Init::new(48);
        let channels = [3usize, 3, 3, 3];
        let block = AwfFusion::<f64>::new(&mut init, &channels);
        let ctx = Ctx::eval();
        let fixed: Vec<Arr<f64>> = (0..3)
            .map(|k| randn(&[1, 3, 8 >> (k + 1), 8 >> (k + 1)], 50 + k as u64))
            .collect();
        let weight_sum = randn::<f64>(&[1, 3, 8, 8], 54);

        // w.r.t. the level-2 input map
        let x0 = randn::<f64>(&[1, 3, 8, 8], 55);
        assert_grad_matches(
            &x0,
            |x| {
                let pyramid = vec![
                    x.clone(),
                    Var::constant(fixed[0].clone()),
                    Var::constant(fixed[1].clone()),
                    Var::constant(fixed[2].clone()),
                ];
                let out = block.forward(&pyramid, &ctx).unwrap();
                mean_all(&ops::mul_const(&out[0], weight_sum.clone()))
            },
            1e-6,
            1e-3,
        );

        // w.r.t. a lambda-conv weight (sampled entries)
        let target = &block.levels[1].contributors[0].lambda_conv.w;
        let pyramid: Vec<Var<f64>> = vec![
            Var::constant(x0.clone()),
            Var::constant(fixed[0].clone()),
            Var::constant(fixed[1].clone()),
            Var::constant(fixed[2].clone()),
        ];
        let idx: Vec<usize> = (0..target.value().len()).collect();
        assert_sampled_param_grad(
            target,
            || {
                let out = block.forward(&pyramid, &ctx).unwrap();
                mean_all(&out[1])
            },
            &idx,
            1e-6,
            1e-3,
        );
    }
}
