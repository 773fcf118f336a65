//! Pooling, nearest-neighbor resampling, and axis-max reduction.

use ndarray::{Axis, IxDyn};

use super::{Arr, Var};
use crate::scalar::Scalar;

/// 2x2 stride-2 max pooling over [n, c, h, w]. Requires even h and w.
pub fn maxpool2d_2x2<T: Scalar>(x: &Var<T>) -> Var<T> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "maxpool2d: input must be [n,c,h,w]");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2d: odd spatial size");
    let (ho, wo) = (h / 2, w / 2);
    let xv = x.to_array();
    let mut value = Arr::zeros(IxDyn(&[n, c, ho, wo]));
    let mut arg: Vec<(usize, usize)> = vec![(0, 0); n * c * ho * wo];
    let mut k = 0;
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (mut best, mut bi, mut bj) =
                        (xv[[bn, ch, 2 * oy, 2 * ox]], 2 * oy, 2 * ox);
                    for di in 0..2 {
                        for dj in 0..2 {
                            let v = xv[[bn, ch, 2 * oy + di, 2 * ox + dj]];
                            if v > best {
                                best = v;
                                bi = 2 * oy + di;
                                bj = 2 * ox + dj;
                            }
                        }
                    }
                    value[[bn, ch, oy, ox]] = best;
                    arg[k] = (bi, bj);
                    k += 1;
                }
            }
        }
    }
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let mut out = Arr::zeros(IxDyn(&[n, c, h, w]));
        let mut k = 0;
        for bn in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let (bi, bj) = arg[k];
                        out[[bn, ch, bi, bj]] += g[[bn, ch, oy, ox]];
                        k += 1;
                    }
                }
            }
        }
        vec![Some(out)]
    })
}

/// 2x2 stride-2 average pooling over [n, c, h, w].
pub fn avgpool2d_2x2<T: Scalar>(x: &Var<T>) -> Var<T> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "avgpool2d: input must be [n,c,h,w]");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2d: odd spatial size");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::c(0.25);
    let xv = x.to_array();
    let mut value = Arr::zeros(IxDyn(&[n, c, ho, wo]));
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for di in 0..2 {
                        for dj in 0..2 {
                            acc += xv[[bn, ch, 2 * oy + di, 2 * ox + dj]];
                        }
                    }
                    value[[bn, ch, oy, ox]] = acc * quarter;
                }
            }
        }
    }
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let mut out = Arr::zeros(IxDyn(&[n, c, h, w]));
        for bn in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let share = g[[bn, ch, oy, ox]] * quarter;
                        for di in 0..2 {
                            for dj in 0..2 {
                                out[[bn, ch, 2 * oy + di, 2 * ox + dj]] += share;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(out)]
    })
}

/// Max over one axis, keeping it with size 1. Gradient routes to the argmax
/// (first occurrence on ties).
pub fn max_axis_keepdim<T: Scalar>(x: &Var<T>, axis: usize) -> Var<T> {
    let shape = x.shape();
    let n = shape[axis];
    assert!(n > 0);
    let xv = x.to_array();
    let mut out_shape = shape.clone();
    out_shape[axis] = 1;

    let mut value = Arr::zeros(IxDyn(&out_shape));
    let mut argmax: ndarray::ArrayD<usize> = ndarray::ArrayD::zeros(IxDyn(&out_shape));
    {
        let lanes = xv.lanes(Axis(axis));
        let vflat = value.as_slice_mut().unwrap();
        let aflat = argmax.as_slice_mut().unwrap();
        for (k, lane) in lanes.into_iter().enumerate() {
            let mut best = lane[0];
            let mut bi = 0;
            for i in 1..n {
                if lane[i] > best {
                    best = lane[i];
                    bi = i;
                }
            }
            vflat[k] = best;
            aflat[k] = bi;
        }
    }
    let full_shape = shape.clone();
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let mut out = Arr::zeros(IxDyn(&full_shape));
        {
            let glanes = g.lanes(Axis(axis));
            let olanes = out.lanes_mut(Axis(axis));
            let aflat = argmax.as_slice().unwrap();
            for ((k, gl), mut ol) in glanes.into_iter().enumerate().zip(olanes.into_iter()) {
                ol[aflat[k]] += gl[0];
            }
        }
        vec![Some(out)]
    })
}

/// Nearest-neighbor upsampling of [n, c, h, w] by an integer factor.
pub fn upsample_nearest2d<T: Scalar>(x: &Var<T>, factor: usize) -> Var<T> {
    assert!(factor >= 1);
    let s = x.shape();
    assert_eq!(s.len(), 4, "upsample: input must be [n,c,h,w]");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if factor == 1 {
        // still an op so callers can treat it uniformly
        let value = x.to_array();
        return Var::from_op(value, vec![x.clone()], |g, _| vec![Some(g.clone())]);
    }
    let (ho, wo) = (h * factor, w * factor);
    let xv = x.to_array();
    let mut value = Arr::zeros(IxDyn(&[n, c, ho, wo]));
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    value[[bn, ch, oy, ox]] = xv[[bn, ch, oy / factor, ox / factor]];
                }
            }
        }
    }
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let mut out = Arr::zeros(IxDyn(&[n, c, h, w]));
        for bn in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[[bn, ch, oy / factor, ox / factor]] += g[[bn, ch, oy, ox]];
                    }
                }
            }
        }
        vec![Some(out)]
    })
}
