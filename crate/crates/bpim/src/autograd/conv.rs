//! im2col-backed 2D and 3D convolution with full backward passes.

use ndarray::{Array2, ArrayView, Axis, IxDyn, Slice};

use super::{Arr, Var};
use crate::scalar::Scalar;

pub fn conv2d_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Unfold one channel-group view [n, cg, h, w] into a [cg*kh*kw, n*ho*wo] matrix.
fn im2col<T: Scalar>(
    x: &ArrayView<T, IxDyn>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (n, cg, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = conv2d_out_size(h, kh, stride, pad);
    let wo = conv2d_out_size(w, kw, stride, pad);
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().expect("standard layout");
    let cols = n * ho * wo;
    let mut col = Array2::<T>::zeros((cg * kh * kw, cols));
    let csl = col.as_slice_mut().unwrap();
    for c in 0..cg {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_base = ((c * kh + ki) * kw + kj) * cols;
                for bn in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_base = ((bn * cg + c) * h + iy as usize) * w;
                        let dst_base = row_base + (bn * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                csl[dst_base + ox] = xsl[src_base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold the column-space gradient back onto the input (accumulating).
fn col2im<T: Scalar>(
    gcol: &Array2<T>,
    gx: &mut ndarray::ArrayViewMut<T, IxDyn>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (n, cg, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2], gx.shape()[3]);
    let ho = conv2d_out_size(h, kh, stride, pad);
    let wo = conv2d_out_size(w, kw, stride, pad);
    let cols = n * ho * wo;
    let gsl = gcol.as_slice().expect("standard layout");
    for c in 0..cg {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_base = ((c * kh + ki) * kw + kj) * cols;
                for bn in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                gx[[bn, c, iy as usize, ix as usize]] +=
                                    gsl[row_base + (bn * ho + oy) * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2D convolution. `x`: [n, c_in, h, w], `w`: [c_out, c_in/groups, kh, kw],
/// optional `b`: [c_out]. Returns [n, c_out, ho, wo].
pub fn conv2d<T: Scalar>(
    x: &Var<T>,
    w: &Var<T>,
    b: Option<&Var<T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Var<T> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d: input must be [n,c,h,w]");
    assert_eq!(ws.len(), 4, "conv2d: weight must be [co,ci/g,kh,kw]");
    let (n, c_in, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(c_in % groups, 0);
    assert_eq!(c_out % groups, 0);
    assert_eq!(cg, c_in / groups, "conv2d: group channel mismatch");
    let cog = c_out / groups;
    let ho = conv2d_out_size(h, kh, stride, pad);
    let wo = conv2d_out_size(wdt, kw, stride, pad);
    let cols = n * ho * wo;

    let mut cols_cache: Vec<Array2<T>> = Vec::with_capacity(groups);
    let mut out_t = Array2::<T>::zeros((c_out, cols));
    {
        let xv = x.value();
        let wv = w.value();
        for g in 0..groups {
            let xg = xv.slice_axis(Axis(1), Slice::from(g * cg..(g + 1) * cg));
            let col = im2col(&xg, kh, kw, stride, pad);
            let wg = wv
                .slice_axis(Axis(0), Slice::from(g * cog..(g + 1) * cog))
                .to_owned()
                .into_shape_with_order((cog, cg * kh * kw))
                .unwrap();
            let og = wg.dot(&col);
            out_t
                .slice_axis_mut(Axis(0), Slice::from(g * cog..(g + 1) * cog))
                .assign(&og);
            cols_cache.push(col);
        }
    }
    // [c_out, n*ho*wo] -> [n, c_out, ho, wo]
    let mut value = out_t
        .into_shape_with_order((c_out, n, ho, wo))
        .unwrap()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_dyn();
    if let Some(b) = b {
        let bv = b.value();
        for co in 0..c_out {
            value
                .slice_axis_mut(Axis(1), Slice::from(co..co + 1))
                .mapv_inplace(|v| v + bv[[co]]);
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let pw = w.clone();
    let has_bias = b.is_some();
    Var::from_op(value, parents, move |g, needs| {
        // [n, c_out, ho, wo] -> [c_out, n*ho*wo]
        let g_t = g
            .clone()
            .permuted_axes(IxDyn(&[1, 0, 2, 3]))
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c_out, cols))
            .unwrap();
        let mut gx = None;
        let mut gw = None;
        if needs[0] {
            gx = Some(Arr::<T>::zeros(IxDyn(&[n, c_in, h, wdt])));
        }
        if needs[1] {
            gw = Some(Arr::<T>::zeros(IxDyn(&[c_out, cg, kh, kw])));
        }
        if needs[0] || needs[1] {
            let wv = pw.value();
            for grp in 0..groups {
                let gg = g_t.slice_axis(Axis(0), Slice::from(grp * cog..(grp + 1) * cog));
                if let Some(gw) = gw.as_mut() {
                    let col = &cols_cache[grp];
                    let gwg = gg.dot(&col.t()); // [cog, cg*kh*kw]
                    let gwg = gwg
                        .into_shape_with_order((cog, cg, kh, kw))
                        .unwrap()
                        .into_dyn();
                    gw.slice_axis_mut(Axis(0), Slice::from(grp * cog..(grp + 1) * cog))
                        .assign(&gwg);
                }
                if let Some(gx) = gx.as_mut() {
                    let wg = wv
                        .slice_axis(Axis(0), Slice::from(grp * cog..(grp + 1) * cog))
                        .to_owned()
                        .into_shape_with_order((cog, cg * kh * kw))
                        .unwrap();
                    let gcol = wg.t().dot(&gg); // [cg*kh*kw, cols]
                    let mut gxg =
                        gx.slice_axis_mut(Axis(1), Slice::from(grp * cg..(grp + 1) * cg));
                    col2im(&gcol.as_standard_layout().into_owned(), &mut gxg, kh, kw, stride, pad);
                }
            }
        }
        let mut out = vec![gx, gw];
        if has_bias {
            out.push(needs[2].then(|| g_t.sum_axis(Axis(1)).into_dyn()));
        }
        out
    })
}

fn conv3d_sizes(d: usize, k: usize, pad: usize) -> usize {
    d + 2 * pad - k + 1
}

/// 3D convolution, stride 1. `x`: [n, c_in, s, h, w],
/// `w`: [c_out, c_in, ks, kh, kw], pads per axis.
pub fn conv3d<T: Scalar>(
    x: &Var<T>,
    w: &Var<T>,
    b: Option<&Var<T>>,
    pad: (usize, usize, usize),
) -> Var<T> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 5, "conv3d: input must be [n,c,s,h,w]");
    assert_eq!(ws.len(), 5, "conv3d: weight must be [co,ci,ks,kh,kw]");
    let (n, c_in, s, h, wdt) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (c_out, ci_w, ks, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    assert_eq!(c_in, ci_w, "conv3d: channel mismatch");
    let so = conv3d_sizes(s, ks, pad.0);
    let ho = conv3d_sizes(h, kh, pad.1);
    let wo = conv3d_sizes(wdt, kw, pad.2);
    let cols = n * so * ho * wo;
    let krn = c_in * ks * kh * kw;

    let build_col = |xv: &Arr<T>| -> Array2<T> {
        let xsl = xv.as_slice().expect("standard layout");
        let mut col = Array2::<T>::zeros((krn, cols));
        let csl = col.as_slice_mut().unwrap();
        for c in 0..c_in {
            for kd in 0..ks {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let row_base = (((c * ks + kd) * kh + ki) * kw + kj) * cols;
                        for bn in 0..n {
                            for od in 0..so {
                                let id = (od + kd) as isize - pad.0 as isize;
                                if id < 0 || id >= s as isize {
                                    continue;
                                }
                                for oy in 0..ho {
                                    let iy = (oy + ki) as isize - pad.1 as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let src_base =
                                        (((bn * c_in + c) * s + id as usize) * h + iy as usize)
                                            * wdt;
                                    let dst_base = row_base + ((bn * so + od) * ho + oy) * wo;
                                    for ox in 0..wo {
                                        let ix = (ox + kj) as isize - pad.2 as isize;
                                        if ix >= 0 && ix < wdt as isize {
                                            csl[dst_base + ox] = xsl[src_base + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    };

    let col = build_col(&x.value().as_standard_layout().into_owned());
    let w2 = w
        .to_array()
        .into_shape_with_order((c_out, krn))
        .unwrap();
    let out_t = w2.dot(&col); // [c_out, cols]
    let mut value = out_t
        .into_shape_with_order((c_out, n, so, ho, wo))
        .unwrap()
        .permuted_axes([1, 0, 2, 3, 4])
        .as_standard_layout()
        .into_owned()
        .into_dyn();
    if let Some(b) = b {
        let bv = b.value();
        for co in 0..c_out {
            value
                .slice_axis_mut(Axis(1), Slice::from(co..co + 1))
                .mapv_inplace(|v| v + bv[[co]]);
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let pw = w.clone();
    let has_bias = b.is_some();
    Var::from_op(value, parents, move |g, needs| {
        let g_t = g
            .clone()
            .permuted_axes(IxDyn(&[1, 0, 2, 3, 4]))
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c_out, cols))
            .unwrap();
        let gw = needs[1].then(|| {
            g_t.dot(&col.t())
                .into_shape_with_order((c_out, c_in, ks, kh, kw))
                .unwrap()
                .into_dyn()
        });
        let gx = needs[0].then(|| {
            let w2 = pw
                .to_array()
                .into_shape_with_order((c_out, krn))
                .unwrap();
            let gcol = w2.t().dot(&g_t).as_standard_layout().into_owned();
            let gsl = gcol.as_slice().unwrap();
            let mut gx = Arr::<T>::zeros(IxDyn(&[n, c_in, s, h, wdt]));
            for c in 0..c_in {
                for kd in 0..ks {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let row_base = (((c * ks + kd) * kh + ki) * kw + kj) * cols;
                            for bn in 0..n {
                                for od in 0..so {
                                    let id = (od + kd) as isize - pad.0 as isize;
                                    if id < 0 || id >= s as isize {
                                        continue;
                                    }
                                    for oy in 0..ho {
                                        let iy = (oy + ki) as isize - pad.1 as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for ox in 0..wo {
                                            let ix = (ox + kj) as isize - pad.2 as isize;
                                            if ix >= 0 && ix < wdt as isize {
                                                gx[[bn, c, id as usize, iy as usize, ix as usize]] +=
                                                    gsl[row_base + ((bn * so + od) * ho + oy) * wo + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            gx
        });
        let mut out = vec![gx, gw];
        if has_bias {
            out.push(needs[2].then(|| g_t.sum_axis(Axis(1)).into_dyn()));
        }
        out
    })
}
