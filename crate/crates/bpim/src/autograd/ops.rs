//! Differentiable tensor operations.
//!
//! Every function builds the output value eagerly and registers a closure
//! that maps the output gradient onto the inputs. Shape errors are
//! programmer errors and panic via `assert!`; contract-level validation
//! happens in the block layer before ops are reached.

use ndarray::{concatenate, Axis, IxDyn, Slice};

use super::{Arr, Var};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
    let value = &*a.value() + &*b.value();
    Var::from_op(value, vec![a.clone(), b.clone()], move |g, needs| {
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| g.clone()),
        ]
    })
}

pub fn sub<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
    let value = &*a.value() - &*b.value();
    Var::from_op(value, vec![a.clone(), b.clone()], move |g, needs| {
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| g.mapv(|x| -x)),
        ]
    })
}

pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
    let value = &*a.value() * &*b.value();
    let (pa, pb) = (a.clone(), b.clone());
    Var::from_op(value, vec![a.clone(), b.clone()], move |g, needs| {
        vec![
            needs[0].then(|| g * &*pb.value()),
            needs[1].then(|| g * &*pa.value()),
        ]
    })
}

pub fn div<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_eq!(a.shape(), b.shape(), "div: shape mismatch");
    let value = &*a.value() / &*b.value();
    let (pa, pb) = (a.clone(), b.clone());
    Var::from_op(value, vec![a.clone(), b.clone()], move |g, needs| {
        let bv = pb.value();
        vec![
            needs[0].then(|| g / &*bv),
            needs[1].then(|| {
                let av = pa.value();
                ndarray::Zip::from(g)
                    .and(&*av)
                    .and(&*bv)
                    .map_collect(|&g, &a, &b| -g * a / (b * b))
            }),
        ]
    })
}

// ---------------------------------------------------------------------------
// elementwise with scalars / constants
// ---------------------------------------------------------------------------

pub fn scale<T: Scalar>(x: &Var<T>, c: T) -> Var<T> {
    let value = x.value().mapv(|v| v * c);
    Var::from_op(value, vec![x.clone()], move |g, _| {
        vec![Some(g.mapv(|v| v * c))]
    })
}

pub fn add_scalar<T: Scalar>(x: &Var<T>, c: T) -> Var<T> {
    let value = x.value().mapv(|v| v + c);
    Var::from_op(value, vec![x.clone()], move |g, _| vec![Some(g.clone())])
}

/// Elementwise multiply by a constant tensor of the same shape.
pub fn mul_const<T: Scalar>(x: &Var<T>, c: Arr<T>) -> Var<T> {
    assert_eq!(x.shape(), c.shape().to_vec(), "mul_const: shape mismatch");
    let value = &*x.value() * &c;
    Var::from_op(value, vec![x.clone()], move |g, _| vec![Some(g * &c)])
}

/// Elementwise add of a constant tensor of the same shape.
pub fn add_const<T: Scalar>(x: &Var<T>, c: Arr<T>) -> Var<T> {
    assert_eq!(x.shape(), c.shape().to_vec(), "add_const: shape mismatch");
    let value = &*x.value() + &c;
    Var::from_op(value, vec![x.clone()], move |g, _| vec![Some(g.clone())])
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

pub fn neg<T: Scalar>(x: &Var<T>) -> Var<T> {
    scale(x, T::c(-1.0))
}

pub fn exp<T: Scalar>(x: &Var<T>) -> Var<T> {
    let value = x.value().mapv(|v| v.exp());
    let y = value.clone();
    Var::from_op(value, vec![x.clone()], move |g, _| vec![Some(g * &y)])
}

pub fn abs<T: Scalar>(x: &Var<T>) -> Var<T> {
    let value = x.value().mapv(|v| v.abs());
    let px = x.clone();
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let xv = px.value();
        vec![Some(ndarray::Zip::from(g).and(&*xv).map_collect(|&g, &x| {
            if x < T::zero() {
                -g
            } else {
                g
            }
        }))]
    })
}

/// Clamp with pass-through gradient strictly inside (lo, hi).
pub fn clamp<T: Scalar>(x: &Var<T>, lo: T, hi: T) -> Var<T> {
    let value = x.value().mapv(|v| v.max(lo).min(hi));
    let px = x.clone();
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let xv = px.value();
        vec![Some(ndarray::Zip::from(g).and(&*xv).map_collect(|&g, &x| {
            if x > lo && x < hi {
                g
            } else {
                T::zero()
            }
        }))]
    })
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn sigmoid<T: Scalar>(x: &Var<T>) -> Var<T> {
    let value = x.value().mapv(sigmoid_scalar);
    let y = value.clone();
    Var::from_op(value, vec![x.clone()], move |g, _| {
        vec![Some(ndarray::Zip::from(g).and(&y).map_collect(|&g, &y| {
            g * y * (T::one() - y)
        }))]
    })
}

/// SiLU / swish: x * sigmoid(x).
pub fn silu<T: Scalar>(x: &Var<T>) -> Var<T> {
    let value = x.value().mapv(|v| v * sigmoid_scalar(v));
    let px = x.clone();
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let xv = px.value();
        vec![Some(ndarray::Zip::from(g).and(&*xv).map_collect(|&g, &x| {
            let s = sigmoid_scalar(x);
            g * s * (T::one() + x * (T::one() - s))
        }))]
    })
}

/// GELU via the tanh approximation.
pub fn gelu<T: Scalar>(x: &Var<T>) -> Var<T> {
    let c0 = T::c(0.7978845608028654); // sqrt(2/pi)
    let c1 = T::c(0.044715);
    let half = T::c(0.5);
    let value = x.value().mapv(|v| {
        let inner = c0 * (v + c1 * v * v * v);
        half * v * (T::one() + inner.tanh())
    });
    let px = x.clone();
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let xv = px.value();
        vec![Some(ndarray::Zip::from(g).and(&*xv).map_collect(|&g, &x| {
            let inner = c0 * (x + c1 * x * x * x);
            let t = inner.tanh();
            let sech2 = T::one() - t * t;
            let dinner = c0 * (T::one() + T::c(3.0) * c1 * x * x);
            g * (half * (T::one() + t) + half * x * sech2 * dinner)
        }))]
    })
}

// ---------------------------------------------------------------------------
// broadcast helpers
// ---------------------------------------------------------------------------

/// `x * w` where `w` has size 1 along `axis` and matches `x` elsewhere.
/// Used for per-pixel fusion weights broadcast across channels.
pub fn mul_bcast_axis<T: Scalar>(x: &Var<T>, w: &Var<T>, axis: usize) -> Var<T> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), ws.len(), "mul_bcast_axis: rank mismatch");
    assert_eq!(ws[axis], 1, "mul_bcast_axis: weight axis must be 1");
    for (d, (&a, &b)) in xs.iter().zip(ws.iter()).enumerate() {
        assert!(d == axis || a == b, "mul_bcast_axis: shape mismatch");
    }
    let value = {
        let wv = w.value();
        let bc = wv.broadcast(IxDyn(&xs)).expect("broadcastable");
        &*x.value() * &bc
    };
    let (px, pw) = (x.clone(), w.clone());
    Var::from_op(value, vec![x.clone(), w.clone()], move |g, needs| {
        let gx = needs[0].then(|| {
            let wv = pw.value();
            let bc = wv.broadcast(g.raw_dim()).expect("broadcastable");
            g * &bc
        });
        let gw = needs[1].then(|| {
            let prod = g * &*px.value();
            let mut summed = prod.sum_axis(Axis(axis));
            summed = summed.insert_axis(Axis(axis));
            summed
        });
        vec![gx, gw]
    })
}

/// `x + b` where x is [rows, c] and b is [c].
pub fn add_rowvec<T: Scalar>(x: &Var<T>, b: &Var<T>) -> Var<T> {
    let xs = x.shape();
    let bs = b.shape();
    assert_eq!(xs.len(), 2);
    assert_eq!(bs, vec![xs[1]], "add_rowvec: bias length mismatch");
    let value = {
        let bv = b.value();
        let bc = bv.broadcast(IxDyn(&xs)).expect("broadcastable");
        &*x.value() + &bc
    };
    Var::from_op(value, vec![x.clone(), b.clone()], move |g, needs| {
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| g.sum_axis(Axis(0))),
        ]
    })
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub fn sum_all<T: Scalar>(x: &Var<T>) -> Var<T> {
    let total = x.value().iter().copied().sum::<T>();
    let shape = IxDyn(&x.shape());
    let value = Arr::from_elem(IxDyn(&[]), total);
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let gs = *g.iter().next().expect("scalar grad");
        vec![Some(Arr::from_elem(shape.clone(), gs))]
    })
}

pub fn mean_all<T: Scalar>(x: &Var<T>) -> Var<T> {
    let n = x.value().len();
    assert!(n > 0, "mean_all: empty tensor");
    let inv = T::c(1.0 / n as f64);
    scale(&sum_all(x), inv)
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

fn reshape_arr<T: Scalar>(a: &Arr<T>, shape: &[usize]) -> Arr<T> {
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch")
}

pub fn reshape<T: Scalar>(x: &Var<T>, shape: &[usize]) -> Var<T> {
    let old = x.shape();
    let value = reshape_arr(&x.value(), shape);
    Var::from_op(value, vec![x.clone()], move |g, _| {
        vec![Some(reshape_arr(g, &old))]
    })
}

pub fn permute<T: Scalar>(x: &Var<T>, axes: &[usize]) -> Var<T> {
    let axes = axes.to_vec();
    let mut inverse = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    let value = x
        .value()
        .clone()
        .permuted_axes(IxDyn(&axes))
        .as_standard_layout()
        .into_owned();
    Var::from_op(value, vec![x.clone()], move |g, _| {
        vec![Some(
            g.clone()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .into_owned(),
        )]
    })
}

/// Slice `len` entries starting at `start` along `axis`.
pub fn narrow<T: Scalar>(x: &Var<T>, axis: usize, start: usize, len: usize) -> Var<T> {
    let full = x.shape();
    assert!(start + len <= full[axis], "narrow: out of range");
    let value = x
        .value()
        .slice_axis(Axis(axis), Slice::from(start..start + len))
        .to_owned();
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let mut out = Arr::zeros(IxDyn(&full));
        out.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(g);
        vec![Some(out)]
    })
}

pub fn concat<T: Scalar>(axis: usize, parts: &[Var<T>]) -> Var<T> {
    assert!(!parts.is_empty(), "concat: no inputs");
    let views: Vec<_> = parts.iter().map(|p| p.to_array()).collect();
    let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    let value = concatenate(Axis(axis), &view_refs).expect("concat: incompatible shapes");
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Var::from_op(value, parts.to_vec(), move |g, needs| {
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for (i, &sz) in sizes.iter().enumerate() {
            out.push(needs[i].then(|| {
                g.slice_axis(Axis(axis), Slice::from(offset..offset + sz))
                    .to_owned()
            }));
            offset += sz;
        }
        out
    })
}

/// Stack along a fresh axis (all inputs keep their shape).
pub fn stack_new_axis<T: Scalar>(axis: usize, parts: &[Var<T>]) -> Var<T> {
    assert!(!parts.is_empty(), "stack: no inputs");
    let arrays: Vec<_> = parts.iter().map(|p| p.to_array()).collect();
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    let value = ndarray::stack(Axis(axis), &views).expect("stack: incompatible shapes");
    Var::from_op(value, parts.to_vec(), move |g, needs| {
        (0..needs.len())
            .map(|i| {
                needs[i].then(|| {
                    g.index_axis(Axis(axis), i).to_owned()
                })
            })
            .collect()
    })
}

/// Select rows of a [rows, cols] matrix; indices may repeat.
pub fn gather_rows<T: Scalar>(x: &Var<T>, idx: &[usize]) -> Var<T> {
    let shape = x.shape();
    assert_eq!(shape.len(), 2, "gather_rows: expects a matrix");
    let (rows, cols) = (shape[0], shape[1]);
    let idx = idx.to_vec();
    let value = {
        let xv = x.value();
        let mut out = Arr::zeros(IxDyn(&[idx.len(), cols]));
        for (m, &r) in idx.iter().enumerate() {
            assert!(r < rows, "gather_rows: index out of range");
            out.index_axis_mut(Axis(0), m)
                .assign(&xv.index_axis(Axis(0), r));
        }
        out
    };
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let mut out = Arr::zeros(IxDyn(&[rows, cols]));
        for (m, &r) in idx.iter().enumerate() {
            let mut row = out.index_axis_mut(Axis(0), r);
            row.zip_mut_with(&g.index_axis(Axis(0), m), |a, b| *a += *b);
        }
        vec![Some(out)]
    })
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

fn as_2d<T: Scalar>(a: &Arr<T>) -> ndarray::Array2<T> {
    a.clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected rank-2 tensor")
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa.len(), 2);
    assert_eq!(sb.len(), 2);
    assert_eq!(sa[1], sb[0], "matmul: inner dims differ");
    let value = as_2d(&a.value()).dot(&as_2d(&b.value())).into_dyn();
    let (pa, pb) = (a.clone(), b.clone());
    Var::from_op(value, vec![a.clone(), b.clone()], move |g, needs| {
        let g2 = as_2d(g);
        let ga = needs[0].then(|| g2.dot(&as_2d(&pb.value()).t()).into_dyn());
        let gb = needs[1].then(|| as_2d(&pa.value()).t().dot(&g2).into_dyn());
        vec![ga, gb]
    })
}

/// Row-wise softmax over the last axis of a rank-2 tensor.
pub fn softmax_rows<T: Scalar>(x: &Var<T>) -> Var<T> {
    let shape = x.shape();
    assert_eq!(shape.len(), 2, "softmax_rows: expects a matrix");
    let mut value = x.to_array();
    for mut row in value.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().copied().sum::<T>();
        row.mapv_inplace(|v| v / sum);
    }
    let y = value.clone();
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let mut out = g * &y;
        let g2 = as_2d(&out);
        let dot = g2.sum_axis(Axis(1)); // sum(g * y) per row
        for (mut row, (&d, yrow)) in out
            .rows_mut()
            .into_iter()
            .zip(dot.iter().zip(as_2d(&y).rows()))
        {
            row.zip_mut_with(&yrow, |r, &yv| *r -= d * yv);
        }
        vec![Some(out)]
    })
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Numerically stable elementwise binary cross-entropy on logits:
/// `max(x,0) - x*t + ln(1 + exp(-|x|))`. Targets are constants.
pub fn bce_with_logits<T: Scalar>(x: &Var<T>, targets: Arr<T>) -> Var<T> {
    assert_eq!(x.shape(), targets.shape().to_vec(), "bce: shape mismatch");
    let value = ndarray::Zip::from(&*x.value())
        .and(&targets)
        .map_collect(|&x, &t| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln());
    let px = x.clone();
    Var::from_op(value, vec![x.clone()], move |g, _| {
        let xv = px.value();
        vec![Some(
            ndarray::Zip::from(g)
                .and(&*xv)
                .and(&targets)
                .map_collect(|&g, &x, &t| g * (sigmoid_scalar(x) - t)),
        )]
    })
}

// ---------------------------------------------------------------------------
// directional scans
// ---------------------------------------------------------------------------

/// Running maximum along `axis`: `reverse = false` is a prefix scan
/// (out[i] = max of x[..=i]), `reverse = true` a suffix scan
/// (out[i] = max of x[i..]). The gradient routes each output position to
/// its maximum's source; ties resolve to the position nearest the output.
pub fn cummax_axis<T: Scalar>(x: &Var<T>, axis: usize, reverse: bool) -> Var<T> {
    let shape = x.shape();
    let n = shape[axis];
    let xv = x.to_array();
    let mut value = xv.clone();
    let mut argmax: ndarray::ArrayD<usize> = ndarray::ArrayD::zeros(IxDyn(&shape));

    {
        let vlanes = value.lanes_mut(Axis(axis));
        let alanes = argmax.lanes_mut(Axis(axis));
        for (mut vl, mut al) in vlanes.into_iter().zip(alanes.into_iter()) {
            if !reverse {
                let mut best = vl[0];
                let mut best_i = 0usize;
                al[0] = 0;
                for i in 1..n {
                    if vl[i] > best {
                        best = vl[i];
                        best_i = i;
                    }
                    vl[i] = best;
                    al[i] = best_i;
                }
            } else {
                let mut best = vl[n - 1];
                let mut best_i = n - 1;
                al[n - 1] = n - 1;
                for i in (0..n - 1).rev() {
                    if vl[i] > best {
                        best = vl[i];
                        best_i = i;
                    }
                    vl[i] = best;
                    al[i] = best_i;
                }
            }
        }
    }

    Var::from_op(value, vec![x.clone()], move |g, _| {
        let mut out = Arr::zeros(g.raw_dim());
        {
            let glanes = g.lanes(Axis(axis));
            let alanes = argmax.lanes(Axis(axis));
            let olanes = out.lanes_mut(Axis(axis));
            for ((gl, al), mut ol) in glanes
                .into_iter()
                .zip(alanes.into_iter())
                .zip(olanes.into_iter())
            {
                for i in 0..gl.len() {
                    ol[al[i]] += gl[i];
                }
            }
        }
        vec![Some(out)]
    })
}
