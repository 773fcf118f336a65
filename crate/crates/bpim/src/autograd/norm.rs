//! Batch, group and layer normalization with exact backward passes.

use ndarray::{Array1, Array2, Array3, Axis, IxDyn};

use super::{Arr, Var};
use crate::scalar::Scalar;

fn to_ncl<T: Scalar>(a: &Arr<T>) -> Array3<T> {
    let s = a.shape();
    let (n, c) = (s[0], s[1]);
    let l: usize = s[2..].iter().product::<usize>().max(1);
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c, l))
        .unwrap()
}

/// Batch normalization over axis 1 of an [n, c, ...] tensor.
///
/// `running`: `Some((mean, var))` normalizes with those fixed statistics
/// (evaluation mode; gradients do not flow through them). `None` computes
/// batch statistics, differentiates through them, and returns them so the
/// caller can maintain running averages.
#[allow(clippy::type_complexity)]
pub fn batch_norm<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    eps: T,
    running: Option<(&Arr<T>, &Arr<T>)>,
) -> (Var<T>, Option<(Array1<T>, Array1<T>)>) {
    let shape = x.shape();
    assert!(shape.len() >= 2, "batch_norm: rank must be >= 2");
    let c = shape[1];
    assert_eq!(gamma.shape(), vec![c]);
    assert_eq!(beta.shape(), vec![c]);

    let x3 = to_ncl(&x.value());
    let (n, _, l) = x3.dim();
    let m = n * l;

    let (mean, var, batch_stats) = match running {
        Some((rm, rv)) => {
            let mean = Array1::from_iter(rm.iter().copied());
            let var = Array1::from_iter(rv.iter().copied());
            (mean, var, None)
        }
        None => {
            let inv_m = T::c(1.0 / m as f64);
            let mut mean = Array1::<T>::zeros(c);
            let mut var = Array1::<T>::zeros(c);
            for ch in 0..c {
                let lane = x3.index_axis(Axis(1), ch);
                let mu = lane.iter().copied().sum::<T>() * inv_m;
                let v = lane
                    .iter()
                    .map(|&x| (x - mu) * (x - mu))
                    .sum::<T>()
                    * inv_m;
                mean[ch] = mu;
                var[ch] = v;
            }
            let stats = (mean.clone(), var.clone());
            (mean, var, Some(stats))
        }
    };

    let sigma = var.mapv(|v| (v + eps).sqrt());
    let mut xhat = x3.clone();
    for ch in 0..c {
        let (mu, s) = (mean[ch], sigma[ch]);
        xhat.index_axis_mut(Axis(1), ch)
            .mapv_inplace(|v| (v - mu) / s);
    }
    let mut y = xhat.clone();
    {
        let gv = gamma.value();
        let bv = beta.value();
        for ch in 0..c {
            let (g, b) = (gv[[ch]], bv[[ch]]);
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * g + b);
        }
    }
    let value = y
        .into_shape_with_order(IxDyn(&shape))
        .unwrap();

    let use_batch_stats = running.is_none();
    let pgamma = gamma.clone();
    let out = Var::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g, needs| {
            let g3 = to_ncl(g);
            let inv_m = T::c(1.0 / m as f64);
            let gv = pgamma.value();
            let mut dgamma = needs[1].then(|| Array1::<T>::zeros(c));
            let mut dbeta = needs[2].then(|| Array1::<T>::zeros(c));
            let mut dx = needs[0].then(|| Array3::<T>::zeros((n, c, l)));
            for ch in 0..c {
                let glane = g3.index_axis(Axis(1), ch);
                let xlane = xhat.index_axis(Axis(1), ch);
                let sum_g = glane.iter().copied().sum::<T>();
                let sum_gx = glane
                    .iter()
                    .zip(xlane.iter())
                    .map(|(&a, &b)| a * b)
                    .sum::<T>();
                if let Some(dg) = dgamma.as_mut() {
                    dg[ch] = sum_gx;
                }
                if let Some(db) = dbeta.as_mut() {
                    db[ch] = sum_g;
                }
                if let Some(dx) = dx.as_mut() {
                    let k = gv[[ch]] / sigma[ch];
                    let mut lane = dx.index_axis_mut(Axis(1), ch);
                    if use_batch_stats {
                        let mg = sum_g * inv_m;
                        let mgx = sum_gx * inv_m;
                        for ((d, &gg), &xh) in
                            lane.iter_mut().zip(glane.iter()).zip(xlane.iter())
                        {
                            *d = k * (gg - mg - xh * mgx);
                        }
                    } else {
                        for (d, &gg) in lane.iter_mut().zip(glane.iter()) {
                            *d = k * gg;
                        }
                    }
                }
            }
            vec![
                dx.map(|d| d.into_shape_with_order(IxDyn(&shape)).unwrap()),
                dgamma.map(|d| d.into_dyn()),
                dbeta.map(|d| d.into_dyn()),
            ]
        },
    );
    (out, batch_stats)
}

/// Group normalization of [n, c, h, w] with per-channel affine.
pub fn group_norm<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    groups: usize,
    eps: T,
) -> Var<T> {
    let shape = x.shape();
    assert_eq!(shape.len(), 4, "group_norm: input must be [n,c,h,w]");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(groups >= 1 && c % groups == 0, "group_norm: groups must divide channels");
    let cg = c / groups;
    let r = cg * h * w;
    let hw = h * w;

    let x3 = x
        .value()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, groups, r))
        .unwrap();
    let inv_r = T::c(1.0 / r as f64);
    let mut sigma = Array2::<T>::zeros((n, groups));
    let mut xhat = x3.clone();
    for bn in 0..n {
        for g in 0..groups {
            let lane = x3.index_axis(Axis(0), bn);
            let lane = lane.index_axis(Axis(0), g);
            let mu = lane.iter().copied().sum::<T>() * inv_r;
            let v = lane.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() * inv_r;
            let s = (v + eps).sqrt();
            sigma[[bn, g]] = s;
            let mut dst = xhat.index_axis_mut(Axis(0), bn);
            let mut dst = dst.index_axis_mut(Axis(0), g);
            dst.mapv_inplace(|x| (x - mu) / s);
        }
    }

    let mut y = xhat.clone();
    {
        let gv = gamma.value();
        let bv = beta.value();
        for bn in 0..n {
            for g in 0..groups {
                let mut dst = y.index_axis_mut(Axis(0), bn);
                let mut dst = dst.index_axis_mut(Axis(0), g);
                for (ri, v) in dst.iter_mut().enumerate() {
                    let ch = g * cg + ri / hw;
                    *v = *v * gv[[ch]] + bv[[ch]];
                }
            }
        }
    }
    let value = y.into_shape_with_order(IxDyn(&shape)).unwrap();

    let pgamma = gamma.clone();
    Var::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |gout, needs| {
            let g3 = gout
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((n, groups, r))
                .unwrap();
            let gv = pgamma.value();
            let mut dgamma = needs[1].then(|| Array1::<T>::zeros(c));
            let mut dbeta = needs[2].then(|| Array1::<T>::zeros(c));
            let mut dx = needs[0].then(|| Array3::<T>::zeros((n, groups, r)));
            for bn in 0..n {
                for g in 0..groups {
                    let glane = g3.index_axis(Axis(0), bn);
                    let glane = glane.index_axis(Axis(0), g);
                    let xlane = xhat.index_axis(Axis(0), bn);
                    let xlane = xlane.index_axis(Axis(0), g);
                    if let Some(dg) = dgamma.as_mut() {
                        for ri in 0..r {
                            dg[g * cg + ri / hw] += glane[ri] * xlane[ri];
                        }
                    }
                    if let Some(db) = dbeta.as_mut() {
                        for ri in 0..r {
                            db[g * cg + ri / hw] += glane[ri];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dxhat = g * gamma (channel-wise)
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for ri in 0..r {
                            let dxh = glane[ri] * gv[[g * cg + ri / hw]];
                            m1 += dxh;
                            m2 += dxh * xlane[ri];
                        }
                        m1 = m1 * inv_r;
                        m2 = m2 * inv_r;
                        let s = sigma[[bn, g]];
                        let mut dst = dx.index_axis_mut(Axis(0), bn);
                        let mut dst = dst.index_axis_mut(Axis(0), g);
                        for ri in 0..r {
                            let dxh = glane[ri] * gv[[g * cg + ri / hw]];
                            dst[ri] = (dxh - m1 - xlane[ri] * m2) / s;
                        }
                    }
                }
            }
            vec![
                dx.map(|d| d.into_shape_with_order(IxDyn(&shape)).unwrap()),
                dgamma.map(|d| d.into_dyn()),
                dbeta.map(|d| d.into_dyn()),
            ]
        },
    )
}

/// Layer normalization over the last axis of a [rows, c] matrix.
pub fn layer_norm_rows<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    eps: T,
) -> Var<T> {
    let shape = x.shape();
    assert_eq!(shape.len(), 2, "layer_norm_rows: expects a matrix");
    let (rows, c) = (shape[0], shape[1]);
    assert_eq!(gamma.shape(), vec![c]);

    let x2 = x
        .value()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, c))
        .unwrap();
    let inv_c = T::c(1.0 / c as f64);
    let mut sigma = Array1::<T>::zeros(rows);
    let mut xhat = x2.clone();
    for ri in 0..rows {
        let lane = x2.index_axis(Axis(0), ri);
        let mu = lane.iter().copied().sum::<T>() * inv_c;
        let v = lane.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() * inv_c;
        let s = (v + eps).sqrt();
        sigma[ri] = s;
        xhat.index_axis_mut(Axis(0), ri)
            .mapv_inplace(|x| (x - mu) / s);
    }
    let mut y = xhat.clone();
    {
        let gv = gamma.value();
        let bv = beta.value();
        for mut row in y.rows_mut() {
            for (ch, v) in row.iter_mut().enumerate() {
                *v = *v * gv[[ch]] + bv[[ch]];
            }
        }
    }

    let pgamma = gamma.clone();
    Var::from_op(
        y.into_dyn(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |gout, needs| {
            let g2 = gout
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((rows, c))
                .unwrap();
            let gv = pgamma.value();
            let mut dgamma = needs[1].then(|| Array1::<T>::zeros(c));
            let mut dbeta = needs[2].then(|| Array1::<T>::zeros(c));
            let mut dx = needs[0].then(|| Array2::<T>::zeros((rows, c)));
            for ri in 0..rows {
                let glane = g2.index_axis(Axis(0), ri);
                let xlane = xhat.index_axis(Axis(0), ri);
                if let Some(dg) = dgamma.as_mut() {
                    for ch in 0..c {
                        dg[ch] += glane[ch] * xlane[ch];
                    }
                }
                if let Some(db) = dbeta.as_mut() {
                    for ch in 0..c {
                        db[ch] += glane[ch];
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for ch in 0..c {
                        let dxh = glane[ch] * gv[[ch]];
                        m1 += dxh;
                        m2 += dxh * xlane[ch];
                    }
                    m1 = m1 * inv_c;
                    m2 = m2 * inv_c;
                    let s = sigma[ri];
                    for ch in 0..c {
                        let dxh = glane[ch] * gv[[ch]];
                        dx[[ri, ch]] = (dxh - m1 - xlane[ch] * m2) / s;
                    }
                }
            }
            vec![
                dx.map(|d| d.into_dyn()),
                dgamma.map(|d| d.into_dyn()),
                dbeta.map(|d| d.into_dyn()),
            ]
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{assert_grad_matches, assert_param_grad_matches, randn};
    use crate::autograd::ops::mean_all;

    #[test]
    fn batch_norm_train_normalizes() {
        let x = Var::constant(randn::<f64>(&[4, 3, 5, 5], 30));
        let gamma = Var::constant(Arr::ones(IxDyn(&[3])));
        let beta = Var::constant(Arr::zeros(IxDyn(&[3])));
        let (y, stats) = batch_norm(&x, &gamma, &beta, 1e-5, None);
        let (mean, var) = stats.unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1.0));
        assert!(var.iter().all(|v| *v > 0.0));
        let y3 = to_ncl(&y.to_array());
        for ch in 0..3 {
            let lane = y3.index_axis(Axis(1), ch);
            let m: f64 = lane.iter().sum::<f64>() / lane.len() as f64;
            assert!(m.abs() < 1e-10, "normalized mean should vanish");
        }
    }

    #[test]
    fn batch_norm_grads_match_fd() {
        let x0 = randn::<f64>(&[3, 2, 4, 4], 31);
        let gamma = Var::parameter(randn::<f64>(&[2], 32).mapv(|v| 1.0 + 0.1 * v));
        let beta = Var::parameter(randn::<f64>(&[2], 33));
        // train mode: stats are part of the graph
        assert_grad_matches(
            &x0,
            |x| mean_all(&crate::autograd::ops::silu(&batch_norm(x, &gamma, &beta, 1e-5, None).0)),
            1e-5,
            1e-5,
        );
        // eval mode: fixed stats
        let rm = Arr::zeros(IxDyn(&[2]));
        let rv = Arr::ones(IxDyn(&[2]));
        assert_grad_matches(
            &x0,
            |x| mean_all(&batch_norm(x, &gamma, &beta, 1e-5, Some((&rm, &rv))).0),
            1e-5,
            1e-5,
        );
        let x = Var::parameter(x0);
        assert_param_grad_matches(
            &gamma,
            || mean_all(&crate::autograd::ops::silu(&batch_norm(&x, &gamma, &beta, 1e-5, None).0)),
            1e-5,
            1e-5,
        );
        assert_param_grad_matches(
            &beta,
            || mean_all(&crate::autograd::ops::silu(&batch_norm(&x, &gamma, &beta, 1e-5, None).0)),
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn group_norm_grads_match_fd() {
        let x0 = randn::<f64>(&[2, 4, 3, 3], 34);
        let gamma = Var::parameter(randn::<f64>(&[4], 35).mapv(|v| 1.0 + 0.1 * v));
        let beta = Var::parameter(randn::<f64>(&[4], 36));
        for groups in [1, 2, 4] {
            assert_grad_matches(
                &x0,
                |x| {
                    mean_all(&crate::autograd::ops::silu(&group_norm(
                        x, &gamma, &beta, groups, 1e-5,
                    )))
                },
                1e-5,
                1e-5,
            );
        }
        let x = Var::parameter(x0);
        assert_param_grad_matches(
            &gamma,
            || mean_all(&crate::autograd::ops::silu(&group_norm(&x, &gamma, &beta, 2, 1e-5))),
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn layer_norm_grads_match_fd() {
        let x0 = randn::<f64>(&[5, 6], 37);
        let gamma = Var::parameter(randn::<f64>(&[6], 38).mapv(|v| 1.0 + 0.1 * v));
        let beta = Var::parameter(randn::<f64>(&[6], 39));
        assert_grad_matches(
            &x0,
            |x| mean_all(&crate::autograd::ops::silu(&layer_norm_rows(x, &gamma, &beta, 1e-5))),
            1e-5,
            1e-5,
        );
        let x = Var::parameter(x0);
        assert_param_grad_matches(
            &beta,
            || mean_all(&layer_norm_rows(&x, &gamma, &beta, 1e-5)),
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn group_norm_of_zeros_with_zero_beta_is_zero() {
        let x = Var::constant(Arr::zeros(IxDyn(&[1, 4, 2, 2])));
        let gamma = Var::constant(Arr::ones(IxDyn(&[4])));
        let beta = Var::constant(Arr::zeros(IxDyn(&[4])));
        let y = group_norm(&x, &gamma, &beta, 2, 1e-5);
        assert!(y.to_array().iter().all(|&v| v == 0.0));
    }
}
