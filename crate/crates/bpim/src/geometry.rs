//! Box arithmetic: IoU, complete IoU with centroid-distance and
//! aspect-ratio penalties, the confidence regression target, and
//! class-wise non-maximum suppression.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default IoU threshold for suppression.
pub const DEFAULT_NMS_IOU: f64 = 0.45;
/// Default confidence floor for reporting detections.
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;

/// Axis-aligned box in center format. Coordinates are normalized to the
/// image frame in the pipeline but the math is unit-agnostic.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.w > T::zero() && self.h > T::zero() && self.finite()
    }

    fn finite(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// (x1, y1, x2, y2) corners.
    pub fn corners(&self) -> (T, T, T, T) {
        let half = T::c(0.5);
        (
            self.cx - self.w * half,
            self.cy - self.h * half,
            self.cx + self.w * half,
            self.cy + self.h * half,
        )
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    /// Clip the box so that every corner lies inside the unit square,
    /// preserving center format.
    pub fn clip_unit(&self) -> BBox<T> {
        let (x1, y1, x2, y2) = self.corners();
        let x1 = x1.max(T::zero()).min(T::one());
        let y1 = y1.max(T::zero()).min(T::one());
        let x2 = x2.max(T::zero()).min(T::one());
        let y2 = y2.max(T::zero()).min(T::one());
        let half = T::c(0.5);
        BBox {
            cx: (x1 + x2) * half,
            cy: (y1 + y2) * half,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.is_valid() {
            return Err(Error::Domain(format!(
                "degenerate box (w={}, h={})",
                self.w, self.h
            )));
        }
        Ok(())
    }
}

/// Intermediate terms of the complete-IoU score.
#[derive(Debug, Clone, Copy)]
pub struct CIoUParts<T> {
    /// Plain intersection-over-union.
    pub iou: T,
    /// Squared distance between the two centroids.
    pub rho2: T,
    /// Squared diagonal of the smallest enclosing rectangle.
    pub c2: T,
    /// Aspect-ratio consistency term, in [0, 1].
    pub v: T,
    /// Trade-off weight for the aspect term.
    pub alpha: T,
}

/// Intersection-over-union of two valid boxes. Symmetric; 0 when disjoint.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> Result<T> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

fn iou_unchecked<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    // areas from the same corner differences so that identical boxes give
    // exactly inter == union and an IoU of exactly one
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    inter / union
}

/// Complete IoU: `iou - rho^2/c^2 - alpha * v`.
///
/// Equals 1 exactly iff the boxes coincide. The trade-off weight alpha is
/// zero whenever its defining denominator vanishes (which only happens at
/// iou = 1 with matching aspect, where v = 0 anyway).
pub fn ciou<T: Scalar>(pred: &BBox<T>, gt: &BBox<T>) -> Result<(T, CIoUParts<T>)> {
    pred.validate()?;
    gt.validate()?;
    Ok(ciou_unchecked(pred, gt))
}

fn ciou_unchecked<T: Scalar>(pred: &BBox<T>, gt: &BBox<T>) -> (T, CIoUParts<T>) {
    let iou = iou_unchecked(pred, gt);

    let dx = pred.cx - gt.cx;
    let dy = pred.cy - gt.cy;
    let rho2 = dx * dx + dy * dy;

    let (px1, py1, px2, py2) = pred.corners();
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let ew = px2.max(gx2) - px1.min(gx1);
    let eh = py2.max(gy2) - py1.min(gy1);
    let c2 = ew * ew + eh * eh;

    let four_over_pi2 = T::c(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let da = (gt.w / gt.h).atan() - (pred.w / pred.h).atan();
    let v = four_over_pi2 * da * da;

    let denom = T::one() - iou + v;
    let alpha = if denom > T::zero() { v / denom } else { T::zero() };

    let value = if c2 > T::zero() {
        iou - rho2 / c2 - alpha * v
    } else {
        // enclosing diagonal of length zero means the boxes coincide
        T::one()
    };
    (
        value,
        CIoUParts {
            iou,
            rho2,
            c2,
            v,
            alpha,
        },
    )
}

/// CIoU evaluated with the trade-off weight pinned to `alpha`.
///
/// This is the objective that [`ciou_with_grad`] differentiates (no gradient
/// flows through the trade-off weight), so finite-difference verification
/// perturbs this function with `alpha` taken from the base point.
pub fn ciou_alpha_frozen<T: Scalar>(pred: &BBox<T>, gt: &BBox<T>, alpha: T) -> T {
    let (_, parts) = ciou_unchecked(pred, gt);
    parts.iou - parts.rho2 / parts.c2 - alpha * parts.v
}

/// Objectness regression target: the CIoU value clamped into [0, 1].
pub fn confidence_target<T: Scalar>(pred: &BBox<T>, gt: &BBox<T>) -> Result<T> {
    let (value, _) = ciou(pred, gt)?;
    Ok(value.max(T::zero()).min(T::one()))
}

/// CIoU value plus its gradient w.r.t. the predicted (cx, cy, w, h).
///
/// alpha is held constant during differentiation (the usual convention for
/// this loss family). At tie points of the min/max corner selections the
/// result is a subgradient; callers keep inputs away from ties.
pub fn ciou_with_grad<T: Scalar>(pred: &BBox<T>, gt: &BBox<T>) -> (T, [T; 4]) {
    let (value, parts) = ciou_unchecked(pred, gt);
    let half = T::c(0.5);
    let zero = T::zero();
    let one = T::one();

    let (px1, py1, px2, py2) = pred.corners();
    let (gx1, gy1, gx2, gy2) = gt.corners();

    // intersection term
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let overlapping = iw > zero && ih > zero;
    let inter = if overlapping { iw * ih } else { zero };
    let union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter;

    // indicator helpers for which side the min/max picked
    let d_ix1_dcx = if px1 > gx1 { one } else { zero };
    let d_ix2_dcx = if px2 < gx2 { one } else { zero };
    let d_iy1_dcy = if py1 > gy1 { one } else { zero };
    let d_iy2_dcy = if py2 < gy2 { one } else { zero };

    let (mut di_dcx, mut di_dcy, mut di_dw, mut di_dh) = (zero, zero, zero, zero);
    if overlapping {
        let diw_dcx = d_ix2_dcx - d_ix1_dcx;
        let diw_dw = half * (d_ix2_dcx + d_ix1_dcx);
        let dih_dcy = d_iy2_dcy - d_iy1_dcy;
        let dih_dh = half * (d_iy2_dcy + d_iy1_dcy);
        di_dcx = ih * diw_dcx;
        di_dcy = iw * dih_dcy;
        di_dw = ih * diw_dw;
        di_dh = iw * dih_dh;
    }
    let du_dcx = -di_dcx;
    let du_dcy = -di_dcy;
    let du_dw = pred.h - di_dw;
    let du_dh = pred.w - di_dh;
    let u2 = union * union;
    let diou = [
        (di_dcx * union - inter * du_dcx) / u2,
        (di_dcy * union - inter * du_dcy) / u2,
        (di_dw * union - inter * du_dw) / u2,
        (di_dh * union - inter * du_dh) / u2,
    ];

    // centroid distance over enclosing diagonal
    let drho2 = [
        T::c(2.0) * (pred.cx - gt.cx),
        T::c(2.0) * (pred.cy - gt.cy),
        zero,
        zero,
    ];
    let ew = px2.max(gx2) - px1.min(gx1);
    let eh = py2.max(gy2) - py1.min(gy1);
    let d_ex1_dcx = if px1 < gx1 { one } else { zero };
    let d_ex2_dcx = if px2 > gx2 { one } else { zero };
    let d_ey1_dcy = if py1 < gy1 { one } else { zero };
    let d_ey2_dcy = if py2 > gy2 { one } else { zero };
    let dew = [
        d_ex2_dcx - d_ex1_dcx,
        zero,
        half * (d_ex2_dcx + d_ex1_dcx),
        zero,
    ];
    let deh = [
        zero,
        d_ey2_dcy - d_ey1_dcy,
        zero,
        half * (d_ey2_dcy + d_ey1_dcy),
    ];
    let two = T::c(2.0);
    let c2 = parts.c2;
    let c4 = c2 * c2;
    let mut dpen = [zero; 4];
    for k in 0..4 {
        let dc2 = two * ew * dew[k] + two * eh * deh[k];
        dpen[k] = (drho2[k] * c2 - parts.rho2 * dc2) / c4;
    }

    // aspect term, alpha constant
    let four_over_pi2 = T::c(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let da = (gt.w / gt.h).atan() - (pred.w / pred.h).atan();
    let wh2 = pred.w * pred.w + pred.h * pred.h;
    let dv_dw = -four_over_pi2 * two * da * (pred.h / wh2);
    let dv_dh = four_over_pi2 * two * da * (pred.w / wh2);
    let dv = [zero, zero, dv_dw, dv_dh];

    let mut grad = [zero; 4];
    for k in 0..4 {
        grad[k] = diou[k] - dpen[k] - parts.alpha * dv[k];
    }
    (value, grad)
}

/// One scored, classified box.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub class_idx: usize,
    pub conf: T,
}

/// Greedy class-wise non-maximum suppression.
///
/// Detections at or below `conf_threshold` are dropped, the rest are
/// processed in descending confidence (ties broken by input order); a box is
/// suppressed when it overlaps an already-kept box of the same class with
/// IoU strictly above `iou_threshold`. Output is sorted by confidence.
pub fn nms<T: Scalar>(
    detections: &[Detection<T>],
    iou_threshold: T,
    conf_threshold: T,
) -> Result<Vec<Detection<T>>> {
    if !(iou_threshold > T::zero() && iou_threshold < T::one()) {
        return Err(Error::Config(format!(
            "nms iou_threshold must lie in (0,1), got {iou_threshold}"
        )));
    }
    if !(conf_threshold >= T::zero() && conf_threshold < T::one()) {
        return Err(Error::Config(format!(
            "nms conf_threshold must lie in [0,1), got {conf_threshold}"
        )));
    }
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].conf > conf_threshold)
        .collect();
    for &i in &order {
        detections[i].bbox.validate()?;
    }
    order.sort_by(|&a, &b| {
        detections[b]
            .conf
            .partial_cmp(&detections[a].conf)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection<T>> = Vec::new();
    'cand: for &i in &order {
        let d = &detections[i];
        for k in &kept {
            if k.class_idx == d.class_idx && iou_unchecked(&k.bbox, &d.bbox) > iou_threshold {
                continue 'cand;
            }
        }
        kept.push(*d);
    }
    Ok(kept)
}
