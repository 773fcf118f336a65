//! COCO-style detection evaluation: greedy confidence-ordered matching,
//! 101-point interpolated average precision per class, and the
//! mAP@.5 / mAP@.5:.95 summary plus model cost statistics.

use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Arr, Var};
use crate::data::Dataset;
use crate::error::Result;
use crate::geometry::{iou, nms, BBox, Detection};
use crate::model::Model;
use crate::nn::Ctx;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Decode/NMS confidence floor. Low by default so the PR curve keeps
    /// its tail; detection rendering uses a higher operating point.
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            conf_threshold: 1e-3,
            nms_iou: crate::geometry::DEFAULT_NMS_IOU,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub map50: f64,
    pub map5095: f64,
    /// AP at IoU 0.5 per class; absent classes (no ground truth) excluded.
    pub per_class_ap: Vec<(String, f64)>,
    pub params_m: f64,
    pub gflops: f64,
}

/// Detections and ground truth for one image, in a shared frame.
pub struct ImageEval<T: Scalar> {
    pub dets: Vec<Detection<T>>,
    pub gts: Vec<(usize, BBox<T>)>,
}

/// The ten evaluation thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// 101-point interpolated AP from (confidence, is-true-positive) records.
pub fn average_precision_101(scored: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut scored = scored.to_vec();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(scored.len()); // (recall, precision)
    for (rank, (_conf, is_tp)) in scored.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        points.push((
            tp as f64 / num_gt as f64,
            tp as f64 / (rank + 1) as f64,
        ));
    }
    let mut ap = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(recall, _)| *recall >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p;
    }
    ap / 101.0
}

/// Greedy per-image matching at one IoU threshold: detections in descending
/// confidence claim the unmatched same-class ground truth of highest IoU.
/// Returns per-class (confidence, tp) records and per-class gt counts.
pub fn match_at_threshold<T: Scalar>(
    images: &[ImageEval<T>],
    num_classes: usize,
    iou_threshold: f64,
) -> (Vec<Vec<(f64, bool)>>, Vec<usize>) {
    let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_classes];
    let mut gt_counts = vec![0usize; num_classes];
    for img in images {
        for (c, _) in &img.gts {
            gt_counts[*c] += 1;
        }
        let mut order: Vec<usize> = (0..img.dets.len()).collect();
        order.sort_by(|&a, &b| {
            img.dets[b]
                .conf
                .partial_cmp(&img.dets[a].conf)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut taken = vec![false; img.gts.len()];
        for &di in &order {
            let det = &img.dets[di];
            if det.class_idx >= num_classes {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (gi, (gc, gb)) in img.gts.iter().enumerate() {
                if taken[gi] || *gc != det.class_idx {
                    continue;
                }
                let olap = iou(&det.bbox, gb).map(|v| v.to_f64_lossy()).unwrap_or(0.0);
                if olap >= iou_threshold && best.map(|(_, b)| olap > b).unwrap_or(true) {
                    best = Some((gi, olap));
                }
            }
            let tp = match best {
                Some((gi, _)) => {
                    taken[gi] = true;
                    true
                }
                None => false,
            };
            scored[det.class_idx].push((det.conf.to_f64_lossy(), tp));
        }
    }
    (scored, gt_counts)
}

/// Mean AP over classes that have ground truth, at one threshold. Also
/// returns the per-class APs (None for classes with no ground truth).
pub fn map_at_threshold<T: Scalar>(
    images: &[ImageEval<T>],
    num_classes: usize,
    iou_threshold: f64,
) -> (f64, Vec<Option<f64>>) {
    let (scored, gt_counts) = match_at_threshold(images, num_classes, iou_threshold);
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            (gt_counts[c] > 0).then(|| average_precision_101(&scored[c], gt_counts[c]))
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (map, per_class)
}

/// Run the model over the dataset and score it.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    settings: &EvalSettings,
) -> Result<EvalResult> {
    let input = model.config.input_size;
    let mut images: Vec<ImageEval<T>> = Vec::with_capacity(dataset.items.len());
    let ctx = Ctx::eval();
    let conf_t = T::c(settings.conf_threshold);
    let nms_iou_t = T::c(settings.nms_iou);

    let mut pending: Vec<(Arr<T>, crate::data::LetterboxTransform, usize)> = Vec::new();
    for (idx, item) in dataset.items.iter().enumerate() {
        let (img, tf) = crate::data::letterbox(&item.image, input)?;
        pending.push((img, tf, idx));
    }
    for chunk in pending.chunks(settings.batch_size.max(1)) {
        let mut batch = Arr::zeros(ndarray::IxDyn(&[chunk.len(), 3, input, input]));
        for (n, (img, _, _)) in chunk.iter().enumerate() {
            batch.index_axis_mut(ndarray::Axis(0), n).assign(img);
        }
        let guard = no_grad();
        let preds = model.forward(&Var::constant(batch), &ctx)?;
        drop(guard);
        let decoded = model.decode(&preds, conf_t);
        for (n, (_, tf, idx)) in chunk.iter().enumerate() {
            let kept = nms(&decoded[n], nms_iou_t, conf_t)?;
            // map detections back into the original image frame
            let dets = kept
                .into_iter()
                .map(|d| Detection {
                    bbox: tf.invert(&d.bbox),
                    ..d
                })
                .collect();
            images.push(ImageEval {
                dets,
                gts: dataset.items[*idx].boxes.clone(),
            });
        }
    }

    let nc = dataset.num_classes().max(model.config.num_classes);
    let thresholds = coco_thresholds();
    let mut maps = Vec::with_capacity(thresholds.len());
    let mut per_class_50: Vec<Option<f64>> = Vec::new();
    for (k, &t) in thresholds.iter().enumerate() {
        let (m, per_class) = map_at_threshold(&images, nc, t);
        if k == 0 {
            per_class_50 = per_class;
        }
        maps.push(m);
    }
    let map50 = maps[0];
    let map5095 = maps.iter().sum::<f64>() / maps.len() as f64;

    let per_class_ap = per_class_50
        .iter()
        .enumerate()
        .filter_map(|(c, ap)| {
            ap.map(|v| {
                let name = dataset
                    .class_names
                    .get(c)
                    .cloned()
                    .unwrap_or_else(|| format!("class{c}"));
                (name, v)
            })
        })
        .collect();

    Ok(EvalResult {
        map50,
        map5095,
        per_class_ap,
        params_m: model.param_count() as f64 / 1e6,
        gflops: model.count_gflops()?,
    })
}
