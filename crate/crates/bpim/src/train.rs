//! Target assignment, the composite detection loss, the SGD schedule with
//! linear warmup and cosine decay, and the training loop.

use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ops, Arr, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSettings};
use crate::geometry::{ciou_with_grad, BBox};
use crate::model::{Model, ModelConfig, PredictionSet, ANCHORS_PER_CELL, STRIDES};
use crate::nn::{Ctx, ParamEntry, ParamKind};
use crate::scalar::Scalar;

fn default_lr0() -> f64 {
    0.01
}
fn default_wd() -> f64 {
    0.0005
}
fn default_momentum() -> f64 {
    0.9
}
fn default_warmup_epochs() -> usize {
    3
}
fn default_warmup_bias_lr() -> f64 {
    0.1
}
fn default_warmup_momentum() -> f64 {
    0.8
}
fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    300
}
fn default_box_weight() -> f64 {
    0.05
}
fn default_obj_weight() -> f64 {
    1.0
}
fn default_cls_weight() -> f64 {
    0.5
}
fn default_balance() -> [f64; 4] {
    [4.0, 1.0, 0.4, 0.1]
}
fn default_final_lr_fraction() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "default_warmup_bias_lr")]
    pub warmup_bias_lr: f64,
    #[serde(default = "default_warmup_momentum")]
    pub warmup_momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Loss part weights.
    #[serde(default = "default_box_weight")]
    pub box_weight: f64,
    #[serde(default = "default_obj_weight")]
    pub obj_weight: f64,
    #[serde(default = "default_cls_weight")]
    pub cls_weight: f64,
    /// Objectness emphasis per level (P2 first).
    #[serde(default = "default_balance")]
    pub obj_level_balance: [f64; 4],
    /// Cosine decay target as a fraction of lr0.
    #[serde(default = "default_final_lr_fraction")]
    pub final_lr_fraction: f64,
    /// Horizontal-flip augmentation probability 0.5 when set.
    #[serde(default)]
    pub hflip: bool,
    /// Evaluate every this many epochs (0 = never during training).
    #[serde(default)]
    pub eval_every: usize,
    /// Stop once mAP@.5 on the eval split reaches this value.
    #[serde(default)]
    pub target_map50: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.momentum > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("rates must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(
                "warmup_epochs must not exceed epochs".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// target assignment
// ---------------------------------------------------------------------------

/// One (anchor, cell) slot responsible for a ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub image_idx: usize,
    pub level_idx: usize,
    pub anchor_idx: usize,
    pub gx: usize,
    pub gy: usize,
    pub class: usize,
    /// Ground truth, normalized to the input frame.
    pub gt: BBox<f64>,
}

/// Anchor-ratio limit: a box matches an anchor when no side ratio exceeds 4.
pub const ANCHOR_RATIO_LIMIT: f64 = 4.0;

/// Match every ground truth to anchors whose w/h ratios are within
/// [1/4, 4] at each level, at the center cell plus the horizontally and
/// vertically nearest neighbor cells. Returns the slots and the count of
/// ground truths that matched nothing.
pub fn assign_targets(
    gts: &[(usize, usize, BBox<f64>)],
    config: &ModelConfig,
) -> (Vec<Assignment>, usize) {
    let img = config.input_size as f64;
    let mut out = Vec::new();
    let mut unmatched = 0usize;
    for &(image_idx, class, gt) in gts {
        let mut hit = false;
        for (level_idx, &stride) in STRIDES.iter().enumerate() {
            let grid = config.input_size / stride;
            let cx = gt.cx * grid as f64;
            let cy = gt.cy * grid as f64;
            let gx = (cx.floor() as isize).clamp(0, grid as isize - 1);
            let gy = (cy.floor() as isize).clamp(0, grid as isize - 1);
            let fx = cx - gx as f64;
            let fy = cy - gy as f64;
            let mut cells = vec![(gx, gy)];
            if fx < 0.5 && cx > 1.0 {
                cells.push((gx - 1, gy));
            } else if fx > 0.5 && cx < grid as f64 - 1.0 {
                cells.push((gx + 1, gy));
            }
            if fy < 0.5 && cy > 1.0 {
                cells.push((gx, gy - 1));
            } else if fy > 0.5 && cy < grid as f64 - 1.0 {
                cells.push((gx, gy + 1));
            }
            for (anchor_idx, &(aw, ah)) in config.anchors[level_idx].iter().enumerate() {
                let (aw, ah) = (aw / img, ah / img);
                let ratio = (gt.w / aw)
                    .max(aw / gt.w)
                    .max(gt.h / ah)
                    .max(ah / gt.h);
                if ratio >= ANCHOR_RATIO_LIMIT {
                    continue;
                }
                hit = true;
                for &(cgx, cgy) in &cells {
                    if cgx < 0 || cgy < 0 || cgx >= grid as isize || cgy >= grid as isize {
                        continue;
                    }
                    out.push(Assignment {
                        image_idx,
                        level_idx,
                        anchor_idx,
                        gx: cgx as usize,
                        gy: cgy as usize,
                        class,
                        gt,
                    });
                }
            }
        }
        if !hit {
            unmatched += 1;
        }
    }
    (out, unmatched)
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// CIoU of predicted box rows [m, 4] against constant ground truths, with
/// the analytic gradient (trade-off weight held fixed) as the backward.
fn ciou_rows<T: Scalar>(pred: &Var<T>, gts: &[BBox<f64>]) -> Var<T> {
    let m = gts.len();
    assert_eq!(pred.shape(), vec![m, 4]);
    let gts = gts.to_vec();
    let pv = pred.to_array();
    let mut value = Arr::zeros(IxDyn(&[m]));
    let mut grads = Arr::<T>::zeros(IxDyn(&[m, 4]));
    for (r, gt) in gts.iter().enumerate() {
        let pb = BBox::new(
            pv[[r, 0]].to_f64_lossy(),
            pv[[r, 1]].to_f64_lossy(),
            pv[[r, 2]].to_f64_lossy().max(1e-9),
            pv[[r, 3]].to_f64_lossy().max(1e-9),
        );
        let (v, g) = ciou_with_grad(&pb, gt);
        value[[r]] = T::c(v);
        for k in 0..4 {
            grads[[r, k]] = T::c(g[k]);
        }
    }
    Var::from_op(value, vec![pred.clone()], move |g, _| {
        let mut out = grads.clone();
        for r in 0..m {
            for k in 0..4 {
                out[[r, k] ] = out[[r, k]] * g[[r]];
            }
        }
        vec![Some(out)]
    })
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
}

/// Composite loss: mean(1 - CIoU) over matched slots, objectness BCE over
/// every cell against clamped-CIoU targets, class BCE over matched slots.
pub fn loss<T: Scalar>(
    preds: &PredictionSet<T>,
    assignments: &[Assignment],
    config: &ModelConfig,
    tc: &TrainConfig,
) -> (Var<T>, LossParts) {
    let nc = config.num_classes;
    let per_anchor = 5 + nc;
    let img = config.input_size as f64;

    let mut box_terms: Vec<Var<T>> = Vec::new();
    let mut cls_terms: Vec<Var<T>> = Vec::new();
    let mut obj_total: Option<Var<T>> = None;

    for (level_idx, lp) in preds.levels.iter().enumerate() {
        let shape = lp.raw.shape();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let rows_n = n * ANCHORS_PER_CELL * h * w;
        // [n, a*(5+nc), h, w] -> [n, a, 5+nc, h, w] -> [n, a, h, w, 5+nc]
        let r5 = ops::reshape(&lp.raw, &[n, ANCHORS_PER_CELL, per_anchor, h, w]);
        let rows = ops::reshape(&ops::permute(&r5, &[0, 1, 3, 4, 2]), &[rows_n, per_anchor]);

        let matched: Vec<&Assignment> = assignments
            .iter()
            .filter(|a| a.level_idx == level_idx)
            .collect();

        let mut obj_targets = Arr::<T>::zeros(IxDyn(&[rows_n, 1]));
        if !matched.is_empty() {
            let idx: Vec<usize> = matched
                .iter()
                .map(|a| ((a.image_idx * ANCHORS_PER_CELL + a.anchor_idx) * h + a.gy) * w + a.gx)
                .collect();
            let gathered = ops::gather_rows(&rows, &idx);
            let m = matched.len();

            // decode: xy = (2*sig(t) - 0.5 + cell) * stride / img
            let stride = lp.stride as f64;
            let mut grid = Arr::<T>::zeros(IxDyn(&[m, 2]));
            let mut anchor = Arr::<T>::zeros(IxDyn(&[m, 2]));
            for (r, a) in matched.iter().enumerate() {
                grid[[r, 0]] = T::c(a.gx as f64);
                grid[[r, 1]] = T::c(a.gy as f64);
                let (aw, ah) = config.anchors[level_idx][a.anchor_idx];
                anchor[[r, 0]] = T::c(aw / img);
                anchor[[r, 1]] = T::c(ah / img);
            }
            let txy = ops::narrow(&gathered, 1, 0, 2);
            let xy = ops::scale(
                &ops::add_const(
                    &ops::add_scalar(&ops::scale(&ops::sigmoid(&txy), T::c(2.0)), T::c(-0.5)),
                    grid,
                ),
                T::c(stride / img),
            );
            let twh = ops::narrow(&gathered, 1, 2, 2);
            let sw = ops::scale(&ops::sigmoid(&twh), T::c(2.0));
            let wh = ops::mul_const(&ops::mul(&sw, &sw), anchor);
            let boxes = ops::concat(1, &[xy, wh]);

            let gt_boxes: Vec<BBox<f64>> = matched.iter().map(|a| a.gt).collect();
            let ciou = ciou_rows(&boxes, &gt_boxes);
            // box term: mean(1 - ciou)
            box_terms.push(ops::add_scalar(
                &ops::scale(&ops::mean_all(&ciou), T::c(-1.0)),
                T::one(),
            ));

            // objectness targets at matched slots: clamped detached ciou
            {
                let cv = ciou.value();
                for (r, &row) in idx.iter().enumerate() {
                    let t = cv[[r]].to_f64_lossy().clamp(0.0, 1.0);
                    obj_targets[[row, 0]] = T::c(t);
                }
            }

            // class term
            if nc > 0 {
                let logits = ops::narrow(&gathered, 1, 5, nc);
                let mut onehot = Arr::<T>::zeros(IxDyn(&[m, nc]));
                for (r, a) in matched.iter().enumerate() {
                    onehot[[r, a.class]] = T::one();
                }
                cls_terms.push(ops::mean_all(&ops::bce_with_logits(&logits, onehot)));
            }
        }

        let obj_logits = ops::narrow(&rows, 1, 4, 1);
        let obj_level = ops::scale(
            &ops::mean_all(&ops::bce_with_logits(&obj_logits, obj_targets)),
            T::c(tc.obj_level_balance[level_idx]),
        );
        obj_total = Some(match obj_total {
            Some(acc) => ops::add(&acc, &obj_level),
            None => obj_level,
        });
    }

    let zero = || Var::scalar(T::zero());
    let sum_terms = |terms: &[Var<T>]| -> Var<T> {
        match terms.len() {
            0 => zero(),
            _ => {
                let mut acc = terms[0].clone();
                for t in &terms[1..] {
                    acc = ops::add(&acc, t);
                }
                acc
            }
        }
    };
    let box_loss = sum_terms(&box_terms);
    let cls_loss = sum_terms(&cls_terms);
    let obj_loss = obj_total.expect("at least one level");

    let total = ops::add(
        &ops::add(
            &ops::scale(&box_loss, T::c(tc.box_weight)),
            &ops::scale(&obj_loss, T::c(tc.obj_weight)),
        ),
        &ops::scale(&cls_loss, T::c(tc.cls_weight)),
    );
    let parts = LossParts {
        total: total.scalar_value().to_f64_lossy(),
        bbox: box_loss.scalar_value().to_f64_lossy(),
        obj: obj_loss.scalar_value().to_f64_lossy(),
        cls: cls_loss.scalar_value().to_f64_lossy(),
    };
    (total, parts)
}

// ---------------------------------------------------------------------------
// optimizer & schedule
// ---------------------------------------------------------------------------

/// Learning-rate/momentum schedule: linear warmup per group, then cosine
/// decay of the base rate down to `lr0 * final_lr_fraction`.
pub struct Schedule {
    pub lr0: f64,
    pub final_fraction: f64,
    pub warmup_steps: usize,
    pub warmup_bias_lr: f64,
    pub warmup_momentum: f64,
    pub momentum: f64,
    pub steps_per_epoch: usize,
    pub epochs: usize,
}

impl Schedule {
    pub fn new(tc: &TrainConfig, steps_per_epoch: usize) -> Self {
        Schedule {
            lr0: tc.lr0,
            final_fraction: tc.final_lr_fraction,
            warmup_steps: tc.warmup_epochs * steps_per_epoch,
            warmup_bias_lr: tc.warmup_bias_lr,
            warmup_momentum: tc.warmup_momentum,
            momentum: tc.momentum,
            steps_per_epoch: steps_per_epoch.max(1),
            epochs: tc.epochs,
        }
    }

    /// Cosine factor applied to lr0 for a given epoch.
    fn lr_factor(&self, epoch: usize) -> f64 {
        let t = (epoch as f64 / self.epochs as f64).min(1.0);
        self.final_fraction
            + (1.0 - self.final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn lr(&self, step: usize, kind: ParamKind) -> f64 {
        let epoch = step / self.steps_per_epoch;
        let target = self.lr0 * self.lr_factor(epoch);
        if step < self.warmup_steps && self.warmup_steps > 0 {
            let x = step as f64 / self.warmup_steps as f64;
            let start = match kind {
                ParamKind::Bias => self.warmup_bias_lr,
                _ => 0.0,
            };
            start + (target - start) * x
        } else {
            target
        }
    }

    pub fn momentum_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps && self.warmup_steps > 0 {
            let x = step as f64 / self.warmup_steps as f64;
            self.warmup_momentum + (self.momentum - self.warmup_momentum) * x
        } else {
            self.momentum
        }
    }
}

/// Plain SGD with momentum; weight decay applies to Weight tensors only.
pub struct Sgd<T: Scalar> {
    params: Vec<(ParamEntry<T>, Arr<T>)>,
    pub weight_decay: f64,
    pub step_count: usize,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(entries: Vec<ParamEntry<T>>, weight_decay: f64) -> Self {
        Sgd {
            params: entries
                .into_iter()
                .filter(|e| e.kind != ParamKind::Stat)
                .map(|e| {
                    let z = Arr::zeros(IxDyn(&e.var.shape()));
                    (e, z)
                })
                .collect(),
            weight_decay,
            step_count: 0,
        }
    }

    pub fn zero_grad(&self) {
        for (e, _) in &self.params {
            e.var.zero_grad();
        }
    }

    pub fn step(&mut self, schedule: &Schedule) {
        let mu = T::c(schedule.momentum_at(self.step_count));
        for (e, velocity) in self.params.iter_mut() {
            let Some(grad) = e.var.grad() else { continue };
            let lr = T::c(schedule.lr(self.step_count, e.kind));
            let wd = if e.kind == ParamKind::Weight {
                T::c(self.weight_decay)
            } else {
                T::zero()
            };
            e.var.update_value(|w| {
                ndarray::Zip::from(&mut *velocity)
                    .and(&grad)
                    .and(&*w)
                    .for_each(|v, &g, &wv| {
                        *v = mu * *v + (g + wd * wv);
                    });
                w.zip_mut_with(velocity, |wv, &v| *wv -= lr * v);
            });
        }
        self.step_count += 1;
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub map50: Option<f64>,
    pub map5095: Option<f64>,
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub final_loss: f64,
    pub stopped_early: bool,
}

/// Letterboxed image + transformed ground truth, ready for batching.
struct PreparedItem<T: Scalar> {
    image: Arr<T>,
    boxes: Vec<(usize, BBox<f64>)>,
}

fn prepare<T: Scalar>(dataset: &Dataset<T>, input_size: usize) -> Result<Vec<PreparedItem<T>>> {
    dataset
        .items
        .iter()
        .map(|item| {
            let (image, tf) = crate::data::letterbox(&item.image, input_size)?;
            let boxes = item
                .boxes
                .iter()
                .map(|(c, b)| {
                    let b64 = BBox::new(
                        b.cx.to_f64_lossy(),
                        b.cy.to_f64_lossy(),
                        b.w.to_f64_lossy(),
                        b.h.to_f64_lossy(),
                    );
                    (*c, tf.apply(&b64))
                })
                .collect();
            Ok(PreparedItem { image, boxes })
        })
        .collect()
}

fn stack_batch<T: Scalar>(items: &[&PreparedItem<T>], input_size: usize) -> Arr<T> {
    let mut out = Arr::zeros(IxDyn(&[items.len(), 3, input_size, input_size]));
    for (n, item) in items.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), n).assign(&item.image);
    }
    out
}

/// Train in place. Deterministic for a fixed seed: batch order, flips and
/// every numeric step replay identically.
pub fn train<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    eval_on: Option<&Dataset<T>>,
    tc: &TrainConfig,
    seed: u64,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if dataset.items.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    let input = model.config.input_size;
    let prepared = prepare(dataset, input)?;
    let steps_per_epoch = prepared.len().div_ceil(tc.batch_size);
    let schedule = Schedule::new(tc, steps_per_epoch);
    let mut opt = Sgd::new(model.collect_params(), tc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut records = Vec::new();
    let mut stopped_early = false;
    let mut final_loss = f64::NAN;

    'epochs: for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_parts = LossParts::default();
        let mut batches = 0usize;

        for chunk in order.chunks(tc.batch_size) {
            let flip_mask: Vec<bool> = chunk
                .iter()
                .map(|_| tc.hflip && rng.random_bool(0.5))
                .collect();
            let mut batch_items: Vec<PreparedItem<T>> = Vec::with_capacity(chunk.len());
            for (&i, &flip) in chunk.iter().zip(&flip_mask) {
                if flip {
                    let mut image = prepared[i].image.clone();
                    image.invert_axis(ndarray::Axis(2));
                    let boxes = prepared[i]
                        .boxes
                        .iter()
                        .map(|(c, b)| (*c, BBox::new(1.0 - b.cx, b.cy, b.w, b.h)))
                        .collect();
                    batch_items.push(PreparedItem { image, boxes });
                } else {
                    batch_items.push(PreparedItem {
                        image: prepared[i].image.clone(),
                        boxes: prepared[i].boxes.clone(),
                    });
                }
            }
            let refs: Vec<&PreparedItem<T>> = batch_items.iter().collect();
            let images = Var::constant(stack_batch(&refs, input));
            let gts: Vec<(usize, usize, BBox<f64>)> = refs
                .iter()
                .enumerate()
                .flat_map(|(n, item)| {
                    item.boxes.iter().map(move |(c, b)| (n, *c, *b))
                })
                .collect();
            let (assignments, _) = assign_targets(&gts, &model.config);

            let ctx = Ctx::train();
            let preds = model.forward(&images, &ctx)?;
            let (total, parts) = loss(&preds, &assignments, &model.config, tc);
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("non-finite loss {:?}", parts),
                });
            }
            opt.zero_grad();
            total.backward();
            opt.step(&schedule);

            epoch_parts.total += parts.total;
            epoch_parts.bbox += parts.bbox;
            epoch_parts.obj += parts.obj;
            epoch_parts.cls += parts.cls;
            batches += 1;
        }

        let inv = 1.0 / batches.max(1) as f64;
        let mean_parts = LossParts {
            total: epoch_parts.total * inv,
            bbox: epoch_parts.bbox * inv,
            obj: epoch_parts.obj * inv,
            cls: epoch_parts.cls * inv,
        };
        final_loss = mean_parts.total;

        let should_eval = eval_on.is_some()
            && tc.eval_every > 0
            && ((epoch + 1) % tc.eval_every == 0 || epoch + 1 == tc.epochs);
        let (map50, map5095) = if should_eval {
            let result = evaluate(model, eval_on.unwrap(), &EvalSettings::default())?;
            (Some(result.map50), Some(result.map5095))
        } else {
            (None, None)
        };

        let record = EpochRecord {
            epoch,
            lr: schedule.lr(opt.step_count.saturating_sub(1), ParamKind::Weight),
            loss: mean_parts,
            map50,
            map5095,
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&record);
        }
        records.push(record);

        if let (Some(target), Some(m)) = (tc.target_map50, map50) {
            if m >= target {
                stopped_early = true;
                break 'epochs;
            }
        }
    }

    Ok(TrainOutcome {
        records,
        final_loss,
        stopped_early,
    })
}
