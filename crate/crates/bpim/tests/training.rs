//! End-to-end checks of assignment, loss values, gradient flow through the
//! assembled model, and training determinism.

use bpim::autograd::{Arr, Var};
use bpim::data::{generate_synthetic, load_dataset, SyntheticSpec};
use bpim::geometry::BBox;
use bpim::model::{build, LevelPrediction, ModelConfig, ModuleFlags, PredictionSet, STRIDES};
use bpim::nn::{Ctx, ParamKind};
use bpim::train::{assign_targets, loss, train, Assignment, TrainConfig};
use ndarray::IxDyn;
use tempfile::TempDir;

fn toy_config(flags: ModuleFlags) -> ModelConfig {
    ModelConfig {
        width_multiple: 0.125,
        depth_multiple: 0.2,
        num_classes: 2,
        enable: flags,
        heads: 4,
        ff_dim: 16,
        input_size: 64,
        ..Default::default()
    }
}

/// Config with exactly one matching anchor slot at level 5 (stride 32) so
/// loss values can be computed by hand.
fn single_slot_config() -> ModelConfig {
    let mut cfg = toy_config(ModuleFlags::none());
    cfg.anchors = vec![
        vec![(1000.0, 1000.0); 3],
        vec![(1000.0, 1000.0); 3],
        vec![(1000.0, 1000.0); 3],
        vec![(12.8, 12.8), (1000.0, 1000.0), (0.5, 0.5)],
    ];
    cfg
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Hand-built prediction tensors: `background_obj` objectness logits
/// everywhere, `cell_values` written at the single matched slot
/// (level 5, anchor 0, cell (1,1) of the 2x2 grid).
fn hand_preds(cfg: &ModelConfig, cell_values: [f64; 7], background_obj: f64) -> PredictionSet<f64> {
    let per_anchor = 5 + cfg.num_classes;
    let levels = STRIDES
        .iter()
        .enumerate()
        .map(|(k, &stride)| {
            let g = cfg.input_size / stride;
            let mut raw = Arr::<f64>::zeros(IxDyn(&[1, 3 * per_anchor, g, g]));
            for a in 0..3 {
                for gy in 0..g {
                    for gx in 0..g {
                        raw[[0, a * per_anchor + 4, gy, gx]] = background_obj;
                    }
                }
            }
            if stride == 32 {
                for (c, v) in cell_values.iter().enumerate() {
                    raw[[0, c, 1, 1]] = *v;
                }
            }
            LevelPrediction {
                level: k + 2,
                stride,
                raw: Var::constant(raw),
            }
        })
        .collect();
    PredictionSet { levels }
}

fn single_assignment(gt: BBox<f64>) -> Assignment {
    Assignment {
        image_idx: 0,
        level_idx: 3,
        anchor_idx: 0,
        gx: 1,
        gy: 1,
        class: 0,
        gt,
    }
}

#[test]
fn box_part_matches_geometry_oracle() {
    // pred (0.65, 0.75, 0.2, 0.2) vs gt (0.75, 0.75, 0.2, 0.2) is the
    // 10/39 CIoU configuration, so the box part is 1 - 0.256410
    let cfg = single_slot_config();
    let tc = TrainConfig::default();
    let gt = BBox::new(0.75, 0.75, 0.2, 0.2);
    let tx = logit(0.4); // decodes to cx = 0.65 at cell (1,1), stride 32
    let preds = hand_preds(&cfg, [tx, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0.0);
    let (_, parts) = loss(&preds, &[single_assignment(gt)], &cfg, &tc);
    assert!(
        (parts.bbox - (1.0 - 0.256410)).abs() < 1e-4,
        "box part {}",
        parts.bbox
    );

    // doubling the box weight exactly doubles its contribution
    let (_, base) = loss(&preds, &[single_assignment(gt)], &cfg, &tc);
    let mut tc2 = tc.clone();
    tc2.box_weight *= 2.0;
    let (_, doubled) = loss(&preds, &[single_assignment(gt)], &cfg, &tc2);
    let base_contrib = base.total - tc.box_weight * base.bbox;
    let doubled_contrib = doubled.total - tc2.box_weight * doubled.bbox;
    assert!((base.bbox - doubled.bbox).abs() < 1e-12);
    assert!((base_contrib - doubled_contrib).abs() < 1e-12);
}

#[test]
fn perfect_predictions_reach_loss_floor() {
    let cfg = single_slot_config();
    let tc = TrainConfig::default();
    let gt = BBox::new(0.75, 0.75, 0.2, 0.2); // exactly anchor-sized, centered
    let mut values = [0.0; 7];
    values[4] = 20.0; // objectness saturated correct (target 1 at the slot)
    values[5] = 20.0; // class 0 on
    values[6] = -20.0; // class 1 off
    let preds = hand_preds(&cfg, values, -20.0); // background saturated off
    let (total, parts) = loss(&preds, &[single_assignment(gt)], &cfg, &tc);
    assert!(parts.bbox.abs() < 1e-12, "box part {}", parts.bbox);
    assert!(
        total.scalar_value() <= 1e-3,
        "total {} should be at the floor",
        total.scalar_value()
    );
}

#[test]
fn no_matches_trains_objectness_only() {
    let cfg = single_slot_config();
    let tc = TrainConfig::default();
    let preds = hand_preds(&cfg, [0.0; 7], 0.0);
    let (total, parts) = loss(&preds, &[], &cfg, &tc);
    assert_eq!(parts.bbox, 0.0);
    assert_eq!(parts.cls, 0.0);
    assert!(parts.obj > 0.0);
    assert!(total.scalar_value() > 0.0);
}

fn tiny_dataset<T: bpim::Scalar>(dir: &TempDir, seed: u64, n: usize) -> bpim::data::Dataset<T> {
    let spec = SyntheticSpec {
        seed,
        num_images: n,
        image_size: 64,
        ..Default::default()
    };
    generate_synthetic(&spec, dir.path()).unwrap();
    load_dataset::<T>(dir.path()).unwrap()
}

#[test]
fn gradient_flows_to_every_parameter() {
    let dir = TempDir::new().unwrap();
    let ds = tiny_dataset::<f64>(&dir, 5, 2);
    let cfg = toy_config(ModuleFlags::all());
    let model = build::<f64>(&cfg, 13).unwrap();

    // one training-mode forward/backward on a 2-image batch
    let mut batch = Arr::<f64>::zeros(IxDyn(&[2, 3, 64, 64]));
    for (n, item) in ds.items.iter().take(2).enumerate() {
        batch.index_axis_mut(ndarray::Axis(0), n).assign(&item.image);
    }
    let gts: Vec<(usize, usize, BBox<f64>)> = ds
        .items
        .iter()
        .take(2)
        .enumerate()
        .flat_map(|(n, item)| {
            item.boxes
                .iter()
                .map(move |(c, b)| (n, *c, BBox::new(b.cx, b.cy, b.w, b.h)))
        })
        .collect();
    assert!(!gts.is_empty());
    let (assignments, _) = assign_targets(&gts, &cfg);
    assert!(!assignments.is_empty());

    let ctx = Ctx::train();
    let preds = model.forward(&Var::constant(batch), &ctx).unwrap();
    let tc = TrainConfig::default();
    let (total, _) = loss(&preds, &assignments, &cfg, &tc);
    model.zero_grad();
    total.backward();

    let mut dead = Vec::new();
    for p in model.collect_params() {
        if p.kind == ParamKind::Stat {
            continue;
        }
        match p.var.grad() {
            None => dead.push(format!("{} (no grad)", p.name)),
            Some(g) => {
                if g.iter().all(|v| *v == 0.0) {
                    dead.push(format!("{} (all-zero grad)", p.name));
                }
            }
        }
    }
    assert!(dead.is_empty(), "dead parameters:\n{}", dead.join("\n"));
}

#[test]
fn fixed_seed_training_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let ds = tiny_dataset::<f32>(&dir, 9, 8);
    let cfg = toy_config(ModuleFlags::none());
    let tc = TrainConfig {
        epochs: 1,
        warmup_epochs: 1,
        batch_size: 8,
        ..Default::default()
    };
    let mut finals = Vec::new();
    for _ in 0..2 {
        let model = build::<f32>(&cfg, 21).unwrap();
        let outcome = train(&model, &ds, None, &tc, 77, None).unwrap();
        assert_eq!(outcome.records.len(), 1);
        finals.push(outcome.final_loss);
    }
    assert!(
        (finals[0] - finals[1]).abs() <= 1e-6,
        "final losses differ: {finals:?}"
    );
}

#[test]
fn one_epoch_eight_images_batch_eight_is_one_step() {
    let dir = TempDir::new().unwrap();
    let ds = tiny_dataset::<f32>(&dir, 11, 8);
    let cfg = toy_config(ModuleFlags::none());
    let model = build::<f32>(&cfg, 3).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        warmup_epochs: 0,
        batch_size: 8,
        ..Default::default()
    };
    // one record, and the recorded lr corresponds to step 0 of the cosine
    let outcome = train(&model, &ds, None, &tc, 5, None).unwrap();
    assert_eq!(outcome.records.len(), 1);
    assert!(outcome.final_loss.is_finite());
}

#[test]
fn short_training_reduces_loss() {
    let dir = TempDir::new().unwrap();
    let ds = tiny_dataset::<f32>(&dir, 13, 8);
    let cfg = toy_config(ModuleFlags::none());
    let model = build::<f32>(&cfg, 1).unwrap();
    let tc = TrainConfig {
        epochs: 20,
        warmup_epochs: 3,
        batch_size: 8,
        ..Default::default()
    };
    let outcome = train(&model, &ds, None, &tc, 2, None).unwrap();
    let first = outcome.records.first().unwrap().loss.total;
    let last = outcome.records.last().unwrap().loss.total;
    assert!(
        last < first,
        "loss should decrease: first {first}, last {last}"
    );
}
