//! Dev probe: overfit the full toy config on a 16-image synthetic set and
//! print the mAP trajectory plus timing.

use bpim::data::{generate_synthetic, load_dataset, SyntheticSpec};
use bpim::model::{build, ModelConfig, ModuleFlags};
use bpim::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let dir = std::env::temp_dir().join("bpim_overfit_probe");
    let _ = std::fs::remove_dir_all(&dir);
    let spec = SyntheticSpec {
        seed: 7,
        num_images: 16,
        image_size: 64,
        ..Default::default()
    };
    generate_synthetic(&spec, &dir).unwrap();
    let ds = load_dataset::<f32>(&dir).unwrap();
    let boxes: usize = ds.items.iter().map(|i| i.boxes.len()).sum();
    println!("dataset: {} images, {} boxes", ds.items.len(), boxes);

    let cfg = ModelConfig {
        width_multiple: 0.125,
        depth_multiple: 0.2,
        num_classes: 2,
        enable: ModuleFlags::all(),
        heads: 4,
        ff_dim: 64,
        input_size: 64,
        ..Default::default()
    };
    let model = build::<f32>(&cfg, 0).unwrap();
    println!(
        "model: {:.3}M params, {:.3} GFLOPs",
        model.param_count() as f64 / 1e6,
        model.count_gflops().unwrap()
    );

    let tc = TrainConfig {
        epochs: 300,
        eval_every: 10,
        target_map50: Some(0.90),
        ..Default::default()
    };
    let t0 = Instant::now();
    let mut cb = |r: &bpim::train::EpochRecord| {
        if r.map50.is_some() || (r.epoch + 1) % 10 == 0 {
            println!(
                "epoch {:3}  loss {:.4} (box {:.4} obj {:.4} cls {:.4})  map50 {:?}  [{:.1}s]",
                r.epoch,
                r.loss.total,
                r.loss.bbox,
                r.loss.obj,
                r.loss.cls,
                r.map50,
                t0.elapsed().as_secs_f64()
            );
        }
    };
    let outcome = train(&model, &ds, Some(&ds), &tc, 0, Some(&mut cb)).unwrap();
    println!(
        "done: early_stop={} epochs={} final_loss={:.4} elapsed={:.1}s",
        outcome.stopped_early,
        outcome.records.len(),
        outcome.final_loss,
        t0.elapsed().as_secs_f64()
    );
}
