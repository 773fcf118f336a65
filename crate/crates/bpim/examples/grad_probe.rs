//! Dev probe: finite-difference check of the full training loss w.r.t.
//! sampled parameters, and a box-only overfit of a single batch.

use bpim::autograd::{check, Arr, Var};
use bpim::data::{generate_synthetic, load_dataset, SyntheticSpec};
use bpim::geometry::BBox;
use bpim::model::{build, ModelConfig, ModuleFlags};
use bpim::nn::{Ctx, ParamKind};
use bpim::train::{assign_targets, loss, Schedule, Sgd, TrainConfig};
use ndarray::IxDyn;

fn main() {
    let dir = std::env::temp_dir().join("bpim_grad_probe");
    let _ = std::fs::remove_dir_all(&dir);
    let spec = SyntheticSpec {
        seed: 7,
        num_images: 2,
        image_size: 64,
        ..Default::default()
    };
    generate_synthetic(&spec, &dir).unwrap();
    let ds = load_dataset::<f64>(&dir).unwrap();

    let cfg = ModelConfig {
        width_multiple: 0.125,
        depth_multiple: 0.2,
        num_classes: 2,
        enable: ModuleFlags::none(),
        heads: 4,
        ff_dim: 16,
        input_size: 64,
        ..Default::default()
    };
    let model = build::<f64>(&cfg, 0).unwrap();
    let tc = TrainConfig::default();

    let mut batch = Arr::<f64>::zeros(IxDyn(&[2, 3, 64, 64]));
    for (n, item) in ds.items.iter().enumerate() {
        batch.index_axis_mut(ndarray::Axis(0), n).assign(&item.image);
    }
    let gts: Vec<(usize, usize, BBox<f64>)> = ds
        .items
        .iter()
        .enumerate()
        .flat_map(|(n, i)| i.boxes.iter().map(move |(c, b)| (n, *c, *b)))
        .collect();
    let (assignments, _) = assign_targets(&gts, &cfg);
    println!("{} gts -> {} assignments", gts.len(), assignments.len());

    let images = Var::constant(batch);
    let eval_loss = || {
        let ctx = Ctx::eval();
        let preds = model.forward(&images, &ctx).unwrap();
        loss(&preds, &assignments, &cfg, &tc).0
    };

    // sample a few parameters across the model, including a head
    let params = model.collect_params();
    for name_frag in ["head2.w", "head5.b", "backbone.stem", "neck.td2"] {
        let p = params
            .iter()
            .find(|p| p.name.contains(name_frag) && p.kind != ParamKind::Stat)
            .unwrap();
        let len = p.var.value().len();
        let idx = check::sample_indices(len, 6, 42);
        let worst = check::assert_sampled_param_grad(&p.var, eval_loss, &idx, 1e-6, 1e-3);
        println!("{}: worst rel err {:.2e}", p.name, worst);
    }

    // box-only training dynamics on one batch
    let tc_box = TrainConfig {
        box_weight: 1.0,
        obj_weight: 0.0,
        cls_weight: 0.0,
        ..Default::default()
    };
    let schedule = Schedule::new(&tc_box, 1);
    let mut opt = Sgd::new(model.collect_params(), tc_box.weight_decay);
    for step in 0..600 {
        let ctx = Ctx::train();
        let preds = model.forward(&images, &ctx).unwrap();
        let (total, parts) = loss(&preds, &assignments, &cfg, &tc_box);
        if step % 100 == 0 {
            println!("step {:3} box loss {:.4}", step, parts.bbox);
        }
        opt.zero_grad();
        total.backward();
        opt.step(&schedule);
    }
}
