//! Ablation harness: train and evaluate a matrix of module-flag subsets
//! under one seed and budget, emitting a CSV report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::eval::{evaluate, EvalSettings};
use crate::model::{build, ModelConfig, ModuleFlags};
use crate::scalar::Scalar;
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: ModuleFlags,
    pub map50: f64,
    pub map5095: f64,
    pub params_m: f64,
    pub gflops: f64,
    pub final_loss: f64,
    pub epochs_run: usize,
    pub seed: u64,
}

/// Train/evaluate each flag subset from the same seed and budget.
pub fn ablate<T: Scalar>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset<T>,
    flag_matrix: &[ModuleFlags],
    seed: u64,
    mut progress: Option<&mut dyn FnMut(&AblationRow)>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(flag_matrix.len());
    for &flags in flag_matrix {
        let mut cfg = model_cfg.clone();
        cfg.enable = flags;
        let model = build::<T>(&cfg, seed)?;
        let outcome = train(&model, dataset, Some(dataset), train_cfg, seed, None)?;
        let result = evaluate(&model, dataset, &EvalSettings::default())?;
        let row = AblationRow {
            flags,
            map50: result.map50,
            map5095: result.map5095,
            params_m: result.params_m,
            gflops: result.gflops,
            final_loss: outcome.final_loss,
            epochs_run: outcome.records.len(),
            seed,
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&row);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Table-shaped CSV: one toggle column per module, then metrics.
pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("big,awf,pig,csf,map50,map5095,params_m,gflops,final_loss,epochs,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.flags.big as u8,
            r.flags.awf as u8,
            r.flags.pig as u8,
            r.flags.csf_tff as u8,
            r.map50,
            r.map5095,
            r.params_m,
            r.gflops,
            r.final_loss,
            r.epochs_run,
            r.seed,
        ));
    }
    out
}

pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(rows))?;
    Ok(())
}
