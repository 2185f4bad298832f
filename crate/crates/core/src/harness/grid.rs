use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{ensure, Result};
use crate::mining::{ensemble_score, training_samples, PseudoLabelSet};
use crate::model::{self, Classifier, TrainConfig};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub batch_size: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_lr: f64,
    pub best_batch: usize,
    /// Row-major over `lr_grid × batch_grid`.
    pub table: Vec<GridCell>,
}

/// Evaluates every cell and returns the most accurate one; ties go to the
/// lower learning rate, then the lower batch size.
pub fn grid_search_with(
    lr_grid: &[f64],
    batch_grid: &[usize],
    mut evaluate: impl FnMut(f64, usize) -> Result<f64>,
) -> Result<GridResult> {
    ensure(!lr_grid.is_empty() && !batch_grid.is_empty(), || "grids must be non-empty".into())?;
    let mut table = Vec::with_capacity(lr_grid.len() * batch_grid.len());
    for &lr in lr_grid {
        for &batch_size in batch_grid {
            table.push(GridCell { lr, batch_size, val_accuracy: evaluate(lr, batch_size)? });
        }
    }
    let mut best = &table[0];
    for cell in &table[1..] {
        let better = cell.val_accuracy > best.val_accuracy
            || (cell.val_accuracy == best.val_accuracy
                && (cell.lr < best.lr || (cell.lr == best.lr && cell.batch_size < best.batch_size)));
        if better {
            best = cell;
        }
    }
    Ok(GridResult { best_lr: best.lr, best_batch: best.batch_size, table })
}

/// Trains one model per cell on `labeled_train` from the same seeded start
/// and scores it on validation.
pub fn grid_search(
    lr_grid: &[f64],
    batch_grid: &[usize],
    bundle: &DatasetBundle,
    base_cfg: &TrainConfig,
) -> Result<GridResult> {
    let c = bundle.num_inclass_classes;
    let data = training_samples(&bundle.labeled_train, &[], &PseudoLabelSet::new(), c, base_cfg.label_smooth_eps)?;
    let start = Classifier::init(c, seed::derive(base_cfg.seed, "init", 0))?;
    grid_search_with(lr_grid, batch_grid, |lr, batch_size| {
        let cfg = TrainConfig { base_lr: lr, batch_size, ..base_cfg.clone() };
        let trained = model::train(&start, &data, &cfg)?.model;
        Ok(ensemble_score(&[trained], &bundle.validation)?.per_model[0])
    })
}
