//! ROC/AUC evaluation, macro reports and gradient-weighted saliency maps.

mod auc;
mod report;
mod saliency;

pub use auc::{auc_pairwise, roc_points, trapezoid_area, write_roc_csv, RocCurve, TieMode};
pub use report::{macro_report, subset_report, AucReport, ClassAuc};
pub use saliency::{gradcam_from_gradients, gradcam_saliency, SaliencyMap};

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::Result;
use crate::model::HydraVit;

/// Inference scores for every sample, `[sample][class]`, in dataset order.
pub fn score_dataset(model: &HydraVit, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset
        .samples
        .par_iter()
        .map(|s| Ok(model.forward(&s.image)?.outputs.scores(&model.weights)))
        .collect()
}

/// Transposes `[sample][class]` scores into per-class columns.
pub fn score_columns(scores: &[Vec<f64>], classes: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| scores.iter().map(|row| row[c]).collect())
        .collect()
}

pub fn evaluate_dataset(model: &HydraVit, dataset: &Dataset, mode: TieMode) -> Result<AucReport> {
    let scores = score_dataset(model, dataset)?;
    macro_report(
        &dataset.class_names,
        &score_columns(&scores, dataset.classes()),
        &dataset.label_columns(),
        mode,
    )
}
