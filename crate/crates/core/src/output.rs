//! Multi-branch output module: one logistic scalar per label, one logistic
//! C-vector aggregated across labels, and the learnable branch weights.

use std::io::Write;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{self, ParamMut, ParamRef, Parameters};

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Learnable weights `w_1..w_C`, `w_A` and the consistency scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    pub w: Array1<f64>,
    pub w_aggregate: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl AdaptiveWeights {
    /// `w_c = w_A = 1` with the given scales.
    pub fn uniform(classes: usize, alpha: f64, beta: f64) -> Self {
        Self {
            w: Array1::ones(classes),
            w_aggregate: 1.0,
            alpha,
            beta,
        }
    }

    pub fn classes(&self) -> usize {
        self.w.len()
    }
}

/// `w_c = N / (C * N_c)`, `w_A = 1 / (C + 1)`, `alpha, beta ~ U[0, 5]`.
pub fn init_adaptive_weights<R: Rng + ?Sized>(
    class_counts: &[usize],
    total: usize,
    rng: &mut R,
) -> Result<AdaptiveWeights> {
    let classes = class_counts.len();
    if classes == 0 {
        return Err(Error::Initialization("at least one class is required".into()));
    }
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::Initialization(format!(
            "class {c} has no training samples; drop the class or floor its count before initializing"
        )));
    }
    let n = total as f64;
    let w = class_counts
        .iter()
        .map(|&nc| n / (classes as f64 * nc as f64))
        .collect();
    Ok(AdaptiveWeights {
        w,
        w_aggregate: 1.0 / (classes as f64 + 1.0),
        alpha: rng.random_range(0.0..=5.0),
        beta: rng.random_range(0.0..=5.0),
    })
}

impl Parameters for AdaptiveWeights {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            params::view("w", &self.w),
            params::scalar("w_aggregate", &self.w_aggregate),
            params::scalar("alpha", &self.alpha),
            params::scalar("beta", &self.beta),
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            params::view_mut("w", &mut self.w),
            params::scalar_mut("w_aggregate", &mut self.w_aggregate),
            params::scalar_mut("alpha", &mut self.alpha),
            params::scalar_mut("beta", &mut self.beta),
        ]
    }
}

/// `logits = weight . x + bias`; each output row is its own head.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `[outputs, inputs]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn new<R: Rng + ?Sized>(outputs: usize, inputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || rng.random_range(-bound..bound)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.inputs() {
            return Err(Error::Dimension(format!(
                "head expects input width {}, got {}",
                self.inputs(),
                x.len()
            )));
        }
        Ok(self.weight.dot(x) + &self.bias)
    }

    /// Accumulates gradients and returns `d/dx`.
    pub fn backward(&self, x: &Array1<f64>, d_logits: &Array1<f64>, grad: &mut Affine) -> Array1<f64> {
        for (mut row, &g) in grad.weight.rows_mut().into_iter().zip(d_logits) {
            if g != 0.0 {
                row.scaled_add(g, x);
            }
        }
        grad.bias += d_logits;
        self.weight.t().dot(d_logits)
    }
}

impl Parameters for Affine {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![params::view("weight", &self.weight), params::view("bias", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            params::view_mut("weight", &mut self.weight),
            params::view_mut("bias", &mut self.bias),
        ]
    }
}

/// Output heads. Row `c` of `individual` is the parameter set of branch `c`;
/// `aggregate` emits the C-vector. `softmax` is only used by the
/// single-softmax ablation head.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputHeads {
    pub individual: Option<Affine>,
    pub aggregate: Option<Affine>,
    pub softmax: Option<Affine>,
}

impl OutputHeads {
    pub fn multi_branch<R: Rng + ?Sized>(classes: usize, inputs: usize, rng: &mut R) -> Self {
        Self {
            individual: Some(Affine::new(classes, inputs, rng)),
            aggregate: Some(Affine::new(classes, inputs, rng)),
            softmax: None,
        }
    }

    pub fn input_width(&self) -> Option<usize> {
        self.individual
            .as_ref()
            .or(self.aggregate.as_ref())
            .or(self.softmax.as_ref())
            .map(Affine::inputs)
    }
}

impl Parameters for OutputHeads {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (name, head) in [
            ("individual", &self.individual),
            ("aggregate", &self.aggregate),
            ("softmax", &self.softmax),
        ] {
            if let Some(h) = head {
                out.extend(params::prefixed(name, h.params()));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (name, head) in [
            ("individual", &mut self.individual),
            ("aggregate", &mut self.aggregate),
            ("softmax", &mut self.softmax),
        ] {
            if let Some(h) = head {
                out.extend(params::prefixed_mut(name, h.params_mut()));
            }
        }
        out
    }
}

/// Per-label probabilities and the aggregated probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs {
    pub individual: Array1<f64>,
    pub aggregate: Array1<f64>,
}

/// Applies both branch families to a flattened head input.
pub fn forward_branches(input: &Array1<f64>, heads: &OutputHeads) -> Result<BranchOutputs> {
    let (Some(ind), Some(agg)) = (&heads.individual, &heads.aggregate) else {
        return Err(Error::Config(
            "multi-branch output needs individual and aggregate heads".into(),
        ));
    };
    Ok(BranchOutputs {
        individual: ind.forward(input)?.mapv(logistic),
        aggregate: agg.forward(input)?.mapv(logistic),
    })
}

/// Ranked labels and per-class decisions for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelPrediction {
    /// `(class index, score)` in descending score order.
    pub ranking: Vec<(usize, f64)>,
    pub scores: Vec<f64>,
    pub decisions: Vec<bool>,
}

/// Weighted inference scores `clamp(w_c * y_c, 0, 1)`.
pub fn weighted_scores(individual: &Array1<f64>, weights: &AdaptiveWeights) -> Vec<f64> {
    individual
        .iter()
        .zip(&weights.w)
        .map(|(&p, &w)| (w * p).clamp(0.0, 1.0))
        .collect()
}

/// Ranks precomputed scores: descending, ties by ascending class index.
/// `k` larger than the class count is clamped.
pub fn rank_scores(scores: &[f64], k: usize, threshold: f64) -> LabelPrediction {
    let classes = scores.len();
    let k = if k > classes {
        log::warn!("top-{k} requested from {classes} classes; returning {classes}");
        classes
    } else {
        k
    };
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    LabelPrediction {
        ranking: order.into_iter().take(k).map(|c| (c, scores[c])).collect(),
        scores: scores.to_vec(),
        decisions: scores.iter().map(|&s| s >= threshold).collect(),
    }
}

pub fn predict_labels(outputs: &BranchOutputs, weights: &AdaptiveWeights, k: usize, threshold: f64) -> LabelPrediction {
    rank_scores(&weighted_scores(&outputs.individual, weights), k, threshold)
}

/// One row of the prediction export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub class_name: String,
    pub raw_probability: f64,
    pub weighted_score: f64,
    pub decision: u8,
}

pub fn write_predictions<W: Write>(writer: W, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
