//! Loss terms of the multi-branch objective and their gradients.
//!
//! The composite loss is
//!
//! ```text
//! total = mean_c BCE(y_c, clamp(w_c * p_c))
//!       + mean_c BCE(y_c, clamp(w_A * q_c))
//!       + || alpha * clamp(w * p) - beta * clamp(w_A * q) ||_2
//! ```
//!
//! with `p` the individual branch outputs, `q` the aggregate vector and
//! `clamp` restricting values to `[eps, 1 - eps]`. Outside that interval the
//! clamp passes a gradient only when a descent step would move the raw value
//! back inside; otherwise it is zero.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::output::{AdaptiveWeights, BranchOutputs};

pub const DEFAULT_EPS: f64 = 1e-7;

/// Where a branch weight enters the cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `BCE(y, w * p)`
    #[default]
    Probability,
    /// `w * BCE(y, p)`
    LossScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub eps: f64,
    pub weight_mode: WeightMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            weight_mode: WeightMode::Probability,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce_mean: f64,
    pub mlce: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(bce_mean: f64, mlce: f64, consistency: f64) -> Self {
        Self {
            bce_mean,
            mlce,
            consistency,
            total: bce_mean + mlce + consistency,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bce_mean.is_finite() && self.mlce.is_finite() && self.consistency.is_finite() && self.total.is_finite()
    }

    /// Component-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            bce_mean: sum(|l| l.bce_mean),
            mlce: sum(|l| l.mlce),
            consistency: sum(|l| l.consistency),
            total: sum(|l| l.total),
        }
    }
}

pub fn clamp_probability(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// Whether the upstream gradient `g` of a clamped value flows to `raw`.
fn clamp_passes(raw: f64, g: f64, eps: f64) -> bool {
    (eps..=1.0 - eps).contains(&raw) || (raw > 1.0 - eps && g > 0.0) || (raw < eps && g < 0.0)
}

/// Binary cross-entropy with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(y: f64, p: f64) -> f64 {
    bce_eps(y, p, DEFAULT_EPS)
}

pub fn bce_eps(y: f64, p: f64, eps: f64) -> f64 {
    let p = clamp_probability(p, eps);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `d BCE / d p` for an already clamped `p`.
fn bce_dp(y: f64, p: f64) -> f64 {
    -y / p + (1.0 - y) / (1.0 - p)
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: lengths {a} and {b} differ")));
    }
    if a == 0 {
        return Err(Error::Dimension(format!("{what}: vectors must be nonempty")));
    }
    Ok(())
}

/// Mean per-class binary cross-entropy.
pub fn mlce(y: &[f64], p: &[f64]) -> Result<f64> {
    check_len("mlce", y.len(), p.len())?;
    Ok(y.iter().zip(p).map(|(&y, &p)| bce(y, p)).sum::<f64>() / y.len() as f64)
}

/// Euclidean distance between two vectors.
pub fn consistency_loss(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len("consistency", u.len(), v.len())?;
    Ok(u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Value and gradients of one weighted cross-entropy family
/// `mean_c BCE(y_c, clamp(w_c * p_c))` (or the loss-scaled variant).
pub struct WeightedBce {
    pub value: f64,
    pub d_probs: Array1<f64>,
    pub d_weights: Array1<f64>,
}

pub fn weighted_bce(y: &[f64], probs: &Array1<f64>, weights: &Array1<f64>, cfg: &LossConfig) -> Result<WeightedBce> {
    check_len("weighted bce", y.len(), probs.len())?;
    check_len("weighted bce weights", weights.len(), probs.len())?;
    let n = y.len() as f64;
    let mut value = 0.0;
    let mut d_probs = Array1::zeros(y.len());
    let mut d_weights = Array1::zeros(y.len());
    for c in 0..y.len() {
        let (p, w, yc) = (probs[c], weights[c], y[c]);
        match cfg.weight_mode {
            WeightMode::Probability => {
                let raw = w * p;
                let s = clamp_probability(raw, cfg.eps);
                value += bce_eps(yc, s, cfg.eps);
                let g = bce_dp(yc, s) / n;
                if clamp_passes(raw, g, cfg.eps) {
                    d_probs[c] = g * w;
                    d_weights[c] = g * p;
                }
            }
            WeightMode::LossScale => {
                let s = clamp_probability(p, cfg.eps);
                let l = bce_eps(yc, s, cfg.eps);
                value += w * l;
                d_weights[c] = l / n;
                let g = w * bce_dp(yc, s) / n;
                if clamp_passes(p, g, cfg.eps) {
                    d_probs[c] = g;
                }
            }
        }
    }
    Ok(WeightedBce {
        value: value / n,
        d_probs,
        d_weights,
    })
}

/// Gradients of the composite loss with respect to the branch outputs and
/// every adaptive weight.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeGrad {
    pub d_individual: Array1<f64>,
    pub d_aggregate: Array1<f64>,
    pub weights: AdaptiveWeights,
}

/// Which terms of the composite objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub individual: bool,
    pub aggregate: bool,
    pub consistency: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        individual: true,
        aggregate: true,
        consistency: true,
    };
}

pub fn composite_loss(y: &[f64], outputs: &BranchOutputs, weights: &AdaptiveWeights) -> Result<LossBreakdown> {
    composite_loss_grad(y, outputs, weights, &LossConfig::default(), LossTerms::ALL).map(|(l, _)| l)
}

pub fn composite_loss_grad(
    y: &[f64],
    outputs: &BranchOutputs,
    weights: &AdaptiveWeights,
    cfg: &LossConfig,
    terms: LossTerms,
) -> Result<(LossBreakdown, CompositeGrad)> {
    let c = y.len();
    check_len("labels vs individual outputs", c, outputs.individual.len())?;
    check_len("labels vs aggregate outputs", c, outputs.aggregate.len())?;
    check_len("labels vs branch weights", c, weights.w.len())?;

    let mut grad = CompositeGrad {
        d_individual: Array1::zeros(c),
        d_aggregate: Array1::zeros(c),
        weights: AdaptiveWeights {
            w: Array1::zeros(c),
            w_aggregate: 0.0,
            alpha: 0.0,
            beta: 0.0,
        },
    };

    let mut bce_mean = 0.0;
    if terms.individual {
        let t = weighted_bce(y, &outputs.individual, &weights.w, cfg)?;
        bce_mean = t.value;
        grad.d_individual += &t.d_probs;
        grad.weights.w += &t.d_weights;
    }

    let mut mlce_value = 0.0;
    if terms.aggregate {
        let wa = Array1::from_elem(c, weights.w_aggregate);
        let t = weighted_bce(y, &outputs.aggregate, &wa, cfg)?;
        mlce_value = t.value;
        grad.d_aggregate += &t.d_probs;
        grad.weights.w_aggregate += t.d_weights.sum();
    }

    let mut cl = 0.0;
    if terms.consistency {
        let raw_ind = &weights.w * &outputs.individual;
        let raw_agg = &outputs.aggregate * weights.w_aggregate;
        let s = raw_ind.mapv(|v| clamp_probability(v, cfg.eps));
        let t = raw_agg.mapv(|v| clamp_probability(v, cfg.eps));
        let u = &s * weights.alpha;
        let v = &t * weights.beta;
        let diff = &u - &v;
        cl = diff.dot(&diff).sqrt();
        if cl > 0.0 {
            let g = diff / cl;
            grad.weights.alpha += s.dot(&g);
            grad.weights.beta -= t.dot(&g);
            for k in 0..c {
                let ds = weights.alpha * g[k];
                if clamp_passes(raw_ind[k], ds, cfg.eps) {
                    grad.d_individual[k] += ds * weights.w[k];
                    grad.weights.w[k] += ds * outputs.individual[k];
                }
                let dt = -weights.beta * g[k];
                if clamp_passes(raw_agg[k], dt, cfg.eps) {
                    grad.d_aggregate[k] += dt * weights.w_aggregate;
                    grad.weights.w_aggregate += dt * outputs.aggregate[k];
                }
            }
        }
    }

    Ok((LossBreakdown::new(bce_mean, mlce_value, cl), grad))
}
