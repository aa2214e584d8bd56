//! The assembled classifier: spatial encoder, optional context encoder and
//! output heads, with a single-sample forward/backward pass.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::{build_context_encoder, ContextCache, ContextConfig, ContextEncoder, EmbeddingSequence};
use crate::error::{Error, Result};
use crate::losses::{composite_loss_grad, weighted_bce, LossBreakdown, LossConfig, LossTerms};
use crate::output::{
    init_adaptive_weights, logistic, weighted_scores, AdaptiveWeights, Affine, BranchOutputs, OutputHeads,
};
use crate::params::{self, ParamMut, ParamRef, Parameters};
use crate::spatial::{build_spatial_encoder, CxrImage, FeatureMap, SpatialCache, SpatialConfig, SpatialEncoder};

/// Representation fed to the output heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    /// Flattened context embeddings, width `N_p * N_D`.
    #[default]
    Embeddings,
    /// Flattened feature map, width `r * r * z`; the context encoder is skipped.
    FeatureMap,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Individual branches plus the aggregate vector, composite loss.
    #[default]
    MultiBranch,
    /// Individual branches only, weighted BCE.
    IndividualOnly,
    /// Aggregate vector only, weighted MLCE.
    AggregateOnly,
    /// One softmax layer over all classes, BCE on the softmax probabilities.
    Softmax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchInit {
    /// `w_c = N / (C N_c)`, `w_A = 1 / (C + 1)`.
    #[default]
    ClassRatio,
    /// Zeroed head parameters and unit branch weights.
    Neutral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub spatial: SpatialConfig,
    pub context: ContextConfig,
    #[serde(default)]
    pub head_input: HeadInput,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default)]
    pub branch_init: BranchInit,
    #[serde(default)]
    pub loss: LossConfig,
}

impl ModelConfig {
    /// VGG16 encoder, 12-block transformer of width 512.
    pub fn full_size(classes: usize) -> Self {
        Self {
            classes,
            spatial: SpatialConfig::vgg16(),
            context: ContextConfig::full_size(),
            head_input: HeadInput::Embeddings,
            head: HeadKind::MultiBranch,
            branch_init: BranchInit::ClassRatio,
            loss: LossConfig::default(),
        }
    }

    /// 16x16 input, two convolutions, one transformer block of width 32.
    pub fn miniature(classes: usize) -> Self {
        Self {
            classes,
            spatial: SpatialConfig::miniature(),
            context: ContextConfig::miniature(),
            head_input: HeadInput::Embeddings,
            head: HeadKind::MultiBranch,
            branch_init: BranchInit::ClassRatio,
            loss: LossConfig::default(),
        }
    }

    pub fn uses_context(&self) -> bool {
        self.head_input == HeadInput::Embeddings
    }

    pub fn head_input_width(&self) -> usize {
        let r = self.spatial.output_extent();
        let z = self.spatial.output_channels();
        match self.head_input {
            HeadInput::Embeddings => self.context.patch_grid(r).1 * self.context.embed_dim,
            HeadInput::FeatureMap => r * r * z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("class count must be at least 1".into()));
        }
        self.spatial.validate()?;
        if self.uses_context() {
            self.context.validate()?;
        }
        if !(self.loss.eps > 0.0 && self.loss.eps < 0.5) {
            return Err(Error::Config(format!(
                "clamp epsilon {} must lie in (0, 0.5)",
                self.loss.eps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HydraVit {
    pub config: ModelConfig,
    pub spatial: SpatialEncoder,
    pub context: Option<ContextEncoder>,
    pub heads: OutputHeads,
    pub weights: AdaptiveWeights,
}

/// Head probabilities for each head layout.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutputs {
    MultiBranch(BranchOutputs),
    Individual(Array1<f64>),
    Aggregate(Array1<f64>),
    Softmax(Array1<f64>),
}

impl HeadOutputs {
    /// Per-class probabilities before branch weighting.
    pub fn raw(&self) -> &Array1<f64> {
        match self {
            HeadOutputs::MultiBranch(b) => &b.individual,
            HeadOutputs::Individual(p) | HeadOutputs::Aggregate(p) | HeadOutputs::Softmax(p) => p,
        }
    }

    /// Inference scores: weighted individual branches where they exist,
    /// otherwise the raw probabilities.
    pub fn scores(&self, weights: &AdaptiveWeights) -> Vec<f64> {
        match self {
            HeadOutputs::MultiBranch(b) => weighted_scores(&b.individual, weights),
            HeadOutputs::Individual(p) => weighted_scores(p, weights),
            HeadOutputs::Aggregate(p) | HeadOutputs::Softmax(p) => p.to_vec(),
        }
    }
}

pub struct ForwardPass {
    pub feature_map: FeatureMap,
    pub embeddings: Option<EmbeddingSequence>,
    pub outputs: HeadOutputs,
}

struct Activations {
    feature_map: FeatureMap,
    spatial: SpatialCache,
    context: Option<(EmbeddingSequence, ContextCache)>,
    head_input: Array1<f64>,
    individual: Option<Array1<f64>>,
    aggregate: Option<Array1<f64>>,
    softmax: Option<Array1<f64>>,
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

fn check_finite<'a>(what: &str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

impl HydraVit {
    /// Builds a model. `class_counts` and `total` feed the ratio-based branch
    /// weight initialization.
    pub fn new<R: Rng + ?Sized>(
        config: &ModelConfig,
        class_counts: &[usize],
        total: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_spatial(config, None, class_counts, total, rng)
    }

    pub fn with_spatial<R: Rng + ?Sized>(
        config: &ModelConfig,
        spatial_weights: Option<&crate::bundle::WeightBundle>,
        class_counts: &[usize],
        total: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if class_counts.len() != config.classes {
            return Err(Error::Config(format!(
                "{} class counts supplied for a {}-class model",
                class_counts.len(),
                config.classes
            )));
        }
        let spatial = build_spatial_encoder(&config.spatial, spatial_weights, rng)?;
        let context = if config.uses_context() {
            Some(build_context_encoder(
                &config.context,
                config.spatial.output_extent(),
                config.spatial.output_channels(),
                rng,
            )?)
        } else {
            None
        };
        let (c, d) = (config.classes, config.head_input_width());
        let neutral = config.branch_init == BranchInit::Neutral;
        let mut make = |present: bool| {
            present.then(|| {
                if neutral {
                    Affine::zeros(c, d)
                } else {
                    Affine::new(c, d, rng)
                }
            })
        };
        let heads = OutputHeads {
            individual: make(matches!(config.head, HeadKind::MultiBranch | HeadKind::IndividualOnly)),
            aggregate: make(matches!(config.head, HeadKind::MultiBranch | HeadKind::AggregateOnly)),
            softmax: make(config.head == HeadKind::Softmax),
        };
        let weights = match config.branch_init {
            BranchInit::ClassRatio => init_adaptive_weights(class_counts, total, rng)?,
            BranchInit::Neutral => {
                let alpha = rng.random_range(0.0..=5.0);
                let beta = rng.random_range(0.0..=5.0);
                AdaptiveWeights::uniform(c, alpha, beta)
            }
        };
        Ok(Self {
            config: config.clone(),
            spatial,
            context,
            heads,
            weights,
        })
    }

    fn activations(&self, image: &CxrImage) -> Result<Activations> {
        let (feature_map, spatial) = self.spatial.encode_cached(image)?;
        check_finite("feature map", feature_map.values.iter())?;
        let context = match &self.context {
            Some(ctx) => {
                let (emb, cache) = ctx.encode_cached(&feature_map)?;
                check_finite("context embeddings", emb.values.iter())?;
                Some((emb, cache))
            }
            None => None,
        };
        let head_input = match &context {
            Some((emb, _)) => emb.flatten(),
            None => feature_map.flatten(),
        };
        let individual = self
            .heads
            .individual
            .as_ref()
            .map(|h| h.forward(&head_input))
            .transpose()?;
        let aggregate = self
            .heads
            .aggregate
            .as_ref()
            .map(|h| h.forward(&head_input))
            .transpose()?;
        let softmax = self
            .heads
            .softmax
            .as_ref()
            .map(|h| h.forward(&head_input))
            .transpose()?;
        for (name, logits) in [
            ("individual logits", &individual),
            ("aggregate logits", &aggregate),
            ("softmax logits", &softmax),
        ] {
            if let Some(l) = logits {
                check_finite(name, l.iter())?;
            }
        }
        Ok(Activations {
            feature_map,
            spatial,
            context,
            head_input,
            individual,
            aggregate,
            softmax,
        })
    }

    fn outputs_of(&self, act: &Activations) -> HeadOutputs {
        let sig = |l: &Option<Array1<f64>>| l.as_ref().map(|l| l.mapv(logistic));
        match self.config.head {
            HeadKind::MultiBranch => HeadOutputs::MultiBranch(BranchOutputs {
                individual: sig(&act.individual).expect("individual head"),
                aggregate: sig(&act.aggregate).expect("aggregate head"),
            }),
            HeadKind::IndividualOnly => HeadOutputs::Individual(sig(&act.individual).expect("individual head")),
            HeadKind::AggregateOnly => HeadOutputs::Aggregate(sig(&act.aggregate).expect("aggregate head")),
            HeadKind::Softmax => HeadOutputs::Softmax(softmax(act.softmax.as_ref().expect("softmax head"))),
        }
    }

    pub fn forward(&self, image: &CxrImage) -> Result<ForwardPass> {
        let act = self.activations(image)?;
        let outputs = self.outputs_of(&act);
        Ok(ForwardPass {
            feature_map: act.feature_map,
            embeddings: act.context.map(|(e, _)| e),
            outputs,
        })
    }

    pub fn loss(&self, image: &CxrImage, labels: &[f64]) -> Result<LossBreakdown> {
        self.loss_and_grad(image, labels).map(|(l, _)| l)
    }

    /// Loss for one sample and the gradient with respect to every parameter.
    pub fn loss_and_grad(&self, image: &CxrImage, labels: &[f64]) -> Result<(LossBreakdown, HydraVit)> {
        if labels.len() != self.config.classes {
            return Err(Error::Dimension(format!(
                "{} labels for a {}-class model",
                labels.len(),
                self.config.classes
            )));
        }
        let act = self.activations(image)?;
        let outputs = self.outputs_of(&act);
        let cfg: &LossConfig = &self.config.loss;
        let mut grad = self.zeros_like();
        let c = self.config.classes;
        let mut d_ind_logits: Option<Array1<f64>> = None;
        let mut d_agg_logits: Option<Array1<f64>> = None;
        let mut d_soft_logits: Option<Array1<f64>> = None;
        let sigmoid_grad = |d_p: &Array1<f64>, p: &Array1<f64>| d_p * &p.mapv(|v| v * (1.0 - v));

        let loss = match &outputs {
            HeadOutputs::MultiBranch(b) => {
                let (loss, g) = composite_loss_grad(labels, b, &self.weights, cfg, LossTerms::ALL)?;
                d_ind_logits = Some(sigmoid_grad(&g.d_individual, &b.individual));
                d_agg_logits = Some(sigmoid_grad(&g.d_aggregate, &b.aggregate));
                grad.weights = g.weights;
                loss
            }
            HeadOutputs::Individual(p) => {
                let t = weighted_bce(labels, p, &self.weights.w, cfg)?;
                d_ind_logits = Some(sigmoid_grad(&t.d_probs, p));
                grad.weights.w = t.d_weights;
                LossBreakdown::new(t.value, 0.0, 0.0)
            }
            HeadOutputs::Aggregate(q) => {
                let wa = Array1::from_elem(c, self.weights.w_aggregate);
                let t = weighted_bce(labels, q, &wa, cfg)?;
                d_agg_logits = Some(sigmoid_grad(&t.d_probs, q));
                grad.weights.w_aggregate = t.d_weights.sum();
                LossBreakdown::new(0.0, t.value, 0.0)
            }
            HeadOutputs::Softmax(p) => {
                let ones = Array1::ones(c);
                let t = weighted_bce(labels, p, &ones, cfg)?;
                let dot = t.d_probs.dot(p);
                d_soft_logits = Some(p * &(&t.d_probs - dot));
                LossBreakdown::new(t.value, 0.0, 0.0)
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }

        let mut d_input = Array1::<f64>::zeros(act.head_input.len());
        for (head, grad_head, d) in [
            (&self.heads.individual, &mut grad.heads.individual, &d_ind_logits),
            (&self.heads.aggregate, &mut grad.heads.aggregate, &d_agg_logits),
            (&self.heads.softmax, &mut grad.heads.softmax, &d_soft_logits),
        ] {
            if let (Some(h), Some(gh), Some(d)) = (head, grad_head.as_mut(), d) {
                d_input += &h.backward(&act.head_input, d, gh);
            }
        }
        let d_map = self.head_input_backward(&act, &d_input, &mut grad);
        self.spatial.backward(&act.spatial, &d_map, &mut grad.spatial);
        Ok((loss, grad))
    }

    fn head_input_backward(&self, act: &Activations, d_input: &Array1<f64>, grad: &mut HydraVit) -> Array3<f64> {
        match (&self.context, &act.context) {
            (Some(ctx), Some((emb, cache))) => {
                let d_emb = Array2::from_shape_vec(emb.values.raw_dim(), d_input.to_vec()).expect("embedding shape");
                ctx.backward(cache, &d_emb, grad.context.as_mut().expect("context gradient"))
            }
            _ => Array3::from_shape_vec(act.feature_map.values.raw_dim(), d_input.to_vec()).expect("feature map shape"),
        }
    }

    /// Gradient of the pre-activation logit of `class` with respect to the
    /// final feature map. Uses the individual branch when present.
    pub fn logit_gradient(&self, image: &CxrImage, class: usize) -> Result<(FeatureMap, Array3<f64>)> {
        if class >= self.config.classes {
            return Err(Error::Argument(format!(
                "class id {class} out of range for {} classes",
                self.config.classes
            )));
        }
        let act = self.activations(image)?;
        let head = self
            .heads
            .individual
            .as_ref()
            .or(self.heads.softmax.as_ref())
            .or(self.heads.aggregate.as_ref())
            .expect("model has at least one head");
        let mut d_logits = Array1::zeros(self.config.classes);
        d_logits[class] = 1.0;
        let mut grad = self.zeros_like();
        let mut scratch = head.clone();
        let d_input = head.backward(&act.head_input, &d_logits, &mut scratch);
        let d_map = self.head_input_backward(&act, &d_input, &mut grad);
        Ok((act.feature_map, d_map))
    }
}

impl Parameters for HydraVit {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = params::prefixed("spatial", self.spatial.params());
        if let Some(ctx) = &self.context {
            out.extend(params::prefixed("context", ctx.params()));
        }
        out.extend(params::prefixed("heads", self.heads.params()));
        out.extend(params::prefixed("branch", self.weights.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = params::prefixed_mut("spatial", self.spatial.params_mut());
        if let Some(ctx) = &mut self.context {
            out.extend(params::prefixed_mut("context", ctx.params_mut()));
        }
        out.extend(params::prefixed_mut("heads", self.heads.params_mut()));
        out.extend(params::prefixed_mut("branch", self.weights.params_mut()));
        out
    }
}
