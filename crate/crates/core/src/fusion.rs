//! Combining classifier outputs before the softmax: accuracy-weighted logit
//! sums, TTA averaging, and shot-routed blending of a generic and a
//! fine-grained model.

use serde::{Deserialize, Serialize};

use crate::data::Shot;
use crate::error::{ensure, Result};
use crate::model::AttentionMap;

pub type ShotType = Shot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteWeights {
    pub generic: f64,
    pub finegrained: f64,
}

impl RouteWeights {
    pub const fn new(generic: f64, finegrained: f64) -> Self {
        RouteWeights { generic, finegrained }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Routing {
    pub long: RouteWeights,
    pub medium: RouteWeights,
    pub close: RouteWeights,
}

impl Default for Routing {
    fn default() -> Self {
        Routing {
            long: RouteWeights::new(0.7, 0.3),
            medium: RouteWeights::new(0.3, 0.7),
            close: RouteWeights::new(0.6, 0.4),
        }
    }
}

impl Routing {
    pub fn get(&self, shot: Shot) -> RouteWeights {
        match shot {
            Shot::Long => self.long,
            Shot::Medium => self.medium,
            Shot::Close => self.close,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionPlan {
    /// Per-model weights; empty means "derive from validation accuracy".
    pub model_weights: Vec<f64>,
    pub routing: Routing,
    /// `(t_long, t_close)` on the attention area ratio.
    pub area_thresholds: (f64, f64),
    pub attention_binarize: f64,
}

impl Default for FusionPlan {
    fn default() -> Self {
        FusionPlan {
            model_weights: Vec::new(),
            routing: Routing::default(),
            area_thresholds: (0.1, 0.6),
            attention_binarize: 0.5,
        }
    }
}

impl FusionPlan {
    pub fn validate(&self) -> Result<()> {
        if !self.model_weights.is_empty() {
            ensure(self.model_weights.iter().all(|w| w.is_finite() && *w >= 0.0), || {
                "model_weights must be non-negative".into()
            })?;
            ensure((self.model_weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9, || {
                "model_weights must sum to 1".into()
            })?;
        }
        for (name, w) in [("long", self.routing.long), ("medium", self.routing.medium), ("close", self.routing.close)] {
            ensure(
                w.generic >= 0.0 && w.finegrained >= 0.0 && (w.generic + w.finegrained - 1.0).abs() <= 1e-9,
                || format!("routing.{name} weights must be non-negative and sum to 1"),
            )?;
        }
        let (lo, hi) = self.area_thresholds;
        ensure(0.0 < lo && lo < hi && hi < 1.0, || {
            format!("area_thresholds must satisfy 0 < t_long < t_close < 1, got ({lo}, {hi})")
        })?;
        ensure(self.attention_binarize > 0.0 && self.attention_binarize <= 1.0, || {
            "attention_binarize must be in (0, 1]".into()
        })
    }
}

/// Normalises accuracies into weights: `w_i = acc_i / Σ acc`.
pub fn weights_from_accuracy(accuracies: &[f64]) -> Result<Vec<f64>> {
    ensure(!accuracies.is_empty(), || "need at least one accuracy".into())?;
    ensure(accuracies.iter().all(|a| a.is_finite() && *a >= 0.0), || {
        "accuracies must be non-negative".into()
    })?;
    let total: f64 = accuracies.iter().sum();
    ensure(total > 0.0, || "accuracies sum to zero".into())?;
    Ok(accuracies.iter().map(|a| a / total).collect())
}

/// Element-wise `Σ w_i · z_i`.
pub fn fuse(logits: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    ensure(!logits.is_empty(), || "nothing to fuse".into())?;
    ensure(logits.len() == weights.len(), || {
        format!("{} logit vectors but {} weights", logits.len(), weights.len())
    })?;
    let c = logits[0].len();
    ensure(logits.iter().all(|z| z.len() == c), || "logit vectors differ in length".into())?;
    let mut out = vec![0.0; c];
    for (z, w) in logits.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(z) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Index of the largest value; ties go to the smaller index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn tta_aggregate(view_logits: &[Vec<f64>]) -> Result<Vec<f64>> {
    ensure(!view_logits.is_empty(), || "no views to aggregate".into())?;
    let c = view_logits[0].len();
    ensure(view_logits.iter().all(|z| z.len() == c), || "view logits differ in length".into())?;
    let n = view_logits.len() as f64;
    Ok((0..c).map(|j| view_logits.iter().map(|z| z[j]).sum::<f64>() / n).collect())
}

/// Fraction of cells at or above `binarize · max`; zero for an all-zero map.
pub fn attention_area_ratio(attn: &AttentionMap, binarize: f64) -> Result<f64> {
    ensure(binarize > 0.0 && binarize <= 1.0, || format!("binarize must be in (0, 1], got {binarize}"))?;
    let max = attn.max();
    if max <= 0.0 {
        return Ok(0.0);
    }
    let hits = attn.values.iter().filter(|&&v| v >= binarize * max).count();
    Ok(hits as f64 / attn.values.len() as f64)
}

pub fn classify_shot(area_ratio: f64, plan: &FusionPlan) -> Shot {
    let (t_long, t_close) = plan.area_thresholds;
    if area_ratio < t_long {
        Shot::Long
    } else if area_ratio >= t_close {
        Shot::Close
    } else {
        Shot::Medium
    }
}

pub fn routed_fuse(generic: &[f64], finegrained: &[f64], shot: Shot, plan: &FusionPlan) -> Result<Vec<f64>> {
    ensure(generic.len() == finegrained.len(), || {
        format!("generic ({}) and fine-grained ({}) lengths differ", generic.len(), finegrained.len())
    })?;
    let w = plan.routing.get(shot);
    Ok(generic
        .iter()
        .zip(finegrained)
        .map(|(g, f)| w.generic * g + w.finegrained * f)
        .collect())
}
