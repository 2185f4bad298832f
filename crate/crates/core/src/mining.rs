//! Pseudo-label mining: ensemble top-1 voting, confidence filtering, the
//! iterate-until-converged loop, k-means over out-of-class images, cluster
//! pretraining and intersection of two mined sets.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment;
use crate::data::{ClassId, DatasetBundle, Example};
use crate::error::{ensure, Error, Result};
use crate::fusion;
use crate::image::Image;
use crate::model::{self, Classifier, TrainConfig, TrainSample};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub example_id: String,
    pub label: ClassId,
    pub confidence: f64,
    pub agreement: usize,
    pub round: usize,
}

/// At most one entry per example id, kept in id order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    entries: BTreeMap<String, PseudoLabel>,
}

pub const PSEUDO_HEADER: &str = "id,label,conf,agree,round";

impl PseudoLabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PseudoLabel> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PseudoLabel> {
        self.entries.values()
    }

    /// Inserts unless the id is already present; the first label sticks.
    pub fn insert(&mut self, label: PseudoLabel) -> Result<bool> {
        ensure((0.0..=1.0).contains(&label.confidence), || {
            format!("confidence {} of {} is outside [0, 1]", label.confidence, label.example_id)
        })?;
        ensure(label.agreement >= 1, || format!("agreement of {} must be at least 1", label.example_id))?;
        if self.entries.contains_key(&label.example_id) {
            return Ok(false);
        }
        self.entries.insert(label.example_id.clone(), label);
        Ok(true)
    }

    /// Adds the entries of `other` whose ids are new; returns how many.
    pub fn extend_frozen(&mut self, other: &PseudoLabelSet) -> usize {
        let mut added = 0;
        for entry in other.iter() {
            if !self.entries.contains_key(&entry.example_id) {
                self.entries.insert(entry.example_id.clone(), entry.clone());
                added += 1;
            }
        }
        added
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(PSEUDO_HEADER);
        out.push('\n');
        for e in self.iter() {
            // `{}` on f64 prints the shortest string that parses back exactly.
            let _ = writeln!(out, "{},{},{},{},{}", e.example_id, e.label, e.confidence, e.agreement, e.round);
        }
        out
    }

    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != PSEUDO_HEADER {
            return Err(Error::integrity(format!("{origin}: expected header `{PSEUDO_HEADER}`, found `{header}`")));
        }
        let mut set = PseudoLabelSet::new();
        for (n, line) in lines.enumerate() {
            let bad = |what: &str| Error::integrity(format!("{origin}:{}: {what}", n + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(bad(&format!("expected 5 fields, found {}", fields.len())));
            }
            let entry = PseudoLabel {
                example_id: fields[0].to_string(),
                label: fields[1].parse().map_err(|_| bad("bad label"))?,
                confidence: fields[2].parse().map_err(|_| bad("bad confidence"))?,
                agreement: fields[3].parse().map_err(|_| bad("bad agreement"))?,
                round: fields[4].parse().map_err(|_| bad("bad round"))?,
            };
            let id = entry.example_id.clone();
            if !set.insert(entry).map_err(|e| bad(&e.to_string()))? {
                return Err(bad(&format!("duplicate id {id}")));
            }
        }
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vote {
    pub label: ClassId,
    pub agreement: usize,
    pub mean_confidence: f64,
}

/// Plurality over `(top1_label, confidence)` pairs. Ties go to the larger
/// summed confidence, then to the smaller class id.
pub fn vote_top1(per_model: &[(ClassId, f64)]) -> Result<Vote> {
    ensure(!per_model.is_empty(), || "cannot vote over zero models".into())?;
    let mut tally: BTreeMap<ClassId, (usize, f64)> = BTreeMap::new();
    for &(label, conf) in per_model {
        let t = tally.entry(label).or_insert((0, 0.0));
        t.0 += 1;
        t.1 += conf;
    }
    let mut best: Option<(ClassId, usize, f64)> = None;
    for (&label, &(count, sum)) in &tally {
        let better = match best {
            None => true,
            Some((_, bc, bs)) => count > bc || (count == bc && sum > bs),
        };
        if better {
            best = Some((label, count, sum));
        }
    }
    let (label, agreement, sum) = best.expect("tally is non-empty");
    Ok(Vote { label, agreement, mean_confidence: sum / agreement as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// `None` requires every model to agree.
    pub min_agreement: Option<usize>,
    pub min_confidence: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { min_agreement: None, min_confidence: 0.6 }
    }
}

impl Thresholds {
    pub fn vacuous() -> Self {
        Thresholds { min_agreement: Some(1), min_confidence: 0.0 }
    }

    pub fn agreement_for(&self, num_models: usize) -> usize {
        self.min_agreement.unwrap_or(num_models)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.min_agreement != Some(0), || "min_agreement must be at least 1".into())?;
        ensure(self.min_confidence.is_finite() && self.min_confidence >= 0.0, || {
            format!("min_confidence must be a non-negative number, got {}", self.min_confidence)
        })
    }
}

pub fn select_confident(
    votes: &[(String, Vote)],
    min_agreement: usize,
    min_confidence: f64,
    round: usize,
) -> PseudoLabelSet {
    let mut set = PseudoLabelSet::new();
    for (id, v) in votes {
        if v.agreement >= min_agreement && v.mean_confidence >= min_confidence {
            let entry = PseudoLabel {
                example_id: id.clone(),
                label: v.label,
                confidence: v.mean_confidence.clamp(0.0, 1.0),
                agreement: v.agreement.max(1),
                round,
            };
            set.insert(entry).expect("entry fields are in range");
        }
    }
    set
}

/// Logits of the centred view: shorter side resized to the model's input
/// resolution, then a centred square of that size.
pub fn center_logits(model: &Classifier, image: &Image) -> Result<Vec<f64>> {
    let res = model.input_resolution();
    let view = augment::center_view(image, res, res)?;
    Ok(model.forward(&view, res).0)
}

pub fn top1(logits: &[f64]) -> (ClassId, f64) {
    let probs = model::softmax(logits);
    let label = fusion::argmax(&probs);
    (label, probs[label])
}

pub fn mine_round(
    models: &[Classifier],
    unlabeled: &[Example],
    thresholds: &Thresholds,
    round: usize,
) -> Result<PseudoLabelSet> {
    ensure(!models.is_empty(), || "mining needs at least one model".into())?;
    thresholds.validate()?;
    let votes = unlabeled
        .par_iter()
        .map(|ex| {
            let per_model = models
                .iter()
                .map(|m| Ok(top1(&center_logits(m, &ex.image)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok((ex.id.clone(), vote_top1(&per_model)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(select_confident(&votes, thresholds.agreement_for(models.len()), thresholds.min_confidence, round))
}

/// Accuracy of each model and of their accuracy-weighted logit fusion, on
/// examples with visible labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleScore {
    pub per_model: Vec<f64>,
    pub weights: Vec<f64>,
    pub fused: f64,
}

/// Falls back to equal weights when every model scores zero.
pub fn accuracy_weights(accuracies: &[f64]) -> Result<Vec<f64>> {
    if accuracies.iter().sum::<f64>() > 0.0 {
        fusion::weights_from_accuracy(accuracies)
    } else {
        ensure(!accuracies.is_empty(), || "need at least one accuracy".into())?;
        Ok(vec![1.0 / accuracies.len() as f64; accuracies.len()])
    }
}

pub fn ensemble_score(models: &[Classifier], examples: &[Example]) -> Result<EnsembleScore> {
    ensure(!models.is_empty() && !examples.is_empty(), || "nothing to score".into())?;
    let logits = examples
        .par_iter()
        .map(|ex| models.iter().map(|m| center_logits(m, &ex.image)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let truths = examples
        .iter()
        .map(|ex| ex.label.ok_or_else(|| Error::validation(format!("example {} has no visible label", ex.id))))
        .collect::<Result<Vec<_>>>()?;
    let n = examples.len() as f64;
    let per_model: Vec<f64> = (0..models.len())
        .map(|m| {
            let hits = truths.iter().zip(&logits).filter(|(&t, z)| fusion::argmax(&z[m]) == t).count();
            hits as f64 / n
        })
        .collect();
    let weights = accuracy_weights(&per_model)?;
    let mut hits = 0;
    for (&t, z) in truths.iter().zip(&logits) {
        if fusion::argmax(&fusion::fuse(z, &weights)?) == t {
            hits += 1;
        }
    }
    Ok(EnsembleScore { per_model, weights, fused: hits as f64 / n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub thresholds: Thresholds,
    pub max_rounds: usize,
    /// Minimum round-over-round gain in fused validation accuracy (fraction).
    pub converge_tol: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { thresholds: Thresholds::default(), max_rounds: 3, converge_tol: 0.005 }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        ensure(self.max_rounds >= 1, || "max_rounds must be at least 1".into())?;
        ensure(self.converge_tol.is_finite() && self.converge_tol >= 0.0, || {
            "converge_tol must be non-negative".into()
        })
    }
}

/// True once the latest round gained less than `tol` over the one before.
pub fn converged(accuracies: &[f64], tol: f64) -> bool {
    match accuracies {
        [.., prev, last] => last - prev < tol,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Fused validation accuracy of the round's models.
    pub val_accuracy: f64,
    pub per_model: Vec<f64>,
    pub pseudo_count: usize,
}

#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub labels: PseudoLabelSet,
    pub rounds: Vec<RoundRecord>,
    /// Models of the last round.
    pub models: Vec<Classifier>,
    /// Pseudo-labels mined in round 1 alone.
    pub first_round: PseudoLabelSet,
}

impl MiningOutcome {
    pub fn val_accuracies(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.val_accuracy).collect()
    }
}

/// Training samples for `labeled ∪ pseudo`, smoothed targets throughout.
pub fn training_samples<'a>(
    labeled: &'a [Example],
    pool: &'a [Example],
    pseudo: &PseudoLabelSet,
    num_classes: usize,
    eps: f64,
) -> Result<Vec<TrainSample<'a>>> {
    let mut out = Vec::with_capacity(labeled.len() + pseudo.len());
    for ex in labeled {
        let label = ex
            .label
            .ok_or_else(|| Error::validation(format!("example {} has no visible label", ex.id)))?;
        out.push(TrainSample::new(&ex.image, model::smooth_targets(label, num_classes, eps)?));
    }
    for ex in pool {
        if let Some(p) = pseudo.get(&ex.id) {
            out.push(TrainSample::new(&ex.image, model::smooth_targets(p.label, num_classes, eps)?));
        }
    }
    Ok(out)
}

pub fn iterative_mining(
    bundle: &DatasetBundle,
    model_seeds: &[u64],
    cfg: &TrainConfig,
    mining: &MiningConfig,
) -> Result<MiningOutcome> {
    let c = bundle.num_inclass_classes;
    iterative_mining_from(bundle, model_seeds, cfg, mining, &|s| Classifier::init(c, seed::derive(s, "init", 0)))
}

/// As [`iterative_mining`], with each seed's starting model supplied by
/// `init` (used to start from pretrained conv stages).
pub fn iterative_mining_from(
    bundle: &DatasetBundle,
    model_seeds: &[u64],
    cfg: &TrainConfig,
    mining: &MiningConfig,
    init: &(dyn Fn(u64) -> Result<Classifier> + Sync),
) -> Result<MiningOutcome> {
    mining.validate()?;
    ensure(!model_seeds.is_empty(), || "mining needs at least one model seed".into())?;
    let c = bundle.num_inclass_classes;
    let mut labels = PseudoLabelSet::new();
    let mut rounds = Vec::new();
    let mut first_round = PseudoLabelSet::new();
    let mut models = Vec::new();
    for round in 1..=mining.max_rounds {
        let data = training_samples(&bundle.labeled_train, &bundle.inclass_unlabeled, &labels, c, cfg.label_smooth_eps)?;
        models = model_seeds
            .iter()
            .map(|&s| {
                let start = init(s)?;
                let run_cfg = TrainConfig { seed: s, ..cfg.clone() };
                Ok(model::train(&start, &data, &run_cfg)?.model)
            })
            .collect::<Result<Vec<_>>>()?;
        let score = ensemble_score(&models, &bundle.validation)?;
        let mined = mine_round(&models, &bundle.inclass_unlabeled, &mining.thresholds, round)?;
        if round == 1 {
            first_round = mined.clone();
        }
        labels.extend_frozen(&mined);
        rounds.push(RoundRecord { round, val_accuracy: score.fused, per_model: score.per_model, pseudo_count: labels.len() });
        let accs: Vec<f64> = rounds.iter().map(|r| r.val_accuracy).collect();
        if converged(&accs, mining.converge_tol) {
            break;
        }
    }
    Ok(MiningOutcome { labels, rounds, models, first_round })
}

/// Ids present in both sets with equal labels. Confidence is the minimum,
/// agreement the sum, round the maximum.
pub fn intersect(a: &PseudoLabelSet, b: &PseudoLabelSet) -> PseudoLabelSet {
    let mut out = PseudoLabelSet::new();
    for x in a.iter() {
        if let Some(y) = b.get(&x.example_id) {
            if x.label == y.label {
                out.entries.insert(
                    x.example_id.clone(),
                    PseudoLabel {
                        example_id: x.example_id.clone(),
                        label: x.label,
                        confidence: x.confidence.min(y.confidence),
                        agreement: x.agreement + y.agreement,
                        round: x.round.max(y.round),
                    },
                );
            }
        }
    }
    out
}

/// EVALUATION ONLY: fraction of entries whose label matches the hidden
/// ground truth. `None` for an empty set.
pub fn precision(set: &PseudoLabelSet, pool: &[Example]) -> Option<f64> {
    if set.is_empty() {
        return None;
    }
    let truth: HashMap<&str, ClassId> = pool.iter().map(|e| (e.id.as_str(), e.hidden_label)).collect();
    let hits = set.iter().filter(|p| truth.get(p.example_id.as_str()) == Some(&p.label)).count();
    Some(hits as f64 / set.len() as f64)
}

// ---------------------------------------------------------------- k-means

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn assign(&self, point: &[f64]) -> (usize, f64) {
        nearest(&self.centroids, point)
    }
}

#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub assignments: Vec<usize>,
    pub model: ClusterModel,
    /// Inertia after every assignment step of the winning restart.
    pub history: Vec<f64>,
    pub restart: usize,
}

pub const KMEANS_RESTARTS: usize = 5;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance; ties go to the smaller index.
fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, point);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(features: &[Vec<f64>], k: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut centroids = vec![features[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = features.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        let c = features[pick].clone();
        for (d, p) in d2.iter_mut().zip(features) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(features: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> (Vec<usize>, ClusterModel, Vec<f64>) {
    let n = features.len();
    let k = centroids.len();
    let dim = features[0].len();
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..max_iters {
        let step: Vec<(usize, f64)> = features.iter().map(|p| nearest(&centroids, p)).collect();
        let next: Vec<usize> = step.iter().map(|s| s.0).collect();
        history.push(step.iter().map(|s| s.1).sum());
        if next == assignments {
            break;
        }
        assignments = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in features.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut dist: Vec<f64> = step.iter().map(|s| s.1).collect();
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // Re-seed on the point currently farthest from its centroid.
                let mut far = 0;
                for i in 1..n {
                    if dist[i] > dist[far] {
                        far = i;
                    }
                }
                centroids[j] = features[far].clone();
                dist[far] = 0.0;
            }
        }
    }
    // The loop may stop right after a centroid update, so recompute the
    // assignment and inertia against the final centroids.
    let step: Vec<(usize, f64)> = features.iter().map(|p| nearest(&centroids, p)).collect();
    let inertia = step.iter().map(|s| s.1).sum();
    let assignments = step.iter().map(|s| s.0).collect();
    (assignments, ClusterModel { centroids, inertia }, history)
}

pub fn kmeans_fit(features: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<KmeansFit> {
    ensure(!features.is_empty(), || "k-means needs at least one point".into())?;
    ensure(k >= 1, || "K must be at least 1".into())?;
    ensure(k <= features.len(), || format!("K ({k}) exceeds the number of points ({})", features.len()))?;
    ensure(max_iters >= 1, || "max_iters must be at least 1".into())?;
    let dim = features[0].len();
    ensure(features.iter().all(|p| p.len() == dim && p.iter().all(|v| v.is_finite())), || {
        format!("every feature row must hold {dim} finite values")
    })?;
    let runs: Vec<KmeansFit> = (0..KMEANS_RESTARTS)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed, "kmeans", r as u64);
            let init = plus_plus_init(features, k, &mut rng);
            let (assignments, model, history) = lloyd(features, init, max_iters);
            KmeansFit { assignments, model, history, restart: r }
        })
        .collect();
    let mut best: Option<KmeansFit> = None;
    for run in runs {
        if best.as_ref().is_none_or(|b| run.model.inertia < b.model.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn kmeans(features: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<(Vec<usize>, ClusterModel)> {
    let fit = kmeans_fit(features, k, max_iters, seed)?;
    Ok((fit.assignments, fit.model))
}

pub const POOL_SIDE: usize = 8;

/// Average-pools every channel to 8×8 and flattens channel-major.
pub fn pool_features(image: &Image) -> Vec<f64> {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let mut out = Vec::with_capacity(POOL_SIDE * POOL_SIDE * ch);
    for c in 0..ch {
        for by in 0..POOL_SIDE {
            let (y0, y1) = (by * h / POOL_SIDE, (by + 1) * h / POOL_SIDE);
            for bx in 0..POOL_SIDE {
                let (x0, x1) = (bx * w / POOL_SIDE, (bx + 1) * w / POOL_SIDE);
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += image.get(y, x, c) as f64;
                    }
                }
                out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub fn features_for_clustering(examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    ensure(!examples.is_empty(), || "no examples to featurise".into())?;
    Ok(examples.par_iter().map(|e| pool_features(&e.image)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// `None` means twice the number of out-of-class species.
    pub k: Option<usize>,
    pub max_iters: usize,
    pub holdout_fraction: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { k: None, max_iters: 100, holdout_fraction: 0.1 }
    }
}

impl ClusterConfig {
    pub fn k_for(&self, num_outclass_classes: usize) -> usize {
        self.k.unwrap_or(2 * num_outclass_classes)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.k.is_none_or(|k| k >= 2), || "cluster k must be at least 2".into())?;
        ensure(self.max_iters >= 1, || "cluster max_iters must be at least 1".into())?;
        ensure(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0, || {
            "holdout_fraction must lie in (0, 1)".into()
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClusterPretrain {
    pub model: Classifier,
    pub holdout_accuracy: f64,
    pub assignments: Vec<usize>,
    pub clusters: ClusterModel,
    pub holdout: Vec<usize>,
}

/// Clusters the out-of-class images, trains a K-way classifier on the
/// cluster ids of a seeded 90% and scores it on the remaining 10%.
pub fn cluster_pretrain(outclass: &[Example], k: usize, cfg: &TrainConfig) -> Result<ClusterPretrain> {
    cluster_pretrain_with(outclass, k, cfg, &ClusterConfig::default())
}

pub fn cluster_pretrain_with(
    outclass: &[Example],
    k: usize,
    cfg: &TrainConfig,
    cluster: &ClusterConfig,
) -> Result<ClusterPretrain> {
    ensure(k >= 2, || format!("cluster pretraining needs K >= 2, got {k}"))?;
    cluster.validate()?;
    let features = features_for_clustering(outclass)?;
    let fit = kmeans_fit(&features, k, cluster.max_iters, seed::derive(cfg.seed, "cluster", 0))?;
    let mut order: Vec<usize> = (0..outclass.len()).collect();
    order.shuffle(&mut seed::rng(cfg.seed, "holdout", 0));
    let n_hold = ((outclass.len() as f64 * cluster.holdout_fraction).round() as usize).clamp(1, outclass.len() - 1);
    let mut holdout = order[..n_hold].to_vec();
    holdout.sort_unstable();
    let mut is_holdout = vec![false; outclass.len()];
    holdout.iter().for_each(|&i| is_holdout[i] = true);
    let data = (0..outclass.len())
        .filter(|&i| !is_holdout[i])
        .map(|i| Ok(TrainSample::new(&outclass[i].image, model::smooth_targets(fit.assignments[i], k, cfg.label_smooth_eps)?)))
        .collect::<Result<Vec<_>>>()?;
    let start = Classifier::init(k, seed::derive(cfg.seed, "cluster-init", 0))?;
    let trained = model::train(&start, &data, cfg)?.model;
    let hits: usize = holdout
        .par_iter()
        .map(|&i| Ok(usize::from(top1(&center_logits(&trained, &outclass[i].image)?).0 == fit.assignments[i])))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(ClusterPretrain {
        model: trained,
        holdout_accuracy: hits as f64 / holdout.len() as f64,
        assignments: fit.assignments,
        clusters: fit.model,
        holdout,
    })
}
