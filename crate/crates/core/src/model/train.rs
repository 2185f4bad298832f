use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{self, Layout};
use super::Classifier;
use crate::augment;
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::seed;

/// Per-batch augmentation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentFlags {
    pub cutmix: bool,
    pub cutmix_alpha: f64,
    pub rcm: bool,
    pub rcm_grid: usize,
    pub rcm_k: usize,
    pub attention_aug: bool,
    pub flip: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            cutmix: false,
            cutmix_alpha: 0.2,
            rcm: false,
            rcm_grid: 2,
            rcm_k: 1,
            attention_aug: false,
            flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub label_smooth_eps: f64,
    pub crop_size: usize,
    pub augment: AugmentFlags,
    /// Draw each epoch's samples class-first (uniform over the classes
    /// present, then uniform within the class) instead of a plain shuffle.
    pub class_balanced: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            base_lr: 0.025,
            warmup_epochs: 5,
            label_smooth_eps: 0.2,
            crop_size: 32,
            augment: AugmentFlags::default(),
            class_balanced: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.epochs >= 1, || "epochs must be at least 1".into())?;
        ensure(self.batch_size >= 1, || "batch_size must be at least 1".into())?;
        ensure(self.base_lr.is_finite() && self.base_lr >= 0.0, || {
            format!("base_lr must be finite and non-negative, got {}", self.base_lr)
        })?;
        ensure(self.warmup_epochs < self.epochs, || {
            format!("warmup_epochs ({}) must be below epochs ({})", self.warmup_epochs, self.epochs)
        })?;
        ensure((0.0..1.0).contains(&self.label_smooth_eps), || {
            format!("label_smooth_eps must be in [0, 1), got {}", self.label_smooth_eps)
        })?;
        ensure(self.crop_size >= crate::image::MIN_SIDE, || {
            format!("crop_size must be at least {}", crate::image::MIN_SIDE)
        })?;
        if self.augment.cutmix {
            ensure(self.augment.cutmix_alpha > 0.0, || "cutmix_alpha must be positive".into())?;
        }
        if self.augment.rcm {
            ensure(self.augment.rcm_grid >= 1 && self.augment.rcm_k < self.augment.rcm_grid, || {
                "rcm_k must be below rcm_grid".into()
            })?;
        }
        Ok(())
    }

    fn warmup_steps(&self, total_steps: usize) -> usize {
        total_steps * self.warmup_epochs / self.epochs
    }
}

/// `(1 - eps) · onehot(label) + eps / C`.
pub fn smooth_targets(label: usize, num_classes: usize, eps: f64) -> Result<Vec<f64>> {
    ensure((0.0..1.0).contains(&eps), || format!("eps must be in [0, 1), got {eps}"))?;
    ensure(label < num_classes, || format!("label {label} out of range for {num_classes} classes"))?;
    let floor = eps / num_classes as f64;
    Ok((0..num_classes)
        .map(|c| if c == label { 1.0 - eps + floor } else { floor })
        .collect())
}

/// Cross-entropy of `logits` against a probability vector.
pub fn loss(logits: &[f64], target: &[f64]) -> Result<f64> {
    ensure(logits.len() == target.len(), || {
        format!("logits ({}) and target ({}) lengths differ", logits.len(), target.len())
    })?;
    Ok(net::cross_entropy(logits, target))
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_steps(total_steps);
    if step < warmup {
        cfg.base_lr * (step + 1) as f64 / warmup as f64
    } else {
        let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
        0.5 * cfg.base_lr * (1.0 + (PI * progress).cos())
    }
}

pub struct TrainSample<'a> {
    pub image: &'a Image,
    pub target: Vec<f64>,
}

impl<'a> TrainSample<'a> {
    pub fn new(image: &'a Image, target: Vec<f64>) -> Self {
        TrainSample { image, target }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Classifier,
    /// Mean training loss of each epoch.
    pub losses: Vec<f64>,
}

const GRAD_CHUNK: usize = 8;

fn check_data(model: &Classifier, data: &[TrainSample<'_>]) -> Result<()> {
    ensure(!data.is_empty(), || "training data is empty".into())?;
    ensure(data.iter().all(|s| s.target.len() == model.num_classes()), || {
        format!("every target must have length {}", model.num_classes())
    })
}

fn to_f32(params: &[f64]) -> Vec<f32> {
    params.iter().map(|&p| p as f32).collect()
}

/// Applies the configured augmentations to one batch member.
fn augment_sample(
    cfg: &TrainConfig,
    current: &Classifier,
    batch: &[&TrainSample<'_>],
    i: usize,
    sample_seed: u64,
) -> Result<(Image, Vec<f64>)> {
    let flags = &cfg.augment;
    let mut rng = seed::rng(sample_seed, "augment", 0);
    let mut image = batch[i].image.clone();
    let mut target = batch[i].target.clone();
    if flags.flip && rng.gen_bool(0.5) {
        image = image.flip_horizontal();
    }
    if flags.attention_aug && rng.gen_bool(0.5) {
        let attn = current.attention(&image, cfg.crop_size);
        image = if rng.gen_bool(0.5) {
            augment::attention_crop(&image, &attn, 0.5, image.height())?.resize(image.height(), image.width())
        } else {
            augment::attention_drop(&image, &attn, 0.5)?
        };
    }
    if flags.rcm && rng.gen_bool(0.5) {
        let perm = augment::rcm_permutation(flags.rcm_grid, flags.rcm_k, rng.gen())?;
        if image.height() % flags.rcm_grid == 0 && image.width() % flags.rcm_grid == 0 {
            image = augment::rcm_destruct(&image, &perm)?.0;
        }
    }
    if flags.cutmix && batch.len() > 1 && rng.gen_bool(0.5) {
        let j = rng.gen_range(0..batch.len());
        let partner = &batch[j];
        if partner.image.same_dims(&image) {
            let mixed = augment::cutmix(&image, &target, partner.image, &partner.target, flags.cutmix_alpha, rng.gen())?;
            image = mixed.image;
            target = mixed.target;
        }
    }
    Ok((image, target))
}

/// Sums per-sample gradients in fixed-size chunks so the reduction order
/// does not depend on the thread count.
fn batch_gradient(
    layout: Layout,
    params: &[f64],
    samples: &[(Vec<f64>, Vec<f64>)],
    resolution: usize,
) -> (f64, Vec<f64>) {
    let partials: Vec<(f64, Vec<f64>)> = samples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; layout.total()];
            let mut loss = 0.0;
            for (input, target) in chunk {
                let (l, g) = net::loss_and_grad(layout, params, input, resolution, target);
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            (loss, grad)
        })
        .collect();
    let mut grad = vec![0.0; layout.total()];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let n = samples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

struct Schedule {
    total_steps: usize,
}

impl Schedule {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Schedule { total_steps: n.div_ceil(cfg.batch_size) * cfg.epochs }
    }
}

/// Per-class index lists, keyed by each target's argmax.
fn class_groups(data: &[TrainSample<'_>]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let c = crate::fusion::argmax(&s.target);
        if groups.len() <= c {
            groups.resize(c + 1, Vec::new());
        }
        groups[c].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

fn epoch_order(data: &[TrainSample<'_>], cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut rng = seed::rng(cfg.seed, "epoch-order", epoch as u64);
    if cfg.class_balanced {
        let groups = class_groups(data);
        return (0..data.len())
            .map(|_| {
                let g = &groups[rng.gen_range(0..groups.len())];
                g[rng.gen_range(0..g.len())]
            })
            .collect();
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    order
}

/// Plain minibatch SGD under the warmup + cosine schedule. The input model
/// is left untouched.
pub fn train(model: &Classifier, data: &[TrainSample<'_>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(model, data)?;
    let layout = model.layout();
    let resolution = cfg.crop_size;
    let mut params = model.params_f64();
    let sched = Schedule::new(data.len(), cfg);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data, cfg, epoch);
        let mut epoch_loss = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample<'_>> = batch_idx.iter().map(|&i| &data[i]).collect();
            let current = Classifier {
                num_classes: model.num_classes,
                input_resolution: resolution,
                params: to_f32(&params),
            };
            let step_seed = seed::derive(cfg.seed, "step", step as u64);
            let samples = (0..batch.len())
                .map(|i| {
                    let (image, target) = augment_sample(cfg, &current, &batch, i, seed::derive(step_seed, "sample", i as u64))?;
                    Ok((net::prepare_input(&image, resolution), target))
                })
                .collect::<Result<Vec<_>>>()?;
            let (batch_loss, grad) = batch_gradient(layout, &params, &samples, resolution);
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {batch_loss} at epoch {epoch}, step {step}"
                )));
            }
            let lr = lr_at(step, sched.total_steps, cfg);
            params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= lr * g);
            epoch_loss += batch_loss * batch.len() as f64;
            step += 1;
        }
        losses.push(epoch_loss / data.len() as f64);
    }
    let trained = Classifier::from_params(model.num_classes, resolution, to_f32(&params))
        .map_err(|e| Error::Training(e.to_string()))?;
    Ok(TrainOutcome { model: trained, losses })
}

/// Freezes the conv stages and retrains the head at `high_resolution`.
/// Pooled features are computed once per image (and its mirror when
/// flipping is enabled); other augmentations do not apply.
pub fn fix_finetune(
    model: &Classifier,
    data: &[TrainSample<'_>],
    high_resolution: usize,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    cfg.validate()?;
    check_data(model, data)?;
    ensure(high_resolution > model.input_resolution(), || {
        format!(
            "high_resolution ({high_resolution}) must exceed the current resolution ({})",
            model.input_resolution()
        )
    })?;
    let layout = model.layout();
    let features: Vec<[Vec<f64>; 2]> = data
        .par_iter()
        .map(|s| {
            let plain = model.pooled_features(s.image, high_resolution);
            let mirrored = if cfg.augment.flip {
                model.pooled_features(&s.image.flip_horizontal(), high_resolution)
            } else {
                plain.clone()
            };
            [plain, mirrored]
        })
        .collect();
    let mut params = model.params_f64();
    let head_start = layout.conv_len();
    let sched = Schedule::new(data.len(), cfg);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data, cfg, epoch);
        for batch_idx in order.chunks(cfg.batch_size) {
            let mut rng = seed::rng(cfg.seed, "fix-step", step as u64);
            let mut grad = vec![0.0; layout.total()];
            let mut batch_loss = 0.0;
            for &i in batch_idx {
                let view = usize::from(cfg.augment.flip && rng.gen_bool(0.5));
                let (l, g) = net::head_loss_and_grad(layout, &params, &features[i][view], &data[i].target);
                batch_loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at fix step {step}")));
            }
            let lr = lr_at(step, sched.total_steps, cfg);
            let n = batch_idx.len() as f64;
            for k in head_start..params.len() {
                params[k] -= lr * grad[k] / n;
            }
            step += 1;
        }
    }
    let mut out = model.clone();
    for k in head_start..params.len() {
        out.params[k] = params[k] as f32;
    }
    out.input_resolution = high_resolution;
    Ok(out)
}

/// Largest relative disagreement between the analytic gradient and central
/// finite differences over every parameter, at the model's resolution.
pub fn grad_check(model: &Classifier, image: &Image, target: &[f64], epsilon: f64) -> Result<f64> {
    ensure((1e-6..=1e-2).contains(&epsilon), || format!("epsilon must be in [1e-6, 1e-2], got {epsilon}"))?;
    ensure(target.len() == model.num_classes(), || "target length must equal num_classes".into())?;
    let layout = model.layout();
    let res = model.input_resolution();
    let input = net::prepare_input(image, res);
    let params = model.params_f64();
    let (_, analytic) = net::loss_and_grad(layout, &params, &input, res, target);
    let eval = |p: &[f64]| net::cross_entropy(&net::forward(layout, p, &input, res).logits, target);
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for k in 0..params.len() {
        probe[k] = params[k] + epsilon;
        let up = eval(&probe);
        probe[k] = params[k] - epsilon;
        let down = eval(&probe);
        probe[k] = params[k];
        let numeric = (up - down) / (2.0 * epsilon);
        let rel = (analytic[k] - numeric).abs() / (analytic[k].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_targets_examples() {
        let t = smooth_targets(0, 5, 0.2).unwrap();
        let want = [0.84, 0.04, 0.04, 0.04, 0.04];
        assert!(t.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(smooth_targets(2, 4, 0.0).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        let t = smooth_targets(1, 2, 0.3).unwrap();
        assert!((t[0] - 0.15).abs() < 1e-12 && (t[1] - 0.85).abs() < 1e-12);
        assert!(smooth_targets(0, 3, 1.0).is_err());
        assert!(smooth_targets(0, 3, -0.1).is_err());
    }

    #[test]
    fn loss_edge_cases() {
        let l = loss(&[0.3; 7], &smooth_targets(2, 7, 0.2).unwrap()).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        let l = loss(&[1000.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!(loss(&[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn lr_schedule_points() {
        let cfg = TrainConfig { epochs: 50, warmup_epochs: 5, base_lr: 0.025, ..TrainConfig::default() };
        let total = 500;
        assert_eq!(lr_at(50, total, &cfg), 0.025);
        assert!((lr_at(0, total, &cfg) - 0.025 / 50.0).abs() < 1e-15);
        assert!((lr_at(49, total, &cfg) - 0.025).abs() < 1e-15);
        assert!(lr_at(total - 1, total, &cfg) <= 0.025 * PI / 450.0);
        // Mid-decay, evaluated by hand: 0.0125 * (1 + cos(pi * 225/450)) = 0.0125.
        assert!((lr_at(275, total, &cfg) - 0.0125).abs() < 1e-15);
        // 0.0125 * (1 + cos(pi / 3)) = 0.01875.
        assert!((lr_at(200, total, &cfg) - 0.01875).abs() < 1e-15);
    }

    #[test]
    fn class_balanced_order() {
        let img = Image::filled(8, 8, 3, 0.5);
        // 40 samples of class 0, 2 of class 1, 1 of class 2.
        let data: Vec<TrainSample> = [0usize; 40]
            .iter()
            .chain(&[1, 1, 2])
            .map(|&c| TrainSample { image: &img, target: smooth_targets(c, 3, 0.0).unwrap() })
            .collect();
        let cfg = TrainConfig { class_balanced: true, seed: 4, ..TrainConfig::default() };
        let mut counts = [0usize; 3];
        for epoch in 0..200 {
            let order = epoch_order(&data, &cfg, epoch);
            assert_eq!(order.len(), data.len());
            assert_eq!(order, epoch_order(&data, &cfg, epoch));
            for i in order {
                counts[crate::fusion::argmax(&data[i].target)] += 1;
            }
        }
        let total = (200 * data.len()) as f64;
        for c in counts {
            assert!((c as f64 / total - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
        let plain = TrainConfig { class_balanced: false, ..cfg };
        let mut order = epoch_order(&data, &plain, 0);
        order.sort_unstable();
        assert_eq!(order, (0..data.len()).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { label_smooth_eps: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { warmup_epochs: 50, ..TrainConfig::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }
}
