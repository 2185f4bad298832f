//! The small trainable classifier: two 3×3 stride-2 conv stages with ReLU,
//! global average pooling and a linear head. Pooling makes the head
//! independent of input resolution, which the Fix finetune relies on.

pub mod net;
mod train;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::seed;
use crate::tensor::Tensor;

pub use net::{cross_entropy, log_softmax, softmax, Layout, FEATURES};
pub use train::{
    fix_finetune, grad_check, loss, lr_at, smooth_targets, train, AugmentFlags, TrainConfig,
    TrainOutcome, TrainSample,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    num_classes: usize,
    input_resolution: usize,
    params: Vec<f32>,
}

/// Channel-mean of absolute last-stage activations, scaled to peak 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure(values.len() == height * width && height > 0 && width > 0, || {
            format!("attention map {height}x{width} needs {} values", height * width)
        })?;
        ensure(values.iter().all(|v| v.is_finite() && *v >= 0.0), || {
            "attention values must be finite and non-negative".into()
        })?;
        let max = values.iter().copied().fold(0.0, f64::max);
        let values = if max > 0.0 {
            values.into_iter().map(|v| v / max).collect()
        } else {
            values
        };
        Ok(AttentionMap { height, width, values })
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        AttentionMap { height, width, values: vec![1.0; height * width] }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    num_classes: usize,
    input_resolution: usize,
    layers: Vec<LayerEntry>,
}

pub const DEFAULT_RESOLUTION: usize = 32;

impl Classifier {
    /// Glorot-uniform weights, zero biases.
    pub fn init(num_classes: usize, seed: u64) -> Result<Self> {
        ensure(num_classes >= 2, || format!("num_classes must be at least 2, got {num_classes}"))?;
        let layout = Layout { num_classes };
        let mut rng = seed::rng(seed, "init", 0);
        let mut params = Vec::with_capacity(layout.total());
        for spec in layout.specs() {
            if spec.is_bias {
                params.extend(std::iter::repeat(0.0f32).take(spec.len()));
            } else {
                let a = (6.0 / (spec.fan_in + spec.fan_out) as f64).sqrt();
                params.extend((0..spec.len()).map(|_| rng.gen_range(-a..a) as f32));
            }
        }
        Ok(Classifier { num_classes, input_resolution: DEFAULT_RESOLUTION, params })
    }

    pub fn from_params(num_classes: usize, input_resolution: usize, params: Vec<f32>) -> Result<Self> {
        ensure(num_classes >= 2, || "num_classes must be at least 2".into())?;
        ensure(input_resolution >= crate::image::MIN_SIDE, || {
            format!("input_resolution must be at least {}", crate::image::MIN_SIDE)
        })?;
        let layout = Layout { num_classes };
        ensure(params.len() == layout.total(), || {
            format!("expected {} parameters, got {}", layout.total(), params.len())
        })?;
        ensure(params.iter().all(|p| p.is_finite()), || "parameters must be finite".into())?;
        Ok(Classifier { num_classes, input_resolution, params })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_resolution(&self) -> usize {
        self.input_resolution
    }

    pub fn set_input_resolution(&mut self, resolution: usize) {
        self.input_resolution = resolution;
    }

    pub fn layout(&self) -> Layout {
        Layout { num_classes: self.num_classes }
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn params_f64(&self) -> Vec<f64> {
        self.params.iter().map(|&p| p as f64).collect()
    }

    /// Parameter slice by tensor name (`conv1_weight`, ..., `head_bias`).
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let layout = self.layout();
        let offsets = layout.offsets();
        layout
            .specs()
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.params[offsets[i]..offsets[i + 1]])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let layout = self.layout();
        let offsets = layout.offsets();
        let i = layout.specs().iter().position(|s| s.name == name)?;
        Some(&mut self.params[offsets[i]..offsets[i + 1]])
    }

    pub fn conv_params(&self) -> &[f32] {
        &self.params[..self.layout().conv_len()]
    }

    /// A copy with the conv stages of `self` and a freshly initialised head
    /// for `num_classes` outputs.
    pub fn with_new_head(&self, num_classes: usize, seed: u64) -> Result<Classifier> {
        let mut fresh = Classifier::init(num_classes, seed)?;
        let n = self.layout().conv_len();
        fresh.params[..n].copy_from_slice(&self.params[..n]);
        fresh.input_resolution = self.input_resolution;
        Ok(fresh)
    }

    /// Like [`Classifier::with_new_head`], but each conv layer is scaled back
    /// to the weight norm of a fresh initialisation. ReLU is positively
    /// homogeneous, so the transferred features only change by a constant
    /// factor; the head then starts from a sane logit scale.
    pub fn with_new_head_rescaled(&self, num_classes: usize, seed: u64) -> Result<Classifier> {
        let mut out = self.with_new_head(num_classes, seed)?;
        let fresh = Classifier::init(num_classes, seed)?;
        let norm = |m: &Classifier, name: &str| {
            m.tensor(name).map_or(0.0, |t| t.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        };
        let ratio = |name: &str| {
            let n = norm(&out, name);
            if n > 0.0 { norm(&fresh, name) / n } else { 1.0 }
        };
        let (a1, a2) = (ratio("conv1_weight"), ratio("conv2_weight"));
        for (name, a) in [("conv1_weight", a1), ("conv1_bias", a1), ("conv2_weight", a2), ("conv2_bias", a1 * a2)] {
            if let Some(t) = out.tensor_mut(name) {
                t.iter_mut().for_each(|v| *v = (*v as f64 * a) as f32);
            }
        }
        Ok(out)
    }

    /// Pre-softmax logits and the last feature map (`side × side × 16`).
    pub fn forward(&self, image: &Image, resolution: usize) -> (Vec<f64>, Vec<f64>) {
        let input = net::prepare_input(image, resolution);
        let trace = net::forward(self.layout(), &self.params_f64(), &input, resolution);
        (trace.logits, trace.act2)
    }

    /// Logits at the model's own input resolution.
    pub fn logits(&self, image: &Image) -> Vec<f64> {
        self.forward(image, self.input_resolution).0
    }

    pub fn pooled_features(&self, image: &Image, resolution: usize) -> Vec<f64> {
        let input = net::prepare_input(image, resolution);
        net::forward(self.layout(), &self.params_f64(), &input, resolution).pooled
    }

    pub fn attention(&self, image: &Image, resolution: usize) -> AttentionMap {
        let input = net::prepare_input(image, resolution);
        let trace = net::forward(self.layout(), &self.params_f64(), &input, resolution);
        let side = trace.side2;
        let values = trace
            .act2
            .chunks_exact(FEATURES)
            .map(|px| px.iter().map(|v| v.abs()).sum::<f64>() / FEATURES as f64)
            .collect();
        AttentionMap::new(side, side, values).expect("activations are finite")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let layout = self.layout();
        let offsets = layout.offsets();
        let mut layers = Vec::new();
        for (i, spec) in layout.specs().iter().enumerate() {
            let file = format!("{}.fmt1", spec.name);
            Tensor::new(spec.dims(), self.params[offsets[i]..offsets[i + 1]].to_vec())?
                .write(&dir.join(&file))?;
            layers.push(LayerEntry { name: spec.name.to_string(), shape: spec.dims(), file });
        }
        let meta = CheckpointMeta {
            num_classes: self.num_classes,
            input_resolution: self.input_resolution,
            layers,
        };
        let path = dir.join("model.json");
        let text = serde_json::to_string_pretty(&meta).expect("checkpoint metadata serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Classifier> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| Error::integrity(format!("{}: {e}", path.display())))?;
        let layout = Layout { num_classes: meta.num_classes };
        let specs = layout.specs();
        if meta.layers.len() != specs.len() {
            return Err(Error::integrity(format!("{}: expected {} layers", path.display(), specs.len())));
        }
        let mut params = Vec::with_capacity(layout.total());
        for (entry, spec) in meta.layers.iter().zip(specs.iter()) {
            let file = dir.join(&entry.file);
            let t = Tensor::read(&file)?;
            if entry.name != spec.name || t.dims != spec.dims() || entry.shape != spec.dims() {
                return Err(Error::integrity(format!(
                    "{}: expected {} with shape {:?}, found {} {:?}",
                    file.display(),
                    spec.name,
                    spec.dims(),
                    entry.name,
                    t.dims
                )));
            }
            params.extend(t.data);
        }
        Classifier::from_params(meta.num_classes, meta.input_resolution, params)
            .map_err(|e| Error::integrity(format!("{}: {e}", dir.display())))
    }
}
