//! Seeded synthetic fine-grained datasets.
//!
//! Every image is a cluttered habitat background (soft ellipses plus Gaussian
//! noise under a global lighting factor) carrying one striped motif. The class
//! is the stripe period, so two classes differ only in a small texture patch
//! while backgrounds vary freely. In-class species share one habitat; each
//! out-of-class species lives in its own habitat, which is what makes the
//! out-of-class split clusterable from pooled pixels.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::seed;
use crate::tensor::Tensor;

pub type ClassId = usize;

pub const CHANNELS: usize = 3;
pub const NOISE_SIGMA: f64 = 0.05;
const BASE_PERIOD: f64 = 2.2;
const PERIOD_STEP: f64 = 0.3;
/// Stripes modulate the local surface as `v · (1 + a·sin)`, which keeps
/// the mean colour of the patch.
const STRIPE_AMPLITUDE: f64 = 1.0;
const BLOB_OFFSET: f64 = 0.06;
const LIGHTING: [f64; 2] = [1.0, 0.6];
const INCLASS_TINT: [f64; 3] = [0.42, 0.55, 0.33];
const TINT_JITTER: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shot {
    Long,
    Medium,
    Close,
}

impl Shot {
    pub const ALL: [Shot; 3] = [Shot::Long, Shot::Medium, Shot::Close];

    /// Closed interval of motif bounding-box area over image area.
    pub fn area_band(self) -> (f64, f64) {
        match self {
            Shot::Long => (0.01, 0.06),
            Shot::Medium => (0.10, 0.40),
            Shot::Close => (0.55, 0.90),
        }
    }

    pub fn contains(self, ratio: f64) -> bool {
        let (lo, hi) = self.area_band();
        (lo..=hi).contains(&ratio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub image: Image,
    pub label: Option<ClassId>,
    /// Ground truth. Only evaluation code reads this on unlabeled splits.
    pub hidden_label: ClassId,
    pub shot: Shot,
    pub target_area_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    LabeledTrain,
    Validation,
    InclassUnlabeled,
    OutclassUnlabeled,
    Test,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::LabeledTrain,
        Split::Validation,
        Split::InclassUnlabeled,
        Split::OutclassUnlabeled,
        Split::Test,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::LabeledTrain => "labeled_train",
            Split::Validation => "validation",
            Split::InclassUnlabeled => "inclass_unlabeled",
            Split::OutclassUnlabeled => "outclass_unlabeled",
            Split::Test => "test",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            Split::LabeledTrain => "train",
            Split::Validation => "val",
            Split::InclassUnlabeled => "in",
            Split::OutclassUnlabeled => "out",
            Split::Test => "test",
        }
    }

    fn is_labeled(self) -> bool {
        matches!(self, Split::LabeledTrain | Split::Validation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub labeled_train: usize,
    pub validation: usize,
    pub inclass_unlabeled: usize,
    pub outclass_unlabeled: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            labeled_train: 300,
            validation: 200,
            inclass_unlabeled: 2000,
            outclass_unlabeled: 4000,
            test: 500,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::LabeledTrain => self.labeled_train,
            Split::Validation => self.validation,
            Split::InclassUnlabeled => self.inclass_unlabeled,
            Split::OutclassUnlabeled => self.outclass_unlabeled,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub num_inclass_classes: usize,
    pub num_outclass_classes: usize,
    pub image_size: usize,
    pub counts: SplitCounts,
    pub imbalance_exponent: f64,
    /// Probabilities of Long, Medium, Close.
    pub shot_mix: [f64; 3],
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_inclass_classes: 10,
            num_outclass_classes: 20,
            image_size: 32,
            counts: SplitCounts::default(),
            imbalance_exponent: 1.5,
            shot_mix: [0.3, 0.4, 0.3],
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.num_inclass_classes >= 2, || {
            "num_inclass_classes must be at least 2".into()
        })?;
        ensure(self.num_outclass_classes >= 1, || {
            "num_outclass_classes must be at least 1".into()
        })?;
        ensure(self.image_size >= crate::image::MIN_SIDE, || {
            format!("image_size must be at least {}", crate::image::MIN_SIDE)
        })?;
        for split in Split::ALL {
            ensure(self.counts.get(split) > 0, || {
                format!("counts.{} must be positive", split.name())
            })?;
        }
        ensure(self.counts.validation % self.num_inclass_classes == 0, || {
            format!(
                "counts.validation ({}) must be a multiple of num_inclass_classes ({}) to stay balanced",
                self.counts.validation, self.num_inclass_classes
            )
        })?;
        ensure(
            self.shot_mix.iter().all(|p| p.is_finite() && *p >= 0.0)
                && (self.shot_mix.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
            || format!("shot_mix {:?} must be non-negative and sum to 1", self.shot_mix),
        )?;
        ensure(self.imbalance_exponent.is_finite(), || {
            "imbalance_exponent must be finite".into()
        })?;
        let counts = power_law_counts(
            self.counts.labeled_train,
            self.num_inclass_classes,
            self.imbalance_exponent,
        );
        let (min, max) = min_max(&counts);
        ensure(min >= 1 && max >= 3 * min, || {
            format!(
                "imbalance_exponent {} with counts.labeled_train {} yields per-class counts {counts:?}; need every class present and max >= 3 x min",
                self.imbalance_exponent, self.counts.labeled_train
            )
        })?;
        Ok(())
    }

    pub fn stripe_period(class: ClassId) -> f64 {
        BASE_PERIOD + class as f64 * PERIOD_STEP
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub labeled_train: Vec<Example>,
    pub validation: Vec<Example>,
    pub inclass_unlabeled: Vec<Example>,
    pub outclass_unlabeled: Vec<Example>,
    pub test: Vec<Example>,
    pub num_inclass_classes: usize,
    pub num_outclass_classes: usize,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::LabeledTrain => &self.labeled_train,
            Split::Validation => &self.validation,
            Split::InclassUnlabeled => &self.inclass_unlabeled,
            Split::OutclassUnlabeled => &self.outclass_unlabeled,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Example> {
        match split {
            Split::LabeledTrain => &mut self.labeled_train,
            Split::Validation => &mut self.validation,
            Split::InclassUnlabeled => &mut self.inclass_unlabeled,
            Split::OutclassUnlabeled => &mut self.outclass_unlabeled,
            Split::Test => &mut self.test,
        }
    }

    pub fn total_len(&self) -> usize {
        Split::ALL.iter().map(|&s| self.split(s).len()).sum()
    }

    /// Checks every bundle invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_inclass_classes;
        ensure_integrity(c >= 2, || "num_inclass_classes must be at least 2".into())?;

        let mut ids = HashSet::new();
        for split in Split::ALL {
            for ex in self.split(split) {
                ensure_integrity(ids.insert(ex.id.as_str()), || format!("duplicate id `{}`", ex.id))?;
                ensure_integrity(ex.shot.contains(ex.target_area_ratio), || {
                    format!(
                        "`{}`: area ratio {} outside the {:?} band",
                        ex.id, ex.target_area_ratio, ex.shot
                    )
                })?;
                let inclass = ex.hidden_label < c;
                match split {
                    Split::OutclassUnlabeled => ensure_integrity(
                        !inclass && ex.hidden_label < c + self.num_outclass_classes,
                        || format!("`{}`: out-of-class label {} not in the out-of-class range", ex.id, ex.hidden_label),
                    )?,
                    _ => ensure_integrity(inclass, || {
                        format!("`{}`: label {} outside the in-class range", ex.id, ex.hidden_label)
                    })?,
                }
                if split.is_labeled() {
                    ensure_integrity(ex.label == Some(ex.hidden_label), || {
                        format!("`{}`: visible label disagrees with ground truth", ex.id)
                    })?;
                } else {
                    ensure_integrity(ex.label.is_none(), || {
                        format!("`{}`: unlabeled split carries a visible label", ex.id)
                    })?;
                }
            }
        }

        let val = class_counts(&self.validation, c);
        ensure_integrity(val.iter().all(|&n| n == val[0]), || {
            format!("validation is not balanced: {val:?}")
        })?;
        let train = class_counts(&self.labeled_train, c);
        let (min, max) = min_max(&train);
        ensure_integrity(min >= 1 && max >= 3 * min, || {
            format!("labeled_train is not imbalanced enough: {train:?}")
        })?;
        Ok(())
    }
}

fn ensure_integrity(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Integrity(msg()))
    }
}

fn class_counts(examples: &[Example], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for ex in examples {
        if ex.hidden_label < classes {
            counts[ex.hidden_label] += 1;
        }
    }
    counts
}

fn min_max(v: &[usize]) -> (usize, usize) {
    (
        v.iter().copied().min().unwrap_or(0),
        v.iter().copied().max().unwrap_or(0),
    )
}

/// Per-rank counts proportional to `rank^-exponent` (rank starts at 1),
/// rounded by largest remainder so they sum to `total`.
pub fn power_law_counts(total: usize, classes: usize, exponent: f64) -> Vec<usize> {
    let weights: Vec<f64> = (1..=classes).map(|r| (r as f64).powf(-exponent)).collect();
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Habitat tints for out-of-class species, chosen by greedy farthest-point
/// selection on a colour grid so that every (tint, lighting) pair is far
/// from every other one and from the in-class habitat.
pub fn outclass_palette(n: usize) -> Vec<[f64; 3]> {
    const LEVELS: [f64; 5] = [0.15, 0.32, 0.5, 0.68, 0.85];
    let lit = |t: &[f64; 3]| LIGHTING.map(|l| t.map(|v| v * l));
    let dist2 = |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let gap = |a: &[f64; 3], b: &[f64; 3]| {
        let (la, lb) = (lit(a), lit(b));
        la.iter()
            .flat_map(|x| lb.iter().map(move |y| dist2(x, y)))
            .fold(f64::INFINITY, f64::min)
    };
    let candidates: Vec<[f64; 3]> = LEVELS
        .iter()
        .flat_map(|&r| LEVELS.iter().flat_map(move |&g| LEVELS.iter().map(move |&b| [r, g, b])))
        .collect();
    let mut chosen: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut anchors = vec![INCLASS_TINT];
    for _ in 0..n {
        let mut best = None;
        let mut best_gap = f64::NEG_INFINITY;
        for cand in &candidates {
            if chosen.contains(cand) {
                continue;
            }
            let own = dist2(&lit(cand)[0], &lit(cand)[1]);
            let g = anchors.iter().map(|a| gap(cand, a)).fold(own, f64::min);
            if g > best_gap + 1e-12 {
                best_gap = g;
                best = Some(*cand);
            }
        }
        // More species than grid points: reuse in order.
        let pick = best.unwrap_or(candidates[chosen.len() % candidates.len()]);
        chosen.push(pick);
        anchors.push(pick);
    }
    chosen
}

struct Motif {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    period: f64,
    orientation: f64,
    phase: f64,
}

/// Picks an integer box whose area ratio falls inside the shot band.
fn draw_box(rng: &mut impl Rng, size: usize, shot: Shot) -> (usize, usize) {
    let total = (size * size) as f64;
    let admissible = |max_aspect: f64| -> Vec<(usize, usize)> {
        (1..=size)
            .flat_map(|h| (1..=size).map(move |w| (h, w)))
            .filter(|&(h, w)| {
                let aspect = h as f64 / w as f64;
                shot.contains((h * w) as f64 / total) && aspect <= max_aspect && aspect >= 1.0 / max_aspect
            })
            .collect()
    };
    let mut options = admissible(1.5);
    if options.is_empty() {
        options = admissible(f64::INFINITY);
    }
    *options.choose(rng).expect("every shot band admits a box for size >= 8")
}

fn render(rng: &mut impl Rng, size: usize, tint: [f64; 3], motif: &Motif) -> Image {
    let lighting = LIGHTING[rng.gen_range(0..LIGHTING.len())];
    let mut px = vec![0f64; size * size * CHANNELS];
    for (i, v) in px.iter_mut().enumerate() {
        *v = tint[i % CHANNELS];
    }

    let s = size as f64;
    for _ in 0..rng.gen_range(5..=12) {
        let cy = rng.gen_range(0.0..s);
        let cx = rng.gen_range(0.0..s);
        let ry = rng.gen_range(0.1..0.35) * s;
        let rx = rng.gen_range(0.1..0.35) * s;
        let rot = rng.gen_range(0.0..PI);
        let offset: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-BLOB_OFFSET..BLOB_OFFSET));
        let (sin, cos) = rot.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = (dx * cos + dy * sin) / rx;
                let w = (-dx * sin + dy * cos) / ry;
                let weight = (1.0 - (u * u + w * w)).max(0.0);
                if weight > 0.0 {
                    let base = (y * size + x) * CHANNELS;
                    for c in 0..CHANNELS {
                        px[base + c] += weight * offset[c];
                    }
                }
            }
        }
    }

    let (sin, cos) = motif.orientation.sin_cos();
    for y in motif.top..motif.top + motif.height {
        for x in motif.left..motif.left + motif.width {
            let u = (x - motif.left) as f64 * cos + (y - motif.top) as f64 * sin;
            let stripe = STRIPE_AMPLITUDE * (2.0 * PI * u / motif.period + motif.phase).sin();
            let base = (y * size + x) * CHANNELS;
            for c in 0..CHANNELS {
                px[base + c] *= 1.0 + stripe;
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let pixels = px
        .into_iter()
        .map(|v| ((v + noise.sample(rng)) * lighting).clamp(0.0, 1.0) as f32)
        .collect();
    Image::raw(size, size, CHANNELS, pixels)
}

fn make_example(
    spec: &GenSpec,
    split: Split,
    index: usize,
    class: ClassId,
    palette: &[[f64; 3]],
) -> Example {
    let mut rng = seed::rng(spec.seed, split.name(), index as u64);
    let size = spec.image_size;
    let u: f64 = rng.gen();
    let shot = if u < spec.shot_mix[0] {
        Shot::Long
    } else if u < spec.shot_mix[0] + spec.shot_mix[1] {
        Shot::Medium
    } else {
        Shot::Close
    };
    let (height, width) = draw_box(&mut rng, size, shot);
    let motif = Motif {
        top: rng.gen_range(0..=size - height),
        left: rng.gen_range(0..=size - width),
        height,
        width,
        period: GenSpec::stripe_period(class),
        orientation: rng.gen_range(-0.2..0.2),
        phase: rng.gen_range(0.0..2.0 * PI),
    };
    let tint = if class < spec.num_inclass_classes {
        INCLASS_TINT.map(|t| t + rng.gen_range(-TINT_JITTER..TINT_JITTER))
    } else {
        palette[class - spec.num_inclass_classes]
    };
    let image = render(&mut rng, size, tint, &motif);
    Example {
        id: format!("{}-{index:05}", split.id_prefix()),
        image,
        label: split.is_labeled().then_some(class),
        hidden_label: class,
        shot,
        target_area_ratio: (height * width) as f64 / (size * size) as f64,
    }
}

/// Deterministic class sequence for one split.
fn split_classes(spec: &GenSpec, split: Split) -> Vec<ClassId> {
    let c = spec.num_inclass_classes;
    let n = spec.counts.get(split);
    let mut rng = seed::rng(spec.seed, "classes", split as u64);
    let mut classes: Vec<ClassId> = match split {
        Split::LabeledTrain => {
            // Class c has rank C - c: the rarest classes carry the shortest periods.
            power_law_counts(n, c, spec.imbalance_exponent)
                .into_iter()
                .enumerate()
                .flat_map(|(rank, count)| std::iter::repeat(c - 1 - rank).take(count))
                .collect()
        }
        Split::Validation => (0..n).map(|i| i % c).collect(),
        Split::InclassUnlabeled | Split::Test => (0..n).map(|_| rng.gen_range(0..c)).collect(),
        Split::OutclassUnlabeled => (0..n)
            .map(|_| c + rng.gen_range(0..spec.num_outclass_classes))
            .collect(),
    };
    classes.shuffle(&mut rng);
    classes
}

pub fn generate(spec: &GenSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let palette = outclass_palette(spec.num_outclass_classes);
    let mut bundle = DatasetBundle {
        labeled_train: Vec::new(),
        validation: Vec::new(),
        inclass_unlabeled: Vec::new(),
        outclass_unlabeled: Vec::new(),
        test: Vec::new(),
        num_inclass_classes: spec.num_inclass_classes,
        num_outclass_classes: spec.num_outclass_classes,
    };
    for split in Split::ALL {
        let examples = split_classes(spec, split)
            .into_iter()
            .enumerate()
            .map(|(i, class)| make_example(spec, split, i, class, &palette))
            .collect();
        *bundle.split_mut(split) = examples;
    }
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Persistence

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub label: Option<ClassId>,
    pub hidden_label: ClassId,
    pub shot: Shot,
    pub target_area_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub gen_spec: Option<GenSpec>,
    pub num_inclass_classes: usize,
    pub num_outclass_classes: usize,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path, gen_spec: Option<&GenSpec>) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let mut entries = Vec::new();
        for ex in bundle.split(split) {
            let file = format!("images/{}.fmt1", ex.id);
            ex.image.to_tensor().write(&dir.join(&file))?;
            entries.push(ManifestEntry {
                id: ex.id.clone(),
                file,
                label: ex.label,
                hidden_label: ex.hidden_label,
                shot: ex.shot,
                target_area_ratio: ex.target_area_ratio,
            });
        }
        splits.insert(split.name().to_string(), entries);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        gen_spec: gen_spec.cloned(),
        num_inclass_classes: bundle.num_inclass_classes,
        num_outclass_classes: bundle.num_outclass_classes,
        splits,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::integrity(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::integrity(format!(
            "{}: unsupported manifest version {}",
            path.display(),
            manifest.version
        )));
    }
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let mut manifest = read_manifest(dir)?;
    let mut bundle = DatasetBundle {
        labeled_train: Vec::new(),
        validation: Vec::new(),
        inclass_unlabeled: Vec::new(),
        outclass_unlabeled: Vec::new(),
        test: Vec::new(),
        num_inclass_classes: manifest.num_inclass_classes,
        num_outclass_classes: manifest.num_outclass_classes,
    };
    for split in Split::ALL {
        let entries = manifest.splits.remove(split.name()).ok_or_else(|| {
            Error::integrity(format!("manifest is missing split `{}`", split.name()))
        })?;
        let mut examples = Vec::with_capacity(entries.len());
        for entry in entries {
            let path = dir.join(&entry.file);
            let image = Image::from_tensor(Tensor::read(&path)?).map_err(|e| match e {
                Error::Validation(msg) => Error::integrity(format!("{}: {msg}", path.display())),
                other => other,
            })?;
            examples.push(Example {
                id: entry.id,
                image,
                label: entry.label,
                hidden_label: entry.hidden_label,
                shot: entry.shot,
                target_area_ratio: entry.target_area_ratio,
            });
        }
        *bundle.split_mut(split) = examples;
    }
    if let Some(extra) = manifest.splits.keys().next() {
        return Err(Error::integrity(format!("manifest has unknown split `{extra}`")));
    }
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GenSpec {
        GenSpec {
            num_inclass_classes: 4,
            num_outclass_classes: 3,
            image_size: 16,
            counts: SplitCounts {
                labeled_train: 40,
                validation: 8,
                inclass_unlabeled: 10,
                outclass_unlabeled: 10,
                test: 6,
            },
            seed: 3,
            ..GenSpec::default()
        }
    }

    #[test]
    fn validation_split_is_exactly_balanced() {
        let spec = GenSpec {
            counts: SplitCounts { validation: 200, labeled_train: 60, inclass_unlabeled: 5, outclass_unlabeled: 5, test: 5 },
            ..GenSpec::default()
        };
        let b = generate(&spec).unwrap();
        assert_eq!(class_counts(&b.validation, 10), vec![20; 10]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 4;
        assert_ne!(generate(&other).unwrap(), a);
    }

    #[test]
    fn generated_bundle_satisfies_invariants() {
        let b = generate(&small_spec()).unwrap();
        b.validate().unwrap();
        for split in Split::ALL {
            for ex in b.split(split) {
                assert!(ex.shot.contains(ex.target_area_ratio));
            }
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut s = small_spec();
        s.counts.test = 0;
        assert!(generate(&s).unwrap_err().to_string().contains("counts.test"));
        let mut s = small_spec();
        s.shot_mix = [0.5, 0.5, 0.1];
        assert!(generate(&s).unwrap_err().to_string().contains("shot_mix"));
        let mut s = small_spec();
        s.counts.validation = 9;
        assert!(generate(&s).unwrap_err().to_string().contains("counts.validation"));
        let mut s = small_spec();
        s.imbalance_exponent = 0.0;
        assert!(generate(&s).unwrap_err().to_string().contains("imbalance_exponent"));
    }

    #[test]
    fn power_law_counts_sum_and_decay() {
        let c = power_law_counts(300, 10, 1.5);
        assert_eq!(c.iter().sum::<usize>(), 300);
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
        assert!(c[0] >= 3 * c[9]);
    }

    #[test]
    fn palette_is_distinct() {
        let p = outclass_palette(20);
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                assert_ne!(p[i], p[j]);
            }
        }
    }

    #[test]
    fn draw_box_respects_band_at_minimum_size() {
        let mut rng = seed::rng(0, "t", 0);
        for shot in Shot::ALL {
            for _ in 0..20 {
                let (h, w) = draw_box(&mut rng, 8, shot);
                assert!(shot.contains((h * w) as f64 / 64.0));
            }
        }
    }

    fn pixel_distance(a: &Image, b: &Image) -> f64 {
        a.pixels().iter().zip(b.pixels()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn classes_differ_less_than_backgrounds() {
        // Same shot and box position; orientation, phase and background are
        // drawn per image exactly as the generator does.
        let mut rng = seed::rng(11, "fine-grained", 0);
        let (mut same, mut diff) = (0.0, 0.0);
        for _ in 0..100 {
            let shot = Shot::ALL[rng.gen_range(0..3)];
            let (height, width) = draw_box(&mut rng, 32, shot);
            let c1 = rng.gen_range(0..10);
            let c2 = (c1 + rng.gen_range(1..10)) % 10;
            let top = rng.gen_range(0..=32 - height);
            let left = rng.gen_range(0..=32 - width);
            let mut draw = |class| {
                let motif = Motif {
                    top,
                    left,
                    height,
                    width,
                    period: GenSpec::stripe_period(class),
                    orientation: rng.gen_range(-0.2..0.2),
                    phase: rng.gen_range(0.0..2.0 * PI),
                };
                render(&mut rng, 32, INCLASS_TINT, &motif)
            };
            let (a, b, c) = (draw(c1), draw(c1), draw(c2));
            same += pixel_distance(&a, &b);
            diff += pixel_distance(&a, &c);
        }
        let rel = (diff - same).abs() / same;
        assert!(rel < 0.2, "inter-class distance differs from intra-class by {:.1}%", rel * 100.0);
    }

    #[test]
    fn labeled_train_follows_rank_order() {
        let b = generate(&GenSpec::default()).unwrap();
        let counts = class_counts(&b.labeled_train, 10);
        assert_eq!(counts, power_law_counts(300, 10, 1.5).into_iter().rev().collect::<Vec<_>>());
        assert!(counts[9] >= 3 * counts[0]);
    }
}
