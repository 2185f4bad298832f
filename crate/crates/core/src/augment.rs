//! Image-space augmentation and test-time views.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{ensure, Result};
use crate::image::{Image, MIN_SIDE};
use crate::model::AttentionMap;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub image: Image,
    pub target: Vec<f64>,
    /// Weight of the first input in `target`.
    pub lam: f64,
}

fn check_pair(a: &Image, ta: &[f64], b: &Image, tb: &[f64]) -> Result<()> {
    ensure(a.same_dims(b), || {
        format!(
            "image dims differ: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )
    })?;
    ensure(ta.len() == tb.len(), || format!("target lengths differ: {} vs {}", ta.len(), tb.len()))
}

fn mix_targets(ta: &[f64], tb: &[f64], lam: f64) -> Vec<f64> {
    ta.iter().zip(tb).map(|(a, b)| lam * a + (1.0 - lam) * b).collect()
}

fn draw_lambda(alpha: f64, seed: u64, tag: &str) -> Result<(f64, seed::Rng)> {
    ensure(alpha > 0.0 && alpha.is_finite(), || format!("alpha must be positive, got {alpha}"))?;
    let mut rng = seed::rng(seed, tag, 0);
    let lam = Beta::new(alpha, alpha).expect("positive shape").sample(&mut rng);
    Ok((lam, rng))
}

/// Pixel box `[top, top+height) × [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Box of side fractions `sqrt(1 - lam)` centred at `(cy, cx)`, clipped.
pub fn cutmix_box(height: usize, width: usize, lam: f64, cy: f64, cx: f64) -> CutBox {
    let frac = (1.0 - lam).clamp(0.0, 1.0).sqrt();
    let (ch, cw) = (height as f64 * frac, width as f64 * frac);
    let y0 = (cy - ch / 2.0).round().clamp(0.0, height as f64) as usize;
    let y1 = (cy + ch / 2.0).round().clamp(0.0, height as f64) as usize;
    let x0 = (cx - cw / 2.0).round().clamp(0.0, width as f64) as usize;
    let x1 = (cx + cw / 2.0).round().clamp(0.0, width as f64) as usize;
    CutBox { top: y0, left: x0, height: y1 - y0, width: x1 - x0 }
}

/// Pastes `b` into `a` inside `cut`; `lam` is recomputed from the box area.
pub fn cutmix_with_box(a: &Image, ta: &[f64], b: &Image, tb: &[f64], cut: CutBox) -> Result<MixedSample> {
    check_pair(a, ta, b, tb)?;
    ensure(cut.top + cut.height <= a.height() && cut.left + cut.width <= a.width(), || {
        format!("box {cut:?} exceeds the image")
    })?;
    let mut image = a.clone();
    for y in cut.top..cut.top + cut.height {
        for x in cut.left..cut.left + cut.width {
            for c in 0..a.channels() {
                image.set(y, x, c, b.get(y, x, c));
            }
        }
    }
    let total = (a.height() * a.width()) as f64;
    let lam = 1.0 - (cut.height * cut.width) as f64 / total;
    Ok(MixedSample { image, target: mix_targets(ta, tb, lam), lam })
}

/// CutMix with a given `lam` and box centre (test hook and inner step).
pub fn cutmix_with(a: &Image, ta: &[f64], b: &Image, tb: &[f64], lam: f64, cy: f64, cx: f64) -> Result<MixedSample> {
    check_pair(a, ta, b, tb)?;
    cutmix_with_box(a, ta, b, tb, cutmix_box(a.height(), a.width(), lam, cy, cx))
}

pub fn cutmix(a: &Image, ta: &[f64], b: &Image, tb: &[f64], alpha: f64, seed: u64) -> Result<MixedSample> {
    check_pair(a, ta, b, tb)?;
    let (lam, mut rng) = draw_lambda(alpha, seed, "cutmix")?;
    let cy = rng.gen_range(0.0..a.height() as f64);
    let cx = rng.gen_range(0.0..a.width() as f64);
    cutmix_with(a, ta, b, tb, lam, cy, cx)
}

pub fn mixup_with(a: &Image, ta: &[f64], b: &Image, tb: &[f64], lam: f64) -> Result<MixedSample> {
    check_pair(a, ta, b, tb)?;
    ensure((0.0..=1.0).contains(&lam), || format!("lam must be in [0, 1], got {lam}"))?;
    let pixels = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let v = lam * x as f64 + (1.0 - lam) * y as f64;
            (v as f32).clamp(x.min(y), x.max(y))
        })
        .collect();
    Ok(MixedSample {
        image: Image::raw(a.height(), a.width(), a.channels(), pixels),
        target: mix_targets(ta, tb, lam),
        lam,
    })
}

pub fn mixup(a: &Image, ta: &[f64], b: &Image, tb: &[f64], alpha: f64, seed: u64) -> Result<MixedSample> {
    check_pair(a, ta, b, tb)?;
    let (lam, _) = draw_lambda(alpha, seed, "mixup")?;
    mixup_with(a, ta, b, tb, lam)
}

// ---------------------------------------------------------------------------
// Region confusion

/// Tile shuffle on an `n × n` grid. `mapping[dest] = source`, both as
/// row-major tile indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPermutation {
    pub grid_n: usize,
    pub jitter_k: usize,
    pub mapping: Vec<usize>,
}

impl RegionPermutation {
    pub fn identity(grid_n: usize) -> Self {
        RegionPermutation { grid_n, jitter_k: 0, mapping: (0..grid_n * grid_n).collect() }
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.mapping.len()];
        self.mapping.len() == self.grid_n * self.grid_n
            && self.mapping.iter().all(|&s| s < seen.len() && !std::mem::replace(&mut seen[s], true))
    }

    /// Largest per-axis displacement between a tile's source and destination.
    pub fn max_displacement(&self) -> usize {
        let n = self.grid_n;
        self.mapping
            .iter()
            .enumerate()
            .map(|(dest, &src)| (dest / n).abs_diff(src / n).max((dest % n).abs_diff(src % n)))
            .max()
            .unwrap_or(0)
    }

    pub fn inverse(&self) -> RegionPermutation {
        let mut inv = vec![0; self.mapping.len()];
        for (dest, &src) in self.mapping.iter().enumerate() {
            inv[src] = dest;
        }
        RegionPermutation { grid_n: self.grid_n, jitter_k: self.jitter_k, mapping: inv }
    }
}

/// Order of `0..n` after sorting by `j + U(-k, k)`.
fn jittered_order(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let keys: Vec<f64> = (0..n)
        .map(|j| j as f64 + if k == 0 { 0.0 } else { rng.gen_range(-(k as f64)..=k as f64) })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap().then(a.cmp(&b)));
    order
}

pub fn rcm_permutation(grid_n: usize, jitter_k: usize, seed: u64) -> Result<RegionPermutation> {
    ensure(grid_n >= 1, || "grid_n must be at least 1".into())?;
    ensure(jitter_k < grid_n, || format!("jitter_k ({jitter_k}) must be smaller than grid_n ({grid_n})"))?;
    let n = grid_n;
    let mut rng = seed::rng(seed, "rcm", 0);
    // Columns are shuffled within each row, then rows within each column.
    let mut layout: Vec<usize> = (0..n * n).collect();
    for row in 0..n {
        let order = jittered_order(&mut rng, n, jitter_k);
        let current: Vec<usize> = layout[row * n..(row + 1) * n].to_vec();
        for (col, &from) in order.iter().enumerate() {
            layout[row * n + col] = current[from];
        }
    }
    for col in 0..n {
        let order = jittered_order(&mut rng, n, jitter_k);
        let current: Vec<usize> = (0..n).map(|row| layout[row * n + col]).collect();
        for (row, &from) in order.iter().enumerate() {
            layout[row * n + col] = current[from];
        }
    }
    Ok(RegionPermutation { grid_n, jitter_k, mapping: layout })
}

fn move_tiles(image: &Image, perm: &RegionPermutation) -> Result<Image> {
    let n = perm.grid_n;
    ensure(image.height() % n == 0 && image.width() % n == 0, || {
        format!("image {}x{} is not divisible into a {n}x{n} grid", image.height(), image.width())
    })?;
    let (th, tw) = (image.height() / n, image.width() / n);
    let ch = image.channels();
    let mut out = image.clone();
    for (dest, &src) in perm.mapping.iter().enumerate() {
        let (dr, dc) = (dest / n, dest % n);
        let (sr, sc) = (src / n, src % n);
        for y in 0..th {
            let s = image.index(sr * th + y, sc * tw, 0);
            let d = image.index(dr * th + y, dc * tw, 0);
            out.pixels_mut()[d..d + tw * ch].copy_from_slice(&image.pixels()[s..s + tw * ch]);
        }
    }
    Ok(out)
}

/// Shuffles tiles and returns, per destination tile, its source `(row, col)`.
pub fn rcm_destruct(image: &Image, perm: &RegionPermutation) -> Result<(Image, Vec<(usize, usize)>)> {
    let out = move_tiles(image, perm)?;
    let n = perm.grid_n;
    let targets = perm.mapping.iter().map(|&src| (src / n, src % n)).collect();
    Ok((out, targets))
}

pub fn rcm_restore(image: &Image, perm: &RegionPermutation) -> Result<Image> {
    move_tiles(image, &perm.inverse())
}

// ---------------------------------------------------------------------------
// Attention-guided augmentation

/// Nearest-neighbour lookup of the attention cell covering pixel `(y, x)`.
fn cell_at(attn: &AttentionMap, y: usize, x: usize, height: usize, width: usize) -> f64 {
    attn.at(y * attn.height / height, x * attn.width / width)
}

/// Bounding box of pixels at or above `theta · max(attn)`, widened by a
/// 10% margin per side and clipped. `None` for an all-zero map.
pub fn attention_box(attn: &AttentionMap, theta: f64, height: usize, width: usize) -> Option<CutBox> {
    let max = attn.max();
    if max <= 0.0 {
        return None;
    }
    let thr = theta * max;
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..height {
        for x in 0..width {
            if cell_at(attn, y, x, height, width) >= thr {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    let my = ((y1 - y0 + 1) as f64 * 0.1).round() as usize;
    let mx = ((x1 - x0 + 1) as f64 * 0.1).round() as usize;
    let top = y0.saturating_sub(my);
    let left = x0.saturating_sub(mx);
    let bottom = (y1 + my).min(height - 1);
    let right = (x1 + mx).min(width - 1);
    Some(CutBox { top, left, height: bottom - top + 1, width: right - left + 1 })
}

pub fn attention_crop(image: &Image, attn: &AttentionMap, theta_c: f64, out_size: usize) -> Result<Image> {
    ensure(theta_c > 0.0 && theta_c <= 1.0, || format!("theta_c must be in (0, 1], got {theta_c}"))?;
    ensure(out_size >= MIN_SIDE, || format!("out_size must be at least {MIN_SIDE}"))?;
    let region = match attention_box(attn, theta_c, image.height(), image.width()) {
        Some(b) => image.crop(b.top, b.left, b.height, b.width),
        None => image.clone(),
    };
    Ok(region.resize(out_size, out_size))
}

pub fn attention_drop(image: &Image, attn: &AttentionMap, theta_d: f64) -> Result<Image> {
    ensure(theta_d > 0.0 && theta_d <= 1.0, || format!("theta_d must be in (0, 1], got {theta_d}"))?;
    let max = attn.max();
    let mut out = image.clone();
    if max <= 0.0 {
        return Ok(out);
    }
    let (h, w) = (image.height(), image.width());
    for y in 0..h {
        for x in 0..w {
            if cell_at(attn, y, x, h, w) >= theta_d * max {
                for c in 0..image.channels() {
                    out.set(y, x, c, 0.0);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Test-time views

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub views: Vec<Image>,
    pub descriptions: Vec<String>,
}

impl ViewSet {
    fn with_capacity(n: usize) -> Self {
        ViewSet { views: Vec::with_capacity(n), descriptions: Vec::with_capacity(n) }
    }

    fn push(&mut self, view: Image, description: String) {
        self.views.push(view);
        self.descriptions.push(description);
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Shorter side resized to `resize_to`, then a centred `crop × crop` window.
pub fn center_view(image: &Image, resize_to: usize, crop: usize) -> Result<Image> {
    ensure(crop <= resize_to, || format!("crop ({crop}) exceeds resize_to ({resize_to})"))?;
    ensure(crop >= MIN_SIDE, || format!("crop must be at least {MIN_SIDE}"))?;
    Ok(image.resize_shorter(resize_to).center_crop(crop, crop))
}

fn random_crop(rng: &mut impl Rng, image: &Image, crop: usize) -> (Image, usize, usize) {
    let top = rng.gen_range(0..=image.height() - crop);
    let left = rng.gen_range(0..=image.width() - crop);
    (image.crop(top, left, crop, crop), top, left)
}

/// Resize+CenterCrop, Resize+RandomCrop, Resize+RandomCrop+Flip.
pub fn tta_three(image: &Image, resize_to: usize, crop: usize, seed: u64) -> Result<ViewSet> {
    let center = center_view(image, resize_to, crop)?;
    let resized = image.resize_shorter(resize_to);
    let mut rng = seed::rng(seed, "tta", 0);
    let mut set = ViewSet::with_capacity(3);
    set.push(center, format!("resize({resize_to})+center_crop({crop})"));
    let (view, top, left) = random_crop(&mut rng, &resized, crop);
    set.push(view, format!("resize({resize_to})+random_crop({crop}@{top},{left})"));
    let (view, top, left) = random_crop(&mut rng, &resized, crop);
    set.push(
        view.flip_horizontal(),
        format!("resize({resize_to})+random_crop({crop}@{top},{left})+hflip"),
    );
    Ok(set)
}

/// Multi-scale, multi-position crops: per scale three squares along the
/// longer side, six views per square, each followed by its mirror.
pub fn crops_144(image: &Image, scales: [usize; 4], crop: usize) -> Result<ViewSet> {
    let min_scale = scales.iter().copied().min().unwrap_or(0);
    ensure(crop <= min_scale, || format!("crop ({crop}) exceeds the smallest scale ({min_scale})"))?;
    ensure(crop >= MIN_SIDE, || format!("crop must be at least {MIN_SIDE}"))?;
    let mut set = ViewSet::with_capacity(144);
    for scale in scales {
        let resized = image.resize_shorter(scale);
        let (h, w) = (resized.height(), resized.width());
        let long = h.max(w);
        let offsets = [0, (long - scale) / 2, long - scale];
        for (sq, &off) in offsets.iter().enumerate() {
            let square = if h >= w {
                resized.crop(off, 0, scale, scale)
            } else {
                resized.crop(0, off, scale, scale)
            };
            let far = scale - crop;
            let views = [
                ("tl", square.crop(0, 0, crop, crop)),
                ("tr", square.crop(0, far, crop, crop)),
                ("bl", square.crop(far, 0, crop, crop)),
                ("br", square.crop(far, far, crop, crop)),
                ("center", square.center_crop(crop, crop)),
                ("full", square.resize(crop, crop)),
            ];
            for (name, view) in views {
                let mirrored = view.flip_horizontal();
                set.push(view, format!("scale({scale})+square({sq})+{name}"));
                set.push(mirrored, format!("scale({scale})+square({sq})+{name}+hflip"));
            }
        }
    }
    Ok(set)
}
