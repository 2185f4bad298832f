//! Forward and reverse passes of the two-stage conv net, in `f64`.
//!
//! Parameters live in one flat vector; [`Layout`] gives the offset of each
//! tensor. Convolution weights are stored `[out][ky][kx][in]` so a gathered
//! 3×3 patch of an HWC image lines up with a weight row.

use crate::image::Image;

pub const IN_CHANNELS: usize = 3;
pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;
pub const KERNEL: usize = 3;
pub const FEATURES: usize = CONV2_CHANNELS;

/// Output side of a 3×3, stride-2, pad-1 convolution.
pub fn conv_out(side: usize) -> usize {
    (side - 1) / 2 + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: [usize; 4],
    pub rank: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_bias: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape[..self.rank].iter().product()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.shape[..self.rank].to_vec()
    }
}

impl Layout {
    pub fn specs(&self) -> [ParamSpec; 6] {
        let k2 = KERNEL * KERNEL;
        let c = self.num_classes;
        let w = |name, shape: [usize; 4], rank, fan_in, fan_out| ParamSpec {
            name,
            shape,
            rank,
            fan_in,
            fan_out,
            is_bias: false,
        };
        let b = |name, n| ParamSpec {
            name,
            shape: [n, 0, 0, 0],
            rank: 1,
            fan_in: 0,
            fan_out: 0,
            is_bias: true,
        };
        [
            w(
                "conv1_weight",
                [CONV1_CHANNELS, KERNEL, KERNEL, IN_CHANNELS],
                4,
                IN_CHANNELS * k2,
                CONV1_CHANNELS * k2,
            ),
            b("conv1_bias", CONV1_CHANNELS),
            w(
                "conv2_weight",
                [CONV2_CHANNELS, KERNEL, KERNEL, CONV1_CHANNELS],
                4,
                CONV1_CHANNELS * k2,
                CONV2_CHANNELS * k2,
            ),
            b("conv2_bias", CONV2_CHANNELS),
            w("head_weight", [c, FEATURES, 0, 0], 2, FEATURES, c),
            b("head_bias", c),
        ]
    }

    pub fn offsets(&self) -> [usize; 7] {
        let mut out = [0; 7];
        for (i, s) in self.specs().iter().enumerate() {
            out[i + 1] = out[i] + s.len();
        }
        out
    }

    pub fn total(&self) -> usize {
        self.offsets()[6]
    }

    /// Number of leading parameters that belong to the conv stages.
    pub fn conv_len(&self) -> usize {
        self.offsets()[4]
    }
}

struct Params<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
    wh: &'a [f64],
    bh: &'a [f64],
}

fn split(layout: Layout, p: &[f64]) -> Params<'_> {
    let o = layout.offsets();
    Params {
        w1: &p[o[0]..o[1]],
        b1: &p[o[1]..o[2]],
        w2: &p[o[2]..o[3]],
        b2: &p[o[3]..o[4]],
        wh: &p[o[4]..o[5]],
        bh: &p[o[5]..o[6]],
    }
}

/// Gathers 3×3 stride-2 patches from an HWC map; zero padding of one.
fn im2col(input: &[f64], side: usize, channels: usize) -> (Vec<f64>, usize) {
    let out = conv_out(side);
    let row = KERNEL * KERNEL * channels;
    let mut patches = vec![0.0; out * out * row];
    for oy in 0..out {
        for ox in 0..out {
            let base = (oy * out + ox) * row;
            for ky in 0..KERNEL {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy >= side as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= side as isize {
                        continue;
                    }
                    let src = (iy as usize * side + ix as usize) * channels;
                    let dst = base + (ky * KERNEL + kx) * channels;
                    patches[dst..dst + channels].copy_from_slice(&input[src..src + channels]);
                }
            }
        }
    }
    (patches, out)
}

/// Patches × weightsᵀ + bias, followed by ReLU.
fn conv_relu(patches: &[f64], weights: &[f64], bias: &[f64], positions: usize) -> Vec<f64> {
    let cout = bias.len();
    let row = weights.len() / cout;
    let mut out = vec![0.0; positions * cout];
    for p in 0..positions {
        let patch = &patches[p * row..(p + 1) * row];
        for o in 0..cout {
            let w = &weights[o * row..(o + 1) * row];
            let z = bias[o] + dot(patch, w);
            out[p * cout + o] = z.max(0.0);
        }
    }
    out
}

/// Smallest `|pre-activation|` over both conv layers. Finite differences
/// with a step that can move a unit across zero do not measure the gradient.
pub fn kink_margin(layout: Layout, params: &[f64], input: &[f64], resolution: usize) -> f64 {
    let p = split(layout, params);
    let pre_min = |patches: &[f64], w: &[f64], b: &[f64]| {
        let row = w.len() / b.len();
        patches
            .chunks_exact(row)
            .flat_map(|patch| w.chunks_exact(row).zip(b).map(move |(wo, bo)| (bo + dot(patch, wo)).abs()))
            .fold(f64::INFINITY, f64::min)
    };
    let (patches1, side1) = im2col(input, resolution, IN_CHANNELS);
    let act1 = conv_relu(&patches1, p.w1, p.b1, side1 * side1);
    let (patches2, _) = im2col(&act1, side1, CONV1_CHANNELS);
    pre_min(&patches1, p.w1, p.b1).min(pre_min(&patches2, p.w2, p.b2))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fixed input standardisation applied before the first conv.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_SCALE: f64 = 4.0;

/// Resizes to `resolution × resolution`, widens to `f64` and standardises.
pub fn prepare_input(image: &Image, resolution: usize) -> Vec<f64> {
    image
        .resize(resolution, resolution)
        .pixels()
        .iter()
        .map(|&v| (v as f64 - INPUT_MEAN) * INPUT_SCALE)
        .collect()
}

/// Intermediate values of one forward pass, kept for the reverse pass.
pub struct Trace {
    patches1: Vec<f64>,
    act1: Vec<f64>,
    side1: usize,
    patches2: Vec<f64>,
    pub act2: Vec<f64>,
    pub side2: usize,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn forward(layout: Layout, params: &[f64], input: &[f64], resolution: usize) -> Trace {
    let p = split(layout, params);
    let (patches1, side1) = im2col(input, resolution, IN_CHANNELS);
    let act1 = conv_relu(&patches1, p.w1, p.b1, side1 * side1);
    let (patches2, side2) = im2col(&act1, side1, CONV1_CHANNELS);
    let act2 = conv_relu(&patches2, p.w2, p.b2, side2 * side2);
    let positions = (side2 * side2) as f64;
    let mut pooled = vec![0.0; FEATURES];
    for px in act2.chunks_exact(FEATURES) {
        for (s, v) in pooled.iter_mut().zip(px) {
            *s += v;
        }
    }
    pooled.iter_mut().for_each(|v| *v /= positions);
    let logits = head(layout, params, &pooled);
    Trace {
        patches1,
        act1,
        side1,
        patches2,
        act2,
        side2,
        pooled,
        logits,
    }
}

pub fn head(layout: Layout, params: &[f64], pooled: &[f64]) -> Vec<f64> {
    let p = split(layout, params);
    (0..layout.num_classes)
        .map(|c| p.bh[c] + dot(&p.wh[c * FEATURES..(c + 1) * FEATURES], pooled))
        .collect()
}

/// Numerically stable `log softmax`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

pub fn cross_entropy(logits: &[f64], target: &[f64]) -> f64 {
    -log_softmax(logits)
        .iter()
        .zip(target)
        .map(|(l, t)| t * l)
        .sum::<f64>()
}

/// Cross-entropy loss and its gradient with respect to every parameter.
pub fn loss_and_grad(
    layout: Layout,
    params: &[f64],
    input: &[f64],
    resolution: usize,
    target: &[f64],
) -> (f64, Vec<f64>) {
    let trace = forward(layout, params, input, resolution);
    let loss = cross_entropy(&trace.logits, target);
    let p = split(layout, params);
    let o = layout.offsets();
    let mut grad = vec![0.0; layout.total()];

    let dlogits: Vec<f64> = softmax(&trace.logits)
        .iter()
        .zip(target)
        .map(|(s, t)| s - t)
        .collect();

    let mut dpooled = vec![0.0; FEATURES];
    for (c, &d) in dlogits.iter().enumerate() {
        grad[o[5] + c] = d;
        let row = o[4] + c * FEATURES;
        for j in 0..FEATURES {
            grad[row + j] = d * trace.pooled[j];
            dpooled[j] += d * p.wh[c * FEATURES + j];
        }
    }

    // conv2: GAP spreads dpooled evenly; ReLU gates it.
    let pos2 = trace.side2 * trace.side2;
    let row2 = KERNEL * KERNEL * CONV1_CHANNELS;
    let mut dpatches2 = vec![0.0; pos2 * row2];
    for pos in 0..pos2 {
        let patch = &trace.patches2[pos * row2..(pos + 1) * row2];
        let dpatch = &mut dpatches2[pos * row2..(pos + 1) * row2];
        for ch in 0..CONV2_CHANNELS {
            if trace.act2[pos * CONV2_CHANNELS + ch] <= 0.0 {
                continue;
            }
            let dz = dpooled[ch] / pos2 as f64;
            grad[o[3] + ch] += dz;
            let wrow = o[2] + ch * row2;
            for k in 0..row2 {
                grad[wrow + k] += dz * patch[k];
                dpatch[k] += dz * p.w2[ch * row2 + k];
            }
        }
    }

    // Scatter patch gradients back onto the conv1 activation map.
    let side1 = trace.side1;
    let mut dact1 = vec![0.0; side1 * side1 * CONV1_CHANNELS];
    for oy in 0..trace.side2 {
        for ox in 0..trace.side2 {
            let base = (oy * trace.side2 + ox) * row2;
            for ky in 0..KERNEL {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy >= side1 as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= side1 as isize {
                        continue;
                    }
                    let dst = (iy as usize * side1 + ix as usize) * CONV1_CHANNELS;
                    let src = base + (ky * KERNEL + kx) * CONV1_CHANNELS;
                    for ch in 0..CONV1_CHANNELS {
                        dact1[dst + ch] += dpatches2[src + ch];
                    }
                }
            }
        }
    }

    let row1 = KERNEL * KERNEL * IN_CHANNELS;
    for pos in 0..side1 * side1 {
        let patch = &trace.patches1[pos * row1..(pos + 1) * row1];
        for ch in 0..CONV1_CHANNELS {
            let idx = pos * CONV1_CHANNELS + ch;
            if trace.act1[idx] <= 0.0 {
                continue;
            }
            let dz = dact1[idx];
            grad[o[1] + ch] += dz;
            let wrow = o[0] + ch * row1;
            for k in 0..row1 {
                grad[wrow + k] += dz * patch[k];
            }
        }
    }

    (loss, grad)
}

/// Gradient of the loss with respect to the head only, from pooled features.
pub fn head_loss_and_grad(layout: Layout, params: &[f64], pooled: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let logits = head(layout, params, pooled);
    let loss = cross_entropy(&logits, target);
    let o = layout.offsets();
    let mut grad = vec![0.0; layout.total()];
    for (c, (s, t)) in softmax(&logits).iter().zip(target).enumerate() {
        let d = s - t;
        grad[o[5] + c] = d;
        for j in 0..FEATURES {
            grad[o[4] + c * FEATURES + j] = d * pooled[j];
        }
    }
    (loss, grad)
}
