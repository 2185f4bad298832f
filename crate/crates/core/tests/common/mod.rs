#![allow(dead_code)]

use finemine::image::Image;
use finemine::model::{self, net, smooth_targets, Classifier};
use finemine::seed;
use rand::Rng;

pub const GRAD_EPS: f64 = 1e-4;
/// Pairs with a pre-activation closer to zero than this are redrawn: one
/// step of `GRAD_EPS` moves a pre-activation by up to `2 · GRAD_EPS` (inputs
/// lie in [-2, 2]), with headroom for the second layer.
pub const KINK_MARGIN: f64 = 4.0 * GRAD_EPS;

pub fn noise_image(side: usize, s: u64) -> Image {
    let mut rng = seed::rng(s, "noise", 0);
    Image::new(side, side, 3, (0..side * side * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

/// Random (model, input, target) triple number `i` on a 16×16 input.
pub fn grad_pair(i: u64) -> (Classifier, Image, Vec<f64>) {
    let classes = 2 + (i as usize % 5);
    let mut m = Classifier::init(classes, seed::derive(i, "gc-model", 0)).unwrap();
    m.set_input_resolution(16);
    let mut rng = seed::rng(i, "gc-bias", 0);
    for name in ["conv1_bias", "conv2_bias", "head_bias"] {
        m.tensor_mut(name).unwrap().iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
    let target = smooth_targets(i as usize % classes, classes, 0.2).unwrap();
    (m, noise_image(16, i), target)
}

/// Max relative error over the first `n` kink-free pairs, and how many
/// draws were rejected on the way.
pub fn grad_check_pairs(n: usize) -> (f64, usize) {
    let (mut worst, mut taken, mut rejected) = (0.0f64, 0, 0);
    let mut i = 0u64;
    while taken < n {
        let (m, img, target) = grad_pair(i);
        i += 1;
        let input = net::prepare_input(&img, 16);
        if net::kink_margin(m.layout(), &m.params_f64(), &input, 16) < KINK_MARGIN {
            rejected += 1;
            continue;
        }
        worst = worst.max(model::grad_check(&m, &img, &target, GRAD_EPS).unwrap());
        taken += 1;
    }
    (worst, rejected)
}
