//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written from the definitions with plain loops and
//! never calls into the library's layers.

#![allow(dead_code)]

use std::sync::Arc;

use dyndistill::autodiff::Tensor;
use dyndistill::config::{BackboneConfig, ModelConfig};
use dyndistill::data::{Sample, Split};
use dyndistill::label_encoder::LabelDescriptor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Channel offset of the shift: group index minus the centre group, times
/// the dilation. Groups are contiguous runs of `ceil(C / s)` channels.
pub fn shift_offset(c: usize, channels: usize, s: usize, d: usize) -> isize {
    let group = c / channels.div_ceil(s);
    (group as isize - (s / 2) as isize) * d as isize
}

/// Naive evaluation of the two-direction shift sum:
/// `Y[i,j,o] = sum_c wh[c,o] X[i, j+off(c), c] + sum_c wv[c,o] X[i+off(c), j, c]`
/// with zero outside the map. `x` is channels-last `(H*W, C)`.
pub fn axial_shift_ref(
    x: &Tensor,
    h: usize,
    w: usize,
    s: usize,
    d: usize,
    wh: &Tensor,
    wv: &Tensor,
) -> Tensor {
    let c_in = x.cols();
    let c_out = wh.cols();
    let at = |i: isize, j: isize, c: usize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x.get(i as usize * w + j as usize, c)
        }
    };
    let mut y = Tensor::zeros(h * w, c_out);
    for i in 0..h {
        for j in 0..w {
            for o in 0..c_out {
                let mut acc = 0.0;
                for c in 0..c_in {
                    let off = shift_offset(c, c_in, s, d);
                    acc += wh.get(c, o) * at(i as isize, j as isize + off, c);
                    acc += wv.get(c, o) * at(i as isize + off, j as isize, c);
                }
                y.set(i * w + j, o, acc);
            }
        }
    }
    y
}

/// Row-wise layer normalisation without affine terms.
pub fn layer_norm_ref(x: &Tensor, eps: f64) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        for c in 0..x.cols() {
            out.set(r, c, (row[c] - mean) / (var + eps).sqrt());
        }
    }
    out
}

pub fn matmul_ref(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows());
    Tensor::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

pub fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + b.get(0, j))
}

/// `KL(softmax(t/tau) || softmax(s/tau)) * tau^2` over a flat vector.
pub fn kl_ref(t: &[f64], s: &[f64], tau: f64) -> f64 {
    let soft = |v: &[f64]| -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    };
    let p = soft(t);
    let q = soft(s);
    p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>() * tau * tau
}

/// Per-layer parameter tally of a model built from `cfg`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamTally {
    pub backbone: usize,
    pub fpn: usize,
    pub head: usize,
    pub adapt: usize,
    pub teacher: usize,
}

impl ParamTally {
    pub fn student(&self) -> usize {
        self.backbone + self.fpn + self.head
    }

    pub fn total(&self) -> usize {
        self.student() + self.adapt + self.teacher
    }
}

fn linear(i: usize, o: usize, bias: bool) -> usize {
    i * o + if bias { o } else { 0 }
}

fn norm(c: usize) -> usize {
    2 * c
}

fn conv3(i: usize, o: usize) -> usize {
    linear(9 * i, o, true)
}

pub fn backbone_params(cfg: &BackboneConfig) -> usize {
    let mut total = 0;
    let mut in_dim = cfg.in_channels;
    for s in &cfg.stages {
        let n = s.patch_merge;
        total += linear(n * n * in_dim, s.dim, true) + norm(s.dim);
        let c = s.dim;
        let hidden = c * cfg.mlp_ratio;
        let block = norm(c) + 2 * linear(c, c, false) + linear(c, hidden, true) + linear(hidden, c, true);
        total += s.depth * block;
        in_dim = s.dim;
    }
    total
}

pub fn param_tally(cfg: &ModelConfig) -> ParamTally {
    let c = cfg.fpn_channels;
    let k = cfg.num_classes;
    let levels = cfg.backbone.stages.len();
    let fpn = cfg
        .backbone
        .stages
        .iter()
        .map(|s| linear(s.dim, c, true) + conv3(c, c))
        .sum();
    let head = cfg.head.tower_depth * (conv3(c, c) + norm(c))
        + linear(c, k, true)
        + linear(c, 4, true)
        + linear(c, 1, true);
    let adapt = levels * (conv3(c, c) + norm(c) + conv3(c, c));
    let d = 4 + k;
    let label = d * d + linear(d, c, true) + norm(c) + c * c + 2 * linear(c, c, true) + norm(c);
    let appearance = linear(c, c, true);
    let interaction = c + 4 * linear(c, c, true);
    let n = c / cfg.segments;
    let mut stride = 1;
    let mut permute = 0;
    for s in &cfg.backbone.stages {
        stride *= s.patch_merge;
        let side = cfg.image_size / stride;
        permute += 2 * linear(side * n, side * n, true) + 2 * linear(c, c, true);
        if cfg.weighted_aggregation {
            permute += 3;
        }
    }
    ParamTally {
        backbone: backbone_params(&cfg.backbone),
        fpn,
        head,
        adapt,
        teacher: label + appearance + interaction + permute,
    }
}

/// A small model that trains in milliseconds per step.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        backbone: BackboneConfig::with_dims([8, 12, 16, 24], 1),
        fpn_channels: 8,
        segments: 2,
        attention_heads: 2,
        ..ModelConfig::default()
    }
}

pub fn sample(id: u64, size: usize, labels: Vec<LabelDescriptor>, seed: u64) -> Sample {
    let mut r = rng(seed);
    let pixels: Vec<f32> = (0..size * size * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
    Sample {
        image_id: id,
        split: Split::Train,
        height: size,
        width: size,
        channels: 3,
        pixels: Arc::from(pixels),
        labels,
    }
}

/// A few random images with one to three boxes each.
pub fn toy_batch(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let objects = r.gen_range(1..=3);
            let labels = (0..objects)
                .map(|_| {
                    let x1 = r.gen_range(0.0..0.5);
                    let y1 = r.gen_range(0.0..0.5);
                    let bw = r.gen_range(0.2..0.5);
                    let bh = r.gen_range(0.2..0.5);
                    LabelDescriptor::new([x1, y1, x1 + bw, y1 + bh], r.gen_range(0..2))
                })
                .collect();
            sample(i as u64, size, labels, seed * 1000 + i as u64)
        })
        .collect()
}
