//! Anchor-free detection head shared across pyramid levels and callers.
//!
//! Each cell predicts class logits and a centre-ness logit, plus distances
//! from its centre to the four box sides in units of the level stride (via
//! `exp`). Training targets come from centre-sampled assignment with
//! per-level size ranges; the loss is focal + centre-ness-weighted GIoU +
//! a centre-ness KL term that vanishes at the optimum.

use std::sync::Arc;

use dyndistill_autodiff::{Graph, Tensor, Var};

use crate::config::HeadConfig;
use crate::error::{Error, Result};
use crate::eval::{iou, Detection};
use crate::label_encoder::LabelDescriptor;
use crate::nn::{Builder, Conv3x3, FeatureMap, LayerNorm, Linear};

/// Exponent bounds applied to raw distance outputs.
pub const DIST_LOG_MIN: f64 = -8.0;
pub const DIST_LOG_MAX: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct Head {
    pub cfg: HeadConfig,
    pub channels: usize,
    pub num_classes: usize,
    pub tower: Vec<(Conv3x3, LayerNorm)>,
    pub cls: Linear,
    pub reg: Linear,
    pub ctr: Linear,
}

/// Raw outputs for one level.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    /// `(H*W, K)` logits.
    pub cls: Var,
    /// `(H*W, 4)` distances `(l, t, r, b)` in stride units, positive.
    pub dist: Var,
    /// `(H*W, 1)` logits.
    pub ctr: Var,
}

impl Head {
    pub fn new(b: &mut Builder<'_>, cfg: &HeadConfig, channels: usize, num_classes: usize) -> Self {
        let tower = (0..cfg.tower_depth)
            .map(|i| {
                (
                    Conv3x3::new(b, &format!("tower{i}.conv"), channels, channels),
                    LayerNorm::new(b, &format!("tower{i}.norm"), channels),
                )
            })
            .collect();
        let cls = Linear::new(b, "cls", channels, num_classes, true);
        let prior = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
        b.set(cls.bias.expect("cls has bias"), Tensor::full(1, num_classes, prior));
        Self {
            cfg: cfg.clone(),
            channels,
            num_classes,
            tower,
            cls,
            reg: Linear::new(b, "reg", channels, 4, true),
            ctr: Linear::new(b, "ctr", channels, 1, true),
        }
    }

    pub fn forward_level(&self, g: &mut Graph<'_>, x: FeatureMap, stride: usize) -> Result<LevelOutput> {
        let c = x.channels(g);
        if c != self.channels {
            return Err(Error::Config(format!(
                "head expects {} channels, level has {c}",
                self.channels
            )));
        }
        let mut f = x;
        for (conv, norm) in &self.tower {
            let y = conv.forward(g, f);
            let y = norm.forward(g, y.var);
            f = f.with_var(g.relu(y));
        }
        let cls = self.cls.forward(g, f.var);
        let raw = self.reg.forward(g, f.var);
        let dist = g.clamped_exp(raw, DIST_LOG_MIN, DIST_LOG_MAX);
        let ctr = self.ctr.forward(g, f.var);
        Ok(LevelOutput {
            h: x.h,
            w: x.w,
            stride,
            cls,
            dist,
            ctr,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, levels: &[FeatureMap], strides: &[usize]) -> Result<Vec<LevelOutput>> {
        levels
            .iter()
            .zip(strides)
            .map(|(&x, &s)| self.forward_level(g, x, s))
            .collect()
    }
}

/// Training targets for one level of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    /// `(H*W, K)` one-hot rows for positives, zero rows elsewhere.
    pub cls: Tensor,
    /// Flat cell indices of positives.
    pub positives: Vec<usize>,
    /// `(P, 4)` side distances in stride units.
    pub dist: Tensor,
    /// `(P, 1)` centre-ness in `(0, 1]`.
    pub centerness: Tensor,
}

/// Size range `(lo, hi]` of the largest side distance (pixels) for a level.
pub fn level_range(cfg: &HeadConfig, level: usize, num_levels: usize, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    let lo = if level == 0 { 0.0 } else { cfg.range_factor / 2.0 * s };
    let hi = if level + 1 == num_levels {
        f64::INFINITY
    } else {
        cfg.range_factor * s
    };
    (lo, hi)
}

pub fn centerness(d: [f64; 4]) -> f64 {
    let [l, t, r, b] = d;
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

/// Assigns each cell to at most one object (the smallest candidate).
pub fn assign(
    cfg: &HeadConfig,
    labels: &[LabelDescriptor],
    image_size: usize,
    num_classes: usize,
    shapes: &[(usize, usize, usize)],
) -> Vec<LevelTargets> {
    let size = image_size as f64;
    let boxes: Vec<[f64; 4]> = labels.iter().map(|l| l.bbox.map(|v| v * size)).collect();
    shapes
        .iter()
        .enumerate()
        .map(|(level, &(h, w, stride))| {
            let (lo, hi) = level_range(cfg, level, shapes.len(), stride);
            let s = stride as f64;
            let radius = cfg.center_radius * s;
            let mut cls = Tensor::zeros(h * w, num_classes);
            let mut positives = Vec::new();
            let mut dist = Vec::new();
            let mut ctr = Vec::new();
            for i in 0..h {
                for j in 0..w {
                    let px = (j as f64 + 0.5) * s;
                    let py = (i as f64 + 0.5) * s;
                    let mut best: Option<(f64, usize, [f64; 4])> = None;
                    for (k, b) in boxes.iter().enumerate() {
                        let d = [px - b[0], py - b[1], b[2] - px, b[3] - py];
                        if d.iter().any(|&v| v <= 0.0) {
                            continue;
                        }
                        let cx = (b[0] + b[2]) / 2.0;
                        let cy = (b[1] + b[3]) / 2.0;
                        if (px - cx).abs() > radius || (py - cy).abs() > radius {
                            continue;
                        }
                        let m = d.iter().cloned().fold(0.0, f64::max);
                        if m <= lo || m > hi {
                            continue;
                        }
                        let area = (b[2] - b[0]) * (b[3] - b[1]);
                        if best.is_none_or(|(a, _, _)| area < a) {
                            best = Some((area, k, d));
                        }
                    }
                    if let Some((_, k, d)) = best {
                        let p = i * w + j;
                        cls.set(p, labels[k].class_id, 1.0);
                        positives.push(p);
                        dist.extend(d.map(|v| v / s));
                        ctr.push(centerness(d));
                    }
                }
            }
            let n = positives.len();
            LevelTargets {
                cls,
                positives,
                dist: Tensor::from_vec(n, 4, dist),
                centerness: Tensor::from_vec(n, 1, ctr),
            }
        })
        .collect()
}

/// Unnormalised loss sums for one image; divide by batch-wide totals.
#[derive(Clone, Copy, Debug)]
pub struct LossSums {
    pub cls: Var,
    pub reg: Option<Var>,
    pub ctr: Option<Var>,
    pub num_pos: usize,
    pub ctr_weight: f64,
}

fn entropy(t: f64) -> f64 {
    let xlogx = |p: f64| if p > 0.0 { p * p.ln() } else { 0.0 };
    -(xlogx(t) + xlogx(1.0 - t))
}

pub fn loss_sums(g: &mut Graph<'_>, cfg: &HeadConfig, out: &[LevelOutput], targets: &[LevelTargets]) -> LossSums {
    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();
    let mut ctr_terms = Vec::new();
    let mut num_pos = 0;
    let mut ctr_weight = 0.0;
    for (o, t) in out.iter().zip(targets) {
        let f = g.sigmoid_focal(o.cls, Arc::new(t.cls.clone()), cfg.focal_alpha, cfg.focal_gamma);
        cls_terms.push(g.sum_all(f));
        let p = t.positives.len();
        if p == 0 {
            continue;
        }
        num_pos += p;
        ctr_weight += t.centerness.sum();
        let rows: Vec<u32> = t
            .positives
            .iter()
            .flat_map(|&r| (0..4).map(move |k| (r * 4 + k) as u32))
            .collect();
        let d = g.gather(o.dist, p, 4, Arc::from(rows));
        let giou = g.giou_loss(d, Arc::new(t.dist.clone()));
        let wts = g.constant(t.centerness.clone());
        let wl = g.mul(giou, wts);
        reg_terms.push(g.sum_all(wl));
        let idx: Vec<u32> = t.positives.iter().map(|&r| r as u32).collect();
        let c = g.gather(o.ctr, p, 1, Arc::from(idx));
        let bce = g.bce_with_logits(c, Arc::new(t.centerness.clone()));
        let s = g.sum_all(bce);
        let h: f64 = t.centerness.data().iter().map(|&v| entropy(v)).sum();
        ctr_terms.push(g.add_scalar(s, -h));
    }
    let sum = |g: &mut Graph<'_>, v: Vec<Var>| v.into_iter().reduce(|a, b| g.add(a, b));
    let cls = sum(g, cls_terms).expect("at least one level");
    LossSums {
        cls,
        reg: sum(g, reg_terms),
        ctr: sum(g, ctr_terms),
        num_pos,
        ctr_weight,
    }
}

/// Combines per-image sums into one batch loss: focal and centre-ness terms
/// are divided by the positive count, GIoU by the total centre-ness weight.
pub fn batch_loss(g: &mut Graph<'_>, sums: &[LossSums]) -> Var {
    let num_pos = sums.iter().map(|s| s.num_pos).sum::<usize>().max(1) as f64;
    let ctr_weight = sums.iter().map(|s| s.ctr_weight).sum::<f64>().max(1e-12);
    let mut terms = Vec::new();
    for s in sums {
        terms.push(g.scale(s.cls, 1.0 / num_pos));
        if let Some(r) = s.reg {
            terms.push(g.scale(r, 1.0 / ctr_weight));
        }
        if let Some(c) = s.ctr {
            terms.push(g.scale(c, 1.0 / num_pos));
        }
    }
    terms
        .into_iter()
        .reduce(|a, b| g.add(a, b))
        .expect("non-empty batch")
}

/// Scored boxes after thresholding and class-wise NMS, capped in count.
pub fn decode(
    g: &Graph<'_>,
    cfg: &HeadConfig,
    out: &[LevelOutput],
    image_size: usize,
    image_id: u64,
) -> Vec<Detection> {
    let size = image_size as f64;
    let mut cands = Vec::new();
    for o in out {
        let cls = g.value(o.cls);
        let dist = g.value(o.dist);
        let ctr = g.value(o.ctr);
        let s = o.stride as f64;
        for p in 0..o.h * o.w {
            let q = dyndistill_autodiff::sigmoid(ctr.get(p, 0));
            for k in 0..cls.cols() {
                let score = (dyndistill_autodiff::sigmoid(cls.get(p, k)) * q).sqrt();
                if score <= cfg.score_threshold {
                    continue;
                }
                let px = ((p % o.w) as f64 + 0.5) * s;
                let py = ((p / o.w) as f64 + 0.5) * s;
                let d = dist.row_slice(p);
                let bbox = [
                    ((px - d[0] * s) / size).clamp(0.0, 1.0),
                    ((py - d[1] * s) / size).clamp(0.0, 1.0),
                    ((px + d[2] * s) / size).clamp(0.0, 1.0),
                    ((py + d[3] * s) / size).clamp(0.0, 1.0),
                ];
                if bbox[0] < bbox[2] && bbox[1] < bbox[3] {
                    cands.push(Detection {
                        image_id,
                        class_id: k,
                        bbox,
                        score,
                    });
                }
            }
        }
    }
    cands.sort_by(crate::eval::detection_order);
    cands.truncate(cfg.pre_nms_top_k);
    let mut kept = nms(&cands, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

/// Greedy class-wise suppression; input must be score-sorted.
pub fn nms(sorted: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(k.bbox, d.bbox) <= iou_threshold)
        {
            kept.push(*d);
        }
    }
    kept
}
