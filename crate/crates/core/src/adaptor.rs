//! Instance embeddings to dense teacher maps, and the student adapt head.
//!
//! [`scatter`] paints each object's embedding over its mask cells on top of
//! the virtual (whole-image) embedding. [`PermuteEncoder`] then mixes the
//! painted map along both spatial axes and across channels; each spatial branch splits
//! the channels into segments and applies a fully-connected layer across the
//! joint (position, in-segment channel) axis.

use std::sync::Arc;

use dyndistill_autodiff::{Graph, ParamId, Tensor, Var, GATHER_ZERO};

use crate::appearance::MaskSet;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv3x3, FeatureMap, LayerNorm, Linear};
use crate::spatial::{cached, Key};

/// For each cell, the embedding row painted there. Objects are painted in
/// descending `areas` order so smaller objects end up on top; ties keep
/// the lower index on top.
pub fn scatter_owners(masks: &MaskSet, areas: &[f64]) -> Vec<usize> {
    let n = masks.num_objects();
    assert_eq!(areas.len(), n);
    let mut owner = vec![n; masks.h * masks.w];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| areas[b].total_cmp(&areas[a]).then(b.cmp(&a)));
    for i in order {
        for (p, &on) in masks.masks[i].iter().enumerate() {
            if on {
                owner[p] = i;
            }
        }
    }
    owner
}

/// Dense `(H*W, C)` map built from `(N+1, C)` embeddings.
pub fn scatter(g: &mut Graph<'_>, embeddings: Var, masks: &MaskSet, areas: &[f64]) -> FeatureMap {
    let c = g.shape(embeddings).1;
    let owner = scatter_owners(masks, areas);
    let index: Vec<u32> = owner
        .iter()
        .flat_map(|&o| (0..c).map(move |k| (o * c + k) as u32))
        .collect();
    let var = g.gather(embeddings, masks.h * masks.w, c, Arc::from(index));
    FeatureMap::new(var, masks.h, masks.w)
}

/// Index tables for one spatial branch. `forward` maps the `(H*W, C)` map to
/// `(segments * other, along * seg_width)`; `inverse` maps back.
pub fn permute_tables(
    h: usize,
    w: usize,
    c: usize,
    segments: usize,
    along_height: bool,
) -> (Arc<[u32]>, Arc<[u32]>) {
    let n = c / segments;
    let (along, other) = if along_height { (h, w) } else { (w, h) };
    let cols = along * n;
    let src = move |a: usize, o: usize, seg: usize, k: usize| -> (usize, usize) {
        let (i, j) = if along_height { (a, o) } else { (o, a) };
        ((i * w + j) * c + seg * n + k, (seg * other + o) * cols + a * n + k)
    };
    let name = if along_height { "height" } else { "width" };
    let fwd = cached(
        Key::Permute {
            name,
            dims: [h, w, c, segments],
        },
        || {
            let mut t = vec![GATHER_ZERO; h * w * c];
            for a in 0..along {
                for o in 0..other {
                    for seg in 0..segments {
                        for k in 0..n {
                            let (x, y) = src(a, o, seg, k);
                            t[y] = x as u32;
                        }
                    }
                }
            }
            t
        },
    );
    let inv_name = if along_height { "height_inv" } else { "width_inv" };
    let inv = cached(
        Key::Permute {
            name: inv_name,
            dims: [h, w, c, segments],
        },
        || {
            let mut t = vec![GATHER_ZERO; h * w * c];
            for a in 0..along {
                for o in 0..other {
                    for seg in 0..segments {
                        for k in 0..n {
                            let (x, y) = src(a, o, seg, k);
                            t[x] = y as u32;
                        }
                    }
                }
            }
            t
        },
    );
    (fwd, inv)
}

#[derive(Clone, Debug)]
pub struct PermuteEncoder {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub segments: usize,
    pub fc_h: Linear,
    pub fc_w: Linear,
    pub fc_c: Linear,
    pub fc_out: Linear,
    /// Branch logits when the three branches are reweighted.
    pub branch_logits: Option<ParamId>,
}

impl PermuteEncoder {
    pub fn new(
        b: &mut Builder<'_>,
        h: usize,
        w: usize,
        channels: usize,
        segments: usize,
        weighted: bool,
    ) -> Result<Self> {
        if segments == 0 || !channels.is_multiple_of(segments) {
            return Err(Error::Config(format!(
                "segments ({segments}) must divide the channel count ({channels})"
            )));
        }
        let n = channels / segments;
        Ok(Self {
            h,
            w,
            channels,
            segments,
            fc_h: Linear::new(b, "fc_h", h * n, h * n, true),
            fc_w: Linear::new(b, "fc_w", w * n, w * n, true),
            fc_c: Linear::new(b, "fc_c", channels, channels, true),
            fc_out: Linear::new(b, "fc_out", channels, channels, true),
            branch_logits: weighted.then(|| b.add("branch_logits", Tensor::zeros(1, 3))),
        })
    }

    fn branch(&self, g: &mut Graph<'_>, x: Var, along_height: bool) -> Var {
        let (h, w, c, s) = (self.h, self.w, self.channels, self.segments);
        let n = c / s;
        let (along, other, fc) = if along_height {
            (h, w, &self.fc_h)
        } else {
            (w, h, &self.fc_w)
        };
        let (fwd, inv) = permute_tables(h, w, c, s, along_height);
        let p = g.gather(x, s * other, along * n, fwd);
        let y = fc.forward(g, p);
        g.gather(y, h * w, c, inv)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: FeatureMap) -> Result<FeatureMap> {
        let c = x.channels(g);
        if (x.h, x.w, c) != (self.h, self.w, self.channels) {
            return Err(Error::Config(format!(
                "permute encoder built for {}x{}x{}, got {}x{}x{c}",
                self.h, self.w, self.channels, x.h, x.w
            )));
        }
        let xh = self.branch(g, x.var, true);
        let xw = self.branch(g, x.var, false);
        let xc = self.fc_c.forward(g, x.var);
        let sum = match self.branch_logits {
            None => {
                let s = g.add(xh, xw);
                g.add(s, xc)
            }
            Some(id) => {
                let logits = g.param(id);
                let wts = g.softmax_rows(logits);
                let ones = g.constant(Tensor::full(self.h * self.w, 1, 1.0));
                let mut acc: Option<Var> = None;
                for (k, branch) in [xh, xw, xc].into_iter().enumerate() {
                    let wk = g.slice_cols(wts, k, 1);
                    let col = g.matmul(ones, wk);
                    let term = g.mul_col(branch, col);
                    acc = Some(match acc {
                        Some(a) => g.add(a, term),
                        None => term,
                    });
                }
                acc.expect("three branches")
            }
        };
        Ok(x.with_var(self.fc_out.forward(g, sum)))
    }
}

/// `F + conv2(relu(LN(conv1(F))))` with `conv2` starting at zero.
#[derive(Clone, Debug)]
pub struct AdaptHead {
    pub conv1: Conv3x3,
    pub norm: LayerNorm,
    pub conv2: Conv3x3,
}

impl AdaptHead {
    pub fn new(b: &mut Builder<'_>, channels: usize) -> Self {
        let conv1 = Conv3x3::new(b, "conv1", channels, channels);
        let norm = LayerNorm::new(b, "norm", channels);
        let conv2 = b.scope("conv2", |b| Conv3x3 {
            linear: Linear {
                weight: b.add("weight", Tensor::zeros(9 * channels, channels)),
                bias: Some(b.add("bias", Tensor::zeros(1, channels))),
                in_dim: 9 * channels,
                out_dim: channels,
            },
        });
        Self { conv1, norm, conv2 }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: FeatureMap) -> FeatureMap {
        let h = self.conv1.forward(g, x);
        let n = self.norm.forward(g, h.var);
        let r = g.relu(n);
        let y = self.conv2.forward(g, x.with_var(r));
        x.with_var(g.add(x.var, y.var))
    }
}
