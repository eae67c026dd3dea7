//! Object masks on pyramid grids and mask-pooled appearance embeddings.

use dyndistill_autodiff::{Graph, Tensor, Var};

use crate::label_encoder::LabelDescriptor;
use crate::nn::{Builder, FeatureMap, Linear};

/// Binary masks for `N` objects plus the whole-image virtual object (last).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub h: usize,
    pub w: usize,
    /// `masks[i][r * w + c]`; length `N + 1`.
    pub masks: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn num_objects(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn active(&self, i: usize) -> usize {
        self.masks[i].iter().filter(|&&m| m).count()
    }

    /// Each row is a mask divided by its active-cell count.
    pub fn normalized(&self) -> Tensor {
        let hw = self.h * self.w;
        let mut t = Tensor::zeros(self.masks.len(), hw);
        for (i, m) in self.masks.iter().enumerate() {
            let inv = 1.0 / self.active(i) as f64;
            for (p, &on) in m.iter().enumerate() {
                if on {
                    t.set(i, p, inv);
                }
            }
        }
        t
    }
}

/// Cell `(r, c)` belongs to a box when its centre lies inside the closed
/// box. A box that covers no centre activates the cell holding its centre.
pub fn rasterize_box(bbox: [f64; 4], h: usize, w: usize) -> Vec<bool> {
    let [x1, y1, x2, y2] = bbox;
    let mut m = vec![false; h * w];
    let mut any = false;
    for r in 0..h {
        let cy = (r as f64 + 0.5) / h as f64;
        if cy < y1 || cy > y2 {
            continue;
        }
        for c in 0..w {
            let cx = (c as f64 + 0.5) / w as f64;
            if cx >= x1 && cx <= x2 {
                m[r * w + c] = true;
                any = true;
            }
        }
    }
    if !any {
        let cell = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
        let r = cell((y1 + y2) / 2.0, h);
        let c = cell((x1 + x2) / 2.0, w);
        log::debug!("box {bbox:?} covers no cell centre on a {h}x{w} grid; using cell ({r}, {c})");
        m[r * w + c] = true;
    }
    m
}

pub fn rasterize(labels: &[LabelDescriptor], h: usize, w: usize) -> MaskSet {
    let mut masks: Vec<Vec<bool>> = labels.iter().map(|l| rasterize_box(l.bbox, h, w)).collect();
    masks.push(vec![true; h * w]);
    MaskSet { h, w, masks }
}

/// `A = normalize(M) * proj(X)`: masked mean of pointwise-projected features.
#[derive(Clone, Debug)]
pub struct AppearanceEncoder {
    pub proj: Linear,
}

impl AppearanceEncoder {
    pub fn new(b: &mut Builder<'_>, dim: usize) -> Self {
        Self {
            proj: Linear::new(b, "proj", dim, dim, true),
        }
    }

    /// `(N+1, C)` embeddings for one level.
    pub fn forward(&self, g: &mut Graph<'_>, x: FeatureMap, masks: &MaskSet) -> Var {
        assert_eq!((x.h, x.w), (masks.h, masks.w), "mask grid does not match feature map");
        let p = self.proj.forward(g, x.var);
        let m = g.constant(masks.normalized());
        g.matmul(m, p)
    }
}
