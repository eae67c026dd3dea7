//! Ground-truth labels to per-object embeddings.
//!
//! Each object is described by its normalised box and a one-hot class. The
//! descriptor set is aligned by a learned square matrix and lifted by a
//! shared pointwise MLP. A second alignment at feature level feeds a residual
//! MLP. All normalisation is per-row, so objects never interact here.

use dyndistill_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear};

/// One annotated object: `[x1, y1, x2, y2]` in image-normalised units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDescriptor {
    pub bbox: [f64; 4],
    pub class_id: usize,
}

impl LabelDescriptor {
    pub fn new(bbox: [f64; 4], class_id: usize) -> Self {
        Self { bbox, class_id }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let [x1, y1, x2, y2] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Annotation(format!(
                "box {:?} has coordinates outside [0, 1]",
                self.bbox
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::Annotation(format!(
                "box {:?} is empty or inverted (need x1 < x2 and y1 < y2)",
                self.bbox
            )));
        }
        if self.class_id >= num_classes {
            return Err(Error::Annotation(format!(
                "class {} out of range for {num_classes} classes",
                self.class_id
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.bbox[2] - self.bbox[0]) * (self.bbox[3] - self.bbox[1])
    }

    /// `[x1, y1, x2, y2, onehot(class)]`.
    pub fn descriptor(&self, num_classes: usize) -> Vec<f64> {
        let mut v = self.bbox.to_vec();
        v.extend((0..num_classes).map(|k| if k == self.class_id { 1.0 } else { 0.0 }));
        v
    }
}

#[derive(Clone, Debug)]
pub struct LabelEncoder {
    pub num_classes: usize,
    pub dim: usize,
    /// Input-level alignment, `(4+K) x (4+K)`.
    pub align_in: Linear,
    pub fc1: Linear,
    pub norm1: LayerNorm,
    /// Feature-level alignment, `C x C`.
    pub align_feat: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub norm2: LayerNorm,
}

impl LabelEncoder {
    pub fn new(b: &mut Builder<'_>, num_classes: usize, dim: usize) -> Self {
        let d = 4 + num_classes;
        Self {
            num_classes,
            dim,
            align_in: Linear::identity(b, "align_in", d),
            fc1: Linear::new(b, "fc1", d, dim, true),
            norm1: LayerNorm::new(b, "norm1", dim),
            align_feat: Linear::identity(b, "align_feat", dim),
            fc2: Linear::new(b, "fc2", dim, dim, true),
            fc3: Linear::new(b, "fc3", dim, dim, true),
            norm2: LayerNorm::new(b, "norm2", dim),
        }
    }

    /// Validates the labels and stacks their descriptors, one row each.
    pub fn descriptors(&self, labels: &[LabelDescriptor]) -> Result<Tensor> {
        let d = 4 + self.num_classes;
        let mut data = Vec::with_capacity(labels.len() * d);
        for l in labels {
            l.validate(self.num_classes)?;
            data.extend(l.descriptor(self.num_classes));
        }
        Ok(Tensor::from_vec(labels.len(), d, data))
    }

    /// `(N, C)` embeddings, or `None` when there are no objects.
    pub fn forward(&self, g: &mut Graph<'_>, labels: &[LabelDescriptor]) -> Result<Option<Var>> {
        let desc = self.descriptors(labels)?;
        if labels.is_empty() {
            return Ok(None);
        }
        let x = g.constant(desc);
        Ok(Some(self.forward_descriptors(g, x)))
    }

    pub fn forward_descriptors(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let x0 = self.align_in.forward(g, x);
        let h = self.fc1.forward(g, x0);
        let h = self.norm1.forward(g, h);
        let h2 = self.align_feat.forward(g, h);
        let r = self.fc2.forward(g, h2);
        let r = g.relu(r);
        let r = self.fc3.forward(g, r);
        let s = g.add(h2, r);
        self.norm2.forward(g, s)
    }
}
