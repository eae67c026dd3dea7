//! Multi-head cross-attention from appearance queries to label keys/values.

use dyndistill_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Builder, Linear};

#[derive(Clone, Debug)]
pub struct InteractionEncoder {
    pub dim: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    /// Key/value source used when an image has no objects.
    pub null_label: dyndistill_autodiff::ParamId,
}

impl InteractionEncoder {
    pub fn new(b: &mut Builder<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide width {dim}"
            )));
        }
        let null_label = b.uniform("null_label", 1, dim, dim);
        Ok(Self {
            dim,
            heads,
            query: Linear::new(b, "query", dim, dim, true),
            key: Linear::new(b, "key", dim, dim, true),
            value: Linear::new(b, "value", dim, dim, true),
            out: Linear::new(b, "out", dim, dim, true),
            null_label,
        })
    }

    /// Per-head scores are scaled by `1/sqrt(dim/heads)`.
    pub fn scale(&self) -> f64 {
        1.0 / ((self.dim / self.heads) as f64).sqrt()
    }

    /// `appearance`: `(M, C)`; `labels`: `(N, C)` or `None` for no objects.
    pub fn forward(&self, g: &mut Graph<'_>, appearance: Var, labels: Option<Var>) -> Result<Var> {
        let labels = labels.unwrap_or_else(|| g.param(self.null_label));
        for (what, v) in [("appearance", appearance), ("label", labels)] {
            let c = g.shape(v).1;
            if c != self.dim {
                return Err(Error::Config(format!(
                    "{what} embedding width {c} differs from attention width {}",
                    self.dim
                )));
            }
        }
        let q = self.query.forward(g, appearance);
        let k = self.key.forward(g, labels);
        let v = self.value.forward(g, labels);
        let dh = self.dim / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, self.scale());
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, vh));
        }
        let u = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        Ok(self.out.forward(g, u))
    }
}

/// Attention weights of every head for inspection, `heads x (M, N)`.
pub fn attention_weights(
    enc: &InteractionEncoder,
    g: &mut Graph<'_>,
    appearance: Var,
    labels: Var,
) -> Vec<Tensor> {
    let q = enc.query.forward(g, appearance);
    let k = enc.key.forward(g, labels);
    let dh = enc.dim / enc.heads;
    (0..enc.heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, enc.scale());
            let a = g.softmax_rows(s);
            g.value(a).clone()
        })
        .collect()
}
