//! Layer primitives over channels-last feature maps.
//!
//! A feature map with `C` channels and spatial size `H x W` is a `(H*W) x C`
//! matrix whose row `i*W + j` holds the channel vector of cell `(i, j)`.

use std::sync::Arc;

use dyndistill_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::spatial;

/// A graph node viewed as an `h x w` channels-last map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

impl FeatureMap {
    pub fn new(var: Var, h: usize, w: usize) -> Self {
        Self { var, h, w }
    }

    pub fn channels(&self, g: &Graph<'_>) -> usize {
        g.shape(self.var).1
    }

    pub fn with_var(self, var: Var) -> Self {
        Self { var, ..self }
    }
}

/// Converts a `(C, H, W)` planar buffer into a channels-last tensor.
pub fn chw_to_hwc(data: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    assert_eq!(data.len(), c * h * w);
    Tensor::from_fn(h * w, c, |p, ch| data[ch * h * w + p])
}

/// Converts a channels-last tensor back to a `(C, H, W)` planar buffer.
pub fn hwc_to_chw(t: &Tensor) -> Vec<f64> {
    let (hw, c) = t.shape();
    let mut out = vec![0.0; hw * c];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = t.get(p, ch);
        }
    }
    out
}

/// Registers parameters under a name prefix with deterministic initialisation.
pub struct Builder<'s> {
    store: &'s mut ParamStore,
    prefix: String,
    rng: ChaCha8Rng,
}

impl<'s> Builder<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            prefix: String::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Runs `f` with `name.` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_>) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{name}.");
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(format!("{}{name}", self.prefix), value)
    }

    /// Uniform in `±sqrt(3 / fan_in)` (unit-variance preserving for linear maps).
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(rows, cols, |_, _| self.rng.gen_range(-bound..bound));
        self.add(name, t)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.store.set(id, value);
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        b.scope(name, |b| {
            let weight = b.uniform("weight", in_dim, out_dim, in_dim);
            let bias = bias.then(|| b.add("bias", Tensor::zeros(1, out_dim)));
            Self {
                weight,
                bias,
                in_dim,
                out_dim,
            }
        })
    }

    /// Square weight initialised to the identity, no bias.
    pub fn identity(b: &mut Builder<'_>, name: &str, dim: usize) -> Self {
        b.scope(name, |b| Self {
            weight: b.add("weight", Tensor::identity(dim)),
            bias: None,
            in_dim: dim,
            out_dim: dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn numel(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalisation with a learned affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize) -> Self {
        b.scope(name, |b| Self {
            gamma: b.add("gamma", Tensor::full(1, dim, 1.0)),
            beta: b.add("beta", Tensor::zeros(1, dim)),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// 3x3 convolution with zero padding, stride 1, as im2col + matmul.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub linear: Linear,
}

impl Conv3x3 {
    pub fn new(b: &mut Builder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            linear: Linear::new(b, name, 9 * in_dim, out_dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: FeatureMap) -> FeatureMap {
        let c = x.channels(g);
        debug_assert_eq!(9 * c, self.linear.in_dim);
        let index = spatial::im2col3x3(x.h, x.w, c);
        let cols = g.gather(x.var, x.h * x.w, 9 * c, index);
        x.with_var(self.linear.forward(g, cols))
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(g: &mut Graph<'_>, x: FeatureMap) -> FeatureMap {
    let c = x.channels(g);
    let index: Arc<[u32]> = spatial::upsample_nearest(x.h, x.w, c, 2);
    let var = g.gather(x.var, 4 * x.h * x.w, c, index);
    FeatureMap::new(var, 2 * x.h, 2 * x.w)
}
