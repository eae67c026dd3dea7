//! Axial-shift MLP backbone: patch merging followed by residual blocks that
//! mix channels after shifting channel groups along each spatial axis.

use dyndistill_autodiff::Graph;

use crate::config::{AxialShiftConfig, BackboneConfig, ShiftDirection};
use crate::error::{Error, Result};
use crate::nn::{Builder, FeatureMap, LayerNorm, Linear};
use crate::spatial;

/// Shifted horizontal and vertical views, each mixed by its own channel
/// projection, then summed.
#[derive(Clone, Debug)]
pub struct AxialShift {
    pub cfg: AxialShiftConfig,
    pub proj_h: Linear,
    pub proj_v: Linear,
}

impl AxialShift {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: AxialShiftConfig) -> Self {
        b.scope(name, |b| Self {
            cfg,
            proj_h: Linear::new(b, "proj_h", cfg.channels, cfg.channels, false),
            proj_v: Linear::new(b, "proj_v", cfg.channels, cfg.channels, false),
        })
    }

    /// The shift alone, without projection.
    pub fn shift(
        g: &mut Graph<'_>,
        x: FeatureMap,
        cfg: AxialShiftConfig,
        dir: ShiftDirection,
    ) -> Result<FeatureMap> {
        let c = x.channels(g);
        if c != cfg.channels {
            return Err(Error::Config(format!(
                "axial shift configured for {} channels, input has {c}",
                cfg.channels
            )));
        }
        cfg.validate()?;
        let index = spatial::axial_shift(x.h, x.w, cfg, dir);
        Ok(x.with_var(g.gather(x.var, x.h * x.w, c, index)))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: FeatureMap) -> Result<FeatureMap> {
        let sh = Self::shift(g, x, self.cfg, ShiftDirection::Horizontal)?;
        let sv = Self::shift(g, x, self.cfg, ShiftDirection::Vertical)?;
        let h = self.proj_h.forward(g, sh.var);
        let v = self.proj_v.forward(g, sv.var);
        Ok(x.with_var(g.add(h, v)))
    }
}

/// `x + fc2(gelu(fc1(gelu(axial(LN(x))))))`.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub norm: LayerNorm,
    pub axial: AxialShift,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: AxialShiftConfig, mlp_ratio: usize) -> Self {
        let c = cfg.channels;
        b.scope(name, |b| Self {
            norm: LayerNorm::new(b, "norm", c),
            axial: AxialShift::new(b, "axial", cfg),
            fc1: Linear::new(b, "fc1", c, c * mlp_ratio, true),
            fc2: Linear::new(b, "fc2", c * mlp_ratio, c, true),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: FeatureMap) -> Result<FeatureMap> {
        let n = self.norm.forward(g, x.var);
        let s = self.axial.forward(g, x.with_var(n))?;
        let a = g.gelu(s.var);
        let h = self.fc1.forward(g, a);
        let h = g.gelu(h);
        let y = self.fc2.forward(g, h);
        Ok(x.with_var(g.add(x.var, y)))
    }
}

/// Concatenates each non-overlapping `n x n` block, projects, normalises.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub factor: usize,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl PatchMerge {
    pub fn new(b: &mut Builder<'_>, name: &str, factor: usize, in_dim: usize, out_dim: usize) -> Self {
        b.scope(name, |b| Self {
            factor,
            proj: Linear::new(b, "proj", factor * factor * in_dim, out_dim, true),
            norm: LayerNorm::new(b, "norm", out_dim),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: FeatureMap) -> Result<FeatureMap> {
        let n = self.factor;
        if !x.h.is_multiple_of(n) || !x.w.is_multiple_of(n) {
            return Err(Error::Input(format!(
                "{}x{} map cannot be merged in {n}x{n} patches",
                x.h, x.w
            )));
        }
        let c = x.channels(g);
        let (h, w) = (x.h / n, x.w / n);
        let index = spatial::patch_merge(x.h, x.w, c, n);
        let cols = g.gather(x.var, h * w, n * n * c, index);
        let y = self.proj.forward(g, cols);
        let y = self.norm.forward(g, y);
        Ok(FeatureMap::new(y, h, w))
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub merge: PatchMerge,
    pub blocks: Vec<MlpBlock>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(b: &mut Builder<'_>, cfg: &BackboneConfig) -> Self {
        let mut in_dim = cfg.in_channels;
        let stages = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                b.scope(&format!("stage{}", i + 1), |b| {
                    let merge = PatchMerge::new(b, "merge", s.patch_merge, in_dim, s.dim);
                    let shift = AxialShiftConfig::new(s.shift_size, s.dilation, s.dim);
                    let blocks = (0..s.depth)
                        .map(|k| MlpBlock::new(b, &format!("block{k}"), shift, cfg.mlp_ratio))
                        .collect();
                    in_dim = s.dim;
                    Stage { merge, blocks }
                })
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            stages,
        }
    }

    /// Returns the output of every stage, finest first.
    pub fn forward(&self, g: &mut Graph<'_>, image: FeatureMap) -> Result<Vec<FeatureMap>> {
        let m = self.cfg.total_stride();
        if !image.h.is_multiple_of(m) || !image.w.is_multiple_of(m) || image.h == 0 || image.w == 0 {
            return Err(Error::Input(format!(
                "image size {}x{} is not a multiple of {m}",
                image.h, image.w
            )));
        }
        let c = image.channels(g);
        if c != self.cfg.in_channels {
            return Err(Error::Input(format!(
                "image has {c} channels, backbone expects {}",
                self.cfg.in_channels
            )));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.merge.forward(g, x)?;
            for block in &stage.blocks {
                x = block.forward(g, x)?;
            }
            outs.push(x);
        }
        Ok(outs)
    }
}
