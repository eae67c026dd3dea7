//! Top-down feature pyramid with lateral 1x1 projections, nearest-neighbour
//! upsampling and a 3x3 smoothing convolution per level.

use dyndistill_autodiff::Graph;

use crate::error::{Error, Result};
use crate::nn::{upsample2, Builder, Conv3x3, FeatureMap, Linear};

#[derive(Clone, Debug)]
pub struct Fpn {
    pub channels: usize,
    pub lateral: Vec<Linear>,
    pub output: Vec<Conv3x3>,
}

impl Fpn {
    pub fn new(b: &mut Builder<'_>, in_dims: &[usize], channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("pyramid width must be positive".into()));
        }
        let lateral = in_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(b, &format!("lateral{i}"), d, channels, true))
            .collect();
        let output = (0..in_dims.len())
            .map(|i| Conv3x3::new(b, &format!("output{i}"), channels, channels))
            .collect();
        Ok(Self {
            channels,
            lateral,
            output,
        })
    }

    /// Fuses stage outputs (finest first) into pyramid levels (finest first).
    pub fn forward(&self, g: &mut Graph<'_>, stages: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        if stages.len() != self.lateral.len() {
            return Err(Error::Config(format!(
                "pyramid built for {} inputs, got {}",
                self.lateral.len(),
                stages.len()
            )));
        }
        let mut merged: Vec<FeatureMap> = Vec::with_capacity(stages.len());
        let mut above: Option<FeatureMap> = None;
        for (k, x) in stages.iter().enumerate().rev() {
            let lat = x.with_var(self.lateral[k].forward(g, x.var));
            let fused = match above {
                Some(top) => {
                    let up = upsample2(g, top);
                    if (up.h, up.w) != (lat.h, lat.w) {
                        return Err(Error::Input(format!(
                            "pyramid level {k} is {}x{} but the level above upsamples to {}x{}",
                            lat.h, lat.w, up.h, up.w
                        )));
                    }
                    lat.with_var(g.add(lat.var, up.var))
                }
                None => lat,
            };
            above = Some(fused);
            merged.push(fused);
        }
        merged.reverse();
        Ok(merged
            .into_iter()
            .zip(&self.output)
            .map(|(m, conv)| conv.forward(g, m))
            .collect())
    }
}
