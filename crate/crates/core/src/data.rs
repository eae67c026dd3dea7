//! In-memory detection samples.

use std::sync::Arc;

use dyndistill_autodiff::Tensor;

use crate::eval::GroundTruth;
use crate::label_encoder::LabelDescriptor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One image with its annotations. Pixels are stored channels-last
/// (`row * W + col`, then channel) as normalised `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Arc<[f32]>,
    pub labels: Vec<LabelDescriptor>,
}

impl Sample {
    /// `(H*W, C)` tensor for the model.
    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.height * self.width,
            self.channels,
            self.pixels.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn ground_truth(&self) -> impl Iterator<Item = GroundTruth> + '_ {
        self.labels.iter().map(|l| GroundTruth {
            image_id: self.image_id,
            class_id: l.class_id,
            bbox: l.bbox,
        })
    }
}

/// Zero-mean, unit-variance per channel, in place. Constant channels become zero.
pub fn normalize_channels(pixels: &mut [f32], channels: usize) {
    let n = pixels.len() / channels;
    for c in 0..channels {
        let mut mean = 0.0f64;
        for p in 0..n {
            mean += f64::from(pixels[p * channels + c]);
        }
        mean /= n as f64;
        let mut var = 0.0f64;
        for p in 0..n {
            let d = f64::from(pixels[p * channels + c]) - mean;
            var += d * d;
        }
        let std = (var / n as f64).sqrt();
        let inv = if std > 1e-12 { 1.0 / std } else { 0.0 };
        for p in 0..n {
            let v = &mut pixels[p * channels + c];
            *v = ((f64::from(*v) - mean) * inv) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_channels_have_zero_mean_unit_variance() {
        let mut px: Vec<f32> = (0..30).map(|k| (k * k % 17) as f32).collect();
        normalize_channels(&mut px, 3);
        for c in 0..3 {
            let vals: Vec<f64> = px.iter().skip(c).step_by(3).map(|&v| f64::from(v)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
