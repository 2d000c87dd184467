use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MatchOutput, OUTPUT_DIM};

/// Lower bound applied to every variance component.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Element-wise standardization of network targets.
///
/// Confidence statistics come from every pair; displacement statistics only
/// from pairs whose displacements are defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputNormalizer {
    pub mean: [f64; OUTPUT_DIM],
    pub variance: [f64; OUTPUT_DIM],
}

impl Default for OutputNormalizer {
    fn default() -> Self {
        Self { mean: [0.0; OUTPUT_DIM], variance: [1.0; OUTPUT_DIM] }
    }
}

impl OutputNormalizer {
    /// Population mean and variance over `(target, displacement_valid)`.
    pub fn fit<'a>(targets: impl IntoIterator<Item = (&'a MatchOutput<f64>, bool)>) -> Result<Self> {
        let mut sum = [0.0; OUTPUT_DIM];
        let mut sq = [0.0; OUTPUT_DIM];
        let mut count = [0usize; OUTPUT_DIM];
        for (t, valid) in targets {
            let a = t.to_array();
            let dims = if valid { OUTPUT_DIM } else { 1 };
            for i in 0..dims {
                sum[i] += a[i];
                sq[i] += a[i] * a[i];
                count[i] += 1;
            }
        }
        if count[0] == 0 {
            return Err(Error::Training("cannot fit a normalizer to no targets".into()));
        }
        let mut out = Self::default();
        for i in 0..OUTPUT_DIM {
            if count[i] == 0 {
                continue;
            }
            let n = count[i] as f64;
            let mean = sum[i] / n;
            out.mean[i] = mean;
            out.variance[i] = (sq[i] / n - mean * mean).max(VARIANCE_FLOOR);
        }
        Ok(out)
    }

    pub fn normalize(&self, t: &MatchOutput<f64>) -> MatchOutput<f64> {
        let a = t.to_array();
        let mut out = [0.0; OUTPUT_DIM];
        for i in 0..OUTPUT_DIM {
            out[i] = (a[i] - self.mean[i]) / self.variance[i].sqrt();
        }
        MatchOutput::from_slice(&out)
    }

    pub fn denormalize(&self, t: &MatchOutput<f64>) -> MatchOutput<f64> {
        let a = t.to_array();
        let mut out = [0.0; OUTPUT_DIM];
        for i in 0..OUTPUT_DIM {
            out[i] = a[i] * self.variance[i].sqrt() + self.mean[i];
        }
        MatchOutput::from_slice(&out)
    }
}
