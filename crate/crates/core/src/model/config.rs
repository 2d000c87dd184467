use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::conv_output_size;

/// Number of regression outputs: one confidence plus four box displacements.
pub const OUTPUT_DIM: usize = 5;
/// Input images are RGB.
pub const INPUT_CHANNELS: usize = 3;

/// Per-layer map budget.
///
/// A layer carrying cross filters has `single_maps` maps in each single-image
/// path plus `cross_maps` cross maps. Without cross filters the cross budget is
/// split evenly over the two single paths, so each gets
/// `single_maps + cross_maps / 2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub single_maps: usize,
    pub cross_maps: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Single-image paths, cross-image path, feature-map difference fusion.
    Mcnn,
    /// Single-image paths only; absolute difference of fc embeddings.
    Siamese,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McnnConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
    /// 1-based indices of layers carrying cross-image filters.
    pub cross_enabled: Vec<usize>,
    /// Hidden widths of the fully connected head.
    pub fc_dims: Vec<usize>,
    pub output_dim: usize,
    /// Share parameters between the two single-image paths.
    #[serde(default)]
    pub tie_single_paths: bool,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    /// Embedding width of the Siamese baseline.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

fn default_architecture() -> Architecture {
    Architecture::Mcnn
}

fn default_embed_dim() -> usize {
    64
}

impl Default for McnnConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn layer(single_maps: usize, cross_maps: usize, kernel: usize, padding: usize) -> LayerSpec {
    LayerSpec { single_maps, cross_maps, kernel, stride: 2, padding }
}

impl McnnConfig {
    /// Desk-scale network: 32×32 input, five stride-2 layers, cross filters on
    /// layers 2–5. Padding 2 throughout keeps the last maps at 3×3
    /// (16, 8, 5, 4, 3) instead of collapsing to a single cell.
    pub fn desk() -> Self {
        Self {
            input_height: 32,
            input_width: 32,
            layers: vec![
                layer(12, 12, 5, 2),
                layer(12, 12, 5, 2),
                layer(16, 16, 3, 2),
                layer(16, 16, 3, 2),
                layer(16, 16, 3, 2),
            ],
            cross_enabled: vec![2, 3, 4, 5],
            fc_dims: vec![64],
            output_dim: OUTPUT_DIM,
            tie_single_paths: false,
            architecture: Architecture::Mcnn,
            embed_dim: 64,
        }
    }

    /// Reduced network used by gradient checks: 32×32 input, three layers,
    /// cross filters on layers 2–3, one hidden fc layer of width 32.
    pub fn reduced() -> Self {
        Self {
            input_height: 32,
            input_width: 32,
            layers: vec![layer(4, 4, 5, 2), layer(4, 4, 3, 1), layer(4, 4, 3, 1)],
            cross_enabled: vec![2, 3],
            fc_dims: vec![32],
            output_dim: OUTPUT_DIM,
            tie_single_paths: false,
            architecture: Architecture::Mcnn,
            embed_dim: 32,
        }
    }

    /// Full-size layout for shape checks only: 227×227 input, five layers,
    /// conv2 with 30 single and 30 cross maps.
    pub fn full_scale() -> Self {
        Self {
            input_height: 227,
            input_width: 227,
            layers: vec![
                layer(48, 48, 11, 0),
                layer(30, 30, 5, 2),
                layer(64, 64, 3, 1),
                layer(64, 64, 3, 1),
                layer(48, 48, 3, 1),
            ],
            cross_enabled: vec![2, 3, 4, 5],
            fc_dims: vec![1024, 256],
            output_dim: OUTPUT_DIM,
            tie_single_paths: false,
            architecture: Architecture::Mcnn,
            embed_dim: 256,
        }
    }

    /// Same budget with cross filters on exactly `layers` (1-based).
    pub fn with_cross(&self, layers: &[usize]) -> Self {
        let mut c = self.clone();
        c.architecture = Architecture::Mcnn;
        c.cross_enabled = layers.to_vec();
        c.cross_enabled.sort_unstable();
        c.cross_enabled.dedup();
        c
    }

    /// The Siamese baseline over the same single-path budget.
    pub fn siamese(&self) -> Self {
        let mut c = self.with_cross(&[]);
        c.architecture = Architecture::Siamese;
        c
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// 0-based test for cross filters on layer `j`.
    pub fn has_cross(&self, j: usize) -> bool {
        self.architecture == Architecture::Mcnn && self.cross_enabled.contains(&(j + 1))
    }

    /// 0-based index of the first cross layer.
    pub fn first_cross(&self) -> Option<usize> {
        (0..self.num_layers()).find(|&j| self.has_cross(j))
    }

    /// Maps per single-image path at layer `j` (0-based).
    pub fn single_maps(&self, j: usize) -> usize {
        let l = &self.layers[j];
        if self.has_cross(j) {
            l.single_maps
        } else {
            l.single_maps + l.cross_maps / 2
        }
    }

    /// Cross maps at layer `j` (0-based), zero when disabled.
    pub fn cross_maps(&self, j: usize) -> usize {
        if self.has_cross(j) {
            self.layers[j].cross_maps
        } else {
            0
        }
    }

    /// Channels entering layer `j` of a single path.
    pub fn single_in_maps(&self, j: usize) -> usize {
        if j == 0 {
            INPUT_CHANNELS
        } else {
            self.single_maps(j - 1)
        }
    }

    /// Channel split `(P, Q, T)` entering the cross filters of layer `j`.
    pub fn cross_in_split(&self, j: usize) -> (usize, usize, usize) {
        let p = self.single_in_maps(j);
        let t = if j == 0 { 0 } else { self.cross_maps(j - 1) };
        (p, p, t)
    }

    /// Output `(height, width)` of every layer.
    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut out = Vec::with_capacity(self.layers.len());
        for (j, l) in self.layers.iter().enumerate() {
            h = conv_output_size(h, l.kernel, l.stride, l.padding)
                .map_err(|e| crate::Error::Config(format!("layer {}: {e}", j + 1)))?;
            w = conv_output_size(w, l.kernel, l.stride, l.padding)
                .map_err(|e| crate::Error::Config(format!("layer {}: {e}", j + 1)))?;
            out.push((h, w));
        }
        Ok(out)
    }

    /// Length of the flattened final single-path feature map.
    pub fn final_single_len(&self) -> Result<usize> {
        let n = self.num_layers();
        let (h, w) = *self.spatial_sizes()?.last().expect("validated non-empty");
        Ok(self.single_maps(n - 1) * h * w)
    }

    /// Width of the vector entering the fc head.
    pub fn fused_dim(&self) -> Result<usize> {
        let n = self.num_layers();
        let (h, w) = *self.spatial_sizes()?.last().expect("validated non-empty");
        Ok(match self.architecture {
            Architecture::Mcnn => (self.single_maps(n - 1) + self.cross_maps(n - 1)) * h * w,
            Architecture::Siamese => self.embed_dim,
        })
    }

    /// Receptive field side after each layer: `r_j = r_{j−1} + (k_j − 1)·Π_{i<j} s_i`.
    pub fn receptive_fields(&self) -> Vec<usize> {
        let mut r = 1;
        let mut jump = 1;
        self.layers
            .iter()
            .map(|l| {
                r += (l.kernel - 1) * jump;
                jump *= l.stride;
                r
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return config_err("at least one conv layer is required");
        }
        if self.output_dim != OUTPUT_DIM {
            return config_err(format!("output_dim must be {OUTPUT_DIM}, got {}", self.output_dim));
        }
        for (j, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.single_maps == 0 {
                return config_err(format!("layer {}: kernel and single_maps must be positive", j + 1));
            }
            if l.stride != 2 {
                return config_err(format!("layer {}: conv stride must be 2, got {}", j + 1, l.stride));
            }
        }
        let n = self.num_layers();
        let mut sorted = self.cross_enabled.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.cross_enabled.len() || sorted != self.cross_enabled {
            return config_err("cross_enabled must be strictly increasing");
        }
        if let Some(&bad) = sorted.iter().find(|&&j| j == 0 || j > n) {
            return config_err(format!("cross_enabled layer {bad} is outside 1..={n}"));
        }
        match self.architecture {
            Architecture::Siamese if !sorted.is_empty() => {
                return config_err("the Siamese architecture has no cross path");
            }
            Architecture::Siamese if self.embed_dim == 0 => {
                return config_err("embed_dim must be positive");
            }
            _ => {}
        }
        if let Some(&first) = sorted.first() {
            // Only the last cross maps reach the fusion; a gap would leave a dead branch.
            if sorted.len() != n - first + 1 {
                return config_err(format!(
                    "cross layers {sorted:?} must form a contiguous run ending at layer {n}"
                ));
            }
            for &j in &sorted {
                if self.layers[j - 1].cross_maps == 0 {
                    return config_err(format!("layer {j} carries cross filters but cross_maps is 0"));
                }
            }
        }
        if self.fc_dims.contains(&0) {
            return config_err("fc widths must be positive");
        }
        self.spatial_sizes()?;
        Ok(())
    }

    /// Short display name in the ablation naming scheme.
    pub fn variant_name(&self, base: &McnnConfig) -> String {
        if self.architecture == Architecture::Siamese {
            return "Siamese".into();
        }
        if self.cross_enabled.is_empty() {
            return "M-CNN (w/o cross)".into();
        }
        if self.cross_enabled == base.cross_enabled {
            return "M-CNN".into();
        }
        let list: Vec<String> = self.cross_enabled.iter().rev().map(|j| j.to_string()).collect();
        format!("M-CNN (cross {})", list.join(","))
    }
}
