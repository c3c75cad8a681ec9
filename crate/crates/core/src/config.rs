//! Pipeline configuration shared by every stage.
//!
//! Every ablation axis is a plain field here so the CLI and the Python
//! bindings can flip it from a JSON config file.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the FPS start index is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpsStart {
    /// Lowest index of the lexicographically smallest point.
    Lexicographic,
    /// Uniformly random index drawn from a seeded generator.
    Seeded(u64),
}

/// Which history features enter the propagation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFusion {
    /// Geometric features plus the embedded target mask.
    Both,
    /// Geometric features only (mask fusion off).
    GeometryOnly,
    /// Embedded target mask only.
    MaskOnly,
}

/// Normalisation of the neighbor weights in propagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborSoftmax {
    /// Independent softmax for every channel.
    PerChannel,
    /// One softmax over channel-averaged logits, shared by all channels.
    Scalar,
}

/// Which history matrix the grouped attention reads keys and values from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKeys {
    /// Mask-fused history features.
    Fused,
    /// Raw concatenated history features.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Tokens sampled per frame.
    pub tokens: usize,
    /// Feature channels.
    pub channels: usize,
    /// Memory bank capacity in frames.
    pub memory_size: usize,
    /// Neighbors gathered from the history for each token.
    pub neighbors: usize,
    /// Points grouped around each token by the tokenizer.
    pub group_size: usize,
    /// Bidirectional scan layers.
    pub ssm_layers: usize,
    /// Hidden state size per channel.
    pub state_dim: usize,
    /// Search region: multiplier on the previous box extents.
    pub search_scale: f64,
    /// Search region: minimum margin added on every side, meters.
    pub search_margin: f64,
    /// Upper end of the precision threshold grid, meters.
    pub precision_cap: f64,
    /// Radius around the target center for positive quality labels, meters.
    pub quality_radius: f64,
    /// Transition point of the smooth-L1 box loss.
    pub smooth_l1_beta: f64,
    pub gfem: bool,
    pub fusion: FeatureFusion,
    pub neighbor_softmax: NeighborSoftmax,
    pub attention_keys: AttentionKeys,
    /// Divide attention logits by sqrt(C/2).
    pub attention_scale: bool,
    pub fps_start: FpsStart,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            tokens: 128,
            channels: 128,
            memory_size: 3,
            neighbors: 4,
            group_size: 16,
            ssm_layers: 3,
            state_dim: 16,
            search_scale: 2.0,
            search_margin: 2.0,
            precision_cap: 2.0,
            quality_radius: 0.3,
            smooth_l1_beta: 1.0,
            gfem: true,
            fusion: FeatureFusion::Both,
            neighbor_softmax: NeighborSoftmax::PerChannel,
            attention_keys: AttentionKeys::Fused,
            attention_scale: true,
            fps_start: FpsStart::Lexicographic,
        }
    }
}

impl Config {
    /// A small configuration for fast tests and examples.
    pub fn small() -> Self {
        Self {
            tokens: 16,
            channels: 8,
            group_size: 8,
            ssm_layers: 2,
            state_dim: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(format!("config: {msg}")));
        if self.tokens == 0 {
            return bad("tokens must be >= 1");
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            return bad("channels must be even and >= 2");
        }
        if self.memory_size == 0 {
            return bad("memory_size must be >= 1");
        }
        if self.neighbors == 0 || self.group_size == 0 {
            return bad("neighbors and group_size must be >= 1");
        }
        if self.ssm_layers == 0 || self.state_dim == 0 {
            return bad("ssm_layers and state_dim must be >= 1");
        }
        if !(self.search_scale > 0.0) || !(self.search_margin >= 0.0) {
            return bad("search_scale must be > 0 and search_margin >= 0");
        }
        if !(self.precision_cap > 0.0) {
            return bad("precision_cap must be > 0");
        }
        if !(self.quality_radius > 0.0) || !(self.smooth_l1_beta > 0.0) {
            return bad("quality_radius and smooth_l1_beta must be > 0");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.tokens, cfg.channels, cfg.memory_size, cfg.neighbors), (128, 128, 3, 4));
        assert_eq!(cfg.ssm_layers, 3);
        Config::small().validate().unwrap();
    }

    #[test]
    fn odd_channels_rejected() {
        let cfg = Config {
            channels: 7,
            ..Config::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_fills_defaults() {
        let cfg: Config = serde_json::from_str(r#"{"memory_size": 5, "gfem": false}"#).unwrap();
        assert_eq!(cfg.memory_size, 5);
        assert!(!cfg.gfem);
        assert_eq!(cfg.tokens, 128);
        let back: Config = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
