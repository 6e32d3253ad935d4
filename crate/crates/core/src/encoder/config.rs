use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EncoderSpec;
use crate::error::{AatError, Result};

/// Suppression factor written for heads marked ablated in a binary mask.
pub const ABLATED_BETA: f64 = 0.1;

/// Per-head suppression factors, row-major by layer.
///
/// `beta == 1` retains a head unchanged; smaller values push its attention
/// toward the class token. In the binary view a head is ablated iff
/// `beta < 0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    layers: usize,
    heads: usize,
    beta: Vec<f64>,
}

/// On-disk form: heads missing from `entries` take `default_beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    pub layers: usize,
    pub heads: usize,
    #[serde(default = "one")]
    pub default_beta: f64,
    #[serde(default)]
    pub entries: Vec<ConfigEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub layer: usize,
    pub head: usize,
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(AatError::InvalidConfig(format!("beta {beta} outside [0, 1]")))
    }
}

impl AblationConfig {
    pub fn all_ones(layers: usize, heads: usize) -> Self {
        Self {
            layers,
            heads,
            beta: vec![1.0; layers * heads],
        }
    }

    pub fn identity_for(spec: &EncoderSpec) -> Self {
        Self::all_ones(spec.num_layers, spec.heads_per_layer)
    }

    pub fn from_betas(layers: usize, heads: usize, beta: Vec<f64>) -> Result<Self> {
        if beta.len() != layers * heads {
            return Err(AatError::InvalidConfig(format!(
                "{} betas for {layers}x{heads} heads",
                beta.len()
            )));
        }
        for &b in &beta {
            check_beta(b)?;
        }
        Ok(Self { layers, heads, beta })
    }

    /// `mask[i] == true` ablates head `i` (row-major) at `beta`.
    pub fn from_mask(layers: usize, heads: usize, mask: &[bool], beta: f64) -> Result<Self> {
        check_beta(beta)?;
        if mask.len() != layers * heads {
            return Err(AatError::InvalidConfig(format!(
                "mask of length {} for {layers}x{heads} heads",
                mask.len()
            )));
        }
        let beta = mask.iter().map(|&m| if m { beta } else { 1.0 }).collect();
        Ok(Self { layers, heads, beta })
    }

    pub fn from_heads(layers: usize, heads: usize, ablate: &[(usize, usize)], beta: f64) -> Result<Self> {
        let mut cfg = Self::all_ones(layers, heads);
        for &(l, h) in ablate {
            cfg.set_beta(l, h, beta)?;
        }
        Ok(cfg)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    #[inline]
    pub fn beta(&self, layer: usize, head: usize) -> f64 {
        self.beta[layer * self.heads + head]
    }

    pub fn set_beta(&mut self, layer: usize, head: usize, beta: f64) -> Result<()> {
        check_beta(beta)?;
        if layer >= self.layers || head >= self.heads {
            return Err(AatError::InvalidConfig(format!(
                "head ({layer}, {head}) outside {}x{}",
                self.layers, self.heads
            )));
        }
        self.beta[layer * self.heads + head] = beta;
        Ok(())
    }

    pub fn is_ablated(&self, layer: usize, head: usize) -> bool {
        self.beta(layer, head) < 0.5
    }

    pub fn ablated_mask(&self) -> Vec<bool> {
        self.beta.iter().map(|&b| b < 0.5).collect()
    }

    pub fn ablated_heads(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .flat_map(|l| (0..self.heads).map(move |h| (l, h)))
            .filter(|&(l, h)| self.is_ablated(l, h))
            .collect()
    }

    pub fn ablation_ratio(&self) -> f64 {
        self.ablated_mask().iter().filter(|&&m| m).count() as f64 / self.beta.len() as f64
    }

    /// The binary view re-expressed with the default suppression factor.
    pub fn binarized(&self) -> Self {
        let beta = self
            .beta
            .iter()
            .map(|&b| if b < 0.5 { ABLATED_BETA } else { 1.0 })
            .collect();
        Self {
            layers: self.layers,
            heads: self.heads,
            beta,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.beta.iter().all(|&b| b == 1.0)
    }

    pub fn check_matches(&self, spec: &EncoderSpec) -> Result<()> {
        if self.layers != spec.num_layers || self.heads != spec.heads_per_layer {
            return Err(AatError::InvalidConfig(format!(
                "config is {}x{}, encoder is {}x{}",
                self.layers, self.heads, spec.num_layers, spec.heads_per_layer
            )));
        }
        Ok(())
    }

    pub fn to_file(&self) -> ConfigFile {
        let entries = (0..self.layers)
            .flat_map(|l| (0..self.heads).map(move |h| (l, h)))
            .filter(|&(l, h)| self.beta(l, h) != 1.0)
            .map(|(layer, head)| ConfigEntry {
                layer,
                head,
                beta: self.beta(layer, head),
            })
            .collect();
        ConfigFile {
            layers: self.layers,
            heads: self.heads,
            default_beta: 1.0,
            entries,
        }
    }

    pub fn from_file(file: &ConfigFile) -> Result<Self> {
        check_beta(file.default_beta)?;
        let mut cfg = Self {
            layers: file.layers,
            heads: file.heads,
            beta: vec![file.default_beta; file.layers * file.heads],
        };
        let mut seen = vec![false; cfg.beta.len()];
        for e in &file.entries {
            cfg.set_beta(e.layer, e.head, e.beta)?;
            let i = e.layer * file.heads + e.head;
            if std::mem::replace(&mut seen[i], true) {
                return Err(AatError::InvalidConfig(format!(
                    "head ({}, {}) listed twice",
                    e.layer, e.head
                )));
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        fs::write(path, text).map_err(|e| AatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AatError::io(path, e))?;
        let file: ConfigFile = serde_json::from_str(&text)
            .map_err(|e| AatError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_file(&file)
    }
}
