//! Toy ViT-style image encoder with per-head attention ablation.
//!
//! Blocks are pre-LN: `x += MHA(LN1(x))`, then `x += FFN(LN2(x))`. The final
//! class-token state (row 0) is projected to the embedding space and
//! L2-normalized.

mod attention;
mod config;
mod forward;
mod gated;

use serde::{Deserialize, Serialize};

pub use attention::{head_attention, manipulate_attention, Manipulated};
pub use config::{AblationConfig, ConfigEntry, ConfigFile, ABLATED_BETA};
pub use forward::{encode_batch, encode_batch_threaded, encode_image, Encoder};
pub use gated::{gated_embedding, GateNodes};

use crate::container::{Container, NamedTensor};
use crate::error::{AatError, Result};
use crate::numerics::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub token_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub embed_dim: usize,
    /// Token count including the class token at index 0.
    pub num_tokens: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            num_layers: 4,
            heads_per_layer: 4,
            token_dim: 32,
            head_dim: 8,
            ffn_dim: 64,
            embed_dim: 16,
            num_tokens: 9,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.heads_per_layer == 0 {
            return Err(AatError::InvalidParameter(
                "encoder needs at least one layer and one head".into(),
            ));
        }
        if self.token_dim != self.heads_per_layer * self.head_dim {
            return Err(AatError::InvalidParameter(format!(
                "token_dim {} != heads_per_layer {} x head_dim {}",
                self.token_dim, self.heads_per_layer, self.head_dim
            )));
        }
        if self.num_tokens < 2 {
            return Err(AatError::InvalidParameter(format!(
                "num_tokens must be at least 2 (class + image), got {}",
                self.num_tokens
            )));
        }
        if self.ffn_dim == 0 || self.embed_dim == 0 {
            return Err(AatError::InvalidParameter("ffn_dim and embed_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }
}

/// Query, key and value projections of one head: `token_dim × head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Tensor2,
    pub bq: Vec<f32>,
    pub wk: Tensor2,
    pub bk: Vec<f32>,
    pub wv: Tensor2,
    pub bv: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub heads: Vec<HeadWeights>,
    /// Merges the concatenated head outputs: `token_dim × token_dim`.
    pub wo: Tensor2,
    pub bo: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w1: Tensor2,
    pub b1: Vec<f32>,
    pub w2: Tensor2,
    pub b2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub spec: EncoderSpec,
    pub layers: Vec<LayerWeights>,
    /// Class-token state to embedding: `token_dim × embed_dim`.
    pub proj: Tensor2,
}

impl EncoderWeights {
    /// Checks every matrix against `spec`.
    pub fn validate(&self) -> Result<()> {
        let s = &self.spec;
        s.validate()?;
        let bad = |what: String| AatError::ShapeMismatch {
            name: what,
            reason: "does not match encoder spec".into(),
        };
        if self.layers.len() != s.num_layers {
            return Err(bad(format!("layers ({})", self.layers.len())));
        }
        let check_m = |name: String, m: &Tensor2, r: usize, c: usize| {
            if m.shape() != (r, c) {
                Err(bad(format!("{name} {:?}", m.shape())))
            } else {
                Ok(())
            }
        };
        let check_v = |name: String, v: &[f32], n: usize| {
            if v.len() != n {
                Err(bad(format!("{name} [{}]", v.len())))
            } else {
                Ok(())
            }
        };
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != s.heads_per_layer {
                return Err(bad(format!("layers.{l}.heads ({})", layer.heads.len())));
            }
            for (h, head) in layer.heads.iter().enumerate() {
                let p = format!("layers.{l}.heads.{h}");
                check_m(format!("{p}.wq"), &head.wq, s.token_dim, s.head_dim)?;
                check_m(format!("{p}.wk"), &head.wk, s.token_dim, s.head_dim)?;
                check_m(format!("{p}.wv"), &head.wv, s.token_dim, s.head_dim)?;
                check_v(format!("{p}.bq"), &head.bq, s.head_dim)?;
                check_v(format!("{p}.bk"), &head.bk, s.head_dim)?;
                check_v(format!("{p}.bv"), &head.bv, s.head_dim)?;
            }
            let p = format!("layers.{l}");
            check_v(format!("{p}.ln1.gain"), &layer.ln1_gain, s.token_dim)?;
            check_v(format!("{p}.ln1.bias"), &layer.ln1_bias, s.token_dim)?;
            check_m(format!("{p}.attn_out.w"), &layer.wo, s.token_dim, s.token_dim)?;
            check_v(format!("{p}.attn_out.b"), &layer.bo, s.token_dim)?;
            check_v(format!("{p}.ln2.gain"), &layer.ln2_gain, s.token_dim)?;
            check_v(format!("{p}.ln2.bias"), &layer.ln2_bias, s.token_dim)?;
            check_m(format!("{p}.ffn.w1"), &layer.w1, s.token_dim, s.ffn_dim)?;
            check_v(format!("{p}.ffn.b1"), &layer.b1, s.ffn_dim)?;
            check_m(format!("{p}.ffn.w2"), &layer.w2, s.ffn_dim, s.token_dim)?;
            check_v(format!("{p}.ffn.b2"), &layer.b2, s.token_dim)?;
        }
        check_m("proj".into(), &self.proj, s.token_dim, s.embed_dim)
    }

    pub fn to_container(&self, mut meta: serde_json::Value) -> Container {
        if let serde_json::Value::Object(map) = &mut meta {
            map.insert(
                "encoder".into(),
                serde_json::to_value(self.spec).expect("spec serializes"),
            );
        }
        let mut c = Container::new(meta);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            c.push(NamedTensor::from_vector(format!("{p}.ln1.gain"), &layer.ln1_gain));
            c.push(NamedTensor::from_vector(format!("{p}.ln1.bias"), &layer.ln1_bias));
            for (h, head) in layer.heads.iter().enumerate() {
                let hp = format!("{p}.heads.{h}");
                c.push(NamedTensor::from_matrix(format!("{hp}.wq"), &head.wq));
                c.push(NamedTensor::from_vector(format!("{hp}.bq"), &head.bq));
                c.push(NamedTensor::from_matrix(format!("{hp}.wk"), &head.wk));
                c.push(NamedTensor::from_vector(format!("{hp}.bk"), &head.bk));
                c.push(NamedTensor::from_matrix(format!("{hp}.wv"), &head.wv));
                c.push(NamedTensor::from_vector(format!("{hp}.bv"), &head.bv));
            }
            c.push(NamedTensor::from_matrix(format!("{p}.attn_out.w"), &layer.wo));
            c.push(NamedTensor::from_vector(format!("{p}.attn_out.b"), &layer.bo));
            c.push(NamedTensor::from_vector(format!("{p}.ln2.gain"), &layer.ln2_gain));
            c.push(NamedTensor::from_vector(format!("{p}.ln2.bias"), &layer.ln2_bias));
            c.push(NamedTensor::from_matrix(format!("{p}.ffn.w1"), &layer.w1));
            c.push(NamedTensor::from_vector(format!("{p}.ffn.b1"), &layer.b1));
            c.push(NamedTensor::from_matrix(format!("{p}.ffn.w2"), &layer.w2));
            c.push(NamedTensor::from_vector(format!("{p}.ffn.b2"), &layer.b2));
        }
        c.push(NamedTensor::from_matrix("proj", &self.proj));
        c
    }

    /// Rebuilds weights from a container whose `meta.encoder` holds the spec.
    pub fn from_container(c: &Container) -> Result<Self> {
        let spec: EncoderSpec = serde_json::from_value(
            c.meta
                .get("encoder")
                .cloned()
                .ok_or_else(|| AatError::MissingTensor("meta.encoder".into()))?,
        )?;
        spec.validate()?;
        let (d, hd, f) = (spec.token_dim, spec.head_dim, spec.ffn_dim);
        let mut layers = Vec::with_capacity(spec.num_layers);
        for l in 0..spec.num_layers {
            let p = format!("layers.{l}");
            let mut heads = Vec::with_capacity(spec.heads_per_layer);
            for h in 0..spec.heads_per_layer {
                let hp = format!("{p}.heads.{h}");
                heads.push(HeadWeights {
                    wq: c.matrix(&format!("{hp}.wq"), d, hd)?,
                    bq: c.vector(&format!("{hp}.bq"), hd)?,
                    wk: c.matrix(&format!("{hp}.wk"), d, hd)?,
                    bk: c.vector(&format!("{hp}.bk"), hd)?,
                    wv: c.matrix(&format!("{hp}.wv"), d, hd)?,
                    bv: c.vector(&format!("{hp}.bv"), hd)?,
                });
            }
            layers.push(LayerWeights {
                ln1_gain: c.vector(&format!("{p}.ln1.gain"), d)?,
                ln1_bias: c.vector(&format!("{p}.ln1.bias"), d)?,
                heads,
                wo: c.matrix(&format!("{p}.attn_out.w"), d, d)?,
                bo: c.vector(&format!("{p}.attn_out.b"), d)?,
                ln2_gain: c.vector(&format!("{p}.ln2.gain"), d)?,
                ln2_bias: c.vector(&format!("{p}.ln2.bias"), d)?,
                w1: c.matrix(&format!("{p}.ffn.w1"), d, f)?,
                b1: c.vector(&format!("{p}.ffn.b1"), f)?,
                w2: c.matrix(&format!("{p}.ffn.w2"), f, d)?,
                b2: c.vector(&format!("{p}.ffn.b2"), d)?,
            });
        }
        let w = Self {
            spec,
            layers,
            proj: c.matrix("proj", d, spec.embed_dim)?,
        };
        w.validate()?;
        Ok(w)
    }

    /// FNV-1a over every weight's bit pattern; used to prove weights are
    /// untouched by a procedure.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.to_container(serde_json::Value::Null).tensors {
            for v in t.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Random weights of the given shape, for tests and examples.
    pub fn random(spec: EncoderSpec, seed: u64, scale: f32) -> Result<Self> {
        use rand_distr::{Distribution, Normal};
        spec.validate()?;
        let mut rng = crate::rng::substream(seed, "random-encoder");
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let mut mat = |r: usize, c: usize, s: f32| {
            let std = s / (r as f32).sqrt();
            Tensor2::from_fn(r, c, |_, _| normal.sample(&mut rng) * std)
        };
        let (d, hd, f) = (spec.token_dim, spec.head_dim, spec.ffn_dim);
        let mut layers = Vec::new();
        for _ in 0..spec.num_layers {
            let heads = (0..spec.heads_per_layer)
                .map(|_| HeadWeights {
                    wq: mat(d, hd, scale),
                    bq: vec![0.0; hd],
                    wk: mat(d, hd, scale),
                    bk: vec![0.0; hd],
                    wv: mat(d, hd, scale),
                    bv: vec![0.0; hd],
                })
                .collect();
            layers.push(LayerWeights {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                heads,
                wo: mat(d, d, scale),
                bo: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                w1: mat(d, f, scale),
                b1: vec![0.0; f],
                w2: mat(f, d, scale),
                b2: vec![0.0; d],
            });
        }
        let proj = mat(d, spec.embed_dim, 1.0);
        Ok(Self { spec, layers, proj })
    }
}
