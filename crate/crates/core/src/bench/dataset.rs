use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{load_container, save_container, Container, NamedTensor};
use crate::error::{AatError, Result};
use crate::numerics::Tensor2;

/// Index-paired image token grids and unit-norm text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub split: String,
    pub seed: u64,
    /// Each grid is `num_tokens × token_dim` with the class token first.
    pub images: Vec<Tensor2>,
    /// `n_pairs × embed_dim`.
    pub texts: Tensor2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_pairs: usize,
    pub n_tokens: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub split: String,
    pub seed: u64,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn meta(&self) -> DatasetMeta {
        let (n_tokens, token_dim) = self.images.first().map_or((0, 0), Tensor2::shape);
        DatasetMeta {
            n_pairs: self.len(),
            n_tokens,
            token_dim,
            embed_dim: self.texts.cols(),
            split: self.split.clone(),
            seed: self.seed,
        }
    }

    /// Checks pairing, uniform grid shapes and unit-norm texts.
    pub fn validate(&self) -> Result<()> {
        if self.texts.rows() != self.images.len() {
            return Err(AatError::InvalidConfig(format!(
                "{} images but {} texts",
                self.images.len(),
                self.texts.rows()
            )));
        }
        let shape = self.images.first().map(Tensor2::shape);
        for (i, img) in self.images.iter().enumerate() {
            if Some(img.shape()) != shape {
                return Err(AatError::InvalidConfig(format!("image {i} has shape {:?}", img.shape())));
            }
        }
        for i in 0..self.texts.rows() {
            let n = crate::numerics::dot(self.texts.row(i), self.texts.row(i)).sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(AatError::InvalidConfig(format!("text {i} has norm {n}")));
            }
        }
        Ok(())
    }

    /// The first `n` pairs.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(AatError::InvalidParameter(format!(
                "requested {n} pairs from a split of {}",
                self.len()
            )));
        }
        let cols = self.texts.cols();
        Ok(Self {
            split: self.split.clone(),
            seed: self.seed,
            images: self.images[..n].to_vec(),
            texts: Tensor2::new(n, cols, self.texts.data()[..n * cols].to_vec())?,
        })
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let meta = self.meta();
        let mut c = Container::new(serde_json::to_value(&meta)?);
        let flat: Vec<f32> = self.images.iter().flat_map(|t| t.data().iter().copied()).collect();
        c.push(NamedTensor::new(
            "image_tokens",
            vec![meta.n_pairs, meta.n_tokens, meta.token_dim],
            flat,
        ));
        c.push(NamedTensor::from_matrix("text_embs", &self.texts));
        save_container(manifest_path, &c)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let c = load_container(manifest_path)?;
        let meta: DatasetMeta = serde_json::from_value(c.meta.clone()).map_err(|e| AatError::CorruptManifest {
            path: manifest_path.to_path_buf(),
            reason: format!("dataset meta: {e}"),
        })?;
        let tokens = c.get("image_tokens")?;
        if tokens.shape != [meta.n_pairs, meta.n_tokens, meta.token_dim] {
            return Err(AatError::ShapeMismatch {
                name: "image_tokens".into(),
                reason: format!("{:?} disagrees with dataset meta", tokens.shape),
            });
        }
        let per = meta.n_tokens * meta.token_dim;
        let images = tokens
            .data
            .chunks_exact(per.max(1))
            .take(meta.n_pairs)
            .map(|chunk| Tensor2::new(meta.n_tokens, meta.token_dim, chunk.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let texts = c.matrix("text_embs", meta.n_pairs, meta.embed_dim)?;
        let ds = Self {
            split: meta.split,
            seed: meta.seed,
            images,
            texts,
        };
        ds.validate()?;
        Ok(ds)
    }
}
