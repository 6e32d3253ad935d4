use rayon::prelude::*;

use super::attention::{attention_weights, manipulate_in_place, HeadProjections};
use super::{AblationConfig, EncoderWeights, LayerWeights};
use crate::error::{AatError, Result};
use crate::numerics::{gelu_f32, layer_norm_in_place, normalize_in_place, Tensor2, LN_EPS};

/// Forward-pass helper bound to one set of weights.
#[derive(Debug, Clone)]
pub struct Encoder<'w> {
    weights: &'w EncoderWeights,
    /// Per layer, every head's query, key and value projections side by side.
    qkv: Vec<(Tensor2, Vec<f32>)>,
}

fn pack_qkv(layer: &LayerWeights) -> (Tensor2, Vec<f32>) {
    let parts: Vec<(&Tensor2, &[f32])> = [0, 1, 2]
        .iter()
        .flat_map(|&which| {
            layer.heads.iter().map(move |h| match which {
                0 => (&h.wq, h.bq.as_slice()),
                1 => (&h.wk, h.bk.as_slice()),
                _ => (&h.wv, h.bv.as_slice()),
            })
        })
        .collect();
    let w = Tensor2::concat_cols(&parts.iter().map(|(w, _)| (*w).clone()).collect::<Vec<_>>());
    let b = parts.iter().flat_map(|(_, b)| b.iter().copied()).collect();
    (w, b)
}

fn columns(x: &Tensor2, start: usize, len: usize, rows: usize) -> Tensor2 {
    Tensor2::from_fn(rows, len, |r, c| x.get(r, start + c))
}

fn normed(x: &Tensor2, gain: &[f32], bias: &[f32]) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        layer_norm_in_place(out.row_mut(r), gain, bias, LN_EPS);
    }
    out
}

fn class_row(x: &Tensor2) -> Tensor2 {
    Tensor2::new(1, x.cols(), x.row(0).to_vec()).expect("row shape")
}

impl<'w> Encoder<'w> {
    pub fn new(weights: &'w EncoderWeights) -> Self {
        Self {
            weights,
            qkv: weights.layers.iter().map(pack_qkv).collect(),
        }
    }

    pub fn weights(&self) -> &'w EncoderWeights {
        self.weights
    }

    fn check_tokens(&self, tokens: &Tensor2) -> Result<()> {
        let s = &self.weights.spec;
        if tokens.shape() != (s.num_tokens, s.token_dim) {
            return Err(AatError::dims(
                "encode_image",
                format!("{}x{}", s.num_tokens, s.token_dim),
                format!("{}x{}", tokens.rows(), tokens.cols()),
            ));
        }
        Ok(())
    }

    /// One pre-LN block with the given per-head suppression factors.
    pub fn layer(&self, x: &Tensor2, layer_index: usize, betas: &[f64]) -> Result<Tensor2> {
        self.block(x, layer_index, betas, false)
    }

    /// As [`Encoder::layer`], but only the class-token row of the output is
    /// computed (returned as a `1 × token_dim` tensor).
    pub fn layer_class_row(&self, x: &Tensor2, layer_index: usize, betas: &[f64]) -> Result<Tensor2> {
        self.block(x, layer_index, betas, true)
    }

    fn block(&self, x: &Tensor2, layer_index: usize, betas: &[f64], class_only: bool) -> Result<Tensor2> {
        let layer: &LayerWeights = &self.weights.layers[layer_index];
        let h = normed(x, &layer.ln1_gain, &layer.ln1_bias);
        let (w, b) = &self.qkv[layer_index];
        let qkv = h.affine(w, b);
        let (n, hd, heads) = (x.rows(), self.weights.spec.head_dim, layer.heads.len());
        let q_rows = if class_only { 1 } else { n };
        let mut outputs = Vec::with_capacity(heads);
        for (head_index, &beta) in betas.iter().enumerate().take(heads) {
            let p = HeadProjections {
                q: columns(&qkv, head_index * hd, hd, q_rows),
                k: columns(&qkv, (heads + head_index) * hd, hd, n),
                v: columns(&qkv, (2 * heads + head_index) * hd, hd, n),
            };
            let mut a = attention_weights(&p).map_err(|_| AatError::NonFiniteActivation {
                layer: layer_index,
                head: Some(head_index),
            })?;
            manipulate_in_place(&mut a, beta);
            let y = a.matmul(&p.v);
            if !y.is_finite() {
                return Err(AatError::NonFiniteActivation {
                    layer: layer_index,
                    head: Some(head_index),
                });
            }
            outputs.push(y);
        }
        let merged = Tensor2::concat_cols(&outputs).affine(&layer.wo, &layer.bo);
        let x = if class_only { class_row(x) } else { x.clone() }.add(&merged);

        let h2 = normed(&x, &layer.ln2_gain, &layer.ln2_bias);
        let f = h2
            .affine(&layer.w1, &layer.b1)
            .map(gelu_f32)
            .affine(&layer.w2, &layer.b2);
        let x = x.add(&f);
        if !x.is_finite() {
            return Err(AatError::NonFiniteActivation {
                layer: layer_index,
                head: None,
            });
        }
        Ok(x)
    }

    /// Runs layers `from_layer..` on the residual stream `x`.
    pub fn run_layers(&self, mut x: Tensor2, config: &AblationConfig, from_layer: usize) -> Result<Tensor2> {
        let heads = self.weights.spec.heads_per_layer;
        for l in from_layer..self.weights.spec.num_layers {
            x = self.layer(&x, l, &config.betas()[l * heads..(l + 1) * heads])?;
        }
        Ok(x)
    }

    /// Embedding of a residual stream entering layer `from_layer`. The last
    /// layer computes only the class-token row.
    pub fn embed_from(&self, mut x: Tensor2, config: &AblationConfig, from_layer: usize) -> Result<Vec<f32>> {
        let heads = self.weights.spec.heads_per_layer;
        let last = self.weights.spec.num_layers;
        for l in from_layer..last {
            let betas = &config.betas()[l * heads..(l + 1) * heads];
            x = if l + 1 == last {
                self.layer_class_row(&x, l, betas)?
            } else {
                self.layer(&x, l, betas)?
            };
        }
        Ok(self.embed(&x))
    }

    /// Projects the class-token state and normalizes to unit length.
    pub fn embed(&self, hidden: &Tensor2) -> Vec<f32> {
        let mut e = class_row(hidden).matmul(&self.weights.proj).into_data();
        normalize_in_place(&mut e);
        e
    }

    pub fn encode(&self, tokens: &Tensor2, config: &AblationConfig) -> Result<Vec<f32>> {
        self.check_tokens(tokens)?;
        config.check_matches(&self.weights.spec)?;
        self.embed_from(tokens.clone(), config, 0)
    }
}

/// Unit-norm embedding of one token grid (`num_tokens × token_dim`, class
/// token first).
pub fn encode_image(tokens: &Tensor2, weights: &EncoderWeights, config: &AblationConfig) -> Result<Vec<f32>> {
    Encoder::new(weights).encode(tokens, config)
}

/// Embeddings of a batch, one row per item in input order.
pub fn encode_batch(batch: &[Tensor2], weights: &EncoderWeights, config: &AblationConfig) -> Result<Tensor2> {
    encode_batch_threaded(batch, weights, config, 1)
}

/// As [`encode_batch`], fanning items out over `threads` workers. Each item's
/// arithmetic is unchanged, so the result is bitwise identical for any
/// thread count.
pub fn encode_batch_threaded(
    batch: &[Tensor2],
    weights: &EncoderWeights,
    config: &AblationConfig,
    threads: usize,
) -> Result<Tensor2> {
    let enc = Encoder::new(weights);
    let rows: Vec<Vec<f32>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| AatError::InvalidParameter(format!("thread pool: {e}")))?;
        pool.install(|| batch.par_iter().map(|t| enc.encode(t, config)).collect::<Result<_>>())?
    } else {
        batch.iter().map(|t| enc.encode(t, config)).collect::<Result<_>>()?
    };
    if rows.is_empty() {
        return Ok(Tensor2::zeros(0, weights.spec.embed_dim));
    }
    Tensor2::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderSpec;
    use crate::numerics::{layer_norm, softmax_rows};
    use rand::Rng;

    fn tokens(spec: &EncoderSpec, seed: u64) -> Tensor2 {
        let mut rng = crate::rng::substream(seed, "tokens");
        Tensor2::from_fn(spec.num_tokens, spec.token_dim, |_, _| rng.random_range(-1.5f32..1.5))
    }

    /// Reference forward pass with no manipulation step at all. When
    /// `class_only` is set, every head output is the class-token value row
    /// broadcast to all positions.
    fn reference_forward(w: &EncoderWeights, tokens: &Tensor2, class_only: bool) -> Vec<f32> {
        let mut x = tokens.clone();
        for layer in &w.layers {
            let h = layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias, LN_EPS).unwrap();
            let mut outs = Vec::new();
            for head in &layer.heads {
                let q = h.affine(&head.wq, &head.bq);
                let k = h.affine(&head.wk, &head.bk);
                let v = h.affine(&head.wv, &head.bv);
                if class_only {
                    outs.push(Tensor2::from_fn(v.rows(), v.cols(), |_, c| v.get(0, c)));
                } else {
                    let s = q.matmul_t(&k).scale(1.0 / (q.cols() as f32).sqrt());
                    outs.push(softmax_rows(&s).unwrap().matmul(&v));
                }
            }
            x = x.add(&Tensor2::concat_cols(&outs).affine(&layer.wo, &layer.bo));
            let h2 = layer_norm(&x, &layer.ln2_gain, &layer.ln2_bias, LN_EPS).unwrap();
            let f = h2
                .affine(&layer.w1, &layer.b1)
                .map(gelu_f32)
                .affine(&layer.w2, &layer.b2);
            x = x.add(&f);
        }
        let cls = Tensor2::new(1, x.cols(), x.row(0).to_vec()).unwrap();
        let mut e = cls.matmul(&w.proj).into_data();
        normalize_in_place(&mut e);
        e
    }

    #[test]
    fn identity_config_is_bitwise_vanilla() {
        let spec = EncoderSpec::default();
        let w = EncoderWeights::random(spec, 5, 1.0).unwrap();
        let cfg = AblationConfig::identity_for(&spec);
        for seed in 0..10 {
            let t = tokens(&spec, seed);
            assert_eq!(encode_image(&t, &w, &cfg).unwrap(), reference_forward(&w, &t, false));
        }
    }

    #[test]
    fn full_ablation_matches_class_only_oracle() {
        let spec = EncoderSpec::default();
        let w = EncoderWeights::random(spec, 6, 1.0).unwrap();
        let cfg = AblationConfig::from_betas(4, 4, vec![0.0; 16]).unwrap();
        for seed in 0..5 {
            let t = tokens(&spec, seed);
            let got = encode_image(&t, &w, &cfg).unwrap();
            let want = reference_forward(&w, &t, true);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let spec = EncoderSpec::default();
        let w = EncoderWeights::random(spec, 7, 1.0).unwrap();
        let cfg = AblationConfig::from_betas(4, 4, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        for seed in 0..20 {
            let e = encode_image(&tokens(&spec, seed), &w, &cfg).unwrap();
            let n: f64 = e.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_errors() {
        let spec = EncoderSpec::default();
        let w = EncoderWeights::random(spec, 7, 1.0).unwrap();
        let cfg = AblationConfig::identity_for(&spec);
        assert!(matches!(
            encode_image(&Tensor2::zeros(8, 32), &w, &cfg),
            Err(AatError::DimensionMismatch { .. })
        ));
        assert!(encode_image(&tokens(&spec, 0), &w, &AblationConfig::all_ones(3, 4)).is_err());
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let spec = EncoderSpec::default();
        let mut w = EncoderWeights::random(spec, 7, 1.0).unwrap();
        w.layers[2].heads[1].wq.set(0, 0, f32::INFINITY);
        let cfg = AblationConfig::identity_for(&spec);
        match encode_image(&tokens(&spec, 0), &w, &cfg) {
            Err(AatError::NonFiniteActivation { layer, head }) => {
                assert_eq!(layer, 2);
                assert_eq!(head, Some(1));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batch_matches_sequential_and_permutes() {
        let spec = EncoderSpec::default();
        let w = EncoderWeights::random(spec, 8, 1.0).unwrap();
        let cfg = AblationConfig::from_heads(4, 4, &[(0, 1), (3, 3)], 0.1).unwrap();
        let items: Vec<Tensor2> = (0..8).map(|s| tokens(&spec, s)).collect();
        let batch = encode_batch(&items, &w, &cfg).unwrap();
        for (i, t) in items.iter().enumerate() {
            assert_eq!(batch.row(i), encode_image(t, &w, &cfg).unwrap().as_slice());
        }
        let threaded = encode_batch_threaded(&items, &w, &cfg, 3).unwrap();
        assert_eq!(threaded, batch);

        let single = encode_batch(&items[..1], &w, &cfg).unwrap();
        assert_eq!(single.row(0), batch.row(0));

        let mut rev = items.clone();
        rev.reverse();
        let rb = encode_batch(&rev, &w, &cfg).unwrap();
        for i in 0..8 {
            assert_eq!(rb.row(i), batch.row(7 - i));
        }
    }
}
