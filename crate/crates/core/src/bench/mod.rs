//! Toy encoders with planted detrimental heads and matching synthetic
//! image-text datasets.
//!
//! The residual stream is laid out in blocks: a concept block carrying the
//! latent the text describes, a nuisance block shared by unrelated images, a
//! readout block that heads write into and the projection reads from, a
//! block of per-image noise, and a final marker coordinate that is non-zero
//! only on the class token. Clean heads copy the concept block of image
//! tokens into the readout block. A planted head additionally reads the
//! nuisance and noise blocks through an amplified random matrix.

mod dataset;

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use dataset::{DatasetMeta, PairDataset};

use crate::container::{load_container, save_container};
use crate::encoder::{AblationConfig, EncoderSpec, EncoderWeights, HeadWeights, LayerWeights, ABLATED_BETA};
use crate::error::{AatError, Result};
use crate::eval::t2i_mean_r;
use crate::numerics::{normalize_in_place, Tensor2};
use crate::rng::{indexed_substream, substream, Rng as StreamRng};

/// Minimum text→image mean-R gain (points) from hard-ablating the planted
/// set that a generated benchmark must show on its test split.
pub const GATE_MIN_GAIN: f64 = 2.0;

/// Magnitudes used by the generator. Defaults give the standard 4×4
/// benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorKnobs {
    pub nuisance_dim: usize,
    pub nuisance_prototypes: usize,
    pub nuisance_scale: f64,
    /// Image tokens carrying the concept; the rest are distractors.
    pub signal_tokens: usize,
    pub token_noise: f64,
    pub class_marker: f64,
    /// Query/key gain on the marker coordinate; sets how much the class
    /// token attends to itself.
    pub marker_qk_gain: f64,
    pub qk_noise: f64,
    pub value_gain: f64,
    pub out_gain: f64,
    pub weight_noise: f64,
    pub ffn_scale: f64,
    pub proj_noise: f64,
}

impl Default for GeneratorKnobs {
    fn default() -> Self {
        Self {
            nuisance_dim: 8,
            nuisance_prototypes: 32,
            nuisance_scale: 1.5,
            signal_tokens: 4,
            token_noise: 0.6,
            class_marker: 10.0,
            marker_qk_gain: 0.3,
            qk_noise: 0.02,
            value_gain: 1.0,
            out_gain: 0.15,
            weight_noise: 0.01,
            ffn_scale: 0.05,
            proj_noise: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub encoder: EncoderSpec,
    pub planted_heads: Vec<(usize, usize)>,
    /// Spectral-norm gain of a planted head's value projection relative to
    /// the clean median; `1.0` plants nothing.
    pub kappa: f64,
    pub concept_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default)]
    pub knobs: GeneratorKnobs,
}

impl BenchSpec {
    /// The default benchmark: 4×4 heads, three planted heads drawn uniformly
    /// from `seed`, κ = 5, 1000 pairs per split.
    pub fn with_seed(seed: u64) -> Self {
        let encoder = EncoderSpec::default();
        let planted_heads = sample_planted(&encoder, 3, seed);
        Self {
            encoder,
            planted_heads,
            kappa: 5.0,
            concept_dim: 8,
            n_train: 1000,
            n_val: 1000,
            n_test: 1000,
            seed,
            knobs: GeneratorKnobs::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let e = &self.encoder;
        let mut seen = std::collections::HashSet::new();
        for &(l, h) in &self.planted_heads {
            if l >= e.num_layers || h >= e.heads_per_layer {
                return Err(AatError::InvalidParameter(format!(
                    "planted head ({l}, {h}) outside {}x{}",
                    e.num_layers, e.heads_per_layer
                )));
            }
            if !seen.insert((l, h)) {
                return Err(AatError::InvalidParameter(format!("planted head ({l}, {h}) listed twice")));
            }
        }
        if !(self.kappa >= 1.0) {
            return Err(AatError::InvalidParameter(format!("kappa {} must be >= 1", self.kappa)));
        }
        let k = &self.knobs;
        if self.concept_dim == 0 || 2 * self.concept_dim + k.nuisance_dim + 1 > e.token_dim {
            return Err(AatError::InvalidParameter(format!(
                "concept and readout blocks of {} + nuisance_dim {} + marker do not fit token_dim {}",
                self.concept_dim, k.nuisance_dim, e.token_dim
            )));
        }
        if k.signal_tokens == 0 || k.signal_tokens >= e.num_tokens {
            return Err(AatError::InvalidParameter(format!(
                "signal_tokens {} must lie in 1..{}",
                k.signal_tokens,
                e.num_tokens - 1
            )));
        }
        if k.nuisance_prototypes == 0 {
            return Err(AatError::InvalidParameter("need at least one nuisance prototype".into()));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let concept = 0..self.concept_dim;
        let nuisance = self.concept_dim..self.concept_dim + self.knobs.nuisance_dim;
        let readout = nuisance.end..nuisance.end + self.concept_dim;
        let marker = self.encoder.token_dim - 1;
        Layout {
            concept,
            nuisance,
            readout,
            marker,
        }
    }

    pub fn planted_mask(&self) -> Vec<bool> {
        let e = &self.encoder;
        let mut mask = vec![false; e.num_heads()];
        for &(l, h) in &self.planted_heads {
            mask[l * e.heads_per_layer + h] = true;
        }
        mask
    }

    /// Hard ablation of exactly the planted heads at the default beta.
    pub fn planted_config(&self) -> AblationConfig {
        AblationConfig::from_mask(
            self.encoder.num_layers,
            self.encoder.heads_per_layer,
            &self.planted_mask(),
            ABLATED_BETA,
        )
        .expect("planted mask matches encoder")
    }
}

/// `count` distinct heads drawn uniformly from `seed`.
pub fn sample_planted(spec: &EncoderSpec, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = substream(seed, "planted");
    let mut idx = sample(&mut rng, spec.num_heads(), count.min(spec.num_heads())).into_vec();
    idx.sort_unstable();
    idx.into_iter()
        .map(|i| (i / spec.heads_per_layer, i % spec.heads_per_layer))
        .collect()
}

struct Layout {
    concept: std::ops::Range<usize>,
    nuisance: std::ops::Range<usize>,
    readout: std::ops::Range<usize>,
    marker: usize,
}

impl Layout {
    /// Dimensions a planted head reads.
    fn is_concept_independent(&self, dim: usize) -> bool {
        self.nuisance.contains(&dim)
    }
}

fn gaussian(rng: &mut StreamRng, rows: usize, cols: usize, std: f64) -> Tensor2 {
    let n = Normal::new(0.0, std).expect("finite std");
    Tensor2::from_fn(rows, cols, |_, _| n.sample(rng) as f32)
}

/// Nearest matrix with all singular values 1 (orthonormal columns, or rows
/// when wide), by Gram-Schmidt.
fn semi_orthogonal(t: Tensor2) -> Tensor2 {
    if t.rows() < t.cols() {
        return semi_orthogonal(t.transpose()).transpose();
    }
    let (rows, cols) = t.shape();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for c in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|r| f64::from(t.get(r, c))).collect();
        for u in &q {
            let p: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        q.push(v);
    }
    Tensor2::from_fn(rows, cols, |r, c| q[c][r] as f32)
}

/// The text map `concept → embed space` (`embed_dim × concept_dim`), shared
/// by the model's projection and the dataset's captions.
fn text_projection(spec: &BenchSpec) -> Tensor2 {
    let mut rng = substream(spec.seed, "text-projection");
    gaussian(&mut rng, spec.encoder.embed_dim, spec.concept_dim, 1.0 / (spec.concept_dim as f64).sqrt())
}

/// Planted heads in a generated model, saved next to its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedManifest {
    pub planted_heads: Vec<(usize, usize)>,
    pub kappa: f64,
    pub clean_median_value_norm: f64,
}

/// Builds encoder weights for `spec`. Deterministic in `spec`.
pub fn generate_model(spec: &BenchSpec) -> Result<(EncoderWeights, PlantedManifest)> {
    spec.validate()?;
    let e = spec.encoder;
    let k = &spec.knobs;
    let lay = spec.layout();
    let (d, hd, cd) = (e.token_dim, e.head_dim, spec.concept_dim);
    let mut qk_rng = substream(spec.seed, "model/qk");
    let mut v_rng = substream(spec.seed, "model/values");
    let mut noise_rng = substream(spec.seed, "model/planted-noise");
    let mut ffn_rng = substream(spec.seed, "model/ffn");
    let mut proj_rng = substream(spec.seed, "model/proj");

    let mut layers = Vec::with_capacity(e.num_layers);
    for _ in 0..e.num_layers {
        let mut heads = Vec::with_capacity(e.heads_per_layer);
        let mut wo = gaussian(&mut v_rng, d, d, k.weight_noise);
        for h in 0..e.heads_per_layer {
            let mut wq = gaussian(&mut qk_rng, d, hd, k.qk_noise);
            let mut wk = gaussian(&mut qk_rng, d, hd, k.qk_noise);
            let mut dir: Vec<f32> = gaussian(&mut qk_rng, 1, hd, 1.0).into_data();
            normalize_in_place(&mut dir);
            for (c, &u) in dir.iter().enumerate() {
                wq.set(lay.marker, c, (f64::from(u) * k.marker_qk_gain) as f32);
                wk.set(lay.marker, c, (f64::from(u) * k.marker_qk_gain) as f32);
            }

            // Concept read-in and readout write share one random map, so
            // every clean head adds the concept coherently.
            let read = semi_orthogonal(gaussian(&mut v_rng, cd, hd, 1.0));
            let mut wv = gaussian(&mut v_rng, d, hd, k.weight_noise);
            for (i, dim) in lay.concept.clone().enumerate() {
                for c in 0..hd {
                    let v = wv.get(dim, c) + (f64::from(read.get(i, c)) * k.value_gain) as f32;
                    wv.set(dim, c, v);
                }
            }
            for c in 0..hd {
                for (i, dim) in lay.readout.clone().enumerate() {
                    let v = wo.get(h * hd + c, dim) + (f64::from(read.get(i, c)) * k.out_gain) as f32;
                    wo.set(h * hd + c, dim, v);
                }
            }
            heads.push(HeadWeights {
                wq,
                bq: vec![0.0; hd],
                wk,
                bk: vec![0.0; hd],
                wv,
                bv: vec![0.0; hd],
            });
        }
        let w1 = gaussian(&mut ffn_rng, d, e.ffn_dim, k.ffn_scale);
        let w2 = gaussian(&mut ffn_rng, e.ffn_dim, d, k.ffn_scale);
        layers.push(LayerWeights {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            heads,
            wo,
            bo: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w1,
            b1: vec![0.0; e.ffn_dim],
            w2,
            b2: vec![0.0; d],
        });
    }

    let mut norms: Vec<f64> = layers
        .iter()
        .flat_map(|l| l.heads.iter().map(|h| h.wv.spectral_norm()))
        .collect();
    norms.sort_by(f64::total_cmp);
    let median = if norms.len() % 2 == 1 {
        norms[norms.len() / 2]
    } else {
        0.5 * (norms[norms.len() / 2 - 1] + norms[norms.len() / 2])
    };

    // Every head draws a noise matrix so that kappa = 1 (zero gain) leaves
    // the weights bitwise equal to a model with nothing planted.
    let planted = spec.planted_mask();
    for (li, layer) in layers.iter_mut().enumerate() {
        for (hi, head) in layer.heads.iter_mut().enumerate() {
            let support: Vec<usize> = (0..d).filter(|&dim| lay.is_concept_independent(dim)).collect();
            let block = semi_orthogonal(gaussian(&mut noise_rng, support.len(), hd, 1.0));
            let mut noise = Tensor2::zeros(d, hd);
            for (r, &dim) in support.iter().enumerate() {
                noise.row_mut(dim).copy_from_slice(block.row(r));
            }
            if !planted[li * e.heads_per_layer + hi] || spec.kappa == 1.0 {
                continue;
            }
            let s = (spec.kappa - 1.0) * median / noise.spectral_norm();
            for (w, n) in head.wv.data_mut().iter_mut().zip(noise.data()) {
                *w += (f64::from(*n) * s) as f32;
            }
        }
    }

    let p = text_projection(spec);
    let mut proj = gaussian(&mut proj_rng, d, e.embed_dim, k.proj_noise);
    for (i, dim) in lay.readout.clone().enumerate() {
        for j in 0..e.embed_dim {
            proj.set(dim, j, proj.get(dim, j) + p.get(j, i));
        }
    }

    let weights = EncoderWeights { spec: e, layers, proj };
    weights.validate()?;
    Ok((
        weights,
        PlantedManifest {
            planted_heads: spec.planted_heads.clone(),
            kappa: spec.kappa,
            clean_median_value_norm: median,
        },
    ))
}

/// The three splits of a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: PairDataset,
    pub val: PairDataset,
    pub test: PairDataset,
}

fn nuisance_pool(spec: &BenchSpec) -> Vec<Vec<f64>> {
    let mut rng = substream(spec.seed, "nuisance-prototypes");
    let n = Normal::new(0.0, spec.knobs.nuisance_scale).expect("finite scale");
    (0..spec.knobs.nuisance_prototypes)
        .map(|_| (0..spec.knobs.nuisance_dim).map(|_| n.sample(&mut rng)).collect())
        .collect()
}

fn generate_pair(spec: &BenchSpec, pool: &[Vec<f64>], p: &Tensor2, global_index: u64) -> (Tensor2, Vec<f32>) {
    let e = &spec.encoder;
    let k = &spec.knobs;
    let lay = spec.layout();
    let mut rng = indexed_substream(spec.seed, "pair", global_index);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let z: Vec<f64> = (0..spec.concept_dim).map(|_| unit.sample(&mut rng)).collect();
    let proto = &pool[rng.random_range(0..pool.len())];

    let mut tokens = Tensor2::zeros(e.num_tokens, e.token_dim);
    tokens.set(0, lay.marker, k.class_marker as f32);
    for t in 1..e.num_tokens {
        let signal = t <= k.signal_tokens;
        for dim in (0..e.token_dim - 1).filter(|d| !lay.readout.contains(d)) {
            let mut v = k.token_noise * unit.sample(&mut rng);
            if signal && lay.concept.contains(&dim) {
                v += z[dim - lay.concept.start];
            }
            if !signal && lay.nuisance.contains(&dim) {
                v += proto[dim - lay.nuisance.start];
            }
            tokens.set(t, dim, v as f32);
        }
    }

    let mut text: Vec<f32> = (0..e.embed_dim)
        .map(|j| (0..spec.concept_dim).map(|i| f64::from(p.get(j, i)) * z[i]).sum::<f64>() as f32)
        .collect();
    normalize_in_place(&mut text);
    (tokens, text)
}

fn generate_split(spec: &BenchSpec, name: &str, start: usize, len: usize) -> Result<PairDataset> {
    let pool = nuisance_pool(spec);
    let p = text_projection(spec);
    let mut images = Vec::with_capacity(len);
    let mut texts = Vec::with_capacity(len);
    for i in start..start + len {
        let (img, txt) = generate_pair(spec, &pool, &p, i as u64);
        images.push(img);
        texts.push(txt);
    }
    let texts = if texts.is_empty() {
        Tensor2::zeros(0, spec.encoder.embed_dim)
    } else {
        Tensor2::from_rows(&texts)?
    };
    Ok(PairDataset {
        split: name.to_string(),
        seed: spec.seed,
        images,
        texts,
    })
}

/// Train, validation and test splits. Pair `i` is a pure function of
/// `(seed, i)`; the splits occupy consecutive, disjoint index ranges.
pub fn generate_datasets(spec: &BenchSpec, weights: &EncoderWeights) -> Result<Splits> {
    spec.validate()?;
    if weights.spec != spec.encoder {
        return Err(AatError::InvalidParameter("model was not generated from this bench spec".into()));
    }
    Ok(Splits {
        train: generate_split(spec, "train", 0, spec.n_train)?,
        val: generate_split(spec, "val", spec.n_train, spec.n_val)?,
        test: generate_split(spec, "test", spec.n_train + spec.n_val, spec.n_test)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub vanilla_mean_r: f64,
    pub planted_mean_r: f64,
    pub gain: f64,
    pub passed: bool,
}

/// Text→image mean-R on `test` with and without the planted heads
/// hard-ablated.
pub fn gate_report(spec: &BenchSpec, weights: &EncoderWeights, test: &PairDataset) -> Result<GateReport> {
    let vanilla = t2i_mean_r(weights, test, &AblationConfig::identity_for(&spec.encoder), 1)?;
    let planted = t2i_mean_r(weights, test, &spec.planted_config(), 1)?;
    Ok(GateReport {
        vanilla_mean_r: vanilla,
        planted_mean_r: planted,
        gain: planted - vanilla,
        passed: planted - vanilla >= GATE_MIN_GAIN,
    })
}

#[derive(Debug, Clone)]
pub struct Bench {
    pub spec: BenchSpec,
    pub weights: EncoderWeights,
    pub manifest: PlantedManifest,
    pub splits: Splits,
    pub gate: GateReport,
}

/// Model, data and gate in one go. Seeds whose planted set does not clear
/// [`GATE_MIN_GAIN`] are rejected.
pub fn generate_bench(spec: &BenchSpec) -> Result<Bench> {
    let (weights, manifest) = generate_model(spec)?;
    let splits = generate_datasets(spec, &weights)?;
    let gate = gate_report(spec, &weights, &splits.test)?;
    if !gate.passed {
        return Err(AatError::BenchRejected {
            seed: spec.seed,
            gain: gate.gain,
            required: GATE_MIN_GAIN,
        });
    }
    Ok(Bench {
        spec: spec.clone(),
        weights,
        manifest,
        splits,
        gate,
    })
}

/// Saves weights with the bench spec and planted manifest in the container
/// metadata.
pub fn save_model(path: &Path, weights: &EncoderWeights, spec: Option<&BenchSpec>, manifest: Option<&PlantedManifest>) -> Result<()> {
    let meta = serde_json::json!({
        "bench": spec,
        "planted": manifest,
    });
    save_container(path, &weights.to_container(meta))
}

#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub weights: EncoderWeights,
    pub bench: Option<BenchSpec>,
    pub planted: Option<PlantedManifest>,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let c = load_container(path)?;
    let weights = EncoderWeights::from_container(&c)?;
    let field = |name: &str| c.meta.get(name).cloned().unwrap_or(serde_json::Value::Null);
    let bench: Option<BenchSpec> = serde_json::from_value(field("bench"))?;
    let planted: Option<PlantedManifest> = serde_json::from_value(field("planted"))?;
    Ok(LoadedModel {
        weights,
        bench,
        planted,
    })
}
