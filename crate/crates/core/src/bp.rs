//! Gradient-trained head gates.
//!
//! Every head gets one scalar `alpha`; its suppression factor is
//! `sigmoid(tau * alpha)`. The encoder weights stay frozen and only the gates
//! are trained, against a symmetric contrastive loss on index-paired
//! image/text embeddings.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::PairDataset;
use crate::encoder::{encode_batch_threaded, gated_embedding, AblationConfig, EncoderSpec, EncoderWeights, GateNodes, ABLATED_BETA};
use crate::error::{AatError, Result};
use crate::numerics::{clip_loss_and_grad, GradTape, Mat, Tensor2};
use crate::rng::indexed_substream;

pub const DEFAULT_TAU: f64 = 5.0;
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Betas outside this band count as polarized.
pub const POLARIZED_BAND: (f64, f64) = (0.2, 0.8);

pub fn beta_from_alpha(alpha: f64, tau: f64) -> f64 {
    1.0 / (1.0 + (-tau * alpha).exp())
}

/// One gate per head, stored as `alphas[layer][head]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    pub tau: f64,
    pub alphas: Vec<Vec<f64>>,
}

impl GatingParams {
    pub fn init(spec: &EncoderSpec) -> Self {
        Self::uniform(spec, DEFAULT_ALPHA, DEFAULT_TAU)
    }

    pub fn uniform(spec: &EncoderSpec, alpha: f64, tau: f64) -> Self {
        Self {
            tau,
            alphas: vec![vec![alpha; spec.heads_per_layer]; spec.num_layers],
        }
    }

    pub fn from_flat(layers: usize, heads: usize, alphas: &[f64], tau: f64) -> Result<Self> {
        if alphas.len() != layers * heads {
            return Err(AatError::dims("gating params", layers * heads, alphas.len()));
        }
        let g = Self {
            tau,
            alphas: alphas.chunks(heads.max(1)).map(<[f64]>::to_vec).collect(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(AatError::InvalidParameter(format!("tau must be positive, got {}", self.tau)));
        }
        let heads = self.alphas.first().map_or(0, Vec::len);
        if self.alphas.is_empty() || heads == 0 || self.alphas.iter().any(|r| r.len() != heads) {
            return Err(AatError::InvalidConfig("alphas must be a non-empty rectangular array".into()));
        }
        if let Some(a) = self.flat().into_iter().find(|a| !a.is_finite()) {
            return Err(AatError::NonFinite(format!("gate alpha {a}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.alphas.len()
    }

    pub fn heads(&self) -> usize {
        self.alphas.first().map_or(0, Vec::len)
    }

    pub fn check_matches(&self, spec: &EncoderSpec) -> Result<()> {
        if self.layers() != spec.num_layers || self.heads() != spec.heads_per_layer {
            return Err(AatError::dims(
                "gating params",
                format!("{}x{}", spec.num_layers, spec.heads_per_layer),
                format!("{}x{}", self.layers(), self.heads()),
            ));
        }
        Ok(())
    }

    /// Alphas in row-major head order.
    pub fn flat(&self) -> Vec<f64> {
        self.alphas.iter().flatten().copied().collect()
    }

    pub fn betas(&self) -> Vec<f64> {
        self.flat().into_iter().map(|a| beta_from_alpha(a, self.tau)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| AatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| AatError::io(path, e))?;
        let g: Self = serde_json::from_str(&s)?;
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BpParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub logit_scale: f64,
    pub tau: f64,
    pub init_alpha: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub threads: usize,
}

impl Default for BpParams {
    fn default() -> Self {
        Self {
            learning_rate: 2e-2,
            batch_size: 256,
            epochs: 32,
            logit_scale: 2.659f64.exp(),
            tau: DEFAULT_TAU,
            init_alpha: DEFAULT_ALPHA,
            optimizer: Optimizer::Adam,
            seed: 0,
            threads: 1,
        }
    }
}

impl BpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AatError::InvalidParameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(AatError::InvalidParameter(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(AatError::InvalidParameter(format!("logit_scale {}", self.logit_scale)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) || !self.init_alpha.is_finite() {
            return Err(AatError::InvalidParameter(format!("tau {} / init_alpha {}", self.tau, self.init_alpha)));
        }
        Ok(())
    }
}

/// Symmetric contrastive loss of index-paired unit-norm embeddings.
pub fn contrastive_loss(image_embs: &Tensor2, text_embs: &Tensor2, logit_scale: f64) -> Result<f64> {
    Ok(clip_loss_and_grad(&Mat::from_tensor(image_embs), &Mat::from_tensor(text_embs), logit_scale)?.0)
}

fn text_rows(texts: &Tensor2, idx: &[usize]) -> Mat {
    let mut m = Mat::zeros(idx.len(), texts.cols());
    for (r, &i) in idx.iter().enumerate() {
        for (c, &v) in texts.row(i).iter().enumerate() {
            m.data[r * texts.cols() + c] = f64::from(v);
        }
    }
    m
}

fn map_items<T: Send>(threads: usize, idx: &[usize], f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| AatError::InvalidParameter(format!("thread pool: {e}")))?;
        pool.install(|| idx.par_iter().map(|&i| f(i)).collect())
    } else {
        idx.iter().map(|&i| f(i)).collect()
    }
}

fn taped_embedding(weights: &EncoderWeights, tokens: &Tensor2, alphas: &[f64], tau: f64) -> Vec<f64> {
    let mut tape = GradTape::new();
    let gates = GateNodes::new(&mut tape, alphas, tau);
    let e = gated_embedding(&mut tape, weights, tokens, &gates.betas);
    tape.value(e).data.clone()
}

/// Contrastive loss of the pairs `idx` under `gating`, computed on the f64
/// gradient path.
pub fn gating_loss(
    weights: &EncoderWeights,
    data: &PairDataset,
    idx: &[usize],
    gating: &GatingParams,
    logit_scale: f64,
) -> Result<f64> {
    gating.check_matches(&weights.spec)?;
    let alphas = gating.flat();
    let embed = weights.spec.embed_dim;
    let mut img = Mat::zeros(idx.len(), embed);
    for (r, &i) in idx.iter().enumerate() {
        let e = taped_embedding(weights, &data.images[i], &alphas, gating.tau);
        img.data[r * embed..(r + 1) * embed].copy_from_slice(&e);
    }
    Ok(clip_loss_and_grad(&img, &text_rows(&data.texts, idx), logit_scale)?.0)
}

/// Loss of the pairs `idx` and its gradient with respect to every alpha
/// (row-major head order).
pub fn gating_loss_and_grad(
    weights: &EncoderWeights,
    data: &PairDataset,
    idx: &[usize],
    gating: &GatingParams,
    logit_scale: f64,
    threads: usize,
) -> Result<(f64, Vec<f64>)> {
    gating.check_matches(&weights.spec)?;
    let alphas = gating.flat();
    let tau = gating.tau;
    let embed = weights.spec.embed_dim;

    let embs = map_items(threads, idx, |i| Ok(taped_embedding(weights, &data.images[i], &alphas, tau)))?;
    let mut img = Mat::zeros(idx.len(), embed);
    for (r, e) in embs.iter().enumerate() {
        img.data[r * embed..(r + 1) * embed].copy_from_slice(e);
    }
    let (loss, d_img) = clip_loss_and_grad(&img, &text_rows(&data.texts, idx), logit_scale)?;

    // Second pass: rebuild each image's tape and pull its slice of dL/dimg
    // back to the gates.
    let positions: Vec<usize> = (0..idx.len()).collect();
    let per_item = map_items(threads, &positions, |r| {
        let mut tape = GradTape::new();
        let gates = GateNodes::new(&mut tape, &alphas, tau);
        let e = gated_embedding(&mut tape, weights, &data.images[idx[r]], &gates.betas);
        tape.finalize();
        let mut seed = Mat::zeros(1, embed);
        seed.data.copy_from_slice(d_img.row(r));
        tape.backward_seeded(e, &seed)
    })?;
    let mut grad = vec![0.0; alphas.len()];
    for g in &per_item {
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok((loss, grad))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mean_beta: f64,
    pub frac_polarized: f64,
}

impl EpochRecord {
    fn new(epoch: usize, loss: f64, gating: &GatingParams) -> Self {
        let betas = gating.betas();
        Self {
            epoch,
            loss,
            mean_beta: betas.iter().sum::<f64>() / betas.len() as f64,
            frac_polarized: polarized_fraction(&betas),
        }
    }
}

fn polarized_fraction(betas: &[f64]) -> f64 {
    let n = betas
        .iter()
        .filter(|&&b| b < POLARIZED_BAND.0 || b > POLARIZED_BAND.1)
        .count();
    n as f64 / betas.len().max(1) as f64
}

/// Fraction of polarized betas in each layer.
pub fn polarization_by_layer(gating: &GatingParams) -> Vec<f64> {
    gating
        .alphas
        .iter()
        .map(|row| {
            let betas: Vec<f64> = row.iter().map(|&a| beta_from_alpha(a, gating.tau)).collect();
            polarized_fraction(&betas)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BpOutcome {
    pub gating: GatingParams,
    /// Entry 0 is the loss at initialization; entry `e` the mean batch loss
    /// of epoch `e`.
    pub history: Vec<EpochRecord>,
}

/// Splits `0..n` into batches of `size`, folding a trailing batch of one
/// into its predecessor.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    out
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Trains the gates on `data` with the encoder frozen.
pub fn train_gating(weights: &EncoderWeights, data: &PairDataset, params: &BpParams) -> Result<BpOutcome> {
    params.validate()?;
    if data.len() < 2 {
        return Err(AatError::InvalidParameter(format!(
            "gate training needs at least 2 pairs, got {}",
            data.len()
        )));
    }
    let spec = weights.spec;
    let (layers, heads) = (spec.num_layers, spec.heads_per_layer);
    let mut gating = GatingParams::uniform(&spec, params.init_alpha, params.tau);
    let batch_size = params.batch_size.min(data.len());
    let threads = params.threads.max(1);

    let sequential: Vec<usize> = (0..data.len()).collect();
    let init_batches = batches(&sequential, batch_size);
    let init_cfg = AblationConfig::from_betas(layers, heads, gating.betas())?;
    let embs = encode_batch_threaded(&data.images, weights, &init_cfg, threads)?;
    let mut init_loss = 0.0;
    for b in &init_batches {
        let img = Tensor2::from_rows(&b.iter().map(|&i| embs.row(i).to_vec()).collect::<Vec<_>>())?;
        init_loss += clip_loss_and_grad(&Mat::from_tensor(&img), &text_rows(&data.texts, b), params.logit_scale)?.0;
    }
    let mut history = vec![EpochRecord::new(0, init_loss / init_batches.len() as f64, &gating)];

    let n = layers * heads;
    let mut adam = AdamState {
        m: vec![0.0; n],
        v: vec![0.0; n],
        t: 0,
    };
    for epoch in 1..=params.epochs {
        let mut order = sequential.clone();
        order.shuffle(&mut indexed_substream(params.seed, "batches", epoch as u64));
        let mut total = 0.0;
        let epoch_batches = batches(&order, batch_size);
        for b in &epoch_batches {
            let last_good = gating.clone();
            let (loss, grad) = gating_loss_and_grad(weights, data, b, &gating, params.logit_scale, threads)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(AatError::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            total += loss;
            let mut alphas = gating.flat();
            match params.optimizer {
                Optimizer::Sgd => {
                    for (a, g) in alphas.iter_mut().zip(&grad) {
                        *a -= params.learning_rate * g;
                    }
                }
                Optimizer::Adam => {
                    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                    adam.t += 1;
                    let c1 = 1.0 - b1.powi(adam.t);
                    let c2 = 1.0 - b2.powi(adam.t);
                    for i in 0..n {
                        adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * grad[i];
                        adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * grad[i] * grad[i];
                        let m_hat = adam.m[i] / c1;
                        let v_hat = adam.v[i] / c2;
                        alphas[i] -= params.learning_rate * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            if alphas.iter().any(|a| !a.is_finite()) {
                return Err(AatError::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            gating = GatingParams::from_flat(layers, heads, &alphas, params.tau)?;
        }
        let rec = EpochRecord::new(epoch, total / epoch_batches.len() as f64, &gating);
        log::debug!("bp epoch {epoch}: loss {:.5} mean beta {:.3}", rec.loss, rec.mean_beta);
        history.push(rec);
    }
    Ok(BpOutcome { gating, history })
}

/// Ablation config from trained gates. Soft mode copies the betas; binarized
/// mode ablates (at the default beta) every head whose beta falls below
/// `threshold` and retains the rest, ties included.
pub fn export_config(gating: &GatingParams, binarize: bool, threshold: f64) -> Result<AblationConfig> {
    gating.validate()?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(AatError::InvalidParameter(format!("threshold {threshold} outside (0, 1)")));
    }
    let betas = gating.betas();
    let betas = if binarize {
        betas
            .into_iter()
            .map(|b| if b < threshold { ABLATED_BETA } else { 1.0 })
            .collect()
    } else {
        betas
    };
    AblationConfig::from_betas(gating.layers(), gating.heads(), betas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(n: usize, seed: u64) -> (EncoderWeights, PairDataset) {
        let spec = EncoderSpec {
            num_layers: 2,
            heads_per_layer: 2,
            head_dim: 16,
            ..EncoderSpec::default()
        };
        let w = EncoderWeights::random(spec, seed, 1.0).unwrap();
        let mut rng = crate::rng::substream(seed, "bp-toy");
        use rand::Rng;
        let images: Vec<Tensor2> = (0..n)
            .map(|_| Tensor2::from_fn(spec.num_tokens, spec.token_dim, |_, _| rng.random_range(-1.0f32..1.0)))
            .collect();
        let texts = Tensor2::from_fn(n, spec.embed_dim, |_, _| rng.random_range(-1.0f32..1.0)).l2_normalize_rows();
        (
            w,
            PairDataset {
                split: "toy".into(),
                seed,
                images,
                texts,
            },
        )
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta_from_alpha(0.0, 3.7), 0.5);
        assert!((beta_from_alpha(1.0, 5.0) - 0.993307).abs() < 1e-6);
        assert!((beta_from_alpha(-1.0, 5.0) - 0.006693).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn beta_is_bounded_and_monotone(a in -4.0f64..4.0, d in 1e-3f64..1.0, tau in 0.1f64..5.0) {
            let b = beta_from_alpha(a, tau);
            prop_assert!(b > 0.0 && b < 1.0);
            prop_assert!(beta_from_alpha(a + d, tau) > b);
        }
    }

    #[test]
    fn contrastive_loss_examples() {
        let same = Tensor2::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((contrastive_loss(&same, &same, 3.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        let eye = Tensor2::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let want = (1.0 + (-1f64).exp()).ln();
        assert!((contrastive_loss(&eye, &eye, 1.0).unwrap() - want).abs() < 1e-6);
        assert!(contrastive_loss(&Tensor2::zeros(1, 2), &Tensor2::zeros(1, 2), 1.0).is_err());
    }

    #[test]
    fn contrastive_loss_is_permutation_invariant() {
        let (_, d) = toy(6, 1);
        let img = d.texts.map(|v| v * 0.5 + 0.1).l2_normalize_rows();
        let perm = [3, 0, 5, 1, 4, 2];
        let p = |t: &Tensor2| Tensor2::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = contrastive_loss(&img, &d.texts, 14.0).unwrap();
        let b = contrastive_loss(&p(&img), &p(&d.texts), 14.0).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (w, d) = toy(6, 3);
        let idx: Vec<usize> = (0..6).collect();
        let g = GatingParams::from_flat(2, 2, &[0.3, -0.2, 0.1, 0.05], 5.0).unwrap();
        let (loss, grad) = gating_loss_and_grad(&w, &d, &idx, &g, 14.0, 1).unwrap();
        assert!((loss - gating_loss(&w, &d, &idx, &g, 14.0).unwrap()).abs() < 1e-12);
        for k in 0..4 {
            let shifted = |s: f64| {
                let mut a = g.flat();
                a[k] += s;
                let g2 = GatingParams::from_flat(2, 2, &a, 5.0).unwrap();
                gating_loss(&w, &d, &idx, &g2, 14.0).unwrap()
            };
            let fd = (shifted(1e-3) - shifted(-1e-3)) / 2e-3;
            let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "alpha {k}: {} vs {fd}", grad[k]);
        }
        let (_, threaded) = gating_loss_and_grad(&w, &d, &idx, &g, 14.0, 3).unwrap();
        assert_eq!(threaded, grad);
    }

    #[test]
    fn zero_epochs_keeps_init_and_matches_vanilla_loss() {
        let (w, d) = toy(10, 4);
        let params = BpParams {
            epochs: 0,
            ..BpParams::default()
        };
        let out = train_gating(&w, &d, &params).unwrap();
        assert_eq!(out.gating, GatingParams::init(&w.spec));
        assert_eq!(out.history.len(), 1);
        let vanilla = encode_batch_threaded(&d.images, &w, &AblationConfig::identity_for(&w.spec), 1).unwrap();
        let vl = contrastive_loss(&vanilla, &d.texts, params.logit_scale).unwrap();
        assert!((out.history[0].loss - vl).abs() < 1e-3);
    }

    #[test]
    fn training_is_deterministic_and_frozen() {
        let (w, d) = toy(9, 5);
        let before = w.checksum();
        let params = BpParams {
            epochs: 3,
            batch_size: 4,
            seed: 11,
            ..BpParams::default()
        };
        let a = train_gating(&w, &d, &params).unwrap();
        let b = train_gating(&w, &d, &BpParams { threads: 2, ..params.clone() }).unwrap();
        assert_eq!(a.gating, b.gating);
        assert_eq!(a.history, b.history);
        assert_eq!(w.checksum(), before);
        assert_eq!(a.history.len(), 4);
        assert_ne!(a.gating, GatingParams::init(&w.spec));
        let sgd = train_gating(&w, &d, &BpParams { optimizer: Optimizer::Sgd, ..params }).unwrap();
        assert_ne!(sgd.gating, a.gating);
    }

    #[test]
    fn batching_folds_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order, 9).len(), 1);
        assert_eq!(batches(&order[..6], 3).len(), 2);
    }

    #[test]
    fn export_modes() {
        let spec = EncoderSpec::default();
        let g = GatingParams::init(&spec);
        let soft = export_config(&g, false, 0.5).unwrap();
        assert!(soft.betas().iter().all(|&b| (1.0 - b).abs() < 0.007));
        assert!(export_config(&g, true, 0.5).unwrap().is_identity());

        let mut g = GatingParams::init(&spec);
        g.alphas[1][2] = 0.0;
        g.alphas[3][0] = -1.0;
        let bin = export_config(&g, true, 0.5).unwrap();
        assert_eq!(bin.beta(1, 2), 1.0);
        assert_eq!(bin.beta(3, 0), ABLATED_BETA);
        assert!(export_config(&g, true, 1.0).is_err());
    }

    #[test]
    fn soft_export_round_trips_bitwise() {
        let g = GatingParams::from_flat(2, 2, &[0.123, -0.77, 2.5, 0.0001], 5.0).unwrap();
        let cfg = export_config(&g, false, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        cfg.save(&p).unwrap();
        assert_eq!(AblationConfig::load(&p).unwrap().betas(), cfg.betas());
        let gp = dir.path().join("gates.json");
        g.save(&gp).unwrap();
        assert_eq!(GatingParams::load(&gp).unwrap(), g);
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&gp).unwrap()).unwrap();
        assert_eq!(raw["alphas"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn polarization_statistic() {
        let g = GatingParams::from_flat(2, 2, &[1.0, 0.0, -1.0, -1.0], 5.0).unwrap();
        assert_eq!(polarization_by_layer(&g), vec![0.5, 1.0]);
    }

    #[test]
    fn rejects_bad_params() {
        let (w, d) = toy(4, 1);
        for p in [
            BpParams { learning_rate: 0.0, ..BpParams::default() },
            BpParams { batch_size: 1, ..BpParams::default() },
        ] {
            assert!(train_gating(&w, &d, &p).is_err());
        }
        assert!(train_gating(&w, &d.prefix(1).unwrap(), &BpParams::default()).is_err());
    }
}
