//! Genetic search over binary head-ablation masks.
//!
//! A chromosome marks each head as ablated (`true`) or retained. Its fitness
//! is the mean, over validation texts, of the cosine to the matching image
//! minus the largest cosine to any image in that text's hard-negative set.
//! The hard-negative set mixes images the vanilla model confuses with the
//! text and a few random images that are redrawn every generation.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::PairDataset;
use crate::encoder::{encode_batch_threaded, AblationConfig, Encoder, EncoderSpec, EncoderWeights, ABLATED_BETA};
use crate::error::{AatError, Result};
use crate::eval::similarity_matrix;
use crate::numerics::{dot, Tensor2};
use crate::rng::{indexed_substream, substream, Rng as StreamRng};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chromosome {
    pub bits: Vec<bool>,
}

impl Chromosome {
    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn from_config(config: &AblationConfig) -> Self {
        Self {
            bits: config.ablated_mask(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn ablation_ratio(&self) -> f64 {
        self.popcount() as f64 / self.len().max(1) as f64
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count()
    }

    /// Binary config: ablated heads at the default beta, the rest at 1.
    pub fn to_config(&self, spec: &EncoderSpec) -> Result<AblationConfig> {
        AblationConfig::from_mask(spec.num_layers, spec.heads_per_layer, &self.bits, ABLATED_BETA)
    }

    fn first_ablated_layer(&self, heads_per_layer: usize) -> Option<usize> {
        self.bits.iter().position(|&b| b).map(|i| i / heads_per_layer)
    }

    fn check(&self, spec: &EncoderSpec) -> Result<()> {
        if self.len() != spec.num_heads() {
            return Err(AatError::dims("chromosome", spec.num_heads(), self.len()));
        }
        Ok(())
    }
}

/// Validation pairs plus per-text hard negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessContext<'a> {
    pub data: &'a PairDataset,
    /// Top-`k1` non-matching images per text under the vanilla model.
    pub mined: Vec<Vec<usize>>,
    /// `k2` random non-matching images per text, disjoint from `mined`.
    pub random: Vec<Vec<usize>>,
    pub k1: usize,
    pub k2: usize,
    pub seed: u64,
    pub generation: usize,
}

impl FitnessContext<'_> {
    /// `H^i`: mined then random negatives of text `i`.
    pub fn negatives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.mined[i].iter().chain(&self.random[i]).copied()
    }
}

/// Top-`k1` mined negatives from a `texts × images` similarity matrix; ties
/// go to the lower image index.
pub fn mine_negatives(sim: &Tensor2, k1: usize) -> Vec<Vec<usize>> {
    (0..sim.rows())
        .map(|i| {
            let row = sim.row(i);
            let mut cand: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
            cand.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            cand.truncate(k1);
            cand
        })
        .collect()
}

fn draw_random(n: usize, mined: &[Vec<usize>], k2: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    mined
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if k2 == 0 {
                return Vec::new();
            }
            let pool: Vec<usize> = (0..n).filter(|&j| j != i && !m.contains(&j)).collect();
            let mut picked: Vec<usize> = sample(rng, pool.len(), k2).into_iter().map(|p| pool[p]).collect();
            picked.sort_unstable();
            picked
        })
        .collect()
}

/// Mines `k1` negatives per text under `vanilla` and draws the generation-0
/// random negatives.
pub fn build_hard_negatives<'a>(
    weights: &EncoderWeights,
    vanilla: &AblationConfig,
    data: &'a PairDataset,
    k1: usize,
    k2: usize,
    seed: u64,
    threads: usize,
) -> Result<FitnessContext<'a>> {
    let n = data.len();
    if n == 0 {
        return Err(AatError::InvalidParameter("validation set is empty".into()));
    }
    if k1 + k2 > n - 1 {
        return Err(AatError::InvalidParameter(format!(
            "k1 + k2 = {} exceeds the {} non-matching images available",
            k1 + k2,
            n - 1
        )));
    }
    let images = encode_batch_threaded(&data.images, weights, vanilla, threads)?;
    let sim = similarity_matrix(&data.texts, &images)?;
    let mined = mine_negatives(&sim, k1);
    let ctx = FitnessContext {
        data,
        mined,
        random: vec![Vec::new(); n],
        k1,
        k2,
        seed,
        generation: 0,
    };
    Ok(refresh_random_negatives(&ctx, 0))
}

/// Redraws the random part of every `H^i` from `(seed, generation)`.
pub fn refresh_random_negatives<'a>(ctx: &FitnessContext<'a>, generation: usize) -> FitnessContext<'a> {
    let mut rng = indexed_substream(ctx.seed, "negatives", generation as u64);
    FitnessContext {
        random: draw_random(ctx.data.len(), &ctx.mined, ctx.k2, &mut rng),
        generation,
        ..ctx.clone()
    }
}

/// Margin fitness of precomputed image embeddings (rows paired with
/// `ctx.data.texts`).
pub fn fitness_from_embeddings(images: &Tensor2, ctx: &FitnessContext<'_>) -> f64 {
    let texts = &ctx.data.texts;
    let n = texts.rows();
    let mut total = 0.0;
    for i in 0..n {
        let t = texts.row(i);
        let pos = dot(t, images.row(i));
        let neg = ctx
            .negatives(i)
            .map(|j| dot(t, images.row(j)))
            .fold(f64::NEG_INFINITY, f64::max);
        total += pos - neg;
    }
    total / n as f64
}

/// Margin fitness of `chromosome`, encoding every validation image from
/// scratch.
pub fn fitness(chromosome: &Chromosome, weights: &EncoderWeights, ctx: &FitnessContext<'_>) -> Result<f64> {
    chromosome.check(&weights.spec)?;
    let cfg = chromosome.to_config(&weights.spec)?;
    let images = encode_batch_threaded(&ctx.data.images, weights, &cfg, 1)?;
    Ok(fitness_from_embeddings(&images, ctx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaParams {
    pub population_size: usize,
    pub max_generations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    /// Per-bit flip rate of a mutated individual; `None` means 1/length.
    pub flip_rate: Option<f64>,
    pub tournament_size: usize,
    pub patience: usize,
    pub min_improvement: f64,
    /// Minimum mean pairwise Hamming distance as a fraction of the
    /// chromosome length.
    pub diversity_floor: f64,
    pub skip_ratio: f64,
    pub init_density: f64,
    pub k1: usize,
    pub k2: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population_size: 48,
            max_generations: 100,
            crossover_prob: 0.9,
            mutation_prob: 0.5,
            flip_rate: None,
            tournament_size: 3,
            patience: 15,
            min_improvement: 1e-4,
            diversity_floor: 0.02,
            skip_ratio: 0.6,
            init_density: 0.25,
            k1: 10,
            k2: 10,
            seed: 0,
            threads: 1,
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(AatError::InvalidParameter(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("crossover_prob", self.crossover_prob)?;
        unit("mutation_prob", self.mutation_prob)?;
        unit("init_density", self.init_density)?;
        unit("diversity_floor", self.diversity_floor)?;
        unit("skip_ratio", self.skip_ratio)?;
        if let Some(r) = self.flip_rate {
            unit("flip_rate", r)?;
        }
        if self.population_size < 2 {
            return Err(AatError::InvalidParameter(format!(
                "population_size must be at least 2, got {}",
                self.population_size
            )));
        }
        if self.tournament_size < 2 {
            return Err(AatError::InvalidParameter(format!(
                "tournament_size must be at least 2, got {}",
                self.tournament_size
            )));
        }
        if !(self.min_improvement >= 0.0) {
            return Err(AatError::InvalidParameter(format!("min_improvement {}", self.min_improvement)));
        }
        Ok(())
    }
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub gen: usize,
    pub best_fitness: f64,
    /// Mean over individuals that were not skipped; `None` if all were.
    pub mean_fitness: Option<f64>,
    pub diversity: f64,
    /// Embedding passes over the validation set this generation.
    pub evals: usize,
    pub skipped: usize,
    /// Embedding passes spent on chromosomes above the skip ratio.
    #[serde(skip)]
    pub evals_above_skip: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxGenerations,
    Stagnation,
    LowDiversity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopThresholds {
    pub min_improvement: f64,
    pub patience: usize,
    /// Absolute mean pairwise Hamming distance.
    pub diversity_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaOutcome {
    pub best: Chromosome,
    pub best_fitness: f64,
    pub history: Vec<GenerationRecord>,
    pub stop_reason: StopReason,
    pub thresholds: StopThresholds,
}

impl GaOutcome {
    pub fn total_evals(&self) -> usize {
        self.history.iter().map(|h| h.evals).sum()
    }

    pub fn total_skipped(&self) -> usize {
        self.history.iter().map(|h| h.skipped).sum()
    }
}

const MEMO_CAPACITY: usize = 512;

/// Computes embedding matrices for chromosomes, reusing the vanilla hidden
/// states up to the first ablated layer and remembering recent results.
struct Evaluator<'w> {
    enc: Encoder<'w>,
    /// `prefix[l][i]`: vanilla residual stream of image `i` entering layer `l`.
    prefix: Vec<Vec<Tensor2>>,
    memo: HashMap<Chromosome, Arc<Tensor2>>,
    order: VecDeque<Chromosome>,
    pool: Option<rayon::ThreadPool>,
}

impl<'w> Evaluator<'w> {
    fn new(weights: &'w EncoderWeights, data: &PairDataset, threads: usize) -> Result<Self> {
        let enc = Encoder::new(weights);
        let spec = weights.spec;
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| AatError::InvalidParameter(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        let ones = vec![1.0; spec.heads_per_layer];
        let mut prefix = vec![data.images.clone()];
        for l in 0..spec.num_layers {
            let prev = &prefix[l];
            let next = Self::map(&pool, prev.len(), |i| enc.layer(&prev[i], l, &ones))?;
            prefix.push(next);
        }
        Ok(Self {
            enc,
            prefix,
            memo: HashMap::new(),
            order: VecDeque::new(),
            pool,
        })
    }

    fn map<T: Send>(pool: &Option<rayon::ThreadPool>, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        match pool {
            Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }

    fn compute(&self, c: &Chromosome) -> Result<Tensor2> {
        let spec = self.enc.weights().spec;
        let cfg = c.to_config(&spec)?;
        let start = c.first_ablated_layer(spec.heads_per_layer).unwrap_or(spec.num_layers);
        let inputs = &self.prefix[start];
        let rows = Self::map(&self.pool, inputs.len(), |i| {
            self.enc.embed_from(inputs[i].clone(), &cfg, start)
        })?;
        Tensor2::from_rows(&rows)
    }

    /// Embeddings for `c` and whether they had to be computed.
    fn embeddings(&mut self, c: &Chromosome) -> Result<(Arc<Tensor2>, bool)> {
        if let Some(e) = self.memo.get(c) {
            return Ok((Arc::clone(e), false));
        }
        let e = Arc::new(self.compute(c)?);
        if self.order.len() == MEMO_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.memo.remove(&old);
            }
        }
        self.order.push_back(c.clone());
        self.memo.insert(c.clone(), Arc::clone(&e));
        Ok((e, true))
    }
}

fn mean_pairwise_hamming(pop: &[Chromosome]) -> f64 {
    let n = pop.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += pop[i].hamming(&pop[j]);
        }
    }
    total as f64 / (n * (n - 1) / 2) as f64
}

fn tournament<'p>(pop: &'p [Chromosome], fit: &[f64], size: usize, rng: &mut StreamRng) -> &'p Chromosome {
    let mut best = rng.random_range(0..pop.len());
    for _ in 1..size {
        let j = rng.random_range(0..pop.len());
        if fit[j] > fit[best] {
            best = j;
        }
    }
    &pop[best]
}

/// Swaps the segment between two random cut points.
fn two_point_crossover(a: &mut Chromosome, b: &mut Chromosome, rng: &mut StreamRng) {
    let size = a.len();
    if size < 2 {
        return;
    }
    let mut p1 = rng.random_range(1..=size);
    let mut p2 = rng.random_range(1..size);
    if p2 >= p1 {
        p2 += 1;
    } else {
        std::mem::swap(&mut p1, &mut p2);
    }
    for k in p1..p2.min(size) {
        std::mem::swap(&mut a.bits[k], &mut b.bits[k]);
    }
}

fn flip_bits(c: &mut Chromosome, rate: f64, rng: &mut StreamRng) {
    for b in &mut c.bits {
        if rng.random_bool(rate) {
            *b = !*b;
        }
    }
}

struct Scored {
    fitness: Vec<f64>,
    evals: usize,
    skipped: usize,
    evals_above_skip: usize,
}

fn score(
    pop: &[Chromosome],
    ev: &mut Evaluator<'_>,
    ctx: &FitnessContext<'_>,
    skip_ratio: f64,
) -> Result<Scored> {
    let mut s = Scored {
        fitness: Vec::with_capacity(pop.len()),
        evals: 0,
        skipped: 0,
        evals_above_skip: 0,
    };
    for c in pop {
        if c.ablation_ratio() > skip_ratio {
            s.skipped += 1;
            s.fitness.push(f64::NEG_INFINITY);
            continue;
        }
        let (e, computed) = ev.embeddings(c)?;
        if computed {
            s.evals += 1;
            if c.ablation_ratio() > skip_ratio {
                s.evals_above_skip += 1;
            }
        }
        s.fitness.push(fitness_from_embeddings(&e, ctx));
    }
    Ok(s)
}

/// Evolves ablation masks on `ctx.data`. Returns the best mask ever scored
/// together with one history record per generation.
pub fn evolve(weights: &EncoderWeights, ctx: &FitnessContext<'_>, params: &GaParams) -> Result<GaOutcome> {
    params.validate()?;
    if ctx.data.is_empty() {
        return Err(AatError::InvalidParameter("validation set is empty".into()));
    }
    let spec = weights.spec;
    let len = spec.num_heads();
    let flip = params.flip_rate.unwrap_or(1.0 / len as f64);
    let thresholds = StopThresholds {
        min_improvement: params.min_improvement,
        patience: params.patience,
        diversity_floor: params.diversity_floor * len as f64,
    };

    let mut ev = Evaluator::new(weights, ctx.data, params.threads.max(1))?;
    let mut init_rng = substream(params.seed, "population");
    let mut rng = substream(params.seed, "evolution");

    let mut pop = vec![Chromosome::zeros(len)];
    while pop.len() < params.population_size {
        pop.push(Chromosome {
            bits: (0..len).map(|_| init_rng.random_bool(params.init_density)).collect(),
        });
    }

    let mut ctx = refresh_random_negatives(ctx, 0);
    let mut best = pop[0].clone();
    let mut best_fitness = f64::NEG_INFINITY;
    let mut history: Vec<GenerationRecord> = Vec::new();
    let mut stale = 0usize;
    let mut stop_reason = StopReason::MaxGenerations;
    let mut fit: Vec<f64> = Vec::new();

    for gen in 0..=params.max_generations {
        if gen > 0 {
            ctx = refresh_random_negatives(&ctx, gen);
            let mut offspring: Vec<Chromosome> = (0..params.population_size)
                .map(|_| tournament(&pop, &fit, params.tournament_size, &mut rng).clone())
                .collect();
            for pair in offspring.chunks_mut(2) {
                if let [a, b] = pair {
                    if rng.random_bool(params.crossover_prob) {
                        two_point_crossover(a, b, &mut rng);
                    }
                }
            }
            for c in &mut offspring {
                if rng.random_bool(params.mutation_prob) {
                    flip_bits(c, flip, &mut rng);
                }
            }
            pop = offspring;
        }

        let scored = score(&pop, &mut ev, &ctx, params.skip_ratio)?;
        let prev_best = best_fitness;
        for (c, &f) in pop.iter().zip(&scored.fitness) {
            if f > best_fitness {
                best_fitness = f;
                best = c.clone();
            }
        }
        let finite: Vec<f64> = scored.fitness.iter().copied().filter(|f| f.is_finite()).collect();
        let diversity = mean_pairwise_hamming(&pop);
        history.push(GenerationRecord {
            gen,
            best_fitness,
            mean_fitness: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
            diversity,
            evals: scored.evals,
            skipped: scored.skipped,
            evals_above_skip: scored.evals_above_skip,
        });
        log::debug!("ga gen {gen}: best {best_fitness:.5} diversity {diversity:.2} evals {}", scored.evals);
        fit = scored.fitness;

        if gen > 0 {
            if best_fitness - prev_best < params.min_improvement {
                stale += 1;
            } else {
                stale = 0;
            }
            if stale >= params.patience {
                stop_reason = StopReason::Stagnation;
                break;
            }
        }
        if diversity < thresholds.diversity_floor {
            stop_reason = StopReason::LowDiversity;
            break;
        }
    }
    Ok(GaOutcome {
        best,
        best_fitness,
        history,
        stop_reason,
        thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_bench, generate_datasets, generate_model, BenchSpec};
    use crate::encoder::encode_image;

    fn pairs(texts: Vec<Vec<f32>>, n_images: usize) -> PairDataset {
        PairDataset {
            split: "t".into(),
            seed: 0,
            images: vec![Tensor2::zeros(2, 2); n_images],
            texts: Tensor2::from_rows(&texts).unwrap(),
        }
    }

    fn small_bench(seed: u64) -> (BenchSpec, EncoderWeights, PairDataset) {
        let spec = BenchSpec {
            n_train: 0,
            n_val: 60,
            n_test: 0,
            ..BenchSpec::with_seed(seed)
        };
        let (w, _) = generate_model(&spec).unwrap();
        let val = generate_datasets(&spec, &w).unwrap().val;
        (spec, w, val)
    }

    #[test]
    fn margin_example() {
        let data = pairs(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        let ctx = FitnessContext {
            data: &data,
            mined: vec![vec![1], vec![0]],
            random: vec![vec![], vec![]],
            k1: 1,
            k2: 0,
            seed: 0,
            generation: 0,
        };
        // S_pos = [0.9, 0.7], max S_neg = [0.6, 0.5]
        let images = Tensor2::from_rows(&[vec![0.9, 0.5], vec![0.6, 0.7]]).unwrap();
        assert!((fitness_from_embeddings(&images, &ctx) - 0.25).abs() < 1e-7);
    }

    #[test]
    fn mining_examples() {
        let sim = Tensor2::from_rows(&[vec![0.9, 0.7, 0.4], vec![0.2, 0.8, 0.2], vec![0.5, 0.5, 0.1]]).unwrap();
        let mined = mine_negatives(&sim, 1);
        assert_eq!(mined[0], vec![1]);
        // tie between images 0 and 2 goes to the lower index
        assert_eq!(mined[1], vec![0]);
        let all = mine_negatives(&sim, 2);
        for (i, m) in all.iter().enumerate() {
            let mut m = m.clone();
            m.sort_unstable();
            assert_eq!(m, (0..3).filter(|&j| j != i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn hard_negative_sets() {
        let (spec, w, val) = small_bench(0);
        let vanilla = AblationConfig::identity_for(&spec.encoder);
        let a = build_hard_negatives(&w, &vanilla, &val, 3, 4, 9, 1).unwrap();
        let b = build_hard_negatives(&w, &vanilla, &val, 3, 4, 9, 1).unwrap();
        assert_eq!(a, b);
        for i in 0..val.len() {
            let h: Vec<usize> = a.negatives(i).collect();
            assert_eq!(h.len(), 7);
            assert!(!h.contains(&i));
            let mut d = h.clone();
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), 7);
        }
        assert!(matches!(
            build_hard_negatives(&w, &vanilla, &val, 30, 30, 9, 1),
            Err(AatError::InvalidParameter(_))
        ));
        let exhaustive = build_hard_negatives(&w, &vanilla, &val, val.len() - 1, 0, 9, 1).unwrap();
        assert_eq!(exhaustive.negatives(5).count(), val.len() - 1);
    }

    #[test]
    fn refresh_contract() {
        let (spec, w, val) = small_bench(1);
        let vanilla = AblationConfig::identity_for(&spec.encoder);
        let ctx = build_hard_negatives(&w, &vanilla, &val, 2, 5, 3, 1).unwrap();
        let r1 = refresh_random_negatives(&ctx, 4);
        assert_eq!(r1, refresh_random_negatives(&ctx, 4));
        assert_eq!(r1.mined, ctx.mined);
        assert_ne!(r1.random, ctx.random);
        for gen in 0..1000 {
            let r = refresh_random_negatives(&ctx, gen);
            for i in 0..val.len() {
                assert!(!r.random[i].contains(&i));
                assert!(r.random[i].iter().all(|j| !r.mined[i].contains(j)));
            }
        }
        let none = build_hard_negatives(&w, &vanilla, &val, 2, 0, 3, 1).unwrap();
        assert_eq!(refresh_random_negatives(&none, 7).random, none.random);
    }

    /// Margin of the vanilla model computed from scratch with scalar loops.
    fn scalar_margin(w: &EncoderWeights, ctx: &FitnessContext<'_>, cfg: &AblationConfig) -> f64 {
        let embs: Vec<Vec<f32>> = ctx.data.images.iter().map(|t| encode_image(t, w, cfg).unwrap()).collect();
        let cos = |i: usize, j: usize| {
            let mut s = 0.0f64;
            for k in 0..embs[j].len() {
                s += f64::from(ctx.data.texts.get(i, k)) * f64::from(embs[j][k]);
            }
            s
        };
        let mut total = 0.0;
        for i in 0..ctx.data.len() {
            let mut worst = f64::NEG_INFINITY;
            for &j in ctx.mined[i].iter().chain(&ctx.random[i]) {
                worst = worst.max(cos(i, j));
            }
            total += cos(i, i) - worst;
        }
        total / ctx.data.len() as f64
    }

    #[test]
    fn fitness_matches_scalar_oracle_and_cache() {
        let (spec, w, val) = small_bench(2);
        let vanilla = AblationConfig::identity_for(&spec.encoder);
        let ctx = build_hard_negatives(&w, &vanilla, &val, 2, 2, 5, 1).unwrap();
        let zeros = Chromosome::zeros(16);
        let f = fitness(&zeros, &w, &ctx).unwrap();
        assert!((f - scalar_margin(&w, &ctx, &vanilla)).abs() < 1e-9);
        assert!((-2.0..=2.0).contains(&f));

        let mut ev = Evaluator::new(&w, &val, 1).unwrap();
        let mut threaded = Evaluator::new(&w, &val, 2).unwrap();
        for bits in [0b1u32, 0b1000_0000_0000, 0b0110_0000_1001_0000, 0xffff] {
            let c = Chromosome {
                bits: (0..16).map(|k| bits >> k & 1 == 1).collect(),
            };
            let direct = fitness(&c, &w, &ctx).unwrap();
            assert_eq!(direct, fitness(&c, &w, &ctx).unwrap());
            let (e, fresh) = ev.embeddings(&c).unwrap();
            assert!(fresh);
            assert_eq!(fitness_from_embeddings(&e, &ctx), direct);
            assert!(!ev.embeddings(&c).unwrap().1);
            assert_eq!(*threaded.embeddings(&c).unwrap().0, *e);
        }
        assert!(fitness(&Chromosome::zeros(15), &w, &ctx).is_err());
    }

    #[test]
    fn duplicate_ground_truth_negative_scores_non_positive() {
        let (spec, w, mut val) = small_bench(3);
        val.images[1] = val.images[0].clone();
        let vanilla = AblationConfig::identity_for(&spec.encoder);
        let images = encode_batch_threaded(&val.images, &w, &vanilla, 1).unwrap();
        let t = val.texts.row(0);
        let contribution = dot(t, images.row(0)) - dot(t, images.row(1));
        assert!(contribution <= 0.0);
    }

    #[test]
    fn operators() {
        let mut rng = substream(0, "ops");
        for _ in 0..200 {
            let mut a = Chromosome { bits: (0..16).map(|_| rng.random_bool(0.5)).collect() };
            let mut b = Chromosome { bits: (0..16).map(|_| rng.random_bool(0.5)).collect() };
            let (a0, b0) = (a.clone(), b.clone());
            two_point_crossover(&mut a, &mut b, &mut rng);
            for k in 0..16 {
                let mut got = [a.bits[k], b.bits[k]];
                let mut want = [a0.bits[k], b0.bits[k]];
                got.sort_unstable();
                want.sort_unstable();
                assert_eq!(got, want);
            }
            // the swapped positions form one contiguous run
            let swapped: Vec<usize> = (0..16).filter(|&k| a.bits[k] != a0.bits[k]).collect();
            if let (Some(&lo), Some(&hi)) = (swapped.first(), swapped.last()) {
                assert!((lo..=hi).all(|k| a.bits[k] == b0.bits[k]));
            }
        }
        let pop = vec![Chromosome::zeros(4), Chromosome { bits: vec![true; 4] }];
        assert_eq!(mean_pairwise_hamming(&pop), 4.0);
        let mut c = Chromosome::zeros(8);
        flip_bits(&mut c, 1.0, &mut rng);
        assert_eq!(c.popcount(), 8);
    }

    fn quick_params(seed: u64) -> GaParams {
        GaParams {
            population_size: 12,
            max_generations: 6,
            k1: 3,
            k2: 3,
            seed,
            ..GaParams::default()
        }
    }

    #[test]
    fn evolve_contracts() {
        let (spec, w, val) = small_bench(4);
        let vanilla = AblationConfig::identity_for(&spec.encoder);
        let p = GaParams {
            init_density: 0.5,
            ..quick_params(8)
        };
        let ctx = build_hard_negatives(&w, &vanilla, &val, p.k1, p.k2, p.seed, 1).unwrap();
        let out = evolve(&w, &ctx, &p).unwrap();
        let again = evolve(&w, &ctx, &p).unwrap();
        assert_eq!(out, again);
        let threaded = evolve(&w, &ctx, &GaParams { threads: 2, ..p.clone() }).unwrap();
        assert_eq!(out, threaded);

        assert!(out.history.windows(2).all(|h| h[1].best_fitness >= h[0].best_fitness));
        let vanilla_margin = fitness(&Chromosome::zeros(16), &w, &ctx).unwrap();
        assert!(out.history[0].best_fitness >= vanilla_margin);
        assert!(out.history.iter().all(|h| h.evals_above_skip == 0));
        assert!(out.total_skipped() > 0);
        assert!(out.best.ablation_ratio() <= p.skip_ratio);
        assert_eq!(out.thresholds.diversity_floor, 0.02 * 16.0);

        let line = serde_json::to_value(&out.history[0]).unwrap();
        let keys: Vec<&String> = line.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["best_fitness", "diversity", "evals", "gen", "mean_fitness", "skipped"]);
    }

    #[test]
    fn early_stop_on_stagnation() {
        let (spec, w, val) = small_bench(5);
        let vanilla = AblationConfig::identity_for(&spec.encoder);
        let p = GaParams {
            max_generations: 50,
            patience: 2,
            min_improvement: 10.0,
            ..quick_params(1)
        };
        let ctx = build_hard_negatives(&w, &vanilla, &val, p.k1, p.k2, p.seed, 1).unwrap();
        let out = evolve(&w, &ctx, &p).unwrap();
        assert_eq!(out.stop_reason, StopReason::Stagnation);
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn rejects_bad_params() {
        for p in [
            GaParams { population_size: 1, ..GaParams::default() },
            GaParams { tournament_size: 1, ..GaParams::default() },
            GaParams { crossover_prob: 1.5, ..GaParams::default() },
            GaParams { mutation_prob: -0.1, ..GaParams::default() },
        ] {
            assert!(p.validate().is_err());
        }
        assert!(GaParams::default().validate().is_ok());
    }

    proptest::proptest! {
        #[test]
        fn negative_sets_have_fixed_size_and_exclude_ground_truth(
            n in 2usize..30, k1_frac in 0.0f64..1.0, k2_frac in 0.0f64..1.0, seed in 0u64..500, gen in 0usize..1000,
        ) {
            let k1 = ((n - 1) as f64 * k1_frac) as usize;
            let k2 = ((n - 1 - k1) as f64 * k2_frac) as usize;
            let mut rng = substream(seed, "sim");
            let sim = Tensor2::from_fn(n, n, |_, _| rng.random_range(-1.0f32..1.0));
            let data = pairs(vec![vec![1.0]; n], n);
            let base = FitnessContext {
                data: &data,
                mined: mine_negatives(&sim, k1),
                random: vec![Vec::new(); n],
                k1,
                k2,
                seed,
                generation: 0,
            };
            let ctx = refresh_random_negatives(&base, gen);
            for i in 0..n {
                let h: Vec<usize> = ctx.negatives(i).collect();
                proptest::prop_assert_eq!(h.len(), k1 + k2);
                proptest::prop_assert!(!h.contains(&i));
                let mut d = h.clone();
                d.sort_unstable();
                d.dedup();
                proptest::prop_assert_eq!(d.len(), h.len());
            }
        }

        #[test]
        fn chromosome_config_round_trip(bits in proptest::collection::vec(proptest::bool::ANY, 16)) {
            let spec = EncoderSpec::default();
            let c = Chromosome { bits };
            let cfg = c.to_config(&spec).unwrap();
            proptest::prop_assert_eq!(&Chromosome::from_config(&cfg), &c);
            proptest::prop_assert!((0.0..=1.0).contains(&c.ablation_ratio()));
            proptest::prop_assert_eq!(cfg.ablation_ratio(), c.ablation_ratio());
        }
    }

    #[test]
    #[ignore = "runs the full benchmark"]
    fn recovers_planted_heads_on_default_bench() {
        let spec = BenchSpec::with_seed(0);
        let b = generate_bench(&spec).unwrap();
        let p = GaParams::default();
        let ctx = build_hard_negatives(&b.weights, &AblationConfig::identity_for(&spec.encoder), &b.splits.val, 10, 10, 0, 1).unwrap();
        let out = evolve(&b.weights, &ctx, &p).unwrap();
        assert_eq!(out.best.bits, spec.planted_mask());
    }
}
