//! Retrieval and classification metrics, single-head grid search, naive joint
//! ablation and ablation-config statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::PairDataset;
use crate::encoder::{encode_batch_threaded, AblationConfig, EncoderWeights};
use crate::error::{AatError, Result};
use crate::numerics::{dot, Tensor2};

pub const STANDARD_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "text_to_image")]
    TextToImage,
    #[serde(rename = "image_to_text")]
    ImageToText,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::TextToImage => "text_to_image",
            Direction::ImageToText => "image_to_text",
        })
    }
}

/// Recall percentages at each requested cutoff. `mean_r` is the mean over
/// the requested cutoffs, which for the standard `{1, 5, 10}` is mean-R.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recalls: BTreeMap<usize, f64>,
    pub mean_r: f64,
    pub n_queries: usize,
}

/// The JSON file form, rounded to one decimal like published tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub direction: Direction,
    pub recalls: BTreeMap<String, f64>,
    pub mean_r: f64,
    pub n_queries: usize,
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recalls.get(&k).copied()
    }

    pub fn to_file(&self) -> ReportFile {
        ReportFile {
            direction: self.direction,
            recalls: self.recalls.iter().map(|(k, v)| (k.to_string(), round1(*v))).collect(),
            mean_r: round1(self.mean_r),
            n_queries: self.n_queries,
        }
    }
}

/// Cosine similarities of unit-norm rows: entry `(i, j) = q_i · g_j`.
pub fn similarity_matrix(queries: &Tensor2, gallery: &Tensor2) -> Result<Tensor2> {
    if queries.cols() != gallery.cols() {
        return Err(AatError::dims("similarity_matrix", queries.cols(), gallery.cols()));
    }
    Ok(Tensor2::from_fn(queries.rows(), gallery.rows(), |i, j| {
        dot(queries.row(i), gallery.row(j)) as f32
    }))
}

/// Zero-based rank of `target` in `scores`; ties go to the lower index.
pub fn rank_of(scores: &[f32], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Percentage of queries whose ground-truth gallery item ranks in the top `k`.
pub fn recall_at_k(
    sim: &Tensor2,
    ground_truth: &[usize],
    ks: &[usize],
    direction: Direction,
) -> Result<RetrievalReport> {
    if ground_truth.len() != sim.rows() {
        return Err(AatError::dims("recall_at_k", sim.rows(), ground_truth.len()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(AatError::InvalidParameter(format!("recall cutoffs {ks:?}")));
    }
    let mut ranks = Vec::with_capacity(sim.rows());
    for (q, &gt) in ground_truth.iter().enumerate() {
        if gt >= sim.cols() {
            return Err(AatError::IndexOutOfRange {
                what: "gallery",
                index: gt,
                len: sim.cols(),
            });
        }
        ranks.push(rank_of(sim.row(q), gt));
    }
    let n = ranks.len().max(1) as f64;
    let recalls: BTreeMap<usize, f64> = ks
        .iter()
        .map(|&k| (k, 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / n))
        .collect();
    let mean_r = recalls.values().sum::<f64>() / recalls.len() as f64;
    Ok(RetrievalReport {
        direction,
        recalls,
        mean_r,
        n_queries: sim.rows(),
    })
}

/// Both retrieval directions for index-paired embeddings.
pub fn retrieval_reports(image_embs: &Tensor2, text_embs: &Tensor2) -> Result<[RetrievalReport; 2]> {
    let t2i = similarity_matrix(text_embs, image_embs)?;
    let gt: Vec<usize> = (0..t2i.rows()).collect();
    Ok([
        recall_at_k(&t2i, &gt, &STANDARD_KS, Direction::TextToImage)?,
        recall_at_k(&t2i.transpose(), &gt, &STANDARD_KS, Direction::ImageToText)?,
    ])
}

/// Encodes `data` under `config` and reports `[text→image, image→text]`.
pub fn evaluate(
    weights: &EncoderWeights,
    data: &PairDataset,
    config: &AblationConfig,
    threads: usize,
) -> Result<[RetrievalReport; 2]> {
    let images = encode_batch_threaded(&data.images, weights, config, threads)?;
    retrieval_reports(&images, &data.texts)
}

/// Text→image mean-R under `config`.
pub fn t2i_mean_r(weights: &EncoderWeights, data: &PairDataset, config: &AblationConfig, threads: usize) -> Result<f64> {
    Ok(evaluate(weights, data, config, threads)?[0].mean_r)
}

/// Top-1 accuracy (percent) of nearest-class assignment; ties go to the
/// lower class index.
pub fn zero_shot_top1(image_embs: &Tensor2, class_embs: &Tensor2, labels: &[usize]) -> Result<f64> {
    if labels.len() != image_embs.rows() {
        return Err(AatError::dims("zero_shot_top1", image_embs.rows(), labels.len()));
    }
    let sim = similarity_matrix(image_embs, class_embs)?;
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if label >= class_embs.rows() {
            return Err(AatError::IndexOutOfRange {
                what: "class",
                index: label,
                len: class_embs.rows(),
            });
        }
        let row = sim.row(i);
        let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        correct += usize::from(best == label);
    }
    Ok(100.0 * correct as f64 / labels.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    /// `None` for the vanilla baseline.
    pub head: Option<(usize, usize)>,
    pub t2i: RetrievalReport,
    pub i2t: RetrievalReport,
}

/// One row per individually suppressed head plus the vanilla baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchTable {
    pub layers: usize,
    pub heads: usize,
    pub beta: f64,
    pub vanilla: GridRow,
    pub rows: Vec<GridRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    layer: i64,
    head: i64,
    r1: f64,
    r5: f64,
    r10: f64,
    mean_r: f64,
}

impl GridSearchTable {
    pub fn len(&self) -> usize {
        self.rows.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Head rows by descending text→image mean-R; ties keep (layer, head)
    /// order.
    pub fn ranked(&self) -> Vec<&GridRow> {
        let mut rows: Vec<&GridRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.t2i.mean_r.total_cmp(&a.t2i.mean_r));
        rows
    }

    /// Writes text→image recalls as CSV; the vanilla row is `layer = head = -1`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for row in std::iter::once(&self.vanilla).chain(&self.rows) {
            let (layer, head) = row.head.map_or((-1, -1), |(l, h)| (l as i64, h as i64));
            let r = &row.t2i;
            w.serialize(CsvRow {
                layer,
                head,
                r1: round1(r.recall(1).unwrap_or(0.0)),
                r5: round1(r.recall(5).unwrap_or(0.0)),
                r10: round1(r.recall(10).unwrap_or(0.0)),
                mean_r: r.mean_r,
            })
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| AatError::io(path, e))
    }

    /// Reads a table written by [`write_csv`](Self::write_csv). Only the
    /// text→image columns survive the round trip; `i2t` is left equal to it.
    pub fn read_csv(path: &Path, beta: f64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut vanilla = None;
        let mut rows = Vec::new();
        for rec in r.deserialize::<CsvRow>() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let mut recalls = BTreeMap::new();
            recalls.insert(1, rec.r1);
            recalls.insert(5, rec.r5);
            recalls.insert(10, rec.r10);
            let rep = RetrievalReport {
                direction: Direction::TextToImage,
                recalls,
                mean_r: rec.mean_r,
                n_queries: 0,
            };
            let head = if rec.layer < 0 || rec.head < 0 {
                None
            } else {
                Some((rec.layer as usize, rec.head as usize))
            };
            let row = GridRow {
                head,
                t2i: rep.clone(),
                i2t: RetrievalReport {
                    direction: Direction::ImageToText,
                    ..rep
                },
            };
            match head {
                None if vanilla.is_some() => {
                    return Err(AatError::InvalidConfig("grid table has two vanilla rows".into()))
                }
                None => vanilla = Some(row),
                Some(_) => rows.push(row),
            }
        }
        let vanilla = vanilla.ok_or_else(|| AatError::InvalidConfig("grid table lacks a vanilla row".into()))?;
        let layers = rows.iter().filter_map(|r| r.head).map(|h| h.0 + 1).max().unwrap_or(0);
        let heads = rows.iter().filter_map(|r| r.head).map(|h| h.1 + 1).max().unwrap_or(0);
        if rows.len() != layers * heads {
            return Err(AatError::InvalidConfig(format!(
                "grid table has {} head rows for a {layers}x{heads} encoder",
                rows.len()
            )));
        }
        rows.sort_by_key(|r| r.head);
        Ok(Self {
            layers,
            heads,
            beta,
            vanilla,
            rows,
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> AatError {
    AatError::InvalidConfig(format!("{}: {e}", path.display()))
}

/// Evaluates the vanilla model and every head suppressed alone at `beta`.
/// Exactly `num_heads + 1` model evaluations.
pub fn grid_search_single_head(
    weights: &EncoderWeights,
    data: &PairDataset,
    beta: f64,
    threads: usize,
) -> Result<GridSearchTable> {
    if !(0.0..1.0).contains(&beta) {
        return Err(AatError::InvalidParameter(format!("grid beta {beta} must lie in [0, 1)")));
    }
    let spec = weights.spec;
    let mut jobs: Vec<Option<(usize, usize)>> = vec![None];
    for l in 0..spec.num_layers {
        for h in 0..spec.heads_per_layer {
            jobs.push(Some((l, h)));
        }
    }
    let run = |job: &Option<(usize, usize)>| -> Result<GridRow> {
        let cfg = match job {
            None => AblationConfig::identity_for(&spec),
            Some((l, h)) => AblationConfig::from_heads(spec.num_layers, spec.heads_per_layer, &[(*l, *h)], beta)?,
        };
        let [t2i, i2t] = evaluate(weights, data, &cfg, 1)?;
        Ok(GridRow { head: *job, t2i, i2t })
    };
    let mut rows: Vec<GridRow> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| AatError::InvalidParameter(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_>>())?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    let vanilla = rows.remove(0);
    Ok(GridSearchTable {
        layers: spec.num_layers,
        heads: spec.heads_per_layer,
        beta,
        vanilla,
        rows,
    })
}

/// Ablates every head whose single-head text→image mean-R strictly beats the
/// vanilla row.
pub fn naive_joint_ablation(table: &GridSearchTable, beta: f64) -> Result<AblationConfig> {
    let winners: Vec<(usize, usize)> = table
        .rows
        .iter()
        .filter(|r| r.t2i.mean_r > table.vanilla.t2i.mean_r)
        .filter_map(|r| r.head)
        .collect();
    AblationConfig::from_heads(table.layers, table.heads, &winners, beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigStats {
    pub total_heads: usize,
    pub ablated: usize,
    pub overall_ratio: f64,
    pub per_layer_counts: Vec<usize>,
    /// Ablated heads per layer, averaged over layers.
    pub mean_per_layer: f64,
}

pub fn config_stats(config: &AblationConfig) -> ConfigStats {
    let per_layer_counts: Vec<usize> = (0..config.layers())
        .map(|l| (0..config.heads()).filter(|&h| config.is_ablated(l, h)).count())
        .collect();
    let ablated: usize = per_layer_counts.iter().sum();
    let total = config.num_heads();
    ConfigStats {
        total_heads: total,
        ablated,
        overall_ratio: if total == 0 { 0.0 } else { ablated as f64 / total as f64 },
        per_layer_counts,
        mean_per_layer: if config.layers() == 0 {
            0.0
        } else {
            ablated as f64 / config.layers() as f64
        },
    }
}
