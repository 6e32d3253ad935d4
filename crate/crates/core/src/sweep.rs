//! Experiment sweeps over the suppression factor and the search-set size.

use serde::{Deserialize, Serialize};

use crate::bench::PairDataset;
use crate::bp::{export_config, train_gating, BpParams};
use crate::encoder::{AblationConfig, EncoderWeights};
use crate::error::{AatError, Result};
use crate::eval::{evaluate, grid_search_single_head, naive_joint_ablation, ReportFile};
use crate::ga::{build_hard_negatives, evolve, GaParams};

pub const BETA_GRID: [f64; 6] = [1.0, 0.5, 0.2, 0.1, 0.05, 0.02];
pub const DSIZE_GRID: [usize; 4] = [100, 200, 500, 1000];

/// Where the swept mask comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskSource {
    /// The same heads at every grid point.
    Fixed(Vec<bool>),
    /// Naive joint ablation of a single-head grid run at each point's beta.
    NaiveJoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaPoint {
    pub beta: f64,
    pub mean_r: f64,
    /// Heads suppressed at this point.
    pub ablated: Vec<(usize, usize)>,
    pub t2i: ReportFile,
    pub i2t: ReportFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSweep {
    pub points: Vec<BetaPoint>,
    /// Grid point with the highest text→image mean-R; ties go to the
    /// earlier point.
    pub best_beta: f64,
}

/// Heads with beta below 1, which at beta 0.5 includes heads the binary view
/// counts as retained.
fn suppressed(config: &AblationConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for l in 0..config.layers() {
        for h in 0..config.heads() {
            if config.beta(l, h) < 1.0 {
                out.push((l, h));
            }
        }
    }
    out
}

fn best_by<T>(items: &[T], key: impl Fn(&T) -> f64) -> usize {
    (0..items.len()).fold(0, |b, i| if key(&items[i]) > key(&items[b]) { i } else { b })
}

/// Evaluates a head set at each beta in `grid` on `test`. Mask selection, if
/// any, uses `search`.
pub fn sweep_beta(
    weights: &EncoderWeights,
    search: &PairDataset,
    test: &PairDataset,
    source: &MaskSource,
    grid: &[f64],
    threads: usize,
) -> Result<BetaSweep> {
    if grid.is_empty() {
        return Err(AatError::InvalidParameter("empty beta grid".into()));
    }
    let spec = weights.spec;
    let mut points = Vec::with_capacity(grid.len());
    for &beta in grid {
        if !(0.0..=1.0).contains(&beta) {
            return Err(AatError::InvalidParameter(format!("beta {beta} outside [0, 1]")));
        }
        let config = match source {
            MaskSource::Fixed(mask) => AblationConfig::from_mask(spec.num_layers, spec.heads_per_layer, mask, beta)?,
            MaskSource::NaiveJoint if beta == 1.0 => AblationConfig::identity_for(&spec),
            MaskSource::NaiveJoint => {
                let table = grid_search_single_head(weights, search, beta, threads)?;
                naive_joint_ablation(&table, beta)?
            }
        };
        let [t2i, i2t] = evaluate(weights, test, &config, threads)?;
        log::info!("sweep beta {beta}: mean_r {:.2}", t2i.mean_r);
        points.push(BetaPoint {
            beta,
            mean_r: t2i.mean_r,
            ablated: suppressed(&config),
            t2i: t2i.to_file(),
            i2t: i2t.to_file(),
        });
    }
    let best_beta = points[best_by(&points, |p| p.mean_r)].beta;
    Ok(BetaSweep { points, best_beta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMethod {
    Ga,
    Bp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsizePoint {
    pub n_pairs: usize,
    pub mean_r: f64,
    pub ablated: Vec<(usize, usize)>,
    pub t2i: ReportFile,
    pub i2t: ReportFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsizeSweep {
    pub method: SearchMethod,
    pub vanilla_mean_r: f64,
    pub points: Vec<DsizePoint>,
}

/// Runs the search on the first `n` pairs of `search` for each `n` in
/// `sizes` and evaluates the result on `test`. BP results are exported
/// binarized at 0.5.
pub fn sweep_dsize(
    weights: &EncoderWeights,
    search: &PairDataset,
    test: &PairDataset,
    method: SearchMethod,
    sizes: &[usize],
    ga: &GaParams,
    bp: &BpParams,
) -> Result<DsizeSweep> {
    let spec = weights.spec;
    let vanilla = AblationConfig::identity_for(&spec);
    let threads = ga.threads.max(1);
    let vanilla_mean_r = evaluate(weights, test, &vanilla, threads)?[0].mean_r;
    let mut points = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let d = search.prefix(n)?;
        let config = match method {
            SearchMethod::Ga => {
                let ctx = build_hard_negatives(weights, &vanilla, &d, ga.k1, ga.k2, ga.seed, threads)?;
                evolve(weights, &ctx, ga)?.best.to_config(&spec)?
            }
            SearchMethod::Bp => export_config(&train_gating(weights, &d, bp)?.gating, true, 0.5)?,
        };
        let [t2i, i2t] = evaluate(weights, test, &config, threads)?;
        log::info!("sweep |D| {n}: mean_r {:.2}", t2i.mean_r);
        points.push(DsizePoint {
            n_pairs: n,
            mean_r: t2i.mean_r,
            ablated: config.ablated_heads(),
            t2i: t2i.to_file(),
            i2t: i2t.to_file(),
        });
    }
    Ok(DsizeSweep {
        method,
        vanilla_mean_r,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_datasets, generate_model, BenchSpec};

    fn small() -> (EncoderWeights, PairDataset, PairDataset, BenchSpec) {
        let spec = BenchSpec {
            n_train: 0,
            n_val: 80,
            n_test: 80,
            ..BenchSpec::with_seed(2)
        };
        let (w, _) = generate_model(&spec).unwrap();
        let s = generate_datasets(&spec, &w).unwrap();
        (w, s.val, s.test, spec)
    }

    #[test]
    fn beta_sweep_covers_grid() {
        let (w, val, test, spec) = small();
        let fixed = sweep_beta(&w, &val, &test, &MaskSource::Fixed(spec.planted_mask()), &BETA_GRID, 1).unwrap();
        assert_eq!(fixed.points.iter().map(|p| p.beta).collect::<Vec<_>>(), BETA_GRID);
        assert!(fixed.points[0].ablated.is_empty());
        let mut planted = spec.planted_heads.clone();
        planted.sort_unstable();
        assert!(fixed.points[1..].iter().all(|p| p.ablated == planted));
        let vanilla = evaluate(&w, &test, &AblationConfig::identity_for(&spec.encoder), 1).unwrap()[0].mean_r;
        assert_eq!(fixed.points[0].mean_r, vanilla);
        assert!(fixed.points.iter().all(|p| p.mean_r <= fixed.points.iter().find(|q| q.beta == fixed.best_beta).unwrap().mean_r));

        let joint = sweep_beta(&w, &val, &test, &MaskSource::NaiveJoint, &[1.0, 0.1], 1).unwrap();
        assert!(joint.points[0].ablated.is_empty());
        assert!(sweep_beta(&w, &val, &test, &MaskSource::NaiveJoint, &[1.5], 1).is_err());
        assert!(sweep_beta(&w, &val, &test, &MaskSource::NaiveJoint, &[], 1).is_err());
    }

    #[test]
    fn dsize_sweep_uses_prefixes() {
        let (w, val, test, _) = small();
        let ga = GaParams {
            population_size: 8,
            max_generations: 2,
            ..GaParams::default()
        };
        let bp = BpParams {
            epochs: 1,
            ..BpParams::default()
        };
        let out = sweep_dsize(&w, &val, &test, SearchMethod::Ga, &[30, 60], &ga, &bp).unwrap();
        assert_eq!(out.points.iter().map(|p| p.n_pairs).collect::<Vec<_>>(), [30, 60]);
        assert!(sweep_dsize(&w, &val, &test, SearchMethod::Bp, &[40], &ga, &bp).is_ok());
        assert!(sweep_dsize(&w, &val, &test, SearchMethod::Ga, &[81], &ga, &bp).is_err());
    }
}
