//! Statewide polling audit stratified by county, measured with EB and the
//! Fisher LP maximiser at a schedule of total sample sizes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assorter::AssorterSpec;
use crate::combiner::{affine_from_accumulators, lp_max_fisher_eb};
use crate::error::{AuditError, Result};
use crate::ingest::{CountyResult, StateResults, CALIFORNIA_2020_BALLOTS, CALIFORNIA_COUNTIES};
use crate::martingale::{EbAccumulator, MethodConfig};
use crate::population::{derive_seed, stratum_weights, Replacement};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaliforniaConfig {
    pub risk_limit: f64,
    pub lambda_max: f64,
    /// Cards every county receives before the proportional share.
    pub base_per_county: u64,
    /// Total sample sizes to evaluate.
    pub checkpoints: Vec<u64>,
    pub reps: usize,
    pub seed: u64,
}

impl Default for CaliforniaConfig {
    fn default() -> Self {
        CaliforniaConfig {
            risk_limit: 0.05,
            lambda_max: 0.9,
            base_per_county: 10,
            checkpoints: (0..20).map(|i| 5_580 + 5_000 * i).collect(),
            reps: 300,
            seed: 2020,
        }
    }
}

/// Per-county sample sizes: `base` each plus a share of the remainder
/// proportional to county size, rounded by largest remainder so the sizes
/// add up to `n`.
pub fn county_sample_sizes(totals: &[u64], n: u64, base: u64) -> Result<Vec<u64>> {
    let k = totals.len() as u64;
    let floor = base * k;
    if n < floor {
        return Err(AuditError::Config(format!(
            "total sample {n} is below {base} cards for each of {k} counties"
        )));
    }
    let extra = n - floor;
    let grand: u128 = totals.iter().map(|&t| t as u128).sum();
    if grand == 0 {
        return Err(AuditError::Config("counties have no ballots".into()));
    }
    let mut sizes: Vec<u64> = Vec::with_capacity(totals.len());
    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(totals.len());
    for (i, &t) in totals.iter().enumerate() {
        let num = extra as u128 * t as u128;
        sizes.push(base + (num / grand) as u64);
        remainders.push((num % grand, i));
    }
    let assigned: u64 = sizes.iter().sum();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take((n - assigned) as usize) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointResult {
    pub sample_size: u64,
    pub reps: usize,
    pub stopped: usize,
    pub fraction_stopped: f64,
    pub mean_p_fisher: f64,
    pub mean_lp_seconds: f64,
    pub max_lp_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaliforniaReport {
    pub counties: usize,
    pub ballots: u64,
    pub checkpoints: Vec<CheckpointResult>,
}

fn draw_county<R: Rng>(c: &CountyResult, rng: &mut R) -> f64 {
    let r = rng.random_range(0..c.total);
    if r < c.winner {
        1.0
    } else if r < c.winner + c.loser {
        0.0
    } else {
        0.5
    }
}

/// One audit with the given county sample sizes, drawn with replacement.
/// Returns the maximum Fisher P-value and the LP solve time in seconds.
pub fn california_pvalue<R: Rng>(
    results: &StateResults,
    sample_sizes: &[u64],
    config: &CaliforniaConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let method = MethodConfig {
        lambda_max: config.lambda_max,
        alpha_for_lambda: Some(config.risk_limit),
        ..MethodConfig::default()
    };
    let mut accs = Vec::with_capacity(results.counties.len());
    for (c, &n) in results.counties.iter().zip(sample_sizes) {
        let mut acc = EbAccumulator::new(method, 1.0, c.total, Replacement::With)?;
        for _ in 0..n {
            acc.update(draw_county(c, rng))?;
        }
        accs.push(acc);
    }
    let specs = vec![AssorterSpec::polling(1.0)?; accs.len()];
    let totals: Vec<u64> = results.counties.iter().map(|c| c.total).collect();
    let weights = stratum_weights(&totals)?;
    let upper = vec![1.0; accs.len()];
    let start = Instant::now();
    let affine = affine_from_accumulators(&accs, &specs)?;
    let risk = lp_max_fisher_eb(&affine, &weights, &upper)?;
    Ok((risk.p_fisher, start.elapsed().as_secs_f64()))
}

/// Fraction of audits that reach the risk limit at each total sample size.
/// Every checkpoint and replication is an independent audit.
pub fn california_study(results: &StateResults, config: &CaliforniaConfig) -> Result<CaliforniaReport> {
    let totals: Vec<u64> = results.counties.iter().map(|c| c.total).collect();
    let mut checkpoints = Vec::with_capacity(config.checkpoints.len());
    for (ci, &n) in config.checkpoints.iter().enumerate() {
        let sizes = county_sample_sizes(&totals, n, config.base_per_county)?;
        let runs: Vec<(f64, f64)> = (0..config.reps as u64)
            .into_par_iter()
            .map(|rep| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[ci as u64, rep]));
                california_pvalue(results, &sizes, config, &mut rng)
            })
            .collect::<Result<_>>()?;
        let stopped = runs.iter().filter(|r| r.0 <= config.risk_limit).count();
        let reps = runs.len().max(1) as f64;
        tracing::info!(sample_size = n, stopped, "california checkpoint");
        checkpoints.push(CheckpointResult {
            sample_size: n,
            reps: runs.len(),
            stopped,
            fraction_stopped: stopped as f64 / reps,
            mean_p_fisher: runs.iter().map(|r| r.0).sum::<f64>() / reps,
            mean_lp_seconds: runs.iter().map(|r| r.1).sum::<f64>() / reps,
            max_lp_seconds: runs.iter().map(|r| r.1).fold(0.0, f64::max),
        });
    }
    Ok(CaliforniaReport {
        counties: results.counties.len(),
        ballots: results.total(),
        checkpoints,
    })
}

pub fn write_curve<W: std::io::Write>(out: W, report: &CaliforniaReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "sample_size",
        "reps",
        "fraction_stopped",
        "mean_p_fisher",
        "mean_lp_seconds",
        "max_lp_seconds",
    ])
    .map_err(super::csv_err)?;
    for c in &report.checkpoints {
        w.write_record([
            c.sample_size.to_string(),
            c.reps.to_string(),
            format!("{:.4}", c.fraction_stopped),
            format!("{:.6}", c.mean_p_fisher),
            format!("{:.6}", c.mean_lp_seconds),
            format!("{:.6}", c.max_lp_seconds),
        ])
        .map_err(super::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// A made-up 58-county state with the statewide ballot count of the 2020
/// California contest and a winner share near 63.5%. County sizes span
/// roughly 700 to 4 million ballots; county shares vary deterministically.
/// For exercising the pipeline only; it is not election data.
pub fn synthetic_state() -> StateResults {
    let k = CALIFORNIA_COUNTIES.len();
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let x = ((i * 37) % k) as f64 / (k - 1) as f64;
            (700f64.ln() + (4.0e6f64 / 700.0).ln() * x.powf(1.6)).exp()
        })
        .collect();
    let scale: f64 = raw.iter().sum();
    let mut totals: Vec<u64> = raw
        .iter()
        .map(|r| (r / scale * CALIFORNIA_2020_BALLOTS as f64).floor() as u64)
        .collect();
    let short = CALIFORNIA_2020_BALLOTS - totals.iter().sum::<u64>();
    let largest = (0..k).max_by_key(|&i| totals[i]).expect("non-empty");
    totals[largest] += short;
    let counties = CALIFORNIA_COUNTIES
        .iter()
        .zip(totals)
        .enumerate()
        .map(|(i, (name, total))| {
            let share = (0.635 + 0.17 * (1.7 * i as f64).cos()).clamp(0.25, 0.85);
            let winner = (total as f64 * share).round() as u64;
            let other = (total as f64 * 0.022).round() as u64;
            CountyResult {
                county: name.to_string(),
                total,
                winner,
                loser: total - winner - other,
                other,
            }
        })
        .collect();
    StateResults {
        winner: "Winner".into(),
        loser: "Runner-up".into(),
        counties,
    }
}
