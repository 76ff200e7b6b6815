//! Replication of the two-stratum Kalamazoo pilot: a CVR stratum audited by
//! comparison and a no-CVR stratum audited by polling, with the polling sample
//! order reshuffled many times.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assorter::AssorterSpec;
use crate::combiner::{build_null_grid, max_p_over_grid, NullGrid};
use crate::error::Result;
use crate::ingest::KalamazooData;
use crate::martingale::{Method, MethodConfig, Side, StratumPanel};
use crate::population::{derive_seed, stratum_weights, Replacement};
use crate::sim::percentile_nearest_rank;

/// P-value recorded for the SUITE method in the original pilot.
pub const SUITE_PVALUE: f64 = 0.037;

/// Per-stratum methods for one Kalamazoo configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalamazooMethod {
    pub label: &'static str,
    pub cvr_method: Method,
    pub polling_method: Method,
}

/// ALPHA (upward-biased in the CVR stratum, shrink-trunc in the polling
/// stratum) and EB in both.
pub const KALAMAZOO_METHODS: [KalamazooMethod; 2] = [
    KalamazooMethod {
        label: "ALPHA",
        cvr_method: Method::AlphaUb,
        polling_method: Method::AlphaSt,
    },
    KalamazooMethod {
        label: "EB",
        cvr_method: Method::Eb,
        polling_method: Method::Eb,
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub p90: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Summary {
            mean,
            sd: var.sqrt(),
            p90: percentile_nearest_rank(values, 0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalamazooRow {
    pub method: String,
    pub fisher: Summary,
    pub intersection: Summary,
    pub fisher_values: Vec<f64>,
    pub intersection_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalamazooReport {
    pub reshuffles: usize,
    pub seed: u64,
    pub suite: f64,
    pub rows: Vec<KalamazooRow>,
}

/// Stratum assorters: comparison for the CVR stratum, polling for the other.
pub fn kalamazoo_specs(data: &KalamazooData) -> Result<[AssorterSpec; 2]> {
    Ok([
        AssorterSpec::comparison_from_margin(data.margins[0])?,
        AssorterSpec::polling(1.0)?,
    ])
}

struct Setup {
    grid: NullGrid,
    cvr_panel: StratumPanel,
    polling_template: StratumPanel,
}

fn setup(data: &KalamazooData, method: KalamazooMethod, risk_limit: f64) -> Result<Setup> {
    let specs = kalamazoo_specs(data)?;
    let weights = stratum_weights(&data.sizes)?;
    let base = MethodConfig {
        alpha_for_lambda: Some(risk_limit),
        ..MethodConfig::default()
    };
    let grid = build_null_grid(
        &weights,
        &specs,
        base.eps_for(data.sizes[0]),
        2 * *data.sizes.iter().max().expect("two strata") as usize,
    )?;
    let mut cvr_panel = StratumPanel::new(
        method.cvr_method,
        base,
        specs[0].upper_bound_test(),
        data.sizes[0],
        Replacement::Without,
        Side::Upper,
        &grid.betas(0),
    )?;
    for &[cvr, mvr] in &data.cvr_sample {
        cvr_panel.update(specs[0].test_value(mvr, Some(cvr))?);
    }
    let polling_cfg = MethodConfig {
        tau0: Some((1.0 + data.margins[1]) / 2.0),
        ..base
    };
    let polling_template = StratumPanel::new(
        method.polling_method,
        polling_cfg,
        specs[1].upper_bound_test(),
        data.sizes[1],
        Replacement::Without,
        Side::Upper,
        &grid.betas(1),
    )?;
    Ok(Setup {
        grid,
        cvr_panel,
        polling_template,
    })
}

/// Final combined P-values for one ordering of the polling sample.
pub fn kalamazoo_pvalues(
    data: &KalamazooData,
    method: KalamazooMethod,
    risk_limit: f64,
    polling_order: &[f64],
) -> Result<(f64, f64)> {
    let s = setup(data, method, risk_limit)?;
    one_order(&s, polling_order)
}

fn one_order(s: &Setup, order: &[f64]) -> Result<(f64, f64)> {
    let mut polling = s.polling_template.clone();
    for &x in order {
        polling.update(x);
    }
    let risk = max_p_over_grid(&s.grid, &[s.cvr_panel.clone(), polling], false)?;
    Ok((risk.p_fisher, risk.p_intersection))
}

/// Final P-values over `reshuffles` random orders of the polling sample.
/// The CVR-stratum order stays as recorded.
pub fn kalamazoo_replication(
    data: &KalamazooData,
    reshuffles: usize,
    seed: u64,
    risk_limit: f64,
) -> Result<KalamazooReport> {
    data.validate()?;
    let mut rows = Vec::new();
    for (m, method) in KALAMAZOO_METHODS.iter().enumerate() {
        let s = setup(data, *method, risk_limit)?;
        let values: Vec<(f64, f64)> = (0..reshuffles as u64)
            .into_par_iter()
            .map(|rep| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[m as u64, rep]));
                let mut order = data.polling_sample.clone();
                order.shuffle(&mut rng);
                one_order(&s, &order)
            })
            .collect::<Result<_>>()?;
        let fisher_values: Vec<f64> = values.iter().map(|v| v.0).collect();
        let intersection_values: Vec<f64> = values.iter().map(|v| v.1).collect();
        rows.push(KalamazooRow {
            method: method.label.to_string(),
            fisher: Summary::of(&fisher_values),
            intersection: Summary::of(&intersection_values),
            fisher_values,
            intersection_values,
        });
    }
    Ok(KalamazooReport {
        reshuffles,
        seed,
        suite: SUITE_PVALUE,
        rows,
    })
}

pub fn write_kalamazoo_report<W: std::io::Write>(out: W, report: &KalamazooReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "combiner", "mean", "sd", "p90"]).map_err(super::csv_err)?;
    w.write_record(["SUITE", "", &format!("{:.3}", report.suite), "", ""])
        .map_err(super::csv_err)?;
    for row in &report.rows {
        for (name, s) in [("Fisher", row.fisher), ("Intersection", row.intersection)] {
            w.write_record([
                row.method.as_str(),
                name,
                &format!("{:.4}", s.mean),
                &format!("{:.4}", s.sd),
                &format!("{:.4}", s.p90),
            ])
            .map_err(super::csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_examples() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.p90, 4.0);
    }

    #[test]
    fn specs_follow_margins() {
        let d = KalamazooData::synthetic();
        let [c, p] = kalamazoo_specs(&d).unwrap();
        assert_eq!(c.reported_mean, Some(0.775));
        assert_eq!(c.upper_bound_test(), 2.0);
        assert_eq!(p.upper_bound_test(), 1.0);
    }
}
