//! Simulation harness: comparison-audit scenarios, replication over seeds,
//! summary statistics and report tables, plus the Kalamazoo and California
//! studies.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assorter::AssorterSpec;
use crate::combiner::CombinerKind;
use crate::engine::{AuditConfig, AuditSession, StoppingRecord, StratumConfig};
use crate::error::{AuditError, Result};
use crate::martingale::Method;
use crate::population::{derive_seed, Category, Replacement, StratifiedPopulation, Stratum};
use crate::selector::SelectorRule;

pub mod california;
pub mod kalamazoo;

/// Overall margins used in the two-stratum experiment matrix.
pub const DEFAULT_MARGINS: [f64; 3] = [0.01, 0.05, 0.10];

/// One comparison stratum: reported and true diluted margins plus the urn of
/// overstatement values (0, 1 or 2 on a `u^A = 1` scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStratum {
    pub reported_margin: f64,
    pub true_margin: f64,
    pub size: u64,
    pub assorter: AssorterSpec,
    pub urn: Vec<Category>,
    /// Flip count was not integral and has been rounded toward zero.
    pub rounded: bool,
}

/// Builds a comparison stratum whose errors are all two-vote flips.
///
/// Reported above true gives `N (r - t) / 2` cards with `B = 0`; reported
/// below true gives `N (t - r) / 2` cards with `B = 2`; the rest are `B = 1`.
pub fn build_comparison_stratum(reported: f64, truth: f64, size: u64) -> Result<ScenarioStratum> {
    if !(-1.0..=1.0).contains(&reported) || !(-1.0..=1.0).contains(&truth) {
        return Err(AuditError::Domain(format!(
            "margins must lie in [-1, 1], got reported {reported}, true {truth}"
        )));
    }
    if size == 0 {
        return Err(AuditError::Config("scenario stratum is empty".into()));
    }
    let exact = size as f64 * (reported - truth).abs() / 2.0;
    let nearest = exact.round();
    let (flips, rounded) = if (exact - nearest).abs() < 1e-9 {
        (nearest as u64, false)
    } else {
        (exact.floor() as u64, true)
    };
    if flips > size {
        return Err(AuditError::Config(format!(
            "{flips} flips exceed the stratum size {size}"
        )));
    }
    let flip_value = if reported > truth { 0.0 } else { 2.0 };
    let mut urn = Vec::new();
    if flips > 0 {
        urn.push(Category {
            value: flip_value,
            count: flips,
        });
    }
    if flips < size {
        urn.push(Category {
            value: 1.0,
            count: size - flips,
        });
    }
    Ok(ScenarioStratum {
        reported_margin: reported,
        true_margin: truth,
        size,
        assorter: AssorterSpec::comparison_from_margin(reported)?,
        urn,
        rounded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub reported_overall: f64,
    pub true_overall: f64,
    pub strata: Vec<ScenarioStratum>,
}

impl Scenario {
    pub fn from_strata(reported: &[f64], truth: &[f64], sizes: &[u64]) -> Result<Self> {
        if reported.len() != truth.len() || reported.len() != sizes.len() {
            return Err(AuditError::Config("scenario vectors differ in length".into()));
        }
        let strata = reported
            .iter()
            .zip(truth)
            .zip(sizes)
            .map(|((&r, &t), &n)| build_comparison_stratum(r, t, n))
            .collect::<Result<Vec<_>>>()?;
        let total: u64 = sizes.iter().sum();
        let overall = |v: &[f64]| v.iter().zip(sizes).map(|(m, &n)| m * n as f64).sum::<f64>() / total as f64;
        Ok(Scenario {
            reported_overall: overall(reported),
            true_overall: overall(truth),
            strata,
        })
    }

    /// Two equal strata: the first tied, the second carrying twice the
    /// overall margin, so every error sits in the second stratum.
    pub fn two_stratum(reported: f64, truth: f64, size: u64) -> Result<Self> {
        Scenario::from_strata(&[0.0, 2.0 * reported], &[0.0, 2.0 * truth], &[size, size])
    }

    pub fn sizes(&self) -> Vec<u64> {
        self.strata.iter().map(|s| s.size).collect()
    }

    /// Every urn holds a single value, so workloads do not depend on order.
    pub fn is_deterministic(&self) -> bool {
        self.strata.iter().all(|s| s.urn.len() == 1)
    }

    pub fn population(&self, replacement: Replacement, seed: u64) -> Result<StratifiedPopulation> {
        let strata = self
            .strata
            .iter()
            .enumerate()
            .map(|(k, s)| Stratum::new(k, s.assorter.upper_bound_test(), s.urn.clone()))
            .collect::<Result<Vec<_>>>()?;
        StratifiedPopulation::new(strata, replacement, seed)
    }
}

/// Method, combiner and selector of one audit design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Design {
    pub method: Method,
    pub combiner: CombinerKind,
    pub selector: SelectorRule,
}

impl Design {
    pub fn new(method: Method, combiner: CombinerKind, selector: SelectorRule) -> Self {
        Design {
            method,
            combiner,
            selector,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{} / {} / {}",
            self.method.label(),
            self.combiner.label(),
            self.selector.label()
        )
    }

    pub fn config(&self, scenario: &Scenario, risk_limit: f64) -> AuditConfig {
        let strata = scenario
            .strata
            .iter()
            .map(|s| StratumConfig::new(s.size, s.assorter, self.method))
            .collect();
        let mut cfg = AuditConfig::new(risk_limit, strata);
        cfg.combiner = self.combiner;
        cfg.selector = self.selector;
        cfg
    }
}

/// The twelve designs of the two-stratum experiment, in table order.
pub fn all_designs() -> Vec<Design> {
    let mut out = Vec::with_capacity(12);
    for method in [Method::AlphaSt, Method::AlphaUb, Method::Eb] {
        for combiner in [CombinerKind::Fisher, CombinerKind::Intersection] {
            for selector in [SelectorRule::Proportional, SelectorRule::LowerSided] {
                out.push(Design::new(method, combiner, selector));
            }
        }
    }
    out
}

/// Runs one audit of `scenario` to completion.
pub fn run_once(scenario: &Scenario, design: Design, risk_limit: f64, seed: u64) -> Result<StoppingRecord> {
    let mut session = AuditSession::new(design.config(scenario, risk_limit))?.without_log();
    let mut population = scenario.population(Replacement::Without, seed)?;
    let budget = population.total_size();
    session.run_to_completion(&mut population, budget)
}

/// Workloads of one (scenario, design) cell over many seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub reported: f64,
    pub truth: f64,
    pub design: Design,
    pub seed: u64,
    pub workloads: Vec<u64>,
    pub physical: Vec<u64>,
    pub stopped: Vec<bool>,
    pub mean: f64,
    pub p90: u64,
}

impl CellResult {
    pub fn stop_fraction(&self) -> f64 {
        self.stopped.iter().filter(|&&s| s).count() as f64 / self.stopped.len().max(1) as f64
    }

    pub fn mean_physical(&self) -> f64 {
        mean(&self.physical)
    }
}

/// Replicates one cell `reps` times in parallel. Each replication is seeded
/// from `(master, cell, rep)`, so results do not depend on scheduling.
pub fn replicate(
    scenario: &Scenario,
    design: Design,
    risk_limit: f64,
    reps: usize,
    master: u64,
    cell: u64,
) -> Result<CellResult> {
    if reps == 0 {
        return Err(AuditError::Config("at least one replication is required".into()));
    }
    let records: Vec<StoppingRecord> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| run_once(scenario, design, risk_limit, derive_seed(master, &[cell, rep])))
        .collect::<Result<_>>()?;
    let workloads: Vec<u64> = records.iter().map(|r| r.workload.consumed_total).collect();
    Ok(CellResult {
        reported: scenario.reported_overall,
        truth: scenario.true_overall,
        design,
        seed: master,
        physical: records.iter().map(|r| r.workload.physical_total).collect(),
        stopped: records.iter().map(|r| r.stopped).collect(),
        mean: mean(&workloads),
        p90: percentile_nearest_rank(&workloads, 0.9),
        workloads,
    })
}

pub fn mean(values: &[u64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64
}

/// Nearest-rank empirical quantile: the `ceil(q n)`-th smallest value.
pub fn percentile_nearest_rank<T: Copy + PartialOrd>(values: &[T], q: f64) -> T {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("comparable values"));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Fraction of runs whose workload is at most each budget.
pub fn stop_curve(cell: &CellResult, budgets: &[u64]) -> Vec<f64> {
    let n = cell.workloads.len() as f64;
    budgets
        .iter()
        .map(|&b| {
            cell.workloads
                .iter()
                .zip(&cell.stopped)
                .filter(|(&w, &s)| s && w <= b)
                .count() as f64
                / n
        })
        .collect()
}

/// Per design: geometric mean over scenarios of its mean workload divided by
/// the smallest mean workload any design achieved in that scenario.
pub fn score(cells: &[CellResult]) -> Vec<(Design, f64)> {
    let mut scenarios: Vec<(u64, u64)> = Vec::new();
    let key = |c: &CellResult| ((c.reported * 1e9).round() as u64, (c.truth * 1e9).round() as u64);
    for c in cells {
        if !scenarios.contains(&key(c)) {
            scenarios.push(key(c));
        }
    }
    let best: Vec<f64> = scenarios
        .iter()
        .map(|s| {
            cells
                .iter()
                .filter(|c| key(c) == *s)
                .map(|c| c.mean)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut designs: Vec<Design> = Vec::new();
    for c in cells {
        if !designs.contains(&c.design) {
            designs.push(c.design);
        }
    }
    designs
        .into_iter()
        .map(|d| {
            let logs: Vec<f64> = cells
                .iter()
                .filter(|c| c.design == d)
                .map(|c| {
                    let i = scenarios.iter().position(|s| *s == key(c)).expect("scenario listed");
                    (c.mean / best[i]).ln()
                })
                .collect();
            (d, (logs.iter().sum::<f64>() / logs.len() as f64).exp())
        })
        .collect()
}

/// Full two-stratum matrix: every reported margin against every true margin
/// for every design.
pub fn simulate_cells(
    designs: &[Design],
    margins: &[f64],
    size: u64,
    risk_limit: f64,
    reps: usize,
    master: u64,
) -> Result<Vec<CellResult>> {
    let mut out = Vec::new();
    let mut cell = 0u64;
    for &reported in margins {
        for design in designs {
            for &truth in margins {
                let scenario = Scenario::two_stratum(reported, truth, size)?;
                let n = if scenario.is_deterministic() { 1 } else { reps };
                tracing::info!(reported, truth, design = %design.label(), "simulating cell");
                let mut res = replicate(&scenario, *design, risk_limit, n, master, cell)?;
                if n < reps {
                    // identical by construction; repeat so every cell reports `reps` runs
                    res.workloads = vec![res.workloads[0]; reps];
                    res.physical = vec![res.physical[0]; reps];
                    res.stopped = vec![res.stopped[0]; reps];
                }
                out.push(res);
                cell += 1;
            }
        }
    }
    Ok(out)
}

pub fn write_workloads<W: Write>(out: W, cells: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["reported", "method", "combiner", "allocation", "true_margin", "mean", "p90"])
        .map_err(csv_err)?;
    for c in cells {
        w.write_record([
            format!("{}", c.reported),
            c.design.method.label().to_string(),
            c.design.combiner.label().to_string(),
            c.design.selector.label().to_string(),
            format!("{}", c.truth),
            format!("{:.1}", c.mean),
            c.p90.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scores<W: Write>(out: W, cells: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "combiner", "allocation", "score"]).map_err(csv_err)?;
    for (d, s) in score(cells) {
        w.write_record([
            d.method.label(),
            d.combiner.label(),
            d.selector.label(),
            &format!("{s:.3}"),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Stop-probability curves for every cell, at budgets `step, 2 step, ...`
/// up to `max_budget`.
pub fn write_stop_curves<W: Write>(out: W, cells: &[CellResult], step: u64, max_budget: u64) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "reported",
        "true_margin",
        "budget",
        "fraction_stopped",
        "method",
        "combiner",
        "allocation",
    ])
    .map_err(csv_err)?;
    let budgets: Vec<u64> = (1..=max_budget / step.max(1)).map(|i| i * step.max(1)).collect();
    for c in cells {
        for (b, f) in budgets.iter().zip(stop_curve(c, &budgets)) {
            w.write_record([
                format!("{}", c.reported),
                format!("{}", c.truth),
                b.to_string(),
                format!("{f:.4}"),
                c.design.method.label().to_string(),
                c.design.combiner.label().to_string(),
                c.design.selector.label().to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> AuditError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AuditError::Io(io),
        other => AuditError::Fixture(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_examples() {
        let s = build_comparison_stratum(0.2, 0.2, 1000).unwrap();
        assert_eq!(s.urn, vec![Category { value: 1.0, count: 1000 }]);
        let s = build_comparison_stratum(0.10, 0.02, 1000).unwrap();
        assert_eq!(
            s.urn,
            vec![Category { value: 0.0, count: 40 }, Category { value: 1.0, count: 960 }]
        );
        let s = build_comparison_stratum(0.01, 0.10, 1000).unwrap();
        assert_eq!(
            s.urn,
            vec![Category { value: 2.0, count: 45 }, Category { value: 1.0, count: 955 }]
        );
        assert!(!s.rounded);
        assert!(build_comparison_stratum(0.0, 0.003, 1000).unwrap().rounded);
    }

    #[test]
    fn urn_mean_matches_margins() {
        for &r in &DEFAULT_MARGINS {
            for &t in &DEFAULT_MARGINS {
                let sc = Scenario::two_stratum(r, t, 1000).unwrap();
                for s in &sc.strata {
                    let total: f64 = s.urn.iter().map(|c| c.value * c.count as f64).sum();
                    let m = total / s.size as f64;
                    assert!((m - (1.0 - (s.reported_margin - s.true_margin) / 2.0)).abs() < 1.0 / (2.0 * s.size as f64));
                }
                assert!((sc.reported_overall - r).abs() < 1e-12);
                assert!((sc.true_overall - t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<u64> = (1..=10).collect();
        assert_eq!(percentile_nearest_rank(&v, 0.9), 9);
        assert_eq!(percentile_nearest_rank(&v, 0.91), 10);
        assert_eq!(percentile_nearest_rank(&[7u64], 0.9), 7);
        assert_eq!(mean(&[100, 200]), 150.0);
    }

    fn cell(design: Design, reported: f64, truth: f64, m: f64) -> CellResult {
        CellResult {
            reported,
            truth,
            design,
            seed: 0,
            workloads: vec![m as u64],
            physical: vec![m as u64],
            stopped: vec![true],
            mean: m,
            p90: m as u64,
        }
    }

    #[test]
    fn score_examples() {
        let designs = all_designs();
        let cells = vec![cell(designs[0], 0.1, 0.1, 100.0), cell(designs[1], 0.1, 0.1, 200.0)];
        let s = score(&cells);
        assert_eq!(s[0].1, 1.0);
        assert_eq!(s[1].1, 2.0);
        let cells = vec![
            cell(designs[0], 0.1, 0.1, 100.0),
            cell(designs[1], 0.1, 0.1, 50.0),
            cell(designs[0], 0.05, 0.05, 100.0),
            cell(designs[1], 0.05, 0.05, 400.0),
        ];
        let s = score(&cells);
        assert!((s[0].1 - 2f64.sqrt()).abs() < 1e-12);
        assert!((s[1].1 - 2.0).abs() < 1e-12);
        assert!(s.iter().all(|(_, v)| *v >= 1.0));
    }

    #[test]
    fn stop_curve_is_monotone() {
        let mut c = cell(all_designs()[0], 0.1, 0.1, 0.0);
        c.workloads = vec![10, 30, 20, 50];
        c.stopped = vec![true, true, true, false];
        let curve = stop_curve(&c, &[5, 10, 25, 40, 60]);
        assert_eq!(curve, vec![0.0, 0.25, 0.5, 0.75, 0.75]);
    }

    #[test]
    fn deterministic_diagonal_ignores_seed() {
        let sc = Scenario::two_stratum(0.1, 0.1, 200).unwrap();
        assert!(sc.is_deterministic());
        let d = Design::new(Method::AlphaSt, CombinerKind::Intersection, SelectorRule::Proportional);
        let a = run_once(&sc, d, 0.05, 1).unwrap();
        let b = run_once(&sc, d, 0.05, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.stopped);
    }

    #[test]
    fn twelve_designs() {
        let d = all_designs();
        assert_eq!(d.len(), 12);
        assert_eq!(d[0].method, Method::AlphaSt);
        assert_eq!(d[11].selector, SelectorRule::LowerSided);
    }
}
