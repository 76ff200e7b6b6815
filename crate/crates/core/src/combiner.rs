//! Combining per-stratum evidence and maximising the combined P-value over
//! the union of intersection nulls `{theta : w . theta <= 1/2, 0 <= theta <= u^A}`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::assorter::AssorterSpec;
use crate::error::{AuditError, Result};
use crate::lp::{LinearProgram, Relation};
use crate::martingale::{EbAccumulator, StratumPanel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerKind {
    Fisher,
    Intersection,
}

impl CombinerKind {
    pub fn label(self) -> &'static str {
        match self {
            CombinerKind::Fisher => "Fisher",
            CombinerKind::Intersection => "Intersection",
        }
    }
}

impl std::str::FromStr for CombinerKind {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fisher" | "f" => Ok(CombinerKind::Fisher),
            "intersection" | "i" | "product" => Ok(CombinerKind::Intersection),
            _ => Err(AuditError::Config(format!("unknown combiner `{s}`"))),
        }
    }
}

/// Survival function of chi-squared with `2k` degrees of freedom:
/// `exp(-x/2) * sum_{j<k} (x/2)^j / j!`, summed in log space.
pub fn chi2_even_df_survival(x: f64, k: usize) -> f64 {
    if k == 0 {
        return if x > 0.0 { 0.0 } else { 1.0 };
    }
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    let h = x / 2.0;
    let ln_h = h.ln();
    let mut log_terms = Vec::with_capacity(k);
    let mut ln_fact = 0.0;
    for j in 0..k {
        if j > 0 {
            ln_fact += (j as f64).ln();
        }
        log_terms.push(-h + j as f64 * ln_h - ln_fact);
    }
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_terms.iter().map(|l| (l - max).exp()).sum();
    (max + sum.ln()).exp().min(1.0)
}

/// Fisher's combination of per-stratum P-values.
pub fn fisher_pvalue(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(AuditError::Config("no P-values to combine".into()));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(AuditError::Domain(format!("P-value {bad} outside [0, 1]")));
    }
    if p.contains(&0.0) {
        return Ok(0.0);
    }
    let x = -2.0 * p.iter().map(|v| v.ln()).sum::<f64>();
    Ok(chi2_even_df_survival(x, p.len()))
}

/// Fisher combination from log supermartingale values, with
/// `-ln p_k = max(0, log M_k)`.
pub fn fisher_from_log_m(log_m: &[f64]) -> f64 {
    let s: f64 = log_m.iter().map(|l| l.max(0.0)).sum();
    chi2_even_df_survival(2.0 * s, log_m.len())
}

/// `min(1, 1 / prod M_k)`.
pub fn intersection_pvalue(log_m: &[f64]) -> f64 {
    let s: f64 = log_m.iter().sum();
    (-s).exp().min(1.0)
}

/// A hypothesised vector of stratum means and its test-scale null means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullPoint {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub feasible: bool,
}

impl NullPoint {
    pub fn new(theta: Vec<f64>, specs: &[AssorterSpec], weights: &[f64]) -> Self {
        let beta = theta
            .iter()
            .zip(specs)
            .map(|(&t, s)| s.null_mean(t))
            .collect();
        let feasible = is_feasible(&theta, specs, weights, 1e-9);
        NullPoint {
            theta,
            beta,
            feasible,
        }
    }
}

/// `0 <= theta <= u^A` and `w . theta <= 1/2`, within `tol`.
pub fn is_feasible(theta: &[f64], specs: &[AssorterSpec], weights: &[f64], tol: f64) -> bool {
    let in_box = theta
        .iter()
        .zip(specs)
        .all(|(&t, s)| t >= -tol && t <= s.upper_bound_original + tol);
    let dot: f64 = theta.iter().zip(weights).map(|(t, w)| t * w).sum();
    in_box && dot <= 0.5 + tol
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullGrid {
    pub points: Vec<NullPoint>,
    pub resolution: usize,
}

impl NullGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Test-scale null means of stratum `k` across the grid.
    pub fn betas(&self, k: usize) -> Vec<f64> {
        self.points.iter().map(|p| p.beta[k]).collect()
    }
}

/// Equispaced nulls on the boundary `w . theta = 1/2` for two strata.
///
/// `theta_1` runs over `[eps_1, 1/(2 w_1) - eps_1]` intersected with the
/// range where both coordinates stay inside the box; the clipped ends are the
/// box corners of the boundary segment.
pub fn build_null_grid(weights: &[f64], specs: &[AssorterSpec], eps1: f64, g: usize) -> Result<NullGrid> {
    if weights.len() != 2 || specs.len() != 2 {
        return Err(AuditError::Config(format!(
            "grid search needs exactly 2 strata, got {}; use the LP maximiser",
            weights.len()
        )));
    }
    if g == 0 {
        return Err(AuditError::Config("grid resolution must be positive".into()));
    }
    let (w1, w2) = (weights[0], weights[1]);
    let (u1, u2) = (specs[0].upper_bound_original, specs[1].upper_bound_original);
    if w1 * u1 + w2 * u2 <= 0.5 {
        let point = NullPoint::new(vec![u1, u2], specs, weights);
        return Ok(NullGrid {
            points: vec![point],
            resolution: 1,
        });
    }
    let lo = eps1.max((0.5 - w2 * u2) / w1);
    let hi = (0.5 / w1 - eps1).min(u1);
    let (lo, hi) = if hi < lo { (hi, hi) } else { (lo, hi) };
    let points = (0..g)
        .map(|j| {
            let t1 = if g == 1 {
                lo
            } else {
                lo + (hi - lo) * j as f64 / (g - 1) as f64
            };
            let t2 = ((0.5 - w1 * t1) / w2).clamp(0.0, u2);
            NullPoint::new(vec![t1, t2], specs, weights)
        })
        .collect();
    Ok(NullGrid {
        points,
        resolution: g,
    })
}

/// Combined P-values at one null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointTrace {
    pub theta: Vec<f64>,
    pub log_m_sum: f64,
    pub p_fisher: f64,
    pub p_intersection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedRisk {
    pub p_fisher: f64,
    pub p_intersection: f64,
    pub argmax_fisher: Option<NullPoint>,
    pub argmax_intersection: Option<NullPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_point: Option<Vec<PointTrace>>,
}

impl CombinedRisk {
    /// Risk before any evidence: both P-values are 1.
    pub fn unit() -> Self {
        CombinedRisk {
            p_fisher: 1.0,
            p_intersection: 1.0,
            argmax_fisher: None,
            argmax_intersection: None,
            per_point: None,
        }
    }

    pub fn p(&self, kind: CombinerKind) -> f64 {
        match kind {
            CombinerKind::Fisher => self.p_fisher,
            CombinerKind::Intersection => self.p_intersection,
        }
    }
}

/// Maximum combined P-values over a grid, given the upper-side panel of each
/// stratum built on that grid's null means.
pub fn max_p_over_grid(grid: &NullGrid, panels: &[StratumPanel], trace: bool) -> Result<CombinedRisk> {
    if grid.is_empty() {
        return Err(AuditError::Config("empty null grid".into()));
    }
    if panels.iter().any(|p| p.len() != grid.len()) {
        return Err(AuditError::Contract("panel does not cover the grid".into()));
    }
    let log_ms: Vec<&[f64]> = panels.iter().map(|p| p.log_m()).collect();
    let k = panels.len();
    let mut best_sum = (f64::INFINITY, 0usize);
    let mut best_pos = (f64::INFINITY, 0usize);
    let mut traces = trace.then(|| Vec::with_capacity(grid.len()));
    for j in 0..grid.len() {
        let mut sum = 0.0;
        let mut pos = 0.0;
        for lm in &log_ms {
            sum += lm[j];
            pos += lm[j].max(0.0);
        }
        if sum < best_sum.0 {
            best_sum = (sum, j);
        }
        if pos < best_pos.0 {
            best_pos = (pos, j);
        }
        if let Some(t) = traces.as_mut() {
            t.push(PointTrace {
                theta: grid.points[j].theta.clone(),
                log_m_sum: sum,
                p_fisher: chi2_even_df_survival(2.0 * pos, k),
                p_intersection: (-sum).exp().min(1.0),
            });
        }
    }
    Ok(CombinedRisk {
        p_fisher: chi2_even_df_survival(2.0 * best_pos.0, k),
        p_intersection: (-best_sum.0).exp().min(1.0),
        argmax_fisher: Some(grid.points[best_pos.1].clone()),
        argmax_intersection: Some(grid.points[best_sum.1].clone()),
        per_point: traces,
    })
}

/// Combined P-value of the chosen kind at grid point `j`.
pub fn point_pvalue(panels: &[StratumPanel], j: usize, kind: CombinerKind) -> f64 {
    match kind {
        CombinerKind::Intersection => {
            let s: f64 = panels.iter().map(|p| p.log_m()[j]).sum();
            (-s).exp().min(1.0)
        }
        CombinerKind::Fisher => {
            let s: f64 = panels.iter().map(|p| p.log_m()[j].max(0.0)).sum();
            chi2_even_df_survival(2.0 * s, panels.len())
        }
    }
}

/// Writes `theta_1,...,theta_K,log_m_sum,p_fisher,p_intersection` rows.
pub fn write_trace<W: Write>(out: W, traces: &[PointTrace]) -> Result<()> {
    let k = traces.first().map_or(0, |t| t.theta.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=k).map(|i| format!("theta_{i}")).collect();
    header.extend(["log_m_sum", "p_fisher", "p_intersection"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for t in traces {
        let mut row: Vec<String> = t.theta.iter().map(|v| v.to_string()).collect();
        row.push(t.log_m_sum.to_string());
        row.push(t.p_fisher.to_string());
        row.push(t.p_intersection.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> AuditError {
    AuditError::Io(std::io::Error::other(e))
}

/// `log M_k(theta_k) = a - b theta_k` on the original assorter scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineStratum {
    pub a: f64,
    pub b: f64,
}

impl AffineStratum {
    pub fn at(&self, theta: f64) -> f64 {
        self.a - self.b * theta
    }
}

/// Derives `(a, b)` from EB accumulators by evaluating at `theta = 0` and
/// `theta = u^A`; affinity is checked at the midpoint.
pub fn affine_from_accumulators(accs: &[EbAccumulator], specs: &[AssorterSpec]) -> Result<Vec<AffineStratum>> {
    if accs.len() != specs.len() {
        return Err(AuditError::Contract("one accumulator per stratum".into()));
    }
    accs.iter()
        .zip(specs)
        .enumerate()
        .map(|(k, (acc, spec))| {
            let ua = spec.upper_bound_original;
            let l0 = acc.log_value(spec.null_mean(0.0));
            let lu = acc.log_value(spec.null_mean(ua));
            let aff = AffineStratum {
                a: l0,
                b: (l0 - lu) / ua,
            };
            let mid = acc.log_value(spec.null_mean(ua / 2.0));
            let tol = 1e-9 * (1.0 + aff.a.abs() + aff.b.abs() * ua);
            if (mid - aff.at(ua / 2.0)).abs() > tol {
                return Err(AuditError::Contract(format!(
                    "stratum {}: EB log value is not affine",
                    k + 1
                )));
            }
            Ok(aff)
        })
        .collect()
}

fn check_lp_inputs(affine: &[AffineStratum], weights: &[f64], upper: &[f64]) -> Result<()> {
    let k = affine.len();
    if k == 0 || weights.len() != k || upper.len() != k {
        return Err(AuditError::Contract("LP inputs must have one entry per stratum".into()));
    }
    if let Some((i, s)) = affine.iter().enumerate().find(|(_, s)| !(s.b >= -1e-12) || !s.a.is_finite()) {
        return Err(AuditError::Domain(format!(
            "stratum {}: slope {} must be >= 0 and intercept finite",
            i + 1,
            s.b
        )));
    }
    Ok(())
}

fn theta_point(theta: Vec<f64>, upper: &[f64], weights: &[f64]) -> NullPoint {
    let feasible = theta.iter().zip(upper).all(|(&t, &u)| t >= -1e-9 && t <= u + 1e-9)
        && theta.iter().zip(weights).map(|(t, w)| t * w).sum::<f64>() <= 0.5 + 1e-9;
    NullPoint {
        beta: theta.clone(),
        theta,
        feasible,
    }
}

/// Maximum intersection P-value by LP: minimise `sum (a_k - b_k theta_k)`
/// subject to `w . theta <= 1/2` and `0 <= theta <= u^A`.
pub fn lp_max_intersection_eb(affine: &[AffineStratum], weights: &[f64], upper: &[f64]) -> Result<CombinedRisk> {
    check_lp_inputs(affine, weights, upper)?;
    let k = affine.len();
    let mut lp = LinearProgram::new(affine.iter().map(|s| -s.b.max(0.0)).collect());
    lp.add(weights.to_vec(), Relation::Le, 0.5);
    for (j, &u) in upper.iter().enumerate() {
        lp.bound(j, u);
    }
    let sol = lp.solve()?;
    let a_sum: f64 = affine.iter().map(|s| s.a).sum();
    let optimum = a_sum + sol.value;
    let point = theta_point(sol.x, upper, weights);
    let log_m: Vec<f64> = affine.iter().zip(&point.theta).map(|(s, &t)| s.at(t)).collect();
    debug_assert_eq!(log_m.len(), k);
    Ok(CombinedRisk {
        p_fisher: fisher_from_log_m(&log_m),
        p_intersection: (-optimum).exp().min(1.0),
        argmax_fisher: None,
        argmax_intersection: Some(point),
        per_point: None,
    })
}

/// Closed form of the intersection LP: a fractional knapsack filling the
/// budget `1/2` in decreasing order of `b_k / w_k`.
pub fn knapsack_max_intersection(affine: &[AffineStratum], weights: &[f64], upper: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lp_inputs(affine, weights, upper)?;
    let mut order: Vec<usize> = (0..affine.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = affine[i].b / weights[i];
        let rj = affine[j].b / weights[j];
        rj.partial_cmp(&ri).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    let mut budget = 0.5;
    let mut theta = vec![0.0; affine.len()];
    for i in order {
        if budget <= 0.0 || affine[i].b <= 0.0 {
            break;
        }
        let take = upper[i].min(budget / weights[i]);
        theta[i] = take;
        budget -= take * weights[i];
    }
    let value = affine.iter().zip(&theta).map(|(s, &t)| s.at(t)).sum();
    Ok((value, theta))
}

/// Maximum Fisher P-value by LP: minimise `sum s_k` with `s_k >= 0`,
/// `s_k >= a_k - b_k theta_k`, `w . theta <= 1/2`, `0 <= theta <= u^A`.
pub fn lp_max_fisher_eb(affine: &[AffineStratum], weights: &[f64], upper: &[f64]) -> Result<CombinedRisk> {
    check_lp_inputs(affine, weights, upper)?;
    let k = affine.len();
    let mut objective = vec![0.0; 2 * k];
    objective[k..].iter_mut().for_each(|v| *v = 1.0);
    let mut lp = LinearProgram::new(objective);
    let mut budget = vec![0.0; 2 * k];
    budget[..k].copy_from_slice(weights);
    lp.add(budget, Relation::Le, 0.5);
    for (j, s) in affine.iter().enumerate() {
        let mut row = vec![0.0; 2 * k];
        row[j] = s.b.max(0.0);
        row[k + j] = 1.0;
        lp.add(row, Relation::Ge, s.a);
        lp.bound(j, upper[j]);
    }
    let sol = lp.solve()?;
    let theta: Vec<f64> = sol.x[..k].to_vec();
    let optimum: f64 = affine
        .iter()
        .zip(&theta)
        .map(|(s, &t)| s.at(t).max(0.0))
        .sum();
    let point = theta_point(theta, upper, weights);
    Ok(CombinedRisk {
        p_fisher: chi2_even_df_survival(2.0 * optimum, k),
        p_intersection: intersection_pvalue(
            &affine.iter().zip(&point.theta).map(|(s, &t)| s.at(t)).collect::<Vec<_>>(),
        ),
        argmax_fisher: Some(point),
        argmax_intersection: None,
        per_point: None,
    })
}
