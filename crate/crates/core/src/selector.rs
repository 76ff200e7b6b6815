//! Predictable stratum selection and the interleaving of per-stratum terms
//! into one intersection supermartingale per null.

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::martingale::StratumPanel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectorRule {
    /// Round robin in proportion to stratum size.
    #[default]
    Proportional,
    /// Round robin that stops feeding a stratum to a null once a
    /// lower-sided test finds the stratum mean is below the null's mean,
    /// so further cards from it could only weaken the evidence.
    LowerSided,
}

impl SelectorRule {
    pub fn label(self) -> &'static str {
        match self {
            SelectorRule::Proportional => "Proportional",
            SelectorRule::LowerSided => "Lower-sided test",
        }
    }
}

impl std::str::FromStr for SelectorRule {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "proportional" | "prop" => Ok(SelectorRule::Proportional),
            "lowersided" | "lower" | "lowersidedtest" => Ok(SelectorRule::LowerSided),
            _ => Err(AuditError::Config(format!("unknown selector `{s}`"))),
        }
    }
}

/// `argmin_k counts_k / N_k` over non-exhausted strata, lowest index on ties.
/// Returns `None` when every stratum is exhausted.
pub fn next_stratum_proportional(counts: &[u64], sizes: &[u64], exhausted: &[bool]) -> Option<usize> {
    next_stratum_among(counts, sizes, exhausted, None)
}

/// Proportional choice restricted to `allowed` strata.
pub fn next_stratum_among(
    counts: &[u64],
    sizes: &[u64],
    exhausted: &[bool],
    allowed: Option<&[bool]>,
) -> Option<usize> {
    let mut best: Option<(usize, u64, u64)> = None;
    for k in 0..counts.len() {
        if exhausted[k] || allowed.is_some_and(|a| !a[k]) {
            continue;
        }
        // Compare counts_k / N_k exactly via cross-multiplication.
        let better = match best {
            None => true,
            Some((_, c, n)) => (counts[k] as u128) * (n as u128) < (c as u128) * (sizes[k] as u128),
        };
        if better {
            best = Some((k, counts[k], sizes[k]));
        }
    }
    best.map(|(k, _, _)| k)
}

/// Masks every null of `upper` whose lower-sided test has rejected at `level`.
/// Returns the number of nulls newly masked.
pub fn apply_lower_sided_masks(upper: &mut StratumPanel, lower: &StratumPanel, level: f64) -> usize {
    let threshold = (1.0 / level).ln();
    let mut newly = 0;
    for (j, &lm) in lower.log_m().iter().enumerate() {
        if lm >= threshold && !upper.is_masked(j) {
            upper.mask(j);
            newly += 1;
        }
    }
    newly
}

/// Log trajectory of the interleaved product for one null.
///
/// `terms[k]` holds the log terms of stratum `k` in draw order, `history`
/// the stratum chosen at each step, and `masks[k] = Some(n)` replaces every
/// stratum-`k` term after its `n`-th by 1.
pub fn interleave(terms: &[Vec<f64>], history: &[usize], masks: &[Option<usize>]) -> Result<Vec<f64>> {
    if masks.len() != terms.len() {
        return Err(AuditError::Contract("one mask per stratum".into()));
    }
    let mut nu = vec![0usize; terms.len()];
    let mut log_m = 0.0;
    let mut out = Vec::with_capacity(history.len());
    for (t, &k) in history.iter().enumerate() {
        let stream = terms.get(k).ok_or_else(|| {
            AuditError::Contract(format!("step {}: no stratum {}", t + 1, k + 1))
        })?;
        let term = *stream.get(nu[k]).ok_or_else(|| {
            AuditError::Contract(format!(
                "step {}: stratum {} has only {} terms",
                t + 1,
                k + 1,
                stream.len()
            ))
        })?;
        nu[k] += 1;
        let masked = masks[k].is_some_and(|n| nu[k] > n);
        if !masked {
            log_m += term;
        }
        out.push(log_m);
    }
    Ok(out)
}

/// Cards retrieved per stratum, and how many of them some live null used.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub consumed: Vec<u64>,
    pub consumed_total: u64,
    pub physical: Vec<u64>,
    pub physical_total: u64,
}

impl Workload {
    pub fn new(consumed: Vec<u64>, physical: Vec<u64>) -> Self {
        Workload {
            consumed_total: consumed.iter().sum(),
            physical_total: physical.iter().sum(),
            consumed,
            physical,
        }
    }
}
