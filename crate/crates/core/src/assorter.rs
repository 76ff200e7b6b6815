//! Plurality and overstatement assorters, and the translation of
//! hypothesized stratum means into comparison-audit null means.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// How a card's vote relates to the reported winner/loser pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Winner,
    Loser,
    /// Blank, invalid, or a vote for any other candidate.
    Other,
}

impl FromStr for Vote {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "winner" | "w" => Ok(Vote::Winner),
            "loser" | "l" => Ok(Vote::Loser),
            "other" | "o" | "blank" | "invalid" => Ok(Vote::Other),
            other => Err(AuditError::Domain(format!("unknown vote `{other}`"))),
        }
    }
}

impl fmt::Display for Vote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Vote::Winner => "winner",
            Vote::Loser => "loser",
            Vote::Other => "other",
        })
    }
}

/// Two-candidate plurality assorter; its upper bound is 1.
pub fn plurality_assorter(vote: Vote) -> f64 {
    match vote {
        Vote::Winner => 1.0,
        Vote::Loser => 0.0,
        Vote::Other => 0.5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    Polling,
    Comparison,
}

/// Assorter description for one stratum.
///
/// For comparison strata the test statistic is the overstatement assorter
/// `B = u^A - omega`, bounded by `2 u^A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssorterSpec {
    pub kind: AuditKind,
    pub upper_bound_original: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_mean: Option<f64>,
}

impl AssorterSpec {
    pub fn polling(upper_bound: f64) -> Result<Self> {
        check_bound(upper_bound)?;
        Ok(AssorterSpec {
            kind: AuditKind::Polling,
            upper_bound_original: upper_bound,
            reported_mean: None,
        })
    }

    pub fn comparison(upper_bound: f64, reported_mean: f64) -> Result<Self> {
        check_bound(upper_bound)?;
        if !(0.0..=upper_bound).contains(&reported_mean) {
            return Err(AuditError::Domain(format!(
                "reported mean {reported_mean} outside [0, {upper_bound}]"
            )));
        }
        Ok(AssorterSpec {
            kind: AuditKind::Comparison,
            upper_bound_original: upper_bound,
            reported_mean: Some(reported_mean),
        })
    }

    /// Plurality comparison stratum described by its reported diluted margin.
    pub fn comparison_from_margin(margin: f64) -> Result<Self> {
        AssorterSpec::comparison(1.0, reported_mean_from_margin(margin)?)
    }

    /// Upper bound of the values actually fed to the test.
    pub fn upper_bound_test(&self) -> f64 {
        match self.kind {
            AuditKind::Polling => self.upper_bound_original,
            AuditKind::Comparison => 2.0 * self.upper_bound_original,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bound(self.upper_bound_original)?;
        match (self.kind, self.reported_mean) {
            (AuditKind::Polling, None) => Ok(()),
            (AuditKind::Polling, Some(_)) => Err(AuditError::Config(
                "polling strata take no reported mean".into(),
            )),
            (AuditKind::Comparison, None) => Err(AuditError::Config(
                "comparison strata need a reported mean".into(),
            )),
            (AuditKind::Comparison, Some(m)) if !(0.0..=self.upper_bound_original).contains(&m) => {
                Err(AuditError::Domain(format!("reported mean {m} out of range")))
            }
            _ => Ok(()),
        }
    }

    /// Test-scale null mean for a hypothesized original-scale stratum mean.
    /// Polling strata use theta unchanged.
    pub fn null_mean(&self, theta: f64) -> f64 {
        match (self.kind, self.reported_mean) {
            (AuditKind::Comparison, Some(reported)) => {
                theta + self.upper_bound_original - reported
            }
            _ => theta,
        }
    }

    /// Value fed to the test for one audited card. `cvr` is required for
    /// comparison strata and ignored for polling strata.
    pub fn test_value(&self, card_value: f64, cvr_value: Option<f64>) -> Result<f64> {
        match self.kind {
            AuditKind::Polling => {
                if !(0.0..=self.upper_bound_original).contains(&card_value) {
                    return Err(AuditError::Domain(format!(
                        "assorter value {card_value} outside [0, {}]",
                        self.upper_bound_original
                    )));
                }
                Ok(card_value)
            }
            AuditKind::Comparison => {
                let cvr = cvr_value.ok_or_else(|| {
                    AuditError::Contract("comparison stratum requires a CVR value".into())
                })?;
                Ok(overstatement_assorter(cvr, card_value, self.upper_bound_original)?.b_value)
            }
        }
    }
}

fn check_bound(u: f64) -> Result<()> {
    if u > 0.0 && u.is_finite() {
        Ok(())
    } else {
        Err(AuditError::Domain(format!(
            "assorter upper bound must be positive, got {u}"
        )))
    }
}

/// Reported plurality assorter mean for a diluted margin m: `(1 + m) / 2`.
pub fn reported_mean_from_margin(margin: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&margin) {
        return Err(AuditError::Domain(format!(
            "diluted margin {margin} outside [-1, 1]"
        )));
    }
    Ok((1.0 + margin) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverstatementRecord {
    pub cvr_value: f64,
    pub card_value: f64,
    pub omega: f64,
    pub b_value: f64,
}

/// `omega = A(cvr) - A(card)` and `B = u^A - omega`.
pub fn overstatement_assorter(
    cvr_value: f64,
    card_value: f64,
    upper_bound: f64,
) -> Result<OverstatementRecord> {
    check_bound(upper_bound)?;
    for (name, v) in [("cvr", cvr_value), ("card", card_value)] {
        if !(0.0..=upper_bound).contains(&v) {
            return Err(AuditError::Domain(format!(
                "{name} assorter value {v} outside [0, {upper_bound}]"
            )));
        }
    }
    let omega = cvr_value - card_value;
    Ok(OverstatementRecord {
        cvr_value,
        card_value,
        omega,
        b_value: upper_bound - omega,
    })
}

/// `beta_k = theta_k + u^A_k - reported_mean_k`; polling specs are refused.
pub fn comparison_null_mean(theta: f64, spec: &AssorterSpec) -> Result<f64> {
    if spec.kind != AuditKind::Comparison {
        return Err(AuditError::Contract(
            "comparison_null_mean called on a polling stratum".into(),
        ));
    }
    if !(0.0..=spec.upper_bound_original).contains(&theta) {
        return Err(AuditError::Domain(format!(
            "theta {theta} outside [0, {}]",
            spec.upper_bound_original
        )));
    }
    Ok(spec.null_mean(theta))
}
