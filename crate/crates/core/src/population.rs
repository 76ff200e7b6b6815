//! Stratified ballot-card populations.
//!
//! Each stratum is an urn of `(value, count)` categories rather than a
//! materialized list, so populations with millions of cards stay small.
//! Every stratum owns a ChaCha substream keyed by `(seed, stratum index)`;
//! the order in which strata are visited never perturbs another stratum's
//! draw sequence.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// Sampling scheme used within every stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    With,
    #[default]
    Without,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub value: f64,
    pub count: u64,
}

/// One stratum: an urn of bounded assorter values.
#[derive(Debug, Clone)]
pub struct Stratum {
    id: usize,
    size: u64,
    upper_bound: f64,
    urn: Vec<Category>,
    remaining: u64,
    drawn: u64,
    running_sum: f64,
    total_value: f64,
}

impl Stratum {
    /// Builds a stratum from its categories. `id` is zero-based.
    pub fn new(id: usize, upper_bound: f64, categories: Vec<Category>) -> Result<Self> {
        if !(upper_bound > 0.0 && upper_bound.is_finite()) {
            return Err(AuditError::Config(format!(
                "stratum {}: upper bound must be positive, got {upper_bound}",
                id + 1
            )));
        }
        let mut urn: Vec<Category> = Vec::with_capacity(categories.len());
        for cat in categories {
            if !(0.0..=upper_bound).contains(&cat.value) {
                return Err(AuditError::Domain(format!(
                    "stratum {}: value {} outside [0, {upper_bound}]",
                    id + 1,
                    cat.value
                )));
            }
            if cat.count == 0 {
                continue;
            }
            match urn.iter_mut().find(|c| c.value == cat.value) {
                Some(existing) => existing.count += cat.count,
                None => urn.push(cat),
            }
        }
        let size: u64 = urn.iter().map(|c| c.count).sum();
        let total_value = urn.iter().map(|c| c.value * c.count as f64).sum();
        if size == 0 {
            return Err(AuditError::Config(format!("stratum {} is empty", id + 1)));
        }
        Ok(Stratum {
            id,
            size,
            upper_bound,
            urn,
            remaining: size,
            drawn: 0,
            running_sum: 0.0,
            total_value,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn upper_bound(&self) -> f64 {
        self.upper_bound
    }

    pub fn drawn(&self) -> u64 {
        self.drawn
    }

    pub fn running_sum(&self) -> f64 {
        self.running_sum
    }

    /// Categories still in the urn (counts reflect removals without replacement).
    pub fn urn(&self) -> &[Category] {
        &self.urn
    }

    /// Mean of the full stratum, before any draws.
    pub fn initial_mean(&self) -> f64 {
        self.total_value / self.size as f64
    }

    pub fn exhausted(&self, replacement: Replacement) -> bool {
        match replacement {
            Replacement::With => false,
            Replacement::Without => self.drawn >= self.size,
        }
    }

    /// Draws one value with probability proportional to the remaining counts.
    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R, replacement: Replacement) -> Result<f64> {
        if self.exhausted(replacement) {
            return Err(AuditError::Exhausted { stratum: self.id + 1 });
        }
        let total = match replacement {
            Replacement::With => self.size,
            Replacement::Without => self.remaining,
        };
        let mut pick = rng.random_range(0..total);
        let mut chosen = self.urn.len() - 1;
        for (i, cat) in self.urn.iter().enumerate() {
            if pick < cat.count {
                chosen = i;
                break;
            }
            pick -= cat.count;
        }
        let value = self.urn[chosen].value;
        if replacement == Replacement::Without {
            self.urn[chosen].count -= 1;
            self.remaining -= 1;
        }
        self.drawn += 1;
        self.running_sum += value;
        Ok(value)
    }
}

/// K strata plus the sampling scheme and per-stratum random substreams.
#[derive(Debug, Clone)]
pub struct StratifiedPopulation {
    strata: Vec<Stratum>,
    replacement: Replacement,
    rngs: Vec<ChaCha8Rng>,
}

impl StratifiedPopulation {
    pub fn new(strata: Vec<Stratum>, replacement: Replacement, seed: u64) -> Result<Self> {
        if strata.is_empty() {
            return Err(AuditError::Config("population has no strata".into()));
        }
        let rngs = (0..strata.len())
            .map(|k| stratum_rng(seed, k))
            .collect();
        Ok(StratifiedPopulation {
            strata,
            replacement,
            rngs,
        })
    }

    /// Re-keys every stratum substream; counts are left untouched.
    pub fn reseed(&mut self, seed: u64) {
        for (k, rng) in self.rngs.iter_mut().enumerate() {
            *rng = stratum_rng(seed, k);
        }
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn stratum(&self, k: usize) -> &Stratum {
        &self.strata[k]
    }

    pub fn len(&self) -> usize {
        self.strata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strata.is_empty()
    }

    pub fn replacement(&self) -> Replacement {
        self.replacement
    }

    pub fn sizes(&self) -> Vec<u64> {
        self.strata.iter().map(Stratum::size).collect()
    }

    pub fn total_size(&self) -> u64 {
        self.strata.iter().map(Stratum::size).sum()
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        stratum_weights(&self.sizes())
    }

    pub fn exhausted(&self, k: usize) -> bool {
        self.strata[k].exhausted(self.replacement)
    }

    pub fn draw(&mut self, k: usize) -> Result<f64> {
        let stratum = self
            .strata
            .get_mut(k)
            .ok_or_else(|| AuditError::Contract(format!("no stratum {}", k + 1)))?;
        stratum.draw(&mut self.rngs[k], self.replacement)
    }
}

/// `w_k = N_k / N`.
pub fn stratum_weights(sizes: &[u64]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(AuditError::Config("no strata".into()));
    }
    if let Some(k) = sizes.iter().position(|&n| n == 0) {
        return Err(AuditError::Config(format!("stratum {} is empty", k + 1)));
    }
    let total: u64 = sizes.iter().sum();
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

fn stratum_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Mixes a master seed with a path of identifiers (SplitMix64 finalizer).
/// Used to derive independent seeds for replications and cells.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut state = master;
    for &p in path {
        state = mix64(state ^ mix64(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    mix64(state)
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
