//! Within-stratum test supermartingales: ALPHA with shrink-truncate or
//! upward-biased bets, and the empirical Bernstein (EB) supermartingale.
//!
//! Bets are computed from [`RunningStats`] before a draw is observed, then
//! applied to every null mean in a [`StratumPanel`]. ALPHA works on the
//! native `[0, u]` scale; EB rescales to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::population::Replacement;

/// Machine precision used to keep ALPHA bets strictly below the upper bound.
pub const MACHINE_DELTA: f64 = 2.220446e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AlphaSt,
    AlphaUb,
    Eb,
}

impl Method {
    pub fn is_alpha(self) -> bool {
        matches!(self, Method::AlphaSt | Method::AlphaUb)
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::AlphaSt => "ALPHA-ST",
            Method::AlphaUb => "ALPHA-UB",
            Method::Eb => "EB",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "alphast" | "st" => Ok(Method::AlphaSt),
            "alphaub" | "ub" => Ok(Method::AlphaUb),
            "eb" => Ok(Method::Eb),
            _ => Err(AuditError::Config(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    #[default]
    Upper,
    /// Tests `mean >= theta` by reflecting values and null about `u / 2`.
    Lower,
}

/// Numerator of the EB predictable-mixture bet: `ln(1/alpha)` or `ln(2/alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaForm {
    #[default]
    OneSided,
    TwoSided,
}

/// Which spread statistic scales the ALPHA-UB upward bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UbScale {
    /// Weight `f / sigma_hat`.
    #[default]
    StdDev,
    /// Weight `f / sigma_hat^2`.
    Variance,
}

/// Tuning parameters for one stratum's supermartingale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    /// Shrinkage weight `d`.
    pub d: f64,
    /// Initial bet estimate; `None` uses the test-scale upper bound.
    pub tau0: Option<f64>,
    /// ALPHA-UB upward-bias weight.
    pub f: f64,
    pub ub_scale: UbScale,
    /// EB bet cap.
    pub lambda_max: f64,
    /// Minimum assorter increment; `None` uses `1 / (2 N)`.
    pub eps: Option<f64>,
    pub delta: f64,
    /// Lower clamp on the running variance (on the `[0, 1]` scale).
    pub variance_floor: f64,
    /// Risk level inside the EB mixture bet; `None` means 0.05, and the
    /// audit engine substitutes its risk limit.
    pub alpha_for_lambda: Option<f64>,
    pub lambda_form: LambdaForm,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            d: 20.0,
            tau0: None,
            f: 0.01,
            ub_scale: UbScale::StdDev,
            lambda_max: 0.75,
            eps: None,
            delta: MACHINE_DELTA,
            variance_floor: 0.0,
            alpha_for_lambda: None,
            lambda_form: LambdaForm::OneSided,
        }
    }
}

impl MethodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.lambda_max) {
            return Err(AuditError::Config(format!(
                "lambda_max must lie in [0, 1), got {}",
                self.lambda_max
            )));
        }
        if !(self.d >= 0.0 && self.d.is_finite()) {
            return Err(AuditError::Config(format!("d must be >= 0, got {}", self.d)));
        }
        if !(self.f >= 0.0 && self.f.is_finite()) {
            return Err(AuditError::Config(format!("f must be >= 0, got {}", self.f)));
        }
        if let Some(a) = self.alpha_for_lambda {
            if !(a > 0.0 && a < 1.0) {
                return Err(AuditError::Config("alpha_for_lambda must lie in (0, 1)".into()));
            }
        }
        if let Some(eps) = self.eps {
            if !(eps > 0.0) {
                return Err(AuditError::Config("eps must be positive".into()));
            }
        }
        if self.variance_floor < 0.0 {
            return Err(AuditError::Config("variance_floor must be >= 0".into()));
        }
        Ok(())
    }

    pub fn eps_for(&self, size: u64) -> f64 {
        self.eps.unwrap_or(1.0 / (2.0 * size as f64))
    }

    pub fn tau0_for(&self, u: f64) -> f64 {
        self.tau0.unwrap_or(u)
    }

    pub fn lambda_alpha(&self) -> f64 {
        self.alpha_for_lambda.unwrap_or(0.05)
    }
}

/// `(N beta - S) / (N - (i - 1))`: the null mean of the cards not yet drawn.
pub fn conditional_null_mean(beta: f64, size: u64, sum_prior: f64, i: u64) -> Result<f64> {
    if i == 0 {
        return Err(AuditError::Contract("draw index starts at 1".into()));
    }
    if i > size {
        return Err(AuditError::Exhausted { stratum: 0 });
    }
    Ok(cond_mean(beta, size as f64, sum_prior, i))
}

#[inline]
fn cond_mean(beta: f64, n: f64, sum_prior: f64, i: u64) -> f64 {
    (n * beta - sum_prior) / (n - (i - 1) as f64)
}

/// ALPHA multiplier `(x tau / mu + (u - x)(u - tau)/(u - mu)) / u`.
#[inline]
pub fn alpha_term(x: f64, mu: f64, tau: f64, u: f64) -> f64 {
    (x * tau / mu + (u - x) * (u - tau) / (u - mu)) / u
}

/// Shrink-truncate estimate before truncation: `(d tau0 + S) / (d + t)`.
pub fn shrink_estimate(d: f64, tau0: f64, sum_x: f64, t: u64) -> f64 {
    if d + t as f64 == 0.0 {
        return tau0;
    }
    (d * tau0 + sum_x) / (d + t as f64)
}

/// Pulls `shrink` toward `u`: `(shrink + f u / s) / (1 + f / s)`.
pub fn upward_bias(shrink: f64, f: f64, u: f64, s: f64) -> f64 {
    if f == 0.0 || s.is_infinite() {
        return shrink;
    }
    let w = f / s;
    (shrink + w * u) / (1.0 + w)
}

/// Truncates a raw bet into `[mu + eps, u (1 - delta)]`.
#[inline]
pub fn truncate_bet(raw: f64, mu: f64, eps: f64, u: f64, delta: f64) -> f64 {
    raw.max(mu + eps).min(u * (1.0 - delta))
}

/// `(-ln(1 - lambda) - lambda) / 4`.
pub fn psi_e(lambda: f64) -> f64 {
    (-(-lambda).ln_1p() - lambda) / 4.0
}

/// EB log multiplier on the `[0, 1]` scale:
/// `lambda (x - mu) - 4 (x - mu_hat_prev)^2 psi_E(lambda)`.
pub fn eb_log_term(x: f64, mu: f64, lambda: f64, mu_hat_prev: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(AuditError::Domain(format!(
            "EB bet {lambda} outside [0, 1)"
        )));
    }
    Ok(eb_term_unchecked(x, mu, lambda, eb_penalty(x, lambda, mu_hat_prev)))
}

#[inline]
fn eb_penalty(x: f64, lambda: f64, mu_hat_prev: f64) -> f64 {
    let v = x - mu_hat_prev;
    v * v * 4.0 * psi_e(lambda)
}

#[inline]
fn eb_term_unchecked(x: f64, mu: f64, lambda: f64, penalty: f64) -> f64 {
    lambda * (x - mu) - penalty
}

/// Predictable-mixture EB bet for draw `t` (1-based), given the running
/// variance after `t - 1` draws.
pub fn eb_lambda(sigma2_prev: f64, t: u64, cfg: &MethodConfig) -> f64 {
    if cfg.lambda_max <= 0.0 {
        return 0.0;
    }
    let numerator = match cfg.lambda_form {
        LambdaForm::OneSided => 2.0 * (1.0 / cfg.lambda_alpha()).ln(),
        LambdaForm::TwoSided => 2.0 * (2.0 / cfg.lambda_alpha()).ln(),
    };
    let t = t as f64;
    let raw = (numerator / (sigma2_prev * t * (1.0 + t).ln())).sqrt();
    if raw.is_nan() {
        return cfg.lambda_max;
    }
    raw.clamp(0.0, cfg.lambda_max)
}

/// Data-only running quantities shared by every null in a stratum.
///
/// The variance estimate is `(1/4 + sum (x_j - mu_hat_{j-1})^2) / (t + 1)`
/// with `mu_hat_t = (1/2 + sum x_j) / (t + 1)`, both on the `[0, 1]` scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub u: f64,
    pub t: u64,
    /// Sum of native-scale values.
    pub sum_x: f64,
    pub mu_hat: f64,
    pub sum_sq_dev: f64,
}

impl RunningStats {
    pub fn new(u: f64) -> Self {
        RunningStats {
            u,
            t: 0,
            sum_x: 0.0,
            mu_hat: 0.5,
            sum_sq_dev: 0.0,
        }
    }

    pub fn sigma2(&self) -> f64 {
        (0.25 + self.sum_sq_dev) / (self.t as f64 + 1.0)
    }

    pub fn push(&mut self, x: f64) {
        let xs = x / self.u;
        let dev = xs - self.mu_hat;
        self.sum_sq_dev += dev * dev;
        self.sum_x += x;
        self.t += 1;
        self.mu_hat = (0.5 + self.sum_x / self.u) / (self.t as f64 + 1.0);
    }
}

/// The bet for the next draw, fixed before the draw is seen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bet {
    /// Untruncated ALPHA estimate `tau` on the native scale.
    Alpha { raw_tau: f64 },
    /// EB bet and the previous mean estimate on the `[0, 1]` scale.
    Eb { lambda: f64, mu_hat_prev: f64 },
}

/// Computes the predictable bet from the stats before the next draw.
pub fn plan_bet(method: Method, cfg: &MethodConfig, stats: &RunningStats) -> Bet {
    let u = stats.u;
    match method {
        Method::AlphaSt => Bet::Alpha {
            raw_tau: shrink_estimate(cfg.d, cfg.tau0_for(u), stats.sum_x, stats.t),
        },
        Method::AlphaUb => {
            let shrink = shrink_estimate(cfg.d, cfg.tau0_for(u), stats.sum_x, stats.t);
            let var = stats.sigma2().max(cfg.variance_floor);
            let s = match cfg.ub_scale {
                UbScale::StdDev => var.sqrt(),
                UbScale::Variance => var,
            };
            Bet::Alpha {
                raw_tau: upward_bias(shrink, cfg.f, u, s),
            }
        }
        Method::Eb => Bet::Eb {
            lambda: eb_lambda(stats.sigma2(), stats.t + 1, cfg),
            mu_hat_prev: stats.mu_hat,
        },
    }
}

/// Effect of one draw on one null.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    Log(f64),
    /// The null is certainly true for the remaining cards: multiplier 1.
    One,
    /// The null is impossible given the data: P-value 0 from here on.
    CertainReject,
}

/// Per-stratum constants needed to evaluate terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermContext {
    pub u: f64,
    pub size: f64,
    pub eps: f64,
    pub delta: f64,
    pub replacement: Replacement,
}

impl TermContext {
    /// Null mean in force for draw `i` (1-based) given `sum_prior`.
    #[inline]
    pub fn null_mean(&self, beta: f64, sum_prior: f64, i: u64) -> f64 {
        match self.replacement {
            Replacement::With => beta,
            Replacement::Without => cond_mean(beta, self.size, sum_prior, i),
        }
    }

    /// Fixes everything about a draw that does not depend on the null.
    #[inline]
    pub fn prepare(&self, bet: Bet, x: f64) -> Prepared {
        match bet {
            Bet::Alpha { raw_tau } => Prepared::Alpha { raw_tau, x },
            Bet::Eb {
                lambda,
                mu_hat_prev,
            } => {
                let xs = x / self.u;
                Prepared::Eb {
                    lambda_over_u: lambda / self.u,
                    base: lambda * xs - eb_penalty(xs, lambda, mu_hat_prev),
                }
            }
        }
    }

    /// Term against null mean `beta`. ALPHA applies the degenerate-null
    /// rules; EB terms stay affine in `beta`.
    #[inline]
    pub fn term_prepared(&self, prep: Prepared, beta: f64, sum_prior: f64, i: u64) -> Term {
        let mu = self.null_mean(beta, sum_prior, i);
        match prep {
            Prepared::Alpha { raw_tau, x } => {
                if mu + self.eps >= self.u {
                    return Term::One;
                }
                if mu < 0.0 || (mu <= 0.0 && x > 0.0) {
                    return Term::CertainReject;
                }
                if mu <= 0.0 {
                    return Term::One;
                }
                let tau = truncate_bet(raw_tau, mu, self.eps, self.u, self.delta);
                Term::Log(alpha_term(x, mu, tau, self.u).ln())
            }
            Prepared::Eb {
                lambda_over_u,
                base,
            } => Term::Log(base - lambda_over_u * mu),
        }
    }

    /// Term for value `x` against null mean `beta`.
    pub fn term(&self, bet: Bet, x: f64, beta: f64, sum_prior: f64, i: u64) -> Term {
        self.term_prepared(self.prepare(bet, x), beta, sum_prior, i)
    }
}

/// A bet combined with the observed value, ready to score any null.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prepared {
    Alpha { raw_tau: f64, x: f64 },
    Eb { lambda_over_u: f64, base: f64 },
}

/// Running test supermartingale for a single null and side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleState {
    pub method: Method,
    pub side: Side,
    pub config: MethodConfig,
    pub upper_bound: f64,
    pub size: u64,
    pub replacement: Replacement,
    /// Null mean on the upper-side test scale.
    pub null_mean_base: f64,
    /// Stats of the values actually fed to the test (reflected when lower).
    pub stats: RunningStats,
    pub log_m: f64,
    pub frozen: bool,
    pub certain_reject: bool,
}

impl MartingaleState {
    pub fn new(
        method: Method,
        side: Side,
        config: MethodConfig,
        upper_bound: f64,
        size: u64,
        replacement: Replacement,
        beta: f64,
    ) -> Result<Self> {
        config.validate()?;
        if !(upper_bound > 0.0 && upper_bound.is_finite()) {
            return Err(AuditError::Domain("upper bound must be positive".into()));
        }
        if size == 0 {
            return Err(AuditError::Config("stratum size must be positive".into()));
        }
        Ok(MartingaleState {
            method,
            side,
            config,
            upper_bound,
            size,
            replacement,
            null_mean_base: beta,
            stats: RunningStats::new(upper_bound),
            log_m: 0.0,
            frozen: false,
            certain_reject: false,
        })
    }

    pub fn t(&self) -> u64 {
        self.stats.t
    }

    fn context(&self) -> TermContext {
        TermContext {
            u: self.upper_bound,
            size: self.size as f64,
            eps: self.config.eps_for(self.size),
            delta: self.config.delta,
            replacement: self.replacement,
        }
    }

    fn test_beta(&self) -> f64 {
        match self.side {
            Side::Upper => self.null_mean_base,
            Side::Lower => self.upper_bound - self.null_mean_base,
        }
    }

    /// Bet for the next draw, computed from the current state only.
    pub fn next_bet(&self) -> Bet {
        plan_bet(self.method, &self.config, &self.stats)
    }

    /// Conditional null mean the next term will be measured against.
    pub fn next_null_mean(&self) -> f64 {
        self.context()
            .null_mean(self.test_beta(), self.stats.sum_x, self.stats.t + 1)
    }

    /// Feeds one draw `x` (native, unreflected scale).
    pub fn update(&mut self, x: f64) -> Result<()> {
        if !(0.0..=self.upper_bound).contains(&x) {
            return Err(AuditError::Domain(format!(
                "value {x} outside [0, {}]",
                self.upper_bound
            )));
        }
        if self.replacement == Replacement::Without && self.stats.t >= self.size {
            return Err(AuditError::Exhausted { stratum: 0 });
        }
        let x = match self.side {
            Side::Upper => x,
            Side::Lower => self.upper_bound - x,
        };
        if !(self.frozen || self.certain_reject) {
            let bet = self.next_bet();
            let term = self.context().term(
                bet,
                x,
                self.test_beta(),
                self.stats.sum_x,
                self.stats.t + 1,
            );
            match term {
                Term::Log(l) => self.log_m += l,
                Term::One => {}
                Term::CertainReject => {
                    self.certain_reject = true;
                    self.log_m = f64::INFINITY;
                }
            }
        }
        self.stats.push(x);
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Anytime P-value `min(1, 1 / M_t)`.
    pub fn p_value(&self) -> f64 {
        (-self.log_m).exp().min(1.0)
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value() <= alpha
    }
}

/// One stratum's supermartingales for many nulls sharing the same draws.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumPanel {
    method: Method,
    config: MethodConfig,
    ctx: TermContext,
    side: Side,
    stats: RunningStats,
    /// Test-side null means (already reflected for the lower side).
    betas: Vec<f64>,
    log_m: Vec<f64>,
    masked: Vec<bool>,
}

impl StratumPanel {
    /// `betas` are upper-side null means on the test scale.
    pub fn new(
        method: Method,
        config: MethodConfig,
        upper_bound: f64,
        size: u64,
        replacement: Replacement,
        side: Side,
        betas: &[f64],
    ) -> Result<Self> {
        config.validate()?;
        let ctx = TermContext {
            u: upper_bound,
            size: size as f64,
            eps: config.eps_for(size),
            delta: config.delta,
            replacement,
        };
        let betas: Vec<f64> = match side {
            Side::Upper => betas.to_vec(),
            Side::Lower => betas.iter().map(|b| upper_bound - b).collect(),
        };
        let g = betas.len();
        Ok(StratumPanel {
            method,
            config,
            ctx,
            side,
            stats: RunningStats::new(upper_bound),
            betas,
            log_m: vec![0.0; g],
            masked: vec![false; g],
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn stats(&self) -> &RunningStats {
        &self.stats
    }

    pub fn log_m(&self) -> &[f64] {
        &self.log_m
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn is_masked(&self, null: usize) -> bool {
        self.masked[null]
    }

    /// Replaces every future term of `null` with 1.
    pub fn mask(&mut self, null: usize) {
        self.masked[null] = true;
    }

    pub fn next_bet(&self) -> Bet {
        plan_bet(self.method, &self.config, &self.stats)
    }

    /// Feeds one native-scale draw to every unmasked null.
    pub fn update(&mut self, x: f64) {
        let x = match self.side {
            Side::Upper => x,
            Side::Lower => self.ctx.u - x,
        };
        let bet = self.next_bet();
        let i = self.stats.t + 1;
        let sum_prior = self.stats.sum_x;
        let ctx = self.ctx;
        let prep = ctx.prepare(bet, x);
        for ((lm, &beta), &masked) in self
            .log_m
            .iter_mut()
            .zip(&self.betas)
            .zip(&self.masked)
        {
            if masked || *lm == f64::INFINITY {
                continue;
            }
            match ctx.term_prepared(prep, beta, sum_prior, i) {
                Term::Log(l) => *lm += l,
                Term::One => {}
                Term::CertainReject => *lm = f64::INFINITY,
            }
        }
        self.stats.push(x);
    }
}

/// EB log value as an affine function of the null mean:
/// `log M(beta) = a0 - a1 * beta / u`, valid while nothing is masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbAccumulator {
    pub config: MethodConfig,
    pub upper_bound: f64,
    pub size: u64,
    pub replacement: Replacement,
    pub stats: RunningStats,
    pub a0: f64,
    pub a1: f64,
}

impl EbAccumulator {
    pub fn new(config: MethodConfig, upper_bound: f64, size: u64, replacement: Replacement) -> Result<Self> {
        config.validate()?;
        Ok(EbAccumulator {
            config,
            upper_bound,
            size,
            replacement,
            stats: RunningStats::new(upper_bound),
            a0: 0.0,
            a1: 0.0,
        })
    }

    pub fn t(&self) -> u64 {
        self.stats.t
    }

    pub fn update(&mut self, x: f64) -> Result<()> {
        if self.replacement == Replacement::Without && self.stats.t >= self.size {
            return Err(AuditError::Exhausted { stratum: 0 });
        }
        let Bet::Eb {
            lambda,
            mu_hat_prev,
        } = plan_bet(Method::Eb, &self.config, &self.stats)
        else {
            unreachable!("EB plan always yields an EB bet")
        };
        let u = self.upper_bound;
        let xs = x / u;
        let penalty = eb_penalty(xs, lambda, mu_hat_prev);
        match self.replacement {
            Replacement::With => {
                self.a0 += lambda * xs - penalty;
                self.a1 += lambda;
            }
            Replacement::Without => {
                let remaining = self.size as f64 - self.stats.t as f64;
                let s_scaled = self.stats.sum_x / u;
                self.a0 += lambda * xs - penalty + lambda * s_scaled / remaining;
                self.a1 += lambda * self.size as f64 / remaining;
            }
        }
        self.stats.push(x);
        Ok(())
    }

    /// `log M` at test-scale null mean `beta`.
    pub fn log_value(&self, beta: f64) -> f64 {
        self.a0 - self.a1 * beta / self.upper_bound
    }
}
