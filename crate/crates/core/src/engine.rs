//! The sequential stratified audit: configuration, live session state,
//! card ingestion, stopping, snapshots and replay.

use serde::{Deserialize, Serialize};

use crate::assorter::{AssorterSpec, AuditKind};
use crate::combiner::{
    affine_from_accumulators, build_null_grid, lp_max_fisher_eb, lp_max_intersection_eb, max_p_over_grid,
    point_pvalue, CombinedRisk, CombinerKind, NullGrid, NullPoint,
};
use crate::error::{AuditError, Result};
use crate::martingale::{EbAccumulator, Method, MethodConfig, Side, StratumPanel};
use crate::population::{stratum_weights, Replacement, StratifiedPopulation};
use crate::selector::{apply_lower_sided_masks, next_stratum_among, SelectorRule, Workload};

/// Serialises zero-based stratum indices as one-based numbers.
pub(crate) mod one_based {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &usize, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(*k as u64 + 1)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
        let v = u64::deserialize(d)?;
        if v == 0 {
            return Err(serde::de::Error::custom("strata are numbered from 1"));
        }
        Ok(v as usize - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Maximizer {
    #[default]
    Grid,
    Lp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub size: u64,
    pub assorter: AssorterSpec,
    pub method: Method,
    #[serde(default)]
    pub method_config: MethodConfig,
    /// Reported assorter mean of a polling stratum. It only seeds the
    /// ALPHA prior estimate; it plays no part in the null.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polling_reported_mean: Option<f64>,
}

impl StratumConfig {
    pub fn new(size: u64, assorter: AssorterSpec, method: Method) -> Self {
        StratumConfig {
            name: None,
            size,
            assorter,
            method,
            method_config: MethodConfig::default(),
            polling_reported_mean: None,
        }
    }

    /// Method config with defaults that depend on the stratum filled in.
    pub fn resolved_method_config(&self, risk_limit: f64) -> MethodConfig {
        let mut cfg = self.method_config;
        if cfg.tau0.is_none() && self.assorter.kind == AuditKind::Polling {
            cfg.tau0 = self.polling_reported_mean;
        }
        if cfg.alpha_for_lambda.is_none() {
            cfg.alpha_for_lambda = Some(risk_limit);
        }
        cfg
    }
}

fn default_combiner() -> CombinerKind {
    CombinerKind::Intersection
}

fn default_lower_level() -> f64 {
    0.05
}

fn default_seed() -> u64 {
    20_240_101
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub risk_limit: f64,
    pub strata: Vec<StratumConfig>,
    /// Combiner whose P-value decides stopping; both are always tracked.
    #[serde(default = "default_combiner")]
    pub combiner: CombinerKind,
    #[serde(default)]
    pub selector: SelectorRule,
    /// Level of the lower-sided tests used by the lower-sided selector.
    #[serde(default = "default_lower_level")]
    pub lower_level: f64,
    #[serde(default)]
    pub maximizer: Maximizer,
    #[serde(default)]
    pub replacement: Replacement,
    /// Grid resolution; defaults to `2 max(N_1, N_2)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_size: Option<usize>,
    /// LP path: re-solve every this many cards (every card when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lp_checkpoint: Option<u64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl AuditConfig {
    pub fn new(risk_limit: f64, strata: Vec<StratumConfig>) -> Self {
        AuditConfig {
            risk_limit,
            strata,
            combiner: default_combiner(),
            selector: SelectorRule::Proportional,
            lower_level: default_lower_level(),
            maximizer: Maximizer::Grid,
            replacement: Replacement::Without,
            grid_size: None,
            lp_checkpoint: None,
            seed: default_seed(),
        }
    }

    pub fn sizes(&self) -> Vec<u64> {
        self.strata.iter().map(|s| s.size).collect()
    }

    pub fn specs(&self) -> Vec<AssorterSpec> {
        self.strata.iter().map(|s| s.assorter).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.risk_limit > 0.0 && self.risk_limit < 1.0) {
            return Err(AuditError::Config(format!(
                "risk limit must lie in (0, 1), got {}",
                self.risk_limit
            )));
        }
        if self.strata.is_empty() {
            return Err(AuditError::Config("at least one stratum is required".into()));
        }
        if !(self.lower_level > 0.0 && self.lower_level < 1.0) {
            return Err(AuditError::Config("lower_level must lie in (0, 1)".into()));
        }
        for (k, s) in self.strata.iter().enumerate() {
            if s.size == 0 {
                return Err(AuditError::Config(format!("stratum {} is empty", k + 1)));
            }
            s.assorter
                .validate()
                .map_err(|e| AuditError::Config(format!("stratum {}: {e}", k + 1)))?;
            s.method_config
                .validate()
                .map_err(|e| AuditError::Config(format!("stratum {}: {e}", k + 1)))?;
            if let Some(m) = s.polling_reported_mean {
                if s.assorter.kind != AuditKind::Polling || !(0.0..=s.assorter.upper_bound_original).contains(&m) {
                    return Err(AuditError::Config(format!(
                        "stratum {}: polling_reported_mean needs a polling stratum and a value in [0, u]",
                        k + 1
                    )));
                }
            }
        }
        match self.maximizer {
            Maximizer::Grid => {
                if self.strata.len() != 2 {
                    return Err(AuditError::Config(format!(
                        "grid maximiser needs exactly 2 strata, got {}",
                        self.strata.len()
                    )));
                }
                if self.grid_size == Some(0) {
                    return Err(AuditError::Config("grid_size must be positive".into()));
                }
            }
            Maximizer::Lp => {
                if let Some(k) = self.strata.iter().position(|s| s.method != Method::Eb) {
                    return Err(AuditError::Config(format!(
                        "LP maximiser needs EB in every stratum; stratum {} uses {}",
                        k + 1,
                        s_label(self.strata[k].method)
                    )));
                }
                if self.selector != SelectorRule::Proportional {
                    return Err(AuditError::Config(
                        "LP maximiser supports the proportional selector only".into(),
                    ));
                }
                if self.lp_checkpoint == Some(0) {
                    return Err(AuditError::Config("lp_checkpoint must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

fn s_label(m: Method) -> &'static str {
    m.label()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    /// The headline P-value reached the risk limit.
    Stopped,
    /// Every stratum was exhausted without stopping.
    Exhausted,
}

/// One audited card.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawRecord {
    #[serde(with = "one_based")]
    pub stratum: usize,
    /// Manual interpretation as an assorter value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mvr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cvr: Option<f64>,
    /// Value fed to the test (overstatement assorter for comparison strata).
    pub test_value: f64,
    /// Seconds since the Unix epoch, when recorded by a live session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub draw_index: u64,
    #[serde(with = "one_based")]
    pub stratum: usize,
    pub p_fisher: f64,
    pub p_intersection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    /// Zero-based stratum index.
    pub stratum: usize,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingRecord {
    pub stopped: bool,
    pub status: Status,
    pub workload: Workload,
    pub p_fisher: f64,
    pub p_intersection: f64,
}

#[derive(Debug, Clone)]
struct GridMode {
    grid: NullGrid,
    upper: Vec<StratumPanel>,
    lower: Option<Vec<StratumPanel>>,
    /// Per null: headline combined P-value still above the risk limit.
    live: Vec<bool>,
}

#[derive(Debug, Clone)]
struct LpMode {
    accs: Vec<EbAccumulator>,
    since_solve: u64,
}

#[derive(Debug, Clone)]
enum Mode {
    Grid(GridMode),
    Lp(LpMode),
}

/// Serializable session state: configuration, draw log and trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub config: AuditConfig,
    pub status: Status,
    pub draws: Vec<DrawRecord>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub p_fisher: f64,
    pub p_intersection: f64,
}

/// A live or simulated stratified audit.
#[derive(Debug, Clone)]
pub struct AuditSession {
    config: AuditConfig,
    specs: Vec<AssorterSpec>,
    sizes: Vec<u64>,
    weights: Vec<f64>,
    mode: Mode,
    counts: Vec<u64>,
    consumed: Vec<u64>,
    status: Status,
    draws: Vec<DrawRecord>,
    trajectory: Vec<TrajectoryPoint>,
    risk: CombinedRisk,
    record_log: bool,
}

impl AuditSession {
    pub fn new(config: AuditConfig) -> Result<Self> {
        config.validate()?;
        let specs = config.specs();
        let sizes = config.sizes();
        let weights = stratum_weights(&sizes)?;
        let alpha = config.risk_limit;
        let mode = match config.maximizer {
            Maximizer::Grid => {
                let g = config
                    .grid_size
                    .unwrap_or_else(|| 2 * *sizes.iter().max().expect("validated non-empty") as usize);
                let eps1 = config.strata[0].resolved_method_config(alpha).eps_for(sizes[0]);
                let grid = build_null_grid(&weights, &specs, eps1, g)?;
                let make = |side: Side| -> Result<Vec<StratumPanel>> {
                    config
                        .strata
                        .iter()
                        .enumerate()
                        .map(|(k, s)| {
                            StratumPanel::new(
                                s.method,
                                s.resolved_method_config(alpha),
                                s.assorter.upper_bound_test(),
                                s.size,
                                config.replacement,
                                side,
                                &grid.betas(k),
                            )
                        })
                        .collect()
                };
                let upper = make(Side::Upper)?;
                let lower = match config.selector {
                    SelectorRule::LowerSided => Some(make(Side::Lower)?),
                    SelectorRule::Proportional => None,
                };
                let live = vec![true; grid.len()];
                Mode::Grid(GridMode {
                    grid,
                    upper,
                    lower,
                    live,
                })
            }
            Maximizer::Lp => {
                let accs = config
                    .strata
                    .iter()
                    .map(|s| {
                        EbAccumulator::new(
                            s.resolved_method_config(alpha),
                            s.assorter.upper_bound_test(),
                            s.size,
                            config.replacement,
                        )
                    })
                    .collect::<Result<_>>()?;
                Mode::Lp(LpMode { accs, since_solve: 0 })
            }
        };
        let k = sizes.len();
        Ok(AuditSession {
            specs,
            weights,
            mode,
            counts: vec![0; k],
            consumed: vec![0; k],
            status: Status::Running,
            draws: Vec::new(),
            trajectory: Vec::new(),
            risk: CombinedRisk::unit(),
            record_log: true,
            sizes,
            config,
        })
    }

    /// Skips the draw log and trajectory (batch simulation).
    pub fn without_log(mut self) -> Self {
        self.record_log = false;
        self
    }

    pub fn config(&self) -> &AuditConfig {
        &self.config
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn risk(&self) -> &CombinedRisk {
        &self.risk
    }

    pub fn headline_p(&self) -> f64 {
        self.risk.p(self.config.combiner)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn draws(&self) -> &[DrawRecord] {
        &self.draws
    }

    pub fn trajectory(&self) -> &[TrajectoryPoint] {
        &self.trajectory
    }

    pub fn num_draws(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Number of nulls held in memory (0 on the LP path).
    pub fn null_count(&self) -> usize {
        match &self.mode {
            Mode::Grid(g) => g.grid.len(),
            Mode::Lp(_) => 0,
        }
    }

    pub fn grid(&self) -> Option<&NullGrid> {
        match &self.mode {
            Mode::Grid(g) => Some(&g.grid),
            Mode::Lp(_) => None,
        }
    }

    /// Upper-side panels on the grid path.
    pub fn panels(&self) -> Option<&[StratumPanel]> {
        match &self.mode {
            Mode::Grid(g) => Some(&g.upper),
            Mode::Lp(_) => None,
        }
    }

    pub fn workload(&self) -> Workload {
        Workload::new(self.consumed.clone(), self.counts.clone())
    }

    pub fn exhausted(&self, k: usize) -> bool {
        self.config.replacement == Replacement::Without && self.counts[k] >= self.sizes[k]
    }

    fn exhausted_flags(&self) -> Vec<bool> {
        (0..self.sizes.len()).map(|k| self.exhausted(k)).collect()
    }

    /// Strata that at least one live null still consumes.
    fn wanted_strata(&self) -> Option<Vec<bool>> {
        match &self.mode {
            Mode::Grid(g) if g.lower.is_some() => Some(
                g.upper
                    .iter()
                    .map(|panel| {
                        g.live
                            .iter()
                            .zip(panel.masked())
                            .any(|(&live, &masked)| live && !masked)
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    /// The stratum the next card should come from.
    pub fn recommended_stratum(&self) -> Result<Recommendation> {
        match self.status {
            Status::Stopped => return Err(AuditError::Stopped),
            Status::Exhausted => return Err(AuditError::AllExhausted),
            Status::Running => {}
        }
        let exhausted = self.exhausted_flags();
        let wanted = self.wanted_strata();
        let restricted = wanted
            .as_deref()
            .and_then(|w| next_stratum_among(&self.counts, &self.sizes, &exhausted, Some(w)));
        let (k, rule) = match restricted {
            Some(k) => (k, "lower-sided test: round robin over strata some unrejected null still uses"),
            None => {
                let k = next_stratum_among(&self.counts, &self.sizes, &exhausted, None)
                    .ok_or(AuditError::AllExhausted)?;
                (k, "proportional: round robin in proportion to stratum size")
            }
        };
        let ratios: Vec<String> = self
            .counts
            .iter()
            .zip(&self.sizes)
            .enumerate()
            .map(|(i, (c, n))| format!("stratum {}: {c}/{n}", i + 1))
            .collect();
        Ok(Recommendation {
            stratum: k,
            rationale: format!("{rule}; sampled so far {}", ratios.join(", ")),
        })
    }

    /// Ingests a manually interpreted card. `mvr` and `cvr` are assorter
    /// values; `cvr` is required for comparison strata and refused otherwise.
    pub fn ingest_card(&mut self, stratum: usize, mvr: f64, cvr: Option<f64>) -> Result<&CombinedRisk> {
        let spec = *self
            .specs
            .get(stratum)
            .ok_or_else(|| AuditError::Contract(format!("no stratum {}", stratum + 1)))?;
        if spec.kind == AuditKind::Polling && cvr.is_some() {
            return Err(AuditError::Contract(format!(
                "stratum {} is a polling stratum and takes no CVR",
                stratum + 1
            )));
        }
        let x = spec.test_value(mvr, cvr)?;
        self.ingest_inner(stratum, x, Some(mvr), cvr, Some(now_seconds()))
    }

    /// Ingests a value already on the test scale (simulation and replay).
    pub fn ingest_test_value(&mut self, stratum: usize, x: f64) -> Result<&CombinedRisk> {
        self.ingest_inner(stratum, x, None, None, None)
    }

    fn ingest_inner(
        &mut self,
        k: usize,
        x: f64,
        mvr: Option<f64>,
        cvr: Option<f64>,
        timestamp: Option<f64>,
    ) -> Result<&CombinedRisk> {
        match self.status {
            Status::Stopped => return Err(AuditError::Stopped),
            Status::Exhausted => return Err(AuditError::AllExhausted),
            Status::Running => {}
        }
        if k >= self.sizes.len() {
            return Err(AuditError::Contract(format!("no stratum {}", k + 1)));
        }
        if self.exhausted(k) {
            return Err(AuditError::Exhausted { stratum: k + 1 });
        }
        let u = self.specs[k].upper_bound_test();
        if !(0.0..=u).contains(&x) {
            return Err(AuditError::Domain(format!("test value {x} outside [0, {u}]")));
        }
        let alpha = self.config.risk_limit;
        let headline = self.config.combiner;
        let lower_level = self.config.lower_level;
        let record = self.record_log;
        self.counts[k] += 1;
        let n = self.num_draws();

        let mut evaluated = true;
        match &mut self.mode {
            Mode::Grid(g) => {
                let used = g
                    .live
                    .iter()
                    .zip(g.upper[k].masked())
                    .any(|(&live, &masked)| live && !masked);
                if used {
                    self.consumed[k] += 1;
                }
                g.upper[k].update(x);
                if let Some(lower) = g.lower.as_mut() {
                    lower[k].update(x);
                    apply_lower_sided_masks(&mut g.upper[k], &lower[k], lower_level);
                }
                self.risk = max_p_over_grid(&g.grid, &g.upper, false)?;
                for (j, live) in g.live.iter_mut().enumerate() {
                    *live = point_pvalue(&g.upper, j, headline) > alpha;
                }
            }
            Mode::Lp(lp) => {
                self.consumed[k] += 1;
                lp.accs[k].update(x)?;
                lp.since_solve += 1;
                let due = self.config.lp_checkpoint.is_none_or(|c| lp.since_solve >= c);
                let all_done = self.config.replacement == Replacement::Without
                    && self.counts.iter().zip(&self.sizes).all(|(c, n)| c >= n);
                if due || all_done {
                    lp.since_solve = 0;
                    self.risk = solve_lp(&lp.accs, &self.specs, &self.weights)?;
                } else {
                    evaluated = false;
                }
            }
        }

        if record {
            self.draws.push(DrawRecord {
                stratum: k,
                mvr,
                cvr,
                test_value: x,
                timestamp,
            });
            if evaluated {
                self.trajectory.push(TrajectoryPoint {
                    draw_index: n,
                    stratum: k,
                    p_fisher: self.risk.p_fisher,
                    p_intersection: self.risk.p_intersection,
                });
            }
        }
        if evaluated && self.risk.p(headline) <= alpha {
            self.status = Status::Stopped;
        } else if (0..self.sizes.len()).all(|j| self.exhausted(j)) {
            self.status = Status::Exhausted;
        }
        Ok(&self.risk)
    }

    /// Forces an LP evaluation now (LP path with checkpoints).
    pub fn evaluate_now(&mut self) -> Result<&CombinedRisk> {
        if let Mode::Lp(lp) = &mut self.mode {
            lp.since_solve = 0;
            self.risk = solve_lp(&lp.accs, &self.specs, &self.weights)?;
            if self.status == Status::Running && self.risk.p(self.config.combiner) <= self.config.risk_limit {
                self.status = Status::Stopped;
            }
        }
        Ok(&self.risk)
    }

    /// Draws from `population` until stopped, exhausted, or `budget` cards.
    pub fn run_to_completion(&mut self, population: &mut StratifiedPopulation, budget: u64) -> Result<StoppingRecord> {
        if population.len() != self.sizes.len() {
            return Err(AuditError::Contract("population and config disagree on strata".into()));
        }
        while self.status == Status::Running && self.num_draws() < budget {
            let k = match self.recommended_stratum() {
                Ok(r) => r.stratum,
                Err(AuditError::AllExhausted) => {
                    self.status = Status::Exhausted;
                    break;
                }
                Err(e) => return Err(e),
            };
            let x = population.draw(k)?;
            self.ingest_test_value(k, x)?;
        }
        Ok(self.stopping_record())
    }

    pub fn stopping_record(&self) -> StoppingRecord {
        StoppingRecord {
            stopped: self.status == Status::Stopped,
            status: self.status,
            workload: self.workload(),
            p_fisher: self.risk.p_fisher,
            p_intersection: self.risk.p_intersection,
        }
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            config: self.config.clone(),
            status: self.status,
            draws: self.draws.clone(),
            trajectory: self.trajectory.clone(),
            p_fisher: self.risk.p_fisher,
            p_intersection: self.risk.p_intersection,
        }
    }

    /// Rebuilds a session by re-ingesting a draw log.
    pub fn replay(config: AuditConfig, draws: &[DrawRecord]) -> Result<Self> {
        let mut session = AuditSession::new(config)?;
        for d in draws {
            session.ingest_inner(d.stratum, d.test_value, d.mvr, d.cvr, d.timestamp)?;
        }
        Ok(session)
    }

    pub fn from_snapshot(snapshot: &SessionSnapshot) -> Result<Self> {
        AuditSession::replay(snapshot.config.clone(), &snapshot.draws)
    }
}

fn solve_lp(accs: &[EbAccumulator], specs: &[AssorterSpec], weights: &[f64]) -> Result<CombinedRisk> {
    let affine = affine_from_accumulators(accs, specs)?;
    let upper: Vec<f64> = specs.iter().map(|s| s.upper_bound_original).collect();
    let fisher = lp_max_fisher_eb(&affine, weights, &upper)?;
    let inter = lp_max_intersection_eb(&affine, weights, &upper)?;
    let with_beta = |p: Option<NullPoint>| p.map(|p| NullPoint::new(p.theta, specs, weights));
    Ok(CombinedRisk {
        p_fisher: fisher.p_fisher,
        p_intersection: inter.p_intersection,
        argmax_fisher: with_beta(fisher.argmax_fisher),
        argmax_intersection: with_beta(inter.argmax_intersection),
        per_point: None,
    })
}

fn now_seconds() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}
