//! Small dense linear-program solver.
//!
//! Problems have the form `minimize c.x` subject to linear rows and
//! `0 <= x_j <= upper_j`. The solver is a two-phase tableau simplex using
//! Bland's rule, which cannot cycle. Finite upper bounds become extra rows.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("simplex iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn new(coeffs: Vec<f64>, relation: Relation, rhs: f64) -> Self {
        Constraint {
            coeffs,
            relation,
            rhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    /// Minimized objective coefficients.
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    /// Optional finite upper bound per variable; every variable is >= 0.
    pub upper_bounds: Vec<Option<f64>>,
}

impl LinearProgram {
    pub fn new(objective: Vec<f64>) -> Self {
        let n = objective.len();
        LinearProgram {
            objective,
            constraints: Vec::new(),
            upper_bounds: vec![None; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) -> &mut Self {
        self.constraints.push(Constraint::new(coeffs, relation, rhs));
        self
    }

    pub fn bound(&mut self, var: usize, upper: f64) -> &mut Self {
        self.upper_bounds[var] = Some(upper);
        self
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        solve(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-10;

struct Tableau {
    rows: usize,
    cols: usize,
    /// Row-major `rows x (cols + 1)`; the last column holds the right-hand side.
    a: Vec<f64>,
    obj: Vec<f64>,
    basis: Vec<usize>,
    iterations: usize,
}

impl Tableau {
    fn width(&self) -> usize {
        self.cols + 1
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.a[r * self.width() + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.cols)
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.width();
        let p = self.a[pr * w + pc];
        for v in &mut self.a[pr * w..(pr + 1) * w] {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.a[pr * w..(pr + 1) * w].to_vec();
        for r in 0..self.rows {
            if r == pr {
                continue;
            }
            let factor = self.a[r * w + pc];
            if factor != 0.0 {
                for (v, pv) in self.a[r * w..(r + 1) * w].iter_mut().zip(&pivot_row) {
                    *v -= factor * pv;
                }
                self.a[r * w + pc] = 0.0;
            }
        }
        let factor = self.obj[pc];
        if factor != 0.0 {
            for (v, pv) in self.obj.iter_mut().zip(&pivot_row) {
                *v -= factor * pv;
            }
            self.obj[pc] = 0.0;
        }
        self.basis[pr] = pc;
        self.iterations += 1;
    }

    /// Loads `cost` as the objective row and prices out the current basis.
    fn set_objective(&mut self, cost: &[f64]) {
        let w = self.width();
        self.obj = vec![0.0; w];
        self.obj[..cost.len()].copy_from_slice(cost);
        for r in 0..self.rows {
            let cb = self.obj[self.basis[r]];
            if cb != 0.0 {
                for c in 0..w {
                    self.obj[c] -= cb * self.a[r * w + c];
                }
            }
        }
    }

    /// Runs simplex iterations over columns `< allowed`.
    fn optimize(&mut self, allowed: usize, limit: usize) -> Result<(), LpError> {
        loop {
            if self.iterations > limit {
                return Err(LpError::IterationLimit);
            }
            let Some(enter) = (0..allowed).find(|&c| self.obj[c] < -COST_TOL) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                let coef = self.at(r, enter);
                if coef > PIVOT_TOL {
                    let ratio = self.rhs(r) / coef;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            let better = ratio < lratio - 1e-12
                                || (ratio <= lratio + 1e-12 && self.basis[r] < self.basis[lr]);
                            if better {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, enter),
                None => return Err(LpError::Unbounded),
            }
        }
    }
}

/// Solves `lp` to optimality.
pub fn solve(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    let n = lp.num_vars();
    if lp.upper_bounds.len() != n {
        return Err(LpError::Dimension(format!(
            "{} upper bounds for {n} variables",
            lp.upper_bounds.len()
        )));
    }
    let mut rows: Vec<Constraint> = Vec::with_capacity(lp.constraints.len() + n);
    for (i, c) in lp.constraints.iter().enumerate() {
        if c.coeffs.len() != n {
            return Err(LpError::Dimension(format!(
                "constraint {i} has {} coefficients, expected {n}",
                c.coeffs.len()
            )));
        }
        if !c.rhs.is_finite() || c.coeffs.iter().any(|v| !v.is_finite()) {
            return Err(LpError::Dimension(format!("constraint {i} is not finite")));
        }
        rows.push(c.clone());
    }
    for (j, ub) in lp.upper_bounds.iter().enumerate() {
        if let Some(ub) = *ub {
            if ub < 0.0 {
                return Err(LpError::Infeasible);
            }
            let mut coeffs = vec![0.0; n];
            coeffs[j] = 1.0;
            rows.push(Constraint::new(coeffs, Relation::Le, ub));
        }
    }
    // Normalise to nonnegative right-hand sides.
    for row in &mut rows {
        if row.rhs < 0.0 {
            row.rhs = -row.rhs;
            row.coeffs.iter_mut().for_each(|v| *v = -*v);
            row.relation = match row.relation {
                Relation::Le => Relation::Ge,
                Relation::Ge => Relation::Le,
                Relation::Eq => Relation::Eq,
            };
        }
    }

    let m = rows.len();
    let slack_count = rows.iter().filter(|r| r.relation != Relation::Eq).count();
    let art_count = rows.iter().filter(|r| r.relation != Relation::Le).count();
    let art_start = n + slack_count;
    let cols = art_start + art_count;
    let w = cols + 1;
    let mut a = vec![0.0; m * w];
    let mut basis = vec![0; m];
    let (mut s, mut art) = (n, art_start);
    for (r, row) in rows.iter().enumerate() {
        a[r * w..r * w + n].copy_from_slice(&row.coeffs);
        a[r * w + cols] = row.rhs;
        match row.relation {
            Relation::Le => {
                a[r * w + s] = 1.0;
                basis[r] = s;
                s += 1;
            }
            Relation::Ge => {
                a[r * w + s] = -1.0;
                s += 1;
                a[r * w + art] = 1.0;
                basis[r] = art;
                art += 1;
            }
            Relation::Eq => {
                a[r * w + art] = 1.0;
                basis[r] = art;
                art += 1;
            }
        }
    }
    let mut t = Tableau {
        rows: m,
        cols,
        a,
        obj: Vec::new(),
        basis,
        iterations: 0,
    };
    let limit = 50 * (m + cols) + 1000;

    if art_count > 0 {
        let mut cost = vec![0.0; cols];
        cost[art_start..].iter_mut().for_each(|v| *v = 1.0);
        t.set_objective(&cost);
        t.optimize(cols, limit)?;
        let infeasibility = -t.obj[cols];
        let scale = 1.0 + rows.iter().map(|r| r.rhs.abs()).fold(0.0, f64::max);
        if infeasibility > 1e-9 * scale {
            return Err(LpError::Infeasible);
        }
        // Drive artificial variables out of the basis where possible.
        for r in 0..m {
            if t.basis[r] >= art_start {
                if let Some(c) = (0..art_start).find(|&c| t.at(r, c).abs() > 1e-9) {
                    t.pivot(r, c);
                }
            }
        }
    }

    let mut cost = vec![0.0; cols];
    cost[..n].copy_from_slice(&lp.objective);
    t.set_objective(&cost);
    t.optimize(art_start, limit)?;

    let mut x = vec![0.0; n];
    for r in 0..m {
        if t.basis[r] < n {
            x[t.basis[r]] = t.rhs(r).max(0.0);
        }
    }
    for (xj, ub) in x.iter_mut().zip(&lp.upper_bounds) {
        if let Some(ub) = ub {
            *xj = xj.min(*ub);
        }
    }
    let value = x.iter().zip(&lp.objective).map(|(x, c)| x * c).sum();
    Ok(LpSolution {
        x,
        value,
        iterations: t.iterations,
    })
}
