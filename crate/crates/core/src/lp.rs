//! Dense two-phase tableau simplex.
//!
//! Pricing is Dantzig's largest-coefficient rule; after a run of degenerate
//! pivots the solver switches to Bland's rule, which cannot cycle, and stays
//! there until the objective moves again.

use thiserror::Error;

pub const PIVOT_TOL: f64 = 1e-9;
pub const FEAS_TOL: f64 = 1e-7;
const DEGENERATE_RUN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// `minimize objective·x` subject to sparse rows and per-variable bounds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    /// `(lo, hi)`; either side may be infinite.
    pub bounds: Vec<(f64, f64)>,
}

impl LpProblem {
    /// Adds a variable with the given cost and bounds, returning its index.
    pub fn add_var(&mut self, cost: f64, lo: f64, hi: f64) -> usize {
        self.objective.push(cost);
        self.bounds.push((lo, hi));
        self.objective.len() - 1
    }

    pub fn add_constraint(&mut self, coeffs: Vec<(usize, f64)>, sense: Sense, rhs: f64) {
        self.constraints.push(Constraint { coeffs, sense, rhs });
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    fn validate(&self) -> Result<(), LpError> {
        let n = self.objective.len();
        if self.bounds.len() != n {
            return Err(LpError::Malformed(format!(
                "{} bounds for {n} variables",
                self.bounds.len()
            )));
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::Malformed("non-finite objective coefficient".into()));
        }
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(LpError::Malformed(format!("variable {j} has bounds ({lo},{hi})")));
            }
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if !c.rhs.is_finite() {
                return Err(LpError::Malformed(format!("row {i} has rhs {}", c.rhs)));
            }
            for &(j, a) in &c.coeffs {
                if j >= n || !a.is_finite() {
                    return Err(LpError::Malformed(format!("row {i} has bad entry ({j},{a})")));
                }
            }
        }
        Ok(())
    }

    /// Largest constraint or bound violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            worst = worst.max(lo - x[j]).max(x[j] - hi);
        }
        for c in &self.constraints {
            let lhs: f64 = c.coeffs.iter().map(|&(j, a)| a * x[j]).sum();
            let v = match c.sense {
                Sense::Le => lhs - c.rhs,
                Sense::Ge => c.rhs - lhs,
                Sense::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(v);
        }
        worst
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Primal values; meaningful only when `status` is `Optimal`.
    pub x: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LpError {
    #[error("iteration limit of {0} pivots exceeded")]
    IterationLimit(usize),
    #[error("malformed problem: {0}")]
    Malformed(String),
}

/// How an original variable maps onto nonnegative standard-form columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// x = offset + col
    Shift { col: usize, offset: f64 },
    /// x = offset - col
    Flip { col: usize, offset: f64 },
    /// x = pos - neg
    Split { pos: usize, neg: usize },
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// row-major, `cols + 1` wide (rhs last)
    a: Vec<f64>,
    /// reduced costs, `cols + 1` wide (negated objective value last)
    obj: Vec<f64>,
    basis: Vec<usize>,
    barred: Vec<bool>,
    pivots: usize,
    limit: usize,
}

enum Outcome {
    Optimal,
    Unbounded,
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
        let inv = 1.0 / self.a[pr * w + pc];
        let row_start = pr * w;
        for v in &mut self.a[row_start..row_start + w] {
            *v *= inv;
        }
        self.a[row_start + pc] = 1.0;
        let nz: Vec<usize> = (0..w).filter(|&c| self.a[row_start + c] != 0.0).collect();
        let pivot_row: Vec<f64> = nz.iter().map(|&c| self.a[row_start + c]).collect();
        for r in 0..self.rows {
            if r == pr {
                continue;
            }
            let f = self.a[r * w + pc];
            if f == 0.0 {
                continue;
            }
            let base = r * w;
            for (&c, &pv) in nz.iter().zip(&pivot_row) {
                self.a[base + c] -= f * pv;
            }
            self.a[base + pc] = 0.0;
        }
        let f = self.obj[pc];
        if f != 0.0 {
            for (&c, &pv) in nz.iter().zip(&pivot_row) {
                self.obj[c] -= f * pv;
            }
            self.obj[pc] = 0.0;
        }
        self.basis[pr] = pc;
        self.pivots += 1;
    }

    fn run(&mut self) -> Result<Outcome, LpError> {
        let mut degenerate = 0usize;
        let mut bland = false;
        loop {
            if self.pivots >= self.limit {
                return Err(LpError::IterationLimit(self.limit));
            }
            let entering = if bland {
                (0..self.cols).find(|&c| !self.barred[c] && self.obj[c] < -PIVOT_TOL)
            } else {
                let mut best: Option<(usize, f64)> = None;
                for c in 0..self.cols {
                    let d = self.obj[c];
                    if !self.barred[c] && d < -PIVOT_TOL && best.is_none_or(|(_, b)| d < b) {
                        best = Some((c, d));
                    }
                }
                best.map(|(c, _)| c)
            };
            let Some(pc) = entering else {
                return Ok(Outcome::Optimal);
            };
            // ratio test; ties go to the smallest basic variable index
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                let a = self.at(r, pc);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(r).max(0.0) / a;
                    let better = match leave {
                        None => true,
                        Some((lr, best)) => {
                            ratio < best - 1e-12 || (ratio <= best + 1e-12 && self.basis[r] < self.basis[lr])
                        }
                    };
                    if better {
                        leave = Some((r, ratio));
                    }
                }
            }
            let Some((pr, step)) = leave else {
                return Ok(Outcome::Unbounded);
            };
            let progress = step * -self.obj[pc];
            if progress <= 1e-11 * (1.0 + self.obj[self.cols].abs()) {
                degenerate += 1;
                if degenerate >= DEGENERATE_RUN {
                    bland = true;
                }
            } else {
                degenerate = 0;
                bland = false;
            }
            self.pivot(pr, pc);
        }
    }
}

pub fn lp_solve(p: &LpProblem) -> Result<LpSolution, LpError> {
    p.validate()?;
    let nvars = p.num_vars();

    // standard form columns for original variables
    let mut maps = Vec::with_capacity(nvars);
    let mut ncols = 0usize;
    let mut extra_rows: Vec<(usize, f64)> = Vec::new(); // (col, upper) for col <= upper
    for &(lo, hi) in &p.bounds {
        if lo.is_finite() {
            maps.push(VarMap::Shift { col: ncols, offset: lo });
            if hi.is_finite() {
                extra_rows.push((ncols, hi - lo));
            }
            ncols += 1;
        } else if hi.is_finite() {
            maps.push(VarMap::Flip { col: ncols, offset: hi });
            ncols += 1;
        } else {
            maps.push(VarMap::Split { pos: ncols, neg: ncols + 1 });
            ncols += 2;
        }
    }
    if extra_rows.iter().any(|&(_, u)| u < -FEAS_TOL) {
        return Ok(infeasible(nvars));
    }
    let nstruct = ncols;

    // dense rows over structural columns
    let mut rows: Vec<(Vec<f64>, Sense, f64)> = Vec::with_capacity(p.constraints.len() + extra_rows.len());
    for c in &p.constraints {
        let mut dense = vec![0.0; nstruct];
        let mut rhs = c.rhs;
        for &(j, a) in &c.coeffs {
            match maps[j] {
                VarMap::Shift { col, offset } => {
                    dense[col] += a;
                    rhs -= a * offset;
                }
                VarMap::Flip { col, offset } => {
                    dense[col] -= a;
                    rhs -= a * offset;
                }
                VarMap::Split { pos, neg } => {
                    dense[pos] += a;
                    dense[neg] -= a;
                }
            }
        }
        rows.push((dense, c.sense, rhs));
    }
    for &(col, upper) in &extra_rows {
        let mut dense = vec![0.0; nstruct];
        dense[col] = 1.0;
        rows.push((dense, Sense::Le, upper.max(0.0)));
    }
    // normalize rhs >= 0
    for (dense, sense, rhs) in &mut rows {
        if *rhs < 0.0 {
            dense.iter_mut().for_each(|v| *v = -*v);
            *rhs = -*rhs;
            *sense = match *sense {
                Sense::Le => Sense::Ge,
                Sense::Ge => Sense::Le,
                Sense::Eq => Sense::Eq,
            };
        }
    }

    let m = rows.len();
    let n_slack = rows.iter().filter(|r| r.1 != Sense::Eq).count();
    let n_art = rows.iter().filter(|r| r.1 != Sense::Le).count();
    let cols = nstruct + n_slack + n_art;
    let w = cols + 1;
    let mut a = vec![0.0; m * w];
    let mut basis = vec![0usize; m];
    let mut is_art = vec![false; cols];
    let (mut next_slack, mut next_art) = (nstruct, nstruct + n_slack);
    for (r, (dense, sense, rhs)) in rows.iter().enumerate() {
        a[r * w..r * w + nstruct].copy_from_slice(dense);
        a[r * w + cols] = *rhs;
        match sense {
            Sense::Le => {
                a[r * w + next_slack] = 1.0;
                basis[r] = next_slack;
                next_slack += 1;
            }
            Sense::Ge => {
                a[r * w + next_slack] = -1.0;
                next_slack += 1;
                a[r * w + next_art] = 1.0;
                basis[r] = next_art;
                is_art[next_art] = true;
                next_art += 1;
            }
            Sense::Eq => {
                a[r * w + next_art] = 1.0;
                basis[r] = next_art;
                is_art[next_art] = true;
                next_art += 1;
            }
        }
    }
    let limit = 50_000 + 50 * (m + cols);
    let mut t = Tableau {
        rows: m,
        cols,
        a,
        obj: vec![0.0; w],
        basis,
        barred: vec![false; cols],
        pivots: 0,
        limit,
    };

    // phase 1: minimize the sum of artificials
    if n_art > 0 {
        for r in 0..m {
            if is_art[t.basis[r]] {
                for c in 0..w {
                    t.obj[c] -= t.at(r, c);
                }
            }
        }
        for c in 0..cols {
            if is_art[c] {
                t.obj[c] = 0.0;
            }
        }
        t.run()?;
        let infeas = -t.obj[cols];
        let scale = 1.0 + rows.iter().map(|r| r.2).fold(0.0, f64::max);
        if infeas > FEAS_TOL * scale {
            return Ok(infeasible(nvars));
        }
        // drive remaining artificials out of the basis
        let mut r = 0;
        while r < t.rows {
            if is_art[t.basis[r]] {
                let pc = (0..cols).find(|&c| !is_art[c] && t.at(r, c).abs() > PIVOT_TOL);
                match pc {
                    Some(c) => t.pivot(r, c),
                    None => {
                        // redundant row
                        let w = t.width();
                        t.a.drain(r * w..(r + 1) * w);
                        t.basis.remove(r);
                        t.rows -= 1;
                        continue;
                    }
                }
            }
            r += 1;
        }
        for c in 0..cols {
            t.barred[c] = is_art[c];
        }
    }

    // phase 2
    let mut cost = vec![0.0; cols];
    for (j, map) in maps.iter().enumerate() {
        let c = p.objective[j];
        match *map {
            VarMap::Shift { col, .. } => cost[col] += c,
            VarMap::Flip { col, .. } => cost[col] -= c,
            VarMap::Split { pos, neg } => {
                cost[pos] += c;
                cost[neg] -= c;
            }
        }
    }
    t.obj = vec![0.0; w];
    t.obj[..cols].copy_from_slice(&cost);
    for r in 0..t.rows {
        let cb = cost[t.basis[r]];
        if cb != 0.0 {
            for c in 0..w {
                t.obj[c] -= cb * t.at(r, c);
            }
        }
    }
    if let Outcome::Unbounded = t.run()? {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            x: vec![0.0; nvars],
            objective: f64::NEG_INFINITY,
        });
    }

    let mut col_val = vec![0.0; cols];
    for r in 0..t.rows {
        col_val[t.basis[r]] = t.rhs(r).max(0.0);
    }
    let x: Vec<f64> = maps
        .iter()
        .map(|map| match *map {
            VarMap::Shift { col, offset } => offset + col_val[col],
            VarMap::Flip { col, offset } => offset - col_val[col],
            VarMap::Split { pos, neg } => col_val[pos] - col_val[neg],
        })
        .collect();
    let objective = p.objective_value(&x);
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        objective,
    })
}

fn infeasible(nvars: usize) -> LpSolution {
    LpSolution {
        status: LpStatus::Infeasible,
        x: vec![0.0; nvars],
        objective: f64::NAN,
    }
}
