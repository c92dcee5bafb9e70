//! Dense two-phase primal simplex with Bland's anti-cycling rule.
//!
//! Problems here are tiny (tens of columns), so the full tableau is kept and
//! updated in place. Bland's rule makes the pivot sequence, and therefore the
//! returned vertex, a deterministic function of the input.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// `a . x <= b`
    Le,
    /// `a . x == b`
    Eq,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimplexError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("simplex exceeded {0} pivots")]
    IterationLimit(usize),
}

/// `max c.x  s.t.  rows, x >= 0`.
#[derive(Debug, Clone)]
pub struct StandardForm<T: Scalar> {
    pub objective: Vec<T>,
    pub rows: Vec<(Vec<T>, RowKind, T)>,
}

#[derive(Debug, Clone)]
pub struct SimplexSolution<T: Scalar> {
    pub x: Vec<T>,
    pub objective: T,
    /// One dual value per input row; `d objective / d rhs` at the final basis.
    pub duals: Vec<T>,
    pub pivots: usize,
}

const MAX_PIVOTS: usize = 100_000;

#[derive(Clone, Copy, PartialEq, Eq)]
enum ColKind {
    Structural,
    Slack,
    Artificial,
}

struct Tableau<T: Scalar> {
    m: usize,
    ncols: usize,
    /// Row-major `m x (ncols + 1)`; the last column is the right-hand side.
    a: Vec<T>,
    /// Reduced costs `z_j - c_j`; optimal for maximization when all >= 0.
    d: Vec<T>,
    z: T,
    basis: Vec<usize>,
    kinds: Vec<ColKind>,
    tol: T,
    pivots: usize,
}

impl<T: Scalar> Tableau<T> {
    #[inline]
    fn at(&self, r: usize, c: usize) -> T {
        self.a[r * (self.ncols + 1) + c]
    }

    #[inline]
    fn rhs(&self, r: usize) -> T {
        self.at(r, self.ncols)
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.ncols + 1;
        let piv = self.at(pr, pc);
        for c in 0..w {
            self.a[pr * w + c] = self.a[pr * w + c] / piv;
        }
        for r in 0..self.m {
            if r == pr {
                continue;
            }
            let f = self.a[r * w + pc];
            if f == T::zero() {
                continue;
            }
            for c in 0..w {
                let v = self.a[pr * w + c];
                if v != T::zero() {
                    self.a[r * w + c] = self.a[r * w + c] - f * v;
                }
            }
            self.a[r * w + pc] = T::zero();
        }
        let f = self.d[pc];
        if f != T::zero() {
            for c in 0..self.ncols {
                self.d[c] = self.d[c] - f * self.a[pr * w + c];
            }
            self.z = self.z - f * self.rhs(pr);
            self.d[pc] = T::zero();
        }
        self.basis[pr] = pc;
        self.pivots += 1;
    }

    /// Runs Bland-rule pivots until optimal. Columns rejected by `allowed`
    /// never enter the basis.
    fn optimize(&mut self, allowed: impl Fn(usize) -> bool) -> Result<(), SimplexError> {
        loop {
            if self.pivots > MAX_PIVOTS {
                return Err(SimplexError::IterationLimit(MAX_PIVOTS));
            }
            let entering = (0..self.ncols).find(|&j| allowed(j) && self.d[j] < -self.tol);
            let Some(pc) = entering else {
                return Ok(());
            };
            let mut best: Option<(usize, T)> = None;
            for r in 0..self.m {
                let arj = self.at(r, pc);
                if arj > self.tol {
                    let ratio = self.rhs(r) / arj;
                    best = match best {
                        None => Some((r, ratio)),
                        Some((br, bv)) => {
                            if ratio < bv - self.tol
                                || ((ratio - bv).abs() <= self.tol && self.basis[r] < self.basis[br])
                            {
                                Some((r, ratio))
                            } else {
                                Some((br, bv))
                            }
                        }
                    };
                }
            }
            let Some((pr, _)) = best else {
                return Err(SimplexError::Unbounded);
            };
            self.pivot(pr, pc);
        }
    }

    fn reset_costs(&mut self, cost: &[T]) {
        for j in 0..self.ncols {
            let mut zj = T::zero();
            for r in 0..self.m {
                let cb = cost[self.basis[r]];
                if cb != T::zero() {
                    zj = zj + cb * self.at(r, j);
                }
            }
            self.d[j] = zj - cost[j];
        }
        let mut z = T::zero();
        for r in 0..self.m {
            z = z + cost[self.basis[r]] * self.rhs(r);
        }
        self.z = z;
    }
}

pub fn solve<T: Scalar>(lp: &StandardForm<T>) -> Result<SimplexSolution<T>, SimplexError> {
    let n = lp.objective.len();
    let m = lp.rows.len();
    let tol = T::pivot_tol();

    // Normalize every row to a non-negative right-hand side.
    let mut sign = vec![T::one(); m];
    let mut is_ge = vec![false; m];
    for (r, (_, kind, b)) in lp.rows.iter().enumerate() {
        if *b < T::zero() {
            sign[r] = -T::one();
            is_ge[r] = *kind == RowKind::Le;
        }
    }
    let n_slack = lp.rows.iter().filter(|(_, k, _)| *k == RowKind::Le).count();
    let n_art = lp
        .rows
        .iter()
        .enumerate()
        .filter(|(r, (_, k, _))| *k == RowKind::Eq || is_ge[*r])
        .count();
    let ncols = n + n_slack + n_art;
    let w = ncols + 1;
    let mut a = vec![T::zero(); m * w];
    let mut kinds = vec![ColKind::Structural; ncols];
    let mut basis = vec![0usize; m];
    let mut identity_col = vec![0usize; m];
    let mut next_slack = n;
    let mut next_art = n + n_slack;
    for (r, (coeffs, kind, b)) in lp.rows.iter().enumerate() {
        assert_eq!(coeffs.len(), n, "row {r} has wrong width");
        for (j, &v) in coeffs.iter().enumerate() {
            a[r * w + j] = sign[r] * v;
        }
        a[r * w + ncols] = sign[r] * *b;
        if *kind == RowKind::Le {
            let s = next_slack;
            next_slack += 1;
            kinds[s] = ColKind::Slack;
            // slack: +1 in the original orientation
            a[r * w + s] = sign[r];
            if !is_ge[r] {
                basis[r] = s;
                identity_col[r] = s;
            }
        }
        if *kind == RowKind::Eq || is_ge[r] {
            let c = next_art;
            next_art += 1;
            kinds[c] = ColKind::Artificial;
            a[r * w + c] = T::one();
            basis[r] = c;
            identity_col[r] = c;
        }
    }

    let mut t = Tableau {
        m,
        ncols,
        a,
        d: vec![T::zero(); ncols],
        z: T::zero(),
        basis,
        kinds,
        tol,
        pivots: 0,
    };

    if n_art > 0 {
        let phase1: Vec<T> = t
            .kinds
            .iter()
            .map(|k| if *k == ColKind::Artificial { -T::one() } else { T::zero() })
            .collect();
        t.reset_costs(&phase1);
        t.optimize(|_| true)?;
        let scale = lp
            .rows
            .iter()
            .map(|(_, _, b)| b.abs())
            .fold(T::one(), T::max);
        if t.z < -tol * scale * T::lit(10.0) {
            return Err(SimplexError::Infeasible);
        }
        // Drive zero-valued artificials out of the basis where possible.
        for r in 0..m {
            if t.kinds[t.basis[r]] != ColKind::Artificial {
                continue;
            }
            let col = (0..ncols)
                .filter(|&j| t.kinds[j] != ColKind::Artificial)
                .find(|&j| t.at(r, j).abs() > tol);
            if let Some(pc) = col {
                t.pivot(r, pc);
            }
        }
    }

    let mut cost = vec![T::zero(); ncols];
    cost[..n].copy_from_slice(&lp.objective);
    t.reset_costs(&cost);
    let kinds = t.kinds.clone();
    t.optimize(|j| kinds[j] != ColKind::Artificial)?;

    let mut x = vec![T::zero(); n];
    for r in 0..m {
        let b = t.basis[r];
        if b < n {
            x[b] = t.rhs(r).max(T::zero());
        }
    }
    let objective = lp
        .objective
        .iter()
        .zip(&x)
        .map(|(&c, &v)| c * v)
        .sum::<T>();
    let duals = (0..m)
        .map(|r| {
            let col = identity_col[r];
            // d_col = c_B B^-1 e_r - c_col with c_col = 0; for slack columns
            // of negated rows the +1 entry sits in the original orientation.
            let y = t.d[col];
            if t.kinds[col] == ColKind::Slack {
                y
            } else {
                sign[r] * y
            }
        })
        .collect();
    Ok(SimplexSolution {
        x,
        objective,
        duals,
        pivots: t.pivots,
    })
}
