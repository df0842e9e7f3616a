//! Primal active-set solver for convex quadratic programs
//!
//! ```text
//! minimize   ½ xᵀQx − cᵀx
//! subject to eᵢᵀx = fᵢ            (equalities)
//!            lᵢ ≤ aᵢᵀx ≤ uᵢ       (two-sided rows)
//! ```
//!
//! with `Q` positive definite and accessed only through products and
//! solves. The iteration starts from a feasible point supplied by the
//! caller and keeps every iterate feasible.

use std::collections::HashMap;

use faer::Mat;

use crate::error::{Error, Result};
use crate::linalg::{dot, solve_general};

/// Default iteration cap.
pub const MAX_ITERATIONS: usize = 10_000;
/// Default bound on the scaled KKT residual at termination.
pub const KKT_TOL: f64 = 1e-8;

/// Access to a positive definite Hessian.
pub trait Hessian {
    fn dim(&self) -> usize;
    /// `Q x`.
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    /// `Q⁻¹ b`.
    fn solve(&self, b: &[f64]) -> Vec<f64>;
}

/// A family of two-sided linear constraint rows.
pub trait ConstraintRows {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn lower(&self, i: usize) -> f64;
    fn upper(&self, i: usize) -> f64;
    /// `aᵢᵀx`.
    fn dot(&self, i: usize, x: &[f64]) -> f64;
    /// `aᵢ` as a dense vector.
    fn row(&self, i: usize) -> Vec<f64>;
    /// `A x` for every row.
    fn apply_all(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|i| self.dot(i, x)).collect()
    }
}

/// Coordinate bounds `lᵢ ≤ xᵢ ≤ uᵢ`.
#[derive(Debug, Clone)]
pub struct BoxRows {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ConstraintRows for BoxRows {
    fn len(&self) -> usize {
        self.lower.len()
    }
    fn lower(&self, i: usize) -> f64 {
        self.lower[i]
    }
    fn upper(&self, i: usize) -> f64 {
        self.upper[i]
    }
    fn dot(&self, i: usize, x: &[f64]) -> f64 {
        x[i]
    }
    fn row(&self, i: usize) -> Vec<f64> {
        let mut r = vec![0.0; self.lower.len()];
        r[i] = 1.0;
        r
    }
}

/// Which side of a two-sided row is held at equality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveSide {
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
pub struct QpOptions {
    pub max_iterations: usize,
    pub kkt_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iterations: MAX_ITERATIONS,
            kkt_tol: KKT_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Active rows with their side and multiplier.
    pub active: Vec<(usize, ActiveSide, f64)>,
    /// Multipliers of the equality constraints.
    pub equality_multipliers: Vec<f64>,
    pub kkt_residual: f64,
}

/// Solves the program from the feasible point `x0`.
pub fn solve<H: Hessian, C: ConstraintRows>(
    q: &H,
    c: &[f64],
    equalities: &[(Vec<f64>, f64)],
    rows: &C,
    x0: Vec<f64>,
    opts: &QpOptions,
) -> Result<QpSolution> {
    let n = q.dim();
    assert_eq!(c.len(), n);
    assert_eq!(x0.len(), n);
    let mut x = x0;

    let feas_tol = 1e-9;
    for (e, f) in equalities {
        if (dot(e, &x) - f).abs() > feas_tol * (1.0 + f.abs()) {
            return Err(Error::Infeasible("starting point violates an equality".into()));
        }
    }
    let mut ax = rows.apply_all(&x);
    for (i, &v) in ax.iter().enumerate() {
        if v < rows.lower(i) - feas_tol || v > rows.upper(i) + feas_tol {
            return Err(Error::Infeasible(format!("starting point violates row {i}")));
        }
    }

    let eq_rows: Vec<Vec<f64>> = equalities.iter().map(|(e, _)| e.clone()).collect();
    let eq_y: Vec<Vec<f64>> = eq_rows.iter().map(|e| q.solve(e)).collect();
    // Rows already at a bound enter the working set through a zero step.
    let mut working: Vec<(usize, ActiveSide)> = Vec::new();
    let mut in_working = vec![false; rows.len()];
    let mut cache: HashMap<usize, (Vec<f64>, Vec<f64>)> = HashMap::new();
    // `A Q⁻¹ Aᵀ` over equalities then working rows, updated in place.
    let mut gram: Vec<Vec<f64>> = eq_rows
        .iter()
        .map(|a| eq_y.iter().map(|y| dot(a, y)).collect())
        .collect();

    let x_free = q.solve(c);
    let scale = 1.0 + c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut iterations = 0;
    // After a full unblocked step the iterate minimizes over the working set.
    let mut full_step = false;
    loop {
        if iterations >= opts.max_iterations {
            return Err(Error::NoConvergence {
                what: "active-set QP",
                iterations,
            });
        }
        iterations += 1;

        // Q⁻¹(Qx − c) without touching Q.
        let z: Vec<f64> = x.iter().zip(&x_free).map(|(a, b)| a - b).collect();

        // Columns of Aᵀ for equalities then working rows.
        let mut a_cols: Vec<&Vec<f64>> = eq_rows.iter().collect();
        let mut y_cols: Vec<&Vec<f64>> = eq_y.iter().collect();
        for &(i, _) in &working {
            let (a, y) = &cache[&i];
            a_cols.push(a);
            y_cols.push(y);
        }
        let k = a_cols.len();
        debug_assert_eq!(gram.len(), k);
        let lambda = if k == 0 {
            Vec::new()
        } else {
            let m = Mat::from_fn(k, k, |r, s| gram[r][s]);
            let rhs = Mat::from_fn(k, 1, |r, _| dot(a_cols[r], &z));
            let sol = solve_general(m.as_ref(), rhs.as_ref());
            (0..k).map(|r| sol[(r, 0)]).collect::<Vec<f64>>()
        };
        let mut p: Vec<f64> = z.iter().map(|v| -v).collect();
        for (s, yc) in y_cols.iter().enumerate() {
            for (pi, yi) in p.iter_mut().zip(yc.iter()) {
                *pi += lambda[s] * yi;
            }
        }

        let pnorm = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let xnorm = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if full_step || pnorm <= 1e-12 * (1.0 + xnorm) {
            full_step = false;
            // Stationary on the working set: check multiplier signs.
            let neq = eq_rows.len();
            let mut worst: Option<(usize, f64)> = None;
            for (w, &(_, side)) in working.iter().enumerate() {
                let l = lambda[neq + w];
                let wrong = match side {
                    ActiveSide::Lower => -l,
                    ActiveSide::Upper => l,
                };
                let (i, _) = working[w];
                if rows.lower(i) == rows.upper(i) {
                    continue;
                }
                if wrong > 1e-12 * scale && worst.is_none_or(|(_, v)| wrong > v) {
                    worst = Some((w, wrong));
                }
            }
            match worst {
                Some((w, _)) => {
                    let (i, _) = working.remove(w);
                    in_working[i] = false;
                    gram.remove(neq + w);
                    for r in gram.iter_mut() {
                        r.remove(neq + w);
                    }
                    continue;
                }
                None => {
                    let active: Vec<(usize, ActiveSide, f64)> = working
                        .iter()
                        .enumerate()
                        .map(|(w, &(i, s))| (i, s, lambda[neq + w]))
                        .collect();
                    let eq_mult = lambda[..neq].to_vec();
                    let kkt = kkt_residual(q, c, &eq_rows, &eq_mult, rows, &active, &x) / scale;
                    if kkt > opts.kkt_tol {
                        log::warn!("active-set QP terminated with scaled KKT residual {kkt:e}");
                    }
                    return Ok(QpSolution {
                        x,
                        iterations,
                        active,
                        equality_multipliers: eq_mult,
                        kkt_residual: kkt,
                    });
                }
            }
        }

        // Ratio test over rows outside the working set.
        let ap = rows.apply_all(&p);
        let mut step = 1.0;
        let mut blocking: Option<(usize, ActiveSide)> = None;
        for i in 0..rows.len() {
            if in_working[i] {
                continue;
            }
            let s = ap[i];
            let tol = 1e-12 * pnorm;
            let candidate = if s < -tol {
                Some(((rows.lower(i) - ax[i]) / s, ActiveSide::Lower))
            } else if s > tol {
                Some(((rows.upper(i) - ax[i]) / s, ActiveSide::Upper))
            } else {
                None
            };
            if let Some((t, side)) = candidate {
                let t = t.max(0.0);
                if t < step {
                    step = t;
                    blocking = Some((i, side));
                }
            }
        }
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += step * pi;
        }
        for (v, s) in ax.iter_mut().zip(&ap) {
            *v += step * s;
        }
        full_step = blocking.is_none();
        if let Some((i, side)) = blocking {
            ax[i] = match side {
                ActiveSide::Lower => rows.lower(i),
                ActiveSide::Upper => rows.upper(i),
            };
            cache.entry(i).or_insert_with(|| {
                let a = rows.row(i);
                let y = q.solve(&a);
                (a, y)
            });
            let (a, y) = &cache[&i];
            let mut row: Vec<f64> = eq_rows.iter().map(|e| dot(e, y)).collect();
            row.extend(working.iter().map(|(w, _)| dot(&cache[w].0, y)));
            row.push(dot(a, y));
            for (r, v) in gram.iter_mut().zip(&row) {
                r.push(*v);
            }
            gram.push(row);
            working.push((i, side));
            in_working[i] = true;
        }
    }
}

/// Largest violation of stationarity, primal feasibility, multiplier sign,
/// or complementary slackness (unscaled).
pub fn kkt_residual<H: Hessian, C: ConstraintRows>(
    q: &H,
    c: &[f64],
    eq_rows: &[Vec<f64>],
    eq_mult: &[f64],
    rows: &C,
    active: &[(usize, ActiveSide, f64)],
    x: &[f64],
) -> f64 {
    let mut r: Vec<f64> = q.apply(x).iter().zip(c).map(|(a, b)| a - b).collect();
    for (e, &l) in eq_rows.iter().zip(eq_mult) {
        for (ri, ei) in r.iter_mut().zip(e) {
            *ri -= l * ei;
        }
    }
    let mut worst = 0.0f64;
    for &(i, side, l) in active {
        let a = rows.row(i);
        for (ri, ai) in r.iter_mut().zip(&a) {
            *ri -= l * ai;
        }
        let v = rows.dot(i, x);
        let (gap, sign) = match side {
            ActiveSide::Lower => (v - rows.lower(i), -l),
            ActiveSide::Upper => (rows.upper(i) - v, l),
        };
        if rows.lower(i) != rows.upper(i) {
            worst = worst.max(sign).max((gap * l).abs());
        }
    }
    for i in 0..rows.len() {
        let v = rows.dot(i, x);
        worst = worst.max(rows.lower(i) - v).max(v - rows.upper(i));
    }
    r.iter().fold(worst, |a, v| a.max(v.abs()))
}

/// Dense positive definite Hessian, for small problems.
#[derive(Debug, Clone)]
pub struct DenseHessian {
    q: Mat<f64>,
    chol: faer::linalg::solvers::Llt<f64>,
}

impl DenseHessian {
    pub fn new(q: Mat<f64>) -> Result<Self> {
        let chol = q
            .llt(faer::Side::Lower)
            .map_err(|e| Error::LinAlg(format!("Hessian is not positive definite: {e:?}")))?;
        Ok(Self { q, chol })
    }
}

impl Hessian for DenseHessian {
    fn dim(&self) -> usize {
        self.q.nrows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        crate::linalg::mat_vec(self.q.as_ref(), x)
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        use faer::linalg::solvers::Solve;
        let sol = self.chol.solve(crate::linalg::column(b));
        crate::linalg::col_to_vec(sol.as_ref(), 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mat_from_rows;
    use proptest::prelude::*;

    fn dense(rows: &[Vec<f64>]) -> DenseHessian {
        DenseHessian::new(mat_from_rows(rows)).unwrap()
    }

    #[test]
    fn unconstrained_optimum_inside_box() {
        let q = dense(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let rows = BoxRows {
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
        };
        let s = solve(&q, &[0.6, 1.0], &[], &rows, vec![0.5, 0.5], &QpOptions::default()).unwrap();
        assert!((s.x[0] - 0.3).abs() < 1e-14 && (s.x[1] - 0.5).abs() < 1e-14);
        assert!(s.active.is_empty());
    }

    #[test]
    fn clips_to_upper_bound() {
        // minimize (x - 1.05)² on [0, 1]
        let q = dense(&[vec![2.0]]);
        let rows = BoxRows {
            lower: vec![0.0],
            upper: vec![1.0],
        };
        let s = solve(&q, &[2.1], &[], &rows, vec![0.5], &QpOptions::default()).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-14);
        assert_eq!(s.active.len(), 1);
        assert_eq!(s.active[0].1, ActiveSide::Upper);
        assert!(s.active[0].2 < 0.0);
        assert!(s.kkt_residual <= KKT_TOL);
    }

    #[test]
    fn equality_with_box() {
        // Project (0.9, 0.9) onto {x₁ + x₂ = 0.5, 0 ≤ x ≤ 0.3}
        let q = dense(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let rows = BoxRows {
            lower: vec![0.0, 0.0],
            upper: vec![0.3, 0.3],
        };
        let s = solve(
            &q,
            &[0.9, 0.0],
            &[(vec![1.0, 1.0], 0.5)],
            &rows,
            vec![0.25, 0.25],
            &QpOptions::default(),
        )
        .unwrap();
        assert!((s.x[0] - 0.3).abs() < 1e-12);
        assert!((s.x[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn infeasible_start_is_reported() {
        let q = dense(&[vec![1.0]]);
        let rows = BoxRows {
            lower: vec![0.0],
            upper: vec![1.0],
        };
        assert!(matches!(
            solve(&q, &[0.0], &[], &rows, vec![2.0], &QpOptions::default()),
            Err(Error::Infeasible(_))
        ));
    }

    /// Brute force over all 3ⁿ assignments of {free, lower, upper}.
    fn brute_force(q: &Mat<f64>, c: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
        let n = c.len();
        let mut best = f64::INFINITY;
        for code in 0..3usize.pow(n as u32) {
            let mut fixed = vec![None; n];
            let mut t = code;
            for f in fixed.iter_mut() {
                *f = match t % 3 {
                    0 => None,
                    1 => Some(0),
                    _ => Some(1),
                };
                t /= 3;
            }
            let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
            let mut x = vec![0.0; n];
            for i in 0..n {
                if let Some(s) = fixed[i] {
                    x[i] = if s == 0 { lo[i] } else { hi[i] };
                }
            }
            if !free.is_empty() {
                let a = Mat::from_fn(free.len(), free.len(), |r, s| q[(free[r], free[s])]);
                let b = Mat::from_fn(free.len(), 1, |r, _| {
                    c[free[r]] - (0..n).filter(|i| fixed[*i].is_some()).map(|i| q[(free[r], i)] * x[i]).sum::<f64>()
                });
                let sol = solve_general(a.as_ref(), b.as_ref());
                for (r, &i) in free.iter().enumerate() {
                    x[i] = sol[(r, 0)];
                }
            }
            if (0..n).all(|i| x[i] >= lo[i] - 1e-12 && x[i] <= hi[i] + 1e-12) {
                let qx = crate::linalg::mat_vec(q.as_ref(), &x);
                let f = 0.5 * dot(&x, &qx) - dot(c, &x);
                best = best.min(f);
            }
        }
        best
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            entries in prop::collection::vec(-1.0f64..1.0, 16),
            c in prop::collection::vec(-3.0f64..3.0, 4),
        ) {
            let b = Mat::from_fn(4, 4, |i, j| entries[i * 4 + j]);
            let mut q = crate::linalg::matmul_new(b.transpose(), b.as_ref());
            for i in 0..4 {
                q[(i, i)] += 0.5;
            }
            let lo = vec![-0.5; 4];
            let hi = vec![0.7, 0.4, 0.5, 0.6];
            let h = DenseHessian::new(q.clone()).unwrap();
            let rows = BoxRows { lower: lo.clone(), upper: hi.clone() };
            let s = solve(&h, &c, &[], &rows, vec![0.0; 4], &QpOptions::default()).unwrap();
            let qx = crate::linalg::mat_vec(q.as_ref(), &s.x);
            let f = 0.5 * dot(&s.x, &qx) - dot(&c, &s.x);
            let oracle = brute_force(&q, &c, &lo, &hi);
            prop_assert!((f - oracle).abs() <= 1e-10 * (1.0 + oracle.abs()));
            prop_assert!(s.kkt_residual <= KKT_TOL);
            for i in 0..4 {
                prop_assert!(s.x[i] >= lo[i] - 1e-12 && s.x[i] <= hi[i] + 1e-12);
            }
        }
    }
}
