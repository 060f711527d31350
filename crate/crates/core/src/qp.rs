//! Dense solver for small strongly concave quadratic programs with linear
//! inequality and box constraints:
//!
//! ```text
//!     maximize    x' quad x + lin' x          (quad symmetric, quad <= -delta I)
//!     subject to  a_i' x >= b_i               (ineq)
//!                 lo <= x <= hi               (box)
//! ```
//!
//! Augmented Lagrangian on the inequalities with projected gradient ascent
//! inner solves; the box is handled by clamping. Problem sizes here are a
//! few dozen variables at most.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Symmetric negative-definite quadratic term (maximization form).
    pub quad: DMatrix<f64>,
    /// Linear term.
    pub lin: DVector<f64>,
    /// Inequalities a' x >= b.
    pub ineq: Vec<(DVector<f64>, f64)>,
    pub box_lo: DVector<f64>,
    pub box_hi: DVector<f64>,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.quad * x)[(0, 0)] + self.lin.dot(x)
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.quad.nrows() != n || self.quad.ncols() != n {
            return Err(Error::Dimension("quad term must be n x n".into()));
        }
        if (&self.quad - self.quad.transpose()).amax() > 1e-10 {
            return Err(Error::Numerical("quad term must be symmetric".into()));
        }
        if self.box_lo.len() != n || self.box_hi.len() != n {
            return Err(Error::Dimension("box bounds must be n-vectors".into()));
        }
        for i in 0..n {
            if self.box_lo[i] > self.box_hi[i] {
                return Err(Error::Config(format!("box lo > hi at coordinate {i}")));
            }
        }
        for (a, _) in &self.ineq {
            if a.len() != n {
                return Err(Error::Dimension("inequality vector length".into()));
            }
        }
        Ok(())
    }

    fn clamp(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.box_lo[i], self.box_hi[i]);
        }
    }

    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        self.ineq
            .iter()
            .map(|(a, b)| (b - a.dot(x)).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub multipliers: Vec<f64>,
    /// Projected-gradient norm of the Lagrangian plus max violation.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Gradient of the augmented Lagrangian at (x, lambda, rho).
fn al_gradient(p: &QpProblem, x: &DVector<f64>, lambda: &[f64], rho: f64) -> DVector<f64> {
    let mut g = &p.quad * x * 2.0 + &p.lin;
    for ((a, b), &lam) in p.ineq.iter().zip(lambda) {
        let viol = b - a.dot(x);
        let mult = (lam + rho * viol).max(0.0);
        if mult > 0.0 {
            g += a * mult;
        }
    }
    g
}

fn al_value(p: &QpProblem, x: &DVector<f64>, lambda: &[f64], rho: f64) -> f64 {
    let mut v = p.objective(x);
    for ((a, b), &lam) in p.ineq.iter().zip(lambda) {
        let viol = b - a.dot(x);
        let shifted = (lam + rho * viol).max(0.0);
        v -= (shifted * shifted - lam * lam) / (2.0 * rho);
    }
    v
}

/// Projected-gradient norm of the plain Lagrangian at fixed multipliers:
/// || x - clamp(x + grad) ||_inf style measure with a unit step, plus the
/// constraint violation. Used as the KKT residual.
fn kkt_residual(p: &QpProblem, x: &DVector<f64>, lambda: &[f64]) -> f64 {
    let mut g = &p.quad * x * 2.0 + &p.lin;
    for ((a, _), &lam) in p.ineq.iter().zip(lambda) {
        if lam > 0.0 {
            g += a * lam;
        }
    }
    let mut proj = x + &g;
    p.clamp(&mut proj);
    (proj - x).norm() + p.max_violation(x)
}

/// Inner solve of the augmented-Lagrangian subproblem: projected gradient
/// ascent with Nesterov momentum and value restarts. The subproblem is
/// concave piecewise-quadratic, so a fixed 1/L step is monotone-safe and the
/// momentum handles the stiffness the penalty term introduces.
fn inner_solve(
    p: &QpProblem,
    x: &mut DVector<f64>,
    lambda: &[f64],
    rho: f64,
    tol: f64,
    max_iters: usize,
) {
    let n = p.dim() as f64;
    let lip = 2.0 * p.quad.amax() * n
        + rho * p.ineq.iter().map(|(a, _)| a.norm_squared()).sum::<f64>()
        + 1e-12;
    let step = 1.0 / lip;

    p.clamp(x);
    let mut y = x.clone();
    let mut momentum = 1.0f64;
    for _ in 0..max_iters {
        let g = al_gradient(p, &y, lambda, rho);
        let mut z = &y + &g * step;
        p.clamp(&mut z);

        let delta = &z - &*x;
        if g.dot(&delta) < 0.0 {
            // momentum points uphill of the gradient: restart it
            y = x.clone();
            momentum = 1.0;
            continue;
        }
        let m_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        y = &z + &delta * ((momentum - 1.0) / m_next);
        momentum = m_next;
        *x = z;

        if delta.norm() / step <= tol {
            // confirm with the unaccelerated optimality measure
            let gx = al_gradient(p, x, lambda, rho);
            let mut px = &*x + &gx * step;
            p.clamp(&mut px);
            if (px - &*x).norm() / step <= tol {
                break;
            }
        }
    }
}

/// Phase-1: drive the squared violations to zero over the box.
fn feasibility_phase(p: &QpProblem, x0: &DVector<f64>, max_iters: usize) -> DVector<f64> {
    let mut x = x0.clone();
    p.clamp(&mut x);
    let lip = p.ineq.iter().map(|(a, _)| a.norm_squared()).sum::<f64>() + 1e-12;
    for _ in 0..max_iters {
        let viol = p.max_violation(&x);
        if viol <= 1e-12 {
            break;
        }
        let mut g = DVector::zeros(p.dim());
        for (a, b) in &p.ineq {
            let v = b - a.dot(&x);
            if v > 0.0 {
                g += a * v;
            }
        }
        x += g / lip;
        p.clamp(&mut x);
    }
    x
}

pub fn solve_qp_full(
    p: &QpProblem,
    x0: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<QpSolution> {
    p.validate()?;
    if x0.len() != p.dim() {
        return Err(Error::Dimension("x0 length".into()));
    }
    let mut x = x0.clone();
    p.clamp(&mut x);

    let mut lambda = vec![0.0; p.ineq.len()];
    let mut rho = 1e2;
    let mut iterations = 0;
    let mut prev_viol = f64::INFINITY;

    for outer in 0..max_iters {
        iterations = outer + 1;
        inner_solve(p, &mut x, &lambda, rho, (tol * 1e-2).max(1e-13), 30_000);
        let mut max_viol: f64 = 0.0;
        for ((a, b), lam) in p.ineq.iter().zip(lambda.iter_mut()) {
            let viol = b - a.dot(&x);
            *lam = (*lam + rho * viol).max(0.0);
            max_viol = max_viol.max(viol.max(0.0));
        }
        let res = kkt_residual(p, &x, &lambda);
        if res <= tol {
            return Ok(QpSolution {
                x,
                multipliers: lambda,
                kkt_residual: res,
                iterations,
            });
        }
        // grow the penalty only when the violation stops shrinking
        if max_viol > 1e-10 && max_viol > 0.25 * prev_viol {
            rho = (rho * 10.0).min(1e8);
        }
        prev_viol = max_viol;
    }

    // Could not hit the KKT tolerance: decide between infeasibility and a
    // merely slow solve.
    if p.max_violation(&x) > 1e-6 {
        let probe = feasibility_phase(p, &x, 20_000);
        if p.max_violation(&probe) > 1e-6 {
            return Err(Error::Infeasible(format!(
                "no point satisfies the constraints within tolerance \
                 (best violation {:.3e})",
                p.max_violation(&probe)
            )));
        }
    }
    let res = kkt_residual(p, &x, &lambda);
    if res <= tol * 10.0 {
        return Ok(QpSolution {
            x,
            multipliers: lambda,
            kkt_residual: res,
            iterations,
        });
    }
    Err(Error::Numerical(format!(
        "QP did not reach KKT tolerance {tol:.1e} (residual {res:.3e})"
    )))
}

/// Spec-facing entry point: the solution vector of the QP.
pub fn solve_qp(p: &QpProblem, x0: &DVector<f64>, tol: f64, max_iters: usize) -> Result<DVector<f64>> {
    solve_qp_full(p, x0, tol, max_iters).map(|s| s.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn unconstrained(n: usize) -> QpProblem {
        QpProblem {
            quad: -DMatrix::identity(n, n),
            lin: DVector::zeros(n),
            ineq: vec![],
            box_lo: DVector::from_element(n, -1.0),
            box_hi: DVector::from_element(n, 1.0),
        }
    }

    #[test]
    fn unconstrained_maximum_at_origin() {
        let p = unconstrained(3);
        let x0 = DVector::from_vec(vec![0.9, -0.7, 0.2]);
        let sol = solve_qp(&p, &x0, 1e-7, 50).unwrap();
        assert!(sol.norm() < 1e-7);
    }

    #[test]
    fn clamped_coordinate_optimum() {
        let mut p = unconstrained(2);
        p.lin = DVector::from_vec(vec![4.0, 0.0]);
        let sol = solve_qp(&p, &DVector::zeros(2), 1e-7, 50).unwrap();
        assert_relative_eq!(sol[0], 1.0, epsilon = 1e-7);
        assert!(sol[1].abs() < 1e-7);
    }

    #[test]
    fn halfspace_projection() {
        // max -||x||^2 s.t. x1 + x2 >= 1 projects the origin onto the
        // halfspace boundary: (0.5, 0.5).
        let mut p = unconstrained(2);
        p.ineq = vec![(DVector::from_vec(vec![1.0, 1.0]), 1.0)];
        let sol = solve_qp_full(&p, &DVector::from_vec(vec![1.0, 1.0]), 1e-7, 60).unwrap();
        assert_relative_eq!(sol.x[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(sol.x[1], 0.5, epsilon = 1e-6);
        assert!(sol.kkt_residual < 1e-7);
    }

    #[test]
    fn returned_point_feasible_and_no_worse_than_start() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = 2 + (trial % 5);
            let p = random_problem(n, trial % 4, &mut rng);
            let x0 = feasible_start(&p);
            let sol = solve_qp_full(&p, &x0, 1e-7, 80).unwrap();
            assert!(p.max_violation(&sol.x) <= 1e-6, "violation too large");
            for i in 0..n {
                assert!(sol.x[i] >= p.box_lo[i] - 1e-12 && sol.x[i] <= p.box_hi[i] + 1e-12);
            }
            if p.max_violation(&x0) == 0.0 {
                assert!(
                    p.objective(&sol.x) >= p.objective(&x0) - 1e-9,
                    "objective regressed"
                );
            }
        }
    }

    fn random_problem(n: usize, n_ineq: usize, rng: &mut ChaCha12Rng) -> QpProblem {
        // quad = -(B B' + delta I), strongly concave
        let b = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let quad = -(&b * b.transpose() + DMatrix::identity(n, n) * 0.3);
        let lin = DVector::from_fn(n, |_, _| 2.0 * (rng.random::<f64>() - 0.5));
        let mut ineq = Vec::new();
        for _ in 0..n_ineq {
            let a = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
            // keep b small enough that the box contains feasible points
            let bval = -0.2 * rng.random::<f64>();
            ineq.push((a, bval));
        }
        QpProblem {
            quad,
            lin,
            ineq,
            box_lo: DVector::from_element(n, -1.0),
            box_hi: DVector::from_element(n, 1.0),
        }
    }

    fn feasible_start(p: &QpProblem) -> DVector<f64> {
        let x = DVector::zeros(p.dim());
        if p.max_violation(&x) == 0.0 {
            x
        } else {
            feasibility_phase(p, &x, 20_000)
        }
    }

    /// Brute force: enumerate active sets (inequalities tight + box faces)
    /// and solve the equality-constrained KKT system for each candidate.
    fn brute_force(p: &QpProblem) -> DVector<f64> {
        let n = p.dim();
        let m = p.ineq.len();
        let mut best: Option<(f64, DVector<f64>)> = None;
        // box states: 0 free, 1 at lo, 2 at hi
        let mut box_state = vec![0usize; n];
        loop {
            for mask in 0..(1usize << m) {
                let mut free: Vec<usize> = Vec::new();
                let mut fixed_val = DVector::zeros(n);
                for i in 0..n {
                    match box_state[i] {
                        0 => free.push(i),
                        1 => fixed_val[i] = p.box_lo[i],
                        _ => fixed_val[i] = p.box_hi[i],
                    }
                }
                let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
                let k = free.len();
                let na = active.len();
                if na > k {
                    continue;
                }
                // KKT: maximize over x_free with equality a_i' x = b_i
                let dim = k + na;
                if dim == 0 {
                    // every coordinate pinned to a box face
                    let x = fixed_val.clone();
                    if p.max_violation(&x) <= 1e-9 {
                        let val = p.objective(&x);
                        if best.as_ref().map_or(true, |(bv, _)| val > *bv) {
                            best = Some((val, x));
                        }
                    }
                    continue;
                }
                let mut kkt = DMatrix::zeros(dim, dim);
                let mut rhs = DVector::zeros(dim);
                for (ri, &i) in free.iter().enumerate() {
                    for (ci, &j) in free.iter().enumerate() {
                        kkt[(ri, ci)] = 2.0 * p.quad[(i, j)];
                    }
                    let mut r = -p.lin[i];
                    for j in 0..n {
                        if box_state[j] != 0 {
                            r -= 2.0 * p.quad[(i, j)] * fixed_val[j];
                        }
                    }
                    rhs[ri] = r;
                    for (ai, &a_idx) in active.iter().enumerate() {
                        kkt[(ri, k + ai)] = p.ineq[a_idx].0[i];
                        kkt[(k + ai, ri)] = p.ineq[a_idx].0[i];
                    }
                }
                for (ai, &a_idx) in active.iter().enumerate() {
                    let (a, b) = &p.ineq[a_idx];
                    let mut r = *b;
                    for j in 0..n {
                        if box_state[j] != 0 {
                            r -= a[j] * fixed_val[j];
                        }
                    }
                    rhs[k + ai] = r;
                }
                let Some(sol) = kkt.lu().solve(&rhs) else {
                    continue;
                };
                let mut x = fixed_val.clone();
                for (ri, &i) in free.iter().enumerate() {
                    x[i] = sol[ri];
                }
                // feasibility of the candidate
                let ok_box = (0..n).all(|i| {
                    x[i] >= p.box_lo[i] - 1e-9 && x[i] <= p.box_hi[i] + 1e-9
                });
                if !ok_box || p.max_violation(&x) > 1e-9 {
                    continue;
                }
                let val = p.objective(&x);
                if best.as_ref().map_or(true, |(bv, _)| val > *bv) {
                    best = Some((val, x));
                }
            }
            // next box state
            let mut i = 0;
            loop {
                if i == n {
                    return best.expect("some candidate must be feasible").1;
                }
                box_state[i] += 1;
                if box_state[i] == 3 {
                    box_state[i] = 0;
                    i += 1;
                } else {
                    break;
                }
            }
        }
    }

    #[test]
    fn matches_active_set_enumeration() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for trial in 0..12 {
            let n = 2 + (trial % 3); // up to 4 variables, exhaustive box faces
            let p = random_problem(n, 1 + trial % 3, &mut rng);
            let x0 = feasible_start(&p);
            let sol = solve_qp_full(&p, &x0, 1e-8, 100).unwrap();
            let oracle = brute_force(&p);
            let got = p.objective(&sol.x);
            let want = p.objective(&oracle);
            assert!(
                (got - want).abs() <= 1e-5 * (1.0 + want.abs()),
                "trial {trial}: solver {got} vs brute force {want}"
            );
        }
    }

    #[test]
    fn wide_box_instances_match_ineq_only_enumeration() {
        // larger n with the box inactive: brute force reduces to subsets of
        // the inequality set
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        for trial in 0..6 {
            let n = 8 + 2 * (trial % 3); // 8..=12
            let mut p = random_problem(n, 4, &mut rng);
            p.box_lo = DVector::from_element(n, -50.0);
            p.box_hi = DVector::from_element(n, 50.0);
            let x0 = feasible_start(&p);
            let sol = solve_qp_full(&p, &x0, 1e-8, 100).unwrap();
            assert!(
                sol.x.amax() < 49.0,
                "optimum unexpectedly near the wide box boundary"
            );
            let oracle = brute_force_ineq_only(&p);
            let got = p.objective(&sol.x);
            let want = p.objective(&oracle);
            assert!(
                (got - want).abs() <= 1e-5 * (1.0 + want.abs()),
                "trial {trial}: solver {got} vs enumeration {want}"
            );
        }
    }

    fn brute_force_ineq_only(p: &QpProblem) -> DVector<f64> {
        let n = p.dim();
        let m = p.ineq.len();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0..(1usize << m) {
            let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let na = active.len();
            let dim = n + na;
            let mut kkt = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            for i in 0..n {
                for j in 0..n {
                    kkt[(i, j)] = 2.0 * p.quad[(i, j)];
                }
                rhs[i] = -p.lin[i];
                for (ai, &a_idx) in active.iter().enumerate() {
                    kkt[(i, n + ai)] = p.ineq[a_idx].0[i];
                    kkt[(n + ai, i)] = p.ineq[a_idx].0[i];
                }
            }
            for (ai, &a_idx) in active.iter().enumerate() {
                rhs[n + ai] = p.ineq[a_idx].1;
            }
            let Some(sol) = kkt.lu().solve(&rhs) else {
                continue;
            };
            let x = sol.rows(0, n).into_owned();
            if p.max_violation(&x) > 1e-9 {
                continue;
            }
            let val = p.objective(&x);
            if best.as_ref().map_or(true, |(bv, _)| val > *bv) {
                best = Some((val, x));
            }
        }
        best.expect("unconstrained candidate always present").1
    }

    #[test]
    fn stiff_low_curvature_instance() {
        // Shaped like the placement surrogate: -0.02 ||x - x0||^2 + g' x over
        // a region box with a few separation constraints. The tiny curvature
        // makes the penalty subproblem stiff.
        let n = 8;
        let quad = -DMatrix::identity(n, n) * 0.02;
        let lin = DVector::from_fn(n, |i, _| 0.3 * ((i as f64) * 0.7).sin());
        let mut ineq = Vec::new();
        for (i, j) in [(0usize, 1usize), (1, 2), (2, 3)] {
            let mut a = DVector::zeros(n);
            a[2 * i] = 1.0;
            a[2 * j] = -1.0;
            ineq.push((a, 0.5));
        }
        let p = QpProblem {
            quad,
            lin,
            ineq,
            box_lo: DVector::from_element(n, -1.0),
            box_hi: DVector::from_element(n, 1.0),
        };
        let x0 = DVector::from_fn(n, |i, _| if i % 2 == 0 { 0.9 - 0.6 * (i / 2) as f64 } else { 0.0 });
        assert_eq!(p.max_violation(&x0), 0.0, "start must be feasible");
        let sol = solve_qp_full(&p, &x0, 1e-7, 100).unwrap();
        assert!(sol.kkt_residual <= 1e-7, "kkt {:.3e}", sol.kkt_residual);
        assert!(p.max_violation(&sol.x) <= 1e-6);
        assert!(p.objective(&sol.x) >= p.objective(&x0) - 1e-9);
    }

    #[test]
    fn infeasible_problem_reported() {
        let mut p = unconstrained(2);
        // x1 + x2 >= 5 cannot hold inside [-1, 1]^2
        p.ineq = vec![(DVector::from_vec(vec![1.0, 1.0]), 5.0)];
        let err = solve_qp(&p, &DVector::zeros(2), 1e-7, 40).unwrap_err();
        assert!(err.to_string().contains("infeasible"), "{err}");
    }
}
