//! Transmit-side optimization: the inner covariance solvers (water-filling
//! and Dinkelbach's method over the effective eigen-channel) and the outer
//! SCA loop over the transmit antenna positions.

use nalgebra::DVector;

use crate::de_core::{de_fixed_point, de_rate_tx, DeOpts, Link};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat, LN2};
use crate::oracle::{energy_efficiency, CovMatrix};
use crate::qp::{solve_qp, QpProblem};
use crate::scenario::{Apv, RunParams, Scenario, ScsiState};

/// Eigen-structure of the effective transmit channel G^H Gamma-tilde G:
/// unitary eigenvectors and descending, nonnegative eigenvalues.
#[derive(Debug, Clone)]
pub struct EigenChannel {
    pub u: CMat,
    pub lambdas: DVector<f64>,
}

impl EigenChannel {
    pub fn from_effective(s: &CMat) -> Result<EigenChannel> {
        let defect = linalg::hermitian_defect(s);
        if defect > 1e-6 * (1.0 + linalg::max_abs(s)) {
            return Err(Error::Numerical(format!(
                "effective channel not Hermitian (defect {defect:.3e})"
            )));
        }
        let (u, mut vals) = linalg::herm_eigen(s);
        for v in vals.iter_mut() {
            *v = v.max(0.0);
        }
        Ok(EigenChannel { u, lambdas: vals })
    }

    pub fn from_modes(lambdas: &[f64]) -> EigenChannel {
        let n = lambdas.len();
        let mut sorted = lambdas.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        EigenChannel {
            u: CMat::identity(n, n),
            lambdas: DVector::from_iterator(n, sorted.into_iter().map(|v| v.max(0.0))),
        }
    }

    /// Rate of Q in this frozen eigen-channel: log2 det(I + S Q).
    pub fn rate(&self, q: &CovMatrix) -> f64 {
        let s = &self.u * linalg::diag_re(self.lambdas.as_slice()) * self.u.adjoint();
        let arg = q.sqrt() * s * q.sqrt();
        linalg::logdet2_i_plus(&arg)
    }
}

/// Water-filling over the positive eigen-modes: Q = U [w I - Lambda^+]^+ U^H
/// with the water level w found by bisection so that tr(Q) = p_max within
/// 1e-10 p_max. Zero modes receive no power.
pub fn waterfill(eigen: &EigenChannel, p_max: f64) -> Result<CovMatrix> {
    if p_max <= 0.0 {
        return Err(Error::Config("water-filling needs p_max > 0".into()));
    }
    let lambdas = &eigen.lambdas;
    let active: Vec<f64> = lambdas.iter().copied().filter(|&l| l > 0.0).collect();
    if active.is_empty() {
        return Err(Error::Numerical("rankless channel: all eigenvalues zero".into()));
    }
    let tr_at = |w: f64| -> f64 {
        active.iter().map(|&l| (w - 1.0 / l).max(0.0)).sum()
    };
    let mut lo = 0.0;
    let mut hi = 1.0 / active.iter().cloned().fold(f64::INFINITY, f64::min) + p_max;
    debug_assert!(tr_at(hi) >= p_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tr_at(mid) < p_max {
            lo = mid;
        } else {
            hi = mid;
        }
        if (tr_at(hi) - p_max).abs() <= 1e-10 * p_max {
            break;
        }
    }
    let w = hi;
    let powers: Vec<f64> = lambdas
        .iter()
        .map(|&l| if l > 0.0 { (w - 1.0 / l).max(0.0) } else { 0.0 })
        .collect();
    Ok(CovMatrix::from_eigen(&eigen.u, &powers))
}

/// Parametric water-filling step of Dinkelbach's method: powers
/// [1/(eta omega ln 2) - 1/lambda]^+ per mode (rates in bits, powers in W).
fn dinkelbach_step(eigen: &EigenChannel, eta: f64, omega: f64) -> CovMatrix {
    let level = 1.0 / (eta * omega * LN2);
    let powers: Vec<f64> = eigen
        .lambdas
        .iter()
        .map(|&l| if l > 0.0 { (level - 1.0 / l).max(0.0) } else { 0.0 })
        .collect();
    CovMatrix::from_eigen(&eigen.u, &powers)
}

/// An effective transmit channel the covariance solvers can query: either a
/// frozen eigen-structure or one re-derived from a fresh DE fixed point at
/// each covariance.
pub trait EffectiveChannel {
    fn eigen_at(&self, q: &CovMatrix) -> Result<EigenChannel>;
    fn rate_at(&self, q: &CovMatrix) -> Result<f64>;
    fn dim(&self) -> usize;
}

/// Frozen eigen-channel (used by tests and the pure water-filling path).
pub struct FixedChannel(pub EigenChannel);

impl EffectiveChannel for FixedChannel {
    fn eigen_at(&self, _q: &CovMatrix) -> Result<EigenChannel> {
        Ok(self.0.clone())
    }
    fn rate_at(&self, q: &CovMatrix) -> Result<f64> {
        Ok(self.0.rate(q))
    }
    fn dim(&self) -> usize {
        self.0.lambdas.len()
    }
}

/// Deterministic-equivalent channel: every query runs a fresh fixed point,
/// since the auxiliary matrices are coupled to Q.
pub struct DeChannel<'a> {
    pub link: &'a Link<'a>,
    pub de_opts: DeOpts,
}

impl EffectiveChannel for DeChannel<'_> {
    fn eigen_at(&self, q: &CovMatrix) -> Result<EigenChannel> {
        let state = de_fixed_point(self.link, q, &self.de_opts)?;
        let s = self.link.g_mat.adjoint() * &state.gamma_tilde * &self.link.g_mat;
        EigenChannel::from_effective(&s)
    }
    fn rate_at(&self, q: &CovMatrix) -> Result<f64> {
        let state = de_fixed_point(self.link, q, &self.de_opts)?;
        de_rate_tx(&state, self.link, q)
    }
    fn dim(&self) -> usize {
        self.link.scenario.n_tx
    }
}

#[derive(Debug, Clone)]
pub struct DinkelbachReport {
    pub q: CovMatrix,
    pub eta_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Unconstrained EE maximization over PSD Q by Dinkelbach's method. The eta
/// sequence is non-decreasing; iteration stops at the residual tolerance,
/// at the cap (flagged), or when eta stops improving at f64 resolution.
pub fn dinkelbach_q(
    chan: &dyn EffectiveChannel,
    scenario: &Scenario,
    tol: f64,
    max_iters: usize,
) -> Result<DinkelbachReport> {
    let n = chan.dim();
    // The parameter sequence is start-independent; starting inside the
    // nominal power envelope keeps the first fixed point well conditioned
    // when the budget is effectively unbounded.
    let q0 = CovMatrix::uniform(n, scenario.p_max.clamp(1e-6, 10.0));
    let lambda_max = chan.eigen_at(&q0)?.lambdas.max();
    if lambda_max <= 0.0 {
        return Ok(DinkelbachReport {
            q: CovMatrix::zero(n),
            eta_trace: vec![0.0],
            converged: true,
            iterations: 0,
        });
    }

    let mut q = q0;
    let mut eta = chan.rate_at(&q)? / scenario.power_total(q.trace());
    let mut eta_trace = vec![eta];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let eigen = chan.eigen_at(&q)?;
        let q_next = dinkelbach_step(&eigen, eta, scenario.amp_eff);
        let rate = chan.rate_at(&q_next)?;
        let p_tot = scenario.power_total(q_next.trace());
        let residual = rate - eta * p_tot;
        let eta_next = rate / p_tot;
        if residual.abs() <= tol {
            q = q_next;
            if eta_next > eta {
                eta_trace.push(eta_next);
            }
            converged = true;
            break;
        }
        if eta_next <= eta {
            // numerical floor: no further resolvable improvement
            converged = true;
            break;
        }
        eta = eta_next;
        eta_trace.push(eta);
        q = q_next;
    }
    Ok(DinkelbachReport {
        q,
        eta_trace,
        converged,
        iterations,
    })
}

#[derive(Debug, Clone)]
pub struct InnerQResult {
    pub q: CovMatrix,
    /// DE rate at the returned covariance, bits.
    pub rate: f64,
    pub ee: f64,
    pub eta_trace: Vec<f64>,
    pub dinkelbach_iters: usize,
    /// True when the budget bound forced the full-power water-filling branch.
    pub budget_bound: bool,
}

/// Optimal covariance for fixed geometry: the unconstrained Dinkelbach
/// solution when it fits the power budget, otherwise water-filling at full
/// power. Both paths re-derive the eigen-channel from fresh fixed points as
/// the covariance moves.
pub fn inner_q(link: &Link, params: &RunParams) -> Result<InnerQResult> {
    let chan = DeChannel {
        link,
        de_opts: DeOpts {
            tol: params.de_tol,
            max_iters: params.l_de,
            damping: 0.0,
        },
    };
    let scenario = link.scenario;
    let rep = dinkelbach_q(&chan, scenario, params.dinkelbach_tol, params.dinkelbach_max_iters)?;
    if rep.q.trace() <= scenario.p_max + 1e-9 {
        let rate = chan.rate_at(&rep.q)?;
        return Ok(InnerQResult {
            ee: rate / scenario.power_total(rep.q.trace()),
            rate,
            q: rep.q,
            eta_trace: rep.eta_trace,
            dinkelbach_iters: rep.iterations,
            budget_bound: false,
        });
    }

    // full-power branch: iterate water-filling and eigen refresh to a
    // self-consistent covariance
    let mut q = CovMatrix::uniform(scenario.n_tx, scenario.p_max);
    for _ in 0..30 {
        let eigen = chan.eigen_at(&q)?;
        let q_next = waterfill(&eigen, scenario.p_max)?;
        let delta = linalg::max_abs(&(q_next.matrix() - q.matrix()));
        q = q_next;
        if delta < 1e-9 * scenario.p_max {
            break;
        }
    }
    let rate = chan.rate_at(&q)?;
    Ok(InnerQResult {
        ee: rate / scenario.power_total(q.trace()),
        rate,
        q,
        eta_trace: rep.eta_trace,
        dinkelbach_iters: rep.iterations,
        budget_bound: true,
    })
}

/// The transmit-phase context: everything fixed while the transmit APV moves.
pub struct TxContext<'a> {
    pub scenario: &'a Scenario,
    pub scsi: &'a ScsiState,
    pub apv_r: &'a Apv,
    pub params: &'a RunParams,
}

/// EE as a function of the transmit APV: inner covariance solve composed
/// with the DE rate and the power model.
pub fn ee_of_t(apv_t: &Apv, ctx: &TxContext) -> Result<f64> {
    let link = Link::new(ctx.scenario, ctx.scsi, apv_t, ctx.apv_r)?;
    let inner = inner_q(&link, ctx.params)?;
    Ok(energy_efficiency(inner.rate, &inner.q, ctx.scenario))
}

/// Forward divided difference of `objective` per coordinate. Probe points are
/// not projected back to the feasible set.
pub fn fd_gradient(
    objective: &dyn Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    eps1: f64,
) -> Result<Vec<f64>> {
    let (grad, _) = fd_gradient_with_base(objective, x, eps1)?;
    Ok(grad)
}

pub fn fd_gradient_with_base(
    objective: &dyn Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    eps1: f64,
) -> Result<(Vec<f64>, f64)> {
    if eps1 <= 0.0 {
        return Err(Error::Config("eps1 must be positive".into()));
    }
    let base = objective(x)?;
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let saved = probe[i];
        probe[i] = saved + eps1;
        let f = objective(&probe)?;
        grad.push((f - base) / eps1);
        probe[i] = saved;
    }
    Ok((grad, base))
}

/// First-order (Cauchy-Schwarz) surrogates of the pairwise min-distance
/// constraints at a reference APV: for each pair i < j,
/// (t_i - t_j)' u_ij >= D with u_ij the unit reference direction. Returned
/// in flat-coordinate form a' x >= b for the QP solver. Any point satisfying
/// a surrogate satisfies the true constraint for that pair.
pub fn linearize_min_distance(apv_ref: &Apv, d: f64) -> Result<Vec<(DVector<f64>, f64)>> {
    let n = apv_ref.len();
    let mut out = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = apv_ref.0[i][0] - apv_ref.0[j][0];
            let dy = apv_ref.0[i][1] - apv_ref.0[j][1];
            let norm = dx.hypot(dy);
            if norm < 1e-12 {
                return Err(Error::Numerical(format!(
                    "coincident reference positions {i} and {j}"
                )));
            }
            let mut a = DVector::zeros(2 * n);
            a[2 * i] = dx / norm;
            a[2 * i + 1] = dy / norm;
            a[2 * j] = -dx / norm;
            a[2 * j + 1] = -dy / norm;
            out.push((a, d));
        }
    }
    Ok(out)
}

fn satisfies_linearized(constraints: &[(DVector<f64>, f64)], x: &DVector<f64>) -> bool {
    constraints.iter().all(|(a, b)| a.dot(x) >= b - 1e-9)
}

/// SCA loop settings distilled from the run parameters.
#[derive(Debug, Clone, Copy)]
pub struct ScaSettings {
    pub delta: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub max_iters: usize,
    pub tau0: f64,
    pub tau_factor: f64,
    pub xi: f64,
    pub verbatim_shortcut: bool,
}

impl ScaSettings {
    pub fn tx(params: &RunParams) -> Self {
        ScaSettings {
            delta: params.delta_t,
            eps1: params.eps1,
            eps2: params.eps2,
            max_iters: params.l_sca_t,
            tau0: params.tau0,
            tau_factor: params.tau_factor,
            xi: params.xi,
            verbatim_shortcut: params.verbatim_shortcut,
        }
    }
}

pub struct ScaOutcome {
    pub apv: Apv,
    pub objective_trace: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub iterations: usize,
}

const MIN_TAU: f64 = 1e-6;

/// Generic SCA ascent of `objective` over APVs in a centered square with
/// pairwise min-distance constraints. Per iteration: forward-difference
/// gradient, proximal-surrogate candidate (clamped shortcut, or the
/// constrained QP when the shortcut breaks a linearized constraint), then
/// Armijo backtracking on the true objective increment. Accepted iterates
/// always satisfy the true constraints; the loop stops when the increment
/// drops to eps2, the cap is reached, or the line search exhausts.
pub fn sca_maximize(
    objective: &dyn Fn(&Apv) -> Result<f64>,
    apv0: &Apv,
    region_side: f64,
    min_dist: f64,
    s: &ScaSettings,
) -> Result<ScaOutcome> {
    if !apv0.is_feasible(region_side, min_dist, 1e-9) {
        return Err(Error::Infeasible("SCA start point violates constraints".into()));
    }
    let n = apv0.len();
    let flat_obj = |coords: &[f64]| objective(&Apv::from_flat(coords));
    let mut apv = apv0.clone();
    let mut value = objective(&apv)?;
    let mut trace = vec![value];
    let mut steps = Vec::new();
    let mut iterations = 0;

    for _ in 0..s.max_iters {
        iterations += 1;
        let flat = apv.flat();
        let (grad, base) = fd_gradient_with_base(&flat_obj, &flat, s.eps1)?;
        value = base;
        let grad_v = DVector::from_vec(grad);
        if grad_v.norm() == 0.0 {
            break;
        }

        // surrogate candidate: clamped shortcut first, QP if it breaks the
        // linearized separation constraints
        let x_ref = DVector::from_vec(flat.clone());
        let shortcut_raw = if s.verbatim_shortcut {
            &grad_v / (2.0 * s.delta)
        } else {
            &x_ref + &grad_v / (2.0 * s.delta)
        };
        let shortcut = Apv::from_flat(shortcut_raw.as_slice())
            .clamp_to_square(region_side);
        let constraints = if n > 1 {
            linearize_min_distance(&apv, min_dist)?
        } else {
            Vec::new()
        };
        let shortcut_flat = DVector::from_vec(shortcut.flat());
        let candidate = if satisfies_linearized(&constraints, &shortcut_flat) {
            shortcut
        } else {
            let h = region_side / 2.0;
            let problem = QpProblem {
                quad: -nalgebra::DMatrix::identity(2 * n, 2 * n) * s.delta,
                lin: &grad_v + &x_ref * (2.0 * s.delta),
                ineq: constraints,
                box_lo: DVector::from_element(2 * n, -h),
                box_hi: DVector::from_element(2 * n, h),
            };
            let sol = solve_qp(&problem, &x_ref, 1e-7, 100)?;
            Apv::from_flat(sol.as_slice()).clamp_to_square(region_side)
        };

        let direction = DVector::from_vec(candidate.flat()) - &x_ref;
        let dir_norm2 = direction.norm_squared();
        if dir_norm2 <= 1e-24 {
            break;
        }

        // backtracking on the true increment; feasibility is re-checked on
        // every trial and a violating step just shrinks
        let mut tau = s.tau0;
        let mut accepted: Option<(Apv, f64, f64)> = None;
        while tau >= MIN_TAU {
            let trial_flat = &x_ref + &direction * tau;
            let trial = Apv::from_flat(trial_flat.as_slice()).clamp_to_square(region_side);
            if trial.min_pair_distance() >= min_dist - 1e-9 {
                let trial_value = objective(&trial)?;
                let increment = trial_value - value;
                if increment >= s.xi * tau * tau * dir_norm2 {
                    accepted = Some((trial, trial_value, tau));
                    break;
                }
            }
            tau *= s.tau_factor;
        }

        let Some((next, next_value, tau_used)) = accepted else {
            break; // line search exhausted: keep the current iterate
        };
        let increment = next_value - value;
        apv = next;
        value = next_value;
        trace.push(value);
        steps.push(tau_used);
        if increment <= s.eps2 {
            break;
        }
    }

    Ok(ScaOutcome {
        apv,
        objective_trace: trace,
        step_sizes: steps,
        iterations,
    })
}

/// Transmit solve report: final placement and covariance plus the EE trace.
#[derive(Debug, Clone)]
pub struct TxSolveReport {
    pub apv_t: Apv,
    pub q: CovMatrix,
    pub ee: f64,
    pub rate: f64,
    pub ee_trace: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub eta_trace: Vec<f64>,
}

/// Solve the transmit subproblem: SCA over the APV with the covariance
/// nested inside the objective.
pub fn sca_optimize_tx(ctx: &TxContext, apv_t0: &Apv) -> Result<TxSolveReport> {
    let objective = |apv: &Apv| ee_of_t(apv, ctx);
    let outcome = sca_maximize(
        &objective,
        apv_t0,
        ctx.scenario.region_tx,
        ctx.scenario.min_dist,
        &ScaSettings::tx(ctx.params),
    )?;
    let link = Link::new(ctx.scenario, ctx.scsi, &outcome.apv, ctx.apv_r)?;
    let inner = inner_q(&link, ctx.params)?;
    Ok(TxSolveReport {
        apv_t: outcome.apv,
        ee: inner.ee,
        rate: inner.rate,
        q: inner.q,
        ee_trace: outcome.objective_trace,
        step_sizes: outcome.step_sizes,
        inner_iters: inner.dinkelbach_iters,
        outer_iters: outcome.iterations,
        eta_trace: inner.eta_trace,
    })
}
