//! Deterministic-equivalent machinery: the coupled fixed point of the
//! auxiliary matrices, the eta maps, and the two deterministic rate
//! functions (transmit view and receive view).
//!
//! Conventions: rates in bits; Theta and Theta-tilde come out negative
//! definite (their entries are O(1/sigma^2)), so the fixed-point residual is
//! measured on the sigma^2-scaled iterates, which are O(1).

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, LN2};
use crate::oracle::CovMatrix;
use crate::scenario::{field_response_rx, field_response_tx, Apv, Scenario, ScsiState};

/// A fully assembled propagation context: field responses and the mean
/// channel for one (scenario, scsi, geometry) triple.
#[derive(Debug, Clone)]
pub struct Link<'a> {
    pub scenario: &'a Scenario,
    pub scsi: &'a ScsiState,
    pub apv_t: &'a Apv,
    pub apv_r: &'a Apv,
    pub g_mat: CMat,
    pub f_mat: CMat,
    pub h_bar: CMat,
}

impl<'a> Link<'a> {
    pub fn new(
        scenario: &'a Scenario,
        scsi: &'a ScsiState,
        apv_t: &'a Apv,
        apv_r: &'a Apv,
    ) -> Result<Self> {
        if scsi.tx_angles.len() != scenario.l_tx
            || scsi.rx_angles.len() != scenario.l_rx
            || apv_t.len() != scenario.n_tx
            || apv_r.len() != scenario.n_rx
        {
            return Err(Error::Dimension(
                "scsi/apv dimensions do not match the scenario".into(),
            ));
        }
        let g_mat = field_response_tx(apv_t, &scsi.tx_angles);
        let f_mat = field_response_rx(apv_r, &scsi.rx_angles);
        let h_bar = f_mat.adjoint() * &scsi.sigma_bar * &g_mat;
        Ok(Link {
            scenario,
            scsi,
            apv_t,
            apv_r,
            g_mat,
            f_mat,
            h_bar,
        })
    }
}

/// Fixed-point iteration options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeOpts {
    pub tol: f64,
    pub max_iters: usize,
    /// Convex-combination weight on the previous iterate (0 = none).
    pub damping: f64,
}

impl Default for DeOpts {
    fn default() -> Self {
        DeOpts {
            tol: 1e-8,
            max_iters: 20,
            damping: 0.0,
        }
    }
}

/// Converged auxiliary matrices of the deterministic equivalent.
#[derive(Debug, Clone)]
pub struct DeState {
    pub phi: CMat,
    pub phi_tilde: CMat,
    pub theta: CMat,
    pub theta_tilde: CMat,
    pub gamma_tilde: CMat,
    pub gamma: CMat,
    pub iterations_used: usize,
    pub residual: f64,
    pub residual_trace: Vec<f64>,
    pub converged: bool,
}

/// eta(Theta-tilde) = Diag{ M^H Diag{ F Theta-tilde F^H } M }, an
/// L_t x L_t diagonal matrix (the NLOS feedback seen from the transmit side).
pub fn eta_map(theta_tilde: &CMat, f_mat: &CMat, gain_mat: &nalgebra::DMatrix<f64>) -> Result<CMat> {
    let l_r = f_mat.nrows();
    if theta_tilde.nrows() != f_mat.ncols() || gain_mat.nrows() != l_r {
        return Err(Error::Dimension("eta_map dimensions".into()));
    }
    let inner = f_mat * theta_tilde * f_mat.adjoint();
    let l_t = gain_mat.ncols();
    let mut entries = DVector::from_element(l_t, Complex64::new(0.0, 0.0));
    for p in 0..l_t {
        let mut acc = Complex64::new(0.0, 0.0);
        for l in 0..l_r {
            let m = gain_mat[(l, p)];
            if m != 0.0 {
                acc += m * m * inner[(l, l)];
            }
        }
        entries[p] = acc;
    }
    Ok(linalg::diag(&entries))
}

/// eta-tilde(Theta) = Diag{ M Diag{ G Q^{1/2} Theta Q^{H/2} G^H } M^H }, an
/// L_r x L_r diagonal matrix.
pub fn eta_tilde_map(
    theta: &CMat,
    g_mat: &CMat,
    q_half: &CMat,
    gain_mat: &nalgebra::DMatrix<f64>,
) -> Result<CMat> {
    let l_t = g_mat.nrows();
    if theta.nrows() != q_half.ncols() || q_half.nrows() != g_mat.ncols() || gain_mat.ncols() != l_t
    {
        return Err(Error::Dimension("eta_tilde_map dimensions".into()));
    }
    let gq = g_mat * q_half;
    let inner = &gq * theta * gq.adjoint();
    let l_r = gain_mat.nrows();
    let mut entries = DVector::from_element(l_r, Complex64::new(0.0, 0.0));
    for l in 0..l_r {
        let mut acc = Complex64::new(0.0, 0.0);
        for p in 0..l_t {
            let m = gain_mat[(l, p)];
            if m != 0.0 {
                acc += m * m * inner[(p, p)];
            }
        }
        entries[l] = acc;
    }
    Ok(linalg::diag(&entries))
}

/// Run the coupled fixed point for a given covariance. Non-convergence is
/// flagged on the returned state, not fatal.
pub fn de_fixed_point(link: &Link, q: &CovMatrix, opts: &DeOpts) -> Result<DeState> {
    let n = link.scenario.n_tx;
    let m = link.scenario.n_rx;
    if q.dim() != n {
        return Err(Error::Dimension(format!(
            "covariance is {}-dim but there are {n} transmit antennas",
            q.dim()
        )));
    }
    let sigma2 = link.scenario.noise_power;
    let q_half = q.sqrt();
    let hq = &link.h_bar * q_half; // H-bar Q^{1/2}, M x N
    let gain = &link.scsi.gain_mat;

    let mut phi = CMat::identity(n, n);
    let mut phi_tilde = CMat::identity(m, m);
    let mut theta = CMat::zeros(n, n);
    let mut theta_tilde = CMat::zeros(m, m);

    let mut residual = f64::INFINITY;
    let mut residual_trace = Vec::new();
    let mut converged = false;
    let mut iterations_used = 0;

    for sweep in 1..=opts.max_iters {
        iterations_used = sweep;
        let phi_tilde_inv = linalg::inv(&phi_tilde, "Phi-tilde")?;
        let phi_inv = linalg::inv(&phi, "Phi")?;

        let mut theta_new = linalg::inv(
            &(-(phi.scale(sigma2)) - hq.adjoint() * &phi_tilde_inv * &hq),
            "Theta update",
        )?;
        let mut theta_tilde_new = linalg::inv(
            &(-(phi_tilde.scale(sigma2)) - &hq * &phi_inv * hq.adjoint()),
            "Theta-tilde update",
        )?;
        theta_new = linalg::hermitize(&theta_new);
        theta_tilde_new = linalg::hermitize(&theta_tilde_new);
        if opts.damping > 0.0 && sweep > 1 {
            theta_new = theta_new.scale(1.0 - opts.damping) + theta.scale(opts.damping);
            theta_tilde_new =
                theta_tilde_new.scale(1.0 - opts.damping) + theta_tilde.scale(opts.damping);
        }

        // residual on the sigma^2-scaled iterates, which are O(1)
        residual = sigma2
            * linalg::max_abs(&(&theta_new - &theta))
                .max(linalg::max_abs(&(&theta_tilde_new - &theta_tilde)));
        residual_trace.push(residual);
        theta = theta_new;
        theta_tilde = theta_tilde_new;

        let eta = eta_map(&theta_tilde, &link.f_mat, gain)?;
        let eta_tilde = eta_tilde_map(&theta, &link.g_mat, q_half, gain)?;
        phi_tilde = linalg::hermitize(
            &(CMat::identity(m, m) - link.f_mat.adjoint() * eta_tilde * &link.f_mat),
        );
        let gq = &link.g_mat * q_half;
        phi = linalg::hermitize(&(CMat::identity(n, n) - gq.adjoint() * eta * &gq));

        if residual < opts.tol {
            converged = true;
            break;
        }
    }

    // Gamma-tilde = -eta(Theta-tilde) + Sigma-bar^H F Phi-tilde^{-1} F^H Sigma-bar / sigma^2
    let phi_tilde_inv = linalg::inv(&phi_tilde, "Phi-tilde (final)")?;
    let eta = eta_map(&theta_tilde, &link.f_mat, gain)?;
    let sb = &link.scsi.sigma_bar;
    let gamma_tilde = linalg::hermitize(
        &(-eta
            + (sb.adjoint() * &link.f_mat * &phi_tilde_inv * link.f_mat.adjoint() * sb)
                .scale(1.0 / sigma2)),
    );

    // Gamma = -eta-tilde(Theta) + Sigma-bar G Q^{1/2} Phi^{-1} Q^{H/2} G^H Sigma-bar^H / sigma^2
    let phi_inv = linalg::inv(&phi, "Phi (final)")?;
    let eta_tilde = eta_tilde_map(&theta, &link.g_mat, q_half, gain)?;
    let gq = &link.g_mat * q_half;
    let gamma = linalg::hermitize(
        &(-eta_tilde + (sb * &gq * &phi_inv * gq.adjoint() * sb.adjoint()).scale(1.0 / sigma2)),
    );

    Ok(DeState {
        phi,
        phi_tilde,
        theta,
        theta_tilde,
        gamma_tilde,
        gamma,
        iterations_used,
        residual,
        residual_trace,
        converged,
    })
}

/// Deterministic-equivalent rate seen from the transmit variables, bits:
/// logdet(I_N + G^H Gamma-tilde G Q) + logdet(Phi-tilde)
/// - sigma^2 tr((I_M - Phi-tilde) Theta-tilde), all over ln 2.
pub fn de_rate_tx(state: &DeState, link: &Link, q: &CovMatrix) -> Result<f64> {
    let n = link.scenario.n_tx;
    let m = link.scenario.n_rx;
    let sigma2 = link.scenario.noise_power;

    // det(I + S Q) = det(I + Q^{1/2} S Q^{1/2}): take the Hermitian route
    let s = link.g_mat.adjoint() * &state.gamma_tilde * &link.g_mat;
    let defect = linalg::hermitian_defect(&s);
    if defect > 1e-6 * (1.0 + linalg::max_abs(&s)) {
        return Err(Error::Numerical(format!(
            "effective transmit channel not Hermitian (defect {defect:.3e})"
        )));
    }
    let arg = q.sqrt() * linalg::hermitize(&s) * q.sqrt();
    let term1 = linalg::logdet2_i_plus(&arg) * LN2;

    let term2 = linalg::logdet2_hpd(&state.phi_tilde)? * LN2;
    let resid = (CMat::identity(m, m) - &state.phi_tilde) * &state.theta_tilde;
    let term3 = sigma2 * linalg::real_trace(&resid.scale(1.0), 1e-8, "(I - Phi-tilde) Theta-tilde")?;

    let nats = term1 + term2 - term3;
    debug_assert!(n == q.dim());
    Ok(nats / LN2)
}

/// Deterministic-equivalent rate seen from the receive APV, bits:
/// logdet(I_M + F^H Gamma F) + logdet(Phi) - sigma^2 tr((I_N - Phi) Theta).
pub fn de_rate_rx(state: &DeState, link: &Link, _q: &CovMatrix) -> Result<f64> {
    let n = link.scenario.n_tx;
    let sigma2 = link.scenario.noise_power;

    let s = link.f_mat.adjoint() * &state.gamma * &link.f_mat;
    let defect = linalg::hermitian_defect(&s);
    if defect > 1e-6 * (1.0 + linalg::max_abs(&s)) {
        return Err(Error::Numerical(format!(
            "effective receive channel not Hermitian (defect {defect:.3e})"
        )));
    }
    let term1 = linalg::logdet2_i_plus(&linalg::hermitize(&s)) * LN2;

    let term2 = linalg::logdet2_hpd(&state.phi)? * LN2;
    let resid = (CMat::identity(n, n) - &state.phi) * &state.theta;
    let term3 = sigma2 * linalg::real_trace(&resid, 1e-8, "(I - Phi) Theta")?;

    Ok((term1 + term2 - term3) / LN2)
}

/// Fixed point plus transmit-view rate in one call.
pub fn de_rate_tx_at(link: &Link, q: &CovMatrix, opts: &DeOpts) -> Result<(DeState, f64)> {
    let state = de_fixed_point(link, q, opts)?;
    let rate = de_rate_tx(&state, link, q)?;
    Ok((state, rate))
}

/// Fixed point plus receive-view rate in one call.
pub fn de_rate_rx_at(link: &Link, q: &CovMatrix, opts: &DeOpts) -> Result<(DeState, f64)> {
    let state = de_fixed_point(link, q, opts)?;
    let rate = de_rate_rx(&state, link, q)?;
    Ok((state, rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{mc_average_rate, random_cov, random_feasible_apv};
    use crate::scenario::{build_scenario, initial_layout, sample_scsi};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::collections::BTreeMap;

    fn table_default() -> Scenario {
        build_scenario(&BTreeMap::new()).unwrap()
    }

    struct Instance {
        sc: Scenario,
        scsi: ScsiState,
        t: Apv,
        r: Apv,
    }

    fn random_instance(seed: u64) -> Instance {
        let sc = table_default();
        let scsi = sample_scsi(&sc, seed);
        let t = random_feasible_apv(sc.region_tx, sc.n_tx, sc.min_dist, seed ^ 0xA5).unwrap();
        let r = random_feasible_apv(sc.region_rx, sc.n_rx, sc.min_dist, seed ^ 0x5A).unwrap();
        Instance { sc, scsi, t, r }
    }

    fn grid_instance(seed: u64) -> Instance {
        let sc = table_default();
        let scsi = sample_scsi(&sc, seed);
        let t = initial_layout(sc.region_tx, sc.n_tx, sc.min_dist).unwrap();
        let r = initial_layout(sc.region_rx, sc.n_rx, sc.min_dist).unwrap();
        Instance { sc, scsi, t, r }
    }

    #[test]
    fn eta_maps_vanish_on_zero_input() {
        let inst = grid_instance(1);
        let link = Link::new(&inst.sc, &inst.scsi, &inst.t, &inst.r).unwrap();
        let z_m = CMat::zeros(4, 4);
        let eta = eta_map(&z_m, &link.f_mat, &inst.scsi.gain_mat).unwrap();
        assert_eq!(linalg::max_abs(&eta), 0.0);
        let zero_gain = nalgebra::DMatrix::zeros(5, 5);
        let some = linalg::diag_re(&[1.0, 2.0, 3.0, 4.0]);
        let eta = eta_map(&some, &link.f_mat, &zero_gain).unwrap();
        assert_eq!(linalg::max_abs(&eta), 0.0);

        let q = CovMatrix::zero(4);
        let etat = eta_tilde_map(&some, &link.g_mat, q.sqrt(), &inst.scsi.gain_mat).unwrap();
        assert_eq!(linalg::max_abs(&etat), 0.0);
    }

    /// eta(Theta-tilde) equals the Monte Carlo expectation of
    /// Sigma-tilde^H F Theta-tilde F^H Sigma-tilde, entrywise within 3 SE.
    #[test]
    fn eta_map_matches_expectation() {
        let inst = grid_instance(2);
        let link = Link::new(&inst.sc, &inst.scsi, &inst.t, &inst.r).unwrap();
        // a fixed random Hermitian argument
        let b = random_cov(4, 3.0, 17);
        let theta_tilde = b.matrix().clone();

        let n_trials = 2_000;
        let l_t = inst.sc.l_tx;
        let mut mean = CMat::zeros(l_t, l_t);
        let mut m2 = nalgebra::DMatrix::<f64>::zeros(l_t, l_t);
        let mut samples = Vec::with_capacity(n_trials);
        let base = ChaCha12Rng::seed_from_u64(23);
        for i in 0..n_trials {
            let mut rng = base.clone();
            rng.set_stream(i as u64);
            // draw Sigma-tilde = gain .* W
            let mut sigma_tilde = CMat::zeros(inst.sc.l_rx, l_t);
            for r in 0..inst.sc.l_rx {
                for c in 0..l_t {
                    let m = inst.scsi.gain_mat[(r, c)];
                    if m != 0.0 {
                        let w = Complex64::new(
                            rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal),
                            rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal),
                        ) * std::f64::consts::FRAC_1_SQRT_2;
                        sigma_tilde[(r, c)] = m * w;
                    }
                }
            }
            let sample = sigma_tilde.adjoint() * &link.f_mat * &theta_tilde
                * link.f_mat.adjoint()
                * &sigma_tilde;
            mean += &sample;
            samples.push(sample);
        }
        mean /= Complex64::new(n_trials as f64, 0.0);
        for s in &samples {
            for i in 0..l_t {
                for j in 0..l_t {
                    m2[(i, j)] += (s[(i, j)] - mean[(i, j)]).norm_sqr();
                }
            }
        }
        let eta = eta_map(&theta_tilde, &link.f_mat, &inst.scsi.gain_mat).unwrap();
        for i in 0..l_t {
            for j in 0..l_t {
                let se = (m2[(i, j)] / (n_trials as f64 - 1.0) / n_trials as f64).sqrt();
                let diff = (mean[(i, j)] - eta[(i, j)]).norm();
                assert!(
                    diff <= 3.0 * se + 1e-12,
                    "entry ({i},{j}): |mc - eta| = {diff:.3e}, 3se = {:.3e}",
                    3.0 * se
                );
            }
        }
    }

    #[test]
    fn fixed_point_at_zero_covariance() {
        let inst = grid_instance(3);
        let link = Link::new(&inst.sc, &inst.scsi, &inst.t, &inst.r).unwrap();
        let state = de_fixed_point(&link, &CovMatrix::zero(4), &DeOpts::default()).unwrap();
        assert!(state.converged);
        assert!(state.iterations_used <= 2);
        let s2 = inst.sc.noise_power;
        assert!(linalg::max_abs(&(&state.phi - CMat::identity(4, 4))) < 1e-12);
        assert!(linalg::max_abs(&(&state.phi_tilde - CMat::identity(4, 4))) < 1e-12);
        assert!(linalg::max_abs(&(&state.theta + CMat::identity(4, 4).scale(1.0 / s2))) < 1e-3 / s2);
        assert!(
            linalg::max_abs(&(&state.theta_tilde + CMat::identity(4, 4).scale(1.0 / s2)))
                < 1e-3 / s2
        );
        let rate = de_rate_tx(&state, &link, &CovMatrix::zero(4)).unwrap();
        assert_eq!(rate, 0.0);
        let rate_rx = de_rate_rx(&state, &link, &CovMatrix::zero(4)).unwrap();
        assert_eq!(rate_rx, 0.0);
    }

    #[test]
    fn fixed_point_pure_los_reduces_symbolically() {
        let inst = grid_instance(4);
        let mut scsi = inst.scsi.clone();
        scsi.gain_mat.fill(0.0);
        let link = Link::new(&inst.sc, &scsi, &inst.t, &inst.r).unwrap();
        let q = random_cov(4, inst.sc.p_max, 31);
        let state = de_fixed_point(&link, &q, &DeOpts::default()).unwrap();
        assert!(state.converged);
        assert!(linalg::max_abs(&(&state.phi - CMat::identity(4, 4))) < 1e-12);
        assert!(linalg::max_abs(&(&state.phi_tilde - CMat::identity(4, 4))) < 1e-12);
        // Gamma-tilde = Sigma-bar^H F F^H Sigma-bar / sigma^2
        let sb = &scsi.sigma_bar;
        let expected = (sb.adjoint() * &link.f_mat * link.f_mat.adjoint() * sb)
            .scale(1.0 / inst.sc.noise_power);
        assert!(
            linalg::max_abs(&(&state.gamma_tilde - &expected)) < 1e-9 * linalg::max_abs(&expected)
        );

        // both DE rates equal the deterministic LOS log-det
        let rate_tx = de_rate_tx(&state, &link, &q).unwrap();
        let rate_rx = de_rate_rx(&state, &link, &q).unwrap();
        let hq = &link.h_bar * q.sqrt();
        let los = linalg::logdet2_i_plus(&(&hq * hq.adjoint()).scale(1.0 / inst.sc.noise_power));
        assert_relative_eq!(rate_tx, los, max_relative = 1e-9);
        assert_relative_eq!(rate_rx, los, max_relative = 1e-9);
    }

    #[test]
    fn fixed_point_residual_decreases_monotonically() {
        // Full power at short range contracts slowly; the residual still
        // decreases every sweep and the truncated state is flagged honestly.
        let inst = grid_instance(5);
        let link = Link::new(&inst.sc, &inst.scsi, &inst.t, &inst.r).unwrap();
        let q = CovMatrix::uniform(4, inst.sc.p_max);
        let state = de_fixed_point(&link, &q, &DeOpts::default()).unwrap();
        for w in state.residual_trace.windows(2).skip(1) {
            assert!(w[1] <= w[0] * 1.05, "residual trace {:?}", state.residual_trace);
        }
        let long = de_fixed_point(
            &link,
            &q,
            &DeOpts {
                max_iters: 200,
                ..DeOpts::default()
            },
        )
        .unwrap();
        assert!(long.converged, "residual {:.3e} after 200 sweeps", long.residual);

        // seed-independent: no randomness in the iteration
        let again = de_fixed_point(&link, &q, &DeOpts::default()).unwrap();
        assert_eq!(linalg::max_abs(&(&state.theta - &again.theta)), 0.0);
    }

    #[test]
    fn fixed_point_converges_within_default_cap_at_moderate_power() {
        let inst = grid_instance(3);
        let link = Link::new(&inst.sc, &inst.scsi, &inst.t, &inst.r).unwrap();
        let q = CovMatrix::uniform(4, inst.sc.p_max * 0.05);
        let state = de_fixed_point(&link, &q, &DeOpts::default()).unwrap();
        assert!(
            state.converged && state.iterations_used <= 20,
            "iters {} residual {:.3e}",
            state.iterations_used,
            state.residual
        );
    }

    #[test]
    fn de_rates_match_monte_carlo_and_each_other() {
        let mut worst_tx = 0.0f64;
        let mut worst_cross = 0.0f64;
        for seed in 0..4u64 {
            let inst = random_instance(100 + seed);
            let link = Link::new(&inst.sc, &inst.scsi, &inst.t, &inst.r).unwrap();
            let q = random_cov(4, inst.sc.p_max * (0.4 + 0.15 * seed as f64), 50 + seed);
            let state = de_fixed_point(&link, &q, &DeOpts::default()).unwrap();
            let rate_tx = de_rate_tx(&state, &link, &q).unwrap();
            let rate_rx = de_rate_rx(&state, &link, &q).unwrap();
            let mc = mc_average_rate(&inst.sc, &inst.scsi, &inst.t, &inst.r, &q, 100_000, 7 + seed)
                .unwrap();
            let rel_tx = (rate_tx - mc.mean).abs() / mc.mean;
            let rel_cross = (rate_rx - rate_tx).abs() / rate_tx;
            worst_tx = worst_tx.max(rel_tx);
            worst_cross = worst_cross.max(rel_cross);
            assert!(rate_tx >= -1e-9 && rate_rx >= -1e-9);
        }
        assert!(worst_tx <= 0.05, "worst DE-vs-MC relative error {worst_tx}");
        assert!(worst_cross <= 0.02, "worst cross-DE relative error {worst_cross}");
    }

    #[test]
    fn de_rate_concave_along_segments() {
        let inst = random_instance(200);
        let link = Link::new(&inst.sc, &inst.scsi, &inst.t, &inst.r).unwrap();
        let opts = DeOpts::default();
        for seed in 0..6u64 {
            let q1 = random_cov(4, inst.sc.p_max * 0.8, 300 + seed);
            let q2 = random_cov(4, inst.sc.p_max * 0.6, 400 + seed);
            let qm = CovMatrix::from_matrix((q1.matrix() + q2.matrix()).scale(0.5)).unwrap();
            let r1 = de_rate_tx_at(&link, &q1, &opts).unwrap().1;
            let r2 = de_rate_tx_at(&link, &q2, &opts).unwrap().1;
            let rm = de_rate_tx_at(&link, &qm, &opts).unwrap().1;
            assert!(
                rm >= 0.5 * (r1 + r2) - 1e-9,
                "midpoint {rm} vs average {}",
                0.5 * (r1 + r2)
            );
        }
    }
}
