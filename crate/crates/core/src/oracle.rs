//! Monte Carlo ground truth for the ergodic rate and the energy-efficiency
//! ratio. Rates are in bits per channel use throughout.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::scenario::{field_response_rx, field_response_tx, sample_channel, Apv, Scenario, ScsiState};

/// Hermitian PSD transmit covariance. Construction symmetrizes, clips tiny
/// negative eigenvalues, and caches the PSD square root.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    q: CMat,
    sqrt: CMat,
    trace: f64,
}

impl CovMatrix {
    pub fn from_matrix(m: CMat) -> Result<CovMatrix> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension("covariance must be square".into()));
        }
        let defect = linalg::hermitian_defect(&m);
        if defect > 1e-10 * (1.0 + linalg::max_abs(&m)) {
            return Err(Error::Numerical(format!(
                "covariance not Hermitian (defect {defect:.3e})"
            )));
        }
        let (u, vals) = linalg::herm_eigen(&m);
        let scale = vals.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if let Some(bad) = vals.iter().find(|&&v| v < -1e-10 * (1.0 + scale)) {
            return Err(Error::Numerical(format!(
                "covariance indefinite (eigenvalue {bad:.3e})"
            )));
        }
        let clipped: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
        let q = &u * linalg::diag_re(&clipped) * u.adjoint();
        let sqrt_vals: Vec<f64> = clipped.iter().map(|v| v.sqrt()).collect();
        let sqrt = &u * linalg::diag_re(&sqrt_vals) * u.adjoint();
        let trace = clipped.iter().sum();
        Ok(CovMatrix { q, sqrt, trace })
    }

    pub fn zero(n: usize) -> CovMatrix {
        CovMatrix {
            q: CMat::zeros(n, n),
            sqrt: CMat::zeros(n, n),
            trace: 0.0,
        }
    }

    /// (total_power / n) * I.
    pub fn uniform(n: usize, total_power: f64) -> CovMatrix {
        let p = total_power / n as f64;
        CovMatrix {
            q: CMat::identity(n, n).scale(p),
            sqrt: CMat::identity(n, n).scale(p.sqrt()),
            trace: total_power,
        }
    }

    /// U diag(powers) U^H from an eigenbasis and nonnegative mode powers.
    pub fn from_eigen(u: &CMat, powers: &[f64]) -> CovMatrix {
        let q = u * linalg::diag_re(powers) * u.adjoint();
        let sqrt_vals: Vec<f64> = powers.iter().map(|p| p.max(0.0).sqrt()).collect();
        let sqrt = u * linalg::diag_re(&sqrt_vals) * u.adjoint();
        CovMatrix {
            q: linalg::hermitize(&q),
            sqrt: linalg::hermitize(&sqrt),
            trace: powers.iter().map(|p| p.max(0.0)).sum(),
        }
    }

    pub fn matrix(&self) -> &CMat {
        &self.q
    }

    /// Hermitian PSD square root (Q^{1/2} = Q^{H/2}).
    pub fn sqrt(&self) -> &CMat {
        &self.sqrt
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn within_budget(&self, p_max: f64) -> bool {
        self.trace <= p_max + 1e-9
    }

    /// Eigenvalues, descending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let (_, vals) = linalg::herm_eigen(&self.q);
        vals.iter().copied().collect()
    }
}

/// Sample-mean rate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n_samples: usize,
}

/// Monte Carlo estimate of E log2 det(I + H Q H^H / sigma^2) over the NLOS
/// fading. Sample i draws from stream i of the seed, so the result does not
/// depend on how the loop is scheduled.
pub fn mc_average_rate(
    scenario: &Scenario,
    scsi: &ScsiState,
    apv_t: &Apv,
    apv_r: &Apv,
    q: &CovMatrix,
    n_samples: usize,
    seed: u64,
) -> Result<RateEstimate> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    if q.dim() != apv_t.len() {
        return Err(Error::Dimension(format!(
            "covariance is {}x{} but there are {} transmit antennas",
            q.dim(),
            q.dim(),
            apv_t.len()
        )));
    }
    let g = field_response_tx(apv_t, &scsi.tx_angles);
    let f = field_response_rx(apv_r, &scsi.rx_angles);
    let q_sqrt = q.sqrt().clone();
    let inv_sigma2 = 1.0 / scenario.noise_power;
    let base = ChaCha12Rng::seed_from_u64(seed);

    let samples: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = base.clone();
            rng.set_stream(i as u64);
            let h = sample_channel(scsi, &g, &f, &mut rng).expect("dims checked");
            let hq = &h * &q_sqrt;
            let s = (&hq * hq.adjoint()).scale(inv_sigma2);
            linalg::logdet2_i_plus(&s)
        })
        .collect();

    // sequential reduction keeps the result independent of worker count
    let n = n_samples as f64;
    let degenerate = samples.iter().all(|&x| x == samples[0]);
    let mean = if degenerate {
        samples[0]
    } else {
        samples.iter().sum::<f64>() / n
    };
    let var = if n_samples > 1 && !degenerate {
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(RateEstimate {
        mean,
        std_err: (var / n).sqrt(),
        n_samples,
    })
}

/// rate / (omega tr(Q) + N P_c + P_s).
pub fn energy_efficiency(rate: f64, q: &CovMatrix, scenario: &Scenario) -> f64 {
    rate / scenario.power_total(q.trace())
}

/// Random PSD covariance with the given trace, for validation sweeps.
pub fn random_cov(n: usize, trace: f64, seed: u64) -> CovMatrix {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let a = CMat::from_fn(n, n, |_, _| {
        Complex64::new(
            rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal),
            rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal),
        )
    });
    let mut q = &a * a.adjoint();
    let tr = q.trace().re;
    q.scale_mut(trace / tr);
    CovMatrix::from_matrix(q).expect("A A^H is PSD")
}

/// Pseudo-random feasible APV: rejection-sampled positions in the region
/// respecting the minimum distance.
pub fn random_feasible_apv(side: f64, count: usize, min_dist: f64, seed: u64) -> Result<Apv> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let h = side / 2.0;
    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while positions.len() < count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Infeasible(format!(
                "could not sample {count} positions at distance {min_dist} in side {side}"
            )));
        }
        let cand = [
            h * (2.0 * rand::Rng::random::<f64>(&mut rng) - 1.0),
            h * (2.0 * rand::Rng::random::<f64>(&mut rng) - 1.0),
        ];
        if positions
            .iter()
            .all(|p| (p[0] - cand[0]).hypot(p[1] - cand[1]) >= min_dist)
        {
            positions.push(cand);
        }
    }
    Ok(Apv(positions))
}

/// Per-mode powers as a vector (test helper for KKT checks).
pub fn mode_powers(q: &CovMatrix, u: &CMat) -> DVector<f64> {
    let m = u.adjoint() * q.matrix() * u;
    DVector::from_iterator(m.nrows(), (0..m.nrows()).map(|i| m[(i, i)].re))
}
