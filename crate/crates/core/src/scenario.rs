//! System configuration, antenna geometry, field responses, and channel
//! state sampling.
//!
//! All lengths are stored normalized by the carrier wavelength (lambda = 1):
//! the channel depends on positions only through position / lambda, so the
//! wavelength itself never needs to be known. dBm/dB config fields are
//! converted to linear watts once, at ingestion.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CMat;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Static description of the link: antenna counts, movement regions, power
/// model, and path-loss law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Transmit antennas N.
    pub n_tx: usize,
    /// Receive antennas M.
    pub n_rx: usize,
    /// Transmit paths L_t.
    pub l_tx: usize,
    /// Receive paths L_r.
    pub l_rx: usize,
    /// Side of the transmit movement square, wavelengths.
    pub region_tx: f64,
    /// Side of the receive movement square, wavelengths.
    pub region_rx: f64,
    /// Minimum antenna separation D, wavelengths.
    pub min_dist: f64,
    /// Noise power sigma^2, watts.
    pub noise_power: f64,
    /// Amplifier inefficiency factor omega (multiplies transmit power).
    pub amp_eff: f64,
    /// Transmit power budget P_max, watts.
    pub p_max: f64,
    /// Per-antenna circuit power P_c, watts.
    pub p_circuit: f64,
    /// Static circuit power P_s, watts.
    pub p_static: f64,
    /// Rician factor K_r.
    pub rician_k: f64,
    /// Path loss at 1 m, linear.
    pub pathloss_c0: f64,
    /// Path loss exponent alpha_0.
    pub pathloss_exp: f64,
    /// Tx-Rx distance range [d_min, d_max], meters.
    pub dist_range: (f64, f64),
}

impl Scenario {
    /// Total consumed power for a given transmit power tr(Q).
    pub fn power_total(&self, tr_q: f64) -> f64 {
        self.amp_eff * tr_q + self.n_tx as f64 * self.p_circuit + self.p_static
    }

    fn validate(&self) -> Result<()> {
        if self.n_tx < 1 || self.n_rx < 1 || self.l_tx < 1 || self.l_rx < 1 {
            return Err(Error::Config("antenna and path counts must be >= 1".into()));
        }
        if self.min_dist < 0.5 {
            return Err(Error::Config(format!(
                "min distance below lambda/2: d_min_wl = {}",
                self.min_dist
            )));
        }
        if self.region_tx <= 0.0 || self.region_rx <= 0.0 {
            return Err(Error::Config("region sides must be positive".into()));
        }
        if self.noise_power <= 0.0 {
            return Err(Error::Config("noise power must be positive".into()));
        }
        if self.p_static <= 0.0 {
            return Err(Error::Config("static power must be positive".into()));
        }
        if self.p_max < 0.0 || self.p_circuit < 0.0 || self.amp_eff < 0.0 {
            return Err(Error::Config("powers must be nonnegative".into()));
        }
        if self.rician_k < 0.0 || self.pathloss_c0 <= 0.0 {
            return Err(Error::Config("channel gain parameters out of range".into()));
        }
        if !(self.dist_range.0 > 0.0 && self.dist_range.1 >= self.dist_range.0) {
            return Err(Error::Config("distance range must satisfy 0 < d_min <= d_max".into()));
        }
        check_packing(self.region_tx, self.n_tx, self.min_dist, "transmit")?;
        check_packing(self.region_rx, self.n_rx, self.min_dist, "receive")?;
        Ok(())
    }
}

/// A square grid of `count` antennas at pitch `min_dist` must fit the region.
fn check_packing(side: f64, count: usize, min_dist: f64, which: &str) -> Result<()> {
    let k = (count as f64).sqrt().ceil() as usize;
    let extent = (k.saturating_sub(1)) as f64 * min_dist;
    if extent > side + 1e-12 {
        return Err(Error::Config(format!(
            "region cannot host feasible layout: {which} side {side} wl cannot fit {count} \
             antennas on a {k}x{k} grid at {min_dist} wl pitch"
        )));
    }
    Ok(())
}

/// Antenna position vector: one (x, y) pair per antenna, wavelengths,
/// relative to the region center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Apv(pub Vec<[f64; 2]>);

impl Apv {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(coords: &[f64]) -> Apv {
        assert!(coords.len() % 2 == 0, "odd coordinate count");
        Apv(coords.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    /// Smallest pairwise distance; infinity for a single antenna.
    pub fn min_pair_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.0.len() {
            for j in (i + 1)..self.0.len() {
                let dx = self.0[i][0] - self.0[j][0];
                let dy = self.0[i][1] - self.0[j][1];
                best = best.min(dx.hypot(dy));
            }
        }
        best
    }

    /// Exact region membership for a centered square of the given side.
    pub fn in_square(&self, side: f64) -> bool {
        let h = side / 2.0;
        self.0.iter().all(|p| p[0].abs() <= h && p[1].abs() <= h)
    }

    pub fn clamp_to_square(&self, side: f64) -> Apv {
        let h = side / 2.0;
        Apv(self
            .0
            .iter()
            .map(|p| [p[0].clamp(-h, h), p[1].clamp(-h, h)])
            .collect())
    }

    /// Region membership exact, pairwise distances >= d - tol.
    pub fn is_feasible(&self, side: f64, d: f64, tol: f64) -> bool {
        self.in_square(side) && self.min_pair_distance() >= d - tol
    }
}

/// One statistical-CSI draw: path angles, LOS path response, NLOS average
/// gains, plus the link distance and total gain they were derived from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScsiState {
    /// (theta, phi) per transmit path.
    pub tx_angles: Vec<(f64, f64)>,
    /// (theta, phi) per receive path.
    pub rx_angles: Vec<(f64, f64)>,
    /// Mean path response, L_r x L_t; single nonnegative entry at (0, 0).
    #[serde(with = "serde_cmat")]
    pub sigma_bar: CMat,
    /// Average NLOS path gains, L_r x L_t, nonnegative.
    pub gain_mat: DMatrix<f64>,
    /// Tx-Rx distance, meters.
    pub distance: f64,
    /// Total channel gain g = c0 * d^(-alpha0), linear.
    pub gain: f64,
}

mod serde_cmat {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &CMat, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = m.nrows();
        let cols = m.ncols();
        let data: Vec<(f64, f64)> = m.iter().map(|z| (z.re, z.im)).collect();
        (rows, cols, data).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<CMat, D::Error> {
        let (rows, cols, data): (usize, usize, Vec<(f64, f64)>) =
            serde::Deserialize::deserialize(d)?;
        Ok(CMat::from_iterator(
            rows,
            cols,
            data.into_iter().map(|(re, im)| Complex64::new(re, im)),
        ))
    }
}

impl ScsiState {
    /// LOS/NLOS split check: ||sigma_bar||_F^2 + ||gain_mat||_F^2 == gain.
    pub fn power_split_defect(&self) -> f64 {
        let los: f64 = self.sigma_bar.iter().map(|z| z.norm_sqr()).sum();
        let nlos: f64 = self.gain_mat.iter().map(|v| v * v).sum();
        (los + nlos - self.gain).abs()
    }
}

/// LOS amplitude and per-path NLOS amplitude for total gain `g`, Rician
/// factor `k`, and `l` paths. With a single path all power is LOS.
pub fn los_nlos_split(g: f64, k: f64, l: usize) -> (f64, f64) {
    if l < 2 {
        return (g.sqrt(), 0.0);
    }
    let los = (g * k / (k + 1.0)).sqrt();
    let nlos = (g / ((l as f64 - 1.0) * (k + 1.0))).sqrt();
    (los, nlos)
}

/// One (theta, phi) draw: theta uniform on [0, pi], phi with density
/// sin(phi)/2 on [0, pi] via inverse transform.
pub fn draw_angle_pair<R: Rng>(rng: &mut R) -> (f64, f64) {
    let theta = std::f64::consts::PI * rng.random::<f64>();
    let phi = (1.0 - 2.0 * rng.random::<f64>()).acos();
    (theta, phi)
}

/// Draw a statistical-CSI state: path angles, link distance, and the
/// LOS/NLOS power split. Deterministic in (scenario, seed).
pub fn sample_scsi(sc: &Scenario, seed: u64) -> ScsiState {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let tx_angles: Vec<(f64, f64)> = (0..sc.l_tx).map(|_| draw_angle_pair(&mut rng)).collect();
    let rx_angles: Vec<(f64, f64)> = (0..sc.l_rx).map(|_| draw_angle_pair(&mut rng)).collect();
    let (d_lo, d_hi) = sc.dist_range;
    let distance = d_lo + (d_hi - d_lo) * rng.random::<f64>();
    let gain = sc.pathloss_c0 * distance.powf(-sc.pathloss_exp);

    let l = sc.l_tx.min(sc.l_rx);
    let (los, nlos) = los_nlos_split(gain, sc.rician_k, l);
    let mut sigma_bar = CMat::zeros(sc.l_rx, sc.l_tx);
    sigma_bar[(0, 0)] = Complex64::new(los, 0.0);
    let mut gain_mat = DMatrix::zeros(sc.l_rx, sc.l_tx);
    for i in 1..l {
        gain_mat[(i, i)] = nlos;
    }
    ScsiState {
        tx_angles,
        rx_angles,
        sigma_bar,
        gain_mat,
        distance,
        gain,
    }
}

/// Propagation-distance difference of a position against the region origin
/// for a path with elevation theta and azimuth phi.
fn path_phase(pos: [f64; 2], theta: f64, phi: f64) -> f64 {
    pos[0] * theta.sin() * phi.cos() + pos[1] * theta.cos()
}

fn field_response(apv: &Apv, angles: &[(f64, f64)]) -> CMat {
    let l = angles.len();
    let n = apv.len();
    CMat::from_fn(l, n, |li, ni| {
        let (theta, phi) = angles[li];
        Complex64::from_polar(1.0, TWO_PI * path_phase(apv.0[ni], theta, phi))
    })
}

/// Transmit field response matrix G, L_t x N: [G]_{l,n} =
/// exp(j 2 pi (x_n sin(theta_l) cos(phi_l) + y_n cos(theta_l))).
pub fn field_response_tx(apv_t: &Apv, tx_angles: &[(f64, f64)]) -> CMat {
    field_response(apv_t, tx_angles)
}

/// Receive field response matrix F, L_r x M.
pub fn field_response_rx(apv_r: &Apv, rx_angles: &[(f64, f64)]) -> CMat {
    field_response(apv_r, rx_angles)
}

/// Draw one instantaneous channel H = F^H (sigma_bar + gain_mat .* W) G with
/// W iid unit-variance complex Gaussian.
pub fn sample_channel<R: Rng>(scsi: &ScsiState, g_mat: &CMat, f_mat: &CMat, rng: &mut R) -> Result<CMat> {
    let (l_r, l_t) = scsi.sigma_bar.shape();
    if g_mat.nrows() != l_t || f_mat.nrows() != l_r {
        return Err(Error::Dimension(format!(
            "path response is {l_r}x{l_t} but G has {} rows and F has {} rows",
            g_mat.nrows(),
            f_mat.nrows()
        )));
    }
    let mut sigma = scsi.sigma_bar.clone();
    let root_half = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..l_r {
        for j in 0..l_t {
            let m = scsi.gain_mat[(i, j)];
            if m != 0.0 {
                let w = Complex64::new(
                    rng.sample::<f64, _>(rand_distr::StandardNormal) * root_half,
                    rng.sample::<f64, _>(rand_distr::StandardNormal) * root_half,
                );
                sigma[(i, j)] += m * w;
            }
        }
    }
    Ok(f_mat.adjoint() * sigma * g_mat)
}

/// Mean channel F^H sigma_bar G (the expectation of `sample_channel`).
pub fn mean_channel(scsi: &ScsiState, g_mat: &CMat, f_mat: &CMat) -> CMat {
    f_mat.adjoint() * &scsi.sigma_bar * g_mat
}

/// Centered square-grid layout spanning the region: pitch
/// max(D, side/(ceil(sqrt(count)) - 1)), capped so the grid fits.
pub fn initial_layout(side: f64, count: usize, min_dist: f64) -> Result<Apv> {
    check_packing(side, count, min_dist, "requested")?;
    if count == 1 {
        return Ok(Apv(vec![[0.0, 0.0]]));
    }
    let k = (count as f64).sqrt().ceil() as usize;
    // The packing check guarantees min_dist <= side/(k-1), so spanning the
    // region is always the widest feasible pitch.
    let pitch = side / (k - 1) as f64;
    grid_layout(count, k, pitch)
}

/// Centered square grid at exactly `pitch` spacing (the conventional
/// fixed-position array; pitch = D gives the half-wavelength UPA).
pub fn upa_layout(side: f64, count: usize, pitch: f64) -> Result<Apv> {
    if count == 1 {
        return Ok(Apv(vec![[0.0, 0.0]]));
    }
    let k = (count as f64).sqrt().ceil() as usize;
    let extent = (k - 1) as f64 * pitch;
    if extent > side + 1e-12 {
        return Err(Error::Infeasible(format!(
            "{k}x{k} grid at pitch {pitch} does not fit side {side}"
        )));
    }
    grid_layout(count, k, pitch)
}

fn grid_layout(count: usize, k: usize, pitch: f64) -> Result<Apv> {
    let offset = (k - 1) as f64 * pitch / 2.0;
    let mut positions = Vec::with_capacity(count);
    'outer: for row in 0..k {
        for col in 0..k {
            positions.push([col as f64 * pitch - offset, row as f64 * pitch - offset]);
            if positions.len() == count {
                break 'outer;
            }
        }
    }
    let apv = Apv(positions);
    if apv.min_pair_distance() < pitch - 1e-12 {
        return Err(Error::Infeasible("grid layout violates pitch".into()));
    }
    Ok(apv)
}

/// Flat `key = value` config text; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

const SCENARIO_KEYS: &[&str] = &[
    "n", "m", "d_min_wl", "x_region_wl", "x_tx_wl", "x_rx_wl", "l_paths", "l_tx", "l_rx",
    "k_rician", "sigma2_dbm", "p_max_dbm", "p_c_dbm", "p_s_dbm", "omega", "c0_db", "alpha0",
    "dist_min_m", "dist_max_m",
];

pub const RUN_PARAM_KEYS: &[&str] = &[
    "l_ao", "l_de", "l_sca_t", "l_sca_r", "de_tol", "dinkelbach_tol", "dinkelbach_max_iters",
    "delta_t", "delta_r", "eps1", "eps2", "tau0", "tau_factor", "xi", "mc_samples_final",
    "verbatim_shortcut",
];

fn get_f64(map: &BTreeMap<String, String>, key: &str, default: f64) -> Result<f64> {
    match map.get(key) {
        None => Ok(default),
        Some(s) => s
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{s}` as number"))),
    }
}

fn get_usize(map: &BTreeMap<String, String>, key: &str, default: usize) -> Result<usize> {
    match map.get(key) {
        None => Ok(default),
        Some(s) => s
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{s}` as count"))),
    }
}

/// Build a validated scenario from a raw key/value map. Omitted keys take the
/// default simulation values; dBm/dB fields are converted to linear here.
pub fn build_scenario(raw: &BTreeMap<String, String>) -> Result<Scenario> {
    for key in raw.keys() {
        if !SCENARIO_KEYS.contains(&key.as_str()) && !RUN_PARAM_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
    }
    let l_paths = get_usize(raw, "l_paths", 5)?;
    let x_region = get_f64(raw, "x_region_wl", 2.0)?;
    let sc = Scenario {
        n_tx: get_usize(raw, "n", 4)?,
        n_rx: get_usize(raw, "m", 4)?,
        l_tx: get_usize(raw, "l_tx", l_paths)?,
        l_rx: get_usize(raw, "l_rx", l_paths)?,
        region_tx: get_f64(raw, "x_tx_wl", x_region)?,
        region_rx: get_f64(raw, "x_rx_wl", x_region)?,
        min_dist: get_f64(raw, "d_min_wl", 0.5)?,
        noise_power: dbm_to_watts(get_f64(raw, "sigma2_dbm", -80.0)?),
        amp_eff: get_f64(raw, "omega", 5.0)?,
        p_max: dbm_to_watts(get_f64(raw, "p_max_dbm", 30.0)?),
        p_circuit: dbm_to_watts(get_f64(raw, "p_c_dbm", 30.0)?),
        p_static: dbm_to_watts(get_f64(raw, "p_s_dbm", 40.0)?),
        rician_k: get_f64(raw, "k_rician", 10.0)?,
        pathloss_c0: db_to_linear(get_f64(raw, "c0_db", -40.0)?),
        pathloss_exp: get_f64(raw, "alpha0", 2.8)?,
        dist_range: (get_f64(raw, "dist_min_m", 20.0)?, get_f64(raw, "dist_max_m", 100.0)?),
    };
    sc.validate()?;
    Ok(sc)
}

/// Iteration caps, tolerances, and SCA constants, read from the same config
/// map as the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub l_ao: usize,
    pub l_de: usize,
    pub l_sca_t: usize,
    pub l_sca_r: usize,
    pub de_tol: f64,
    pub dinkelbach_tol: f64,
    pub dinkelbach_max_iters: usize,
    pub delta_t: f64,
    pub delta_r: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub tau0: f64,
    pub tau_factor: f64,
    pub xi: f64,
    pub mc_samples_final: usize,
    /// Use the surrogate maximizer as an absolute position instead of a
    /// displacement from the current iterate (for comparison runs).
    pub verbatim_shortcut: bool,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            l_ao: 20,
            l_de: 20,
            l_sca_t: 20,
            l_sca_r: 20,
            de_tol: 1e-8,
            dinkelbach_tol: 1e-8,
            dinkelbach_max_iters: 50,
            delta_t: 0.02,
            delta_r: 0.02,
            eps1: 1e-3,
            eps2: 1e-3,
            tau0: 1.0,
            tau_factor: 0.5,
            xi: 0.6,
            mc_samples_final: 10_000,
            verbatim_shortcut: false,
        }
    }
}

pub fn build_run_params(raw: &BTreeMap<String, String>) -> Result<RunParams> {
    let d = RunParams::default();
    Ok(RunParams {
        l_ao: get_usize(raw, "l_ao", d.l_ao)?,
        l_de: get_usize(raw, "l_de", d.l_de)?,
        l_sca_t: get_usize(raw, "l_sca_t", d.l_sca_t)?,
        l_sca_r: get_usize(raw, "l_sca_r", d.l_sca_r)?,
        de_tol: get_f64(raw, "de_tol", d.de_tol)?,
        dinkelbach_tol: get_f64(raw, "dinkelbach_tol", d.dinkelbach_tol)?,
        dinkelbach_max_iters: get_usize(raw, "dinkelbach_max_iters", d.dinkelbach_max_iters)?,
        delta_t: get_f64(raw, "delta_t", d.delta_t)?,
        delta_r: get_f64(raw, "delta_r", d.delta_r)?,
        eps1: get_f64(raw, "eps1", d.eps1)?,
        eps2: get_f64(raw, "eps2", d.eps2)?,
        tau0: get_f64(raw, "tau0", d.tau0)?,
        tau_factor: get_f64(raw, "tau_factor", d.tau_factor)?,
        xi: get_f64(raw, "xi", d.xi)?,
        mc_samples_final: get_usize(raw, "mc_samples_final", d.mc_samples_final)?,
        verbatim_shortcut: match raw.get("verbatim_shortcut") {
            None => d.verbatim_shortcut,
            Some(s) => s
                .parse::<bool>()
                .map_err(|_| Error::Config(format!("verbatim_shortcut: bad bool `{s}`")))?,
        },
    })
}

/// Sub-seed derivation for independent reproducible streams (splitmix64).
pub fn substream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
