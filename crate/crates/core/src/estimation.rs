//! Information-form Kalman filtering and the distributed consensus update.
//!
//! Each robot holds a [`Belief`] `(μ, Ω)` with `Ω = Σ⁻¹`. One consensus round
//! for robot `i` with neighbourhood `Ñᵢ` (itself included) is
//!
//! ```text
//! Ω̂ᵢ = Σⱼ κᵢⱼ Ωⱼ + Zᵢ,             Zᵢ = Mᵢᵀ Rᵢ⁻¹ Mᵢ
//! μ̂ᵢ = Ω̂ᵢ⁻¹ (Σⱼ κᵢⱼ Ωⱼ μⱼ + Mᵢᵀ Rᵢ⁻¹ yᵢ)
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on the consensus weights summing to one.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Gaussian belief in information form.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub mu: DVector<f64>,
    pub omega: DMatrix<f64>,
}

impl Belief {
    pub fn new(mu: DVector<f64>, omega: DMatrix<f64>) -> Result<Self> {
        if omega.shape() != (mu.len(), mu.len()) {
            return Err(Error::Dimension(format!(
                "information matrix is {:?}, mean has {} entries",
                omega.shape(),
                mu.len()
            )));
        }
        linalg::cholesky(&omega, "belief information matrix")?;
        Ok(Belief { mu, omega })
    }

    /// Prior `N(μ, σ²·I)`.
    pub fn isotropic(mu: DVector<f64>, sigma: f64) -> Result<Self> {
        let d = mu.len();
        Belief::new(mu, DMatrix::identity(d, d) / (sigma * sigma))
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        linalg::spd_inverse(&self.omega, "belief information matrix")
    }
}

/// `Z = Mᵀ R⁻¹ M`, the information carried by one measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationInfo(pub DMatrix<f64>);

impl InnovationInfo {
    pub fn zeros(dim: usize) -> Self {
        InnovationInfo(DMatrix::zeros(dim, dim))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

pub fn innovation_info(m: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<InnovationInfo> {
    let dim = m.ncols();
    if m.nrows() == 0 {
        return Ok(InnovationInfo::zeros(dim));
    }
    if r.shape() != (m.nrows(), m.nrows()) {
        return Err(Error::Dimension(format!(
            "R is {:?} for a measurement of size {}",
            r.shape(),
            m.nrows()
        )));
    }
    let r_inv = linalg::spd_inverse(r, "measurement noise covariance")?;
    let mut z = m.transpose() * r_inv * m;
    linalg::symmetrize(&mut z);
    Ok(InnovationInfo(z))
}

/// `Mᵀ R⁻¹ y`.
pub fn information_vector(m: &DMatrix<f64>, r: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let dim = m.ncols();
    if m.nrows() == 0 {
        return Ok(DVector::zeros(dim));
    }
    if y.len() != m.nrows() {
        return Err(Error::Dimension(format!(
            "measurement has {} entries, M has {} rows",
            y.len(),
            m.nrows()
        )));
    }
    let w = linalg::spd_solve(r, y, "measurement noise covariance")?;
    Ok(m.transpose() * w)
}

fn check_weights(kappas: &[f64], count: usize) -> Result<()> {
    if kappas.len() != count {
        return Err(Error::Dimension(format!("{} weights for {count} neighbours", kappas.len())));
    }
    let sum: f64 = kappas.iter().sum();
    if kappas.iter().any(|&k| !(k >= 0.0)) || (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::InvalidWeights(sum));
    }
    Ok(())
}

/// Consensus update of the information matrix: `Ω̂ = Σⱼ κⱼ Ωⱼ + Z`.
pub fn dkf_covariance_update(
    neighbors: &[&DMatrix<f64>],
    kappas: &[f64],
    z: &InnovationInfo,
) -> Result<DMatrix<f64>> {
    check_weights(kappas, neighbors.len())?;
    let dim = z.dim();
    let mut omega = z.0.clone();
    for (&o, &k) in neighbors.iter().zip(kappas) {
        if o.shape() != (dim, dim) {
            return Err(Error::Dimension(format!("neighbour information is {:?}", o.shape())));
        }
        omega += o * k;
    }
    linalg::symmetrize(&mut omega);
    Ok(omega)
}

/// Consensus update of the mean in information-vector form.
pub fn dkf_mean_update(
    neighbors: &[(&DVector<f64>, &DMatrix<f64>)],
    kappas: &[f64],
    m: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
    omega_hat: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_weights(kappas, neighbors.len())?;
    let mut xi = information_vector(m, r, y)?;
    for (&(mu, omega), &k) in neighbors.iter().zip(kappas) {
        xi += (omega * mu) * k;
    }
    linalg::spd_solve(omega_hat, &xi, "consensus information matrix")
}

/// Measurement data a robot contributes to one consensus round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMeasurement {
    pub m: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl LocalMeasurement {
    pub fn none(dim: usize) -> Self {
        LocalMeasurement { m: DMatrix::zeros(0, dim), r: DMatrix::zeros(0, 0), y: DVector::zeros(0) }
    }
}

/// Full consensus round for one robot (information matrix then mean).
pub fn dkf_update(neighbors: &[&Belief], kappas: &[f64], meas: &LocalMeasurement) -> Result<Belief> {
    let z = innovation_info(&meas.m, &meas.r)?;
    let omegas: Vec<&DMatrix<f64>> = neighbors.iter().map(|b| &b.omega).collect();
    let omega = dkf_covariance_update(&omegas, kappas, &z)?;
    let pairs: Vec<(&DVector<f64>, &DMatrix<f64>)> = neighbors.iter().map(|b| (&b.mu, &b.omega)).collect();
    let mu = dkf_mean_update(&pairs, kappas, &meas.m, &meas.r, &meas.y, &omega)?;
    Ok(Belief { mu, omega })
}

/// Prediction through `x' = A·x + w`, `w ~ N(0, Q)`, returned in
/// information form. Identity dynamics return the belief untouched.
pub fn kf_predict(belief: &Belief, a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Belief> {
    let d = belief.dim();
    if a.shape() != (d, d) || q.shape() != (d, d) {
        return Err(Error::Dimension(format!("A {:?}, Q {:?} for dimension {d}", a.shape(), q.shape())));
    }
    if q.iter().all(|&v| v == 0.0) && *a == DMatrix::identity(d, d) {
        return Ok(belief.clone());
    }
    let sigma = belief.covariance()?;
    let mut sigma_next = a * sigma * a.transpose() + q;
    linalg::symmetrize(&mut sigma_next);
    let omega = linalg::spd_inverse(&sigma_next, "predicted covariance")?;
    Ok(Belief { mu: a * &belief.mu, omega })
}

/// `det Σ = 1 / det Ω`.
pub fn det_cov(belief: &Belief) -> Result<f64> {
    Ok(1.0 / linalg::spd_det(&belief.omega, "belief information matrix")?)
}

/// Determinant of the 2×2 marginal covariance of target `k`.
pub fn det_cov_block(belief: &Belief, k: usize) -> Result<f64> {
    if 2 * k + 2 > belief.dim() {
        return Err(Error::Dimension(format!("target {k} out of range")));
    }
    let sigma = belief.covariance()?;
    Ok(block_det(&sigma, k))
}

/// Per-target marginal determinants from a single inversion.
pub fn target_block_dets(belief: &Belief) -> Result<Vec<f64>> {
    let sigma = belief.covariance()?;
    Ok((0..belief.dim() / 2).map(|k| block_det(&sigma, k)).collect())
}

pub(crate) fn block_det(sigma: &DMatrix<f64>, k: usize) -> f64 {
    let i = 2 * k;
    sigma[(i, i)] * sigma[(i + 1, i + 1)] - sigma[(i, i + 1)] * sigma[(i + 1, i)]
}

/// Which uncertainty the threshold ε applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationMode {
    /// Every target must have some robot with `det Σᵏ ≤ ε`.
    #[default]
    PerTarget,
    /// Some robot must have `det Σ ≤ ε` on the full state.
    Joint,
}

/// Mission completion test over the beliefs of the participating robots.
pub fn termination_check(beliefs: &[&Belief], eps: f64, targets: usize, mode: TerminationMode) -> Result<bool> {
    if beliefs.is_empty() {
        return Ok(targets == 0);
    }
    match mode {
        TerminationMode::Joint => {
            for b in beliefs {
                if det_cov(b)? <= eps {
                    return Ok(true);
                }
            }
            Ok(false)
        }
        TerminationMode::PerTarget => {
            let mut covered = vec![false; targets];
            for b in beliefs {
                for (k, d) in target_block_dets(b)?.into_iter().enumerate().take(targets) {
                    covered[k] |= d <= eps;
                }
            }
            Ok(covered.into_iter().all(|c| c))
        }
    }
}
