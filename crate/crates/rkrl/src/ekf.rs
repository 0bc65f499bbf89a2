//! Extended-Kalman-filter weight estimation.
//!
//! The weight vector is the filter state: a random walk with diagonal
//! evolution noise, observed through the scalar Q value of each replayed
//! (state, action) pair. Per sample, with gradient q at the predicted mean
//! and innovation d (target minus predicted Q):
//!
//!   variance  s = q' P q + p_n
//!   gain      K = P q / s
//!   mean     += K d
//!   P        -= K s K'
//!
//! A mini-batch of m samples averages the per-sample mean increments and the
//! per-sample covariance decrements; at m = 1 this reduces to the scalar
//! update above. Each per-sample decrement keeps P positive semidefinite, so
//! the averaged update does too (an average of PSD matrices is PSD); only
//! floating-point noise can push eigenvalues slightly negative. Symmetry is
//! restored after every update, and positive semidefiniteness is certified on
//! a configurable interval via a Cholesky factorization of P + tol*I, with an
//! exact eigenvalue floor applied if the certificate fails.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const EKF_MAGIC: &[u8; 7] = b"RKEKF01";

/// Eigenvalues are tolerated down to this bound; below it the covariance is
/// floored at zero.
pub const MIN_EIG_BOUND: f64 = -1e-8;
/// Maximum tolerated asymmetry after an update.
pub const SYMMETRY_BOUND: f64 = 1e-9;

/// How a mini-batch conditions the filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// One update per mini-batch: gains from the shared predicted state,
    /// increments averaged.
    Averaged,
    /// Textbook per-sample conditioning: m single-sample updates in sequence,
    /// each re-linearized at the current mean.
    Sequential,
}

/// Covariance health bookkeeping, sampled every `check_interval` updates.
#[derive(Debug, Clone)]
pub struct CovarianceHealth {
    /// Number of PSD checks performed.
    pub checks: u64,
    /// True while every check certified min eigenvalue >= MIN_EIG_BOUND
    /// before any flooring.
    pub always_within_bound: bool,
    /// Most negative exactly-computed minimum eigenvalue seen (only computed
    /// when the cheap certificate fails; +inf if never needed).
    pub worst_min_eig: f64,
    /// Largest pre-symmetrization asymmetry observed at a check.
    pub max_asymmetry: f64,
    /// Number of eigenvalue floors applied.
    pub floor_events: u64,
}

impl CovarianceHealth {
    fn new() -> Self {
        CovarianceHealth {
            checks: 0,
            always_within_bound: true,
            worst_min_eig: f64::INFINITY,
            max_asymmetry: 0.0,
            floor_events: 0,
        }
    }
}

/// Result of evaluating the regularized verification loss.
#[derive(Debug, Clone)]
pub struct RegularizedLoss {
    pub value: f64,
    pub data_term: f64,
    pub prior_term: f64,
    /// Ratio of extreme covariance eigenvalues used in the prior term;
    /// infinite when the pseudo-inverse path was taken.
    pub condition_number: f64,
    pub used_pseudo_inverse: bool,
}

#[derive(Debug, Clone)]
pub struct EkfState {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    evolution_noise: DVector<f64>,
    observation_noise: f64,
    updates: u64,
    check_interval: u64,
    health: CovarianceHealth,
}

impl EkfState {
    /// Scaled-identity prior and evolution noise: P = p0_scale * I,
    /// P_v = pv_scale * I.
    pub fn new(
        mean: DVector<f64>,
        p0_scale: f64,
        pv_scale: f64,
        observation_noise: f64,
        check_interval: u64,
    ) -> Result<Self> {
        let n = mean.len();
        EkfState::with_full(
            mean,
            DMatrix::identity(n, n) * p0_scale,
            DVector::from_element(n, pv_scale),
            observation_noise,
            check_interval,
        )
    }

    pub fn with_full(
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        evolution_noise: DVector<f64>,
        observation_noise: f64,
        check_interval: u64,
    ) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "covariance",
                expected: n,
                got: covariance.nrows(),
            });
        }
        if evolution_noise.len() != n {
            return Err(Error::DimensionMismatch {
                what: "evolution noise diagonal",
                expected: n,
                got: evolution_noise.len(),
            });
        }
        if !(observation_noise > 0.0 && observation_noise.is_finite()) {
            return Err(Error::InvalidArgument {
                what: "observation noise",
                message: format!("must be positive and finite, got {observation_noise}"),
            });
        }
        if evolution_noise.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument {
                what: "evolution noise",
                message: "diagonal entries must be non-negative and finite".into(),
            });
        }
        if asymmetry(&covariance) > SYMMETRY_BOUND {
            return Err(Error::InvalidArgument {
                what: "covariance",
                message: "matrix is not symmetric".into(),
            });
        }
        if check_interval == 0 {
            return Err(Error::InvalidArgument {
                what: "psd check interval",
                message: "must be at least 1".into(),
            });
        }
        Ok(EkfState {
            mean,
            covariance,
            evolution_noise,
            observation_noise,
            updates: 0,
            check_interval,
            health: CovarianceHealth::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn observation_noise(&self) -> f64 {
        self.observation_noise
    }

    pub fn health(&self) -> &CovarianceHealth {
        &self.health
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn trace(&self) -> f64 {
        self.covariance.diagonal().sum()
    }

    /// Prediction step: the mean carries over, the covariance absorbs the
    /// evolution noise.
    pub fn predict(&mut self) {
        let n = self.dim();
        for i in 0..n {
            self.covariance[(i, i)] += self.evolution_noise[i];
        }
    }

    fn check_gradient(&self, gradient: &DVector<f64>) -> Result<()> {
        if gradient.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "observation gradient",
                expected: self.dim(),
                got: gradient.len(),
            });
        }
        if gradient.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "observation gradient",
            });
        }
        Ok(())
    }

    /// q' P q + p_n; strictly positive because p_n > 0.
    pub fn innovation_variance(&self, gradient: &DVector<f64>) -> Result<f64> {
        self.check_gradient(gradient)?;
        let pq = mat_vec(&self.covariance, gradient);
        Ok(gradient.dot(&pq) + self.observation_noise)
    }

    /// K = P q / (q' P q + p_n).
    pub fn kalman_gain(&self, gradient: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_gradient(gradient)?;
        let pq = mat_vec(&self.covariance, gradient);
        let variance = gradient.dot(&pq) + self.observation_noise;
        Ok(pq / variance)
    }

    /// Applies one averaged mini-batch update. Each batch element is the
    /// observation gradient at the predicted mean and the innovation
    /// (target minus predicted Q) at the predicted mean.
    pub fn batch_update(&mut self, batch: &[(DVector<f64>, f64)]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for (gradient, innovation) in batch {
            self.check_gradient(gradient)?;
            if !innovation.is_finite() {
                return Err(Error::NonFinite { what: "innovation" });
            }
        }
        let n = self.dim();
        let m = batch.len();

        // One sweep over P computes P*q for every sample.
        let mut pq = DMatrix::zeros(n, m);
        {
            let p = self.covariance.as_slice();
            let out = pq.as_mut_slice();
            for (j, p_col) in p.chunks_exact(n).enumerate() {
                for (r, (gradient, _)) in batch.iter().enumerate() {
                    let coeff = gradient[j];
                    if coeff != 0.0 {
                        for (o, &pv) in out[r * n..(r + 1) * n].iter_mut().zip(p_col) {
                            *o += coeff * pv;
                        }
                    }
                }
            }
        }

        // Mean: average of K_j * d_j. Covariance: average of K_j s_j K_j' =
        // (P q_j)(P q_j)'/s_j, subtracted via scaled columns u_j.
        let m_f = m as f64;
        let mut scaled = DMatrix::zeros(n, m);
        for (r, (gradient, innovation)) in batch.iter().enumerate() {
            let col = pq.column(r);
            let variance = gradient.dot(&col) + self.observation_noise;
            let mean_coeff = innovation / (m_f * variance);
            let cov_coeff = 1.0 / (m_f * variance).sqrt();
            let mut u = scaled.column_mut(r);
            for i in 0..n {
                self.mean[i] += mean_coeff * col[i];
                u[i] = cov_coeff * col[i];
            }
        }
        subtract_rank_k(&mut self.covariance, &scaled);
        self.resymmetrize();

        self.updates += 1;
        if self.updates % self.check_interval == 0 {
            self.psd_check();
        }
        Ok(())
    }

    /// (P + P')/2 in place.
    fn resymmetrize(&mut self) {
        let n = self.dim();
        for j in 0..n {
            for i in (j + 1)..n {
                let avg = 0.5 * (self.covariance[(i, j)] + self.covariance[(j, i)]);
                self.covariance[(i, j)] = avg;
                self.covariance[(j, i)] = avg;
            }
        }
    }

    /// Certifies min eig >= MIN_EIG_BOUND via Cholesky of P - MIN_EIG_BOUND*I;
    /// on failure computes the exact spectrum and floors negative eigenvalues
    /// at zero if the bound is truly violated. Returns the exact minimum
    /// eigenvalue when it had to be computed.
    pub fn psd_check(&mut self) -> Option<f64> {
        self.health.checks += 1;
        self.health.max_asymmetry = self.health.max_asymmetry.max(asymmetry(&self.covariance));

        let n = self.dim();
        let mut shifted = self.covariance.clone();
        for i in 0..n {
            shifted[(i, i)] -= MIN_EIG_BOUND;
        }
        if nalgebra::Cholesky::new(shifted).is_some() {
            return None;
        }
        let eigen = nalgebra::SymmetricEigen::new(self.covariance.clone());
        let min_eig = eigen.eigenvalues.min();
        self.health.worst_min_eig = self.health.worst_min_eig.min(min_eig);
        if min_eig < MIN_EIG_BOUND {
            self.health.always_within_bound = false;
            let floored = eigen.eigenvalues.map(|v| v.max(0.0));
            let scaled = DMatrix::from_fn(n, n, |i, j| eigen.eigenvectors[(i, j)] * floored[j]);
            self.covariance = &scaled * eigen.eigenvectors.transpose();
            self.resymmetrize();
            self.health.floor_events += 1;
        }
        Some(min_eig)
    }

    /// Verification objective: mean squared residual over the batch scaled by
    /// 1/(2 p_n), plus the quadratic prior around the predicted mean. The
    /// prior solve is factorization-based; if the covariance is singular the
    /// prior falls back to pseudo-inverse semantics over the positive
    /// spectrum.
    pub fn regularized_loss<F>(&self, theta: &DVector<f64>, residuals: F) -> Result<RegularizedLoss>
    where
        F: FnOnce(&DVector<f64>) -> Vec<f64>,
    {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "loss argument",
                expected: self.dim(),
                got: theta.len(),
            });
        }
        let res = residuals(theta);
        if res.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let data_term = res.iter().map(|d| d * d).sum::<f64>()
            / (2.0 * self.observation_noise * res.len() as f64);

        let diff = theta - &self.mean;
        let (prior_term, condition_number, used_pseudo_inverse) =
            match nalgebra::Cholesky::new(self.covariance.clone()) {
                Some(chol) => {
                    let z = chol.solve(&diff);
                    let eigen = nalgebra::SymmetricEigen::new(self.covariance.clone());
                    let max = eigen.eigenvalues.max();
                    let min = eigen.eigenvalues.min();
                    (0.5 * diff.dot(&z), max / min, false)
                }
                None => {
                    let eigen = nalgebra::SymmetricEigen::new(self.covariance.clone());
                    let max = eigen.eigenvalues.max();
                    let cutoff = max * self.dim() as f64 * f64::EPSILON;
                    let mut acc = 0.0;
                    for (idx, &lambda) in eigen.eigenvalues.iter().enumerate() {
                        if lambda > cutoff {
                            let proj = eigen.eigenvectors.column(idx).dot(&diff);
                            acc += proj * proj / lambda;
                        }
                    }
                    (0.5 * acc, f64::INFINITY, true)
                }
            };
        Ok(RegularizedLoss {
            value: data_term + prior_term,
            data_term,
            prior_term,
            condition_number,
            used_pseudo_inverse,
        })
    }

    /// Writes magic "RKEKF01", u32 n, the mean, then the packed lower
    /// triangle of the covariance (row by row), all f64 little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.dim();
        let mut buf = Vec::with_capacity(7 + 4 + 8 * (n + n * (n + 1) / 2));
        buf.extend_from_slice(EKF_MAGIC);
        buf.extend_from_slice(&(n as u32).to_le_bytes());
        for v in self.mean.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..n {
            for j in 0..=i {
                buf.extend_from_slice(&self.covariance[(i, j)].to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a file written by `save`. Evolution/observation noise are not
    /// stored; they come from the run configuration.
    pub fn load(
        path: &Path,
        evolution_noise: DVector<f64>,
        observation_noise: f64,
        check_interval: u64,
    ) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 11 || &bytes[..7] != EKF_MAGIC {
            return Err(Error::checkpoint(path, "bad magic (not an EKF file)"));
        }
        let n = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        let expected = 11 + 8 * (n + n * (n + 1) / 2);
        if bytes.len() != expected {
            return Err(Error::checkpoint(
                path,
                format!("expected {expected} bytes for n={n}, got {}", bytes.len()),
            ));
        }
        let mut cursor = 11;
        let mut read_f64 = || {
            let v = f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap());
            cursor += 8;
            v
        };
        let mean = DVector::from_fn(n, |_, _| read_f64());
        let mut covariance = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = read_f64();
                covariance[(i, j)] = v;
                covariance[(j, i)] = v;
            }
        }
        EkfState::with_full(mean, covariance, evolution_noise, observation_noise, check_interval)
    }
}

/// ||M - M'||_inf over off-diagonal pairs.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Column-sweep P*q, one pass over P.
fn mat_vec(p: &DMatrix<f64>, q: &DVector<f64>) -> DVector<f64> {
    let n = p.nrows();
    let mut out = DVector::zeros(n);
    let o = out.as_mut_slice();
    for (j, p_col) in p.as_slice().chunks_exact(n).enumerate() {
        let coeff = q[j];
        if coeff != 0.0 {
            for (ov, &pv) in o.iter_mut().zip(p_col) {
                *ov += coeff * pv;
            }
        }
    }
    out
}

/// P -= U U' as m successive column updates; bitwise-symmetric when P is.
fn subtract_rank_k(p: &mut DMatrix<f64>, u: &DMatrix<f64>) {
    let n = p.nrows();
    let m = u.ncols();
    let us = u.as_slice();
    for (j, p_col) in p.as_mut_slice().chunks_exact_mut(n).enumerate() {
        for r in 0..m {
            let u_col = &us[r * n..(r + 1) * n];
            let coeff = u_col[j];
            if coeff != 0.0 {
                for (pv, &uv) in p_col.iter_mut().zip(u_col) {
                    *pv -= coeff * uv;
                }
            }
        }
    }
}
