//! The orthogonal-AMP detector family on real-decomposed systems:
//! exact-inversion and conjugate-gradient linear stages, the de-correlated
//! coefficient, variance tracking with damping and flooring, the
//! divergence-free nonlinear stage with per-layer trainable scalars, and
//! LMMSE / brute-force ML baselines.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::cg::{cg_solve, CgConfig};
use crate::channel::RealLinearSystem;
use crate::constellation::Constellation;
use crate::error::{Error, Result};

/// Floor applied to the prior variance fed to the denoiser. The closed
/// form v^2 (theta^2 zeta - 2 theta + 1) can go nonpositive for trained
/// theta; the floor keeps the Gaussian weights finite.
pub const TAU2_FLOOR: f64 = 1e-12;

/// Brute-force search guard for the ML baseline.
pub const ML_SEARCH_LIMIT: u128 = 1_000_000;

/// Per-layer trainable scalars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerParams {
    pub gamma: f64,
    pub theta: f64,
    pub phi: f64,
    pub xi: f64,
}

impl LayerParams {
    pub const IDENTITY: Self = Self { gamma: 1.0, theta: 1.0, phi: 1.0, xi: 0.0 };
}

/// Trainable scalars for all layers; 4 per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<LayerParams>,
}

impl NetParams {
    /// Identity parameters: gamma = theta = phi = 1, xi = 0 on every
    /// layer, which makes the network coincide with its untrained
    /// prototype.
    pub fn identity(t: usize) -> Self {
        Self { layers: vec![LayerParams::IDENTITY; t] }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Flattened view [gamma_1, theta_1, phi_1, xi_1, gamma_2, ...].
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| [l.gamma, l.theta, l.phi, l.xi])
            .collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 4 != 0 || flat.is_empty() {
            return Err(Error::InvalidInput(format!(
                "flat parameter vector length {} is not a positive multiple of 4",
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("parameters must be finite".into()));
        }
        Ok(Self {
            layers: flat
                .chunks_exact(4)
                .map(|c| LayerParams { gamma: c[0], theta: c[1], phi: c[2], xi: c[3] })
                .collect(),
        })
    }
}

/// Linear-estimator strategy: dense solve or inner conjugate gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeStrategy {
    DirectInverse,
    Cg,
}

/// Detector configuration shared by all layer counts.
#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub le_strategy: LeStrategy,
    pub cg: CgConfig,
    /// Damping factor for the variance update, in [0, 1].
    pub beta: f64,
    /// Variance floor.
    pub epsilon: f64,
    pub constellation: Constellation,
    /// Collect per-layer diagnostics.
    pub trace: bool,
}

impl DetectorConfig {
    pub fn new(constellation: Constellation) -> Self {
        Self {
            le_strategy: LeStrategy::Cg,
            cg: CgConfig::default(),
            beta: 0.5,
            epsilon: 1e-10,
            constellation,
            trace: false,
        }
    }

    pub fn with_strategy(mut self, s: LeStrategy) -> Self {
        self.le_strategy = s;
        self
    }

    pub fn with_cg(mut self, cg: CgConfig) -> Self {
        self.cg = cg;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidInput(format!("beta must lie in [0,1], got {}", self.beta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidInput(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-layer diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub zeta: f64,
    pub tau2: f64,
    pub v2: f64,
    /// Norm of the linear-stage input residual y - C u_hat.
    pub le_residual: f64,
    /// Inner CG iterations consumed (0 for the dense strategy).
    pub cg_iters: usize,
}

/// Detection output.
#[derive(Debug, Clone)]
pub struct Detection {
    pub u_hat: DVector<f64>,
    pub trace: Vec<LayerTrace>,
}

/// Quantities that stay constant over layers and frames for a fixed
/// system matrix: eigenvalues of C C^T (conjugate-gradient strategy only)
/// and tr(C^T C).
#[derive(Debug, Clone)]
pub struct Precomputed {
    pub lambdas: Option<DVector<f64>>,
    pub gram_trace: f64,
}

impl Precomputed {
    pub fn new(c: &DMatrix<f64>, strategy: LeStrategy) -> Result<Self> {
        let lambdas = match strategy {
            LeStrategy::Cg => Some(eigen_precompute(c)?),
            LeStrategy::DirectInverse => None,
        };
        Ok(Self { lambdas, gram_trace: c.norm_squared() })
    }
}

/// Eigenvalues of C C^T, computed once per system as squared singular
/// values of C (clamped at zero, padded with zeros up to the row count).
pub fn eigen_precompute(c: &DMatrix<f64>) -> Result<DVector<f64>> {
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("system matrix contains non-finite entries".into()));
    }
    let sv = c.clone().svd_unordered(false, false).singular_values;
    let mut lambdas = DVector::zeros(c.nrows());
    for (i, s) in sv.iter().enumerate().take(c.nrows()) {
        lambdas[i] = (s * s).max(0.0);
    }
    Ok(lambdas)
}

/// De-correlated coefficient from the spectrum:
/// `1/zeta = (1/q_dim) sum_i lambda_i / (lambda_i + sigma2/(2 v2))`.
pub fn zeta(lambdas: &DVector<f64>, sigma2: f64, v2: f64, q_dim: usize) -> Result<f64> {
    if !(v2 > 0.0) {
        return Err(Error::InvalidInput(format!("v2 must be positive, got {v2}")));
    }
    let shift = sigma2 / (2.0 * v2);
    let sum: f64 = lambdas
        .iter()
        .map(|&l| if l > 0.0 { l / (l + shift) } else { 0.0 })
        .sum();
    if sum == 0.0 {
        return Err(Error::InvalidInput("all eigenvalues are zero (zero channel)".into()));
    }
    Ok(q_dim as f64 / sum)
}

/// The LMMSE matrix `W_hat = C^T (C C^T + (sigma2/2v2) I)^{-1}`. Exposed
/// for the variance-estimator oracle; the detector itself never forms it
/// on the conjugate-gradient path.
pub fn lmmse_matrix(c: &DMatrix<f64>, sigma2: f64, v2: f64) -> Result<DMatrix<f64>> {
    let chol = shifted_gram_cholesky(c, sigma2 / (2.0 * v2))?;
    Ok(chol.solve(c).transpose())
}

fn shifted_gram_cholesky(
    c: &DMatrix<f64>,
    shift: f64,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut k = c * c.transpose();
    for i in 0..k.nrows() {
        k[(i, i)] += shift;
    }
    k.cholesky().ok_or_else(|| {
        Error::Decomposition("shifted Gram matrix is not positive definite".into())
    })
}

/// Output of one linear stage.
#[derive(Debug, Clone)]
pub struct LeOutput {
    /// Raw correction direction; the caller forms r = u_hat + gamma * zeta * direction.
    pub direction: DVector<f64>,
    pub zeta: f64,
    pub cg_iters: usize,
    /// Norm of y - C u_hat.
    pub residual_norm: f64,
}

/// Dense linear stage: solves the shifted Gram system directly and takes
/// the de-correlated coefficient from the trace of `W_hat C`.
pub fn le_direct(
    c: &DMatrix<f64>,
    y: &DVector<f64>,
    u_hat: &DVector<f64>,
    sigma2: f64,
    v2: f64,
) -> Result<LeOutput> {
    if !(v2 > 0.0) {
        return Err(Error::InvalidInput(format!("v2 must be positive, got {v2}")));
    }
    let chol = shifted_gram_cholesky(c, sigma2 / (2.0 * v2))?;
    // tr(W_hat C) = sum_ij C_ij (K^-1 C)_ij
    let x = chol.solve(c);
    let trace: f64 = c.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    let zeta = c.ncols() as f64 / trace;
    let g = y - c * u_hat;
    let residual_norm = g.norm();
    let direction = c.transpose() * chol.solve(&g);
    Ok(LeOutput { direction, zeta, cg_iters: 0, residual_norm })
}

/// Conjugate-gradient linear stage: solves the shifted Gram system with
/// the operator applied in factored form `C (C^T p) + shift p`, and takes
/// the de-correlated coefficient from the precomputed spectrum.
pub fn le_cg(
    c: &DMatrix<f64>,
    y: &DVector<f64>,
    u_hat: &DVector<f64>,
    sigma2: f64,
    v2: f64,
    lambdas: &DVector<f64>,
    cfg: &CgConfig,
) -> Result<LeOutput> {
    let zeta_t = zeta(lambdas, sigma2, v2, c.ncols())?;
    let shift = sigma2 / (2.0 * v2);
    let g = y - c * u_hat;
    let residual_norm = g.norm();
    let apply = |p: &DVector<f64>| {
        let mut out = c * (c.transpose() * p);
        out.axpy(shift, p, 1.0);
        out
    };
    let sol = cg_solve(apply, &g, cfg)?;
    let direction = c.transpose() * sol.z;
    Ok(LeOutput { direction, zeta: zeta_t, cg_iters: sol.iters, residual_norm })
}

/// Closed-form prior variance for the denoiser:
/// `tau2 = v2 (theta^2 zeta - 2 theta + 1)`; theta = 1 gives `v2 (zeta - 1)`.
/// The caller floors the result before denoising.
pub fn tau2_closed(v2: f64, zeta: f64, theta: f64) -> f64 {
    v2 * (theta * theta * zeta - 2.0 * theta + 1.0)
}

/// Trace-form variance estimator
/// `(v2/2Q) tr(B B^T) + (theta^2 sigma2 / 4Q) tr(W W^T)` with
/// `B = I - theta W C`. Serves as the independent oracle for
/// [`tau2_closed`]; `w` must be the de-correlated matrix `zeta * W_hat`.
pub fn tau2_trace(
    w: &DMatrix<f64>,
    c: &DMatrix<f64>,
    v2: f64,
    sigma2: f64,
    theta: f64,
) -> f64 {
    let two_q = c.ncols() as f64;
    let mut b = -(w * c) * theta;
    for i in 0..b.nrows() {
        b[(i, i)] += 1.0;
    }
    v2 / two_q * b.norm_squared() + theta * theta * sigma2 / (2.0 * two_q) * w.norm_squared()
}

/// Damped, floored variance update:
/// `raw = (||y - C u||^2 - M sigma2) / tr(C^T C)` with M the complex
/// receive dimension, then `max(beta raw + (1-beta) v2_prev, epsilon)`.
#[allow(clippy::too_many_arguments)]
pub fn v2_update(
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    u_next: &DVector<f64>,
    sigma2: f64,
    v2_prev: f64,
    beta: f64,
    epsilon: f64,
    gram_trace: f64,
) -> f64 {
    let m = y.len() as f64 / 2.0;
    let raw = ((y - c * u_next).norm_squared() - m * sigma2) / gram_trace;
    (beta * raw + (1.0 - beta) * v2_prev).max(epsilon)
}

/// Divergence-free nonlinear stage:
/// element-wise `phi * (E[u | r_i, tau2] - xi * r_i)`.
pub fn nle(
    r: &DVector<f64>,
    tau2: f64,
    phi: f64,
    xi: f64,
    constellation: &Constellation,
) -> Result<DVector<f64>> {
    if !(tau2 > 0.0) {
        return Err(Error::InvalidInput(format!("tau2 must be positive, got {tau2}")));
    }
    Ok(DVector::from_fn(r.len(), |i, _| {
        phi * (constellation.posterior_moments(r[i], tau2).0 - xi * r[i])
    }))
}

/// Runs the layered detector on a real-decomposed system, recomputing the
/// per-system quantities internally. Use [`detect_precomputed`] to reuse
/// them across frames sharing one realization.
pub fn detect(sys: &RealLinearSystem, params: &NetParams, cfg: &DetectorConfig) -> Result<Detection> {
    let pre = Precomputed::new(&sys.c, cfg.le_strategy)?;
    detect_precomputed(sys, params, cfg, &pre)
}

/// Layer schedule: u_1 = 0, v_1 = 1; per layer the linear stage, the
/// step r = u + gamma zeta d, the floored closed-form tau2, the
/// divergence-free denoiser, and the damped floored variance update.
pub fn detect_precomputed(
    sys: &RealLinearSystem,
    params: &NetParams,
    cfg: &DetectorConfig,
    pre: &Precomputed,
) -> Result<Detection> {
    cfg.validate()?;
    if !(sys.sigma2 >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "noise variance must be nonnegative, got {}",
            sys.sigma2
        )));
    }
    if sys.y.len() != sys.c.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "y has {} rows, C has {}",
            sys.y.len(),
            sys.c.nrows()
        )));
    }
    let two_q = sys.c.ncols();
    let mut u_hat = DVector::zeros(two_q);
    let mut v2 = 1.0;
    let mut trace = Vec::new();
    for (idx, lp) in params.layers.iter().enumerate() {
        let layer = idx + 1;
        let le = match cfg.le_strategy {
            LeStrategy::DirectInverse => le_direct(&sys.c, &sys.y, &u_hat, sys.sigma2, v2)?,
            LeStrategy::Cg => le_cg(
                &sys.c,
                &sys.y,
                &u_hat,
                sys.sigma2,
                v2,
                pre.lambdas.as_ref().ok_or_else(|| {
                    Error::InvalidInput("CG strategy requires precomputed eigenvalues".into())
                })?,
                &cfg.cg,
            )?,
        };
        let mut r = le.direction;
        r *= lp.gamma * le.zeta;
        r += &u_hat;
        let tau2 = tau2_closed(v2, le.zeta, lp.theta).max(TAU2_FLOOR);
        if !(r.iter().all(|v| v.is_finite()) && tau2.is_finite()) {
            return Err(Error::NonFinite { layer, what: "linear-stage output".into() });
        }
        let u_next = nle(&r, tau2, lp.phi, lp.xi, &cfg.constellation)?;
        v2 = v2_update(
            &sys.y,
            &sys.c,
            &u_next,
            sys.sigma2,
            v2,
            cfg.beta,
            cfg.epsilon,
            pre.gram_trace,
        );
        if !(u_next.iter().all(|v| v.is_finite()) && v2.is_finite()) {
            return Err(Error::NonFinite { layer, what: "nonlinear-stage output".into() });
        }
        if cfg.trace {
            trace.push(LayerTrace {
                zeta: le.zeta,
                tau2,
                v2,
                le_residual: le.residual_norm,
                cg_iters: le.cg_iters,
            });
        }
        u_hat = u_next;
    }
    Ok(Detection { u_hat, trace })
}

/// One-shot LMMSE baseline
/// `u = C^T (C C^T + sigma2 I)^{-1} y`
/// (the shift is sigma2/(2 sigma_u^2) with sigma_u^2 = 1/2 per real
/// dimension for unit-energy complex symbols). Requires sigma2 > 0 for a
/// guaranteed nonsingular system.
pub fn lmmse_detect(sys: &RealLinearSystem) -> DVector<f64> {
    let chol = shifted_gram_cholesky(&sys.c, sys.sigma2)
        .expect("LMMSE system must be positive definite (sigma2 > 0)");
    sys.c.transpose() * chol.solve(&sys.y)
}

/// Exhaustive maximum-likelihood baseline over all constellation vectors;
/// ties resolve to the lexicographically smaller symbol-label tuple.
pub fn ml_bruteforce(
    sys: &RealLinearSystem,
    constellation: &Constellation,
) -> Result<Vec<Complex64>> {
    let q = sys.c.ncols() / 2;
    let p = constellation.order();
    let size = (p as u128).checked_pow(q as u32).unwrap_or(u128::MAX);
    if size > ML_SEARCH_LIMIT {
        return Err(Error::SearchSpace { size, limit: ML_SEARCH_LIMIT });
    }
    let points = constellation.points();
    let mut labels = vec![0usize; q];
    let mut best_labels = labels.clone();
    let mut best_metric = f64::INFINITY;
    let mut u_real = DVector::zeros(2 * q);
    loop {
        for (i, &label) in labels.iter().enumerate() {
            u_real[i] = points[label].re;
            u_real[i + q] = points[label].im;
        }
        let metric = (&sys.y - &sys.c * &u_real).norm_squared();
        if metric < best_metric {
            best_metric = metric;
            best_labels.copy_from_slice(&labels);
        }
        // Odometer with the first symbol most significant keeps the visit
        // order lexicographic in the label tuple.
        let mut pos = q;
        loop {
            if pos == 0 {
                return Ok(best_labels.iter().map(|&l| points[l]).collect());
            }
            pos -= 1;
            labels[pos] += 1;
            if labels[pos] < p {
                break;
            }
            labels[pos] = 0;
        }
    }
}
