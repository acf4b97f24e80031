//! Unscented-transform moment propagation.
//!
//! A Gaussian summary (m, P) is encoded as 2n+1 weighted sigma points,
//! each point is pushed through the surrogate dynamics over one data
//! interval, and the predicted mean and covariance are reconstructed from
//! the propagated points. The stochastic contribution enters through
//! state augmentation: points are built over `[x; w]` where the noise
//! block w has mean zero and covariance `dt I`, and propagation consumes
//! w as one Euler-Maruyama kick `g(x) w`.
//!
//! Construction notes. The scaled sigma points use the Cholesky factor of
//! `(n + lambda) P`, with the second branch indexed by `i - n`, and the
//! weights
//!   `W0_m = lambda/(n+lambda)`, `W0_c = W0_m + (1 - alpha^2 + beta)`,
//!   `Wi = 1/(2(n+lambda))`,
//! the standard scheme the defaults `alpha = 1e-3, beta = 2, lambda = 1`
//! come from.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::net::Mlp;
use crate::sim::SdeModel;
use crate::{Error, Result};

/// Scaling parameters of the unscented transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 2.0,
            lambda: 1.0,
        }
    }
}

/// Default number of RK4 substeps used to integrate the drift map across
/// one data interval.
pub const DEFAULT_RK4_SUBSTEPS: usize = 5;

/// 2n+1 sigma points with their mean and covariance weights.
/// After propagation the points live in the (smaller) state space while
/// the weights are unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSet {
    pub points: Vec<Vec<f64>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
    /// Dimension the set was generated over (before any propagation).
    pub n_aug: usize,
}

impl SigmaSet {
    pub fn point_dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }
}

/// A deterministic vector field `R^in -> R^out`. Both learned networks and
/// ground-truth closures evaluate through this interface so oracle checks
/// can swap one for the other.
pub trait Field: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.eval_into(x, &mut out);
        out
    }
}

impl Field for Mlp {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        Mlp::output_dim(self)
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.forward(x));
    }
}

/// Closure-backed field for tests and ground-truth comparisons.
pub struct FnField<F: Fn(&[f64], &mut [f64]) + Sync> {
    pub input_dim: usize,
    pub output_dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> Field for FnField<F> {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// The identically-zero field (stage-1 training freezes the diffusion
/// contribution to this).
pub struct ZeroField {
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Field for ZeroField {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn eval_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// View of an [`SdeModel`]'s drift as a [`Field`].
pub struct DriftField<'a>(pub &'a SdeModel);

impl Field for DriftField<'_> {
    fn input_dim(&self) -> usize {
        self.0.dim()
    }

    fn output_dim(&self) -> usize {
        self.0.dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.0.drift(x, out)
    }
}

/// View of an [`SdeModel`]'s diffusion (row-major n x m) as a [`Field`].
pub struct DiffusionField<'a>(pub &'a SdeModel);

impl Field for DiffusionField<'_> {
    fn input_dim(&self) -> usize {
        self.0.dim()
    }

    fn output_dim(&self) -> usize {
        self.0.dim() * self.0.noise_dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.0.diffusion(x, out)
    }
}

/// Generate the 2n+1 scaled sigma points of (mean, cov).
///
/// The covariance is symmetrized before factoring. If the Cholesky
/// factorization fails (semidefinite or slightly indefinite input), a
/// jitter of `1e-9 * trace` (absolute `1e-9` for zero trace) is added to
/// the diagonal and the factorization retried; a second failure is
/// reported as `SingularCovariance`.
pub fn sigma_points(mean: &DVector<f64>, cov: &DMatrix<f64>, params: &UtParams) -> Result<SigmaSet> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::Shape(format!(
            "covariance is {}x{}, mean has length {}",
            cov.nrows(),
            cov.ncols(),
            n
        )));
    }
    let scale = n as f64 + params.lambda;
    if scale <= 0.0 {
        return Err(Error::Config(format!(
            "n + lambda must be positive (n = {n}, lambda = {})",
            params.lambda
        )));
    }

    let sym = (cov + cov.transpose()) * 0.5;
    let factor = match Cholesky::new(&sym * scale) {
        Some(ch) => ch,
        None => {
            let trace = sym.trace();
            let eps = if trace > 0.0 { 1e-9 * trace } else { 1e-9 };
            let jittered = (&sym + DMatrix::identity(n, n) * eps) * scale;
            Cholesky::new(jittered).ok_or(Error::SingularCovariance { trace })?
        }
    };
    let l = factor.l();

    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(mean.iter().copied().collect::<Vec<f64>>());
    for branch in [1.0, -1.0] {
        for i in 0..n {
            let mut p = Vec::with_capacity(n);
            for j in 0..n {
                p.push(mean[j] + branch * l[(j, i)]);
            }
            points.push(p);
        }
    }

    let w0_m = params.lambda / scale;
    let w0_c = w0_m + (1.0 - params.alpha * params.alpha + params.beta);
    let wi = 1.0 / (2.0 * scale);
    let mut mean_weights = vec![wi; 2 * n + 1];
    let mut cov_weights = vec![wi; 2 * n + 1];
    mean_weights[0] = w0_m;
    cov_weights[0] = w0_c;

    Ok(SigmaSet {
        points,
        mean_weights,
        cov_weights,
        n_aug: n,
    })
}

/// Weighted mean and weighted outer-product covariance of a sigma set.
/// The covariance is exactly symmetric by construction (upper triangle
/// computed, lower mirrored).
pub fn reconstruct_moments(sigma: &SigmaSet) -> (DVector<f64>, DMatrix<f64>) {
    let d = sigma.point_dim();
    let mut mean = DVector::zeros(d);
    for (p, w) in sigma.points.iter().zip(sigma.mean_weights.iter()) {
        for (i, v) in p.iter().enumerate() {
            mean[i] += w * v;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for (p, w) in sigma.points.iter().zip(sigma.cov_weights.iter()) {
        for i in 0..d {
            let di = p[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += w * di * (p[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    (mean, cov)
}

/// Classical RK4 integration of `dz/dt = field(z)` over `dt` in
/// `substeps` equal steps.
pub fn rk4_integrate(field: &dyn Field, x: &[f64], dt: f64, substeps: usize) -> Vec<f64> {
    let n = x.len();
    let h = dt / substeps.max(1) as f64;
    let mut u = x.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    for _ in 0..substeps.max(1) {
        field.eval_into(&u, &mut k1);
        for i in 0..n {
            stage[i] = u[i] + 0.5 * h * k1[i];
        }
        field.eval_into(&stage, &mut k2);
        for i in 0..n {
            stage[i] = u[i] + 0.5 * h * k2[i];
        }
        field.eval_into(&stage, &mut k3);
        for i in 0..n {
            stage[i] = u[i] + h * k3[i];
        }
        field.eval_into(&stage, &mut k4);
        for i in 0..n {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    u
}

/// Push every sigma point of the augmented set `[x; w]` through the
/// surrogate dynamics: `x' = RK4(drift, x, dt) + reshape(diffusion(x)) w`,
/// consuming the noise block. Weights carry over unchanged.
pub fn propagate_sigma(
    drift: &dyn Field,
    diffusion: &dyn Field,
    sigma: &SigmaSet,
    dt: f64,
    substeps: usize,
) -> Result<SigmaSet> {
    let n = drift.output_dim();
    if drift.input_dim() != n {
        return Err(Error::Shape("drift field must map R^n -> R^n".into()));
    }
    let nm = diffusion.output_dim();
    if nm % n != 0 {
        return Err(Error::Shape(format!(
            "diffusion output {nm} is not a multiple of the state dimension {n}"
        )));
    }
    let m = nm / n;
    if sigma.point_dim() != n + m {
        return Err(Error::Shape(format!(
            "sigma points have dimension {}, expected n + m = {}",
            sigma.point_dim(),
            n + m
        )));
    }

    let mut g = vec![0.0; nm];
    let mut out_points = Vec::with_capacity(sigma.points.len());
    for p in sigma.points.iter() {
        let (x, w) = p.split_at(n);
        let mut y = rk4_integrate(drift, x, dt, substeps);
        diffusion.eval_into(x, &mut g);
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..m {
                acc += g[j * m + l] * w[l];
            }
            y[j] += acc;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePrediction);
        }
        out_points.push(y);
    }

    Ok(SigmaSet {
        points: out_points,
        mean_weights: sigma.mean_weights.clone(),
        cov_weights: sigma.cov_weights.clone(),
        n_aug: sigma.n_aug,
    })
}

/// Build the augmented sigma set over `[x; w]` from state moments:
/// augmented mean `[mean; 0]`, augmented covariance
/// `blkdiag(cov, dt I_m)`.
pub fn augmented_sigma(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    noise_dim: usize,
    dt: f64,
    params: &UtParams,
) -> Result<SigmaSet> {
    let n = mean.len();
    let n_aug = n + noise_dim;
    let mut aug_mean = DVector::zeros(n_aug);
    for i in 0..n {
        aug_mean[i] = mean[i];
    }
    let mut aug_cov = DMatrix::zeros(n_aug, n_aug);
    for i in 0..n {
        for j in 0..n {
            aug_cov[(i, j)] = cov[(i, j)];
        }
    }
    for l in 0..noise_dim {
        aug_cov[(n + l, n + l)] = dt;
    }
    sigma_points(&aug_mean, &aug_cov, params)
}

/// One-step moment prediction: augment, propagate, reconstruct.
pub fn predict_one_step(
    drift: &dyn Field,
    diffusion: &dyn Field,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    dt: f64,
    params: &UtParams,
    substeps: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = drift.output_dim();
    let m = diffusion.output_dim() / n.max(1);
    if mean.len() != n {
        return Err(Error::Shape(format!(
            "mean has length {}, state dimension is {n}",
            mean.len()
        )));
    }
    let sigma = augmented_sigma(mean, cov, m, dt, params)?;
    let propagated = propagate_sigma(drift, diffusion, &sigma, dt, substeps)?;
    Ok(reconstruct_moments(&propagated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn hand_example_one_dimension() {
        // n = 1, lambda = 1, m = 0, P = 1: points {0, +sqrt(2), -sqrt(2)},
        // W0_m = 1/2, W1 = W2 = 1/4.
        let params = UtParams::default();
        let s = sigma_points(&dvec(&[0.0]), &DMatrix::identity(1, 1), &params).unwrap();
        assert_eq!(s.points.len(), 3);
        assert_relative_eq!(s.points[0][0], 0.0);
        assert_relative_eq!(s.points[1][0], 2.0f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(s.points[2][0], -(2.0f64.sqrt()), max_relative = 1e-14);
        assert_relative_eq!(s.mean_weights[0], 0.5);
        assert_relative_eq!(s.mean_weights[1], 0.25);
        assert_relative_eq!(s.mean_weights[2], 0.25);
        // W0_c = 1/2 + (1 - alpha^2 + beta)
        assert_relative_eq!(s.cov_weights[0], 0.5 + 1.0 - 1e-6 + 2.0, max_relative = 1e-12);
    }

    #[test]
    fn mean_weights_always_sum_to_one() {
        let params = UtParams::default();
        for n in 1..5 {
            let s = sigma_points(&DVector::zeros(n), &DMatrix::identity(n, n), &params).unwrap();
            let total: f64 = s.mean_weights.iter().sum();
            assert_relative_eq!(total, 1.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn point_mass_with_jitter_stays_near_mean() {
        let params = UtParams::default();
        let s = sigma_points(&dvec(&[3.0]), &DMatrix::zeros(1, 1), &params).unwrap();
        let spread = (2.0 * 1e-9f64).sqrt();
        for p in &s.points {
            assert!((p[0] - 3.0).abs() <= spread * (1.0 + 1e-12));
        }
    }

    #[test]
    fn round_trip_recovers_generating_moments() {
        let params = UtParams::default();
        let mean = dvec(&[1.0, -2.0, 0.5]);
        let cov = DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.3, -0.1, 0.3, 1.5, 0.2, -0.1, 0.2, 0.8],
        );
        let s = sigma_points(&mean, &cov, &params).unwrap();
        let (m2, c2) = reconstruct_moments(&s);
        for i in 0..3 {
            assert_relative_eq!(m2[i], mean[i], epsilon = 1e-10 * mean.abs().max());
            for j in 0..3 {
                assert_relative_eq!(c2[(i, j)], cov[(i, j)], epsilon = 1e-10 * cov.abs().max());
            }
        }
    }

    #[test]
    fn reconstructed_covariance_is_exactly_symmetric() {
        let params = UtParams::default();
        let mean = dvec(&[0.2, -0.4]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.7, 0.7, 2.0]);
        let s = sigma_points(&mean, &cov, &params).unwrap();
        let drift = FnField {
            input_dim: 2,
            output_dim: 2,
            f: |x: &[f64], out: &mut [f64]| {
                out[0] = x[0] * x[0] - x[1];
                out[1] = x[0] * x[1];
            },
        };
        // Map points through a nonlinear function by hand and reconstruct.
        let mapped = SigmaSet {
            points: s.points.iter().map(|p| drift.eval(p)).collect(),
            mean_weights: s.mean_weights.clone(),
            cov_weights: s.cov_weights.clone(),
            n_aug: s.n_aug,
        };
        let (_, c) = reconstruct_moments(&mapped);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(c[(i, j)], c[(j, i)]);
            }
        }
    }

    #[test]
    fn all_points_identical_give_zero_covariance() {
        let s = SigmaSet {
            points: vec![vec![1.0, 2.0]; 5],
            mean_weights: vec![0.2; 5],
            cov_weights: vec![0.2; 5],
            n_aug: 2,
        };
        let (m, c) = reconstruct_moments(&s);
        assert_relative_eq!(m[0], 1.0);
        assert_relative_eq!(m[1], 2.0);
        assert_eq!(c[(0, 0)], 0.0);
        assert_eq!(c[(1, 1)], 0.0);
    }

    #[test]
    fn linear_map_covariance_identity() {
        // UT is exact for affine maps: Sigma' = A Sigma A^T to 1e-8.
        let params = UtParams::default();
        let mean = dvec(&[0.5, -1.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.2, 0.4, 0.4, 0.9]);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 0.5, 3.0]);
        let s = sigma_points(&mean, &cov, &params).unwrap();
        let mapped = SigmaSet {
            points: s
                .points
                .iter()
                .map(|p| {
                    let v = &a * dvec(p);
                    v.iter().copied().collect()
                })
                .collect(),
            mean_weights: s.mean_weights.clone(),
            cov_weights: s.cov_weights.clone(),
            n_aug: s.n_aug,
        };
        let (m2, c2) = reconstruct_moments(&mapped);
        let expect_mean = &a * &mean;
        let expect_cov = &a * &cov * a.transpose();
        for i in 0..2 {
            assert_relative_eq!(m2[i], expect_mean[i], epsilon = 1e-8);
            for j in 0..2 {
                assert_relative_eq!(c2[(i, j)], expect_cov[(i, j)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn zero_fields_propagate_identically() {
        let params = UtParams::default();
        let drift = ZeroField {
            input_dim: 2,
            output_dim: 2,
        };
        let diff = ZeroField {
            input_dim: 2,
            output_dim: 2,
        };
        let mean = dvec(&[1.0, -1.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let sigma = augmented_sigma(&mean, &cov, 1, 0.01, &params).unwrap();
        let prop = propagate_sigma(&drift, &diff, &sigma, 0.01, 5).unwrap();
        for (p_in, p_out) in sigma.points.iter().zip(prop.points.iter()) {
            assert_eq!(&p_in[..2], p_out.as_slice());
        }
    }

    #[test]
    fn linear_drift_integrates_to_exponential() {
        // dz/dt = z over dt = 0.01: x' = x e^{0.01}, RK4 error < 1e-9.
        let drift = FnField {
            input_dim: 1,
            output_dim: 1,
            f: |x: &[f64], out: &mut [f64]| out[0] = x[0],
        };
        let y = rk4_integrate(&drift, &[1.0], 0.01, 5);
        assert!((y[0] - (0.01f64).exp()).abs() < 1e-9);
        let y1 = rk4_integrate(&drift, &[1.0], 0.01, 1);
        assert!((y1[0] - (0.01f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn constant_diffusion_adds_variance_c2_dt() {
        // Zero drift, g = c: Sigma' = Sigma + c^2 dt within 1e-8.
        let c = 0.7;
        let dt = 0.01;
        let params = UtParams::default();
        let drift = ZeroField {
            input_dim: 1,
            output_dim: 1,
        };
        let diff = FnField {
            input_dim: 1,
            output_dim: 1,
            f: move |_: &[f64], out: &mut [f64]| out[0] = c,
        };
        let mean = dvec(&[0.3]);
        let cov = DMatrix::from_row_slice(1, 1, &[0.2]);
        let (m2, c2) =
            predict_one_step(&drift, &diff, &mean, &cov, dt, &params, 5).unwrap();
        assert_relative_eq!(m2[0], 0.3, epsilon = 1e-10);
        assert_relative_eq!(c2[(0, 0)], 0.2 + c * c * dt, epsilon = 1e-8);
    }

    #[test]
    fn dt_zero_is_identity_up_to_jitter() {
        let params = UtParams::default();
        let drift = FnField {
            input_dim: 1,
            output_dim: 1,
            f: |x: &[f64], out: &mut [f64]| out[0] = 2.0 * x[0],
        };
        let diff = FnField {
            input_dim: 1,
            output_dim: 1,
            f: |x: &[f64], out: &mut [f64]| out[0] = x[0],
        };
        let mean = dvec(&[1.5]);
        let cov = DMatrix::from_row_slice(1, 1, &[0.4]);
        let (m2, c2) = predict_one_step(&drift, &diff, &mean, &cov, 0.0, &params, 5).unwrap();
        assert_relative_eq!(m2[0], 1.5, epsilon = 1e-6);
        assert_relative_eq!(c2[(0, 0)], 0.4, epsilon = 1e-6);
    }

    #[test]
    fn non_finite_propagation_is_reported() {
        let params = UtParams::default();
        let drift = FnField {
            input_dim: 1,
            output_dim: 1,
            f: |_: &[f64], out: &mut [f64]| out[0] = f64::NAN,
        };
        let diff = ZeroField {
            input_dim: 1,
            output_dim: 1,
        };
        let mean = dvec(&[1.0]);
        let cov = DMatrix::from_row_slice(1, 1, &[0.1]);
        assert!(matches!(
            predict_one_step(&drift, &diff, &mean, &cov, 0.01, &params, 5),
            Err(Error::NonFinitePrediction)
        ));
    }

    #[test]
    fn negative_definite_covariance_is_singular_after_jitter() {
        let params = UtParams::default();
        let cov = DMatrix::from_row_slice(1, 1, &[-1.0]);
        assert!(matches!(
            sigma_points(&dvec(&[0.0]), &cov, &params),
            Err(Error::SingularCovariance { .. })
        ));
    }
}
