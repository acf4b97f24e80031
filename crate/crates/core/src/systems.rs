//! Ground-truth benchmark systems in Ito form.
//!
//! Two models drive every end-to-end experiment:
//!
//! * a vegetation-biomass grazing system (1-D, bistable): logistic growth
//!   minus a saturating consumption term, with multiplicative noise and
//!   the drift correction `+Dx` that converts the physically-derived
//!   equation to Ito form;
//! * a Rayleigh-Van der Pol impact oscillator (2-D): self-excited
//!   oscillation with a velocity reset `v+ = -r v-` whenever the
//!   displacement hits zero, multiplicative noise on both coordinates,
//!   and the Ito correction `+D x2` on the velocity equation.
//!
//! Parameter defaults are implementation choices (the source equations
//! carry no numbers); they are verified by the unit tests to produce the
//! regimes the experiments rely on — a bistable drift for the grazing
//! system, a limit cycle for the impact oscillator.

use serde::{Deserialize, Serialize};

use crate::sim::{ImpactRule, SdeModel};

/// Grazing-system parameters: drift
/// `m(x) = k x (A - x) - beta c x^2 / (x^2 + x0^2) + D x`,
/// diffusion `sigma(x) = sqrt(2 D) x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrazingParams {
    /// Growth coefficient.
    pub k: f64,
    /// Environmental carrying capacity.
    pub a: f64,
    /// Herbivore density.
    pub beta: f64,
    /// Consumption coefficient.
    pub c: f64,
    /// Biomass at half-maximal grazing rate.
    pub x0: f64,
    /// Noise intensity.
    pub d: f64,
}

impl Default for GrazingParams {
    fn default() -> Self {
        // Bistable regime: the drift has stable zeros near 0.62 and 7.33
        // and an unstable zero at 2.0 (D = 0), checked by the root oracle
        // in the tests below.
        Self {
            k: 0.5,
            a: 10.0,
            beta: 10.0,
            c: 1.0,
            x0: 1.0,
            d: 0.05,
        }
    }
}

impl GrazingParams {
    /// Drift without the Ito correction term.
    pub fn raw_drift(&self, x: f64) -> f64 {
        self.k * x * (self.a - x) - self.beta * self.c * x * x / (x * x + self.x0 * self.x0)
    }

    pub fn drift(&self, x: f64) -> f64 {
        self.raw_drift(x) + self.d * x
    }

    pub fn sigma(&self, x: f64) -> f64 {
        (2.0 * self.d).sqrt() * x
    }
}

/// Rayleigh-Van der Pol impact-oscillator parameters:
/// `m1 = x2`, `m2 = (alpha - beta x1^2) x2 - gamma x2^3 - x1 + D x2`,
/// `sigma = sqrt(2 D) (x1, x2)` on one shared Wiener channel, with the
/// velocity reset `x2+ = -r x2-` at `x1 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RvdpParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Restitution coefficient in (0, 1].
    pub r: f64,
    /// Noise intensity.
    pub d: f64,
    /// Drive each coordinate with its own Wiener process instead of the
    /// shared channel.
    #[serde(default)]
    pub independent_noise: bool,
}

impl Default for RvdpParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.0,
            gamma: 0.05,
            r: 0.95,
            d: 0.05,
            independent_noise: false,
        }
    }
}

impl RvdpParams {
    /// Drift without the Ito correction (0, D x2).
    pub fn raw_drift(&self, x: &[f64]) -> [f64; 2] {
        [
            x[1],
            (self.alpha - self.beta * x[0] * x[0]) * x[1] - self.gamma * x[1].powi(3) - x[0],
        ]
    }

    pub fn drift(&self, x: &[f64]) -> [f64; 2] {
        let raw = self.raw_drift(x);
        [raw[0], raw[1] + self.d * x[1]]
    }
}

/// Build the 1-D grazing [`SdeModel`].
pub fn grazing_model(p: &GrazingParams) -> SdeModel {
    let p = *p;
    SdeModel::new(
        1,
        1,
        move |x, out| out[0] = p.drift(x[0]),
        move |x, out| out[0] = p.sigma(x[0]),
    )
}

/// Build the 2-D RVDP impact [`SdeModel`]. With `independent_noise` the
/// model has two Wiener channels and a diagonal diffusion matrix.
pub fn rvdp_model(p: &RvdpParams) -> SdeModel {
    let p = *p;
    let noise_dim = if p.independent_noise { 2 } else { 1 };
    let s = (2.0 * p.d).sqrt();
    let model = SdeModel::new(
        2,
        noise_dim,
        move |x, out| {
            let m = p.drift(x);
            out[0] = m[0];
            out[1] = m[1];
        },
        move |x, out| {
            if noise_dim == 1 {
                out[0] = s * x[0];
                out[1] = s * x[1];
            } else {
                out[0] = s * x[0];
                out[1] = 0.0;
                out[2] = 0.0;
                out[3] = s * x[1];
            }
        },
    );
    model.with_event(ImpactRule {
        guard_coord: 0,
        velocity_coord: 1,
        restitution: p.r,
    })
}

/// Zeros of a scalar function on (lo, hi], located by scanning `n_scan`
/// intervals for sign changes and bisecting each to `tol`. Used as the
/// independent oracle for equilibrium structure and for placing escape
/// boundaries at the unstable equilibrium.
pub fn scalar_roots(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n_scan: usize, tol: f64) -> Vec<f64> {
    let mut roots = Vec::new();
    let h = (hi - lo) / n_scan as f64;
    let mut prev_x = lo;
    let mut prev_f = f(lo);
    for i in 1..=n_scan {
        let x = lo + i as f64 * h;
        let fx = f(x);
        if prev_f == 0.0 {
            roots.push(prev_x);
        } else if prev_f * fx < 0.0 {
            let (mut a, mut b, mut fa) = (prev_x, x, prev_f);
            while b - a > tol {
                let mid = 0.5 * (a + b);
                let fm = f(mid);
                if fa * fm <= 0.0 {
                    b = mid;
                } else {
                    a = mid;
                    fa = fm;
                }
            }
            roots.push(0.5 * (a + b));
        }
        prev_x = x;
        prev_f = fx;
    }
    if prev_f == 0.0 {
        roots.push(prev_x);
    }
    roots
}

/// Unstable equilibrium of the grazing drift (the middle zero), if the
/// parameter set is bistable.
pub fn grazing_unstable_equilibrium(p: &GrazingParams) -> Option<f64> {
    let roots = scalar_roots(|x| p.drift(x), 1e-3, p.a, 4000, 1e-10);
    if roots.len() == 3 {
        Some(roots[1])
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{compute_moments, simulate_ensemble, SimConfig};
    use approx::assert_relative_eq;

    #[test]
    fn grazing_drift_and_sigma_vanish_at_origin() {
        for d in [0.0, 0.01, 0.05, 0.1] {
            let p = GrazingParams { d, ..Default::default() };
            assert_eq!(p.drift(0.0), 0.0);
            assert_eq!(p.sigma(0.0), 0.0);
        }
    }

    #[test]
    fn grazing_noise_free_limit_drops_correction_and_noise() {
        let p = GrazingParams { d: 0.0, ..Default::default() };
        for x in [0.1, 1.0, 5.0, 9.9] {
            assert_relative_eq!(p.drift(x), p.raw_drift(x));
            assert_eq!(p.sigma(x), 0.0);
        }
    }

    #[test]
    fn grazing_defaults_are_bistable() {
        // Root oracle: sign-change bisection must find exactly three zeros
        // on (0, A], alternating stable/unstable/stable.
        for d in [0.0, 0.01, 0.05, 0.1] {
            let p = GrazingParams { d, ..Default::default() };
            let roots = scalar_roots(|x| p.drift(x), 1e-3, p.a, 4000, 1e-10);
            assert_eq!(roots.len(), 3, "expected 3 equilibria at D = {d}, got {roots:?}");
            // drift is positive below a stable zero and negative above it
            let probe = 1e-4;
            assert!(p.drift(roots[0] - probe) > 0.0 && p.drift(roots[0] + probe) < 0.0);
            assert!(p.drift(roots[1] - probe) < 0.0 && p.drift(roots[1] + probe) > 0.0);
            assert!(p.drift(roots[2] - probe) > 0.0 && p.drift(roots[2] + probe) < 0.0);
        }
    }

    #[test]
    fn grazing_wong_zakai_correction_is_dx() {
        let p = GrazingParams::default();
        for x in [0.3, 1.7, 4.2, 8.8] {
            assert_relative_eq!(p.drift(x) - p.d * x, p.raw_drift(x), max_relative = 1e-14);
        }
    }

    #[test]
    fn sigma_fields_are_linear_in_state() {
        let gp = GrazingParams::default();
        for lambda in [0.5, 2.0, -3.0] {
            assert_relative_eq!(gp.sigma(lambda * 1.3), lambda * gp.sigma(1.3), max_relative = 1e-14);
        }
        let rp = RvdpParams::default();
        let model = rvdp_model(&rp);
        let g1 = model.diffusion_at(&[1.1, -2.2]);
        let g2 = model.diffusion_at(&[2.2, -4.4]);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_relative_eq!(2.0 * a, *b, max_relative = 1e-14);
        }
    }

    #[test]
    fn rvdp_drift_at_unit_displacement_rest() {
        // state (1, 0): m = (0, -1) for any alpha, gamma, D.
        let p = RvdpParams::default();
        let m = p.drift(&[1.0, 0.0]);
        assert_eq!(m[0], 0.0);
        assert_relative_eq!(m[1], -1.0);
    }

    #[test]
    fn rvdp_origin_is_a_spiral_source_without_noise() {
        // Numerical Jacobian at the origin must be [[0, 1], [-1, alpha]]:
        // complex eigenvalues alpha/2 +- i sqrt(1 - alpha^2/4) with positive
        // real part, the limit-cycle mechanism.
        let p = RvdpParams { d: 0.0, ..Default::default() };
        let h = 1e-6;
        let j = |i: usize, k: usize| -> f64 {
            let mut xp = [0.0, 0.0];
            let mut xm = [0.0, 0.0];
            xp[k] = h;
            xm[k] = -h;
            (p.drift(&xp)[i] - p.drift(&xm)[i]) / (2.0 * h)
        };
        assert_relative_eq!(j(0, 0), 0.0, epsilon = 1e-8);
        assert_relative_eq!(j(0, 1), 1.0, epsilon = 1e-8);
        assert_relative_eq!(j(1, 0), -1.0, epsilon = 1e-8);
        assert_relative_eq!(j(1, 1), p.alpha, epsilon = 1e-8);
        let trace = j(0, 0) + j(1, 1);
        let det = j(0, 0) * j(1, 1) - j(0, 1) * j(1, 0);
        let discriminant = trace * trace - 4.0 * det;
        assert!(discriminant < 0.0, "eigenvalues must be complex");
        assert!(trace > 0.0, "origin must be unstable for self-excitation");
    }

    #[test]
    fn rvdp_wong_zakai_correction_is_d_x2_on_velocity() {
        let p = RvdpParams::default();
        for x in [[1.5, -2.0], [2.5, -1.2], [0.3, 0.8]] {
            let m = p.drift(&x);
            let raw = p.raw_drift(&x);
            assert_relative_eq!(m[0], raw[0]);
            assert_relative_eq!(m[1] - p.d * x[1], raw[1], max_relative = 1e-14);
        }
    }

    #[test]
    fn rvdp_impact_reflects_incoming_velocity() {
        let p = RvdpParams { d: 0.0, ..Default::default() };
        let model = rvdp_model(&p);
        // Incoming state at the wall with velocity -2: reset to +r*2, then
        // the remaining step integrates from the post-impact state.
        let next = crate::sim::euler_milstein_step(&model, &[0.0, -2.0], 0.01, &[0.0], false).unwrap();
        assert!(next[0] >= 0.0);
        assert_relative_eq!(next[0], p.r * 2.0 * 0.01, max_relative = 1e-12);
        // velocity stays near +r*2 after one small drift increment
        assert!((next[1] - p.r * 2.0).abs() < 0.05);
    }

    #[test]
    fn rvdp_ensemble_states_stay_nonnegative_in_displacement() {
        let p = RvdpParams::default();
        let model = rvdp_model(&p);
        let config = SimConfig {
            dt: 0.01,
            steps: 200,
            ensemble_size: 64,
            seed: 17,
            milstein_correction: false,
        };
        // Start heading straight at the wall so impacts actually occur.
        let ens = simulate_ensemble(&model, &[1.0, -3.0], &config).unwrap();
        let mut impacts_possible = false;
        for traj in 0..ens.n_kept {
            for step in 0..=config.steps {
                let s = ens.state(traj, step);
                assert!(s[0] >= 0.0, "displacement went negative: {s:?}");
                if s[0] == 0.0 || (step > 0 && s[0] < 0.05) {
                    impacts_possible = true;
                }
            }
        }
        assert!(impacts_possible, "test trajectory never approached the wall");
        let m = compute_moments(&ens).unwrap();
        assert!(m.means[200][0].is_finite());
    }

    #[test]
    fn grazing_unstable_equilibrium_sits_between_stable_ones() {
        let p = GrazingParams::default();
        let mid = grazing_unstable_equilibrium(&p).expect("default params are bistable");
        let roots = scalar_roots(|x| p.drift(x), 1e-3, p.a, 4000, 1e-10);
        assert!(roots[0] < mid && mid < roots[2]);
        assert_relative_eq!(p.drift(mid), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn independent_noise_switch_builds_two_channels() {
        let p = RvdpParams { independent_noise: true, ..Default::default() };
        let model = rvdp_model(&p);
        assert_eq!(model.noise_dim(), 2);
        let g = model.diffusion_at(&[1.0, 2.0]);
        let s = (2.0 * p.d).sqrt();
        assert_relative_eq!(g[0], s * 1.0);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
        assert_relative_eq!(g[3], s * 2.0);
    }
}
