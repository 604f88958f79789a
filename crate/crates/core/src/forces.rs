//! Closed-form force expressions: interaction, dissipation, the cut-off force
//! F^N with its Lipschitz majorants, and the desired-velocity relaxation G.
//!
//! The free functions mirror the model one-to-one and validate their inputs.
//! Hot loops go through [`CutoffKernel`], which caches every power of `N`.

use glam::DVec2;

use crate::error::{Error, Result};
use crate::params::ModelParams;

/// Force per unit mass.
pub type ForceVector = DVec2;

/// `H_{2R}(r)`: 1 on `[0, R]`, 0 on `[2R, ∞)`.
pub fn mollifier_position(r: f64, params: &ModelParams) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::Domain(format!("distance must be >= 0, got {r}")));
    }
    Ok(params.mollifier.plateau(r, params.radius))
}

/// `H̃_{2R̃}(s)`: 1 on `[0, R̃]`, 0 on `[2R̃, ∞)`.
pub fn mollifier_velocity(s: f64, params: &ModelParams) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(Error::Domain(format!("speed must be >= 0, got {s}")));
    }
    Ok(params.mollifier.plateau(s, params.speed_cutoff))
}

/// `k_n (x/|x|)(2R - |x|)`.
pub fn interaction_force(x: DVec2, params: &ModelParams) -> Result<ForceVector> {
    let r = x.length();
    if r == 0.0 {
        return Err(Error::Singular("interaction force at x = 0"));
    }
    Ok(x * (params.k_n * (2.0 * params.radius - r) / r))
}

/// Normal dissipation plus tangential friction:
/// `(<v,x>/|x|²)(γ_t - γ_n) x - γ_t v`.
pub fn dissipative_force(x: DVec2, v: DVec2, params: &ModelParams) -> Result<ForceVector> {
    let r2 = x.length_squared();
    if r2 == 0.0 {
        return Err(Error::Singular("dissipative force at x = 0"));
    }
    Ok(x * (v.dot(x) / r2 * (params.gamma_t - params.gamma_n)) - params.gamma_t * v)
}

/// `H(x, v) = H_{2R}(|x|) H̃_{2R̃}(|v|)`.
pub fn mollifier_product(x: DVec2, v: DVec2, params: &ModelParams) -> f64 {
    params.mollifier.plateau(x.length(), params.radius)
        * params.mollifier.plateau(v.length(), params.speed_cutoff)
}

/// Uncut total force `(F_int + F_diss) H`.
pub fn total_force(x: DVec2, v: DVec2, params: &ModelParams) -> Result<ForceVector> {
    let f = interaction_force(x, params)? + dissipative_force(x, v, params)?;
    Ok(f * mollifier_product(x, v, params))
}

/// Cut-off force F^N; defined everywhere, including `x = 0`.
pub fn cutoff_force(x: DVec2, v: DVec2, params: &ModelParams) -> ForceVector {
    CutoffKernel::new(params).force(x, v)
}

/// Spatial Lipschitz majorant q^N.
pub fn lipschitz_majorant(x: DVec2, v: DVec2, params: &ModelParams) -> f64 {
    CutoffKernel::new(params).majorant(x, v)
}

/// Velocity-singular majorant q̃^N (the same shape with `|v|` in place of `|x|`).
pub fn velocity_majorant(x: DVec2, v: DVec2, params: &ModelParams) -> f64 {
    CutoffKernel::new(params).velocity_majorant(x, v)
}

/// Unit vector along `∇Φ`, or the zero sentinel where the gradient vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Heading(DVec2);

impl Heading {
    pub const NONE: Heading = Heading(DVec2::ZERO);
    const UNIT_TOL: f64 = 1e-9;

    /// Accepts unit vectors (within 1e-9) and the exact zero sentinel.
    pub fn new(dir: DVec2) -> Result<Self> {
        if dir == DVec2::ZERO || (dir.length() - 1.0).abs() <= Self::UNIT_TOL {
            Ok(Heading(dir))
        } else {
            Err(Error::Contract(format!(
                "heading must be a unit vector, |d| = {}",
                dir.length()
            )))
        }
    }

    /// Normalises `g`; vectors shorter than `tol` become the sentinel.
    #[inline]
    pub fn from_gradient(g: DVec2, tol: f64) -> Self {
        let len = g.length();
        if len < tol || !len.is_finite() {
            Heading::NONE
        } else {
            Heading(g / len)
        }
    }

    #[inline]
    pub fn get(self) -> DVec2 {
        self.0
    }

    pub fn is_none(self) -> bool {
        self.0 == DVec2::ZERO
    }
}

/// `G = (1/T)(-U(ρ) ∇Φ/|∇Φ| - v)`. With the zero heading this is pure
/// relaxation `-v/T`.
pub fn desired_acceleration(
    v: DVec2,
    rho: f64,
    grad_dir: Heading,
    params: &ModelParams,
) -> Result<ForceVector> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Contract(format!("density must lie in [0, 1], got {rho}")));
    }
    Ok(desired_acceleration_unchecked(v, rho, grad_dir, params))
}

#[inline]
pub(crate) fn desired_acceleration_unchecked(
    v: DVec2,
    rho: f64,
    grad_dir: Heading,
    params: &ModelParams,
) -> ForceVector {
    let speed = params.speed_profile.speed(rho, params.u_max);
    (-speed * grad_dir.get() - v) / params.reaction_time
}

/// F^N, q^N and q̃^N with all `N`-dependent constants precomputed.
#[derive(Debug, Clone)]
pub struct CutoffKernel {
    mollifier: crate::params::Mollifier,
    radius: f64,
    radius_sq: f64,
    speed_cutoff: f64,
    speed_cutoff_sq: f64,
    support_sq: f64,
    speed_support_sq: f64,
    k_n: f64,
    two_r_kn: f64,
    gamma_diff: f64,
    gamma_t: f64,
    cut: f64,
    cut_sq: f64,
    n_theta: f64,
    n_two_theta: f64,
    majorant_c: f64,
    velocity_lipschitz: f64,
}

impl CutoffKernel {
    pub fn new(params: &ModelParams) -> Self {
        let n = params.n as f64;
        let n_theta = n.powf(params.theta);
        let cut = 1.0 / n_theta;
        CutoffKernel {
            mollifier: params.mollifier,
            radius: params.radius,
            radius_sq: params.radius * params.radius,
            speed_cutoff: params.speed_cutoff,
            speed_cutoff_sq: params.speed_cutoff * params.speed_cutoff,
            support_sq: 4.0 * params.radius * params.radius,
            speed_support_sq: 4.0 * params.speed_cutoff * params.speed_cutoff,
            k_n: params.k_n,
            two_r_kn: 2.0 * params.radius * params.k_n,
            gamma_diff: params.gamma_t - params.gamma_n,
            gamma_t: params.gamma_t,
            cut,
            cut_sq: cut * cut,
            n_theta,
            n_two_theta: n_theta * n_theta,
            majorant_c: params.majorant_c,
            velocity_lipschitz: params.velocity_lipschitz,
        }
    }

    /// Inner-branch radius `N^{-θ}`.
    pub fn cutoff_radius(&self) -> f64 {
        self.cut
    }

    pub fn support_radius(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn n_theta(&self) -> f64 {
        self.n_theta
    }

    #[inline(always)]
    pub fn force(&self, x: DVec2, v: DVec2) -> ForceVector {
        let r2 = x.length_squared();
        if r2 >= self.support_sq {
            return DVec2::ZERO;
        }
        let s2 = v.length_squared();
        if s2 >= self.speed_support_sq {
            return DVec2::ZERO;
        }
        let vx = v.dot(x);
        let (radial, hx) = if r2 >= self.cut_sq {
            let r = r2.sqrt();
            let hx = if r2 <= self.radius_sq {
                1.0
            } else {
                self.mollifier.plateau(r, self.radius)
            };
            (self.two_r_kn / r - self.k_n + vx / r2 * self.gamma_diff, hx)
        } else {
            let hx = if r2 <= self.radius_sq {
                1.0
            } else {
                self.mollifier.plateau(r2.sqrt(), self.radius)
            };
            (self.two_r_kn * self.n_theta - self.k_n + self.n_two_theta * vx * self.gamma_diff, hx)
        };
        let hv = if s2 <= self.speed_cutoff_sq {
            1.0
        } else {
            self.mollifier.plateau(s2.sqrt(), self.speed_cutoff)
        };
        (x * radial - self.gamma_t * v) * (hx * hv)
    }

    /// q^N; zero outside the closed support `B_{2R} × B_{2R̃}`.
    #[inline]
    pub fn majorant(&self, x: DVec2, v: DVec2) -> f64 {
        let r2 = x.length_squared();
        if r2 > self.support_sq || v.length_squared() > self.speed_support_sq {
            return 0.0;
        }
        if r2 >= self.cut_sq {
            self.majorant_c * (1.0 / r2.sqrt() + 1.0)
        } else {
            self.majorant_c * self.n_theta
        }
    }

    /// q̃^N with the velocity Lipschitz constant as its prefactor.
    #[inline]
    pub fn velocity_majorant(&self, x: DVec2, v: DVec2) -> f64 {
        let s2 = v.length_squared();
        if x.length_squared() > self.support_sq || s2 > self.speed_support_sq {
            return 0.0;
        }
        if s2 >= self.cut_sq {
            self.velocity_lipschitz * (1.0 / s2.sqrt() + 1.0)
        } else {
            self.velocity_lipschitz * self.n_theta
        }
    }

    pub fn velocity_lipschitz(&self) -> f64 {
        self.velocity_lipschitz
    }

    /// Shape of q^N without its constant: `1/|x| + 1` or `N^θ`.
    #[inline]
    pub(crate) fn majorant_shape(&self, r: f64) -> f64 {
        if r >= self.cut {
            1.0 / r + 1.0
        } else {
            self.n_theta
        }
    }

    #[inline]
    pub(crate) fn on_inner_branch(&self, x: DVec2) -> bool {
        x.length_squared() < self.cut_sq
    }

    pub(crate) fn speed_support(&self) -> f64 {
        2.0 * self.speed_cutoff
    }
}
