//! Physical constants, cut-off exponent and mollifier selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothness class of the compactly supported cut-off functions.
///
/// Every variant is a polynomial smoothstep `p(t)` with `p(0) = 0`,
/// `p(1) = 1`, evaluated at `t = 2 - r / r0` on the band `[r0, 2 r0]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mollifier {
    /// `3t² - 2t³`, C¹.
    Cubic,
    /// `6t⁵ - 15t⁴ + 10t³`, C².
    #[default]
    Quintic,
    /// `-20t⁷ + 70t⁶ - 84t⁵ + 35t⁴`, C³.
    Septic,
}

impl Mollifier {
    #[inline]
    pub fn smoothstep(self, t: f64) -> f64 {
        match self {
            Mollifier::Cubic => t * t * (3.0 - 2.0 * t),
            Mollifier::Quintic => t * t * t * (t * (6.0 * t - 15.0) + 10.0),
            Mollifier::Septic => {
                let t2 = t * t;
                t2 * t2 * (35.0 + t * (-84.0 + t * (70.0 - 20.0 * t)))
            }
        }
    }

    /// Plateau function: 1 on `[0, r0]`, 0 on `[2 r0, ∞)`, smooth in between.
    /// Both plateau ends are closed.
    #[inline]
    pub fn plateau(self, r: f64, r0: f64) -> f64 {
        if r <= r0 {
            1.0
        } else if r >= 2.0 * r0 {
            0.0
        } else {
            self.smoothstep(2.0 - r / r0)
        }
    }
}

/// Density-dependent desired speed `U: [0, 1] -> [0, U_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SpeedProfile {
    /// `U_max (1 - ρ)`.
    #[default]
    Linear,
    /// `U_max (e^{-kρ} - e^{-k}) / (1 - e^{-k})`; monotone, `U(0) = U_max`, `U(1) = 0`.
    Exponential { rate: f64 },
}

impl SpeedProfile {
    #[inline]
    pub fn speed(self, rho: f64, u_max: f64) -> f64 {
        match self {
            SpeedProfile::Linear => u_max * (1.0 - rho),
            SpeedProfile::Exponential { rate } => {
                let floor = (-rate).exp();
                u_max * ((-rate * rho).exp() - floor) / (1.0 - floor)
            }
        }
    }
}

/// Which ensemble the Newtonian flow takes ρ and Φ from. The mean-field
/// flow always uses the field ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveDensity {
    /// Its own particles.
    Own,
    /// The field ensemble, so both flows share one G.
    #[default]
    Field,
}

/// All model constants. Field names follow the role of each constant:
/// `radius` is the interaction radius R, `speed_cutoff` the velocity scale R̃,
/// `reaction_time` the relaxation time T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub k_n: f64,
    pub gamma_n: f64,
    pub gamma_t: f64,
    pub radius: f64,
    pub speed_cutoff: f64,
    pub reaction_time: f64,
    pub u_max: f64,
    pub theta: f64,
    /// Particle count; sets the cut-off radius `n^{-θ}`.
    pub n: usize,
    pub mollifier: Mollifier,
    pub speed_profile: SpeedProfile,
    pub drive_density: DriveDensity,
    /// Constant of the spatial Lipschitz majorant q^N.
    pub majorant_c: f64,
    /// Global Lipschitz constant of F^N in the velocity argument.
    pub velocity_lipschitz: f64,
}

// Produced by `pedflow calibrate` on the reference constants (seed 0,
// 10^5 samples per N in {10^2, 10^4, 10^6}, safety factor 1.25).
pub const REFERENCE_MAJORANT_C: f64 = 2.91;
pub const REFERENCE_VELOCITY_LIPSCHITZ: f64 = 2.79;

impl Default for ModelParams {
    /// Corridor reference constants (artifact defaults).
    fn default() -> Self {
        ModelParams {
            k_n: 1.0,
            gamma_n: 0.5,
            gamma_t: 0.5,
            radius: 0.6,
            speed_cutoff: 2.0,
            reaction_time: 0.5,
            u_max: 1.34,
            theta: 0.2,
            n: 64,
            mollifier: Mollifier::Quintic,
            speed_profile: SpeedProfile::Linear,
            drive_density: DriveDensity::Field,
            majorant_c: REFERENCE_MAJORANT_C,
            velocity_lipschitz: REFERENCE_VELOCITY_LIPSCHITZ,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("params.k_n", self.k_n),
            ("params.gamma_n", self.gamma_n),
            ("params.gamma_t", self.gamma_t),
            ("params.radius", self.radius),
            ("params.speed_cutoff", self.speed_cutoff),
            ("params.reaction_time", self.reaction_time),
            ("params.majorant_c", self.majorant_c),
            ("params.velocity_lipschitz", self.velocity_lipschitz),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(field, format!("must be finite and > 0, got {value}")));
            }
        }
        // U_max = 0 is allowed: it switches the desired-velocity drive off.
        if !(self.u_max.is_finite() && self.u_max >= 0.0) {
            return Err(Error::config(
                "params.u_max",
                format!("must be finite and >= 0, got {}", self.u_max),
            ));
        }
        if !(self.theta > 0.0 && self.theta < 0.25) {
            return Err(Error::config(
                "params.theta",
                format!("must lie in the open interval (0, 1/4), got {}", self.theta),
            ));
        }
        if self.n < 2 {
            return Err(Error::config("params.n", format!("must be >= 2, got {}", self.n)));
        }
        if let SpeedProfile::Exponential { rate } = self.speed_profile {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(Error::config(
                    "params.speed_profile.rate",
                    format!("must be finite and > 0, got {rate}"),
                ));
            }
        }
        Ok(())
    }

    /// Same constants with the particle count replaced.
    pub fn with_n(&self, n: usize) -> Self {
        ModelParams { n, ..self.clone() }
    }

    /// Radius `n^{-θ}` below which the inner (regularised) branch of F^N applies.
    pub fn cutoff_radius(&self) -> f64 {
        (self.n as f64).powf(-self.theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_params_are_valid() {
        ModelParams::default().validate().unwrap();
    }

    #[test]
    fn theta_interval_is_open() {
        for theta in [0.0, 0.25, -0.1, 0.3] {
            let p = ModelParams { theta, ..Default::default() };
            let err = p.validate().unwrap_err();
            assert!(err.to_string().contains("params.theta"), "{err}");
        }
        let p = ModelParams { theta: 0.249, ..Default::default() };
        p.validate().unwrap();
    }

    #[test]
    fn rejects_nonpositive_constants_and_small_n() {
        let p = ModelParams { gamma_t: 0.0, ..Default::default() };
        assert!(p.validate().unwrap_err().to_string().contains("gamma_t"));
        let p = ModelParams { n: 1, ..Default::default() };
        assert!(p.validate().unwrap_err().to_string().contains("params.n"));
    }

    #[test]
    fn quintic_midpoint_is_one_half() {
        // 6/32 - 15/16 + 10/8 = 1/2
        assert_eq!(Mollifier::Quintic.smoothstep(0.5), 0.5);
        for m in [Mollifier::Cubic, Mollifier::Quintic, Mollifier::Septic] {
            assert_eq!(m.smoothstep(0.0), 0.0);
            assert_eq!(m.smoothstep(1.0), 1.0);
        }
    }

    #[test]
    fn speed_profiles_map_unit_interval_onto_speed_range() {
        for prof in [SpeedProfile::Linear, SpeedProfile::Exponential { rate: 3.0 }] {
            assert!((prof.speed(0.0, 1.34) - 1.34).abs() < 1e-12);
            assert!(prof.speed(1.0, 1.34).abs() < 1e-12);
            assert!(prof.speed(0.3, 1.34) > prof.speed(0.6, 1.34));
        }
    }
}
