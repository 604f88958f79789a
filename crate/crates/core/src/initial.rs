//! Product densities on phase space `R² × R²` and i.i.d. sampling from them.
//!
//! Phase points are `[x, y, v_x, v_y]`.

use glam::DVec2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::Ensemble;
use crate::error::{Error, Result};
use crate::rng::{StreamKey, StreamRng};

pub type PhasePoint = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub spec: InitialSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialSpec {
    PointMass {
        position: [f64; 2],
        velocity: [f64; 2],
    },
    UniformBox {
        lo: PhasePoint,
        hi: PhasePoint,
    },
    /// Independent coordinates, each normal truncated to `mean ± truncation·std`.
    TruncatedGaussian {
        mean: PhasePoint,
        std: PhasePoint,
        truncation: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
}

impl Default for InitialSpec {
    /// A 5 × 5 crowd in the left of the corridor, walking slowly in random
    /// directions.
    fn default() -> Self {
        InitialSpec::UniformBox {
            lo: [2.0, 2.5, -0.5, -0.5],
            hi: [7.0, 7.5, 0.5, 0.5],
        }
    }
}

impl InitialSpec {
    pub fn validate(&self) -> Result<()> {
        self.validate_at("f0")
    }

    fn validate_at(&self, path: &str) -> Result<()> {
        let finite = |field: &str, a: &[f64]| -> Result<()> {
            if a.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(Error::config(format!("{path}.{field}"), "must be finite"))
            }
        };
        match self {
            InitialSpec::PointMass { position, velocity } => {
                finite("position", position)?;
                finite("velocity", velocity)
            }
            InitialSpec::UniformBox { lo, hi } => {
                finite("lo", lo)?;
                finite("hi", hi)?;
                if lo.iter().zip(hi).any(|(l, h)| h < l) {
                    return Err(Error::config(format!("{path}.hi"), "must be >= lo in every coordinate"));
                }
                Ok(())
            }
            InitialSpec::TruncatedGaussian {
                mean,
                std,
                truncation,
            } => {
                finite("mean", mean)?;
                finite("std", std)?;
                if std.iter().any(|s| *s < 0.0) {
                    return Err(Error::config(format!("{path}.std"), "must be >= 0"));
                }
                if !(*truncation > 0.0 && truncation.is_finite()) {
                    return Err(Error::config(format!("{path}.truncation"), "must be finite and > 0"));
                }
                Ok(())
            }
            InitialSpec::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::config(format!("{path}.components"), "must not be empty"));
                }
                let mut total = 0.0;
                for (k, c) in components.iter().enumerate() {
                    if !(c.weight >= 0.0 && c.weight.is_finite()) {
                        return Err(Error::config(
                            format!("{path}.components[{k}].weight"),
                            "must be finite and >= 0",
                        ));
                    }
                    total += c.weight;
                    c.spec.validate_at(&format!("{path}.components[{k}].spec"))?;
                }
                if !(total > 0.0) {
                    return Err(Error::config(
                        format!("{path}.components"),
                        "weights sum to zero; the mixture cannot be normalised",
                    ));
                }
                Ok(())
            }
        }
    }

    /// True when the density is a bounded function (no atoms).
    pub fn has_bounded_density(&self) -> bool {
        match self {
            InitialSpec::PointMass { .. } => false,
            InitialSpec::UniformBox { lo, hi } => lo.iter().zip(hi).all(|(l, h)| h > l),
            InitialSpec::TruncatedGaussian { std, .. } => std.iter().all(|s| *s > 0.0),
            InitialSpec::Mixture { components } => components
                .iter()
                .all(|c| c.weight == 0.0 || c.spec.has_bounded_density()),
        }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> PhasePoint {
        match self {
            InitialSpec::PointMass { position, velocity } => {
                [position[0], position[1], velocity[0], velocity[1]]
            }
            InitialSpec::UniformBox { lo, hi } => {
                let mut z = [0.0; 4];
                for k in 0..4 {
                    z[k] = lo[k] + (hi[k] - lo[k]) * rng.gen::<f64>();
                }
                z
            }
            InitialSpec::TruncatedGaussian {
                mean,
                std,
                truncation,
            } => {
                let mut z = [0.0; 4];
                for k in 0..4 {
                    let u = loop {
                        let u: f64 = StandardNormal.sample(rng);
                        if u.abs() <= *truncation {
                            break u;
                        }
                    };
                    z[k] = mean[k] + std[k] * u;
                }
                z
            }
            InitialSpec::Mixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                let mut u = rng.gen::<f64>() * total;
                let last = components.iter().rposition(|c| c.weight > 0.0).unwrap_or(0);
                for (k, c) in components.iter().enumerate() {
                    if u < c.weight || k == last {
                        return c.spec.sample(rng);
                    }
                    u -= c.weight;
                }
                unreachable!("mixture validated non-empty")
            }
        }
    }
}

/// `n` i.i.d. draws from `spec`; particle `i` uses stream `key.particle(i)`.
pub fn sample_initial(spec: &InitialSpec, n: usize, key: StreamKey) -> Result<Ensemble> {
    spec.validate()?;
    let mut x = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let z = spec.sample(&mut key.particle(i as u64).rng());
        x.push(DVec2::new(z[0], z[1]));
        v.push(DVec2::new(z[2], z[3]));
    }
    Ok(Ensemble { x, v, t: 0.0 })
}

/// `n` i.i.d. phase points, same stream layout as [`sample_initial`].
pub fn sample_points(spec: &InitialSpec, n: usize, key: StreamKey) -> Vec<PhasePoint> {
    (0..n)
        .map(|i| spec.sample(&mut key.particle(i as u64).rng()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    #[test]
    fn point_mass_gives_identical_particles() {
        let spec = InitialSpec::PointMass {
            position: [1.0, 2.0],
            velocity: [0.5, -0.5],
        };
        let e = sample_initial(&spec, 5, StreamKey::new(1, Purpose::TrackedInit)).unwrap();
        assert!(e.x.iter().all(|x| *x == DVec2::new(1.0, 2.0)));
        assert!(e.v.iter().all(|v| *v == DVec2::new(0.5, -0.5)));
    }

    #[test]
    fn uniform_box_mean_within_clt_band() {
        let lo = [0.0, -2.0, -1.0, 3.0];
        let hi = [4.0, 2.0, 1.0, 3.5];
        let spec = InitialSpec::UniformBox { lo, hi };
        let n = 10_000;
        let e = sample_initial(&spec, n, StreamKey::new(9, Purpose::TrackedInit)).unwrap();
        let cols: [Vec<f64>; 4] = [
            e.x.iter().map(|p| p.x).collect(),
            e.x.iter().map(|p| p.y).collect(),
            e.v.iter().map(|p| p.x).collect(),
            e.v.iter().map(|p| p.y).collect(),
        ];
        for k in 0..4 {
            let mean = cols[k].iter().sum::<f64>() / n as f64;
            let center = 0.5 * (lo[k] + hi[k]);
            let sigma = (hi[k] - lo[k]) / 12f64.sqrt();
            assert!((mean - center).abs() <= 4.0 * sigma / (n as f64).sqrt());
        }
    }

    #[test]
    fn same_seed_same_ensemble() {
        let spec = InitialSpec::default();
        let k = StreamKey::new(5, Purpose::FieldInit).replica(2);
        assert_eq!(sample_initial(&spec, 50, k).unwrap(), sample_initial(&spec, 50, k).unwrap());
        assert_ne!(
            sample_initial(&spec, 50, k).unwrap(),
            sample_initial(&spec, 50, k.replica(3)).unwrap()
        );
    }

    #[test]
    fn truncated_gaussian_respects_truncation() {
        let spec = InitialSpec::TruncatedGaussian {
            mean: [0.0; 4],
            std: [1.0, 2.0, 0.1, 0.1],
            truncation: 1.5,
        };
        for z in sample_points(&spec, 2000, StreamKey::new(3, Purpose::TrackedInit)) {
            assert!(z[0].abs() <= 1.5 && z[1].abs() <= 3.0 && z[2].abs() <= 0.15);
        }
    }

    #[test]
    fn unnormalisable_specs_are_config_errors() {
        let bad = InitialSpec::Mixture {
            components: vec![MixtureComponent {
                weight: 0.0,
                spec: InitialSpec::default(),
            }],
        };
        let err = sample_initial(&bad, 3, StreamKey::new(0, Purpose::TrackedInit)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        let bad = InitialSpec::UniformBox {
            lo: [1.0, 0.0, 0.0, 0.0],
            hi: [0.0, 1.0, 1.0, 1.0],
        };
        assert!(bad.validate().unwrap_err().to_string().contains("f0.hi"));
        let bad = InitialSpec::Mixture {
            components: vec![MixtureComponent {
                weight: 1.0,
                spec: InitialSpec::TruncatedGaussian {
                    mean: [0.0; 4],
                    std: [1.0; 4],
                    truncation: 0.0,
                },
            }],
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("f0.components[0].spec.truncation"));
    }

    #[test]
    fn mixture_draws_from_both_components() {
        let a = InitialSpec::PointMass {
            position: [0.0, 0.0],
            velocity: [0.0, 0.0],
        };
        let b = InitialSpec::PointMass {
            position: [1.0, 0.0],
            velocity: [0.0, 0.0],
        };
        let spec = InitialSpec::Mixture {
            components: vec![
                MixtureComponent { weight: 1.0, spec: a },
                MixtureComponent { weight: 3.0, spec: b },
            ],
        };
        let pts = sample_points(&spec, 4000, StreamKey::new(1, Purpose::TrackedInit));
        let frac = pts.iter().filter(|z| z[0] == 1.0).count() as f64 / 4000.0;
        assert!((frac - 0.75).abs() < 0.03, "{frac}");
        assert!(!spec.has_bounded_density());
    }
}
