//! Brute-force finite-difference calibration of the majorant constant C in
//! q^N and of the velocity Lipschitz constant L_v, plus the matching
//! certification pass on fresh samples.

use std::f64::consts::TAU;

use glam::DVec2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::forces::CutoffKernel;
use crate::params::ModelParams;
use crate::rng::{Purpose, StreamKey, StreamRng};

/// Particle counts at which F^N is probed. C and L_v must not depend on N.
pub const PROBE_N: [usize; 3] = [100, 10_000, 1_000_000];
pub const SAFETY_FACTOR: f64 = 1.25;
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub majorant_c: f64,
    pub velocity_lipschitz: f64,
    /// Largest observed `|ΔF| / (|Δx| · shape(m))`.
    pub max_position_ratio: f64,
    /// Largest observed `|ΔF| / |Δv|`.
    pub max_velocity_ratio: f64,
    pub samples_per_n: usize,
    pub probe_n: Vec<usize>,
    pub safety_factor: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    /// `max |ΔF| / (q^N(m, v) |Δx|)`; the majorant holds iff this is <= 1.
    pub worst_position_ratio: f64,
    /// `max |ΔF| / (L_v |Δv|)`.
    pub worst_velocity_ratio: f64,
    pub samples_per_n: usize,
}

impl Certification {
    pub fn passed(&self) -> bool {
        self.worst_position_ratio <= 1.0 && self.worst_velocity_ratio <= 1.0
    }
}

fn random_unit(rng: &mut StreamRng) -> DVec2 {
    let a = rng.gen::<f64>() * TAU;
    DVec2::new(a.cos(), a.sin())
}

fn log_uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Positions concentrated where F^N varies fastest: near the origin, around
/// the seam and on the mollifier band.
fn sample_position(rng: &mut StreamRng, kernel: &CutoffKernel) -> DVec2 {
    let outer = 1.1 * kernel.support_radius();
    let r = match rng.gen_range(0..4) {
        0 => log_uniform(rng, 1e-4 * kernel.cutoff_radius(), outer),
        1 => kernel.cutoff_radius() * rng.gen_range(0.8..1.25),
        2 => rng.gen_range(0.45..1.05) * kernel.support_radius(),
        _ => outer * rng.gen::<f64>().sqrt(),
    };
    r * random_unit(rng)
}

fn sample_velocity(rng: &mut StreamRng, kernel: &CutoffKernel) -> DVec2 {
    let outer = 1.1 * kernel.speed_support();
    let s = match rng.gen_range(0..3) {
        0 => outer * rng.gen::<f64>(),
        1 => rng.gen_range(0.45..1.05) * kernel.speed_support(),
        _ => outer * rng.gen::<f64>().sqrt(),
    };
    s * random_unit(rng)
}

/// `(x, y, v)` on the same branch of F^N, `|y - x| <= |x| / 2`.
fn sample_position_pair(rng: &mut StreamRng, kernel: &CutoffKernel) -> (DVec2, DVec2, DVec2) {
    loop {
        let x = sample_position(rng, kernel);
        let step = log_uniform(rng, 1e-7, 0.5) * x.length();
        let y = x + step * random_unit(rng);
        if kernel.on_inner_branch(x) == kernel.on_inner_branch(y) && y != x {
            return (x, y, sample_velocity(rng, kernel));
        }
    }
}

fn sample_velocity_pair(rng: &mut StreamRng, kernel: &CutoffKernel) -> (DVec2, DVec2, DVec2) {
    let x = sample_position(rng, kernel);
    let v = sample_velocity(rng, kernel);
    let w = if rng.gen_bool(0.5) {
        sample_velocity(rng, kernel)
    } else {
        v + log_uniform(rng, 1e-7, 1.0) * random_unit(rng)
    };
    if w == v {
        (x, v, v + DVec2::X * 1e-6)
    } else {
        (x, v, w)
    }
}

fn position_ratio(kernel: &CutoffKernel, x: DVec2, y: DVec2, v: DVec2) -> f64 {
    let df = (kernel.force(x, v) - kernel.force(y, v)).length();
    let m = if x.length() <= y.length() { x } else { y };
    df / ((x - y).length() * kernel.majorant_shape(m.length()))
}

fn velocity_ratio(kernel: &CutoffKernel, x: DVec2, v: DVec2, w: DVec2) -> f64 {
    (kernel.force(x, v) - kernel.force(x, w)).length() / (v - w).length()
}

/// Maximum of `f` over `samples` streams-per-chunk draws; independent of the
/// thread count because each chunk has its own stream.
fn chunked_max<F>(key: StreamKey, samples: usize, f: F) -> f64
where
    F: Fn(&mut StreamRng) -> f64 + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = key.particle(c as u64).rng();
            let len = CHUNK.min(samples - c * CHUNK);
            (0..len).map(|_| f(&mut rng)).fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// Estimates C and L_v by finite differences and inflates both by
/// [`SAFETY_FACTOR`].
pub fn calibrate(params: &ModelParams, samples_per_n: usize, seed: u64) -> Calibration {
    let mut max_pos = 0.0f64;
    let mut max_vel = 0.0f64;
    for (i, &n) in PROBE_N.iter().enumerate() {
        let kernel = CutoffKernel::new(&params.with_n(n));
        let key = StreamKey::new(seed, Purpose::Calibration).replica(i as u64);
        max_pos = max_pos.max(chunked_max(key, samples_per_n, |rng| {
            let (x, y, v) = sample_position_pair(rng, &kernel);
            position_ratio(&kernel, x, y, v)
        }));
        let key = key.replica(100 + i as u64);
        max_vel = max_vel.max(chunked_max(key, samples_per_n, |rng| {
            let (x, v, w) = sample_velocity_pair(rng, &kernel);
            velocity_ratio(&kernel, x, v, w)
        }));
    }
    Calibration {
        majorant_c: SAFETY_FACTOR * max_pos,
        velocity_lipschitz: SAFETY_FACTOR * max_vel,
        max_position_ratio: max_pos,
        max_velocity_ratio: max_vel,
        samples_per_n,
        probe_n: PROBE_N.to_vec(),
        safety_factor: SAFETY_FACTOR,
        seed,
    }
}

/// Checks the stored constants of `params` against fresh finite differences.
pub fn certify(params: &ModelParams, samples_per_n: usize, seed: u64) -> Certification {
    let mut worst_pos = 0.0f64;
    let mut worst_vel = 0.0f64;
    for (i, &n) in PROBE_N.iter().enumerate() {
        let kernel = CutoffKernel::new(&params.with_n(n));
        let key = StreamKey::new(seed, Purpose::Certification).replica(i as u64);
        worst_pos = worst_pos.max(chunked_max(key, samples_per_n, |rng| {
            let (x, y, v) = sample_position_pair(rng, &kernel);
            let m = if x.length() <= y.length() { x } else { y };
            let q = kernel.majorant(m, v);
            let df = (kernel.force(x, v) - kernel.force(y, v)).length();
            if df == 0.0 {
                0.0
            } else {
                df / (q * (x - y).length())
            }
        }));
        let key = key.replica(100 + i as u64);
        worst_vel = worst_vel.max(chunked_max(key, samples_per_n, |rng| {
            let (x, v, w) = sample_velocity_pair(rng, &kernel);
            velocity_ratio(&kernel, x, v, w) / kernel.velocity_lipschitz()
        }));
    }
    Certification {
        worst_position_ratio: worst_pos,
        worst_velocity_ratio: worst_vel,
        samples_per_n,
    }
}
