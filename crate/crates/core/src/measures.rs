//! Empirical phase-space measures and two-sided bounds on the bounded
//! Lipschitz distance
//! `d_L(μ, ν) = sup { |∫ g d(μ - ν)| : ‖g‖_∞ ≤ 1, ‖g‖_L ≤ 1 }`.
//!
//! Lower bounds come from explicit admissible test functions; upper bounds
//! from `d_L ≤ W₁` with the ground cost truncated at 2.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::dynamics::{CoupledRun, CoupledState, Ensemble};
use crate::error::{Error, Result};
use crate::initial::PhasePoint;
use crate::rng::{Purpose, StreamKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    points: Vec<PhasePoint>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Weights are normalised to sum to one.
    pub fn new(points: Vec<PhasePoint>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::Contract("points and weights differ in length".into()));
        }
        if points.iter().any(|z| z.iter().any(|c| !c.is_finite())) {
            return Err(Error::Contract("measure support must be finite".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Contract("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Contract("weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(EmpiricalMeasure { points, weights })
    }

    pub fn uniform(points: Vec<PhasePoint>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0; n])
    }

    pub fn from_ensemble(e: &Ensemble) -> Result<Self> {
        Self::uniform(ensemble_points(e))
    }

    pub fn points(&self) -> &[PhasePoint] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn is_uniform(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|&w| w == w0)
    }

    pub fn integrate(&self, g: impl Fn(&PhasePoint) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(z, w)| w * g(z)).sum()
    }
}

pub fn ensemble_points(e: &Ensemble) -> Vec<PhasePoint> {
    e.x.iter().zip(&e.v).map(|(x, v)| [x.x, x.y, v.x, v.y]).collect()
}

fn dist(a: &PhasePoint, b: &PhasePoint) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flow {
    Newtonian,
    Meanfield,
    Field,
}

impl Flow {
    pub fn of(self, s: &CoupledState) -> &Ensemble {
        match self {
            Flow::Newtonian => &s.newtonian,
            Flow::Meanfield => &s.meanfield,
            Flow::Field => &s.field,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalKind {
    /// First particle of each replica.
    Strict,
    /// Every particle of every replica (uses exchangeability).
    Pooled,
}

/// The state of `run` at time `t`, from its initial data, snapshots or
/// final state.
pub fn state_at(run: &CoupledRun, t: f64) -> Result<&CoupledState> {
    let tol = 1e-9 * run.options.t_end.max(1.0);
    if t.abs() <= tol {
        return Ok(&run.initial);
    }
    if (t - run.final_state.newtonian.t.max(run.final_state.field.t)).abs() <= tol {
        return Ok(&run.final_state);
    }
    run.snapshots
        .iter()
        .find(|s| (s.step as f64 * run.options.dt - t).abs() <= tol)
        .map(|s| &s.state)
        .ok_or_else(|| Error::Contract(format!("no recorded state at t = {t}")))
}

pub fn marginal_from_replicas(
    runs: &[CoupledRun],
    flow: Flow,
    t: f64,
    kind: MarginalKind,
) -> Result<EmpiricalMeasure> {
    let Some(first) = runs.first() else {
        return Err(Error::Contract("no replicas".into()));
    };
    for r in runs {
        if r.options.dt != first.options.dt || r.options.t_end != first.options.t_end || r.params != first.params {
            return Err(Error::Contract("replicas do not share params and time grid".into()));
        }
    }
    let mut points = Vec::new();
    for r in runs {
        let e = flow.of(state_at(r, t)?);
        if e.is_empty() {
            return Err(Error::Contract("replica has no particles in that flow".into()));
        }
        match kind {
            MarginalKind::Strict => points.push([e.x[0].x, e.x[0].y, e.v[0].x, e.v[0].y]),
            MarginalKind::Pooled => points.extend(ensemble_points(e)),
        }
    }
    EmpiricalMeasure::uniform(points)
}

/// An admissible test function: `‖g‖_∞ ≤ 1` and `‖g‖_L ≤ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    /// `sign · clip(height - |z - center|, -1, 1)`.
    Cone {
        center: PhasePoint,
        height: f64,
        sign: f64,
    },
    /// `sign · sin(<direction, z> + phase)` with `|direction| ≤ 1`.
    Ridge {
        direction: PhasePoint,
        phase: f64,
        sign: f64,
    },
}

impl TestFunction {
    pub fn eval(&self, z: &PhasePoint) -> f64 {
        match self {
            TestFunction::Cone { center, height, sign } => sign * (height - dist(z, center)).clamp(-1.0, 1.0),
            TestFunction::Ridge { direction, phase, sign } => {
                let s: f64 = direction.iter().zip(z).map(|(w, c)| w * c).sum();
                sign * (s + phase).sin()
            }
        }
    }

    fn flip(&mut self) {
        match self {
            TestFunction::Cone { sign, .. } | TestFunction::Ridge { sign, .. } => *sign = -*sign,
        }
    }

    /// Restores admissibility after a parameter perturbation.
    fn normalise(&mut self) {
        if let TestFunction::Ridge { direction, .. } = self {
            let norm = direction.iter().map(|w| w * w).sum::<f64>().sqrt();
            if norm > 1.0 {
                for w in direction.iter_mut() {
                    *w /= norm;
                }
            }
        }
    }
}

fn objective(g: &TestFunction, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    mu.integrate(|z| g.eval(z)) - nu.integrate(|z| g.eval(z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub value: f64,
    pub witness: TestFunction,
}

const ASCENT_ITERS: usize = 300;

/// Best `|∫ g d(μ - ν)|` over a random bank of cones and ridges, refined by
/// stochastic local ascent. Always a valid lower bound on `d_L`.
pub fn bl_lower(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, bank_size: usize, seed: u64) -> Result<LowerBound> {
    if bank_size == 0 {
        return Err(Error::Contract("bank_size must be >= 1".into()));
    }
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::Contract("measures must be non-empty".into()));
    }
    let key = StreamKey::new(seed, Purpose::TestBank);
    let support: Vec<&PhasePoint> = mu.points().iter().chain(nu.points()).collect();
    let scale = spread(&support);
    let bank: Vec<(f64, TestFunction)> = (0..bank_size)
        .into_par_iter()
        .map(|k| {
            let mut rng = key.particle(k as u64).rng();
            let mut g = if k % 4 == 3 {
                let mut w = [0.0; 4];
                for c in &mut w {
                    *c = rng.gen_range(-1.0..1.0) / scale.max(1e-12);
                }
                let mut g = TestFunction::Ridge {
                    direction: w,
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    sign: 1.0,
                };
                g.normalise();
                g
            } else {
                let base = *support[rng.gen_range(0..support.len())];
                let mut center = base;
                if k % 4 != 0 {
                    for c in &mut center {
                        *c += rng.gen_range(-0.5..0.5) * scale;
                    }
                }
                TestFunction::Cone {
                    center,
                    height: rng.gen_range(-1.0..3.0),
                    sign: 1.0,
                }
            };
            let mut val = objective(&g, mu, nu);
            if val < 0.0 {
                g.flip();
                val = -val;
            }
            (val, g)
        })
        .collect();
    let (mut best_val, mut best) = bank
        .into_iter()
        .fold((f64::NEG_INFINITY, None), |(bv, bg), (v, g)| {
            if v > bv {
                (v, Some(g))
            } else {
                (bv, bg)
            }
        });
    let mut best = best.take().expect("bank is non-empty");

    let mut rng = key.particle(u64::MAX).rng();
    let mut step = 0.25 * scale.max(1e-3);
    for _ in 0..ASCENT_ITERS {
        let mut cand = best.clone();
        match &mut cand {
            TestFunction::Cone { center, height, .. } => {
                for c in center.iter_mut() {
                    *c += rng.gen_range(-1.0..1.0) * step;
                }
                *height = (*height + rng.gen_range(-1.0..1.0) * step).clamp(-1.0, 3.0);
            }
            TestFunction::Ridge { direction, phase, .. } => {
                for c in direction.iter_mut() {
                    *c += rng.gen_range(-1.0..1.0) * step / scale.max(1e-12);
                }
                *phase += rng.gen_range(-1.0..1.0) * step;
            }
        }
        cand.normalise();
        let v = objective(&cand, mu, nu);
        if v > best_val {
            best_val = v;
            best = cand;
        } else {
            step *= 0.98;
        }
    }
    Ok(LowerBound {
        value: best_val.max(0.0),
        witness: best,
    })
}

fn spread(points: &[&PhasePoint]) -> f64 {
    let mut s = 0.0f64;
    for k in 0..4 {
        let lo = points.iter().map(|z| z[k]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|z| z[k]).fold(f64::NEG_INFINITY, f64::max);
        s = s.max(hi - lo);
    }
    s.max(1.0)
}

/// Largest difference quotient of `g` over all pairs of `points`.
pub fn empirical_lipschitz(g: &TestFunction, points: &[PhasePoint]) -> f64 {
    let vals: Vec<f64> = points.iter().map(|z| g.eval(z)).collect();
    let mut worst = 0.0f64;
    for i in 0..points.len() {
        for j in 0..i {
            let d = dist(&points[i], &points[j]);
            if d > 0.0 {
                worst = worst.max((vals[i] - vals[j]).abs() / d);
            }
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBound {
    /// Mean truncated W₁ over the draws.
    pub value: f64,
    /// Standard deviation across draws (0 when exact).
    pub sd: f64,
    pub draws: usize,
    /// True when the full supports were matched without subsampling.
    pub exact: bool,
}

/// Truncated `W₁` between two equally weighted point sets of equal size.
pub fn truncated_w1(a: &[PhasePoint], b: &[PhasePoint]) -> f64 {
    assert_eq!(a.len(), b.len(), "point sets differ in size");
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let cost: Vec<f64> = a
        .iter()
        .flat_map(|p| b.iter().map(move |q| dist(p, q).min(2.0)))
        .collect();
    assignment::solve(n, &cost).1 / n as f64
}

fn draw_subset(m: &EmpiricalMeasure, k: usize, rng: &mut impl Rng) -> Vec<PhasePoint> {
    if m.is_uniform() {
        let mut idx: Vec<usize> = (0..m.len()).collect();
        let (head, _) = idx.partial_shuffle(rng, k);
        head.iter().map(|&i| m.points()[i]).collect()
    } else {
        let mut cum = Vec::with_capacity(m.len());
        let mut acc = 0.0;
        for w in m.weights() {
            acc += w;
            cum.push(acc);
        }
        (0..k)
            .map(|_| {
                let u = rng.gen::<f64>() * acc;
                let i = cum.partition_point(|&c| c <= u).min(m.len() - 1);
                m.points()[i]
            })
            .collect()
    }
}

/// `d_L ≤ min{W₁, 2}` evaluated exactly by assignment on `subsample`
/// points of each measure; repeated over `draws` independent subsets when
/// the supports are larger than `subsample`.
pub fn bl_upper(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    subsample: usize,
    draws: usize,
    seed: u64,
) -> Result<UpperBound> {
    if subsample == 0 || subsample > mu.len().min(nu.len()) {
        return Err(Error::Contract(format!(
            "subsample must be in 1..={}, got {subsample}",
            mu.len().min(nu.len())
        )));
    }
    if mu.len() == subsample && nu.len() == subsample && mu.is_uniform() && nu.is_uniform() {
        return Ok(UpperBound {
            value: truncated_w1(mu.points(), nu.points()),
            sd: 0.0,
            draws: 1,
            exact: true,
        });
    }
    let draws = draws.max(2);
    let key = StreamKey::new(seed, Purpose::Subsample);
    let vals: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = key.replica(d as u64).rng();
            let a = draw_subset(mu, subsample, &mut rng);
            let b = draw_subset(nu, subsample, &mut rng);
            truncated_w1(&a, &b)
        })
        .collect();
    let k = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / k;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    Ok(UpperBound {
        value: mean,
        sd: var.sqrt(),
        draws,
        exact: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBracket {
    pub lower: f64,
    pub upper: f64,
    pub upper_sd: f64,
    pub witness: TestFunction,
}

pub fn bl_bracket(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    bank_size: usize,
    subsample: usize,
    draws: usize,
    seed: u64,
) -> Result<DistanceBracket> {
    let lo = bl_lower(mu, nu, bank_size, seed)?;
    let up = bl_upper(mu, nu, subsample, draws, seed)?;
    Ok(DistanceBracket {
        lower: lo.value,
        upper: up.value,
        upper_sd: up.sd,
        witness: lo.witness,
    })
}
