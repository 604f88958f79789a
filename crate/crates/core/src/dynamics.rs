//! The Newtonian flow with cut-off and the mean-field characteristics,
//! integrated side by side from shared initial data.
//!
//! The convolution `∬ F^N(x - y, v - w) f^N(t, y, w) dy dw` is evaluated
//! against a field ensemble of `M >= 4N` particles that interact among
//! themselves with weight `1/(M-1)`. Tracked mean-field particles are passive
//! in that field: they feel it with weight `1/M` and never act back.

use std::sync::Arc;

use glam::DVec2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{density_at, density_grid_unchecked, local_density};
use crate::eikonal::{solve_eikonal, EikonalField, Scenario};
use crate::error::{Error, Result};
use crate::forces::{desired_acceleration_unchecked, CutoffKernel};
use crate::initial::{sample_initial, InitialSpec};
use crate::neighbors::CellGrid;
use crate::params::{DriveDensity, ModelParams};
use crate::rng::{Purpose, StreamKey};

const PAR_CHUNK: usize = 64;

/// Smallest admissible field-to-tracked size ratio.
pub const MIN_FIELD_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ensemble {
    pub x: Vec<DVec2>,
    pub v: Vec<DVec2>,
    pub t: f64,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.v).all(|p| p.is_finite())
    }

    /// `|(X, V) - (X', V')|_∞` over all `4N` coordinates.
    pub fn sup_distance(&self, other: &Ensemble) -> f64 {
        assert_eq!(self.len(), other.len(), "ensembles differ in size");
        let d = |a: &[DVec2], b: &[DVec2]| {
            a.iter()
                .zip(b)
                .map(|(p, q)| (*p - *q).abs().max_element())
                .fold(0.0, f64::max)
        };
        d(&self.x, &other.x).max(d(&self.v, &other.v))
    }

    pub fn max_speed(&self) -> f64 {
        self.v.iter().map(|v| v.length()).fold(0.0, f64::max)
    }
}

/// `M` field particles approximating `f^N(t, ·)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldEnsemble(pub Ensemble);

impl FieldEnsemble {
    /// Enforces `M >= 4N` for `n_tracked` tracked particles.
    pub fn new(particles: Ensemble, n_tracked: usize) -> Result<Self> {
        if particles.len() < MIN_FIELD_FACTOR * n_tracked {
            return Err(Error::Contract(format!(
                "field ensemble has {} particles, need at least {} for {} tracked",
                particles.len(),
                MIN_FIELD_FACTOR * n_tracked,
                n_tracked
            )));
        }
        Ok(FieldEnsemble(particles))
    }

    pub fn m(&self) -> usize {
        self.0.len()
    }
}

/// The three subsystems advanced together.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoupledState {
    pub newtonian: Ensemble,
    pub meanfield: Ensemble,
    pub field: Ensemble,
}

impl CoupledState {
    pub fn is_finite(&self) -> bool {
        self.newtonian.is_finite() && self.meanfield.is_finite() && self.field.is_finite()
    }

    pub fn deviation(&self) -> f64 {
        if self.newtonian.is_empty() || self.meanfield.is_empty() {
            0.0
        } else {
            self.newtonian.sup_distance(&self.meanfield)
        }
    }

    fn set_time(&mut self, t: f64) {
        self.newtonian.t = t;
        self.meanfield.t = t;
        self.field.t = t;
    }
}

/// Per-particle densities and the desired-direction field, frozen between
/// refreshes.
#[derive(Debug, Clone)]
pub struct Environment {
    pub rho: Vec<f64>,
    pub eikonal: Option<Arc<EikonalField>>,
}

impl Environment {
    pub fn empty() -> Self {
        Environment {
            rho: Vec::new(),
            eikonal: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoupledEnvironment {
    pub newtonian: Environment,
    pub meanfield: Environment,
    pub field: Environment,
}

/// Time derivatives `(dx/dt, dv/dt)` per particle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rates {
    pub dx: Vec<DVec2>,
    pub dv: Vec<DVec2>,
}

#[derive(Debug, Clone, Default)]
struct CoupledRates {
    newtonian: Rates,
    meanfield: Rates,
    field: Rates,
}

/// Everything needed to evaluate right-hand sides for one particle count.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub params: ModelParams,
    pub scenario: Scenario,
    kernel: CutoffKernel,
}

/// Cells per support radius in pair-search grids.
const GRID_SUBDIV: usize = 2;

/// Particles copied into cell order so that candidate runs are contiguous.
#[derive(Debug, Clone)]
struct SourceGrid {
    grid: CellGrid,
    x: Vec<DVec2>,
    v: Vec<DVec2>,
}

impl SourceGrid {
    fn new(ens: &Ensemble, radius: f64) -> Self {
        let grid = CellGrid::build_subdivided(&ens.x, radius, GRID_SUBDIV);
        let x = grid.items().iter().map(|&i| ens.x[i as usize]).collect();
        let v = grid.items().iter().map(|&i| ens.v[i as usize]).collect();
        SourceGrid { grid, x, v }
    }

    fn len(&self) -> usize {
        self.x.len()
    }
}

/// `Σ_{j≠i} F^N(x_i - x_j, v_i - v_j) / (N - 1)` via the cell grid.
///
/// Each pair is evaluated once and applied with opposite signs, which is
/// exact because `F^N(-x, -v) = -F^N(x, v)` holds bit for bit. The sweep is
/// sequential in bucket order so the sums do not depend on the thread count.
fn self_interaction(ens: &Ensemble, kernel: &CutoffKernel, src: &SourceGrid) -> Vec<DVec2> {
    let n = ens.len();
    if n < 2 {
        return vec![DVec2::ZERO; n];
    }
    let mut acc = vec![DVec2::ZERO; n];
    for a in 0..n {
        let (xa, va) = (src.x[a], src.v[a]);
        let mut own = DVec2::ZERO;
        src.grid.for_each_run(xa, |run| {
            let start = run.start.max(a + 1);
            if start >= run.end {
                return;
            }
            let (xs, vs) = (&src.x[start..run.end], &src.v[start..run.end]);
            for (k, (y, w)) in xs.iter().zip(vs).enumerate() {
                let f = kernel.force(xa - *y, va - *w);
                own += f;
                acc[start + k] -= f;
            }
        });
        acc[a] += own;
    }
    let w = 1.0 / (n - 1) as f64;
    let mut out = vec![DVec2::ZERO; n];
    for (slot, &i) in src.grid.items().iter().enumerate() {
        out[i as usize] = acc[slot] * w;
    }
    out
}

/// `Σ_j F^N(x_i - y_j, v_i - w_j) / M` over all source particles.
fn external_interaction(tracked: &Ensemble, src: &SourceGrid, kernel: &CutoffKernel) -> Vec<DVec2> {
    if src.len() == 0 {
        return vec![DVec2::ZERO; tracked.len()];
    }
    let w = 1.0 / src.len() as f64;
    tracked
        .x
        .par_iter()
        .zip(tracked.v.par_iter())
        .with_min_len(PAR_CHUNK)
        .map(|(&xi, &vi)| {
            let mut acc = DVec2::ZERO;
            src.grid.for_each_run(xi, |run| {
                for (y, v) in src.x[run.clone()].iter().zip(&src.v[run]) {
                    acc += kernel.force(xi - *y, vi - *v);
                }
            });
            acc * w
        })
        .collect()
}

impl Dynamics {
    pub fn new(params: &ModelParams, scenario: &Scenario) -> Self {
        Dynamics {
            params: params.clone(),
            scenario: scenario.clone(),
            kernel: CutoffKernel::new(params),
        }
    }

    pub fn kernel(&self) -> &CutoffKernel {
        &self.kernel
    }

    fn grid(&self, ens: &Ensemble) -> SourceGrid {
        SourceGrid::new(ens, self.kernel.support_radius())
    }

    fn add_drive(&self, ens: &Ensemble, env: &Environment, mut dv: Vec<DVec2>) -> Rates {
        if let Some(eik) = &env.eikonal {
            dv.par_iter_mut()
                .with_min_len(PAR_CHUNK)
                .enumerate()
                .for_each(|(i, a)| {
                    let heading = eik.heading_at(ens.x[i]);
                    *a += desired_acceleration_unchecked(ens.v[i], env.rho[i], heading, &self.params);
                });
        } else if !env.rho.is_empty() {
            dv.par_iter_mut()
                .with_min_len(PAR_CHUNK)
                .enumerate()
                .for_each(|(i, a)| {
                    *a += desired_acceleration_unchecked(
                        ens.v[i],
                        env.rho[i],
                        crate::forces::Heading::NONE,
                        &self.params,
                    );
                });
        }
        Rates {
            dx: ens.v.clone(),
            dv,
        }
    }

    /// Right-hand side of the Newtonian flow with cut-off.
    pub fn newtonian_rhs(&self, ens: &Ensemble, env: &Environment) -> Rates {
        let pair = self_interaction(ens, &self.kernel, &self.grid(ens));
        self.add_drive(ens, env, pair)
    }

    /// Right-hand side of the mean-field characteristics for `tracked`,
    /// with the convolution taken against `field`.
    pub fn meanfield_rhs(&self, tracked: &Ensemble, field: &FieldEnsemble, env: &Environment) -> Rates {
        let conv = external_interaction(tracked, &self.grid(&field.0), &self.kernel);
        self.add_drive(tracked, env, conv)
    }

    fn coupled_rates(&self, s: &CoupledState, env: &CoupledEnvironment) -> CoupledRates {
        let field_grid = self.grid(&s.field);
        let field_pair = self_interaction(&s.field, &self.kernel, &field_grid);
        let conv = external_interaction(&s.meanfield, &field_grid, &self.kernel);
        let newton_pair = self_interaction(&s.newtonian, &self.kernel, &self.grid(&s.newtonian));
        CoupledRates {
            newtonian: self.add_drive(&s.newtonian, &env.newtonian, newton_pair),
            meanfield: self.add_drive(&s.meanfield, &env.meanfield, conv),
            field: self.add_drive(&s.field, &env.field, field_pair),
        }
    }

    /// Rates of the tracked flows against a prescribed field stage.
    fn tracked_rates(&self, s: &CoupledState, field: &FieldStage, env: &CoupledEnvironment) -> CoupledRates {
        let conv = external_interaction(&s.meanfield, &field.grid, &self.kernel);
        let newton_pair = self_interaction(&s.newtonian, &self.kernel, &self.grid(&s.newtonian));
        CoupledRates {
            newtonian: self.add_drive(&s.newtonian, &env.newtonian, newton_pair),
            meanfield: self.add_drive(&s.meanfield, &env.meanfield, conv),
            field: Rates::default(),
        }
    }

    fn own_environment(&self, ens: &Ensemble, t: f64) -> Option<(Environment, usize)> {
        if ens.is_empty() {
            return None;
        }
        let r = self.params.radius;
        let dens = local_density(&ens.x, r);
        let grid = density_grid_unchecked(&ens.x, r, &self.scenario, Some(dens.n_r_max));
        let eik = solve_eikonal(&grid, &self.scenario, t).expect("grid matches scenario");
        Some((
            Environment {
                rho: dens.rho_at,
                eikonal: Some(Arc::new(eik)),
            },
            dens.n_r_max,
        ))
    }

    fn field_refresh(&self, field: &Ensemble) -> FieldRefresh {
        match self.own_environment(field, field.t) {
            Some((env, n_r_max)) => FieldRefresh {
                env,
                n_r_max,
                positions: field.x.clone(),
            },
            None => FieldRefresh {
                env: Environment::empty(),
                n_r_max: 0,
                positions: Vec::new(),
            },
        }
    }

    /// Environments of the tracked flows given the field's refresh.
    fn tracked_environment(&self, s: &CoupledState, field: &FieldRefresh) -> CoupledEnvironment {
        let r = self.params.radius;
        let from_field = |x: &[DVec2]| Environment {
            rho: density_at(&field.positions, field.n_r_max, x, r),
            eikonal: field.env.eikonal.clone(),
        };
        let has_field = !field.positions.is_empty();
        let newtonian = if self.params.drive_density == DriveDensity::Field && has_field {
            from_field(&s.newtonian.x)
        } else {
            self.own_environment(&s.newtonian, s.newtonian.t)
                .map(|e| e.0)
                .unwrap_or_else(Environment::empty)
        };
        let meanfield = if has_field {
            from_field(&s.meanfield.x)
        } else {
            Environment::empty()
        };
        CoupledEnvironment {
            newtonian,
            meanfield,
            field: field.env.clone(),
        }
    }

    /// Densities and eikonal fields for the current state. The tracked
    /// mean-field particles and the field ensemble see the field ensemble's
    /// density; the Newtonian flow sees the one chosen by `drive_density`.
    pub fn environment(&self, s: &CoupledState) -> CoupledEnvironment {
        self.tracked_environment(s, &self.field_refresh(&s.field))
    }

    /// One classical RK4 step of all subsystems with `env` frozen.
    /// `dt` may be negative (backward integration).
    pub fn step(&self, s: &CoupledState, env: &CoupledEnvironment, dt: f64) -> CoupledState {
        rk4(s, dt, |y, _| self.coupled_rates(y, env))
    }
}

/// Classical RK4; `rates` receives each stage state and its index 0..4.
fn rk4(s: &CoupledState, dt: f64, mut rates: impl FnMut(&CoupledState, usize) -> CoupledRates) -> CoupledState {
    let k1 = rates(s, 0);
    let y2 = advance(s, &k1, 0.5 * dt);
    let k2 = rates(&y2, 1);
    let y3 = advance(s, &k2, 0.5 * dt);
    let k3 = rates(&y3, 2);
    let y4 = advance(s, &k3, dt);
    let k4 = rates(&y4, 3);
    let h = dt / 6.0;
    let combine = |e: &Ensemble, a: &Rates, b: &Rates, c: &Rates, d: &Rates| -> Ensemble {
        let comb = |y: &[DVec2], ka: &[DVec2], kb: &[DVec2], kc: &[DVec2], kd: &[DVec2]| {
            y.iter()
                .enumerate()
                .map(|(i, &p)| p + h * (ka[i] + 2.0 * kb[i] + 2.0 * kc[i] + kd[i]))
                .collect()
        };
        Ensemble {
            x: comb(&e.x, &a.dx, &b.dx, &c.dx, &d.dx),
            v: comb(&e.v, &a.dv, &b.dv, &c.dv, &d.dv),
            t: e.t + dt,
        }
    };
    CoupledState {
        newtonian: combine(&s.newtonian, &k1.newtonian, &k2.newtonian, &k3.newtonian, &k4.newtonian),
        meanfield: combine(&s.meanfield, &k1.meanfield, &k2.meanfield, &k3.meanfield, &k4.meanfield),
        field: combine(&s.field, &k1.field, &k2.field, &k3.field, &k4.field),
    }
}

fn advance(s: &CoupledState, k: &CoupledRates, h: f64) -> CoupledState {
    let one = |e: &Ensemble, r: &Rates| {
        if e.is_empty() {
            return Ensemble { t: e.t + h, ..Ensemble::default() };
        }
        Ensemble {
            x: e.x.iter().zip(&r.dx).map(|(p, d)| *p + h * *d).collect(),
            v: e.v.iter().zip(&r.dv).map(|(p, d)| *p + h * *d).collect(),
            t: e.t + h,
        }
    };
    CoupledState {
        newtonian: one(&s.newtonian, &k.newtonian),
        meanfield: one(&s.meanfield, &k.meanfield),
        field: one(&s.field, &k.field),
    }
}

/// Integration settings that are not physics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub dt: f64,
    pub t_end: f64,
    /// Refresh densities and eikonal fields every this many steps.
    pub eikonal_cadence: usize,
    /// Keep a full state snapshot every this many steps; 0 keeps none.
    pub snapshot_cadence: usize,
    /// Keep every frozen environment so the run can be replayed backward.
    pub keep_environments: bool,
}

impl RunOptions {
    pub fn new(dt: f64, t_end: f64) -> Self {
        RunOptions {
            dt,
            t_end,
            eikonal_cadence: 10,
            snapshot_cadence: 0,
            keep_environments: false,
        }
    }

    /// Number of steps; `dt · steps` must equal `t_end`.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", format!("must be finite and > 0, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::config("t_end", format!("must be finite and >= 0, got {}", self.t_end)));
        }
        let steps = (self.t_end / self.dt).round();
        if (steps * self.dt - self.t_end).abs() > 1e-9 * self.t_end.max(1.0) {
            return Err(Error::config(
                "t_end",
                format!("{} is not an integer multiple of dt = {}", self.t_end, self.dt),
            ));
        }
        if self.eikonal_cadence == 0 {
            return Err(Error::config("cadence.eikonal", "must be >= 1"));
        }
        Ok(steps as usize)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub state: CoupledState,
}

/// One RK4 stage state of the field ensemble with its cell grid.
#[derive(Debug, Clone)]
struct FieldStage {
    ens: Ensemble,
    grid: SourceGrid,
}

/// What the field contributes to an environment refresh.
#[derive(Debug, Clone)]
struct FieldRefresh {
    env: Environment,
    n_r_max: usize,
    positions: Vec<DVec2>,
}

/// The field ensemble integrated on its own, with every RK4 stage state
/// kept. The field never feels the tracked particles, so replaying these
/// stages against any number of tracked ensembles is the same as
/// integrating them together.
#[derive(Debug, Clone)]
pub struct FieldTrajectory {
    options: RunOptions,
    stages: Vec<[FieldStage; 4]>,
    refreshes: Vec<FieldRefresh>,
    initial: Ensemble,
    final_state: Ensemble,
}

impl FieldTrajectory {
    /// `m` draws from `f0` on stream `(seed, FieldInit, replica)`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        f0: &InitialSpec,
        params: &ModelParams,
        scenario: &Scenario,
        m: usize,
        options: &RunOptions,
        seed: u64,
        replica: u64,
    ) -> Result<Self> {
        check_physics(params, scenario)?;
        let key = StreamKey::new(seed, Purpose::FieldInit).replica(replica);
        let field = sample_initial(f0, m, key)?;
        Self::integrate(params, scenario, field, options)
    }

    /// `params.n` must already be the tracked particle count.
    pub fn integrate(params: &ModelParams, scenario: &Scenario, field: Ensemble, options: &RunOptions) -> Result<Self> {
        let dynamics = Dynamics::new(params, scenario);
        let steps = options.steps()?;
        let mut state = CoupledState {
            field,
            ..Default::default()
        };
        let initial = state.field.clone();
        let mut stages = Vec::with_capacity(steps);
        let mut refreshes = Vec::new();
        for k in 0..steps {
            if k % options.eikonal_cadence == 0 {
                refreshes.push(dynamics.field_refresh(&state.field));
            }
            let env = CoupledEnvironment {
                newtonian: Environment::empty(),
                meanfield: Environment::empty(),
                field: refreshes.last().expect("refreshed at k = 0").env.clone(),
            };
            let mut rec: Vec<FieldStage> = Vec::with_capacity(4);
            let mut next = rk4(&state, options.dt, |y, _| {
                let grid = dynamics.grid(&y.field);
                let pair = self_interaction(&y.field, &dynamics.kernel, &grid);
                rec.push(FieldStage {
                    ens: y.field.clone(),
                    grid,
                });
                CoupledRates {
                    field: dynamics.add_drive(&y.field, &env.field, pair),
                    ..Default::default()
                }
            });
            let t = (k + 1) as f64 * options.dt;
            next.set_time(t);
            if !next.field.is_finite() {
                return Err(Error::BlowUp {
                    step: k + 1,
                    t,
                    detail: "non-finite field ensemble".into(),
                    last_finite: Some(Box::new(state)),
                });
            }
            stages.push(rec.try_into().expect("four stages"));
            state = next;
        }
        Ok(FieldTrajectory {
            options: *options,
            stages,
            refreshes,
            initial,
            final_state: state.field,
        })
    }

    pub fn m(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &Ensemble {
        &self.initial
    }

    pub fn final_state(&self) -> &Ensemble {
        &self.final_state
    }

    fn at_step(&self, k: usize) -> &Ensemble {
        if k < self.stages.len() {
            &self.stages[k][0].ens
        } else {
            &self.final_state
        }
    }
}

/// Paired Newtonian / mean-field trajectories from one set of initial data.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub params: ModelParams,
    pub scenario: Scenario,
    pub options: RunOptions,
    pub seed: u64,
    pub replica: u64,
    pub initial: CoupledState,
    pub final_state: CoupledState,
    /// `(t, sup_{s<=t} |(X_s, V_s) - (X̄_s, V̄_s)|_∞)` at every step, from t = 0.
    pub dev_sup: Vec<(f64, f64)>,
    pub snapshots: Vec<Snapshot>,
    /// `(first step, environment)` for every refresh, if kept.
    pub environments: Vec<(usize, CoupledEnvironment)>,
}

impl CoupledRun {
    pub fn n(&self) -> usize {
        self.initial.newtonian.len()
    }

    pub fn m(&self) -> usize {
        self.initial.field.len()
    }

    pub fn final_dev_sup(&self) -> f64 {
        self.dev_sup.last().map(|d| d.1).unwrap_or(0.0)
    }
}

/// Integrates the tracked flows against a precomputed field trajectory.
fn integrate_tracked(
    dynamics: &Dynamics,
    tracked: Ensemble,
    field: &FieldTrajectory,
    options: &RunOptions,
    seed: u64,
    replica: u64,
    tracers: bool,
) -> Result<CoupledRun> {
    if field.options != *options {
        return Err(Error::Contract("field trajectory was integrated with other options".into()));
    }
    let steps = options.steps()?;
    let with_field = |mut s: CoupledState, k: usize| {
        s.field = field.at_step(k).clone();
        s
    };
    let initial = CoupledState {
        newtonian: tracked.clone(),
        meanfield: if tracers && field.m() > 0 { tracked } else { Ensemble::default() },
        field: Ensemble::default(),
    };
    let mut state = initial.clone();
    let mut dev = state.deviation();
    let mut dev_sup = Vec::with_capacity(steps + 1);
    dev_sup.push((0.0, dev));
    let mut snapshots = Vec::new();
    if options.snapshot_cadence > 0 {
        snapshots.push(Snapshot {
            step: 0,
            state: with_field(state.clone(), 0),
        });
    }
    let mut kept = Vec::new();
    let mut env = None;
    for k in 0..steps {
        if k % options.eikonal_cadence == 0 {
            let e = dynamics.tracked_environment(&state, &field.refreshes[k / options.eikonal_cadence]);
            if options.keep_environments {
                kept.push((k, e.clone()));
            }
            env = Some(e);
        }
        let env_k = env.as_ref().expect("refreshed at k = 0");
        let stage = &field.stages[k];
        let mut next = rk4(&state, options.dt, |y, j| dynamics.tracked_rates(y, &stage[j], env_k));
        let t = (k + 1) as f64 * options.dt;
        next.set_time(t);
        if !next.is_finite() {
            let detail = format!(
                "non-finite state (newtonian finite: {}, meanfield finite: {})",
                next.newtonian.is_finite(),
                next.meanfield.is_finite(),
            );
            return Err(Error::BlowUp {
                step: k + 1,
                t,
                detail,
                last_finite: Some(Box::new(with_field(state, k))),
            });
        }
        state = next;
        dev = dev.max(state.deviation());
        dev_sup.push((t, dev));
        if options.snapshot_cadence > 0 && (k + 1) % options.snapshot_cadence == 0 {
            snapshots.push(Snapshot {
                step: k + 1,
                state: with_field(state.clone(), k + 1),
            });
        }
    }
    Ok(CoupledRun {
        params: dynamics.params.clone(),
        scenario: dynamics.scenario.clone(),
        options: *options,
        seed,
        replica,
        initial: with_field(initial, 0),
        final_state: with_field(state, steps),
        dev_sup,
        snapshots,
        environments: kept,
    })
}

fn check_physics(params: &ModelParams, scenario: &Scenario) -> Result<()> {
    params.with_n(params.n.max(2)).validate()?;
    scenario.validate()
}

/// Samples shared initial data for `n` tracked particles and `m` field
/// particles, then integrates the coupled system to `t_end`.
#[allow(clippy::too_many_arguments)]
pub fn run_coupled(
    f0: &InitialSpec,
    params: &ModelParams,
    scenario: &Scenario,
    n: usize,
    m: usize,
    options: &RunOptions,
    seed: u64,
    replica: u64,
) -> Result<CoupledRun> {
    let params = params.with_n(n);
    check_physics(&params, scenario)?;
    if m < MIN_FIELD_FACTOR * n {
        return Err(Error::config(
            "m_factor",
            format!("field size {m} is below {MIN_FIELD_FACTOR} × {n}"),
        ));
    }
    options.steps()?;
    let field = FieldTrajectory::sample(f0, &params, scenario, m, options, seed, replica)?;
    run_replica(f0, &params, scenario, &field, options, seed, replica)
}

/// Tracked ensemble for `replica` against a given field trajectory; the
/// field may be shared between replicas.
#[allow(clippy::too_many_arguments)]
pub fn run_replica(
    f0: &InitialSpec,
    params: &ModelParams,
    scenario: &Scenario,
    field: &FieldTrajectory,
    options: &RunOptions,
    seed: u64,
    replica: u64,
) -> Result<CoupledRun> {
    check_physics(params, scenario)?;
    if field.m() < MIN_FIELD_FACTOR * params.n {
        return Err(Error::config(
            "m_factor",
            format!("field size {} is below {MIN_FIELD_FACTOR} × {}", field.m(), params.n),
        ));
    }
    let key = StreamKey::new(seed, Purpose::TrackedInit).replica(replica);
    let tracked = sample_initial(f0, params.n, key)?;
    integrate_tracked(&Dynamics::new(params, scenario), tracked, field, options, seed, replica, true)
}

/// As [`run_replica`] without the mean-field tracers: the Newtonian flow
/// alone, driven by the field's density when `drive_density` says so.
#[allow(clippy::too_many_arguments)]
pub fn run_newtonian_in_field(
    f0: &InitialSpec,
    params: &ModelParams,
    scenario: &Scenario,
    field: &FieldTrajectory,
    options: &RunOptions,
    seed: u64,
    replica: u64,
) -> Result<CoupledRun> {
    check_physics(params, scenario)?;
    let key = StreamKey::new(seed, Purpose::TrackedInit).replica(replica);
    let tracked = sample_initial(f0, params.n, key)?;
    integrate_tracked(&Dynamics::new(params, scenario), tracked, field, options, seed, replica, false)
}

/// Integrates a prepared initial state. The Newtonian and mean-field
/// ensembles must be identical.
pub fn run_from(
    params: &ModelParams,
    scenario: &Scenario,
    initial: CoupledState,
    options: &RunOptions,
    seed: u64,
    replica: u64,
) -> Result<CoupledRun> {
    if initial.newtonian != initial.meanfield {
        return Err(Error::Contract("the two flows must start from the same data".into()));
    }
    let field = FieldTrajectory::integrate(params, scenario, initial.field, options)?;
    integrate_tracked(
        &Dynamics::new(params, scenario),
        initial.newtonian,
        &field,
        options,
        seed,
        replica,
        true,
    )
}

/// Newtonian flow only (no mean-field partner).
#[allow(clippy::too_many_arguments)]
pub fn run_newtonian(
    f0: &InitialSpec,
    params: &ModelParams,
    scenario: &Scenario,
    n: usize,
    options: &RunOptions,
    seed: u64,
    replica: u64,
) -> Result<CoupledRun> {
    let params = params.with_n(n);
    check_physics(&params, scenario)?;
    let key = StreamKey::new(seed, Purpose::TrackedInit).replica(replica);
    let tracked = sample_initial(f0, n, key)?;
    let field = FieldTrajectory::integrate(&params, scenario, Ensemble::default(), options)?;
    integrate_tracked(&Dynamics::new(&params, scenario), tracked, &field, options, seed, replica, false)
}

/// Replays the stored environments in reverse, integrating both flows from
/// `t_end` back to 0, and returns the largest phase-space discrepancy with
/// the stored initial data.
pub fn backward_check(run: &CoupledRun) -> Result<f64> {
    let steps = run.options.steps()?;
    if steps == 0 {
        return Ok(0.0);
    }
    if run.environments.is_empty() || run.environments[0].0 != 0 {
        return Err(Error::Contract(
            "run was integrated without keep_environments".into(),
        ));
    }
    let dynamics = Dynamics::new(&run.params, &run.scenario);
    let mut state = run.final_state.clone();
    let mut idx = run.environments.len() - 1;
    for k in (0..steps).rev() {
        while run.environments[idx].0 > k {
            idx -= 1;
        }
        state = dynamics.step(&state, &run.environments[idx].1, -run.options.dt);
        state.set_time(k as f64 * run.options.dt);
    }
    let mut err = 0.0f64;
    if !state.newtonian.is_empty() {
        err = err.max(state.newtonian.sup_distance(&run.initial.newtonian));
    }
    if !state.meanfield.is_empty() {
        err = err.max(state.meanfield.sup_distance(&run.initial.meanfield));
    }
    Ok(err)
}
