//! The six subcommands as library functions. Each writes its files into an
//! [`OutputDir`] and returns the manifest that lists them.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::output::{write_json_file, FileRecord, OutputDir};
use crate::calibration::{calibrate, certify, Calibration, Certification};
use crate::dynamics::{
    run_newtonian, run_newtonian_in_field, run_replica, CoupledRun, Ensemble, FieldTrajectory,
};
use crate::error::{Error, Result};
use crate::measures::{bl_bracket, ensemble_points, EmpiricalMeasure, TestFunction};
use crate::initial::sample_points;
use crate::params::DriveDensity;
use crate::rng::{Purpose, StreamKey};
use crate::stats::{
    exceeds_alpha, fluctuation_moments, non_increasing_within_ci, rate_fit, s_value, theory_bound, KernelChoice,
    MomentEstimate, ProbabilityEstimate, RateReport, RateVerdict, Z95,
};

const DEFAULTS_NOTE: &str =
    "all physical constants, the scenario and the initial law are artifact defaults chosen for plausibility and speed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Couple,
    Moments,
    Chaos,
    Sweep,
    Calibrate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Couple => "couple",
            Command::Moments => "moments",
            Command::Chaos => "chaos",
            Command::Sweep => "sweep",
            Command::Calibrate => "calibrate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsRecord {
    pub majorant_c: f64,
    pub velocity_lipschitz: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSeed {
    pub n: usize,
    pub replica: u64,
    /// Field trajectory (index into the pool) the replica ran against.
    pub field: u64,
    /// Digest of the tracked-particle stream key.
    pub tracked_stream: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub config_hash: String,
    pub config: RunConfig,
    pub threads: usize,
    pub constants: ConstantsRecord,
    pub replica_seeds: Vec<ReplicaSeed>,
    pub timings: Vec<Timing>,
    pub outputs: Vec<FileRecord>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// Outputs were written but the experiment has nothing to report.
    NoSignal(String),
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: Manifest,
    pub status: Status,
}

struct Recorder {
    cfg: RunConfig,
    command: Command,
    out: OutputDir,
    seeds: Vec<ReplicaSeed>,
    timings: Vec<Timing>,
    clock: Instant,
    start: Instant,
}

impl Recorder {
    fn new(cfg: &RunConfig, command: Command) -> Result<Self> {
        cfg.validate()?;
        Ok(Recorder {
            cfg: cfg.clone(),
            command,
            out: OutputDir::create(&cfg.output_dir)?,
            seeds: Vec::new(),
            timings: Vec::new(),
            clock: Instant::now(),
            start: Instant::now(),
        })
    }

    fn lap(&mut self, stage: impl Into<String>) {
        self.timings.push(Timing {
            stage: stage.into(),
            seconds: self.clock.elapsed().as_secs_f64(),
        });
        self.clock = Instant::now();
    }

    fn finish(mut self, constants: ConstantsRecord, status: Status) -> Result<Outcome> {
        self.timings.push(Timing {
            stage: "total".into(),
            seconds: self.start.elapsed().as_secs_f64(),
        });
        let manifest = Manifest {
            tool: "pedflow".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            config_hash: self.cfg.hash(),
            config: self.cfg.clone(),
            threads: rayon::current_num_threads(),
            constants,
            replica_seeds: self.seeds,
            timings: self.timings,
            outputs: self.out.files().to_vec(),
            note: DEFAULTS_NOTE.into(),
        };
        self.out.write_json("manifest.json", &manifest)?;
        Ok(Outcome { manifest, status })
    }

    fn config_constants(&self) -> ConstantsRecord {
        ConstantsRecord {
            majorant_c: self.cfg.params.majorant_c,
            velocity_lipschitz: self.cfg.params.velocity_lipschitz,
            source: "config".into(),
        }
    }
}

/// Field trajectories for one `N`, shared by the replicas.
fn field_pool(cfg: &RunConfig, n: usize) -> Result<Vec<FieldTrajectory>> {
    let params = cfg.params.with_n(n);
    let options = cfg.options();
    let pool = cfg.field_pool.min(cfg.replicas) as u64;
    (0..pool)
        .into_par_iter()
        .map(|k| FieldTrajectory::sample(&cfg.f0, &params, &cfg.scenario, cfg.m_factor * n, &options, cfg.seed, k))
        .collect()
}

fn seed_record(cfg: &RunConfig, n: usize, replica: u64, pool: usize) -> ReplicaSeed {
    let key = StreamKey::new(cfg.seed, Purpose::TrackedInit).replica(replica);
    ReplicaSeed {
        n,
        replica,
        field: replica % pool as u64,
        tracked_stream: format!("{:016x}", key.digest()),
    }
}

/// Coupled replicas at one `N`, each against field `r mod pool`.
fn coupled_replicas(cfg: &RunConfig, n: usize, tracers: bool) -> Result<(Vec<CoupledRun>, usize)> {
    let fields = field_pool(cfg, n)?;
    let params = cfg.params.with_n(n);
    let options = cfg.options();
    let runs = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|r| {
            let field = &fields[(r % fields.len() as u64) as usize];
            if tracers {
                run_replica(&cfg.f0, &params, &cfg.scenario, field, &options, cfg.seed, r)
            } else {
                run_newtonian_in_field(&cfg.f0, &params, &cfg.scenario, field, &options, cfg.seed, r)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((runs, fields.len()))
}

#[derive(Serialize)]
struct FrameRow {
    n: usize,
    step: usize,
    t: f64,
    mean_x: f64,
    mean_y: f64,
    mean_vx: f64,
    mean_vy: f64,
    max_speed: f64,
}

fn frame_row(n: usize, step: usize, e: &Ensemble) -> FrameRow {
    let k = e.len().max(1) as f64;
    let sx = e.x.iter().fold(glam::DVec2::ZERO, |a, p| a + *p) / k;
    let sv = e.v.iter().fold(glam::DVec2::ZERO, |a, p| a + *p) / k;
    FrameRow {
        n,
        step,
        t: e.t,
        mean_x: sx.x,
        mean_y: sx.y,
        mean_vx: sv.x,
        mean_vy: sv.y,
        max_speed: e.max_speed(),
    }
}

/// `(step, state)` for the initial data, every stored snapshot and the final
/// state, without duplicates.
fn frames(run: &CoupledRun) -> Vec<(usize, &crate::dynamics::CoupledState)> {
    let steps = (run.options.t_end / run.options.dt).round() as usize;
    let mut out = vec![(0, &run.initial)];
    for s in &run.snapshots {
        if s.step != 0 && s.step != steps {
            out.push((s.step, &s.state));
        }
    }
    if steps > 0 {
        out.push((steps, &run.final_state));
    }
    out
}

/// One Newtonian run per `N` with snapshots.
pub fn simulate(cfg: &RunConfig) -> Result<Outcome> {
    let mut rec = Recorder::new(cfg, Command::Simulate)?;
    let hash = cfg.hash();
    let options = cfg.options();
    let mut rows = Vec::new();
    for &n in &cfg.n_list {
        let params = cfg.params.with_n(n);
        let run = if params.drive_density == DriveDensity::Field {
            let field = FieldTrajectory::sample(&cfg.f0, &params, &cfg.scenario, cfg.m_factor * n, &options, cfg.seed, 0)?;
            run_newtonian_in_field(&cfg.f0, &params, &cfg.scenario, &field, &options, cfg.seed, 0)?
        } else {
            run_newtonian(&cfg.f0, &params, &cfg.scenario, n, &options, cfg.seed, 0)?
        };
        rec.seeds.push(seed_record(cfg, n, 0, 1));
        let fr = frames(&run);
        rows.extend(fr.iter().map(|(step, s)| frame_row(n, *step, &s.newtonian)));
        let ens: Vec<&Ensemble> = fr.iter().map(|(_, s)| &s.newtonian).collect();
        rec.out.write_snapshots(&format!("simulate_n{n}.bin"), "newtonian", &ens, &hash)?;
        rec.lap(format!("n={n}"));
    }
    rec.out.write_csv("simulate.csv", &rows, true)?;
    let constants = rec.config_constants();
    rec.finish(constants, Status::Ok)
}

#[derive(Serialize)]
struct DeviationRow {
    n: usize,
    replica: u64,
    t: f64,
    dev_sup: f64,
}

#[derive(Serialize)]
struct ReplicaRow {
    n: usize,
    replica: u64,
    field: u64,
    dev_final: f64,
    s_final: f64,
    event_alpha: bool,
}

#[derive(Serialize, Clone)]
pub struct MedianRow {
    pub n: usize,
    pub replicas: usize,
    pub median_dev: f64,
    pub threshold: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

fn replica_rows(cfg: &RunConfig, n: usize, runs: &[CoupledRun], pool: usize) -> Vec<ReplicaRow> {
    let alpha = cfg.exponents.alpha;
    runs.iter()
        .map(|run| {
            let d = run.final_dev_sup();
            ReplicaRow {
                n,
                replica: run.replica,
                field: run.replica % pool as u64,
                dev_final: d,
                s_final: s_value(n, alpha, d),
                event_alpha: exceeds_alpha(n, alpha, d),
            }
        })
        .collect()
}

/// Paired Newtonian / mean-field replicas with their deviation series.
pub fn couple(cfg: &RunConfig) -> Result<Outcome> {
    let mut rec = Recorder::new(cfg, Command::Couple)?;
    let hash = cfg.hash();
    let mut series = Vec::new();
    let mut summary = Vec::new();
    let mut medians = Vec::new();
    for &n in &cfg.n_list {
        let (runs, pool) = coupled_replicas(cfg, n, true)?;
        for run in &runs {
            rec.seeds.push(seed_record(cfg, n, run.replica, pool));
            series.extend(run.dev_sup.iter().map(|&(t, d)| DeviationRow {
                n,
                replica: run.replica,
                t,
                dev_sup: d,
            }));
        }
        summary.extend(replica_rows(cfg, n, &runs, pool));
        medians.push(MedianRow {
            n,
            replicas: runs.len(),
            median_dev: median(runs.iter().map(|r| r.final_dev_sup()).collect()),
            threshold: (n as f64).powf(-cfg.exponents.alpha),
        });
        if cfg.cadence.snapshot > 0 {
            let fr = frames(&runs[0]);
            let newton: Vec<&Ensemble> = fr.iter().map(|(_, s)| &s.newtonian).collect();
            let mean: Vec<&Ensemble> = fr.iter().map(|(_, s)| &s.meanfield).collect();
            rec.out.write_snapshots(&format!("couple_n{n}_newtonian.bin"), "newtonian", &newton, &hash)?;
            rec.out.write_snapshots(&format!("couple_n{n}_meanfield.bin"), "meanfield", &mean, &hash)?;
        }
        rec.lap(format!("n={n}"));
    }
    rec.out.write_csv("deviation.csv", &series, true)?;
    rec.out.write_csv("couple_summary.csv", &summary, true)?;
    rec.out.write_csv("couple_medians.csv", &medians, true)?;
    let constants = rec.config_constants();
    rec.finish(constants, Status::Ok)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub alpha: f64,
    pub n_theory: f64,
    pub rate: RateReport,
    pub non_increasing_within_ci: bool,
    /// `K N^{-n}` through the estimate at the smallest `N`.
    pub theory_bound: Vec<f64>,
    pub bound_respected: Vec<bool>,
    pub dt: f64,
}

#[derive(Serialize)]
struct ProbabilityRow {
    n: usize,
    hits: usize,
    replicas: usize,
    p_hat: f64,
    ci_lo: f64,
    ci_hi: f64,
    threshold: f64,
}

/// `P(sup dev > N^{-α})` per `N` and the fitted decay rate.
pub fn sweep(cfg: &RunConfig) -> Result<(Outcome, SweepReport, Vec<ProbabilityEstimate>)> {
    let mut rec = Recorder::new(cfg, Command::Sweep)?;
    let mut rows = Vec::new();
    let mut estimates = Vec::new();
    for &n in &cfg.n_list {
        let (runs, pool) = coupled_replicas(cfg, n, true)?;
        let r = replica_rows(cfg, n, &runs, pool);
        for run in &runs {
            rec.seeds.push(seed_record(cfg, n, run.replica, pool));
        }
        let hits = r.iter().filter(|x| x.event_alpha).count();
        estimates.push(ProbabilityEstimate::from_counts(n, hits, r.len()));
        rows.extend(r);
        rec.lap(format!("n={n}"));
    }
    let rate = rate_fit(&estimates, &cfg.exponents);
    let bound = theory_bound(&estimates, rate.n_theory);
    let report = SweepReport {
        alpha: cfg.exponents.alpha,
        n_theory: rate.n_theory,
        non_increasing_within_ci: non_increasing_within_ci(&estimates),
        bound_respected: estimates.iter().zip(&bound).map(|(e, b)| e.ci_lo <= *b).collect(),
        theory_bound: bound,
        rate,
        dt: cfg.dt,
    };
    let table: Vec<ProbabilityRow> = estimates
        .iter()
        .map(|e| ProbabilityRow {
            n: e.n,
            hits: e.hits,
            replicas: e.replicas,
            p_hat: e.p_hat,
            ci_lo: e.ci_lo,
            ci_hi: e.ci_hi,
            threshold: (e.n as f64).powf(-cfg.exponents.alpha),
        })
        .collect();
    rec.out.write_csv("sweep_runs.csv", &rows, true)?;
    rec.out.write_csv("probability.csv", &table, true)?;
    rec.out.write_json("rate_report.json", &report)?;
    let status = match report.rate.verdict {
        RateVerdict::NoSignal => Status::NoSignal("every probability estimate is zero".into()),
        _ => Status::Ok,
    };
    let constants = rec.config_constants();
    Ok((rec.finish(constants, status)?, report, estimates))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeFit {
    pub kernel: KernelChoice,
    pub slope: f64,
    pub slope_se: f64,
}

/// Weighted least squares of `ln y` on `ln n` with weights `(y / se)²`.
pub fn log_log_slope(points: &[(usize, f64, f64)]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|(_, y, se)| *y > 0.0 && *se > 0.0)
        .map(|&(n, y, se)| ((n as f64).ln(), y.ln(), (y / se).powi(2)))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, (1.0 / sxx).sqrt()))
}

#[derive(Serialize)]
struct MomentRow {
    n: usize,
    p: u32,
    moment: f64,
    std_err: f64,
    ci_lo: f64,
    ci_hi: f64,
    second: f64,
    second_se: f64,
    var_h_over_n1: f64,
    var_h_over_n1_se: f64,
    mean_ax: f64,
    mean_ax_se: f64,
    mean_ay: f64,
    mean_ay_se: f64,
}

fn moment_rows(est: &[MomentEstimate]) -> Vec<MomentRow> {
    est.iter()
        .map(|e| {
            let m = (e.n - 1) as f64;
            MomentRow {
                n: e.n,
                p: e.p,
                moment: e.moment,
                std_err: e.std_err,
                ci_lo: e.ci_lo,
                ci_hi: e.ci_hi,
                second: e.second,
                second_se: e.second_se,
                var_h_over_n1: e.var_h / m,
                var_h_over_n1_se: e.var_h_se / m,
                mean_ax: e.mean_a[0],
                mean_ax_se: e.mean_a_se[0],
                mean_ay: e.mean_a[1],
                mean_ay_se: e.mean_a_se[1],
            }
        })
        .collect()
}

/// Moments of the centred kernel averages for F^N and q^N.
pub fn moments(cfg: &RunConfig) -> Result<(Outcome, Vec<(KernelChoice, Vec<MomentEstimate>)>)> {
    let mut rec = Recorder::new(cfg, Command::Moments)?;
    let m = &cfg.moments;
    let mut all = Vec::new();
    let mut fits = Vec::new();
    for (choice, name) in [(KernelChoice::Force, "force"), (KernelChoice::Majorant, "majorant")] {
        let est = fluctuation_moments(choice, &cfg.f0, &cfg.params, &m.n_list, m.p, m.replicas, m.quadrature, cfg.seed)?;
        rec.out.write_csv(&format!("moments_{name}.csv"), &moment_rows(&est), true)?;
        let pts: Vec<(usize, f64, f64)> = est.iter().map(|e| (e.n, e.moment, e.std_err)).collect();
        if let Some((slope, slope_se)) = log_log_slope(&pts) {
            fits.push(SlopeFit {
                kernel: choice,
                slope,
                slope_se,
            });
        }
        all.push((choice, est));
        rec.lap(name);
    }
    rec.out.write_json("moments_fit.json", &fits)?;
    let constants = rec.config_constants();
    Ok((rec.finish(constants, Status::Ok)?, all))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChaosRow {
    pub n: usize,
    pub t: f64,
    pub marginal: String,
    pub points: usize,
    pub lower: f64,
    pub upper: f64,
    pub upper_sd: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Baseline {
    /// Sample size of each side.
    pub k: usize,
    pub draws: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChaosReport {
    pub baseline: Baseline,
    pub rows: Vec<ChaosRow>,
    /// Strict marginal at `t_end`: later upper bounds never exceed an
    /// earlier interval's upper end.
    pub strict_non_increasing: bool,
    /// `|upper(t = 0) / baseline - 1|` for the strict marginal, per `N`.
    pub t0_relative_gap: Vec<f64>,
}

/// `min{W₁, 2}` between two independent `k`-point samples of `f0`.
fn sampling_baseline(cfg: &RunConfig, k: usize) -> Baseline {
    let vals: Vec<f64> = (0..cfg.chaos.baseline_draws as u64)
        .into_par_iter()
        .map(|d| {
            let key = StreamKey::new(cfg.seed, Purpose::Baseline).replica(d);
            let a = sample_points(&cfg.f0, k, key);
            let b = sample_points(&cfg.f0, k, key.replica(d + (1 << 32)));
            crate::measures::truncated_w1(&a, &b)
        })
        .collect();
    let m = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / m;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Baseline {
        k,
        draws: vals.len(),
        mean,
        sd: var.sqrt(),
    }
}

/// Bounded-Lipschitz brackets between the one-particle marginal of the
/// Newtonian flow and the pooled field ensembles, at `t = 0` and `t_end`.
pub fn chaos(cfg: &RunConfig) -> Result<(Outcome, ChaosReport)> {
    let mut rec = Recorder::new(cfg, Command::Chaos)?;
    let k = cfg.replicas;
    let baseline = sampling_baseline(cfg, k);
    rec.lap("baseline");
    let mut rows = Vec::new();
    let mut witnesses: Vec<(usize, f64, String, TestFunction)> = Vec::new();
    for &n in &cfg.n_list {
        let (runs, pool) = coupled_replicas(cfg, n, false)?;
        for run in &runs {
            rec.seeds.push(seed_record(cfg, n, run.replica, pool));
        }
        // one representative field state per pool member
        let mut seen = vec![false; pool];
        let mut field_init = Vec::new();
        let mut field_end = Vec::new();
        for run in &runs {
            let f = (run.replica % pool as u64) as usize;
            if !seen[f] {
                seen[f] = true;
                field_init.extend(ensemble_points(&run.initial.field));
                field_end.extend(ensemble_points(&run.final_state.field));
            }
        }
        for (t, states, reference) in [
            (0.0, runs.iter().map(|r| &r.initial.newtonian).collect::<Vec<_>>(), field_init),
            (cfg.t_end, runs.iter().map(|r| &r.final_state.newtonian).collect(), field_end),
        ] {
            let nu = EmpiricalMeasure::uniform(reference)?;
            let strict = EmpiricalMeasure::uniform(
                states.iter().map(|e| [e.x[0].x, e.x[0].y, e.v[0].x, e.v[0].y]).collect(),
            )?;
            let pooled = EmpiricalMeasure::uniform(states.iter().flat_map(|e| ensemble_points(e)).collect())?;
            for (label, mu) in [("strict", strict), ("pooled", pooled)] {
                let sub = k.min(mu.len()).min(nu.len());
                let seed = cfg.seed ^ (n as u64) << 20;
                let b = bl_bracket(&mu, &nu, cfg.chaos.bank_size, sub, cfg.chaos.draws, seed)?;
                let half = Z95 * (b.upper_sd.powi(2) + baseline.sd.powi(2)).sqrt();
                rows.push(ChaosRow {
                    n,
                    t,
                    marginal: label.into(),
                    points: mu.len(),
                    lower: b.lower,
                    upper: b.upper,
                    upper_sd: b.upper_sd,
                    ci_lo: (b.upper - half).max(0.0),
                    ci_hi: (b.upper + half).min(2.0),
                });
                witnesses.push((n, t, label.into(), b.witness));
            }
        }
        rec.lap(format!("n={n}"));
    }
    let strict_end: Vec<&ChaosRow> = rows
        .iter()
        .filter(|r| r.marginal == "strict" && r.t != 0.0)
        .collect();
    let strict_non_increasing = strict_end
        .iter()
        .enumerate()
        .all(|(j, later)| strict_end[..j].iter().all(|earlier| later.upper <= earlier.ci_hi));
    let t0_relative_gap = rows
        .iter()
        .filter(|r| r.marginal == "strict" && r.t == 0.0)
        .map(|r| (r.upper / baseline.mean - 1.0).abs())
        .collect();
    let report = ChaosReport {
        baseline,
        rows,
        strict_non_increasing,
        t0_relative_gap,
    };
    rec.out.write_csv("chaos.csv", &report.rows, true)?;
    rec.out.write_csv("chaos_baseline.csv", std::slice::from_ref(&report.baseline), true)?;
    rec.out.write_json("chaos_report.json", &report)?;
    #[derive(Serialize)]
    struct Witness<'a> {
        n: usize,
        t: f64,
        marginal: &'a str,
        witness: &'a TestFunction,
    }
    let w: Vec<Witness> = witnesses
        .iter()
        .map(|(n, t, m, g)| Witness {
            n: *n,
            t: *t,
            marginal: m,
            witness: g,
        })
        .collect();
    rec.out.write_json("chaos_witness.json", &w)?;
    let constants = rec.config_constants();
    Ok((rec.finish(constants, Status::Ok)?, report))
}

#[derive(Serialize)]
struct CalibrationRow {
    quantity: &'static str,
    value: f64,
}

/// Finite-difference calibration of C and L_v plus a certification pass on
/// fresh samples.
pub fn calibrate_constants(cfg: &RunConfig) -> Result<(Outcome, Calibration, Certification)> {
    let mut rec = Recorder::new(cfg, Command::Calibrate)?;
    let cal = calibrate(&cfg.params, cfg.calibration_samples, cfg.seed);
    rec.lap("calibrate");
    let params = crate::params::ModelParams {
        majorant_c: cal.majorant_c,
        velocity_lipschitz: cal.velocity_lipschitz,
        ..cfg.params.clone()
    };
    let cert = certify(&params, cfg.calibration_samples, cfg.seed.wrapping_add(1));
    rec.lap("certify");
    let rows = [
        CalibrationRow {
            quantity: "majorant_c",
            value: cal.majorant_c,
        },
        CalibrationRow {
            quantity: "velocity_lipschitz",
            value: cal.velocity_lipschitz,
        },
        CalibrationRow {
            quantity: "max_position_ratio",
            value: cal.max_position_ratio,
        },
        CalibrationRow {
            quantity: "max_velocity_ratio",
            value: cal.max_velocity_ratio,
        },
        CalibrationRow {
            quantity: "certified_position_ratio",
            value: cert.worst_position_ratio,
        },
        CalibrationRow {
            quantity: "certified_velocity_ratio",
            value: cert.worst_velocity_ratio,
        },
    ];
    rec.out.write_csv("calibration.csv", &rows, true)?;
    rec.out.write_json("calibration.json", &(&cal, &cert))?;
    let constants = ConstantsRecord {
        majorant_c: cal.majorant_c,
        velocity_lipschitz: cal.velocity_lipschitz,
        source: "calibrated in this run".into(),
    };
    Ok((rec.finish(constants, Status::Ok)?, cal, cert))
}

/// Runs `command` and reports only the manifest and status. A blow-up
/// leaves `blowup_state.json` with the last finite state in the output
/// directory before the error is returned.
pub fn run(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    let result = dispatch(command, cfg);
    if let Err(Error::BlowUp {
        step,
        t,
        detail,
        last_finite,
    }) = &result
    {
        #[derive(Serialize)]
        struct Dump<'a> {
            command: Command,
            config_hash: String,
            step: usize,
            t: f64,
            detail: &'a str,
            last_finite: Option<&'a crate::dynamics::CoupledState>,
        }
        let dump = Dump {
            command,
            config_hash: cfg.hash(),
            step: *step,
            t: *t,
            detail,
            last_finite: last_finite.as_deref(),
        };
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
        write_json_file(&cfg.output_dir.join("blowup_state.json"), &dump)?;
    }
    result
}

fn dispatch(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    match command {
        Command::Simulate => simulate(cfg),
        Command::Couple => couple(cfg),
        Command::Moments => moments(cfg).map(|o| o.0),
        Command::Chaos => chaos(cfg).map(|o| o.0),
        Command::Sweep => sweep(cfg).map(|o| o.0),
        Command::Calibrate => calibrate_constants(cfg).map(|o| o.0),
    }
}
