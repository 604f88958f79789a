//! Deviation process, bad-data event sets, fluctuation moments of the
//! centred kernel average, Monte Carlo probabilities and rate fits.

use glam::DVec2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dynamics::{CoupledRun, Ensemble};
use crate::error::{Error, Result};
use crate::forces::CutoffKernel;
use crate::initial::{sample_points, InitialSpec, PhasePoint};
use crate::neighbors::CellGrid;
use crate::params::ModelParams;
use crate::rng::{Purpose, StreamKey};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawExponents {
    alpha: f64,
    beta: f64,
    gamma: f64,
    theta: f64,
}

impl Default for RawExponents {
    fn default() -> Self {
        let e = ExponentConfig::default();
        RawExponents {
            alpha: e.alpha,
            beta: e.beta,
            gamma: e.gamma,
            theta: e.theta,
        }
    }
}

impl Default for ExponentConfig {
    /// `(α, β, γ, θ) = (0.1, 0.15, 0.02, 0.2)`.
    fn default() -> Self {
        ExponentConfig {
            alpha: 0.1,
            beta: 0.15,
            gamma: 0.02,
            theta: 0.2,
        }
    }
}

impl<'de> Deserialize<'de> for ExponentConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = RawExponents::deserialize(d)?;
        Ok(ExponentConfig {
            alpha: r.alpha,
            beta: r.beta,
            gamma: r.gamma,
            theta: r.theta,
        })
    }
}

fn open_interval(field: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v > lo && v < hi {
        Ok(())
    } else {
        Err(Error::config(
            field,
            format!("must lie in the open interval ({lo}, {hi}), got {v}"),
        ))
    }
}

impl ExponentConfig {
    pub fn new(alpha: f64, beta: f64, gamma: f64, theta: f64) -> Result<Self> {
        let e = ExponentConfig {
            alpha,
            beta,
            gamma,
            theta,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        open_interval("exponents.theta", self.theta, 0.0, 0.25)?;
        open_interval("exponents.alpha", self.alpha, 0.0, 0.2)?;
        open_interval("exponents.beta", self.beta, self.alpha, (1.0 - self.alpha) / 4.0)?;
        open_interval(
            "exponents.gamma",
            self.gamma,
            0.0,
            (1.0 - self.alpha) / 4.0 - self.theta,
        )
    }

    /// `min{1 - α - 4β, 1 - α - 4θ - 4γ, β - α}`.
    pub fn n_theory(&self) -> f64 {
        let (a, b, g, t) = (self.alpha, self.beta, self.gamma, self.theta);
        (1.0 - a - 4.0 * b).min(1.0 - a - 4.0 * t - 4.0 * g).min(b - a)
    }

    /// `r(N) = max{N^{-(1-α-4β)}, N^{α-β}, N^{-(1-α-4γ)} ln²N}`.
    pub fn rate_r(&self, n: usize) -> f64 {
        let nf = n as f64;
        let (a, b, g) = (self.alpha, self.beta, self.gamma);
        let l = nf.ln();
        nf.powf(-(1.0 - a - 4.0 * b))
            .max(nf.powf(a - b))
            .max(nf.powf(-(1.0 - a - 4.0 * g)) * l * l)
    }

    /// Majorant fluctuation rate: `N^{-(1-4γ)} ln²N` for bounded initial
    /// densities, `N^{-(1-4θ-4γ)}` otherwise.
    pub fn rate_r_tilde(&self, n: usize, bounded_density: bool) -> f64 {
        let nf = n as f64;
        if bounded_density {
            let l = nf.ln();
            nf.powf(-(1.0 - 4.0 * self.gamma)) * l * l
        } else {
            nf.powf(-(1.0 - 4.0 * self.theta - 4.0 * self.gamma))
        }
    }

    /// Force fluctuation rate `N^{-(1-4β)}`.
    pub fn rate_force_fluctuation(&self, n: usize) -> f64 {
        (n as f64).powf(-(1.0 - 4.0 * self.beta))
    }
}

/// `min{1, N^α · dev}`, saturating exactly at `dev = N^{-α}`.
pub fn s_value(n: usize, alpha: f64, dev: f64) -> f64 {
    let threshold = (n as f64).powf(-alpha);
    if dev >= threshold {
        1.0
    } else {
        (dev / threshold).min(1.0)
    }
}

/// `(t, S_t)` for every recorded time of the run.
pub fn deviation_process(run: &CoupledRun, alpha: f64) -> Vec<(f64, f64)> {
    let n = run.n();
    run.dev_sup
        .iter()
        .map(|&(t, d)| (t, s_value(n, alpha, d)))
        .collect()
}

/// `sup dev > N^{-α}` (strict).
pub fn exceeds_alpha(n: usize, alpha: f64, dev_sup: f64) -> bool {
    dev_sup > (n as f64).powf(-alpha)
}

pub fn event_alpha(run: &CoupledRun, alpha: f64) -> bool {
    exceeds_alpha(run.n(), alpha, run.final_dev_sup())
}

/// Which kernel an empirical average is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    /// The cut-off force `F^N` (vector valued).
    Force,
    /// The Lipschitz majorant `q^N` (scalar, stored in the x component).
    Majorant,
}

impl KernelChoice {
    #[inline]
    fn eval(self, k: &CutoffKernel, x: DVec2, v: DVec2) -> DVec2 {
        match self {
            KernelChoice::Force => k.force(x, v),
            KernelChoice::Majorant => DVec2::new(k.majorant(x, v), 0.0),
        }
    }
}

/// `max_i |(1/(N-1)) Σ_{j≠i} K(z̄_i - z̄_j) - (1/M) Σ_k K(z̄_i - y_k)|`.
pub fn fluctuation_sup(
    tracked: &Ensemble,
    field: &Ensemble,
    params: &ModelParams,
    choice: KernelChoice,
) -> f64 {
    let n = tracked.len();
    if n == 0 {
        return 0.0;
    }
    let kernel = CutoffKernel::new(&params.with_n(n));
    let own = CellGrid::build(&tracked.x, kernel.support_radius());
    let ext = CellGrid::build(&field.x, kernel.support_radius());
    let w_own = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };
    let w_ext = if field.is_empty() { 0.0 } else { 1.0 / field.len() as f64 };
    (0..n)
        .into_par_iter()
        .with_min_len(64)
        .map(|i| {
            let (xi, vi) = (tracked.x[i], tracked.v[i]);
            let mut a = DVec2::ZERO;
            own.for_each_candidate(xi, |j| {
                if j != i {
                    a += choice.eval(&kernel, xi - tracked.x[j], vi - tracked.v[j]);
                }
            });
            let mut b = DVec2::ZERO;
            ext.for_each_candidate(xi, |k| b += choice.eval(&kernel, xi - field.x[k], vi - field.v[k]));
            (a * w_own - b * w_ext).length()
        })
        .reduce(|| 0.0, f64::max)
}

/// Membership in the force-fluctuation event set at one time.
pub fn event_beta(tracked: &Ensemble, field: &Ensemble, params: &ModelParams, beta: f64) -> bool {
    fluctuation_sup(tracked, field, params, KernelChoice::Force) > (tracked.len() as f64).powf(-beta)
}

/// Membership in the majorant-fluctuation event set at one time.
pub fn event_gamma(tracked: &Ensemble, field: &Ensemble, params: &ModelParams, gamma: f64) -> bool {
    fluctuation_sup(tracked, field, params, KernelChoice::Majorant) > (tracked.len() as f64).powf(-gamma)
}

/// Monte Carlo estimate of `E|A|^p` for `A = (1/(n-1)) Σ_j h_j` at one `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub n: usize,
    pub p: u32,
    pub moment: f64,
    pub std_err: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Sample mean of `A` (per component) and its standard error.
    pub mean_a: [f64; 2],
    pub mean_a_se: [f64; 2],
    /// `E|A|²` and its standard error (whatever `p` is).
    pub second: f64,
    pub second_se: f64,
    /// `E|h|²` over all companions, with standard error.
    pub var_h: f64,
    pub var_h_se: f64,
    pub replicas: usize,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (k - 1.0);
    (m, (var / k).sqrt())
}

struct ReplicaMoments {
    a: DVec2,
    h2_mean: f64,
}

/// Moments of the centred kernel average for each `n` in `n_list`.
///
/// Replica `r` draws one tracked point and `max(n_list) - 1` companions from
/// `f0`; smaller `n` use a prefix of the same companions. The kernel mean
/// `∬ K(z₁ - z) f₀(z) dz` is estimated from `quadrature` independent points
/// shared by all replicas. The kernel is built with `N = n`.
#[allow(clippy::too_many_arguments)]
pub fn fluctuation_moments(
    choice: KernelChoice,
    f0: &InitialSpec,
    params: &ModelParams,
    n_list: &[usize],
    p: u32,
    replicas: usize,
    quadrature: usize,
    seed: u64,
) -> Result<Vec<MomentEstimate>> {
    if p == 0 || p % 2 == 1 {
        return Err(Error::Contract(format!("moment order must be even, got {p}")));
    }
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) || n_list[0] < 2 {
        return Err(Error::Contract("n_list must be ascending with n >= 2".into()));
    }
    if replicas < 2 || quadrature == 0 {
        return Err(Error::Contract("need at least two replicas and one quadrature point".into()));
    }
    f0.validate()?;
    let n_max = *n_list.last().expect("non-empty");
    let quad = sample_points(f0, quadrature, StreamKey::new(seed, Purpose::Quadrature));
    let qx: Vec<DVec2> = quad.iter().map(|z| DVec2::new(z[0], z[1])).collect();
    let qv: Vec<DVec2> = quad.iter().map(|z| DVec2::new(z[2], z[3])).collect();
    let kernels: Vec<CutoffKernel> = n_list
        .iter()
        .map(|&n| CutoffKernel::new(&params.with_n(n)))
        .collect();
    let support = kernels
        .iter()
        .map(|k| k.support_radius())
        .fold(0.0, f64::max);
    let qgrid = CellGrid::build(&qx, support);

    let per_replica: Vec<Vec<ReplicaMoments>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let key = StreamKey::new(seed, Purpose::Companions).replica(r as u64);
            let pts: Vec<PhasePoint> = sample_points(f0, n_max, key);
            let x1 = DVec2::new(pts[0][0], pts[0][1]);
            let v1 = DVec2::new(pts[0][2], pts[0][3]);
            kernels
                .iter()
                .zip(n_list)
                .map(|(kernel, &n)| {
                    let mut mean = DVec2::ZERO;
                    qgrid.for_each_candidate(x1, |q| mean += choice.eval(kernel, x1 - qx[q], v1 - qv[q]));
                    mean /= quadrature as f64;
                    let mut sum = DVec2::ZERO;
                    let mut h2 = 0.0;
                    for z in &pts[1..n] {
                        let k = choice.eval(kernel, x1 - DVec2::new(z[0], z[1]), v1 - DVec2::new(z[2], z[3]));
                        sum += k;
                        h2 += (k - mean).length_squared();
                    }
                    let m = (n - 1) as f64;
                    ReplicaMoments {
                        a: sum / m - mean,
                        h2_mean: h2 / m,
                    }
                })
                .collect()
        })
        .collect();

    Ok(n_list
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let col = |f: &dyn Fn(&ReplicaMoments) -> f64| -> Vec<f64> {
                per_replica.iter().map(|r| f(&r[k])).collect()
            };
            let (moment, se) = mean_se(&col(&|r| r.a.length().powi(p as i32)));
            let (second, second_se) = mean_se(&col(&|r| r.a.length_squared()));
            let (ax, ax_se) = mean_se(&col(&|r| r.a.x));
            let (ay, ay_se) = mean_se(&col(&|r| r.a.y));
            let (var_h, var_h_se) = mean_se(&col(&|r| r.h2_mean));
            MomentEstimate {
                n,
                p,
                moment,
                std_err: se,
                ci_lo: moment - Z95 * se,
                ci_hi: moment + Z95 * se,
                mean_a: [ax, ay],
                mean_a_se: [ax_se, ay_se],
                second,
                second_se,
                var_h,
                var_h_se,
                replicas,
            }
        })
        .collect())
}

/// Wilson score interval for `hits` successes out of `trials`.
pub fn wilson(hits: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if hits == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if hits == trials { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityEstimate {
    pub n: usize,
    pub hits: usize,
    pub replicas: usize,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl ProbabilityEstimate {
    pub fn from_flags(n: usize, flags: &[bool]) -> Result<Self> {
        if flags.len() < 30 {
            return Err(Error::Contract(format!(
                "probability estimates need at least 30 replicas, got {}",
                flags.len()
            )));
        }
        let hits = flags.iter().filter(|&&f| f).count();
        Ok(Self::from_counts(n, hits, flags.len()))
    }

    pub fn from_counts(n: usize, hits: usize, replicas: usize) -> Self {
        let (ci_lo, ci_hi) = wilson(hits, replicas, Z95);
        ProbabilityEstimate {
            n,
            hits,
            replicas,
            p_hat: if replicas == 0 { 0.0 } else { hits as f64 / replicas as f64 },
            ci_lo,
            ci_hi,
        }
    }

    /// A bare value with unknown sampling variance (synthetic input).
    pub fn exact(n: usize, p_hat: f64) -> Self {
        ProbabilityEstimate {
            n,
            hits: 0,
            replicas: 0,
            p_hat,
            ci_lo: p_hat,
            ci_hi: p_hat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateVerdict {
    Fitted,
    /// Fewer than three usable points after censoring.
    Insufficient,
    /// Every estimate is zero.
    NoSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub n_theory: f64,
    pub verdict: RateVerdict,
    pub slope_fit: Option<f64>,
    pub slope_se: Option<f64>,
    pub ci: Option<[f64; 2]>,
    pub intercept: Option<f64>,
    /// Reduced χ² of the weighted fit, when sampling variances are known.
    pub reduced_chi2: Option<f64>,
    pub used_n: Vec<usize>,
    pub censored_n: Vec<usize>,
    /// Wilson upper bounds of the censored points.
    pub censored_upper: Vec<f64>,
}

/// Weighted least-squares slope of `ln p̂` against `ln N`.
///
/// Points with `p̂ = 0` are censored. With known replica counts the weights
/// are delta-method inverse variances `n p / (1 - p)` (p clamped away from
/// 0 and 1 by half a count) and the standard error is inflated by the
/// reduced χ² when that exceeds one; otherwise the fit is unweighted with a
/// Student-t interval from the residuals.
pub fn rate_fit(points: &[ProbabilityEstimate], exponents: &ExponentConfig) -> RateReport {
    let mut report = RateReport {
        n_theory: exponents.n_theory(),
        verdict: RateVerdict::NoSignal,
        slope_fit: None,
        slope_se: None,
        ci: None,
        intercept: None,
        reduced_chi2: None,
        used_n: Vec::new(),
        censored_n: Vec::new(),
        censored_upper: Vec::new(),
    };
    let mut used = Vec::new();
    for e in points {
        if e.p_hat > 0.0 {
            used.push(e);
        } else {
            report.censored_n.push(e.n);
            report.censored_upper.push(e.ci_hi);
        }
    }
    report.used_n = used.iter().map(|e| e.n).collect();
    if used.is_empty() {
        return report;
    }
    let mut ns: Vec<usize> = report.used_n.clone();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 3 {
        report.verdict = RateVerdict::Insufficient;
        return report;
    }
    let known = used.iter().all(|e| e.replicas > 0);
    let xs: Vec<f64> = used.iter().map(|e| (e.n as f64).ln()).collect();
    let ys: Vec<f64> = used.iter().map(|e| e.p_hat.ln()).collect();
    let ws: Vec<f64> = used
        .iter()
        .map(|e| {
            if known {
                let r = e.replicas as f64;
                let p = e.p_hat.clamp(0.5 / r, 1.0 - 0.5 / r);
                r * p / (1.0 - p)
            } else {
                1.0
            }
        })
        .collect();
    let sw: f64 = ws.iter().sum();
    let xm = ws.iter().zip(&xs).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = ws.iter().zip(&ys).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = ws.iter().zip(&xs).map(|(w, x)| w * (x - xm) * (x - xm)).sum();
    let sxy: f64 = (0..xs.len()).map(|i| ws[i] * (xs[i] - xm) * (ys[i] - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2: f64 = (0..xs.len())
        .map(|i| {
            let r = ys[i] - intercept - slope * xs[i];
            ws[i] * r * r
        })
        .sum();
    let dof = (xs.len() - 2) as f64;
    let (se, half) = if known {
        let red = chi2 / dof;
        report.reduced_chi2 = Some(red);
        if red > 1.0 {
            let se = (red / sxx).sqrt();
            (se, t_quantile(dof) * se)
        } else {
            let se = (1.0 / sxx).sqrt();
            (se, Z95 * se)
        }
    } else {
        let se = (chi2 / dof / sxx).sqrt();
        (se, t_quantile(dof) * se)
    };
    report.verdict = RateVerdict::Fitted;
    report.slope_fit = Some(slope);
    report.slope_se = Some(se);
    report.ci = Some([slope - half, slope + half]);
    report.intercept = Some(intercept);
    report
}

fn t_quantile(dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof)
        .expect("dof > 0")
        .inverse_cdf(0.975)
}

/// The bound `K · N^{-n}` with `K` chosen so that it passes through the
/// estimate at the smallest `N`.
pub fn theory_bound(points: &[ProbabilityEstimate], n_theory: f64) -> Vec<f64> {
    let Some(first) = points.iter().min_by_key(|e| e.n) else {
        return Vec::new();
    };
    let k = first.p_hat * (first.n as f64).powf(n_theory);
    points.iter().map(|e| k * (e.n as f64).powf(-n_theory)).collect()
}

/// True when the estimates, ordered by `N`, never increase beyond what the
/// Wilson intervals allow: each later interval reaches down to the lower
/// end of every earlier one.
pub fn non_increasing_within_ci(points: &[ProbabilityEstimate]) -> bool {
    let mut sorted: Vec<&ProbabilityEstimate> = points.iter().collect();
    sorted.sort_by_key(|e| e.n);
    sorted
        .iter()
        .enumerate()
        .all(|(j, later)| sorted[..j].iter().all(|earlier| later.ci_lo <= earlier.ci_hi))
}
