//! Scenario geometry and the density-coupled eikonal equation
//! `s(x) |∇Φ| = 1`, solved by first-order fast marching on a cell-centred grid.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use glam::DVec2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forces::Heading;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn contains(&self, p: DVec2) -> bool {
        p.x >= self.min[0] && p.x <= self.max[0] && p.y >= self.min[1] && p.y <= self.max[1]
    }

    pub fn clamp(&self, p: DVec2) -> DVec2 {
        DVec2::new(
            p.x.clamp(self.min[0], self.max[0]),
            p.y.clamp(self.min[1], self.max[1]),
        )
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }
}

/// Cells where Φ = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Target {
    LeftEdge,
    RightEdge,
    BottomEdge,
    TopEdge,
    /// The single cell containing the point.
    Point { at: [f64; 2] },
    Cells { cells: Vec<[usize; 2]> },
}

/// Map from normalised density to slowness, before clamping into `[ε, 1/ε]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SlownessMap {
    /// `s = ρ`, the equation `ρ |∇Φ| = 1` taken literally.
    #[default]
    Density,
    /// `s = 1 + weight · ρ`: travel cost grows with congestion.
    Congestion { weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub domain: Rect,
    pub target: Target,
    pub grid_h: f64,
    /// ε; slowness is clamped into `[ε, 1/ε]`.
    pub slowness_floor: f64,
    pub slowness: SlownessMap,
}

impl Default for Scenario {
    /// 20 m × 10 m corridor with the exit on the right edge.
    fn default() -> Self {
        Scenario {
            domain: Rect {
                min: [0.0, 0.0],
                max: [20.0, 10.0],
            },
            target: Target::RightEdge,
            grid_h: 0.25,
            slowness_floor: 0.05,
            slowness: SlownessMap::Density,
        }
    }
}

/// Cell-centred lattice covering a rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin: [f64; 2],
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridGeometry {
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize) -> DVec2 {
        DVec2::new(
            self.origin[0] + (i as f64 + 0.5) * self.h,
            self.origin[1] + (j as f64 + 0.5) * self.h,
        )
    }

    /// Cell containing `p`, clamped to the lattice.
    pub fn cell_of(&self, p: DVec2) -> (usize, usize) {
        let fx = ((p.x - self.origin[0]) / self.h).floor();
        let fy = ((p.y - self.origin[1]) / self.h).floor();
        (
            (fx.max(0.0) as usize).min(self.nx - 1),
            (fy.max(0.0) as usize).min(self.ny - 1),
        )
    }
}

/// Row-major scalar or vector field on a [`GridGeometry`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub geometry: GridGeometry,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(geometry: GridGeometry, value: T) -> Self {
        Grid {
            geometry,
            data: vec![value; geometry.len()],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[self.geometry.index(i, j)]
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let d = &self.domain;
        if !(d.width() > 0.0 && d.height() > 0.0 && d.width().is_finite() && d.height().is_finite())
        {
            return Err(Error::config("scenario.domain", "max must exceed min in both axes"));
        }
        if !(self.grid_h > 0.0 && self.grid_h.is_finite()) {
            return Err(Error::config("scenario.grid_h", format!("must be > 0, got {}", self.grid_h)));
        }
        if !(self.slowness_floor > 0.0 && self.slowness_floor < 1.0) {
            return Err(Error::config(
                "scenario.slowness_floor",
                format!("must lie in (0, 1), got {}", self.slowness_floor),
            ));
        }
        if let SlownessMap::Congestion { weight } = self.slowness {
            if !(weight >= 0.0 && weight.is_finite()) {
                return Err(Error::config("scenario.slowness.weight", "must be finite and >= 0"));
            }
        }
        let geom = self.geometry();
        if geom.len() > 16_000_000 {
            return Err(Error::config("scenario.grid_h", "grid would exceed 1.6e7 cells"));
        }
        match &self.target {
            Target::Point { at } => {
                if !self.domain.contains(DVec2::new(at[0], at[1])) {
                    return Err(Error::config("scenario.target.at", "point lies outside the domain"));
                }
            }
            Target::Cells { cells } => {
                if cells.is_empty() {
                    return Err(Error::config("scenario.target.cells", "must not be empty"));
                }
                if let Some(c) = cells.iter().find(|c| c[0] >= geom.nx || c[1] >= geom.ny) {
                    return Err(Error::config(
                        "scenario.target.cells",
                        format!("cell {c:?} outside the {}×{} grid", geom.nx, geom.ny),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn geometry(&self) -> GridGeometry {
        let nx = ((self.domain.width() / self.grid_h) - 1e-9).ceil().max(1.0) as usize;
        let ny = ((self.domain.height() / self.grid_h) - 1e-9).ceil().max(1.0) as usize;
        GridGeometry {
            origin: self.domain.min,
            h: self.grid_h,
            nx,
            ny,
        }
    }

    pub fn target_mask(&self) -> Vec<bool> {
        let g = self.geometry();
        let mut mask = vec![false; g.len()];
        match &self.target {
            Target::LeftEdge => (0..g.ny).for_each(|j| mask[g.index(0, j)] = true),
            Target::RightEdge => (0..g.ny).for_each(|j| mask[g.index(g.nx - 1, j)] = true),
            Target::BottomEdge => (0..g.nx).for_each(|i| mask[g.index(i, 0)] = true),
            Target::TopEdge => (0..g.nx).for_each(|i| mask[g.index(i, g.ny - 1)] = true),
            Target::Point { at } => {
                let (i, j) = g.cell_of(DVec2::new(at[0], at[1]));
                mask[g.index(i, j)] = true;
            }
            Target::Cells { cells } => {
                for c in cells {
                    mask[g.index(c[0], c[1])] = true;
                }
            }
        }
        mask
    }

    #[inline]
    pub fn slowness(&self, rho: f64) -> f64 {
        let raw = match self.slowness {
            SlownessMap::Density => rho,
            SlownessMap::Congestion { weight } => 1.0 + weight * rho,
        };
        raw.clamp(self.slowness_floor, 1.0 / self.slowness_floor)
    }
}

/// Travel cost Φ, its upwind gradient and the time of the density snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct EikonalField {
    pub phi: Grid<f64>,
    pub grad: Grid<DVec2>,
    pub target: Vec<bool>,
    pub domain: Rect,
    pub stamp: f64,
}

/// Gradients shorter than this (relative to the slowness floor) count as zero.
const GRADIENT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq)]
struct Trial {
    value: f64,
    index: usize,
}

impl Eq for Trial {}

impl Ord for Trial {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on value, ties broken by index for determinism
        other
            .value
            .total_cmp(&self.value)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Trial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Solves `s |∇Φ| = 1`, `Φ = 0` on the target, with `s = slowness(ρ)`.
/// Cells the front never reaches keep `Φ = ∞`.
pub fn solve_eikonal(rho: &Grid<f64>, scenario: &Scenario, stamp: f64) -> Result<EikonalField> {
    solve_traced(rho, scenario, stamp, false).map(|(f, _)| f)
}

/// As [`solve_eikonal`], also returning Φ in acceptance order.
pub fn solve_eikonal_traced(
    rho: &Grid<f64>,
    scenario: &Scenario,
    stamp: f64,
) -> Result<(EikonalField, Vec<f64>)> {
    solve_traced(rho, scenario, stamp, true)
}

fn solve_traced(
    rho: &Grid<f64>,
    scenario: &Scenario,
    stamp: f64,
    trace: bool,
) -> Result<(EikonalField, Vec<f64>)> {
    let g = scenario.geometry();
    if rho.geometry != g {
        return Err(Error::Contract(format!(
            "density grid {}×{} does not match the scenario grid {}×{}",
            rho.geometry.nx, rho.geometry.ny, g.nx, g.ny
        )));
    }
    let target = scenario.target_mask();
    let h = g.h;
    let cost: Vec<f64> = rho.data.iter().map(|&r| h * scenario.slowness(r)).collect();

    let mut phi = vec![f64::INFINITY; g.len()];
    let mut accepted = vec![false; g.len()];
    let mut heap = BinaryHeap::new();
    let mut order = Vec::new();
    for (k, _) in target.iter().enumerate().filter(|(_, &t)| t) {
        phi[k] = 0.0;
        heap.push(Trial { value: 0.0, index: k });
    }

    let (nx, ny) = (g.nx, g.ny);
    while let Some(Trial { value, index }) = heap.pop() {
        if accepted[index] || value > phi[index] {
            continue;
        }
        accepted[index] = true;
        if trace {
            order.push(value);
        }
        let (i, j) = (index % nx, index / nx);
        let mut visit = |ni: usize, nj: usize| {
            let k = nj * nx + ni;
            if accepted[k] {
                return;
            }
            let a = axis_min(&phi, &accepted, nx, ni, nj, true, ny);
            let b = axis_min(&phi, &accepted, nx, ni, nj, false, ny);
            let candidate = upwind_update(a, b, cost[k]);
            if candidate < phi[k] {
                phi[k] = candidate;
                heap.push(Trial { value: candidate, index: k });
            }
        };
        if i > 0 {
            visit(i - 1, j);
        }
        if i + 1 < nx {
            visit(i + 1, j);
        }
        if j > 0 {
            visit(i, j - 1);
        }
        if j + 1 < ny {
            visit(i, j + 1);
        }
    }

    let phi = Grid { geometry: g, data: phi };
    let grad = upwind_gradient(&phi);
    Ok((
        EikonalField {
            phi,
            grad,
            target,
            domain: scenario.domain,
            stamp,
        },
        order,
    ))
}

fn axis_min(
    phi: &[f64],
    accepted: &[bool],
    nx: usize,
    i: usize,
    j: usize,
    along_x: bool,
    ny: usize,
) -> f64 {
    let mut best = f64::INFINITY;
    let mut consider = |k: usize| {
        if accepted[k] && phi[k] < best {
            best = phi[k];
        }
    };
    if along_x {
        if i > 0 {
            consider(j * nx + i - 1);
        }
        if i + 1 < nx {
            consider(j * nx + i + 1);
        }
    } else {
        if j > 0 {
            consider((j - 1) * nx + i);
        }
        if j + 1 < ny {
            consider((j + 1) * nx + i);
        }
    }
    best
}

/// First-order upwind solution of `(Φ-a)² + (Φ-b)² = c²` with the causal
/// one-sided fallback.
#[inline]
fn upwind_update(a: f64, b: f64, c: f64) -> f64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if hi - lo >= c {
        lo + c
    } else {
        let d = hi - lo;
        (lo + hi + (2.0 * c * c - d * d).sqrt()) * 0.5
    }
}

fn upwind_gradient(phi: &Grid<f64>) -> Grid<DVec2> {
    let g = phi.geometry;
    let mut grad = Grid::filled(g, DVec2::ZERO);
    let one_sided = |c: f64, lo: Option<f64>, hi: Option<f64>| -> f64 {
        let lo = lo.filter(|v| v.is_finite());
        let hi = hi.filter(|v| v.is_finite());
        match (lo, hi) {
            (Some(l), Some(r)) => {
                if l.min(r) >= c {
                    0.0
                } else if l < r {
                    (c - l) / g.h
                } else {
                    (r - c) / g.h
                }
            }
            (Some(l), None) => {
                if l < c {
                    (c - l) / g.h
                } else {
                    0.0
                }
            }
            (None, Some(r)) => {
                if r < c {
                    (r - c) / g.h
                } else {
                    0.0
                }
            }
            (None, None) => 0.0,
        }
    };
    for j in 0..g.ny {
        for i in 0..g.nx {
            let c = phi.at(i, j);
            if !c.is_finite() {
                continue;
            }
            let gx = one_sided(
                c,
                (i > 0).then(|| phi.at(i - 1, j)),
                (i + 1 < g.nx).then(|| phi.at(i + 1, j)),
            );
            let gy = one_sided(
                c,
                (j > 0).then(|| phi.at(i, j - 1)),
                (j + 1 < g.ny).then(|| phi.at(i, j + 1)),
            );
            grad.data[g.index(i, j)] = DVec2::new(gx, gy);
        }
    }
    grad
}

impl EikonalField {
    /// Walking direction `-∇Φ/|∇Φ|` at `x` from bilinear interpolation of the
    /// upwind gradient; the zero sentinel inside target cells or where the
    /// interpolated gradient vanishes.
    pub fn direction_at(&self, x: DVec2) -> Result<DVec2> {
        if !self.domain.contains(x) {
            return Err(Error::OutOfDomain { x: x.x, y: x.y });
        }
        Ok(-self.heading_at(x).get())
    }

    /// Unit gradient `∇Φ/|∇Φ|` at `x` for use in G. Points outside the domain
    /// are projected onto it.
    #[inline]
    pub fn heading_at(&self, x: DVec2) -> Heading {
        let x = self.domain.clamp(x);
        let g = self.grad.geometry;
        let (ci, cj) = g.cell_of(x);
        if self.target[g.index(ci, cj)] {
            return Heading::NONE;
        }
        // bilinear weights w.r.t. the surrounding cell centres
        let fx = ((x.x - g.origin[0]) / g.h - 0.5).clamp(0.0, (g.nx - 1) as f64);
        let fy = ((x.y - g.origin[1]) / g.h - 0.5).clamp(0.0, (g.ny - 1) as f64);
        let i0 = (fx.floor() as usize).min(g.nx.saturating_sub(2));
        let j0 = (fy.floor() as usize).min(g.ny.saturating_sub(2));
        let i1 = (i0 + 1).min(g.nx - 1);
        let j1 = (j0 + 1).min(g.ny - 1);
        let tx = (fx - i0 as f64).clamp(0.0, 1.0);
        let ty = (fy - j0 as f64).clamp(0.0, 1.0);
        let v = self.grad.at(i0, j0) * ((1.0 - tx) * (1.0 - ty))
            + self.grad.at(i1, j0) * (tx * (1.0 - ty))
            + self.grad.at(i0, j1) * ((1.0 - tx) * ty)
            + self.grad.at(i1, j1) * (tx * ty);
        Heading::from_gradient(v, GRADIENT_TOL)
    }
}
