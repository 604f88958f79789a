//! Uniform cell grid for short-range pair searches.
//!
//! Points are bucketed with a stable counting sort, so a query visits
//! candidates in a fixed order: neighbour cell rows bottom to top, cells left
//! to right, then ascending point index inside each cell.

use glam::DVec2;

#[derive(Debug, Clone)]
pub struct CellGrid {
    origin: DVec2,
    cell: f64,
    nx: usize,
    ny: usize,
    /// Cells searched on each side of the query cell.
    reach: i64,
    radius: f64,
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl CellGrid {
    /// Buckets `points` into square cells of side at least `cell`. Queries
    /// then find every point within distance `cell` of the query point.
    ///
    /// The side grows when the point cloud is very spread out, keeping the
    /// number of cells proportional to the number of points.
    pub fn build(points: &[DVec2], cell: f64) -> Self {
        Self::build_subdivided(points, cell, 1)
    }

    /// As [`CellGrid::build`] with cells of side `radius / subdiv`; queries
    /// search `subdiv` cells on each side, which visits fewer far candidates.
    pub fn build_subdivided(points: &[DVec2], radius: f64, subdiv: usize) -> Self {
        assert!(radius > 0.0 && radius.is_finite(), "cell size must be positive");
        assert!(subdiv >= 1, "subdivision must be >= 1");
        let cell = radius / subdiv as f64;
        if points.is_empty() {
            return CellGrid {
                origin: DVec2::ZERO,
                cell,
                nx: 1,
                ny: 1,
                reach: 1,
                radius,
                starts: vec![0, 0],
                items: Vec::new(),
            };
        }
        let (lo, hi) = points.iter().fold(
            (DVec2::splat(f64::INFINITY), DVec2::splat(f64::NEG_INFINITY)),
            |(lo, hi), &p| (lo.min(p), hi.max(p)),
        );
        let extent = hi - lo;
        let max_cells = (4 * points.len() + 1024) as f64;
        let mut side = cell;
        if (extent.x / side + 1.0) * (extent.y / side + 1.0) > max_cells {
            side = side.max(((extent.x + side) * (extent.y + side) / max_cells).sqrt());
            while (extent.x / side + 1.0) * (extent.y / side + 1.0) > max_cells {
                side *= 1.25;
            }
        }
        let nx = (extent.x / side).floor() as usize + 1;
        let ny = (extent.y / side).floor() as usize + 1;

        let cell_of = |p: DVec2| -> usize {
            let ix = (((p.x - lo.x) / side) as usize).min(nx - 1);
            let iy = (((p.y - lo.y) / side) as usize).min(ny - 1);
            iy * nx + ix
        };
        let mut starts = vec![0u32; nx * ny + 1];
        for &p in points {
            starts[cell_of(p) + 1] += 1;
        }
        for c in 0..nx * ny {
            starts[c + 1] += starts[c];
        }
        let mut fill = starts.clone();
        let mut items = vec![0u32; points.len()];
        for (i, &p) in points.iter().enumerate() {
            let c = cell_of(p);
            items[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        CellGrid {
            origin: lo,
            cell: side,
            nx,
            ny,
            reach: ((radius / side) * (1.0 - 1e-12)).ceil().max(1.0) as i64,
            radius,
            starts,
            items,
        }
    }

    /// Every point within this distance of a query is a candidate.
    pub fn cell_size(&self) -> f64 {
        self.radius
    }

    /// Point indices in bucket order; slots passed to
    /// [`CellGrid::for_each_run`] index into this.
    pub fn items(&self) -> &[u32] {
        &self.items
    }

    /// Calls `f` with the index of every point in the block of cells around
    /// `p`. This is a superset of the points within `cell_size()`.
    #[inline]
    pub fn for_each_candidate(&self, p: DVec2, mut f: impl FnMut(usize)) {
        self.for_each_run(p, |run| {
            for &j in &self.items[run] {
                f(j as usize);
            }
        });
    }

    /// Calls `f` with contiguous slot ranges covering the candidates of `p`,
    /// in the same order as [`CellGrid::for_each_candidate`].
    #[inline]
    pub fn for_each_run(&self, p: DVec2, mut f: impl FnMut(std::ops::Range<usize>)) {
        let fx = (p.x - self.origin.x) / self.cell;
        let fy = (p.y - self.origin.y) / self.cell;
        if !(fx.is_finite() && fy.is_finite()) {
            return;
        }
        // truncation equals floor for the non-negative offsets of interior points
        let ix = if fx >= 0.0 { fx as i64 } else { fx.floor() as i64 };
        let iy = if fy >= 0.0 { fy as i64 } else { fy.floor() as i64 };
        let x0 = (ix - self.reach).max(0);
        let x1 = (ix + self.reach).min(self.nx as i64 - 1);
        let y0 = (iy - self.reach).max(0);
        let y1 = (iy + self.reach).min(self.ny as i64 - 1);
        if x0 > x1 || y0 > y1 {
            return;
        }
        for cy in y0..=y1 {
            let row = cy as usize * self.nx;
            // cells x0..=x1 of one row are contiguous in `items`
            let a = self.starts[row + x0 as usize] as usize;
            let b = self.starts[row + x1 as usize + 1] as usize;
            if a < b {
                f(a..b);
            }
        }
    }
}
