//! Normalised local density `ρ(x) = #{j : |x - x_j| < R} / N^R_max`.
//!
//! Ball counts include the particle itself, so every particle has count at
//! least one and `N^R_max >= 1` for a non-empty ensemble.

use glam::DVec2;
use rayon::prelude::*;

use crate::eikonal::{Grid, Scenario};
use crate::error::{Error, Result};
use crate::neighbors::CellGrid;

const PAR_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    /// Per-particle density in `[0, 1]`.
    pub rho_at: Vec<f64>,
    /// Largest ball count over the particles.
    pub n_r_max: usize,
}

fn count_within(grid: &CellGrid, points: &[DVec2], q: DVec2, r2: f64) -> usize {
    let mut c = 0;
    grid.for_each_candidate(q, |j| {
        if points[j].distance_squared(q) < r2 {
            c += 1;
        }
    });
    c
}

/// Exact per-particle ball counts, in particle order.
pub fn ball_counts(points: &[DVec2], radius: f64) -> Vec<usize> {
    let grid = CellGrid::build(points, radius);
    let r2 = radius * radius;
    points
        .par_iter()
        .with_min_len(PAR_CHUNK)
        .map(|&p| count_within(&grid, points, p, r2))
        .collect()
}

pub fn local_density(points: &[DVec2], radius: f64) -> DensityField {
    let counts = ball_counts(points, radius);
    let n_r_max = counts.iter().copied().max().unwrap_or(0).max(1);
    let rho_at = counts.iter().map(|&c| c as f64 / n_r_max as f64).collect();
    DensityField { rho_at, n_r_max }
}

/// Densities at arbitrary query points from a source cloud, normalised by
/// the source cloud's own `N^R_max` and clamped to 1.
pub fn density_at(sources: &[DVec2], n_r_max: usize, queries: &[DVec2], radius: f64) -> Vec<f64> {
    let grid = CellGrid::build(sources, radius);
    let r2 = radius * radius;
    let norm = n_r_max.max(1) as f64;
    queries
        .par_iter()
        .with_min_len(PAR_CHUNK)
        .map(|&q| (count_within(&grid, sources, q, r2) as f64 / norm).min(1.0))
        .collect()
}

/// Rasterises ρ onto the scenario grid: ball counts at cell centres,
/// normalised with the particles' `N^R_max` and clamped to 1.
pub fn density_grid(points: &[DVec2], radius: f64, scenario: &Scenario) -> Result<Grid<f64>> {
    if let Some(p) = points.iter().find(|p| !scenario.domain.contains(**p)) {
        return Err(Error::OutOfDomain { x: p.x, y: p.y });
    }
    Ok(density_grid_unchecked(points, radius, scenario, None))
}

/// As [`density_grid`] without the domain check; particles outside the
/// rectangle still contribute to nearby cells. `n_r_max` may be supplied when
/// it is already known.
pub fn density_grid_unchecked(
    points: &[DVec2],
    radius: f64,
    scenario: &Scenario,
    n_r_max: Option<usize>,
) -> Grid<f64> {
    let geom = scenario.geometry();
    if points.is_empty() {
        return Grid::filled(geom, 0.0);
    }
    let n_r_max = n_r_max.unwrap_or_else(|| local_density(points, radius).n_r_max);
    let grid = CellGrid::build(points, radius);
    let r2 = radius * radius;
    let norm = n_r_max.max(1) as f64;
    let data = (0..geom.len())
        .into_par_iter()
        .with_min_len(PAR_CHUNK)
        .map(|k| {
            let c = geom.center(k % geom.nx, k / geom.nx);
            (count_within(&grid, points, c, r2) as f64 / norm).min(1.0)
        })
        .collect();
    Grid {
        geometry: geom,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eikonal::{Rect, Target};

    fn brute_counts(points: &[DVec2], r: f64) -> Vec<usize> {
        points
            .iter()
            .map(|p| points.iter().filter(|q| p.distance(**q) < r).count())
            .collect()
    }

    #[test]
    fn isolated_particles_all_have_density_one() {
        let pts: Vec<DVec2> = (0..10).map(|i| DVec2::new(i as f64 * 2.0, 0.0)).collect();
        let d = local_density(&pts, 0.6);
        assert_eq!(d.n_r_max, 1);
        assert!(d.rho_at.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn coincident_particles() {
        let pts = vec![DVec2::new(1.0, 1.0); 9];
        let d = local_density(&pts, 0.6);
        assert_eq!(d.n_r_max, 9);
        assert!(d.rho_at.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn two_clusters() {
        let mut pts = vec![DVec2::new(0.0, 0.0); 3];
        pts.extend(vec![DVec2::new(5.0, 0.0); 7]);
        assert_eq!(brute_counts(&pts, 0.6).iter().max(), Some(&7));
        let d = local_density(&pts, 0.6);
        assert_eq!(d.n_r_max, 7);
        for r in &d.rho_at[..3] {
            assert_eq!(*r, 3.0 / 7.0);
        }
        for r in &d.rho_at[3..] {
            assert_eq!(*r, 1.0);
        }
    }

    #[test]
    fn hashed_counts_match_brute_force() {
        let mut s = 12345u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let pts: Vec<DVec2> = (0..300).map(|_| DVec2::new(4.0 * next(), 3.0 * next())).collect();
        assert_eq!(ball_counts(&pts, 0.6), brute_counts(&pts, 0.6));
        let d = local_density(&pts, 0.6);
        assert_eq!(d.rho_at.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    fn box_scenario() -> Scenario {
        Scenario {
            domain: Rect {
                min: [0.0, 0.0],
                max: [4.0, 4.0],
            },
            target: Target::LeftEdge,
            grid_h: 0.1,
            slowness_floor: 0.05,
            slowness: Default::default(),
        }
    }

    #[test]
    fn grid_of_empty_ensemble_is_zero() {
        let g = density_grid(&[], 0.6, &box_scenario()).unwrap();
        assert!(g.data.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn grid_of_single_particle_is_its_ball() {
        let s = box_scenario();
        let p = DVec2::new(2.0, 2.0);
        let g = density_grid(&[p], 0.6, &s).unwrap();
        let geom = g.geometry;
        for j in 0..geom.ny {
            for i in 0..geom.nx {
                let expect = if geom.center(i, j).distance(p) < 0.6 { 1.0 } else { 0.0 };
                assert_eq!(g.at(i, j), expect);
            }
        }
    }

    #[test]
    fn lattice_gives_flat_interior() {
        let s = box_scenario();
        let mut pts = Vec::new();
        for j in 0..40 {
            for i in 0..40 {
                pts.push(DVec2::new(0.05 + 0.1 * i as f64, 0.05 + 0.1 * j as f64));
            }
        }
        let g = density_grid(&pts, 0.6, &s).unwrap();
        let geom = g.geometry;
        let interior: Vec<f64> = (8..32)
            .flat_map(|j| (8..32).map(move |i| (i, j)))
            .map(|(i, j)| g.at(i, j))
            .collect();
        let lo = interior.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = interior.iter().cloned().fold(0.0, f64::max);
        assert!(hi - lo < 0.1, "interior spread {lo}..{hi}");
        assert!(geom.len() == 1600);
    }

    #[test]
    fn grid_rejects_particles_outside_domain() {
        let err = density_grid(&[DVec2::new(5.0, 1.0)], 0.6, &box_scenario()).unwrap_err();
        assert!(matches!(err, Error::OutOfDomain { .. }));
    }
}
