//! Collision-free paths on an occupancy grid.
//!
//! A* over 26-connected free voxels with Euclidean edge costs. A diagonal move is
//! only allowed when every voxel of the 2×2(×2) block it crosses is free, so the
//! straight segment between the two voxel centers never clips an occupied voxel.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::splat::OccupancyGrid;

pub const DEFAULT_REPLAN_PERIOD: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("start {0:?} is outside the grid")]
    StartOutOfBounds([f64; 3]),
    #[error("goal {0:?} is outside the grid")]
    GoalOutOfBounds([f64; 3]),
    #[error("start lies in an occupied voxel")]
    StartOccupied,
    #[error("goal lies in an occupied voxel")]
    GoalOccupied,
    #[error("no collision-free path between start and goal")]
    NoPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub waypoints: Vec<Vector3<f64>>,
    /// Sum of segment lengths (m).
    pub cost: f64,
    pub planned_at: f64,
}

impl Path {
    pub fn from_waypoints(waypoints: Vec<Vector3<f64>>, planned_at: f64) -> Self {
        let cost = polyline_length(&waypoints);
        Self { waypoints, cost, planned_at }
    }

    pub fn start(&self) -> Option<&Vector3<f64>> {
        self.waypoints.first()
    }

    pub fn goal(&self) -> Option<&Vector3<f64>> {
        self.waypoints.last()
    }
}

pub fn polyline_length(points: &[Vector3<f64>]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

fn neighbor_offsets() -> Vec<[i64; 3]> {
    let mut out = Vec::with_capacity(26);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Free neighbors of `idx` with the metric step length, in a fixed order.
pub fn free_neighbors(grid: &OccupancyGrid, idx: [usize; 3]) -> Vec<([usize; 3], f64)> {
    let dims = grid.dims();
    let mut out = Vec::with_capacity(26);
    'next: for off in neighbor_offsets() {
        let mut n = [0usize; 3];
        for i in 0..3 {
            let v = idx[i] as i64 + off[i];
            if v < 0 || v >= dims[i] as i64 {
                continue 'next;
            }
            n[i] = v as usize;
        }
        if grid.is_occupied(n) {
            continue;
        }
        // Every voxel in the block spanned by idx and n must be free.
        let axes: Vec<usize> = (0..3).filter(|&i| off[i] != 0).collect();
        if axes.len() > 1 {
            for mask in 1..(1u32 << axes.len()) - 1 {
                let mut m = idx;
                for (bit, &ax) in axes.iter().enumerate() {
                    if mask & (1 << bit) != 0 {
                        m[ax] = n[ax];
                    }
                }
                if grid.is_occupied(m) {
                    continue 'next;
                }
            }
        }
        let steps = axes.len() as f64;
        out.push((n, steps.sqrt() * grid.voxel_size()));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OpenEntry {
    f: f64,
    h: f64,
    idx: [usize; 3],
    linear: usize,
}

impl Eq for OpenEntry {}

impl Ord for OpenEntry {
    // Reversed so BinaryHeap pops the lowest (f, h, voxel index).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.h.total_cmp(&self.h))
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Plans from `start` to `goal`. Waypoints are voxel centers with the exact start
/// and goal substituted at the ends.
pub fn plan(grid: &OccupancyGrid, start: &Vector3<f64>, goal: &Vector3<f64>, planned_at: f64) -> Result<Path, PlanError> {
    let s = grid.voxel_of(start).ok_or(PlanError::StartOutOfBounds((*start).into()))?;
    let g = grid.voxel_of(goal).ok_or(PlanError::GoalOutOfBounds((*goal).into()))?;
    if grid.is_occupied(s) {
        return Err(PlanError::StartOccupied);
    }
    if grid.is_occupied(g) {
        return Err(PlanError::GoalOccupied);
    }
    let cells = voxel_search(grid, s, g).ok_or(PlanError::NoPath)?;
    let mut waypoints: Vec<Vector3<f64>> = cells.iter().map(|&c| grid.center(c)).collect();
    *waypoints.first_mut().expect("path has the start voxel") = *start;
    if cells.len() == 1 {
        waypoints.push(*goal);
    } else {
        *waypoints.last_mut().expect("non-empty") = *goal;
    }
    waypoints.dedup_by(|a, b| a == b);
    Ok(Path::from_waypoints(waypoints, planned_at))
}

fn voxel_search(grid: &OccupancyGrid, start: [usize; 3], goal: [usize; 3]) -> Option<Vec<[usize; 3]>> {
    let n = grid.len();
    let goal_c = grid.center(goal);
    let heuristic = |idx: [usize; 3]| (grid.center(idx) - goal_c).norm();
    let mut g_cost = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let s_lin = grid.linear(start);
    g_cost[s_lin] = 0.0;
    let h0 = heuristic(start);
    open.push(OpenEntry { f: h0, h: h0, idx: start, linear: s_lin });
    let g_lin = grid.linear(goal);
    while let Some(cur) = open.pop() {
        if closed[cur.linear] {
            continue;
        }
        closed[cur.linear] = true;
        if cur.linear == g_lin {
            let mut path = vec![goal];
            let mut at = g_lin;
            while at != s_lin {
                at = parent[at];
                path.push(grid.unlinear(at));
            }
            path.reverse();
            return Some(path);
        }
        let base = g_cost[cur.linear];
        for (nb, step) in free_neighbors(grid, cur.idx) {
            let l = grid.linear(nb);
            if closed[l] {
                continue;
            }
            let cand = base + step;
            if cand < g_cost[l] {
                g_cost[l] = cand;
                parent[l] = cur.linear;
                let h = heuristic(nb);
                open.push(OpenEntry { f: cand + h, h, idx: nb, linear: l });
            }
        }
    }
    None
}

/// True when every voxel the segment `a → b` touches is free. Where the segment
/// crosses a voxel edge or corner, all voxels sharing that point must be free.
pub fn segment_is_free(grid: &OccupancyGrid, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    let ua = (a - grid.origin()) / grid.voxel_size();
    let ub = (b - grid.origin()) / grid.voxel_size();
    let d = ub - ua;
    let dims = grid.dims();
    let free_cell = |c: [i64; 3]| {
        (0..3).all(|i| c[i] >= 0 && (c[i] as usize) < dims[i]) && !grid.is_occupied(c.map(|v| v as usize))
    };

    let mut ts = vec![0.0, 1.0];
    for i in 0..3 {
        if d[i] == 0.0 {
            continue;
        }
        let (lo, hi) = (ua[i].min(ub[i]), ua[i].max(ub[i]));
        let mut k = lo.ceil();
        while k <= hi {
            ts.push((k - ua[i]) / d[i]);
            k += 1.0;
        }
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|x, y| (*x - *y).abs() < 1e-12);

    // Voxels whose closed box contains the point.
    let touching = |u: Vector3<f64>| {
        let ranges = [0, 1, 2].map(|i| {
            let f = u[i].floor() as i64;
            if (u[i] - u[i].round()).abs() < 1e-9 {
                let r = u[i].round() as i64;
                (r - 1, r)
            } else {
                (f, f)
            }
        });
        let mut ok = true;
        for x in ranges[0].0..=ranges[0].1 {
            for y in ranges[1].0..=ranges[1].1 {
                for z in ranges[2].0..=ranges[2].1 {
                    ok &= free_cell([x, y, z]);
                }
            }
        }
        ok
    };

    grid.is_free_point(a)
        && grid.is_free_point(b)
        && ts.windows(2).all(|w| {
            let mid = ua + d * (0.5 * (w[0] + w[1]));
            free_cell([0, 1, 2].map(|i| mid[i].floor() as i64))
        })
        && ts[1..ts.len() - 1].iter().all(|&t| touching(ua + d * t))
}

/// Randomized shortcutting followed by a greedy line-of-sight pass. Endpoints are
/// kept and the cost never increases.
pub fn smooth(path: &Path, grid: &OccupancyGrid, iterations: usize, seed: u64) -> Path {
    let mut pts = path.waypoints.clone();
    if pts.len() <= 2 {
        return path.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..iterations {
        if pts.len() <= 2 {
            break;
        }
        let i = rng.random_range(0..pts.len() - 2);
        let j = rng.random_range(i + 2..pts.len());
        if segment_is_free(grid, &pts[i], &pts[j]) {
            pts.drain(i + 1..j);
        }
    }
    let mut out = vec![pts[0]];
    let mut i = 0;
    while i < pts.len() - 1 {
        let mut j = pts.len() - 1;
        while j > i + 1 && !segment_is_free(grid, &pts[i], &pts[j]) {
            j -= 1;
        }
        out.push(pts[j]);
        i = j;
    }
    let smoothed = Path::from_waypoints(out, path.planned_at);
    if smoothed.cost <= path.cost {
        smoothed
    } else {
        path.clone()
    }
}

/// Whether a re-plan is due at `now` given the last plan time.
pub fn replan_due(last: f64, now: f64, period: f64) -> bool {
    now - last >= period
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3]) -> OccupancyGrid {
        OccupancyGrid::empty(Vector3::zeros(), 1.0, dims)
    }

    fn c(x: usize, y: usize, z: usize) -> Vector3<f64> {
        Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5)
    }

    #[test]
    fn degenerate_query() {
        let g = grid([4, 4, 4]);
        let p = plan(&g, &c(1, 1, 1), &c(1, 1, 1), 2.0).unwrap();
        assert_eq!(p.waypoints, vec![c(1, 1, 1)]);
        assert_eq!(p.cost, 0.0);
        assert_eq!(p.planned_at, 2.0);
    }

    #[test]
    fn same_voxel_distinct_points() {
        let g = grid([4, 4, 4]);
        let a = Vector3::new(1.1, 1.2, 1.3);
        let b = Vector3::new(1.7, 1.2, 1.3);
        let p = plan(&g, &a, &b, 0.0).unwrap();
        assert_eq!(p.waypoints, vec![a, b]);
        assert!((p.cost - 0.6).abs() < 1e-12);
    }

    #[test]
    fn straight_line_in_empty_grid() {
        let g = grid([16, 5, 5]);
        let p = plan(&g, &c(2, 2, 2), &c(12, 2, 2), 0.0).unwrap();
        assert!((p.cost - 10.0).abs() < 1e-9);
        assert_eq!(p.waypoints.len(), 11);
    }

    #[test]
    fn wall_blocks() {
        let mut g = grid([8, 8, 8]);
        for y in 0..8 {
            for z in 0..8 {
                g.set_occupied([4, y, z], true);
            }
        }
        assert_eq!(plan(&g, &c(1, 1, 1), &c(6, 6, 6), 0.0), Err(PlanError::NoPath));
    }

    #[test]
    fn endpoint_errors() {
        let mut g = grid([4, 4, 4]);
        g.set_occupied([0, 0, 0], true);
        g.set_occupied([3, 3, 3], true);
        assert_eq!(plan(&g, &c(0, 0, 0), &c(2, 2, 2), 0.0), Err(PlanError::StartOccupied));
        assert_eq!(plan(&g, &c(1, 1, 1), &c(3, 3, 3), 0.0), Err(PlanError::GoalOccupied));
        assert!(matches!(plan(&g, &Vector3::new(-1.0, 0.0, 0.0), &c(1, 1, 1), 0.0), Err(PlanError::StartOutOfBounds(_))));
        assert!(matches!(plan(&g, &c(1, 1, 1), &Vector3::new(9.0, 0.0, 0.0), 0.0), Err(PlanError::GoalOutOfBounds(_))));
    }

    #[test]
    fn no_corner_cutting() {
        // Two occupied voxels touching diagonally leave no diagonal passage.
        let mut g = grid([2, 2, 1]);
        g.set_occupied([1, 0, 0], true);
        g.set_occupied([0, 1, 0], true);
        assert_eq!(plan(&g, &c(0, 0, 0), &c(1, 1, 0), 0.0), Err(PlanError::NoPath));
    }

    #[test]
    fn segment_clipping_a_corner_is_blocked() {
        let mut g = grid([4, 4, 1]);
        g.set_occupied([1, 1, 0], true);
        // Clips the occupied voxel for less than half a voxel of travel.
        assert!(!segment_is_free(&g, &Vector3::new(0.5, 0.5, 0.5), &Vector3::new(2.5, 1.2, 0.5)));
        // Exactly through the shared corner counts as touching.
        assert!(!segment_is_free(&g, &c(0, 0, 0), &c(3, 3, 0)));
        assert!(segment_is_free(&g, &c(0, 0, 0), &c(3, 0, 0)));
        assert!(segment_is_free(&g, &c(0, 3, 0), &c(0, 0, 0)));
    }

    #[test]
    fn deterministic() {
        let g = grid([10, 10, 3]);
        let a = plan(&g, &c(0, 0, 1), &c(9, 6, 1), 0.0).unwrap();
        let b = plan(&g, &c(0, 0, 1), &c(9, 6, 1), 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corridor_collapses() {
        let mut g = grid([20, 3, 3]);
        for x in 0..20 {
            for (y, z) in [(0, 0), (0, 1), (0, 2), (2, 0), (2, 1), (2, 2), (1, 0), (1, 2)] {
                g.set_occupied([x, y, z], true);
            }
        }
        let p = plan(&g, &c(0, 1, 1), &c(19, 1, 1), 0.0).unwrap();
        let s = smooth(&p, &g, 50, 1);
        assert_eq!(s.waypoints.len(), 2);
        assert_eq!(s.waypoints[0], c(0, 1, 1));
        assert_eq!(s.waypoints[1], c(19, 1, 1));
    }

    #[test]
    fn two_point_path_unchanged() {
        let g = grid([4, 4, 4]);
        let p = Path::from_waypoints(vec![c(0, 0, 0), c(3, 3, 3)], 1.0);
        assert_eq!(smooth(&p, &g, 10, 0), p);
    }

    #[test]
    fn l_shaped_corridor() {
        // Free L: row y=1 for x in 1..=8, then column x=8 for y in 1..=8; z single layer.
        let mut g = grid([10, 10, 1]);
        for x in 0..10 {
            for y in 0..10 {
                let free = (y == 1 && (1..=8).contains(&x)) || (x == 8 && (1..=8).contains(&y)) || (x >= 6 && y <= 3 && x <= 8 && y >= 1);
                g.set_occupied([x, y, 0], !free);
            }
        }
        let (a, b) = (c(1, 1, 0), c(8, 8, 0));
        let p = plan(&g, &a, &b, 0.0).unwrap();
        let s = smooth(&p, &g, 200, 3);
        let euclid = (b - a).norm();
        let manhattan = (b - a).abs().sum();
        assert!(s.cost > euclid && s.cost < manhattan, "{} not in ({euclid}, {manhattan})", s.cost);
        assert!(s.cost <= p.cost);
        for w in s.waypoints.windows(2) {
            assert!(segment_is_free(&g, &w[0], &w[1]));
        }
    }

    #[test]
    fn replan_schedule() {
        assert!(replan_due(0.0, 1.0, 1.0));
        assert!(!replan_due(0.0, 0.5, 1.0));
        assert!(replan_due(3.0, 3.0, 0.0));
    }
}
