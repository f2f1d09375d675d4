//! Uniform voxel hash for fixed-radius neighbor queries.

use std::collections::HashMap;

use nalgebra::Point3;

type Cell = (i64, i64, i64);

/// Points bucketed into cubic cells whose side equals the query radius, so a
/// radius query only inspects the 27 surrounding cells.
#[derive(Clone, Debug)]
pub struct VoxelHash {
    radius: f64,
    cells: HashMap<Cell, Vec<Point3<f64>>>,
    /// Bounds of the stored points grown by the radius; empty when inverted.
    lo: Point3<f64>,
    hi: Point3<f64>,
}

impl VoxelHash {
    pub fn new(points: &[Point3<f64>], radius: f64) -> Self {
        assert!(radius > 0.0, "radius must be positive");
        let mut cells: HashMap<Cell, Vec<Point3<f64>>> = HashMap::new();
        let mut lo = Point3::from([f64::INFINITY; 3]);
        let mut hi = Point3::from([f64::NEG_INFINITY; 3]);
        for p in points {
            cells.entry(cell_of(p, radius)).or_default().push(*p);
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let pad = nalgebra::Vector3::repeat(radius);
        Self { radius, cells, lo: lo - pad, hi: hi + pad }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// True when some stored point lies within the radius of `p` (inclusive).
    pub fn has_neighbor(&self, p: &Point3<f64>) -> bool {
        if (0..3).any(|i| p[i] < self.lo[i] || p[i] > self.hi[i]) {
            return false;
        }
        let (cx, cy, cz) = cell_of(p, self.radius);
        let r2 = self.radius * self.radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(pts) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        if pts.iter().any(|q| (q - p).norm_squared() <= r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Fraction of `queries` having a stored point within the radius.
    pub fn covered_fraction(&self, queries: &[Point3<f64>]) -> f64 {
        if queries.is_empty() {
            return 0.0;
        }
        let hit = queries.iter().filter(|q| self.has_neighbor(q)).count();
        hit as f64 / queries.len() as f64
    }

    /// Same as `covered_fraction(queries) >= tau`, stopping as soon as the
    /// outcome is settled.
    pub fn covers(&self, queries: &[Point3<f64>], tau: f64) -> bool {
        let n = queries.len() as f64;
        if queries.is_empty() {
            return 0.0 >= tau;
        }
        let mut hits = 0usize;
        for (i, q) in queries.iter().enumerate() {
            if self.has_neighbor(q) {
                hits += 1;
                if hits as f64 / n >= tau {
                    return true;
                }
            }
            let best = (hits + queries.len() - i - 1) as f64 / n;
            if best < tau {
                return false;
            }
        }
        hits as f64 / n >= tau
    }
}

fn cell_of(p: &Point3<f64>, size: f64) -> Cell {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neighbor_across_cell_boundary() {
        let h = VoxelHash::new(&[Point3::new(0.039, 0.0, 0.0)], 0.04);
        assert!(h.has_neighbor(&Point3::new(0.041, 0.0, 0.0)));
        assert!(h.has_neighbor(&Point3::new(0.0, 0.0, 0.0)));
        assert!(!h.has_neighbor(&Point3::new(0.1, 0.0, 0.0)));
        assert!(h.has_neighbor(&Point3::new(-0.001, 0.0, 0.0)));
    }

    #[test]
    fn matches_brute_force() {
        let pts: Vec<Point3<f64>> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.37;
                Point3::new(t.sin() * 0.3, (t * 1.3).cos() * 0.3, (t * 0.7).sin() * 0.3)
            })
            .collect();
        let h = VoxelHash::new(&pts, 0.05);
        for i in 0..500 {
            let t = i as f64 * 0.113;
            let q = Point3::new((t * 2.1).cos() * 0.35, t.sin() * 0.35, (t * 0.3).cos() * 0.35);
            let brute = pts.iter().any(|p| (p - q).norm_squared() <= 0.05 * 0.05);
            assert_eq!(h.has_neighbor(&q), brute);
        }
    }

    #[test]
    fn covers_agrees_with_fraction() {
        let pts: Vec<Point3<f64>> = (0..50).map(|i| Point3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let h = VoxelHash::new(&pts, 0.02);
        let queries: Vec<Point3<f64>> = (0..40).map(|i| Point3::new(i as f64 * 0.02, 0.0, 0.0)).collect();
        let f = h.covered_fraction(&queries);
        assert!(f > 0.0 && f < 1.0);
        for k in 0..=20 {
            let tau = k as f64 / 20.0;
            assert_eq!(h.covers(&queries, tau), f >= tau, "tau {tau}");
        }
        assert_eq!(h.covers(&queries, f), true);
        assert!(!VoxelHash::new(&[], 0.1).has_neighbor(&Point3::origin()));
    }
}
