//! Point-set primitives: clouds, a uniform hash-grid neighbor index, and the
//! symmetric Chamfer distance.
//!
//! Every query result is ordered by `(distance, index)`, so the grid answers
//! are identical to an exhaustive scan, ties included.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// An ordered list of 3D points in meters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if let Some(bad) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinitePoint(bad));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        Self {
            points: self.points.iter().map(|p| p + offset).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| p * factor).collect(),
        }
    }

    /// Axis-aligned bounds `(min, max)`, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        bounds_of(&self.points)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

pub(crate) fn bounds_of(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = points.first()?;
    let mut lo = *first;
    let mut hi = *first;
    for p in &points[1..] {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    Some((lo, hi))
}

/// One query hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[inline]
pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

type CellKey = [i64; 3];

/// Uniform spatial hash grid over a fixed set of points.
///
/// Immutable once built; queries take `&self` and may run from many threads.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    points: Vec<Vec3>,
    cell: f64,
    cells: HashMap<CellKey, Vec<usize>>,
    lo: CellKey,
    hi: CellKey,
    diagonal: f64,
}

impl NeighborIndex {
    /// Builds an index with the given cell edge length (meters).
    pub fn new(cloud: &PointCloud, cell_size: f64) -> Result<Self> {
        Self::from_points(cloud.points(), cell_size)
    }

    /// Builds an index with a cell size derived from the cloud's extent and
    /// point count (roughly one point per cell).
    pub fn with_auto_cell(cloud: &PointCloud) -> Result<Self> {
        Self::from_points(cloud.points(), auto_cell_size(cloud.points()))
    }

    pub(crate) fn from_points(points: &[Vec3], cell_size: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        let (bmin, bmax) = bounds_of(points).expect("non-empty");
        // keep the occupied key range small for extreme (e.g. blown-up) inputs
        let extent = (bmax - bmin).max();
        let cell_size = if extent.is_finite() { cell_size.max(extent / 1e6) } else { f64::MAX };
        let mut cells: HashMap<CellKey, Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let key = cell_key(p, cell_size);
            for d in 0..3 {
                lo[d] = lo[d].min(key[d]);
                hi[d] = hi[d].max(key[d]);
            }
            cells.entry(key).or_default().push(i);
        }
        Ok(Self {
            points: points.to_vec(),
            cell: cell_size,
            cells,
            lo,
            hi,
            diagonal: (bmax - bmin).norm(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    /// The `k` nearest points, ascending by distance, ties to the lower index.
    pub fn knn(&self, query: &Vec3, k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        if k > self.points.len() {
            return Err(Error::InsufficientPoints {
                requested: k,
                available: self.points.len(),
            });
        }
        let best = self.knn_raw(query, k);
        Ok(best
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect())
    }

    /// Index and squared distance of the single nearest point.
    pub fn nearest(&self, query: &Vec3) -> (usize, f64) {
        let best = self.knn_raw(query, 1);
        (best[0].1, best[0].0)
    }

    fn knn_raw(&self, query: &Vec3, k: usize) -> Vec<(f64, usize)> {
        let center = cell_key(query, self.cell);
        if self.is_far(&center) {
            return self.knn_scan(query, k);
        }
        // first ring that can intersect the occupied range
        let mut r0 = 0i64;
        for d in 0..3 {
            r0 = r0.max(self.lo[d] - center[d]).max(center[d] - self.hi[d]);
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let mut r = r0;
        // past this many cell lookups a full scan is cheaper
        let budget = 4 * self.points.len() + 64;
        let mut visited = 0;
        loop {
            visited += self.visit_shell(center, r, |i| {
                let d2 = dist2(&self.points[i], query);
                insert_best(&mut best, k, (d2, i));
            });
            if visited > budget {
                return self.knn_scan(query, k);
            }
            let covered = (0..3).all(|d| center[d] - r <= self.lo[d] && center[d] + r >= self.hi[d]);
            if covered {
                break;
            }
            if best.len() == k {
                // unvisited points lie at least r cells away
                let bound = r as f64 * self.cell;
                if best[k - 1].0 < bound * bound * (1.0 - 1e-9) {
                    break;
                }
            }
            r += 1;
        }
        best
    }

    fn knn_scan(&self, query: &Vec3, k: usize) -> Vec<(f64, usize)> {
        let mut best = Vec::with_capacity(k + 1);
        for (i, p) in self.points.iter().enumerate() {
            insert_best(&mut best, k, (dist2(p, query), i));
        }
        best
    }

    /// Queries far outside the occupied cells are answered by a full scan.
    fn is_far(&self, key: &CellKey) -> bool {
        (0..3).any(|d| {
            let span = (self.hi[d] - self.lo[d] + 1).saturating_mul(4);
            key[d] < self.lo[d].saturating_sub(span) || key[d] > self.hi[d].saturating_add(span)
        })
    }

    /// Calls `f` for every point in the cells at Chebyshev distance `r` from
    /// `center`; returns the number of cells and columns examined.
    fn visit_shell(&self, center: CellKey, r: i64, mut f: impl FnMut(usize)) -> usize {
        let mut lookups = 0;
        let range = |d: usize| ((center[d] - r).max(self.lo[d]), (center[d] + r).min(self.hi[d]));
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for x in x0..=x1 {
            let on_x = (x - center[0]).abs() == r;
            for y in y0..=y1 {
                lookups += 1;
                let on_xy = on_x || (y - center[1]).abs() == r;
                if on_xy {
                    lookups += (z1 - z0 + 1).max(0) as usize;
                    for z in z0..=z1 {
                        if let Some(ids) = self.cells.get(&[x, y, z]) {
                            ids.iter().for_each(|&i| f(i));
                        }
                    }
                } else {
                    // r > 0 here: only the two z faces of the shell
                    for z in [center[2] - r, center[2] + r] {
                        if z < z0 || z > z1 {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[x, y, z]) {
                            ids.iter().for_each(|&i| f(i));
                        }
                    }
                }
            }
        }
        lookups
    }

    /// All points within `radius` (inclusive), ascending by distance.
    pub fn radius_neighbors(&self, query: &Vec3, radius: f64) -> Result<Vec<Neighbor>> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "radius must be positive, got {radius}"
            )));
        }
        let mut hits: Vec<(f64, usize)> = Vec::new();
        let mut consider = |i: usize| {
            let d2 = dist2(&self.points[i], query);
            if d2.sqrt() <= radius {
                hits.push((d2, i));
            }
        };
        let c = cell_key(query, self.cell);
        let reach = (radius / self.cell).ceil();
        let boxed = (2.0 * reach + 1.0).powi(3);
        if radius > self.diagonal || self.is_far(&c) || boxed > (4 * self.points.len() + 64) as f64 {
            (0..self.points.len()).for_each(&mut consider);
        } else {
            let reach = reach as i64;
            let (x0, x1) = ((c[0] - reach).max(self.lo[0]), (c[0] + reach).min(self.hi[0]));
            let (y0, y1) = ((c[1] - reach).max(self.lo[1]), (c[1] + reach).min(self.hi[1]));
            let (z0, z1) = ((c[2] - reach).max(self.lo[2]), (c[2] + reach).min(self.hi[2]));
            for x in x0..=x1 {
                for y in y0..=y1 {
                    for z in z0..=z1 {
                        if let Some(ids) = self.cells.get(&[x, y, z]) {
                            ids.iter().for_each(|&i| consider(i));
                        }
                    }
                }
            }
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(hits
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect())
    }
}

fn insert_best(best: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
    let less = |a: &(f64, usize), b: &(f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
    if best.len() == k && !less(&cand, &best[k - 1]) {
        return;
    }
    let pos = best.partition_point(|e| less(e, &cand));
    best.insert(pos, cand);
    best.truncate(k);
}

#[inline]
fn cell_key(p: &Vec3, cell: f64) -> CellKey {
    [
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    ]
}

pub(crate) fn auto_cell_size(points: &[Vec3]) -> f64 {
    match bounds_of(points) {
        Some((lo, hi)) => {
            let diag = (hi - lo).norm();
            let cell = diag / (points.len() as f64).cbrt();
            if cell > 0.0 && cell.is_finite() {
                cell
            } else {
                1.0
            }
        }
        None => 1.0,
    }
}

/// Nearest-neighbor assignments in both directions between two clouds.
#[derive(Clone, Debug)]
pub struct ChamferMatches {
    /// For each point of `a`: index into `b` and squared distance.
    pub a_to_b: Vec<(usize, f64)>,
    /// For each point of `b`: index into `a` and squared distance.
    pub b_to_a: Vec<(usize, f64)>,
}

impl ChamferMatches {
    pub fn compute(a: &NeighborIndex, b: &NeighborIndex) -> Self {
        Self {
            a_to_b: a.points().iter().map(|p| b.nearest(p)).collect(),
            b_to_a: b.points().iter().map(|p| a.nearest(p)).collect(),
        }
    }

    /// Mean squared nearest distance a→b plus b→a.
    pub fn value(&self) -> f64 {
        mean_sq(&self.a_to_b) + mean_sq(&self.b_to_a)
    }
}

fn mean_sq(m: &[(usize, f64)]) -> f64 {
    m.iter().map(|e| e.1).sum::<f64>() / m.len() as f64
}

/// Symmetric Chamfer distance in m²: mean squared nearest distance from `a`
/// to `b` plus the same from `b` to `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ia = NeighborIndex::with_auto_cell(a)?;
    let ib = NeighborIndex::with_auto_cell(b)?;
    Ok(ChamferMatches::compute(&ia, &ib).value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Vec3::new(rng.random(), rng.random(), rng.random::<f64>() * 0.3))
                .collect(),
        )
        .unwrap()
    }

    fn brute_sorted(points: &[Vec3], q: &Vec3) -> Vec<(f64, usize)> {
        let mut all: Vec<(f64, usize)> =
            points.iter().enumerate().map(|(i, p)| (dist2(p, q), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all
    }

    #[test]
    fn knn_self_and_nearest() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let idx = NeighborIndex::with_auto_cell(&c).unwrap();
        let r = idx.knn(&Vec3::zeros(), 2).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!((r[0].index, r[0].distance), (0, 0.0));
        assert_eq!((r[1].index, r[1].distance), (1, 1.0));
    }

    #[test]
    fn knn_tie_prefers_lower_index() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let idx = NeighborIndex::new(&c, 0.3).unwrap();
        let r = idx.knn(&Vec3::new(0.5, 0.0, 0.0), 2).unwrap();
        assert_eq!((r[0].index, r[0].distance), (0, 0.5));
        assert_eq!((r[1].index, r[1].distance), (1, 0.5));
    }

    #[test]
    fn knn_rejects_k_above_size() {
        let c = cloud(&[[0.0, 0.0, 0.0]]);
        let idx = NeighborIndex::with_auto_cell(&c).unwrap();
        assert!(matches!(
            idx.knn(&Vec3::zeros(), 2),
            Err(Error::InsufficientPoints { requested: 2, available: 1 })
        ));
    }

    #[test]
    fn radius_boundary_is_inclusive() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let idx = NeighborIndex::new(&c, 0.5).unwrap();
        let r = idx.radius_neighbors(&Vec3::zeros(), 0.5).unwrap();
        assert_eq!(r, vec![Neighbor { index: 0, distance: 0.0 }]);
        let r = idx.radius_neighbors(&Vec3::zeros(), 1.0).unwrap();
        assert_eq!(
            r,
            vec![
                Neighbor { index: 0, distance: 0.0 },
                Neighbor { index: 1, distance: 1.0 }
            ]
        );
    }

    #[test]
    fn knn_matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..120 {
            let c = random_cloud(&mut rng, 200);
            let cell = [0.03, 0.1, 0.4][trial % 3];
            let idx = NeighborIndex::new(&c, cell).unwrap();
            let q = Vec3::new(rng.random::<f64>() * 1.4 - 0.2, rng.random(), rng.random());
            let got = idx.knn(&q, 5).unwrap();
            let want = brute_sorted(c.points(), &q);
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.index, w.1);
                assert_eq!(g.distance, w.0.sqrt());
            }
        }
    }

    #[test]
    fn radius_matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..120 {
            let c = random_cloud(&mut rng, 200);
            let idx = NeighborIndex::new(&c, 0.1).unwrap();
            let q = Vec3::new(rng.random(), rng.random(), rng.random::<f64>() * 0.3);
            let got = idx.radius_neighbors(&q, 0.1).unwrap();
            let want: Vec<_> = brute_sorted(c.points(), &q)
                .into_iter()
                .filter(|e| e.0.sqrt() <= 0.1)
                .collect();
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.index, w.1);
            }
        }
    }

    #[test]
    fn radius_larger_than_cloud_uses_full_scan() {
        let c = cloud(&[[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.2, 0.0]]);
        let idx = NeighborIndex::new(&c, 0.01).unwrap();
        let r = idx.radius_neighbors(&Vec3::new(5.0, 0.0, 0.0), 10.0).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].index, 1);
    }

    #[test]
    fn chamfer_hand_values() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(matches!(chamfer(&a, &PointCloud::default()), Err(Error::EmptyCloud)));
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let a = random_cloud(&mut rng, 50);
            let b = random_cloud(&mut rng, 70);
            let one_way = |x: &PointCloud, y: &PointCloud| {
                x.points()
                    .iter()
                    .map(|p| y.points().iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
                    .sum::<f64>()
                    / x.len() as f64
            };
            let want = one_way(&a, &b) + one_way(&b, &a);
            let got = chamfer(&a, &b).unwrap();
            assert!((got - want).abs() <= 1e-15 * want.max(1.0), "{got} vs {want}");
            assert_eq!(got, chamfer(&b, &a).unwrap());
        }
    }

    #[test]
    fn non_finite_points_rejected() {
        assert!(matches!(
            PointCloud::new(vec![Vec3::zeros(), Vec3::new(f64::NAN, 0.0, 0.0)]),
            Err(Error::NonFinitePoint(1))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pts(n: usize) -> impl Strategy<Value = Vec<Vec3>> {
            prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 1..n)
                .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
        }

        proptest! {
            #[test]
            fn chamfer_symmetric_and_translation_covariant(
                a in pts(30), b in pts(30), t in (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64)
            ) {
                let a = PointCloud::new(a).unwrap();
                let b = PointCloud::new(b).unwrap();
                let off = Vec3::new(t.0, t.1, t.2);
                let ab = chamfer(&a, &b).unwrap();
                prop_assert_eq!(ab, chamfer(&b, &a).unwrap());
                prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
                let moved = chamfer(&a.translated(&off), &b.translated(&off)).unwrap();
                prop_assert!((moved - ab).abs() <= 1e-12 * (1.0 + ab));
            }

            #[test]
            fn knn_equals_brute_force(cloud in pts(60), q in (-1.5..1.5f64, -1.5..1.5f64, -1.5..1.5f64), cell in 0.05..1.0f64) {
                let c = PointCloud::new(cloud).unwrap();
                let idx = NeighborIndex::new(&c, cell).unwrap();
                let q = Vec3::new(q.0, q.1, q.2);
                let k = c.len().min(4);
                let got = idx.knn(&q, k).unwrap();
                let want = brute_sorted(c.points(), &q);
                for (g, w) in got.iter().zip(&want) {
                    prop_assert_eq!(g.index, w.1);
                }
            }
        }
    }
}
