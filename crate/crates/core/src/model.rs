//! Spring–mass representation and topology construction.
//!
//! Object springs come from the rest geometry (radius + degree cap); virtual
//! springs tie controller nodes to object nodes found within the connection
//! radius at frame 0. Controller nodes are appended after all object nodes,
//! and object springs precede virtual springs in the spring list.

use crate::error::{Error, Result};
use crate::geom::{NeighborIndex, PointCloud, Vec3};

/// Mass assigned to every node.
pub const DEFAULT_MASS: f64 = 1.0;

/// Damping ratio used to derive a spring's initial dashpot coefficient from
/// its stiffness.
pub const INITIAL_DAMPING_RATIO: f64 = 0.1;

/// Initial dashpot coefficient for a spring of the given stiffness between
/// unit masses: `2 ζ sqrt(s m)` with `ζ = INITIAL_DAMPING_RATIO`.
pub fn initial_damping(stiffness: f64) -> f64 {
    2.0 * INITIAL_DAMPING_RATIO * (stiffness * DEFAULT_MASS).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Object,
    Controller,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MassNode {
    pub position: Vec3,
    pub velocity: Vec3,
    pub mass: f64,
    pub kind: NodeKind,
}

impl MassNode {
    pub fn at_rest(position: Vec3, kind: NodeKind) -> Self {
        Self {
            position,
            velocity: Vec3::zeros(),
            mass: DEFAULT_MASS,
            kind,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpringKind {
    Object,
    Virtual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spring {
    pub i: usize,
    pub j: usize,
    /// N/m
    pub stiffness: f64,
    /// N·s/m
    pub damping: f64,
    /// m
    pub rest_length: f64,
    pub kind: SpringKind,
}

/// Ground-plane collision parameters (the plane normal is +z).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollisionParams {
    pub ground_height: f64,
    /// Fraction of tangential velocity kept on contact, in [0, 1].
    pub friction_retention: f64,
    /// Fraction of normal velocity reflected on contact, in [0, 1].
    pub restitution: f64,
}

impl Default for CollisionParams {
    fn default() -> Self {
        Self {
            ground_height: 0.0,
            friction_retention: 1.0,
            restitution: 0.0,
        }
    }
}

/// Global physical configuration: the zero-order parameter set plus the
/// known integration constants.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsConfig {
    /// Connection radius δ (m), used for object springs and contact detection.
    pub connection_radius: f64,
    /// Maximum object-spring degree per node.
    pub max_degree: usize,
    /// Homogeneous stiffness s_global (N/m).
    pub global_stiffness: f64,
    pub collision: CollisionParams,
    /// m/s²
    pub gravity: Vec3,
    /// Seconds between observation frames.
    pub frame_dt: f64,
    pub substeps: usize,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            connection_radius: 0.002,
            max_degree: 3,
            global_stiffness: 1000.0,
            collision: CollisionParams::default(),
            gravity: Vec3::new(0.0, 0.0, -9.8),
            frame_dt: 1.0 / 30.0,
            substeps: 32,
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.connection_radius.is_finite() && self.connection_radius > 0.0) {
            return bad("connection radius must be positive");
        }
        if self.max_degree < 1 {
            return bad("max degree must be at least 1");
        }
        if !(self.global_stiffness.is_finite() && self.global_stiffness > 0.0) {
            return bad("global stiffness must be positive");
        }
        if self.substeps < 1 {
            return bad("substeps must be at least 1");
        }
        if !(self.frame_dt.is_finite() && self.frame_dt > 0.0) {
            return bad("frame dt must be positive");
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.collision.friction_retention) || !unit(self.collision.restitution) {
            return bad("collision coefficients must lie in [0, 1]");
        }
        if !self.gravity.iter().all(|g| g.is_finite()) || !self.collision.ground_height.is_finite() {
            return bad("gravity and ground height must be finite");
        }
        Ok(())
    }

    /// Integration step Δt = frame_dt / substeps.
    pub fn substep_dt(&self) -> f64 {
        self.frame_dt / self.substeps as f64
    }
}

/// Per-spring stiffness and damping (the first-order parameter set), in
/// spring order.
#[derive(Clone, Debug, PartialEq)]
pub struct SpringParams {
    pub stiffness: Vec<f64>,
    pub damping: Vec<f64>,
}

impl SpringParams {
    pub fn len(&self) -> usize {
        self.stiffness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stiffness.is_empty()
    }

    /// `[ln s_0 .. ln s_n, ln γ_0 .. ln γ_n]`
    pub fn to_log(&self) -> Vec<f64> {
        self.stiffness
            .iter()
            .chain(&self.damping)
            .map(|v| v.max(f64::MIN_POSITIVE).ln())
            .collect()
    }

    pub fn from_log(log: &[f64]) -> Self {
        let n = log.len() / 2;
        Self {
            stiffness: log[..n].iter().map(|v| v.exp()).collect(),
            damping: log[n..].iter().map(|v| v.exp()).collect(),
        }
    }
}

/// Nodes and springs of the full system (object part plus, once attached,
/// controller nodes and virtual springs).
#[derive(Clone, Debug, PartialEq)]
pub struct SystemTopology {
    nodes: Vec<MassNode>,
    springs: Vec<Spring>,
    num_object_nodes: usize,
    num_object_springs: usize,
    isolated_nodes: Vec<usize>,
}

impl SystemTopology {
    /// Assembles a topology from raw parts, checking the structural
    /// invariants (partitioning, index ranges, parameter signs, pair
    /// uniqueness).
    pub fn from_parts(
        nodes: Vec<MassNode>,
        springs: Vec<Spring>,
        isolated_nodes: Vec<usize>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let num_object_nodes = nodes.iter().take_while(|n| n.kind == NodeKind::Object).count();
        if nodes[num_object_nodes..].iter().any(|n| n.kind != NodeKind::Controller) {
            return bad("controller nodes must follow all object nodes".into());
        }
        let num_object_springs = springs.iter().take_while(|s| s.kind == SpringKind::Object).count();
        let mut seen = std::collections::HashSet::new();
        for (e, s) in springs.iter().enumerate() {
            if s.i == s.j || s.i >= nodes.len() || s.j >= nodes.len() {
                return bad(format!("spring {e} has invalid endpoints"));
            }
            if !(s.stiffness > 0.0 && s.damping >= 0.0 && s.rest_length >= 0.0)
                || !(s.stiffness.is_finite() && s.damping.is_finite() && s.rest_length.is_finite())
            {
                return bad(format!("spring {e} has invalid parameters"));
            }
            if !seen.insert((s.i.min(s.j), s.i.max(s.j))) {
                return bad(format!("spring {e} duplicates a node pair"));
            }
            let ctrl = |k: usize| k >= num_object_nodes;
            match s.kind {
                SpringKind::Object if e >= num_object_springs => {
                    return bad("object springs must precede virtual springs".into())
                }
                SpringKind::Object if ctrl(s.i) || ctrl(s.j) => {
                    return bad(format!("object spring {e} touches a controller node"))
                }
                SpringKind::Virtual if ctrl(s.i) || !ctrl(s.j) => {
                    return bad(format!("virtual spring {e} must join object i to controller j"))
                }
                _ => {}
            }
        }
        if nodes.iter().any(|n| !(n.mass > 0.0)) {
            return bad("node masses must be positive".into());
        }
        Ok(Self {
            nodes,
            springs,
            num_object_nodes,
            num_object_springs,
            isolated_nodes,
        })
    }

    pub fn nodes(&self) -> &[MassNode] {
        &self.nodes
    }

    pub fn springs(&self) -> &[Spring] {
        &self.springs
    }

    pub fn num_object_nodes(&self) -> usize {
        self.num_object_nodes
    }

    pub fn num_controller_nodes(&self) -> usize {
        self.nodes.len() - self.num_object_nodes
    }

    pub fn object_springs(&self) -> &[Spring] {
        &self.springs[..self.num_object_springs]
    }

    pub fn virtual_springs(&self) -> &[Spring] {
        &self.springs[self.num_object_springs..]
    }

    /// Object nodes that had no neighbor within the connection radius.
    pub fn isolated_nodes(&self) -> &[usize] {
        &self.isolated_nodes
    }

    pub fn object_rest_positions(&self) -> Vec<Vec3> {
        self.nodes[..self.num_object_nodes].iter().map(|n| n.position).collect()
    }

    /// Object-spring degree of every object node.
    pub fn object_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_object_nodes];
        for s in self.object_springs() {
            deg[s.i] += 1;
            deg[s.j] += 1;
        }
        deg
    }

    /// For every object node, whether it has at least one virtual spring.
    pub fn virtual_contact_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.num_object_nodes];
        for s in self.virtual_springs() {
            mask[s.i] = true;
        }
        mask
    }

    /// Longest virtual-spring rest length, the effective contact radius.
    pub fn max_virtual_rest_length(&self) -> Option<f64> {
        self.virtual_springs().iter().map(|s| s.rest_length).reduce(f64::max)
    }

    pub fn params(&self) -> SpringParams {
        SpringParams {
            stiffness: self.springs.iter().map(|s| s.stiffness).collect(),
            damping: self.springs.iter().map(|s| s.damping).collect(),
        }
    }

    /// Copy with per-spring stiffness and damping replaced.
    pub fn with_params(&self, params: &SpringParams) -> Result<Self> {
        if params.stiffness.len() != self.springs.len() || params.damping.len() != self.springs.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} spring parameters, got {}",
                self.springs.len(),
                params.stiffness.len()
            )));
        }
        let mut out = self.clone();
        for (e, s) in out.springs.iter_mut().enumerate() {
            let (k, c) = (params.stiffness[e], params.damping[e]);
            if !(k.is_finite() && k > 0.0 && c.is_finite() && c >= 0.0) {
                return Err(Error::InvalidArgument(format!("invalid parameters for spring {e}")));
            }
            s.stiffness = k;
            s.damping = c;
        }
        Ok(out)
    }

    /// Object part only: drops controller nodes and virtual springs.
    pub fn object_part(&self) -> Self {
        Self {
            nodes: self.nodes[..self.num_object_nodes].to_vec(),
            springs: self.object_springs().to_vec(),
            num_object_nodes: self.num_object_nodes,
            num_object_springs: self.num_object_springs,
            isolated_nodes: self.isolated_nodes.clone(),
        }
    }
}

fn check_radius(radius: f64) -> Result<()> {
    if radius.is_finite() && radius > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("connection radius must be positive, got {radius}")))
    }
}

/// Builds object springs from the rest geometry.
///
/// Candidate pairs are all node pairs within `radius` (inclusive). They are
/// admitted in ascending `(distance, i, j)` order while both endpoints are
/// below `max_degree`; each spring counts toward both endpoints.
pub fn build_object_springs(
    rest: &PointCloud,
    radius: f64,
    max_degree: usize,
    stiffness: f64,
) -> Result<SystemTopology> {
    check_radius(radius)?;
    if max_degree < 1 {
        return Err(Error::InvalidArgument("max degree must be at least 1".into()));
    }
    if !(stiffness.is_finite() && stiffness > 0.0) {
        return Err(Error::InvalidArgument("stiffness must be positive".into()));
    }
    if rest.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let points = rest.points();
    let index = NeighborIndex::new(rest, radius)?;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    let mut isolated = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let hits = index.radius_neighbors(p, radius)?;
        if hits.iter().all(|h| h.index == i) {
            isolated.push(i);
        }
        pairs.extend(hits.iter().filter(|h| h.index > i).map(|h| (h.distance, i, h.index)));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let damping = initial_damping(stiffness);
    let mut degree = vec![0usize; points.len()];
    let mut springs = Vec::new();
    for (d, i, j) in pairs {
        if degree[i] < max_degree && degree[j] < max_degree {
            degree[i] += 1;
            degree[j] += 1;
            springs.push(Spring {
                i,
                j,
                stiffness,
                damping,
                rest_length: d,
                kind: SpringKind::Object,
            });
        }
    }
    let nodes = points.iter().map(|p| MassNode::at_rest(*p, NodeKind::Object)).collect();
    let num_object_springs = springs.len();
    Ok(SystemTopology {
        nodes,
        springs,
        num_object_nodes: points.len(),
        num_object_springs,
        isolated_nodes: isolated,
    })
}

/// Appends controller nodes and a virtual spring for every
/// (controller, object) pair within `radius` at frame 0.
pub fn attach_virtual_springs(
    topology: &SystemTopology,
    controller_frame0: &PointCloud,
    object_frame0: &PointCloud,
    radius: f64,
    stiffness: f64,
) -> Result<SystemTopology> {
    check_radius(radius)?;
    if controller_frame0.is_empty() || object_frame0.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if topology.num_controller_nodes() != 0 {
        return Err(Error::InvalidArgument("topology already has controller nodes".into()));
    }
    let n = topology.num_object_nodes;
    if object_frame0.len() != n {
        return Err(Error::InvalidArgument(format!(
            "object frame has {} points, topology has {n} object nodes",
            object_frame0.len()
        )));
    }
    let index = NeighborIndex::new(object_frame0, radius)?;
    let damping = initial_damping(stiffness);
    let mut out = topology.clone();
    for (c, p) in controller_frame0.points().iter().enumerate() {
        for hit in index.radius_neighbors(p, radius)? {
            out.springs.push(Spring {
                i: hit.index,
                j: n + c,
                stiffness,
                damping,
                rest_length: hit.distance,
                kind: SpringKind::Virtual,
            });
        }
        out.nodes.push(MassNode::at_rest(*p, NodeKind::Controller));
    }
    if out.springs.len() == topology.springs.len() {
        return Err(Error::NoContact);
    }
    Ok(out)
}

/// Builds the full topology for a connection radius, degree cap and
/// homogeneous stiffness.
pub fn build_topology(
    object_rest: &PointCloud,
    controller_frame0: &PointCloud,
    config: &PhysicsConfig,
) -> Result<SystemTopology> {
    let object = build_object_springs(
        object_rest,
        config.connection_radius,
        config.max_degree,
        config.global_stiffness,
    )?;
    attach_virtual_springs(
        &object,
        controller_frame0,
        object_rest,
        config.connection_radius,
        config.global_stiffness,
    )
}

/// Spatial resolution Δx: each node's mean distance to its four nearest
/// other nodes, averaged over all nodes.
pub fn mean_resolution(object_rest: &PointCloud) -> Result<f64> {
    let n = object_rest.len();
    if n < 5 {
        return Err(Error::InsufficientPoints {
            requested: 5,
            available: n,
        });
    }
    let index = NeighborIndex::with_auto_cell(object_rest)?;
    let mut total = 0.0;
    for (i, p) in object_rest.points().iter().enumerate() {
        let near = index.knn(p, 5)?;
        let sum: f64 = near.iter().filter(|h| h.index != i).take(4).map(|h| h.distance).sum();
        total += sum / 4.0;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::dist2;

    fn line(n: usize, spacing: f64) -> PointCloud {
        PointCloud::new((0..n).map(|i| Vec3::new(i as f64 * spacing, 0.0, 0.0)).collect()).unwrap()
    }

    pub(crate) fn grid(nx: usize, ny: usize, h: f64) -> PointCloud {
        let mut pts = Vec::new();
        for y in 0..ny {
            for x in 0..nx {
                pts.push(Vec3::new(x as f64 * h, y as f64 * h, 0.0));
            }
        }
        PointCloud::new(pts).unwrap()
    }

    /// Exhaustive-pair greedy construction, independent of the grid index.
    fn brute_build(points: &[Vec3], radius: f64, dmax: usize) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let d = dist2(&points[i], &points[j]).sqrt();
                if d <= radius {
                    pairs.push((d, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut deg = vec![0; points.len()];
        let mut out = Vec::new();
        for (_, i, j) in pairs {
            if deg[i] < dmax && deg[j] < dmax {
                deg[i] += 1;
                deg[j] += 1;
                out.push((i, j));
            }
        }
        out
    }

    #[test]
    fn collinear_points_connect_neighbors() {
        let t = build_object_springs(&line(3, 1.0), 1.5, 3, 100.0).unwrap();
        let pairs: Vec<_> = t.springs().iter().map(|s| (s.i, s.j, s.rest_length)).collect();
        assert_eq!(pairs, vec![(0, 1, 1.0), (1, 2, 1.0)]);
        assert!(t.isolated_nodes().is_empty());
        assert_eq!(t.springs()[0].damping, initial_damping(100.0));
    }

    #[test]
    fn small_radius_isolates_every_node() {
        let t = build_object_springs(&line(3, 1.0), 0.5, 3, 100.0).unwrap();
        assert!(t.springs().is_empty());
        assert_eq!(t.isolated_nodes(), &[0, 1, 2]);
    }

    #[test]
    fn grid_interior_nodes_get_axis_neighbors() {
        let h = 0.01;
        let g = grid(10, 10, h);
        let t = build_object_springs(&g, 0.015, 4, 500.0).unwrap();
        let got: Vec<_> = t.springs().iter().map(|s| (s.i, s.j)).collect();
        assert_eq!(got, brute_build(g.points(), 0.015, 4));
        let has = |a: usize, b: usize| got.contains(&(a.min(b), a.max(b)));
        for y in 1..9 {
            for x in 1..9 {
                let i = y * 10 + x;
                assert!(has(i, i - 1) && has(i, i + 1) && has(i, i - 10) && has(i, i + 10));
            }
        }
        assert!(t.object_degrees().iter().all(|&d| d <= 4));
    }

    #[test]
    fn construction_matches_brute_force_on_random_clouds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let pts: Vec<Vec3> = (0..60)
                .map(|_| Vec3::new(rng.random(), rng.random(), rng.random::<f64>() * 0.2))
                .collect();
            let radius = rng.random_range(0.05..0.4);
            let dmax = rng.random_range(1..8);
            let cloud = PointCloud::new(pts.clone()).unwrap();
            let t = build_object_springs(&cloud, radius, dmax, 10.0).unwrap();
            let got: Vec<_> = t.springs().iter().map(|s| (s.i, s.j)).collect();
            assert_eq!(got, brute_build(&pts, radius, dmax));
            assert!(t.object_degrees().iter().all(|&d| d <= dmax));
            assert!(t.springs().iter().all(|s| s.rest_length <= radius));
            let again = build_object_springs(&cloud, radius, dmax, 10.0).unwrap();
            assert_eq!(t, again);
        }
    }

    #[test]
    fn single_virtual_spring_in_range() {
        let obj = PointCloud::new(vec![Vec3::new(0.001, 0.0, 0.0)]).unwrap();
        let ctl = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let base = build_object_springs(&obj, 0.002, 3, 100.0).unwrap();
        let t = attach_virtual_springs(&base, &ctl, &obj, 0.002, 100.0).unwrap();
        assert_eq!(t.virtual_springs().len(), 1);
        let s = &t.virtual_springs()[0];
        assert_eq!((s.i, s.j), (0, 1));
        assert!((s.rest_length - 0.001).abs() < 1e-18);
        assert_eq!(t.nodes()[1].kind, NodeKind::Controller);
    }

    #[test]
    fn out_of_range_controller_is_no_contact() {
        let obj = PointCloud::new(vec![Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        let ctl = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let base = build_object_springs(&obj, 0.002, 3, 100.0).unwrap();
        assert!(matches!(
            attach_virtual_springs(&base, &ctl, &obj, 0.002, 100.0),
            Err(Error::NoContact)
        ));
    }

    #[test]
    fn virtual_springs_skip_degree_cap() {
        let g = grid(3, 3, 0.01);
        let base = build_object_springs(&g, 0.015, 1, 100.0).unwrap();
        let ctl = PointCloud::new(vec![Vec3::new(0.01, 0.01, 0.001)]).unwrap();
        let t = attach_virtual_springs(&base, &ctl, &g, 0.015, 100.0).unwrap();
        assert_eq!(t.virtual_springs().len(), 9);
        for s in t.virtual_springs() {
            assert!(s.i < 9 && s.j == 9);
            let d = (g.points()[s.i] - ctl.points()[0]).norm();
            assert_eq!(s.rest_length, d);
        }
        assert!(t.object_degrees().iter().all(|&d| d <= 1));
    }

    fn brute_resolution(points: &[Vec3]) -> f64 {
        let mut total = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .collect();
            d.sort_by(f64::total_cmp);
            total += d[..4].iter().sum::<f64>() / 4.0;
        }
        total / points.len() as f64
    }

    #[test]
    fn resolution_of_line_and_grid() {
        let l = line(5, 1.0);
        let want = brute_resolution(l.points());
        assert!((want - 2.0).abs() < 1e-15);
        assert!((mean_resolution(&l).unwrap() - want).abs() < 1e-15);

        let g = grid(10, 10, 0.01);
        let want = brute_resolution(g.points());
        let got = mean_resolution(&g).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!(got > 0.01 && got < 0.011, "{got}");
    }

    #[test]
    fn resolution_scales_linearly() {
        let g = grid(6, 5, 0.01);
        let base = mean_resolution(&g).unwrap();
        let scaled = mean_resolution(&g.scaled(2.5)).unwrap();
        assert!((scaled - 2.5 * base).abs() < 1e-15);
    }

    #[test]
    fn resolution_needs_five_nodes() {
        assert!(mean_resolution(&line(4, 1.0)).is_err());
    }

    #[test]
    fn from_parts_rejects_bad_partition() {
        let t = build_object_springs(&line(3, 1.0), 1.5, 3, 100.0).unwrap();
        let mut springs = t.springs().to_vec();
        springs.push(springs[0].clone());
        assert!(SystemTopology::from_parts(t.nodes().to_vec(), springs, vec![]).is_err());
        let ok = SystemTopology::from_parts(t.nodes().to_vec(), t.springs().to_vec(), vec![]).unwrap();
        assert_eq!(ok.springs(), t.springs());
    }
}
