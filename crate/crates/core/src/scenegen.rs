//! Synthetic ground-truth scenes: rest geometry, ground-truth physics,
//! controller patches with scripted motion, a high-substep reference rollout
//! and noisy observations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::ObservationSequence;
use crate::geom::{dist2, PointCloud, Vec3};
use crate::metrics::object_frames;
use crate::model::{build_topology, initial_damping, CollisionParams, PhysicsConfig, SpringKind, SpringParams, SystemTopology};
use crate::sim::{max_energy_increase, rollout, ControllerTrajectory, SimState};

/// Default sparse controller size.
pub const DEFAULT_SPARSE_K: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Geometry {
    Rope { nodes: usize, spacing: f64 },
    Cloth { nx: usize, ny: usize, spacing: f64 },
    Blob { nx: usize, ny: usize, nz: usize, spacing: f64 },
}

/// Stiffness split by a plane `x = split_x`, assigned by spring midpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSplit {
    pub split_x: f64,
    pub stiffness_below: f64,
    pub stiffness_above: f64,
}

/// Ground-truth physics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    pub connection_radius: f64,
    pub max_degree: usize,
    /// Global stiffness; also the virtual-spring stiffness.
    pub stiffness: f64,
    #[serde(default)]
    pub material: Option<MaterialSplit>,
    pub friction_retention: f64,
    pub restitution: f64,
    pub gravity: [f64; 3],
}

/// A contact patch: an `nu × nv` grid at `pitch` spanning axes `u`, `v`
/// around `center`, repeated at each offset along `w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub center: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
    pub w: [f64; 3],
    pub nu: usize,
    pub nv: usize,
    pub pitch: f64,
    pub layers: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScriptKind {
    /// Straight up.
    Lift,
    /// Horizontally away from the object centroid.
    Stretch,
    /// Up and toward the centroid.
    Fold,
    /// Horizontally toward the centroid.
    Push,
    /// Along `direction`.
    Drag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptSpec {
    pub kind: ScriptKind,
    /// Peak displacement (m).
    pub amplitude: f64,
    /// 0: one smooth ramp; otherwise `(1 − cos 2π·cycles·u) / 2`.
    #[serde(default)]
    pub cycles: f64,
    #[serde(default)]
    pub direction: Option<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControllerKind {
    Dense,
    Sparse(usize),
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControllerKind::Dense => write!(f, "dense"),
            ControllerKind::Sparse(k) => write!(f, "sparse:{k}"),
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "dense" {
            return Ok(ControllerKind::Dense);
        }
        let k = s
            .strip_prefix("sparse:")
            .or_else(|| s.strip_prefix("sparse-"))
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k > 0)
            .ok_or_else(|| Error::Config(format!("controller must be `dense` or `sparse:k`, got `{s}`")))?;
        Ok(ControllerKind::Sparse(k))
    }
}

impl Serialize for ControllerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ControllerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Observation jitter (m).
    #[serde(default)]
    pub sigma_obs: f64,
    /// Track jitter (m); a ~1 px tracking error is taken as 1 mm at desk range.
    #[serde(default)]
    pub sigma_tr: f64,
    /// Per-frame rigid controller offset (m) for the perturbed trajectory.
    #[serde(default)]
    pub sigma_ctl: f64,
}

fn default_substeps() -> usize {
    32
}

fn default_ref_factor() -> usize {
    4
}

fn default_controller() -> ControllerKind {
    ControllerKind::Dense
}

fn default_frame_dt() -> f64 {
    1.0 / 30.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    pub geometry: Geometry,
    /// Height of the lowest node layer (m).
    #[serde(default)]
    pub elevation: f64,
    pub truth: TruthSpec,
    pub sites: Vec<SiteSpec>,
    pub script: ScriptSpec,
    /// Controller used when fitting; the ground truth always uses the dense one.
    #[serde(default = "default_controller")]
    pub controller: ControllerKind,
    pub frames: usize,
    #[serde(default = "default_frame_dt")]
    pub frame_dt: f64,
    /// Substeps per frame of the fitted model.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Reference rollout runs at `substeps × reference_factor`.
    #[serde(default = "default_ref_factor")]
    pub reference_factor: usize,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_obs: 0.0,
            sigma_tr: 0.0,
            sigma_ctl: 0.0,
        }
    }
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let n = &self.noise;
        if ![n.sigma_obs, n.sigma_tr, n.sigma_ctl].iter().all(|s| s.is_finite() && *s >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if self.frames < 2 || self.substeps < 1 || self.reference_factor < 1 {
            return bad("need at least two frames and one substep");
        }
        if !(self.frame_dt.is_finite() && self.frame_dt > 0.0) {
            return bad("frame dt must be positive");
        }
        if self.sites.is_empty() {
            return bad("at least one controller site is required");
        }
        for s in &self.sites {
            if s.nu == 0 || s.nv == 0 || s.layers.is_empty() || !(s.pitch >= 0.0) {
                return bad("controller sites need a non-empty grid and at least one layer");
            }
        }
        let size_ok = match self.geometry {
            Geometry::Rope { nodes, spacing } => nodes >= 5 && spacing > 0.0,
            Geometry::Cloth { nx, ny, spacing } => nx * ny >= 5 && spacing > 0.0,
            Geometry::Blob { nx, ny, nz, spacing } => nx * ny * nz >= 5 && spacing > 0.0,
        };
        if !size_ok {
            return bad("geometry needs at least five nodes and positive spacing");
        }
        if let ControllerKind::Sparse(k) = self.controller {
            if k > self.dense_controller_size() {
                return bad("sparse controller larger than the dense controller");
            }
        }
        self.physics_config().validate()
    }

    pub fn dense_controller_size(&self) -> usize {
        self.sites.iter().map(|s| s.nu * s.nv * s.layers.len()).sum()
    }

    /// Ground-truth global configuration at the fitting substep count.
    pub fn physics_config(&self) -> PhysicsConfig {
        PhysicsConfig {
            connection_radius: self.truth.connection_radius,
            max_degree: self.truth.max_degree,
            global_stiffness: self.truth.stiffness,
            collision: CollisionParams {
                ground_height: 0.0,
                friction_retention: self.truth.friction_retention,
                restitution: self.truth.restitution,
            },
            gravity: v3(self.truth.gravity),
            frame_dt: self.frame_dt,
            substeps: self.substeps,
        }
    }

    pub fn rest_geometry(&self) -> Result<PointCloud> {
        let z0 = self.elevation;
        let pts: Vec<Vec3> = match self.geometry {
            Geometry::Rope { nodes, spacing } => (0..nodes).map(|i| Vec3::new(i as f64 * spacing, 0.0, z0)).collect(),
            Geometry::Cloth { nx, ny, spacing } => (0..ny)
                .flat_map(|y| (0..nx).map(move |x| Vec3::new(x as f64 * spacing, y as f64 * spacing, z0)))
                .collect(),
            Geometry::Blob { nx, ny, nz, spacing } => (0..nz)
                .flat_map(|z| {
                    (0..ny).flat_map(move |y| {
                        (0..nx).map(move |x| Vec3::new(x as f64 * spacing, y as f64 * spacing, z0 + z as f64 * spacing))
                    })
                })
                .collect(),
        };
        PointCloud::new(pts)
    }

    fn site_points(site: &SiteSpec) -> Vec<Vec3> {
        let (c, u, v, w) = (v3(site.center), v3(site.u), v3(site.v), v3(site.w));
        let off = |i: usize, n: usize| (i as f64 - (n as f64 - 1.0) / 2.0) * site.pitch;
        let mut pts = Vec::with_capacity(site.nu * site.nv * site.layers.len());
        for &layer in &site.layers {
            for j in 0..site.nv {
                for i in 0..site.nu {
                    pts.push(c + u * off(i, site.nu) + v * off(j, site.nv) + w * layer);
                }
            }
        }
        pts
    }

    fn profile(&self, u: f64) -> f64 {
        if self.script.cycles > 0.0 {
            (1.0 - (2.0 * std::f64::consts::PI * self.script.cycles * u).cos()) / 2.0
        } else {
            u * u * (3.0 - 2.0 * u)
        }
    }

    fn site_displacement(&self, site: &SiteSpec, centroid: &Vec3) -> Result<Vec3> {
        let mut out = v3(site.center) - centroid;
        out.z = 0.0;
        let outward = if out.norm() > 1e-12 { out.normalize() } else { Vec3::x() };
        let dir = match self.script.kind {
            ScriptKind::Lift => Vec3::z(),
            ScriptKind::Stretch => outward,
            ScriptKind::Push => -outward,
            ScriptKind::Fold => (Vec3::z() - outward).normalize(),
            ScriptKind::Drag => {
                let d = v3(self
                    .script
                    .direction
                    .ok_or_else(|| Error::Config("drag script needs a direction".into()))?);
                if !(d.norm() > 0.0) {
                    return Err(Error::Config("drag direction must be non-zero".into()));
                }
                d.normalize()
            }
        };
        Ok(dir * self.script.amplitude)
    }

    /// Dense controller trajectory following the script.
    pub fn dense_controller(&self, rest: &PointCloud) -> Result<ControllerTrajectory> {
        let centroid = rest.points().iter().sum::<Vec3>() / rest.len() as f64;
        let mut base = Vec::new();
        let mut disp = Vec::new();
        for site in &self.sites {
            let d = self.site_displacement(site, &centroid)?;
            for p in Self::site_points(site) {
                base.push(p);
                disp.push(d);
            }
        }
        let last = (self.frames - 1) as f64;
        let frames = (0..self.frames)
            .map(|t| {
                let a = self.profile(t as f64 / last);
                base.iter().zip(&disp).map(|(p, d)| p + d * a).collect()
            })
            .collect();
        ControllerTrajectory::new(frames, self.frame_dt)
    }
}

/// A generated scene: ground truth plus observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub rest: PointCloud,
    /// Ground-truth global configuration (fitting substep count).
    pub truth_config: PhysicsConfig,
    /// Ground-truth topology built on the dense controller.
    pub truth_topology: SystemTopology,
    pub dense_controller: ControllerTrajectory,
    /// Indices into the dense controller of the sparse subsample (FPS order).
    pub sparse_indices: Vec<usize>,
    /// Object positions of the reference rollout, per frame.
    pub reference: Vec<Vec<Vec3>>,
    pub observations: ObservationSequence,
    /// Dense controller with a per-frame rigid Gaussian offset (σ_ctl).
    pub perturbed_controller: ControllerTrajectory,
}

impl Scene {
    /// Controller used for fitting per `kind`.
    pub fn controller(&self, kind: ControllerKind) -> Result<ControllerTrajectory> {
        match kind {
            ControllerKind::Dense => Ok(self.dense_controller.clone()),
            ControllerKind::Sparse(k) => {
                if k > self.sparse_indices.len() {
                    let (_, idx) = sparse_subsample(&self.dense_controller.frame_cloud(0), k, self.spec.seed)?;
                    return self.dense_controller.select(&idx);
                }
                self.dense_controller.select(&self.sparse_indices[..k])
            }
        }
    }

    /// Ground-truth per-spring material mask (true = stiffer side); `None`
    /// for homogeneous scenes.
    pub fn stiff_mask(&self) -> Option<Vec<bool>> {
        self.spec.material_mask(&self.truth_topology)
    }
}

impl SceneSpec {
    fn material_mask(&self, topo: &SystemTopology) -> Option<Vec<bool>> {
        let m = self.truth.material.as_ref()?;
        let nodes = topo.nodes();
        Some(
            topo.springs()
                .iter()
                .map(|s| s.kind == SpringKind::Object && (nodes[s.i].position.x + nodes[s.j].position.x) / 2.0 >= m.split_x)
                .collect(),
        )
    }

    fn truth_topology(&self, rest: &PointCloud, controller: &ControllerTrajectory) -> Result<SystemTopology> {
        let topo = build_topology(rest, &controller.frame_cloud(0), &self.physics_config())?;
        let Some(m) = &self.truth.material else {
            return Ok(topo);
        };
        let nodes = topo.nodes();
        let stiffness: Vec<f64> = topo
            .springs()
            .iter()
            .map(|s| match s.kind {
                SpringKind::Virtual => self.truth.stiffness,
                SpringKind::Object if (nodes[s.i].position.x + nodes[s.j].position.x) / 2.0 < m.split_x => m.stiffness_below,
                SpringKind::Object => m.stiffness_above,
            })
            .collect();
        let damping = stiffness.iter().map(|&s| initial_damping(s)).collect();
        topo.with_params(&SpringParams { stiffness, damping })
    }
}

/// Farthest-point subsample of `k` points. The start index is drawn from
/// `seed`; each next point maximizes the distance to the chosen set (ties to
/// the lower index). Returns the points and their indices, in visit order.
pub fn sparse_subsample(dense: &PointCloud, k: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    let n = dense.len();
    if k > n {
        return Err(Error::InsufficientPoints {
            requested: k,
            available: n,
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let pts = dense.points();
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..n);
    let mut chosen = vec![start];
    let mut gap: Vec<f64> = pts.iter().map(|p| dist2(p, &pts[start])).collect();
    while chosen.len() < k {
        let next = (0..n)
            .max_by(|&a, &b| gap[a].total_cmp(&gap[b]).then(b.cmp(&a)))
            .expect("non-empty");
        chosen.push(next);
        for (g, p) in gap.iter_mut().zip(pts) {
            *g = g.min(dist2(p, &pts[next]));
        }
    }
    Ok((dense.select(&chosen), chosen))
}

/// Builds the ground truth, runs the reference rollout at
/// `substeps × reference_factor` and draws the noisy observations.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let rest = spec.rest_geometry()?;
    let dense = spec.dense_controller(&rest)?;
    let truth_config = spec.physics_config();
    let truth_topology = spec.truth_topology(&rest, &dense)?;
    let mut ref_config = truth_config.clone();
    ref_config.substeps = spec.substeps * spec.reference_factor;
    let unstable = |e: Error| Error::SceneUnstable(format!("{}: {e}", spec.name));
    let roll = rollout(&truth_topology, &ref_config, &dense, &SimState::at_rest(&truth_topology)).map_err(unstable)?;
    let n = truth_topology.num_object_nodes();
    let reference = object_frames(&roll, n);

    // Energy audit: hold the controller at its last pose and release.
    let hold = ControllerTrajectory::new(vec![dense.frame(spec.frames - 1).to_vec(); 3], spec.frame_dt)?;
    let mut released = roll.frames.last().expect("frames").clone();
    released.velocities.iter_mut().for_each(|v| *v = Vec3::zeros());
    let mut audit_config = ref_config.clone();
    audit_config.gravity = Vec3::zeros();
    let rise = max_energy_increase(&truth_topology, &audit_config, &hold, &released).map_err(unstable)?;
    if rise > 1e-8 {
        return Err(Error::SceneUnstable(format!("{}: energy rose by {rise:e} J in one substep", spec.name)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = |sigma: f64, p: &Vec3, rng: &mut ChaCha8Rng| -> Vec3 {
        if sigma == 0.0 {
            return *p;
        }
        let d = Normal::new(0.0, sigma).expect("valid sigma");
        p + Vec3::new(d.sample(rng), d.sample(rng), d.sample(rng))
    };
    let clouds = reference
        .iter()
        .map(|f| PointCloud::new(f.iter().map(|p| jitter(spec.noise.sigma_obs, p, &mut rng)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let tracks: Vec<Vec<Vec3>> = reference
        .iter()
        .map(|f| f.iter().map(|p| jitter(spec.noise.sigma_tr, p, &mut rng)).collect())
        .collect();
    let observations = ObservationSequence::new(spec.frame_dt, clouds, tracks)?;
    let perturbed_frames = dense
        .frames()
        .iter()
        .map(|f| {
            let off = jitter(spec.noise.sigma_ctl, &Vec3::zeros(), &mut rng);
            f.iter().map(|p| p + off).collect()
        })
        .collect();
    let perturbed_controller = dense.with_frames(perturbed_frames)?;
    let k = DEFAULT_SPARSE_K.min(dense.num_nodes());
    let (_, sparse_indices) = sparse_subsample(&dense.frame_cloud(0), k, spec.seed)?;

    Ok(Scene {
        spec: spec.clone(),
        rest,
        truth_config,
        truth_topology,
        dense_controller: dense,
        sparse_indices,
        reference,
        observations,
        perturbed_controller,
    })
}

/// Bundled scene presets.
pub fn preset(name: &str) -> Result<SceneSpec> {
    let truth = |gravity: [f64; 3]| TruthSpec {
        connection_radius: 0.03,
        max_degree: 8,
        stiffness: 500.0,
        material: None,
        friction_retention: 1.0,
        restitution: 0.0,
        gravity,
    };
    let pinch = |center: [f64; 3]| SiteSpec {
        center,
        u: [1.0, 0.0, 0.0],
        v: [0.0, 1.0, 0.0],
        w: [0.0, 0.0, 1.0],
        nu: 5,
        nv: 5,
        pitch: 0.0025,
        layers: vec![-0.005, -0.0015, 0.0015, 0.005],
    };
    let side = |center: [f64; 3], outward: f64| SiteSpec {
        center,
        u: [0.0, 1.0, 0.0],
        v: [0.0, 0.0, 1.0],
        w: [outward, 0.0, 0.0],
        nu: 5,
        nv: 3,
        pitch: 0.005,
        layers: vec![0.0015, 0.005, 0.0085],
    };
    let cloth = |n: usize| Geometry::Cloth {
        nx: n,
        ny: n,
        spacing: 0.01,
    };
    let spec = match name {
        "cloth-stretch" => SceneSpec {
            name: name.into(),
            geometry: cloth(8),
            elevation: 0.0,
            truth: truth([0.0, 0.0, -9.8]),
            sites: vec![pinch([0.0, 0.035, 0.0]), pinch([0.07, 0.035, 0.0])],
            script: ScriptSpec {
                kind: ScriptKind::Stretch,
                amplitude: 0.015,
                cycles: 0.0,
                direction: None,
            },
            controller: ControllerKind::Dense,
            frames: 16,
            frame_dt: default_frame_dt(),
            substeps: 32,
            reference_factor: 4,
            noise: NoiseSpec::default(),
            seed: 1,
        },
        "cloth-drag" => SceneSpec {
            name: name.into(),
            sites: vec![pinch([0.0, 0.0, 0.0])],
            script: ScriptSpec {
                kind: ScriptKind::Drag,
                amplitude: 0.03,
                cycles: 0.0,
                direction: Some([-1.0, -0.5, 0.0]),
            },
            seed: 2,
            ..preset("cloth-stretch")?
        },
        "cloth-two-material" => {
            let mut spec = SceneSpec {
                name: name.into(),
                seed: 3,
                ..preset("cloth-stretch")?
            };
            spec.truth.material = Some(MaterialSplit {
                split_x: 0.035,
                stiffness_below: 400.0,
                stiffness_above: 650.0,
            });
            spec
        }
        "double-stretch-blob" => SceneSpec {
            name: name.into(),
            geometry: Geometry::Blob {
                nx: 5,
                ny: 5,
                nz: 3,
                spacing: 0.01,
            },
            elevation: 0.05,
            truth: truth([0.0, 0.0, 0.0]),
            sites: vec![side([0.0, 0.02, 0.06], -1.0), side([0.04, 0.02, 0.06], 1.0)],
            script: ScriptSpec {
                kind: ScriptKind::Stretch,
                amplitude: 0.012,
                cycles: 2.0,
                direction: None,
            },
            controller: ControllerKind::Dense,
            frames: 20,
            frame_dt: default_frame_dt(),
            substeps: 32,
            reference_factor: 4,
            noise: NoiseSpec::default(),
            seed: 7,
        },
        _ => return Err(Error::Config(format!("unknown preset `{name}`"))),
    };
    Ok(spec)
}

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &["cloth-stretch", "cloth-drag", "cloth-two-material", "double-stretch-blob"];
