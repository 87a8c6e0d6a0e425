//! Forward simulation: Hooke springs with dashpot damping, gravity, and a
//! ground plane, integrated with semi-implicit Euler. Controller nodes are
//! boundary conditions driven by a per-frame trajectory.

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};
use crate::model::{NodeKind, PhysicsConfig, Spring, SystemTopology};

/// Springs shorter than this contribute no Hooke force.
pub const LENGTH_GUARD: f64 = 1e-9;

/// Positions and velocities of every node (object nodes first).
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub time: f64,
}

impl SimState {
    /// Every node at its topology position with its stored velocity.
    pub fn at_rest(topology: &SystemTopology) -> Self {
        Self {
            positions: topology.nodes().iter().map(|n| n.position).collect(),
            velocities: topology.nodes().iter().map(|n| n.velocity).collect(),
            time: 0.0,
        }
    }

    pub fn object_positions(&self, num_object: usize) -> &[Vec3] {
        &self.positions[..num_object]
    }

    fn is_finite(&self) -> bool {
        self.positions
            .iter()
            .chain(&self.velocities)
            .all(|v| v.iter().all(|c| c.is_finite()))
    }
}

/// Per-frame controller node positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerTrajectory {
    frames: Vec<Vec<Vec3>>,
    frame_dt: f64,
}

/// Controller pose applied during one substep.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerTarget {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

impl ControllerTrajectory {
    pub fn new(frames: Vec<Vec<Vec3>>, frame_dt: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidArgument("trajectory needs at least two frames".into()));
        }
        let n = frames[0].len();
        if n == 0 || frames.iter().any(|f| f.len() != n) {
            return Err(Error::InvalidArgument(
                "controller node count must be positive and constant across frames".into(),
            ));
        }
        if !(frame_dt.is_finite() && frame_dt > 0.0) {
            return Err(Error::InvalidArgument("frame dt must be positive".into()));
        }
        if frames.iter().flatten().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument("non-finite controller position".into()));
        }
        Ok(Self { frames, frame_dt })
    }

    pub fn frames(&self) -> &[Vec<Vec3>] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[Vec3] {
        &self.frames[t]
    }

    pub fn frame_cloud(&self, t: usize) -> PointCloud {
        PointCloud::new(self.frames[t].clone()).expect("validated on construction")
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.frames[0].len()
    }

    pub fn frame_dt(&self) -> f64 {
        self.frame_dt
    }

    /// Constant velocity of node `c` over interval `t → t+1`.
    pub fn interval_velocity(&self, t: usize, c: usize) -> Vec3 {
        (self.frames[t + 1][c] - self.frames[t][c]) / self.frame_dt
    }

    /// Pose during substep `k` of `substeps` within interval `t → t+1`:
    /// positions linearly interpolated at `k / substeps`, velocity the
    /// interval's finite difference.
    pub fn substep_target(&self, t: usize, k: usize, substeps: usize) -> ControllerTarget {
        let mut target = ControllerTarget {
            positions: Vec::with_capacity(self.num_nodes()),
            velocities: Vec::with_capacity(self.num_nodes()),
        };
        self.fill_target(t, k, substeps, &mut target);
        target
    }

    pub(crate) fn fill_target(&self, t: usize, k: usize, substeps: usize, out: &mut ControllerTarget) {
        let w = k as f64 / substeps as f64;
        out.positions.clear();
        out.velocities.clear();
        for (a, b) in self.frames[t].iter().zip(&self.frames[t + 1]) {
            out.positions.push(a + (b - a) * w);
            out.velocities.push((b - a) / self.frame_dt);
        }
    }

    /// Subset of controller nodes, same frames.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.frames.iter().map(|f| indices.iter().map(|&i| f[i]).collect()).collect(),
            self.frame_dt,
        )
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        Self {
            frames: self.frames.iter().map(|f| f.iter().map(|p| p + offset).collect()).collect(),
            frame_dt: self.frame_dt,
        }
    }

    /// Replaces all positions (same shape).
    pub fn with_frames(&self, frames: Vec<Vec<Vec3>>) -> Result<Self> {
        Self::new(frames, self.frame_dt)
    }
}

/// Hooke force on node `i` of `spring` given node positions. Zero when the
/// endpoints coincide (within `LENGTH_GUARD`).
pub fn spring_force(state: &SimState, spring: &Spring) -> Vec3 {
    hooke(&state.positions, spring).map_or_else(Vec3::zeros, |h| h.force)
}

/// Dashpot force on node `i`: `-γ (v_i - v_j)` on the full relative velocity.
pub fn damping_force(state: &SimState, spring: &Spring) -> Vec3 {
    -(state.velocities[spring.i] - state.velocities[spring.j]) * spring.damping
}

pub(crate) struct Hooke {
    pub force: Vec3,
    pub dir: Vec3,
    pub length: f64,
}

#[inline]
pub(crate) fn hooke(positions: &[Vec3], s: &Spring) -> Option<Hooke> {
    let delta = positions[s.j] - positions[s.i];
    let length = delta.norm();
    if length <= LENGTH_GUARD {
        return None;
    }
    let dir = delta / length;
    Some(Hooke {
        force: dir * (s.stiffness * (length - s.rest_length)),
        dir,
        length,
    })
}

/// Spring plus damping force on every node (controller reactions included).
pub fn internal_forces(state: &SimState, topology: &SystemTopology) -> Vec<Vec3> {
    let mut forces = vec![Vec3::zeros(); state.positions.len()];
    let mut degenerate = 0;
    accumulate_forces(state, topology, &mut forces, &mut degenerate);
    forces
}

fn accumulate_forces(state: &SimState, topology: &SystemTopology, forces: &mut [Vec3], degenerate: &mut u64) {
    for s in topology.springs() {
        let mut f = damping_force(state, s);
        match hooke(&state.positions, s) {
            Some(h) => f += h.force,
            None => *degenerate += 1,
        }
        forces[s.i] += f;
        forces[s.j] -= f;
    }
}

/// Outcome of ground contact for one node during one substep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Contact {
    None,
    /// Projected; normal velocity reflected by restitution.
    Bounce,
    /// Projected; normal velocity left alone (already separating).
    Slide,
}

/// Ground response after the position update.
#[inline]
pub(crate) fn resolve_ground(x: &mut Vec3, v: &mut Vec3, config: &PhysicsConfig) -> Contact {
    let c = &config.collision;
    if x.z >= c.ground_height {
        return Contact::None;
    }
    x.z = c.ground_height;
    v.x *= c.friction_retention;
    v.y *= c.friction_retention;
    if v.z < 0.0 {
        v.z *= -c.restitution;
        Contact::Bounce
    } else {
        Contact::Slide
    }
}

/// Diagnostic counters gathered during simulation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimDiagnostics {
    /// Spring evaluations skipped because the endpoints coincided.
    pub degenerate_springs: u64,
}

/// Scratch buffers reused across substeps.
#[derive(Default)]
pub(crate) struct Workspace {
    forces: Vec<Vec3>,
}

pub(crate) fn step_in_place(
    state: &mut SimState,
    topology: &SystemTopology,
    config: &PhysicsConfig,
    target: &ControllerTarget,
    work: &mut Workspace,
    diag: &mut SimDiagnostics,
) {
    let n_obj = topology.num_object_nodes();
    for (c, (p, v)) in target.positions.iter().zip(&target.velocities).enumerate() {
        state.positions[n_obj + c] = *p;
        state.velocities[n_obj + c] = *v;
    }
    work.forces.clear();
    work.forces.resize(state.positions.len(), Vec3::zeros());
    accumulate_forces(state, topology, &mut work.forces, &mut diag.degenerate_springs);
    let h = config.substep_dt();
    for (i, node) in topology.nodes()[..n_obj].iter().enumerate() {
        debug_assert_eq!(node.kind, NodeKind::Object);
        let accel = work.forces[i] / node.mass + config.gravity;
        let v = state.velocities[i] + accel * h;
        let mut x = state.positions[i] + v * h;
        let mut v = v;
        resolve_ground(&mut x, &mut v, config);
        state.positions[i] = x;
        state.velocities[i] = v;
    }
    state.time += h;
}

/// One substep: controller nodes snap to `target`, object nodes advance by
/// semi-implicit Euler, then ground contact is resolved.
pub fn step(
    state: &SimState,
    topology: &SystemTopology,
    config: &PhysicsConfig,
    target: &ControllerTarget,
) -> Result<SimState> {
    check_shapes(state, topology, target.positions.len())?;
    let mut next = state.clone();
    let mut diag = SimDiagnostics::default();
    step_in_place(&mut next, topology, config, target, &mut Workspace::default(), &mut diag);
    if !next.is_finite() {
        return Err(Error::Diverged { frame: 0, substep: 0 });
    }
    Ok(next)
}

fn check_shapes(state: &SimState, topology: &SystemTopology, controller_nodes: usize) -> Result<()> {
    if state.positions.len() != topology.nodes().len() || state.velocities.len() != topology.nodes().len() {
        return Err(Error::InvalidArgument(format!(
            "state has {} nodes, topology has {}",
            state.positions.len(),
            topology.nodes().len()
        )));
    }
    if controller_nodes != topology.num_controller_nodes() {
        return Err(Error::InvalidArgument(format!(
            "controller has {controller_nodes} nodes, topology expects {}",
            topology.num_controller_nodes()
        )));
    }
    Ok(())
}

/// States at every observation frame (frame 0 is the initial state).
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub frames: Vec<SimState>,
    pub diagnostics: SimDiagnostics,
}

impl Rollout {
    /// Object node positions at frame `t`.
    pub fn object_positions(&self, t: usize, num_object: usize) -> &[Vec3] {
        self.frames[t].object_positions(num_object)
    }
}

/// Runs `config.substeps` substeps per controller frame interval.
pub fn rollout(
    topology: &SystemTopology,
    config: &PhysicsConfig,
    controller: &ControllerTrajectory,
    initial: &SimState,
) -> Result<Rollout> {
    rollout_with(topology, config, controller, initial, |_, _, _| {})
}

/// `rollout` with a hook observing the pre-step state of every substep
/// (frame interval, substep, state).
pub(crate) fn rollout_with(
    topology: &SystemTopology,
    config: &PhysicsConfig,
    controller: &ControllerTrajectory,
    initial: &SimState,
    mut on_substep: impl FnMut(usize, usize, &SimState),
) -> Result<Rollout> {
    config.validate()?;
    check_shapes(initial, topology, controller.num_nodes())?;
    let n_obj = topology.num_object_nodes();
    let k_sub = config.substeps;
    let mut state = initial.clone();
    for c in 0..controller.num_nodes() {
        state.positions[n_obj + c] = controller.frame(0)[c];
        state.velocities[n_obj + c] = controller.interval_velocity(0, c);
    }
    let mut frames = Vec::with_capacity(controller.num_frames());
    frames.push(state.clone());
    let mut work = Workspace::default();
    let mut diag = SimDiagnostics::default();
    let mut target = ControllerTarget {
        positions: Vec::new(),
        velocities: Vec::new(),
    };
    for t in 0..controller.num_frames() - 1 {
        for k in 0..k_sub {
            controller.fill_target(t, k, k_sub, &mut target);
            on_substep(t, k, &state);
            step_in_place(&mut state, topology, config, &target, &mut work, &mut diag);
            if !state.is_finite() {
                return Err(Error::Diverged {
                    frame: t + 1,
                    substep: t * k_sub + k,
                });
            }
        }
        for c in 0..controller.num_nodes() {
            state.positions[n_obj + c] = controller.frame(t + 1)[c];
        }
        state.time = (t + 1) as f64 * config.frame_dt;
        frames.push(state.clone());
    }
    Ok(Rollout {
        frames,
        diagnostics: diag,
    })
}

/// Kinetic + spring potential + gravitational potential energy (J) of the
/// object nodes and all springs.
pub fn mechanical_energy(state: &SimState, topology: &SystemTopology, config: &PhysicsConfig) -> f64 {
    let n_obj = topology.num_object_nodes();
    let mut e = 0.0;
    for (i, node) in topology.nodes()[..n_obj].iter().enumerate() {
        e += 0.5 * node.mass * state.velocities[i].norm_squared();
        e -= node.mass * config.gravity.dot(&state.positions[i]);
    }
    for s in topology.springs() {
        let l = (state.positions[s.j] - state.positions[s.i]).norm();
        e += 0.5 * s.stiffness * (l - s.rest_length).powi(2);
    }
    e
}

/// Largest single-substep increase of [`mechanical_energy`] over a rollout.
pub fn max_energy_increase(
    topology: &SystemTopology,
    config: &PhysicsConfig,
    controller: &ControllerTrajectory,
    initial: &SimState,
) -> Result<f64> {
    let mut prev: Option<f64> = None;
    let mut worst = f64::NEG_INFINITY;
    let roll = rollout_with(topology, config, controller, initial, |_, _, s| {
        let e = mechanical_energy(s, topology, config);
        if let Some(p) = prev {
            worst = worst.max(e - p);
        }
        prev = Some(e);
    })?;
    let last = mechanical_energy(roll.frames.last().expect("frames"), topology, config);
    if let Some(p) = prev {
        worst = worst.max(last - p);
    }
    Ok(worst)
}
