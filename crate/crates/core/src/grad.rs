//! Reverse-mode gradients of the rollout loss.
//!
//! The forward pass records the object state before every substep; the
//! backward pass replays each substep and propagates adjoints through the
//! ground response, the semi-implicit Euler update and every spring. Chamfer
//! correspondences are frozen at the evaluation point and the ground
//! projection is treated as a clamp (zero derivative in the normal
//! direction).

use crate::error::{Error, Result};
use crate::fit::{track_loss, ObservationSequence, TrackBinding};
use crate::geom::{auto_cell_size, ChamferMatches, NeighborIndex, Vec3};
use crate::model::{PhysicsConfig, SpringParams, SystemTopology};
use crate::sim::{hooke, resolve_ground, rollout, rollout_with, Contact, ControllerTarget, ControllerTrajectory, Rollout, SimState};

/// Loss value and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub loss: f64,
    /// ∂L/∂(ln s_e) per spring.
    pub d_log_stiffness: Vec<f64>,
    /// ∂L/∂(ln γ_e) per spring.
    pub d_log_damping: Vec<f64>,
    /// ∂L/∂c[t][n] for every controller node and frame.
    pub d_controller: Vec<Vec<Vec3>>,
}

impl GradientReport {
    /// `[∂/∂ln s .., ∂/∂ln γ ..]`, matching `SpringParams::to_log`.
    pub fn log_param_gradient(&self) -> Vec<f64> {
        self.d_log_stiffness.iter().chain(&self.d_log_damping).copied().collect()
    }

    pub fn param_norm(&self) -> f64 {
        self.log_param_gradient().iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn controller_norm(&self) -> f64 {
        self.d_controller.iter().flatten().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }
}

/// The fitting objective
/// `(1/T) Σ_{t=1..T} [chamfer(sim_t, P_t) + λ_tr · track(sim_t, T_t)]`
/// over object node positions. Frame 0 is the shared initial state and is
/// not scored.
#[derive(Clone, Debug)]
pub struct Objective {
    clouds: Vec<NeighborIndex>,
    tracks: Vec<Vec<Vec3>>,
    binding: TrackBinding,
    lambda_tr: f64,
    num_object: usize,
}

impl Objective {
    /// Tracks are bound to the nearest node of `object_rest` at frame 0.
    pub fn new(observations: &ObservationSequence, object_rest: &[Vec3], lambda_tr: f64) -> Result<Self> {
        if observations.num_frames() < 2 {
            return Err(Error::InvalidArgument("need at least two observation frames".into()));
        }
        if !(lambda_tr.is_finite() && lambda_tr >= 0.0) {
            return Err(Error::InvalidArgument("lambda_tr must be non-negative".into()));
        }
        let clouds = observations
            .clouds
            .iter()
            .map(NeighborIndex::with_auto_cell)
            .collect::<Result<Vec<_>>>()?;
        let binding = TrackBinding::new(object_rest, &observations.tracks[0])?;
        Ok(Self {
            clouds,
            tracks: observations.tracks.clone(),
            binding,
            lambda_tr,
            num_object: object_rest.len(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.clouds.len()
    }

    pub fn lambda_tr(&self) -> f64 {
        self.lambda_tr
    }

    pub fn binding(&self) -> &TrackBinding {
        &self.binding
    }

    /// Unnormalized per-frame term; adds its gradient into `grad` if given.
    pub fn frame_term(&self, t: usize, positions: &[Vec3], grad: Option<&mut [Vec3]>) -> f64 {
        let sim = NeighborIndex::from_points(positions, auto_cell_size(positions)).expect("non-empty object");
        let obs = &self.clouds[t];
        let m = ChamferMatches::compute(&sim, obs);
        let tr = track_loss(positions, &self.tracks[t], &self.binding);
        if let Some(g) = grad {
            let na = positions.len() as f64;
            let nb = obs.len() as f64;
            for (a, &(b, _)) in m.a_to_b.iter().enumerate() {
                g[a] += (positions[a] - obs.points()[b]) * (2.0 / na);
            }
            for (b, &(a, _)) in m.b_to_a.iter().enumerate() {
                g[a] += (positions[a] - obs.points()[b]) * (2.0 / nb);
            }
            let k = self.binding.nodes.len();
            if k > 0 {
                let w = 2.0 * self.lambda_tr / k as f64;
                for (&n, p) in self.binding.nodes.iter().zip(&self.tracks[t]) {
                    g[n] += (positions[n] - p) * w;
                }
            }
        }
        m.value() + self.lambda_tr * tr
    }

    /// Loss of a finished rollout.
    pub fn loss(&self, roll: &Rollout) -> f64 {
        let frames = self.num_frames();
        let total: f64 = (1..frames)
            .map(|t| self.frame_term(t, roll.object_positions(t, self.num_object), None))
            .sum();
        total / (frames - 1) as f64
    }

    fn check(&self, topology: &SystemTopology, controller: &ControllerTrajectory) -> Result<()> {
        if controller.num_frames() != self.num_frames() {
            return Err(Error::FrameMismatch {
                expected: controller.num_frames(),
                found: self.num_frames(),
            });
        }
        if topology.num_object_nodes() != self.num_object {
            return Err(Error::InvalidArgument(format!(
                "objective built for {} object nodes, topology has {}",
                self.num_object,
                topology.num_object_nodes()
            )));
        }
        Ok(())
    }
}

/// Forward-only loss evaluation.
pub fn evaluate_loss(
    topology: &SystemTopology,
    config: &PhysicsConfig,
    controller: &ControllerTrajectory,
    objective: &Objective,
) -> Result<f64> {
    objective.check(topology, controller)?;
    let roll = rollout(topology, config, controller, &SimState::at_rest(topology))?;
    Ok(objective.loss(&roll))
}

/// Loss and all gradients (per-spring log-parameters and controller
/// positions) in one forward/backward sweep, starting from the rest state.
pub fn loss_and_grad(
    topology: &SystemTopology,
    config: &PhysicsConfig,
    controller: &ControllerTrajectory,
    objective: &Objective,
) -> Result<GradientReport> {
    objective.check(topology, controller)?;
    let n_obj = topology.num_object_nodes();
    let n_ctl = topology.num_controller_nodes();
    let k_sub = config.substeps;
    let frames = controller.num_frames();

    let mut tape_x: Vec<Vec3> = Vec::with_capacity((frames - 1) * k_sub * n_obj);
    let mut tape_v: Vec<Vec3> = Vec::with_capacity((frames - 1) * k_sub * n_obj);
    let roll = rollout_with(topology, config, controller, &SimState::at_rest(topology), |_, _, s| {
        tape_x.extend_from_slice(&s.positions[..n_obj]);
        tape_v.extend_from_slice(&s.velocities[..n_obj]);
    })?;

    let scale = 1.0 / (frames - 1) as f64;
    let mut loss_grads = vec![vec![Vec3::zeros(); n_obj]; frames];
    let mut loss = 0.0;
    for (t, g) in loss_grads.iter_mut().enumerate().skip(1) {
        loss += objective.frame_term(t, roll.object_positions(t, n_obj), Some(g));
        g.iter_mut().for_each(|v| *v *= scale);
    }
    loss *= scale;

    let springs = topology.springs();
    let nodes = topology.nodes();
    let h = config.substep_dt();
    let dt = controller.frame_dt();
    let mut d_log_s = vec![0.0; springs.len()];
    let mut d_log_g = vec![0.0; springs.len()];
    let mut d_ctl = vec![vec![Vec3::zeros(); n_ctl]; frames];

    let mut xbar = vec![Vec3::zeros(); n_obj];
    let mut vbar = vec![Vec3::zeros(); n_obj];
    let mut pos = vec![Vec3::zeros(); n_obj + n_ctl];
    let mut vel = vec![Vec3::zeros(); n_obj + n_ctl];
    let mut fbar = vec![Vec3::zeros(); n_obj + n_ctl];
    let mut forces = vec![Vec3::zeros(); n_obj + n_ctl];
    let mut pbar = vec![Vec3::zeros(); n_ctl];
    let mut ubar = vec![Vec3::zeros(); n_ctl];
    let mut contacts = vec![Contact::None; n_obj];
    let mut target = ControllerTarget {
        positions: Vec::new(),
        velocities: Vec::new(),
    };

    for t in (1..frames).rev() {
        for (xb, g) in xbar.iter_mut().zip(&loss_grads[t]) {
            *xb += g;
        }
        let interval = t - 1;
        for k in (0..k_sub).rev() {
            let sub = interval * k_sub + k;
            pos[..n_obj].copy_from_slice(&tape_x[sub * n_obj..(sub + 1) * n_obj]);
            vel[..n_obj].copy_from_slice(&tape_v[sub * n_obj..(sub + 1) * n_obj]);
            controller.fill_target(interval, k, k_sub, &mut target);
            pos[n_obj..].copy_from_slice(&target.positions);
            vel[n_obj..].copy_from_slice(&target.velocities);

            // replay the forward substep to recover contact decisions
            forces.iter_mut().for_each(|f| *f = Vec3::zeros());
            for s in springs {
                let mut f = -(vel[s.i] - vel[s.j]) * s.damping;
                if let Some(hk) = hooke(&pos, s) {
                    f += hk.force;
                }
                forces[s.i] += f;
                forces[s.j] -= f;
            }
            for i in 0..n_obj {
                let accel = forces[i] / nodes[i].mass + config.gravity;
                let mut v = vel[i] + accel * h;
                let mut x = pos[i] + v * h;
                contacts[i] = resolve_ground(&mut x, &mut v, config);
            }

            // adjoint of ground response and integrator
            let mu = config.collision.friction_retention;
            let e = config.collision.restitution;
            for i in 0..n_obj {
                let (xb, vb) = (xbar[i], vbar[i]);
                let (xt, vt) = match contacts[i] {
                    Contact::None => (xb, vb),
                    Contact::Bounce => (Vec3::new(xb.x, xb.y, 0.0), Vec3::new(mu * vb.x, mu * vb.y, -e * vb.z)),
                    Contact::Slide => (Vec3::new(xb.x, xb.y, 0.0), Vec3::new(mu * vb.x, mu * vb.y, vb.z)),
                };
                let vtot = vt + xt * h;
                xbar[i] = xt;
                vbar[i] = vtot;
                fbar[i] = vtot * (h / nodes[i].mass);
            }
            fbar[n_obj..].iter_mut().for_each(|f| *f = Vec3::zeros());
            pbar.iter_mut().for_each(|p| *p = Vec3::zeros());
            ubar.iter_mut().for_each(|u| *u = Vec3::zeros());

            for (e_idx, s) in springs.iter().enumerate() {
                let w = fbar[s.i] - fbar[s.j];
                if let Some(hk) = hooke(&pos, s) {
                    let ratio = s.rest_length / hk.length;
                    let jw = (w * (1.0 - ratio) + hk.dir * (ratio * hk.dir.dot(&w))) * s.stiffness;
                    xbar[s.i] -= jw;
                    if s.j < n_obj {
                        xbar[s.j] += jw;
                    } else {
                        pbar[s.j - n_obj] += jw;
                    }
                    d_log_s[e_idx] += w.dot(&hk.force);
                }
                let fd = -(vel[s.i] - vel[s.j]) * s.damping;
                d_log_g[e_idx] += w.dot(&fd);
                let gw = w * s.damping;
                vbar[s.i] -= gw;
                if s.j < n_obj {
                    vbar[s.j] += gw;
                } else {
                    ubar[s.j - n_obj] += gw;
                }
            }

            let wk = k as f64 / k_sub as f64;
            for c in 0..n_ctl {
                let ud = ubar[c] / dt;
                d_ctl[interval][c] += pbar[c] * (1.0 - wk) - ud;
                d_ctl[interval + 1][c] += pbar[c] * wk + ud;
            }
        }
    }

    if let Some(e) = d_log_s.iter().chain(&d_log_g).position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(e % springs.len().max(1)));
    }
    for (t, frame) in d_ctl.iter().enumerate() {
        if let Some(node) = frame.iter().position(|g| !g.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFiniteControllerGradient { frame: t, node });
        }
    }
    Ok(GradientReport {
        loss,
        d_log_stiffness: d_log_s,
        d_log_damping: d_log_g,
        d_controller: d_ctl,
    })
}

/// Gradient with respect to per-spring log-parameters at `params`.
pub fn loss_and_grad_params(
    topology: &SystemTopology,
    config: &PhysicsConfig,
    params: &SpringParams,
    controller: &ControllerTrajectory,
    observations: &ObservationSequence,
    lambda_tr: f64,
) -> Result<GradientReport> {
    let topo = topology.with_params(params)?;
    let objective = Objective::new(observations, &topo.object_rest_positions(), lambda_tr)?;
    loss_and_grad(&topo, config, controller, &objective)
}

/// Gradient with respect to every controller position of every frame.
pub fn loss_and_grad_controller(
    topology: &SystemTopology,
    config: &PhysicsConfig,
    params: &SpringParams,
    controller: &ControllerTrajectory,
    observations: &ObservationSequence,
    lambda_tr: f64,
) -> Result<GradientReport> {
    loss_and_grad_params(topology, config, params, controller, observations, lambda_tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::PointCloud;
    use crate::model::{MassNode, NodeKind, Spring, SpringKind};

    fn no_gravity(substeps: usize) -> PhysicsConfig {
        PhysicsConfig {
            gravity: Vec3::zeros(),
            substeps,
            frame_dt: 0.01,
            ..PhysicsConfig::default()
        }
    }

    fn one_spring(s: f64, g: f64, extra_controller: bool) -> SystemTopology {
        let mut nodes = vec![
            MassNode::at_rest(Vec3::zeros(), NodeKind::Object),
            MassNode::at_rest(Vec3::new(1.0, 0.0, 0.0), NodeKind::Controller),
        ];
        if extra_controller {
            nodes.push(MassNode::at_rest(Vec3::new(5.0, 5.0, 5.0), NodeKind::Controller));
        }
        let spring = Spring {
            i: 0,
            j: 1,
            stiffness: s,
            damping: g,
            rest_length: 0.8,
            kind: SpringKind::Virtual,
        };
        SystemTopology::from_parts(nodes, vec![spring], vec![]).unwrap()
    }

    fn obs(points: &[Vec3]) -> ObservationSequence {
        ObservationSequence::new(
            0.01,
            vec![PointCloud::new(vec![Vec3::zeros()]).unwrap(), PointCloud::new(points.to_vec()).unwrap()],
            vec![vec![], vec![]],
        )
        .unwrap()
    }

    #[test]
    fn single_spring_matches_hand_derivative() {
        let (s, l, r, h) = (50.0, 1.0, 0.8, 0.01);
        let topo = one_spring(s, 3.0, false);
        let ctl = ControllerTrajectory::new(vec![vec![Vec3::new(l, 0.0, 0.0)]; 2], 0.01).unwrap();
        let q = Vec3::new(0.3, 0.1, 0.0);
        let observations = obs(&[q]);
        let objective = Objective::new(&observations, &[Vec3::zeros()], 1.0).unwrap();
        let rep = loss_and_grad(&topo, &no_gravity(1), &ctl, &objective).unwrap();
        let x1 = Vec3::new(h * h * s * (l - r), 0.0, 0.0);
        assert!((rep.loss - 2.0 * (x1 - q).norm_squared()).abs() < 1e-15);
        let want = 4.0 * (x1 - q).dot(&Vec3::new(h * h * s * (l - r), 0.0, 0.0));
        assert!((rep.d_log_stiffness[0] - want).abs() < 1e-14, "{} vs {want}", rep.d_log_stiffness[0]);
        assert_eq!(rep.d_log_damping[0], 0.0);
        // moving the controller at frame 1 only changes its velocity: dx1/dc1 = h·γ·h/dt
        let dc1 = rep.d_controller[1][0];
        let want_c1 = 4.0 * (x1 - q) * (h * 3.0 * h / 0.01);
        assert!((dc1 - want_c1).norm() < 1e-13, "{dc1:?} vs {want_c1:?}");
    }

    #[test]
    fn unconnected_controller_has_zero_gradient() {
        let topo = one_spring(50.0, 3.0, true);
        let frames = vec![
            vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(5.0, 5.0, 5.0)],
            vec![Vec3::new(1.1, 0.0, 0.0), Vec3::new(5.0, 5.2, 5.0)],
            vec![Vec3::new(1.2, 0.1, 0.0), Vec3::new(5.0, 5.4, 5.0)],
        ];
        let ctl = ControllerTrajectory::new(frames, 0.01).unwrap();
        let c = PointCloud::new(vec![Vec3::new(0.2, 0.0, 0.0)]).unwrap();
        let observations = ObservationSequence::new(0.01, vec![c.clone(), c.clone(), c], vec![vec![]; 3]).unwrap();
        let objective = Objective::new(&observations, &[Vec3::zeros()], 1.0).unwrap();
        let rep = loss_and_grad(&topo, &no_gravity(4), &ctl, &objective).unwrap();
        assert!(rep.d_controller.iter().all(|f| f[1] == Vec3::zeros()));
        assert!(rep.d_controller.iter().any(|f| f[0].norm() > 0.0));
    }

    #[test]
    fn loss_and_gradient_vanish_at_truth() {
        let topo = one_spring(50.0, 3.0, false);
        let frames = vec![
            vec![Vec3::new(1.0, 0.0, 0.0)],
            vec![Vec3::new(1.05, 0.0, 0.0)],
            vec![Vec3::new(1.1, 0.02, 0.0)],
        ];
        let ctl = ControllerTrajectory::new(frames, 0.01).unwrap();
        let cfg = no_gravity(4);
        let roll = rollout(&topo, &cfg, &ctl, &SimState::at_rest(&topo)).unwrap();
        let clouds = (0..3).map(|t| PointCloud::new(roll.object_positions(t, 1).to_vec()).unwrap()).collect();
        let tracks = (0..3).map(|t| roll.object_positions(t, 1).to_vec()).collect();
        let observations = ObservationSequence::new(0.01, clouds, tracks).unwrap();
        let objective = Objective::new(&observations, &[Vec3::zeros()], 1.0).unwrap();
        let rep = loss_and_grad(&topo, &cfg, &ctl, &objective).unwrap();
        assert_eq!(rep.loss, 0.0);
        assert_eq!(rep.param_norm(), 0.0);
        assert_eq!(rep.controller_norm(), 0.0);
    }

    #[test]
    fn frame_count_mismatch_is_reported() {
        let topo = one_spring(50.0, 3.0, false);
        let ctl = ControllerTrajectory::new(vec![vec![Vec3::new(1.0, 0.0, 0.0)]; 3], 0.01).unwrap();
        let objective = Objective::new(&obs(&[Vec3::zeros()]), &[Vec3::zeros()], 1.0).unwrap();
        assert!(matches!(
            loss_and_grad(&topo, &no_gravity(1), &ctl, &objective),
            Err(Error::FrameMismatch { .. })
        ));
    }
}
