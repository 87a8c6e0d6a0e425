#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use springtwin::fit::ObservationSequence;
use springtwin::model::{build_topology, initial_damping, PhysicsConfig, SpringParams, SystemTopology};
use springtwin::sim::{rollout, ControllerTrajectory, SimState};
use springtwin::{PointCloud, Vec3};

pub struct SmallScene {
    pub topology: SystemTopology,
    pub config: PhysicsConfig,
    pub controller: ControllerTrajectory,
    pub observations: ObservationSequence,
}

/// A jittered block of object nodes pushed by a few controller nodes, with
/// observations produced by a different (stiffer, shifted) model so the loss
/// is non-zero. `on_ground` rests the block on the ground plane.
pub fn small_scene(seed: u64, on_ground: bool) -> SmallScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 0.01;
    let (nx, ny, nz) = (rng.random_range(3..5), 3, rng.random_range(1..3));
    let z0 = if on_ground { 0.0 } else { 0.05 };
    let mut pts = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let j = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0));
                let mut p = Vec3::new(x as f64 * h, y as f64 * h, z0 + z as f64 * h) + j * 0.001;
                if on_ground && z == 0 {
                    p.z = 0.0;
                }
                pts.push(p);
            }
        }
    }
    let rest = PointCloud::new(pts).unwrap();
    let frames = rng.random_range(4..7);
    let ctl0: Vec<Vec3> = (0..4)
        .map(|k| Vec3::new(-0.006, (k % 2) as f64 * 0.02, z0 + (k / 2) as f64 * 0.005 + 0.002))
        .collect();
    let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..1.0)).normalize();
    let speed = rng.random_range(0.002..0.004);
    let ctl_frames: Vec<Vec<Vec3>> = (0..frames)
        .map(|t| {
            let wobble = Vec3::new(0.0, 0.0005 * (t as f64).sin(), 0.0);
            ctl0.iter().map(|p| p + dir * (speed * t as f64) + wobble).collect()
        })
        .collect();
    let controller = ControllerTrajectory::new(ctl_frames, 1.0 / 30.0).unwrap();
    let config = PhysicsConfig {
        connection_radius: 0.0155,
        max_degree: 6,
        global_stiffness: 400.0,
        substeps: rng.random_range(4..9),
        collision: springtwin::model::CollisionParams {
            ground_height: 0.0,
            friction_retention: 0.9,
            restitution: 0.3,
        },
        ..PhysicsConfig::default()
    };
    let base = build_topology(&rest, &controller.frame_cloud(0), &config).unwrap();
    let stiffness: Vec<f64> = base.springs().iter().map(|_| rng.random_range(200.0..800.0)).collect();
    let damping: Vec<f64> = stiffness.iter().map(|&s| initial_damping(s) * rng.random_range(0.5..2.0)).collect();
    let topology = base.with_params(&SpringParams { stiffness: stiffness.clone(), damping: damping.clone() }).unwrap();

    let truth = base
        .with_params(&SpringParams {
            stiffness: stiffness.iter().map(|s| s * 1.4).collect(),
            damping,
        })
        .unwrap();
    let shifted = controller.translated(&Vec3::new(0.0, 0.0, 0.001));
    let roll = rollout(&truth, &config, &shifted, &SimState::at_rest(&truth)).unwrap();
    let n = topology.num_object_nodes();
    let clouds = (0..frames)
        .map(|t| {
            let pts = roll.object_positions(t, n).iter().step_by(2).map(|p| p + Vec3::new(0.0005, 0.0, 0.0)).collect();
            PointCloud::new(pts).unwrap()
        })
        .collect();
    let tracks = (0..frames).map(|t| roll.object_positions(t, n).iter().step_by(3).copied().collect()).collect();
    let observations = ObservationSequence::new(1.0 / 30.0, clouds, tracks).unwrap();
    SmallScene {
        topology,
        config,
        controller,
        observations,
    }
}

pub struct FdOutcome {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

fn compare(name: String, adjoint: f64, fd: f64, out: &mut FdOutcome) {
    let scale = adjoint.abs().max(fd.abs());
    out.checked += 1;
    if scale < 1e-8 {
        return;
    }
    let rel = (adjoint - fd).abs() / scale;
    out.worst_rel = out.worst_rel.max(rel);
    if rel > 1e-4 {
        out.failures.push(format!("{name}: adjoint {adjoint:e} fd {fd:e} rel {rel:e}"));
    }
}

/// Central differences with step `h` and `h/2` combined by Richardson
/// extrapolation, cancelling the `h²` truncation term.
fn richardson(h: f64, f: impl Fn(f64) -> f64) -> f64 {
    let d1 = (f(h) - f(-h)) / (2.0 * h);
    let d2 = (f(h / 2.0) - f(-h / 2.0)) / h;
    (4.0 * d2 - d1) / 3.0
}

/// Central finite differences (step 1e-6, Richardson-extrapolated) of every
/// per-spring log-parameter and every controller coordinate against the
/// adjoint gradient.
pub fn finite_difference_check(scene: &SmallScene) -> FdOutcome {
    use springtwin::grad::{evaluate_loss, loss_and_grad, Objective};
    let eps = 1e-6;
    let objective =
        Objective::new(&scene.observations, &scene.topology.object_rest_positions(), 1.0).unwrap();
    let rep = loss_and_grad(&scene.topology, &scene.config, &scene.controller, &objective).unwrap();
    let loss_at = |topo: &SystemTopology, ctl: &ControllerTrajectory| {
        evaluate_loss(topo, &scene.config, ctl, &objective).unwrap()
    };
    let mut out = FdOutcome {
        checked: 0,
        failures: vec![],
        worst_rel: 0.0,
    };
    let log = scene.topology.params().to_log();
    let m = scene.topology.springs().len();
    for k in 0..log.len() {
        let fd = richardson(eps, |d| {
            let mut x = log.clone();
            x[k] += d;
            loss_at(&scene.topology.with_params(&SpringParams::from_log(&x)).unwrap(), &scene.controller)
        });
        let (name, adj) = if k < m {
            (format!("ln s[{k}]"), rep.d_log_stiffness[k])
        } else {
            (format!("ln gamma[{}]", k - m), rep.d_log_damping[k - m])
        };
        compare(name, adj, fd, &mut out);
    }
    let frames = scene.controller.frames().to_vec();
    for t in 0..frames.len() {
        for c in 0..frames[t].len() {
            for a in 0..3 {
                let fd = richardson(eps, |d| {
                    let mut x = frames.clone();
                    x[t][c][a] += d;
                    loss_at(&scene.topology, &scene.controller.with_frames(x).unwrap())
                });
                compare(format!("c[{t}][{c}][{a}]"), rep.d_controller[t][c][a], fd, &mut out);
            }
        }
    }
    out
}
