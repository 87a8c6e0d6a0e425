mod common;

use common::small_scene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use springtwin::model::{build_topology, MassNode, SystemTopology};
use springtwin::scenegen::{generate, preset, PRESETS};
use springtwin::sim::{internal_forces, max_energy_increase, rollout, ControllerTrajectory, SimState};
use springtwin::{PointCloud, Vec3};

fn random_state(topo: &SystemTopology, rng: &mut ChaCha8Rng) -> SimState {
    let mut s = SimState::at_rest(topo);
    for (p, v) in s.positions.iter_mut().zip(s.velocities.iter_mut()) {
        *p += Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 0.003;
        *v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 0.1;
    }
    s
}

#[test]
fn internal_forces_cancel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let scene = small_scene(seed, seed % 2 == 0);
        let state = random_state(&scene.topology, &mut rng);
        let forces = internal_forces(&state, &scene.topology);
        let total: Vec3 = forces.iter().sum();
        let per_node = total.norm() / forces.len() as f64;
        assert!(per_node <= 1e-9, "seed {seed}: net internal force {per_node:e} N per node");
    }
}

#[test]
fn energy_does_not_increase_after_release() {
    // the preset scenes with the controller held still and gravity off
    for name in PRESETS {
        let scene = generate(&preset(name).unwrap()).unwrap();
        let mut config = scene.truth_config.clone();
        config.substeps = 64;
        assert!(config.substep_dt() <= 1e-3);
        config.gravity = Vec3::zeros();
        let last = scene.dense_controller.frame(scene.dense_controller.num_frames() - 1).to_vec();
        let hold = ControllerTrajectory::new(vec![last; 4], config.frame_dt).unwrap();
        let roll = rollout(&scene.truth_topology, &config, &scene.dense_controller, &SimState::at_rest(&scene.truth_topology)).unwrap();
        let mut released = roll.frames.last().unwrap().clone();
        released.velocities.iter_mut().for_each(|v| *v = Vec3::zeros());
        let rise = max_energy_increase(&scene.truth_topology, &config, &hold, &released).unwrap();
        assert!(rise <= 1e-8, "{name}: energy rose by {rise:e} J in one substep");
    }
}

#[test]
fn energy_decays_for_a_free_damped_block() {
    let scene = small_scene(4, false);
    let mut config = scene.config.clone();
    config.gravity = Vec3::zeros();
    config.substeps = 40;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut state = random_state(&scene.topology, &mut rng);
    let frame0 = scene.controller.frame(0).to_vec();
    // controller nodes start on their held targets at rest
    let n = scene.topology.num_object_nodes();
    for (k, p) in frame0.iter().enumerate() {
        state.positions[n + k] = *p;
        state.velocities[n + k] = Vec3::zeros();
    }
    let hold = ControllerTrajectory::new(vec![frame0; 6], config.frame_dt).unwrap();
    let rise = max_energy_increase(&scene.topology, &config, &hold, &state).unwrap();
    assert!(rise <= 1e-8, "energy rose by {rise:e} J");
}

fn shift_topology(t: &SystemTopology, a: &Vec3) -> SystemTopology {
    let nodes: Vec<MassNode> = t
        .nodes()
        .iter()
        .map(|n| MassNode {
            position: n.position + a,
            ..n.clone()
        })
        .collect();
    SystemTopology::from_parts(nodes, t.springs().to_vec(), t.isolated_nodes().to_vec()).unwrap()
}

#[test]
fn rollout_is_translation_equivariant() {
    for seed in 0..6 {
        let scene = small_scene(seed, seed % 2 == 1);
        let a = Vec3::new(0.37, -1.25, 0.5);
        let mut config = scene.config.clone();
        config.collision.ground_height += a.z;
        let moved = shift_topology(&scene.topology, &a);
        let base = rollout(&scene.topology, &scene.config, &scene.controller, &SimState::at_rest(&scene.topology)).unwrap();
        let shifted =
            rollout(&moved, &config, &scene.controller.translated(&a), &SimState::at_rest(&moved)).unwrap();
        let scale = 1.0 + a.norm();
        for (f0, f1) in base.frames.iter().zip(&shifted.frames) {
            for (p, q) in f0.positions.iter().zip(&f1.positions) {
                let err = (q - a - p).norm();
                assert!(err <= 1e-12 * scale, "seed {seed}: deviation {err:e} m");
            }
        }
    }
}

#[test]
fn topology_is_translation_equivariant() {
    // jittered geometry: no distance ties for roundoff to reorder
    for seed in 0..6 {
        let scene = small_scene(seed, false);
        let rest = PointCloud::new(scene.topology.object_rest_positions()).unwrap();
        let ctl = scene.controller.frame_cloud(0);
        let a = Vec3::new(1.5, 2.25, -0.75);
        let t0 = build_topology(&rest, &ctl, &scene.config).unwrap();
        let t1 = build_topology(&rest.translated(&a), &ctl.translated(&a), &scene.config).unwrap();
        let pairs = |t: &SystemTopology| t.springs().iter().map(|s| (s.i, s.j, s.kind)).collect::<Vec<_>>();
        assert_eq!(pairs(&t0), pairs(&t1), "seed {seed}");
    }
}

#[test]
fn rollout_is_deterministic() {
    let scene = small_scene(2, true);
    let run = || rollout(&scene.topology, &scene.config, &scene.controller, &SimState::at_rest(&scene.topology)).unwrap();
    let (a, b) = (run(), run());
    for (f0, f1) in a.frames.iter().zip(&b.frames) {
        for (p, q) in f0.positions.iter().zip(&f1.positions) {
            assert_eq!(p.map(f64::to_bits), q.map(f64::to_bits));
        }
    }
}
