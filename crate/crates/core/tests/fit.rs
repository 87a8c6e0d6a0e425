mod common;

use common::small_scene;
use springtwin::fit::{fit_first_order, fit_zero_order, refine_controller, FitResult, OptimConfig, SearchConfig};
use springtwin::grad::{loss_and_grad, Objective};
use springtwin::model::PhysicsConfig;
use springtwin::scenegen::{generate, preset, Scene};
use springtwin::PointCloud;

fn exact_scene(name: &str, frames: usize) -> Scene {
    let mut spec = preset(name).unwrap();
    spec.frames = frames;
    spec.reference_factor = 1;
    generate(&spec).unwrap()
}

#[test]
fn truth_is_stationary() {
    let scene = exact_scene("cloth-stretch", 6);
    let objective = Objective::new(&scene.observations, scene.rest.points(), 1.0).unwrap();
    let r = loss_and_grad(&scene.truth_topology, &scene.truth_config, &scene.dense_controller, &objective).unwrap();
    assert_eq!(r.loss, 0.0);
    assert_eq!(r.param_norm(), 0.0);
    assert_eq!(r.controller_norm(), 0.0);

    let f = fit_first_order(
        &scene.truth_topology,
        &scene.truth_config,
        &scene.dense_controller,
        &scene.observations,
        &OptimConfig::first_order(),
    )
    .unwrap();
    assert_eq!(f.first_order_curve.len(), 201);
    assert!(f.first_order_curve.iter().all(|&l| l == 0.0));
    assert_eq!(f.topology, scene.truth_topology);
}

#[test]
fn zero_iterations_return_the_base() {
    let scene = exact_scene("cloth-stretch", 4);
    let base = PhysicsConfig {
        gravity: scene.truth_config.gravity,
        ..PhysicsConfig::default()
    };
    let z = fit_zero_order(
        &scene.rest,
        &scene.dense_controller,
        &scene.observations,
        &base,
        &SearchConfig {
            iterations: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(z.config, base);
    assert_eq!(z.zero_order_curve.len(), 1);
    assert_eq!(z.final_loss, z.zero_order_curve[0]);
}

#[test]
fn stages_never_increase_the_loss() {
    for seed in 0..3 {
        let s = small_scene(seed, seed == 1);
        let rest = PointCloud::new(s.topology.object_rest_positions()).unwrap();
        let search = SearchConfig {
            iterations: 6,
            population: 6,
            seed,
            ..Default::default()
        };
        let z = fit_zero_order(&rest, &s.controller, &s.observations, &s.config, &search).unwrap();
        assert_eq!(FitResult::best_so_far(&z.zero_order_curve), z.zero_order_curve);
        assert!(z.final_loss <= z.zero_order_curve[0]);

        let opt = OptimConfig {
            iterations: 8,
            ..OptimConfig::first_order()
        };
        let f = fit_first_order(&z.topology, &z.config, &s.controller, &s.observations, &opt).unwrap();
        assert!(f.final_loss <= z.final_loss * (1.0 + 1e-12), "seed {seed}: {} > {}", f.final_loss, z.final_loss);
        assert!(f.final_loss <= f.first_order_curve[0]);

        let opt = OptimConfig {
            iterations: 5,
            ..OptimConfig::refinement()
        };
        let r = refine_controller(&f.topology, &f.config, &s.controller, &s.observations, &opt).unwrap();
        assert!(r.final_loss <= r.refine_curve[0]);
        assert!(r.refine_curve[0] <= f.final_loss * (1.0 + 1e-12));
    }
}

#[test]
fn zero_order_search_is_seeded() {
    let s = small_scene(5, false);
    let rest = PointCloud::new(s.topology.object_rest_positions()).unwrap();
    let run = |seed| {
        let search = SearchConfig {
            iterations: 5,
            population: 4,
            seed,
            ..Default::default()
        };
        fit_zero_order(&rest, &s.controller, &s.observations, &s.config, &search).unwrap()
    };
    let (a, b) = (run(11), run(11));
    assert_eq!(a, b);
    assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
}

#[test]
fn invalid_settings_are_rejected() {
    let s = small_scene(0, false);
    let rest = PointCloud::new(s.topology.object_rest_positions()).unwrap();
    let search = SearchConfig {
        population: 0,
        ..Default::default()
    };
    let e = fit_zero_order(&rest, &s.controller, &s.observations, &s.config, &search).unwrap_err();
    assert_eq!(e.kind(), "invalid_argument");
    let opt = OptimConfig {
        lr: -1.0,
        ..OptimConfig::first_order()
    };
    assert!(fit_first_order(&s.topology, &s.config, &s.controller, &s.observations, &opt).is_err());
}
