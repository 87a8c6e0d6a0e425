mod common;

use common::{finite_difference_check, small_scene};

#[test]
fn adjoint_matches_finite_differences_in_free_space() {
    for seed in 0..5 {
        let scene = small_scene(seed, false);
        let out = finite_difference_check(&scene);
        assert!(out.failures.is_empty(), "seed {seed}: {:#?}", &out.failures[..out.failures.len().min(10)]);
        assert!(out.checked > 50);
    }
}

#[test]
fn adjoint_matches_finite_differences_with_ground_contact() {
    for seed in 10..13 {
        let scene = small_scene(seed, true);
        let out = finite_difference_check(&scene);
        assert!(out.failures.is_empty(), "seed {seed}: {:#?}", &out.failures[..out.failures.len().min(10)]);
    }
}
