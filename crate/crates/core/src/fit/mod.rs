//! Hierarchical identification: zero-order search over the global
//! parameters, first-order refinement of per-spring parameters, and
//! controller-trajectory refinement through the simulator's gradients.

mod adam;
mod first_order;
mod zero_order;

pub use adam::Adam;
pub use first_order::{fit_first_order, refine_controller, OptimConfig};
pub use zero_order::{fit_zero_order, SearchBounds, SearchConfig};

use crate::error::{Error, Result};
use crate::geom::{dist2, NeighborIndex, PointCloud, Vec3};
use crate::model::{PhysicsConfig, SystemTopology};
use crate::sim::ControllerTrajectory;

/// Default weight of the tracking term.
pub const DEFAULT_LAMBDA_TR: f64 = 1.0;

/// Observed point clouds and identity-preserving tracks, one entry per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSequence {
    pub frame_dt: f64,
    pub clouds: Vec<PointCloud>,
    /// `tracks[t][k]`: position of track `k` at frame `t`.
    pub tracks: Vec<Vec<Vec3>>,
}

impl ObservationSequence {
    pub fn new(frame_dt: f64, clouds: Vec<PointCloud>, tracks: Vec<Vec<Vec3>>) -> Result<Self> {
        if clouds.len() != tracks.len() {
            return Err(Error::FrameMismatch {
                expected: clouds.len(),
                found: tracks.len(),
            });
        }
        if clouds.is_empty() || clouds.iter().any(|c| c.is_empty()) {
            return Err(Error::EmptyCloud);
        }
        let k = tracks[0].len();
        if tracks.iter().any(|t| t.len() != k) {
            return Err(Error::InvalidArgument("track count must be constant across frames".into()));
        }
        if !(frame_dt.is_finite() && frame_dt > 0.0) {
            return Err(Error::InvalidArgument("frame dt must be positive".into()));
        }
        Ok(Self {
            frame_dt,
            clouds,
            tracks,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.clouds.len()
    }

    pub fn num_tracks(&self) -> usize {
        self.tracks[0].len()
    }
}

/// Each track's object node, fixed at frame 0 by nearest neighbor (ties to
/// the lower node index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrackBinding {
    pub nodes: Vec<usize>,
}

impl TrackBinding {
    pub fn new(object_frame0: &[Vec3], tracks_frame0: &[Vec3]) -> Result<Self> {
        if tracks_frame0.is_empty() {
            return Ok(Self { nodes: vec![] });
        }
        let index = NeighborIndex::from_points(object_frame0, crate::geom::auto_cell_size(object_frame0))?;
        Ok(Self {
            nodes: tracks_frame0.iter().map(|p| index.nearest(p).0).collect(),
        })
    }
}

/// Mean squared distance (m²) between each track and its bound node.
pub fn track_loss(object_positions: &[Vec3], tracks_t: &[Vec3], binding: &TrackBinding) -> f64 {
    if tracks_t.is_empty() {
        return 0.0;
    }
    binding
        .nodes
        .iter()
        .zip(tracks_t)
        .map(|(&n, p)| dist2(&object_positions[n], p))
        .sum::<f64>()
        / tracks_t.len() as f64
}

/// Output of one or more fitting stages.
#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    /// Fitted global parameters (and the integration constants used).
    pub config: PhysicsConfig,
    /// Topology carrying the fitted per-spring parameters.
    pub topology: SystemTopology,
    /// Controller trajectory the model was fitted with.
    pub controller: ControllerTrajectory,
    pub final_loss: f64,
    pub zero_order_curve: Vec<f64>,
    pub first_order_curve: Vec<f64>,
    pub refine_curve: Vec<f64>,
    /// Set by the refinement stage.
    pub refined_controller: Option<ControllerTrajectory>,
    pub seed: u64,
    /// An optimizer step diverged and the last valid iterate was kept.
    pub reverted: bool,
}

impl FitResult {
    /// Running minimum of a loss curve.
    pub fn best_so_far(curve: &[f64]) -> Vec<f64> {
        curve
            .iter()
            .scan(f64::INFINITY, |best, &v| {
                *best = best.min(v);
                Some(*best)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn track_loss_hand_values() {
        let nodes = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)];
        let tracks0 = vec![Vec3::new(0.9, 0.0, 0.0)];
        let b = TrackBinding::new(&nodes, &tracks0).unwrap();
        assert_eq!(b.nodes, vec![1]);
        let moved = vec![Vec3::zeros(), Vec3::new(1.003, 0.0, 0.0)];
        let l = track_loss(&moved, &[Vec3::new(1.0, 0.0, 0.0)], &b);
        assert!((l - 9e-6).abs() < 1e-18);
        assert_eq!(track_loss(&nodes, &[Vec3::new(1.0, 0.0, 0.0)], &b), 0.0);
    }

    #[test]
    fn binding_ties_go_to_lower_index() {
        let nodes = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)];
        let b = TrackBinding::new(&nodes, &[Vec3::zeros()]).unwrap();
        assert_eq!(b.nodes, vec![0]);
    }

    #[test]
    fn track_loss_matches_explicit_bindings() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let nodes: Vec<Vec3> = (0..40).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let tracks0: Vec<Vec3> = (0..15).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let b = TrackBinding::new(&nodes, &tracks0).unwrap();
            let explicit: Vec<usize> = tracks0
                .iter()
                .map(|t| {
                    (0..nodes.len())
                        .min_by(|&a, &c| dist2(&nodes[a], t).total_cmp(&dist2(&nodes[c], t)).then(a.cmp(&c)))
                        .unwrap()
                })
                .collect();
            assert_eq!(b.nodes, explicit);
            let moved: Vec<Vec3> = nodes.iter().map(|p| p * 1.1).collect();
            let tracks1: Vec<Vec3> = tracks0.iter().map(|p| p * 0.9).collect();
            let want = explicit.iter().zip(&tracks1).map(|(&n, t)| (moved[n] - t).norm_squared()).sum::<f64>() / 15.0;
            assert!((track_loss(&moved, &tracks1, &b) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn observation_shape_checks() {
        let c = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        assert!(ObservationSequence::new(0.1, vec![c.clone()], vec![]).is_err());
        assert!(ObservationSequence::new(0.1, vec![c.clone(), c.clone()], vec![vec![], vec![Vec3::zeros()]]).is_err());
        assert!(ObservationSequence::new(0.1, vec![c.clone(), c], vec![vec![], vec![]]).is_ok());
    }

    #[test]
    fn best_so_far_is_monotone() {
        assert_eq!(FitResult::best_so_far(&[3.0, 4.0, 2.0, 5.0]), vec![3.0, 3.0, 2.0, 2.0]);
    }
}
