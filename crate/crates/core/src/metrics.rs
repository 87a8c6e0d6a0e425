//! Evaluation metrics: Chamfer distance over all points and over the
//! deforming region, track error, radius-to-resolution deviation and
//! contact-detection accuracy.
//!
//! Chamfer values are reported in millimetres with an RMS reduction:
//! `1000 · sqrt(mean_t chamfer_t / 2)` over frames 1.., where `chamfer_t` is
//! the symmetric mean-squared form in m². Frame 0 is the shared initial
//! state and is not scored.

use crate::error::{Error, Result};
use crate::fit::{ObservationSequence, TrackBinding};
use crate::geom::{auto_cell_size, ChamferMatches, NeighborIndex, PointCloud, Vec3};
use crate::model::{mean_resolution, SystemTopology};
use crate::sim::{ControllerTrajectory, Rollout};

/// Declared Chamfer reduction, stamped into every report.
pub const CD_REDUCTION: &str = "rms_mm: 1000*sqrt(mean_{t>=1}(chamfer_t)/2), chamfer_t = mean_sq(a->b) + mean_sq(b->a)";

/// Default motion threshold for the deforming set (m²).
pub const DEFAULT_TAU_DYN: f64 = 1e-4;

/// Reference radius-to-resolution ratio.
pub const REFERENCE_RATIO: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub reduction: String,
    pub cd_full_mm: f64,
    /// `None` when the deforming set is empty.
    pub cd_dyn_mm: Option<f64>,
    /// Mean track-to-node distance in metres ×100.
    pub track_error: f64,
    pub tau_dyn: f64,
    /// Per-frame `1000·sqrt(chamfer_t/2)`, frames 1...
    pub per_frame_cd_mm: Vec<f64>,
    /// Per-frame mean track distance ×100, frames 1...
    pub per_frame_track_error: Vec<f64>,
    /// Topology analyses, present when the report was made from a model.
    pub model: Option<ModelAnalysis>,
}

/// Radius deviation and contact accuracy of a fitted topology.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelAnalysis {
    /// RRD of the connection radius δ.
    pub rrd_object: f64,
    /// RRD of the longest virtual spring; `None` without virtual springs.
    pub rrd_virtual: Option<f64>,
    pub contact_accuracy_5mm: f64,
    pub contact_accuracy_10mm: f64,
    pub isolated_nodes: usize,
    pub virtual_springs: usize,
}

/// Object positions of every rollout frame.
pub fn object_frames(roll: &Rollout, num_object: usize) -> Vec<Vec<Vec3>> {
    (0..roll.frames.len()).map(|t| roll.object_positions(t, num_object).to_vec()).collect()
}

fn check_frames(sim: &[Vec<Vec3>], obs: &ObservationSequence) -> Result<()> {
    if sim.len() != obs.num_frames() {
        return Err(Error::FrameMismatch {
            expected: obs.num_frames(),
            found: sim.len(),
        });
    }
    if sim.len() < 2 {
        return Err(Error::InvalidArgument("need at least two frames".into()));
    }
    if sim.iter().any(|f| f.is_empty()) {
        return Err(Error::EmptyCloud);
    }
    Ok(())
}

fn index_of(points: &[Vec3]) -> Result<NeighborIndex> {
    NeighborIndex::from_points(points, auto_cell_size(points))
}

fn chamfer_points(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    Ok(ChamferMatches::compute(&index_of(a)?, &index_of(b)?).value())
}

fn to_mm(chamfer: f64) -> f64 {
    1000.0 * (chamfer / 2.0).sqrt()
}

/// Per-frame symmetric Chamfer (m²), frames 1...
pub fn chamfer_per_frame(sim: &[Vec<Vec3>], obs: &ObservationSequence) -> Result<Vec<f64>> {
    check_frames(sim, obs)?;
    (1..sim.len()).map(|t| chamfer_points(&sim[t], obs.clouds[t].points())).collect()
}

/// CD over all object points, in mm.
pub fn cd_full(sim: &[Vec<Vec3>], obs: &ObservationSequence) -> Result<f64> {
    let per = chamfer_per_frame(sim, obs)?;
    Ok(to_mm(per.iter().sum::<f64>() / per.len() as f64))
}

/// Tracks whose displacement from frame 0 ever exceeds `tau` (m²).
pub fn deforming_tracks(obs: &ObservationSequence, tau: f64) -> Vec<bool> {
    let t0 = &obs.tracks[0];
    (0..obs.num_tracks())
        .map(|k| obs.tracks.iter().any(|frame| (frame[k] - t0[k]).norm_squared() > tau))
        .collect()
}

fn nearest_track_mask(points: &[Vec3], tracks: &[Vec3], deforming: &[bool]) -> Result<Vec<bool>> {
    let index = index_of(tracks)?;
    Ok(points.iter().map(|p| deforming[index.nearest(p).0]).collect())
}

fn crop(points: &[Vec3], mask: &[bool]) -> Vec<Vec3> {
    points.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect()
}

/// CD restricted to the deforming region, in mm, or `None` when no track
/// moves more than `tau`. Observation points belong to the region when their
/// nearest track at that frame is deforming; simulated nodes when their
/// nearest track at frame 0 is. Frames where either cropped set is empty
/// are skipped.
pub fn cd_dyn(sim: &[Vec<Vec3>], obs: &ObservationSequence, tau: f64) -> Result<Option<f64>> {
    check_frames(sim, obs)?;
    if obs.num_tracks() == 0 {
        return Ok(None);
    }
    let deforming = deforming_tracks(obs, tau);
    if !deforming.iter().any(|&d| d) {
        return Ok(None);
    }
    let node_mask = nearest_track_mask(&sim[0], &obs.tracks[0], &deforming)?;
    let mut total = 0.0;
    let mut frames = 0usize;
    for t in 1..sim.len() {
        let obs_mask = nearest_track_mask(obs.clouds[t].points(), &obs.tracks[t], &deforming)?;
        let a = crop(&sim[t], &node_mask);
        let b = crop(obs.clouds[t].points(), &obs_mask);
        if a.is_empty() || b.is_empty() {
            continue;
        }
        total += chamfer_points(&a, &b)?;
        frames += 1;
    }
    Ok((frames > 0).then(|| to_mm(total / frames as f64)))
}

/// Per-frame mean distance (m) between tracks and their bound nodes,
/// frames 1... Bindings come from the simulated frame 0.
pub fn track_distance_per_frame(sim: &[Vec<Vec3>], obs: &ObservationSequence) -> Result<Vec<f64>> {
    check_frames(sim, obs)?;
    if obs.num_tracks() == 0 {
        return Ok(vec![0.0; sim.len() - 1]);
    }
    let binding = TrackBinding::new(&sim[0], &obs.tracks[0])?;
    Ok((1..sim.len())
        .map(|t| {
            binding
                .nodes
                .iter()
                .zip(&obs.tracks[t])
                .map(|(&n, p)| (sim[t][n] - p).norm())
                .sum::<f64>()
                / obs.num_tracks() as f64
        })
        .collect())
}

/// Mean track error over frames 1.., in metres ×100.
pub fn track_error(sim: &[Vec<Vec3>], obs: &ObservationSequence) -> Result<f64> {
    let per = track_distance_per_frame(sim, obs)?;
    Ok(100.0 * per.iter().sum::<f64>() / per.len() as f64)
}

/// `|(δ/Δx)/r − 1|` for a known resolution.
pub fn rrd_with_resolution(radius: f64, resolution: f64, ratio: f64) -> Result<f64> {
    if !(resolution.is_finite() && resolution > 0.0) {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::InvalidArgument("reference ratio must be positive".into()));
    }
    Ok(((radius / resolution) / ratio - 1.0).abs())
}

/// Radius-to-resolution deviation with Δx from the rest geometry.
pub fn rrd(radius: f64, object_rest: &PointCloud, ratio: f64) -> Result<f64> {
    rrd_with_resolution(radius, mean_resolution(object_rest)?, ratio)
}

/// Fraction of object nodes whose virtual-spring status agrees with the
/// proximity label `min controller distance < threshold`.
pub fn contact_accuracy(
    topology: &SystemTopology,
    controller_frame0: &PointCloud,
    object_frame0: &PointCloud,
    threshold: f64,
) -> Result<f64> {
    if object_frame0.len() != topology.num_object_nodes() {
        return Err(Error::InvalidArgument("object frame does not match topology".into()));
    }
    let index = NeighborIndex::with_auto_cell(controller_frame0)?;
    let predicted = topology.virtual_contact_mask();
    let correct = object_frame0
        .points()
        .iter()
        .zip(&predicted)
        .filter(|(p, &pred)| (index.nearest(p).1.sqrt() < threshold) == pred)
        .count();
    Ok(correct as f64 / object_frame0.len() as f64)
}

/// Mean per-node position error (m) between two trajectories of equal shape.
pub fn controller_error(a: &ControllerTrajectory, b: &ControllerTrajectory) -> Result<f64> {
    if a.num_frames() != b.num_frames() || a.num_nodes() != b.num_nodes() {
        return Err(Error::InvalidArgument("controller trajectories differ in shape".into()));
    }
    let total: f64 = a
        .frames()
        .iter()
        .zip(b.frames())
        .flat_map(|(fa, fb)| fa.iter().zip(fb).map(|(p, q)| (p - q).norm()))
        .sum();
    Ok(total / (a.num_frames() * a.num_nodes()) as f64)
}

/// Topology-dependent part of a report.
pub struct ModelContext<'a> {
    pub topology: &'a SystemTopology,
    pub connection_radius: f64,
    pub controller_frame0: &'a PointCloud,
}

/// RRD of δ and of the longest virtual spring, and contact accuracy at 5 and
/// 10 mm, with Δx from the topology's rest geometry.
pub fn analyze(m: &ModelContext) -> Result<ModelAnalysis> {
    let rest = PointCloud::new(m.topology.object_rest_positions())?;
    let dx = mean_resolution(&rest)?;
    Ok(ModelAnalysis {
        rrd_object: rrd_with_resolution(m.connection_radius, dx, REFERENCE_RATIO)?,
        rrd_virtual: m
            .topology
            .max_virtual_rest_length()
            .map(|r| rrd_with_resolution(r, dx, REFERENCE_RATIO))
            .transpose()?,
        contact_accuracy_5mm: contact_accuracy(m.topology, m.controller_frame0, &rest, 0.005)?,
        contact_accuracy_10mm: contact_accuracy(m.topology, m.controller_frame0, &rest, 0.010)?,
        isolated_nodes: m.topology.isolated_nodes().len(),
        virtual_springs: m.topology.virtual_springs().len(),
    })
}

/// Full report. Topology analyses are filled only when `model` is given.
pub fn evaluate(
    sim: &[Vec<Vec3>],
    obs: &ObservationSequence,
    tau_dyn: f64,
    model: Option<&ModelContext>,
) -> Result<EvalReport> {
    let per_cd = chamfer_per_frame(sim, obs)?;
    let per_track = track_distance_per_frame(sim, obs)?;
    Ok(EvalReport {
        reduction: CD_REDUCTION.to_string(),
        cd_full_mm: to_mm(per_cd.iter().sum::<f64>() / per_cd.len() as f64),
        cd_dyn_mm: cd_dyn(sim, obs, tau_dyn)?,
        track_error: 100.0 * per_track.iter().sum::<f64>() / per_track.len() as f64,
        tau_dyn,
        per_frame_cd_mm: per_cd.iter().map(|&c| to_mm(c)).collect(),
        per_frame_track_error: per_track.iter().map(|d| 100.0 * d).collect(),
        model: model.map(analyze).transpose()?,
    })
}
