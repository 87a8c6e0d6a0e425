use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{FitResult, ObservationSequence, DEFAULT_LAMBDA_TR};
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::grad::{evaluate_loss, Objective};
use crate::model::{build_object_springs, build_topology, PhysicsConfig};
use crate::sim::ControllerTrajectory;

/// Box constraints of the zero-order search.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchBounds {
    pub connection_radius: (f64, f64),
    pub max_degree: (usize, usize),
    pub global_stiffness: (f64, f64),
    pub friction_retention: (f64, f64),
}

impl Default for SearchBounds {
    fn default() -> Self {
        Self {
            connection_radius: (1e-4, 0.1),
            max_degree: (1, 50),
            global_stiffness: (1.0, 1e5),
            friction_retention: (0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub iterations: usize,
    /// Candidates sampled per iteration.
    pub population: usize,
    pub seed: u64,
    pub bounds: SearchBounds,
    pub lambda_tr: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            population: 32,
            seed: 0,
            bounds: SearchBounds::default(),
            lambda_tr: DEFAULT_LAMBDA_TR,
        }
    }
}

/// Initial per-dimension step as a fraction of the search range.
const INITIAL_STEP: f64 = 0.25;
/// Iterations without improvement before the search restarts.
const STALL_LIMIT: usize = 10;
/// Leading iterations that sample the whole box uniformly.
const EXPLORE_FRACTION: f64 = 0.1;

// Search coordinates: [ln δ, d_max, ln k, per-frame friction retention].
//
// k = s_global × mean object-spring degree is the stiffness per node. Adding
// springs at lower stiffness gives a similar material, so in (d_max, s) the
// good configurations lie along curves of constant k; searching k makes a
// step in d_max keep the overall stiffness instead of leaving the valley.
//
// Retention is applied every substep, so the per-substep value μ maps to
// μ^substeps per frame; searching the per-frame value keeps the coordinate
// independent of the substep count and spreads the nearly frictionless range
// (μ close to 1) over most of the interval.
const DIM: usize = 4;

struct Space<'a> {
    lo: [f64; DIM],
    hi: [f64; DIM],
    substeps: i32,
    stiffness: (f64, f64),
    rest: &'a PointCloud,
}

/// Mean object-spring degree of the topology for `radius` and `max_degree`,
/// at least 1.
fn mean_degree(rest: &PointCloud, radius: f64, max_degree: usize) -> f64 {
    build_object_springs(rest, radius, max_degree, 1.0).map_or(1.0, |t| {
        (2.0 * t.object_springs().len() as f64 / t.num_object_nodes() as f64).max(1.0)
    })
}

impl<'a> Space<'a> {
    fn new(b: &SearchBounds, substeps: usize, rest: &'a PointCloud) -> Result<Self> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !(ok(b.connection_radius.0, b.connection_radius.1) && b.connection_radius.0 > 0.0)
            || !(ok(b.global_stiffness.0, b.global_stiffness.1) && b.global_stiffness.0 > 0.0)
            || !ok(b.friction_retention.0, b.friction_retention.1)
            || b.friction_retention.0 < 0.0
            || b.friction_retention.1 > 1.0
            || b.max_degree.0 < 1
            || b.max_degree.0 > b.max_degree.1
        {
            return Err(Error::InvalidArgument("invalid search bounds".into()));
        }
        let substeps = i32::try_from(substeps).map_err(|_| Error::InvalidArgument("substep count too large".into()))?;
        Ok(Self {
            lo: [
                b.connection_radius.0.ln(),
                b.max_degree.0 as f64,
                b.global_stiffness.0.ln(),
                b.friction_retention.0.powi(substeps),
            ],
            hi: [
                b.connection_radius.1.ln(),
                b.max_degree.1 as f64,
                (b.global_stiffness.1 * b.max_degree.1 as f64).ln(),
                b.friction_retention.1.powi(substeps),
            ],
            substeps,
            stiffness: b.global_stiffness,
            rest,
        })
    }

    fn encode(&self, c: &PhysicsConfig) -> [f64; DIM] {
        let raw = [
            c.connection_radius.ln(),
            c.max_degree as f64,
            (c.global_stiffness * mean_degree(self.rest, c.connection_radius, c.max_degree)).ln(),
            c.collision.friction_retention.powi(self.substeps),
        ];
        std::array::from_fn(|d| raw[d].clamp(self.lo[d], self.hi[d]))
    }

    fn decode(&self, x: &[f64; DIM], base: &PhysicsConfig) -> PhysicsConfig {
        let mut c = base.clone();
        c.connection_radius = x[0].exp();
        c.max_degree = (x[1].round() as usize).max(1);
        let k = x[2].exp();
        c.global_stiffness = (k / mean_degree(self.rest, c.connection_radius, c.max_degree))
            .clamp(self.stiffness.0, self.stiffness.1);
        c.collision.friction_retention = x[3].powf(1.0 / self.substeps as f64);
        c
    }

    fn range(&self, d: usize) -> f64 {
        self.hi[d] - self.lo[d]
    }
}

fn describe(c: &PhysicsConfig) -> String {
    format!(
        "(delta={:?}, d_max={}, s={:?}, friction={:?})",
        c.connection_radius, c.max_degree, c.global_stiffness, c.collision.friction_retention
    )
}

/// Adaptive Gaussian search over the global parameters with homogeneous
/// spring stiffness. The first tenth of the iterations samples the bounds
/// uniformly; the local search then starts from the best of those samples and
/// `base_config`. Each iteration samples `population` candidates around the
/// incumbent and moves to the best one if it improves the loss. Step sizes
/// grow per dimension after a success and shrink after a failure. A run that
/// stalls restarts from the next best exploration sample (or `base_config`);
/// the best configuration over all runs is returned.
/// Candidates whose topology has no contact or whose rollout diverges score
/// infinity.
pub fn fit_zero_order(
    object_rest: &PointCloud,
    controller: &ControllerTrajectory,
    observations: &ObservationSequence,
    base_config: &PhysicsConfig,
    search: &SearchConfig,
) -> Result<FitResult> {
    base_config.validate()?;
    if search.population == 0 {
        return Err(Error::InvalidArgument("population must be positive".into()));
    }
    let space = Space::new(&search.bounds, base_config.substeps, object_rest)?;
    let objective = Objective::new(observations, object_rest.points(), search.lambda_tr)?;
    let frame0 = controller.frame_cloud(0);
    let eval_config = |cfg: &PhysicsConfig| -> f64 {
        build_topology(object_rest, &frame0, cfg)
            .and_then(|topo| evaluate_loss(&topo, cfg, controller, &objective))
            .map_or(f64::INFINITY, |l| if l.is_finite() { l } else { f64::INFINITY })
    };

    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    let start = space.encode(base_config);
    let start_loss = eval_config(base_config);
    let mut best_config = base_config.clone();
    let mut best_loss = start_loss;
    // incumbent of the current local run; the overall best survives restarts
    let mut x_cur = start;
    let mut cur_loss = start_loss;
    let mut stall = 0;
    // unused restart points from the exploration phase, best last
    let mut starts: Vec<([f64; DIM], f64)> = vec![];
    let mut tried = vec![describe(base_config)];
    let mut curve = vec![best_loss];
    let sigma_min: [f64; DIM] = std::array::from_fn(|d| 1e-3 * space.range(d).max(1e-12));
    let sigma_max: [f64; DIM] = std::array::from_fn(|d| (0.5 * space.range(d)).max(sigma_min[d]));
    let sigma0: [f64; DIM] = std::array::from_fn(|d| (INITIAL_STEP * space.range(d)).clamp(sigma_min[d], sigma_max[d]));
    let mut sigma = sigma0;

    let explore = (EXPLORE_FRACTION * search.iterations as f64).round() as usize;
    for it in 0..search.iterations {
        let exploring = it < explore;
        let candidates: Vec<([f64; DIM], [f64; DIM])> = (0..search.population)
            .map(|_| {
                let xi: [f64; DIM] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let x = if exploring {
                    std::array::from_fn(|d| space.lo[d] + rng.random::<f64>() * space.range(d))
                } else {
                    std::array::from_fn(|d| (x_cur[d] + sigma[d] * xi[d]).clamp(space.lo[d], space.hi[d]))
                };
                (x, xi)
            })
            .collect();
        let losses: Vec<f64> = candidates
            .par_iter()
            .map(|(x, _)| eval_config(&space.decode(x, base_config)))
            .collect();
        if tried.len() < 64 {
            tried.extend(candidates.iter().map(|(x, _)| describe(&space.decode(x, base_config))));
        }
        if exploring {
            for (c, &l) in candidates.iter().zip(&losses) {
                if l < best_loss {
                    best_config = space.decode(&c.0, base_config);
                    best_loss = l;
                }
                if l.is_finite() {
                    starts.push((c.0, l));
                }
            }
            if it + 1 == explore {
                starts.sort_by(|a, b| b.1.total_cmp(&a.1));
                if let Some((x, l)) = starts.pop().filter(|s| s.1 < cur_loss) {
                    x_cur = x;
                    cur_loss = l;
                }
            }
            curve.push(best_loss);
            continue;
        }
        let (winner, &win_loss) = losses
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
            .expect("non-empty population");
        if win_loss < cur_loss {
            let xi = candidates[winner].1;
            x_cur = candidates[winner].0;
            cur_loss = win_loss;
            stall = 0;
            if win_loss < best_loss {
                best_config = space.decode(&x_cur, base_config);
                best_loss = win_loss;
            }
            for d in 0..DIM {
                sigma[d] = (sigma[d] * 1.25 * (0.3 * (xi[d].abs() - 0.8)).exp()).clamp(sigma_min[d], sigma_max[d]);
            }
        } else if cur_loss.is_finite() {
            stall += 1;
            if stall >= STALL_LIMIT {
                (x_cur, cur_loss) = starts.pop().unwrap_or((start, start_loss));
                sigma = sigma0;
                stall = 0;
            } else {
                for d in 0..DIM {
                    sigma[d] = (sigma[d] * 0.85).max(sigma_min[d]);
                }
            }
        } else {
            // nothing valid yet: widen the search
            for d in 0..DIM {
                sigma[d] = (sigma[d] * 1.25).min(sigma_max[d]);
            }
        }
        curve.push(best_loss);
    }

    if !best_loss.is_finite() {
        return Err(Error::AllCandidatesFailed(tried.join(", ")));
    }
    let config = best_config;
    let topology = build_topology(object_rest, &frame0, &config)?;
    Ok(FitResult {
        config,
        topology,
        controller: controller.clone(),
        final_loss: best_loss,
        zero_order_curve: curve,
        first_order_curve: vec![],
        refine_curve: vec![],
        refined_controller: None,
        seed: search.seed,
        reverted: false,
    })
}
