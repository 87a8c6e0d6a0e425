use super::{Adam, FitResult, ObservationSequence, DEFAULT_LAMBDA_TR};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::grad::{evaluate_loss, loss_and_grad, Objective};
use crate::model::{PhysicsConfig, SpringParams, SystemTopology};
use crate::sim::ControllerTrajectory;

/// Gradient-stage settings.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay per step.
    pub decay: f64,
    pub lambda_tr: f64,
}

impl OptimConfig {
    /// Per-spring parameter stage: 200 steps at 1e-3.
    pub fn first_order() -> Self {
        Self {
            iterations: 200,
            lr: 1e-3,
            decay: 1.0,
            lambda_tr: DEFAULT_LAMBDA_TR,
        }
    }

    /// Controller refinement: 40 steps at 2e-5, decayed by 0.99 per step.
    pub fn refinement() -> Self {
        Self {
            iterations: 40,
            lr: 2e-5,
            decay: 0.99,
            lambda_tr: DEFAULT_LAMBDA_TR,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.decay.is_finite() && self.decay > 0.0) {
            return Err(Error::InvalidArgument("learning rate and decay must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::first_order()
    }
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Diverged { .. } | Error::NonFiniteGradient(_) | Error::NonFiniteControllerGradient { .. }
    )
}

/// Adam over per-spring `ln s` and `ln γ`, starting from the topology's
/// current parameters. Returns the best iterate seen. If an iterate diverges
/// the last valid one is kept, the result is flagged and the loop stops.
pub fn fit_first_order(
    topology: &SystemTopology,
    config: &PhysicsConfig,
    controller: &ControllerTrajectory,
    observations: &ObservationSequence,
    opt: &OptimConfig,
) -> Result<FitResult> {
    opt.validate()?;
    let objective = Objective::new(observations, &topology.object_rest_positions(), opt.lambda_tr)?;
    let x0 = topology.params().to_log();
    let mut x = x0.clone();
    let mut adam = Adam::new(x.len(), opt.lr).with_decay(opt.decay);
    let mut curve = Vec::with_capacity(opt.iterations + 1);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut reverted = false;

    for it in 0..=opt.iterations {
        let topo = if x == x0 {
            topology.clone()
        } else {
            topology.with_params(&SpringParams::from_log(&x))?
        };
        let report = if it == opt.iterations {
            evaluate_loss(&topo, config, controller, &objective).map(|l| (l, None))
        } else {
            loss_and_grad(&topo, config, controller, &objective).map(|r| (r.loss, Some(r.log_param_gradient())))
        };
        let (loss, grad) = match report {
            Ok(v) => v,
            Err(e) if it > 0 && is_numeric_failure(&e) => {
                reverted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        curve.push(loss);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, x.clone()));
        }
        if let Some(g) = grad {
            adam.step(&mut x, &g);
        }
    }

    let (final_loss, x) = best.expect("initial iterate evaluated");
    Ok(FitResult {
        config: config.clone(),
        topology: if x == x0 {
            topology.clone()
        } else {
            topology.with_params(&SpringParams::from_log(&x))?
        },
        controller: controller.clone(),
        final_loss,
        zero_order_curve: vec![],
        first_order_curve: curve,
        refine_curve: vec![],
        refined_controller: None,
        seed: 0,
        reverted,
    })
}

fn flatten(frames: &[Vec<Vec3>]) -> Vec<f64> {
    frames.iter().flatten().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflatten(x: &[f64], nodes: usize) -> Vec<Vec<Vec3>> {
    x.chunks(3 * nodes)
        .map(|f| f.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
        .collect()
}

/// Adam over raw controller positions (every frame) with the object model
/// held fixed. The topology, including virtual-spring rest lengths, is not
/// rebuilt. Returns the best trajectory seen in `refined_controller`.
pub fn refine_controller(
    topology: &SystemTopology,
    config: &PhysicsConfig,
    controller_init: &ControllerTrajectory,
    observations: &ObservationSequence,
    opt: &OptimConfig,
) -> Result<FitResult> {
    opt.validate()?;
    let objective = Objective::new(observations, &topology.object_rest_positions(), opt.lambda_tr)?;
    let nodes = controller_init.num_nodes();
    let mut x = flatten(controller_init.frames());
    let mut adam = Adam::new(x.len(), opt.lr).with_decay(opt.decay);
    let mut curve = Vec::with_capacity(opt.iterations + 1);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut reverted = false;

    for it in 0..=opt.iterations {
        let ctl = controller_init.with_frames(unflatten(&x, nodes))?;
        let report = if it == opt.iterations {
            evaluate_loss(topology, config, &ctl, &objective).map(|l| (l, None))
        } else {
            loss_and_grad(topology, config, &ctl, &objective).map(|r| (r.loss, Some(flatten(&r.d_controller))))
        };
        let (loss, grad) = match report {
            Ok(v) => v,
            Err(e) if it > 0 && is_numeric_failure(&e) => {
                reverted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        curve.push(loss);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, x.clone()));
        }
        if let Some(g) = grad {
            adam.step(&mut x, &g);
        }
    }

    let (final_loss, x) = best.expect("initial iterate evaluated");
    let refined = if x == flatten(controller_init.frames()) {
        controller_init.clone()
    } else {
        controller_init.with_frames(unflatten(&x, nodes))?
    };
    Ok(FitResult {
        config: config.clone(),
        topology: topology.clone(),
        controller: controller_init.clone(),
        final_loss,
        zero_order_curve: vec![],
        first_order_curve: vec![],
        refine_curve: curve,
        refined_controller: Some(refined),
        seed: 0,
        reverted,
    })
}
