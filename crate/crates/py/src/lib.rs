use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use springtwin::cli::{run_fit, RunConfig, Stage};
use springtwin::fit::{refine_controller, FitResult, ObservationSequence};
use springtwin::geom::{chamfer as chamfer_rs, PointCloud, Vec3};
use springtwin::io;
use springtwin::metrics::{controller_error, evaluate, object_frames, EvalReport, ModelContext, DEFAULT_TAU_DYN};
use springtwin::model::PhysicsConfig;
use springtwin::scenegen::{generate, preset, ControllerKind, Scene, SceneSpec, PRESETS};
use springtwin::sim::{rollout, ControllerTrajectory, SimState};
use springtwin::Error;

type Point = (f64, f64, f64);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::Parse { .. }
        | Error::Schema(_)
        | Error::EmptyCloud
        | Error::NonFinitePoint(_)
        | Error::InsufficientPoints { .. }
        | Error::FrameMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(format!("{}: {e}", e.kind())),
    }
}

fn to_vec3(points: &[Point]) -> Vec<Vec3> {
    points.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect()
}

fn to_tuples(points: &[Vec3]) -> Vec<Point> {
    points.iter().map(|p| (p.x, p.y, p.z)).collect()
}

fn parse_controller(kind: &str) -> PyResult<ControllerKind> {
    kind.parse().map_err(py_err)
}

/// Global physical parameters.
#[pyclass(name = "PhysicsConfig", from_py_object)]
#[derive(Clone)]
struct PyPhysicsConfig {
    inner: PhysicsConfig,
}

#[pymethods]
impl PyPhysicsConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: PhysicsConfig::default(),
        }
    }

    #[getter]
    fn connection_radius(&self) -> f64 {
        self.inner.connection_radius
    }

    #[getter]
    fn max_degree(&self) -> usize {
        self.inner.max_degree
    }

    #[getter]
    fn global_stiffness(&self) -> f64 {
        self.inner.global_stiffness
    }

    #[getter]
    fn friction_retention(&self) -> f64 {
        self.inner.collision.friction_retention
    }

    #[getter]
    fn substeps(&self) -> usize {
        self.inner.substeps
    }

    fn __repr__(&self) -> String {
        format!(
            "PhysicsConfig(connection_radius={:?}, max_degree={}, global_stiffness={:?}, friction_retention={:?}, substeps={})",
            self.inner.connection_radius,
            self.inner.max_degree,
            self.inner.global_stiffness,
            self.inner.collision.friction_retention,
            self.inner.substeps
        )
    }
}

/// Observed clouds and tracks.
#[pyclass(name = "Observations", from_py_object)]
#[derive(Clone)]
struct PyObservations {
    inner: ObservationSequence,
}

#[pymethods]
impl PyObservations {
    #[getter]
    fn num_frames(&self) -> usize {
        self.inner.num_frames()
    }

    fn cloud(&self, t: usize) -> PyResult<Vec<Point>> {
        self.inner
            .clouds
            .get(t)
            .map(|c| to_tuples(c.points()))
            .ok_or_else(|| PyValueError::new_err("frame out of range"))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save(&path, &self.inner, "").map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load(&path).map_err(py_err)?.value,
        })
    }
}

/// Per-frame controller positions.
#[pyclass(name = "Controller", from_py_object)]
#[derive(Clone)]
struct PyController {
    inner: ControllerTrajectory,
}

#[pymethods]
impl PyController {
    #[getter]
    fn num_frames(&self) -> usize {
        self.inner.num_frames()
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    fn frame(&self, t: usize) -> PyResult<Vec<Point>> {
        if t >= self.inner.num_frames() {
            return Err(PyValueError::new_err("frame out of range"));
        }
        Ok(to_tuples(self.inner.frame(t)))
    }

    /// Mean per-node distance (m) to another trajectory of the same shape.
    fn error_to(&self, other: &PyController) -> PyResult<f64> {
        controller_error(&self.inner, &other.inner).map_err(py_err)
    }
}

/// A generated synthetic scene.
#[pyclass(name = "Scene", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: Scene,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn name(&self) -> String {
        self.inner.spec.name.clone()
    }

    #[getter]
    fn num_object_nodes(&self) -> usize {
        self.inner.rest.len()
    }

    #[getter]
    fn rest(&self) -> Vec<Point> {
        to_tuples(self.inner.rest.points())
    }

    #[getter]
    fn truth_config(&self) -> PyPhysicsConfig {
        PyPhysicsConfig {
            inner: self.inner.truth_config.clone(),
        }
    }

    #[getter]
    fn observations(&self) -> PyObservations {
        PyObservations {
            inner: self.inner.observations.clone(),
        }
    }

    #[getter]
    fn perturbed_controller(&self) -> PyController {
        PyController {
            inner: self.inner.perturbed_controller.clone(),
        }
    }

    /// `"dense"` or `"sparse:k"`.
    #[pyo3(signature = (kind = "dense"))]
    fn controller(&self, kind: &str) -> PyResult<PyController> {
        Ok(PyController {
            inner: self.inner.controller(parse_controller(kind)?).map_err(py_err)?,
        })
    }

    /// Object positions of the ground-truth model rolled out at the fitting
    /// substep count, per frame.
    fn simulate_truth(&self) -> PyResult<Vec<Vec<Point>>> {
        let s = &self.inner;
        let roll = rollout(&s.truth_topology, &s.truth_config, &s.dense_controller, &SimState::at_rest(&s.truth_topology))
            .map_err(py_err)?;
        Ok(object_frames(&roll, s.rest.len()).iter().map(|f| to_tuples(f)).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save(&path, &self.inner, "").map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load(&path).map_err(py_err)?.value,
        })
    }
}

/// A fitted model.
#[pyclass(name = "Fit", from_py_object)]
#[derive(Clone)]
struct PyFit {
    inner: FitResult,
}

#[pymethods]
impl PyFit {
    #[getter]
    fn config(&self) -> PyPhysicsConfig {
        PyPhysicsConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.inner.final_loss
    }

    #[getter]
    fn zero_order_curve(&self) -> Vec<f64> {
        self.inner.zero_order_curve.clone()
    }

    #[getter]
    fn first_order_curve(&self) -> Vec<f64> {
        self.inner.first_order_curve.clone()
    }

    #[getter]
    fn stiffness(&self) -> Vec<f64> {
        self.inner.topology.params().stiffness
    }

    #[getter]
    fn num_springs(&self) -> usize {
        self.inner.topology.springs().len()
    }

    #[getter]
    fn reverted(&self) -> bool {
        self.inner.reverted
    }

    /// Object positions of the fitted model's rollout, per frame.
    fn simulate(&self) -> PyResult<Vec<Vec<Point>>> {
        let f = &self.inner;
        let ctl = f.refined_controller.as_ref().unwrap_or(&f.controller);
        let roll = rollout(&f.topology, &f.config, ctl, &SimState::at_rest(&f.topology)).map_err(py_err)?;
        Ok(object_frames(&roll, f.topology.num_object_nodes()).iter().map(|f| to_tuples(f)).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save(&path, &self.inner, "").map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load(&path).map_err(py_err)?.value,
        })
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("reduction", &r.reduction)?;
    d.set_item("cd_full_mm", r.cd_full_mm)?;
    d.set_item("cd_dyn_mm", r.cd_dyn_mm)?;
    d.set_item("track_error", r.track_error)?;
    d.set_item("per_frame_cd_mm", r.per_frame_cd_mm.clone())?;
    if let Some(m) = &r.model {
        d.set_item("rrd_object", m.rrd_object)?;
        d.set_item("rrd_virtual", m.rrd_virtual)?;
        d.set_item("contact_accuracy_5mm", m.contact_accuracy_5mm)?;
        d.set_item("contact_accuracy_10mm", m.contact_accuracy_10mm)?;
    }
    Ok(d)
}

/// Names of the bundled scenes.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    PRESETS.to_vec()
}

/// Generates a scene from a bundled preset name or a TOML spec string.
#[pyfunction]
#[pyo3(signature = (preset_name = None, spec_toml = None, seed = None))]
fn generate_scene(preset_name: Option<&str>, spec_toml: Option<&str>, seed: Option<u64>) -> PyResult<PyScene> {
    let mut spec: SceneSpec = match (preset_name, spec_toml) {
        (Some(name), None) => preset(name).map_err(py_err)?,
        (None, Some(text)) => toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        _ => return Err(PyValueError::new_err("give exactly one of preset_name or spec_toml")),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(PyScene {
        inner: generate(&spec).map_err(py_err)?,
    })
}

/// Symmetric Chamfer distance (m²) between two point lists.
#[pyfunction]
fn chamfer(a: Vec<Point>, b: Vec<Point>) -> PyResult<f64> {
    let a = PointCloud::new(to_vec3(&a)).map_err(py_err)?;
    let b = PointCloud::new(to_vec3(&b)).map_err(py_err)?;
    chamfer_rs(&a, &b).map_err(py_err)
}

/// Fits a model to the scene's observations (or to `observations`).
#[pyfunction]
#[pyo3(signature = (scene, controller = "dense", stage = "all", zero_order_iters = None, first_order_iters = None, seed = 0, observations = None))]
fn fit(
    py: Python<'_>,
    scene: &PyScene,
    controller: &str,
    stage: &str,
    zero_order_iters: Option<usize>,
    first_order_iters: Option<usize>,
    seed: u64,
    observations: Option<&PyObservations>,
) -> PyResult<PyFit> {
    let mut cfg = RunConfig {
        controller: parse_controller(controller)?,
        seed,
        substeps: scene.inner.spec.substeps,
        stage: match stage {
            "all" => Stage::All,
            "zero-order" => Stage::ZeroOrder,
            "first-order" => Stage::FirstOrder,
            s => return Err(PyValueError::new_err(format!("unknown stage `{s}`"))),
        },
        ..RunConfig::default()
    };
    if let Some(n) = zero_order_iters {
        cfg.zero_order_iters = n;
    }
    if let Some(n) = first_order_iters {
        cfg.first_order_iters = n;
    }
    let obs = observations.map_or(&scene.inner.observations, |o| &o.inner);
    let result = py.detach(|| run_fit(&scene.inner, obs, &cfg, None));
    result
        .map(|inner| PyFit { inner })
        .map_err(|(stage, e)| PyRuntimeError::new_err(format!("{stage}: {}: {e}", e.kind())))
}

/// Refines `controller` against a fitted model; returns the best trajectory.
#[pyfunction]
#[pyo3(signature = (fit, controller, observations, iterations = 40))]
fn refine(
    py: Python<'_>,
    fit: &PyFit,
    controller: &PyController,
    observations: &PyObservations,
    iterations: usize,
) -> PyResult<PyController> {
    let opt = RunConfig {
        refine_iters: iterations,
        ..RunConfig::default()
    }
    .refinement();
    let f = &fit.inner;
    let out = py
        .detach(|| refine_controller(&f.topology, &f.config, &controller.inner, &observations.inner, &opt))
        .map_err(py_err)?;
    Ok(PyController {
        inner: out.refined_controller.expect("refinement sets the controller"),
    })
}

/// Metrics of a fitted model against observations, as a dict.
#[pyfunction]
#[pyo3(signature = (fit, observations, tau_dyn = DEFAULT_TAU_DYN))]
fn evaluate_fit<'py>(
    py: Python<'py>,
    fit: &PyFit,
    observations: &PyObservations,
    tau_dyn: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let f = &fit.inner;
    let ctl = f.refined_controller.as_ref().unwrap_or(&f.controller);
    let roll = rollout(&f.topology, &f.config, ctl, &SimState::at_rest(&f.topology)).map_err(py_err)?;
    let frame0 = f.controller.frame_cloud(0);
    let ctx = ModelContext {
        topology: &f.topology,
        connection_radius: f.config.connection_radius,
        controller_frame0: &frame0,
    };
    let sim = object_frames(&roll, f.topology.num_object_nodes());
    let report = evaluate(&sim, &observations.inner, tau_dyn, Some(&ctx)).map_err(py_err)?;
    report_dict(py, &report)
}

#[pymodule(name = "springtwin")]
fn springtwin_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPhysicsConfig>()?;
    m.add_class::<PyObservations>()?;
    m.add_class::<PyController>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyFit>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(refine, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_fit, m)?)?;
    Ok(())
}
