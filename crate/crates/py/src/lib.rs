//! Python module `worldloop`.

use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use worldloop::camera::{action_to_trajectory, parse_action_script, CameraPose, Trajectory};
use worldloop::checkpoint::{load_model, save_model};
use worldloop::engine::{Session as CoreSession, SessionTemplate};
use worldloop::metrics::{self, DimensionMeans};
use worldloop::model::{ExpertConfig, ModelConfig, WorldModel};
use worldloop::service::{read_frame, write_frame};
use worldloop::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

type Pose = [f64; 7];

fn to_trajectory(poses: Vec<Pose>) -> PyResult<Trajectory> {
    let poses = poses
        .into_iter()
        .map(|p| CameraPose::from_components([p[0], p[1], p[2], p[3]], [p[4], p[5], p[6]]))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    Trajectory::new(poses).map_err(py_err)
}

fn from_trajectory(t: &Trajectory) -> Vec<Pose> {
    t.poses().iter().map(CameraPose::to_array).collect()
}

/// Parses `KEY duration [linear] [angular]` lines into segment dicts.
#[pyfunction]
fn parse_actions<'py>(py: Python<'py>, script: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &parse_action_script(script).map_err(py_err)?)
}

/// Poses `[qw, qx, qy, qz, px, py, pz]` from the identity pose through an action script.
#[pyfunction]
fn actions_to_poses(script: &str) -> PyResult<Vec<Pose>> {
    let segs = parse_action_script(script).map_err(py_err)?;
    let traj = action_to_trajectory(&segs, CameraPose::identity()).map_err(py_err)?;
    Ok(from_trajectory(&traj))
}

/// Sim3 aligning `est` onto `gt`: `(scale, [qw, qx, qy, qz], [tx, ty, tz])`.
#[pyfunction]
fn umeyama_align(est: Vec<Pose>, gt: Vec<Pose>) -> PyResult<(f64, [f64; 4], [f64; 3])> {
    let s = metrics::umeyama_align(&to_trajectory(est)?, &to_trajectory(gt)?).map_err(py_err)?;
    let q = s.rotation().quaternion();
    let t = s.translation();
    Ok((s.scale(), [q.w, q.i, q.j, q.k], [t.x, t.y, t.z]))
}

#[pyfunction]
#[pyo3(signature = (est, gt, delta=1, align=true))]
fn rpe<'py>(py: Python<'py>, est: Vec<Pose>, gt: Vec<Pose>, delta: usize, align: bool) -> PyResult<Bound<'py, PyAny>> {
    let (est, gt) = (to_trajectory(est)?, to_trajectory(gt)?);
    let r = if align {
        metrics::aligned_rpe(&est, &gt, delta).map_err(py_err)?.1
    } else {
        metrics::rpe(&est, &gt, delta).map_err(py_err)?
    };
    to_py(py, &r)
}

#[pyfunction]
fn interbench_overall(trigger: f64, align: f64, fluency: f64, scope: f64, end_state: f64, physics: f64) -> PyResult<f64> {
    metrics::interbench_overall(&DimensionMeans {
        trigger,
        align,
        fluency,
        scope,
        end_state,
        physics,
    })
    .map_err(py_err)
}

/// Per-category report from records CSV text.
#[pyfunction]
fn interbench_report<'py>(py: Python<'py>, csv_text: &str) -> PyResult<Bound<'py, PyAny>> {
    let records = metrics::read_records_csv(csv_text.as_bytes()).map_err(py_err)?;
    to_py(py, &metrics::aggregate_present(&records).map_err(py_err)?)
}

/// Wraps a JSON body in the 4-byte big-endian length prefix.
#[pyfunction]
fn encode_message<'py>(py: Python<'py>, body: &str) -> PyResult<Bound<'py, PyBytes>> {
    let mut buf = Vec::new();
    write_frame(&mut buf, body.as_bytes()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(PyBytes::new(py, &buf))
}

/// Splits one framed message off the front of `data`: `(body, rest)`.
#[pyfunction]
fn decode_message(data: &[u8]) -> PyResult<(String, Vec<u8>)> {
    let mut r = data;
    let body = read_frame(&mut r)
        .map_err(|e| PyValueError::new_err(e.to_string()))?
        .ok_or_else(|| PyValueError::new_err("no message in buffer"))?;
    let text = String::from_utf8(body).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((text, r.to_vec()))
}

/// Two-expert denoiser.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: Arc<WorldModel<f64>>,
}

#[pymethods]
impl PyModel {
    /// Randomly initialised model; `config` is a JSON object of model fields.
    #[new]
    #[pyo3(signature = (seed=0, config=None))]
    fn new(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = match config {
            Some(c) => serde_json::from_str(c).map_err(json_err)?,
            None => ModelConfig::default(),
        };
        let m = WorldModel::init(cfg, ExpertConfig::default(), seed).map_err(py_err)?;
        Ok(Self { inner: Arc::new(m) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(load_model(path).map_err(py_err)?),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }
}

/// Interactive rollout session.
#[pyclass(name = "Session", unsendable)]
struct PySession {
    inner: CoreSession<f64>,
}

#[pymethods]
impl PySession {
    /// `template` is a JSON session template; defaults match the default model.
    #[new]
    #[pyo3(signature = (model, seed=0, template=None))]
    fn new(model: &PyModel, seed: u64, template: Option<&str>) -> PyResult<Self> {
        let t: SessionTemplate = match template {
            Some(s) => serde_json::from_str(s).map_err(json_err)?,
            None => SessionTemplate::default(),
        };
        Ok(Self {
            inner: t.start(model.inner.clone(), seed).map_err(py_err)?,
        })
    }

    /// Generates the next block; returns `frames[frame][token][channel]`.
    fn rollout_block(&mut self) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let b = self.inner.rollout_block().map_err(py_err)?;
        Ok(b.frames
            .iter()
            .map(|f| (0..f.rows()).map(|r| f.row(r).to_vec()).collect())
            .collect())
    }

    /// Queues camera motion from an action script.
    fn switch_action(&mut self, script: &str) -> PyResult<()> {
        let segs = parse_action_script(script).map_err(py_err)?;
        self.inner.switch_action(&segs).map_err(py_err)
    }

    fn switch_prompt(&mut self, text: &str) -> PyResult<()> {
        self.inner.switch_prompt(text).map_err(py_err)
    }

    #[getter]
    fn next_block_index(&self) -> usize {
        self.inner.next_block_index()
    }

    fn trajectory(&self) -> Vec<Pose> {
        from_trajectory(self.inner.trajectory())
    }

    fn cache_state<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.cache().dump())
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.stats())
    }

    fn turn_log<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.turn_log())
    }
}

#[pymodule]
#[pyo3(name = "worldloop")]
fn worldloop_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(parse_actions, m)?)?;
    m.add_function(wrap_pyfunction!(actions_to_poses, m)?)?;
    m.add_function(wrap_pyfunction!(umeyama_align, m)?)?;
    m.add_function(wrap_pyfunction!(rpe, m)?)?;
    m.add_function(wrap_pyfunction!(interbench_overall, m)?)?;
    m.add_function(wrap_pyfunction!(interbench_report, m)?)?;
    m.add_function(wrap_pyfunction!(encode_message, m)?)?;
    m.add_function(wrap_pyfunction!(decode_message, m)?)?;
    Ok(())
}
