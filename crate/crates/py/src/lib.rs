//! Python bindings: boxes, configuration, weights, the tracker, metrics,
//! scenario presets and the self-check.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;

use mt3d::evalbench::{flops_attention_baseline, precision_auc, success_auc};
use mt3d::geometry::{center_error, iou3d};
use mt3d::mip::flops_mip;
use mt3d::ssm::{lti_scan as lti_scan_core, zoh_discretize as zoh_core, DiscreteLti, LtiSystem};
use mt3d::synthgen::{generate, preset, PRESET_NAMES};
use mt3d::tracker::TrackerState;
use mt3d::weights::{ModelWeights, WeightsFile};
use mt3d::{Box7, Cloud, Point3};

fn to_py(e: mt3d::Error) -> PyErr {
    match e {
        mt3d::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cloud_from(points: Vec<Vec<f64>>) -> PyResult<Cloud> {
    let mut pts = Vec::with_capacity(points.len());
    let mut intensity = Vec::new();
    for (i, p) in points.iter().enumerate() {
        match p.len() {
            3 | 4 => pts.push(Point3::new(p[0], p[1], p[2])),
            n => return Err(PyValueError::new_err(format!("point {i} has {n} values, expected 3 or 4"))),
        }
        if p.len() == 4 {
            intensity.push(p[3]);
        }
    }
    if intensity.is_empty() {
        Ok(Cloud::new(pts))
    } else if intensity.len() == pts.len() {
        Cloud::with_intensity(pts, intensity).map_err(to_py)
    } else {
        Err(PyValueError::new_err("either every point or none carries an intensity"))
    }
}

fn cloud_to(c: &Cloud) -> Vec<Vec<f64>> {
    c.points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut v = vec![p.x, p.y, p.z];
            if let Some(int) = &c.intensity {
                v.push(int[i]);
            }
            v
        })
        .collect()
}

/// Oriented 3D box (center, size w/l/h, yaw).
#[pyclass(name = "Box", module = "mt3d_py", from_py_object)]
#[derive(Clone)]
pub struct PyBox {
    inner: Box7,
}

#[pymethods]
impl PyBox {
    #[new]
    fn new(cx: f64, cy: f64, cz: f64, w: f64, l: f64, h: f64, theta: f64) -> PyResult<Self> {
        Box7::try_new(Point3::new(cx, cy, cz), w, l, h, theta)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[getter]
    fn center(&self) -> (f64, f64, f64) {
        (self.inner.cx, self.inner.cy, self.inner.cz)
    }

    #[getter]
    fn size(&self) -> (f64, f64, f64) {
        (self.inner.w, self.inner.l, self.inner.h)
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta
    }

    fn iou(&self, other: &PyBox) -> f64 {
        iou3d(&self.inner, &other.inner)
    }

    fn center_error(&self, other: &PyBox) -> f64 {
        center_error(&self.inner, &other.inner)
    }

    #[pyo3(signature = (x, y, z, margin = 0.0))]
    fn contains(&self, x: f64, y: f64, z: f64, margin: f64) -> bool {
        self.inner.contains(Point3::new(x, y, z), margin)
    }

    fn to_list(&self) -> Vec<f64> {
        let b = &self.inner;
        vec![b.cx, b.cy, b.cz, b.w, b.l, b.h, b.theta]
    }

    fn __repr__(&self) -> String {
        let b = &self.inner;
        format!(
            "Box(cx={}, cy={}, cz={}, w={}, l={}, h={}, theta={})",
            b.cx, b.cy, b.cz, b.w, b.l, b.h, b.theta
        )
    }
}

/// Model configuration; fields are exchanged as JSON.
#[pyclass(name = "Config", module = "mt3d_py", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: mt3d::Config,
}

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overridden by a JSON object.
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner: mt3d::Config = match json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => mt3d::Config::default(),
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn small() -> Self {
        Self {
            inner: mt3d::Config::small(),
        }
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("plain data")
    }

    #[getter]
    fn tokens(&self) -> usize {
        self.inner.tokens
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn memory_size(&self) -> usize {
        self.inner.memory_size
    }

    #[getter]
    fn neighbors(&self) -> usize {
        self.inner.neighbors
    }
}

#[pyclass(name = "Weights", module = "mt3d_py")]
pub struct PyWeights {
    config: mt3d::Config,
    weights: Arc<ModelWeights>,
}

#[pymethods]
impl PyWeights {
    /// Seeded initialization.
    #[staticmethod]
    #[pyo3(signature = (config, seed = 0))]
    fn init(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            config: config.inner.clone(),
            weights: Arc::new(ModelWeights::init(&config.inner, seed).map_err(to_py)?),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let f = WeightsFile::load(&path).map_err(to_py)?;
        Ok(Self {
            config: f.config,
            weights: Arc::new(f.weights),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        WeightsFile::new(self.config.clone(), (*self.weights).clone())
            .save(&path)
            .map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.config.clone(),
        }
    }

    fn parameter_count(&self) -> usize {
        self.weights.parameter_count()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.weights.tensors().into_iter().map(|(n, _)| n).collect()
    }
}

/// Online tracker: initialize with the first frame and its box, then step.
#[pyclass(name = "Tracker", module = "mt3d_py")]
pub struct PyTracker {
    state: TrackerState,
}

#[pymethods]
impl PyTracker {
    #[new]
    fn new(weights: &PyWeights, points: Vec<Vec<f64>>, first_box: &PyBox) -> PyResult<Self> {
        let state = TrackerState::init(&cloud_from(points)?, first_box.inner, &weights.config, Arc::clone(&weights.weights))
            .map_err(to_py)?;
        Ok(Self { state })
    }

    /// Track one frame; returns the predicted box.
    fn step(&mut self, points: Vec<Vec<f64>>) -> PyResult<PyBox> {
        let out = self.state.step(&cloud_from(points)?).map_err(to_py)?;
        Ok(PyBox { inner: out.predicted })
    }

    #[getter]
    fn current_box(&self) -> PyBox {
        PyBox {
            inner: self.state.current_box,
        }
    }

    #[getter]
    fn frame_index(&self) -> u64 {
        self.state.frame_index
    }

    #[getter]
    fn memory_frames(&self) -> usize {
        self.state.bank.len()
    }
}

#[pyfunction]
fn iou(a: &PyBox, b: &PyBox) -> f64 {
    iou3d(&a.inner, &b.inner)
}

/// Zero-order hold of a diagonal system; returns `(a_bar, b_bar)`.
#[pyfunction]
fn zoh_discretize(a: Vec<f64>, b: Vec<f64>, delta: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let d = zoh_core(&LtiSystem { a, b, delta }).map_err(to_py)?;
    Ok((d.a_bar, d.b_bar))
}

#[pyfunction]
fn lti_scan(a_bar: Vec<f64>, b_bar: Vec<f64>, c: Vec<f64>, x: Vec<f64>) -> PyResult<Vec<f64>> {
    if a_bar.len() != b_bar.len() || a_bar.len() != c.len() {
        return Err(PyValueError::new_err("a_bar, b_bar and c must have equal length"));
    }
    Ok(lti_scan_core(&DiscreteLti { a_bar, b_bar }, &c, &x))
}

#[pyfunction]
fn success(ious: Vec<f64>) -> PyResult<f64> {
    Ok(success_auc(&ious).map_err(to_py)?.auc)
}

#[pyfunction]
#[pyo3(signature = (errors, cap = 2.0))]
fn precision(errors: Vec<f64>, cap: f64) -> PyResult<f64> {
    Ok(precision_auc(&errors, cap).map_err(to_py)?.auc)
}

#[pyfunction]
fn flops(config: &PyConfig, n_points: usize) -> (u64, u64) {
    (flops_mip(&config.inner, n_points), flops_attention_baseline(&config.inner, n_points))
}

#[pyfunction]
fn preset_names() -> Vec<&'static str> {
    PRESET_NAMES.to_vec()
}

/// Generate a preset scenario; returns `(frames, boxes, class)`, each frame a
/// list of `[x, y, z, intensity]` rows.
#[pyfunction]
fn generate_preset(name: &str) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<PyBox>, String)> {
    let spec = preset(name).ok_or_else(|| PyKeyError::new_err(format!("unknown preset `{name}`")))?;
    let t = generate(&spec).map_err(to_py)?;
    Ok((
        t.frames.iter().map(cloud_to).collect(),
        t.gt.iter().map(|b| PyBox { inner: *b }).collect(),
        t.class,
    ))
}

/// Run the oracle suite; returns `(name, passed, detail)` per check.
#[pyfunction]
#[pyo3(signature = (inject_fault = false))]
fn selfcheck(inject_fault: bool) -> Vec<(String, bool, String)> {
    mt3d::selfcheck::run_all(inject_fault)
        .into_iter()
        .map(|o| (o.name.to_string(), o.passed, o.detail))
        .collect()
}

#[pymodule]
fn mt3d_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyWeights>()?;
    m.add_class::<PyTracker>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(zoh_discretize, m)?)?;
    m.add_function(wrap_pyfunction!(lti_scan, m)?)?;
    m.add_function(wrap_pyfunction!(success, m)?)?;
    m.add_function(wrap_pyfunction!(precision, m)?)?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(generate_preset, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    Ok(())
}
