//! Python bindings: `.tdn` analysis, the objective, synthetic images and
//! batched inference.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use tdn_core::archdsl::{parse_arch, serialize_arch, ArchGraph};
use tdn_core::complexity::{analyze as analyze_graph, display_ratio};
use tdn_core::objective::{indicator, netscore as score, Metrics, ObjectiveParams};
use tdn_core::runtime::weights::load_weights;
use tdn_core::runtime::{ExecutionPlan, RuntimeConfig, Tensor};
use tdn_core::train::ModelParams;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn graph(text: &str) -> PyResult<ArchGraph> {
    parse_arch(text).map_err(err)?.infer_shapes().map_err(err)
}

/// Complexity report of `.tdn` text as a dict.
#[pyfunction]
fn analyze<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let r = analyze_graph(&graph(text)?).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("params", r.params)?;
    d.set_item("macs", r.macs)?;
    d.set_item("flops", r.flops)?;
    d.set_item("peak_activation_bytes", r.peak_activation_bytes)?;
    let layers: Vec<(String, u64, u64)> = r.per_layer.into_iter().map(|l| (l.id, l.params, l.flops)).collect();
    d.set_item("per_layer", layers)?;
    Ok(d)
}

/// Canonical `.tdn` text.
#[pyfunction]
fn canonical(text: &str) -> PyResult<String> {
    Ok(serialize_arch(&graph(text)?))
}

#[pyfunction]
#[pyo3(signature = (accuracy_pct, params, flops, kappa=2.0, beta=0.5, gamma=0.5))]
fn netscore(accuracy_pct: f64, params: u64, flops: u64, kappa: f64, beta: f64, gamma: f64) -> PyResult<f64> {
    let o = ObjectiveParams { kappa, beta, gamma, ..ObjectiveParams::default() };
    score(&Metrics::from_counts(accuracy_pct, params, flops), &o).map_err(err)
}

/// Budget indicator: FLOPs within `tolerance` of `budget`.
#[pyfunction]
#[pyo3(signature = (flops, budget=100_000_000, tolerance=0.05))]
fn check(flops: u64, budget: u64, tolerance: f64) -> PyResult<bool> {
    let o = ObjectiveParams { budget_flops: budget, tolerance, ..ObjectiveParams::default() };
    o.validate().map_err(err)?;
    Ok(indicator(flops, &o))
}

#[pyfunction]
fn ratio_string(ratio: f64) -> String {
    display_ratio(ratio)
}

/// One synthetic defect image: `(pixels, mask, source_id)`, row-major.
#[pyfunction]
#[pyo3(signature = (label, index, size=200, seed=42))]
fn synth_image(label: usize, index: usize, size: usize, seed: u64) -> PyResult<(Vec<f32>, Vec<bool>, String)> {
    if label >= tdn_core::data::NUM_CLASSES || size == 0 {
        return Err(err(format!("label must be below {} and size positive", tdn_core::data::NUM_CLASSES)));
    }
    let img = tdn_core::data::render(label, index, size, seed);
    Ok((img.pixels, img.mask.unwrap_or_default(), img.source_id))
}

/// Compiled inference plan for one architecture and its weights.
#[pyclass(frozen)]
struct Model {
    plan: ExecutionPlan,
    elements: usize,
}

#[pymethods]
impl Model {
    /// Loads `weights` (a `.tdnw` file) or, without it, seeded random
    /// weights.
    #[new]
    #[pyo3(signature = (arch, weights=None, seed=0, threads=1))]
    fn new(arch: &str, weights: Option<PathBuf>, seed: u64, threads: usize) -> PyResult<Self> {
        let g = graph(arch)?;
        let params = match weights {
            Some(p) => load_weights(&p, &g).map_err(err)?,
            None => ModelParams::init(&g, seed).map_err(err)?,
        };
        let cfg = RuntimeConfig { num_threads: threads.max(1), cpu_affinity: String::new(), ..RuntimeConfig::default() };
        let plan = ExecutionPlan::build(&g, &params, &cfg).map_err(err)?;
        Ok(Self { elements: g.input_shape().elements(), plan })
    }

    /// Output rows for a batch of flattened HWC images.
    #[pyo3(signature = (images, logits=false))]
    fn infer(&self, py: Python<'_>, images: Vec<Vec<f32>>, logits: bool) -> PyResult<Vec<Vec<f32>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(bad) = images.iter().position(|i| i.len() != self.elements) {
            return Err(err(format!("image {bad} has {} values, expected {}", images[bad].len(), self.elements)));
        }
        let s = self.plan.input_shape();
        let batch = Tensor::new([images.len(), s.height, s.width, s.channels], images.concat());
        let out = py
            .detach(|| if logits { self.plan.infer_logits(&batch) } else { self.plan.infer(&batch) })
            .map_err(err)?;
        let width = out.len() / images.len();
        Ok(out.chunks(width).map(<[f32]>::to_vec).collect())
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.plan.input_shape();
        (s.height, s.width, s.channels)
    }
}

#[pymodule]
pub fn tdnpy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(canonical, m)?)?;
    m.add_function(wrap_pyfunction!(netscore, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(ratio_string, m)?)?;
    m.add_function(wrap_pyfunction!(synth_image, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
