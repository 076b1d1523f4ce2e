//! Python bindings: `import centermask_py`.
//!
//! Images and masks cross the boundary as raw bytes (row-major, RGB
//! interleaved for images, one 0/1 byte per pixel for masks) so the module
//! has no array-library dependency; `numpy.frombuffer` reads them directly.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};

use centermask::bench::bench;
use centermask::boxes::BinaryMask;
use centermask::data::{generate_sample as gen_sample, Shape};
use centermask::fcos::{nms as nms_impl, Detection};
use centermask::io::{
    evaluate_model, load_params, rle_decode as rle_dec, rle_encode as rle_enc, save_params, Config, Rle,
};
use centermask::mask::{assign_level_adaptive as adaptive, assign_level_canonical as canonical, AssignConfig};
use centermask::model::CenterMask;
use centermask::train::Trainer;

fn err(e: centermask::Error) -> PyErr {
    match e {
        centermask::Error::Invalid(_) | centermask::Error::Shape { .. } | centermask::Error::Config { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn mask_from_bytes(data: &[u8], height: usize, width: usize) -> PyResult<BinaryMask> {
    if data.len() != height * width {
        return Err(PyValueError::new_err(format!(
            "{} bytes for a {height}x{width} mask",
            data.len()
        )));
    }
    let mut m = BinaryMask::zeros(height, width);
    for (i, &v) in data.iter().enumerate() {
        m.set(i / width, i % width, v != 0);
    }
    Ok(m)
}

fn mask_bytes<'py>(py: Python<'py>, m: &BinaryMask) -> Bound<'py, PyBytes> {
    let v: Vec<u8> = (0..m.height * m.width)
        .map(|i| u8::from(m.get(i / m.width, i % m.width)))
        .collect();
    PyBytes::new(py, &v)
}

/// A model together with its weights and optimizer state.
#[pyclass(unsendable)]
struct Model {
    cfg: Config,
    trainer: Trainer,
}

#[pymethods]
impl Model {
    /// `config` is settings text as printed by `config_reference`; without it
    /// the lite or base preset is used.
    #[new]
    #[pyo3(signature = (config=None, lite=true, seed=None))]
    fn new(config: Option<&str>, lite: bool, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => Config::parse(text).map_err(err)?,
            None => Config::preset(lite),
        };
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        let (model, params) = CenterMask::new(&cfg.model, cfg.train.seed).map_err(err)?;
        let trainer = Trainer::new(model, params, cfg.train.clone()).map_err(err)?;
        Ok(Model { cfg, trainer })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.trainer.params.count()
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.trainer.iteration
    }

    #[getter]
    fn classes(&self) -> Vec<&'static str> {
        Shape::ALL
            .iter()
            .take(self.cfg.model.classes)
            .map(|s| s.name())
            .collect()
    }

    fn config_text(&self) -> String {
        self.cfg.to_text()
    }

    fn save_weights(&self, path: PathBuf) -> PyResult<()> {
        save_params(&path, &self.trainer.params).map_err(err)
    }

    fn load_weights(&mut self, path: PathBuf) -> PyResult<()> {
        load_params(&path, &mut self.trainer.params).map_err(err)
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.trainer.save_checkpoint(&path).map_err(err)
    }

    fn load_checkpoint(&mut self, path: PathBuf) -> PyResult<()> {
        self.trainer.load_checkpoint(&path).map_err(err)
    }

    /// Runs `iterations` more training steps (bounded by `train.iterations`)
    /// and returns one dict of loss terms per step.
    fn train<'py>(&mut self, py: Python<'py>, iterations: usize) -> PyResult<Bound<'py, PyList>> {
        let until = self.trainer.iteration + iterations;
        let rows = self.trainer.run(until, &mut std::io::sink(), None).map_err(err)?;
        let out = PyList::empty(py);
        for r in rows {
            let d = PyDict::new(py);
            let l = &r.losses;
            d.set_item("iteration", r.iteration)?;
            d.set_item("lr", r.lr)?;
            for (k, v) in [
                ("cls", l.cls),
                ("ctr", l.ctr),
                ("box", l.bbox),
                ("mask", l.mask),
                ("maskiou", l.maskiou),
                ("total", l.total),
            ] {
                d.set_item(k, v)?;
            }
            out.append(d)?;
        }
        Ok(out)
    }

    /// Segments an RGB image given as `height*width*3` bytes.
    fn infer<'py>(&self, py: Python<'py>, rgb: &[u8], height: usize, width: usize) -> PyResult<Bound<'py, PyList>> {
        let found = self
            .trainer
            .model
            .infer_rgb(&self.trainer.params, rgb, height, width)
            .map_err(err)?;
        let out = PyList::empty(py);
        for r in &found {
            let d = PyDict::new(py);
            d.set_item("label", r.detection.label)?;
            d.set_item("class_name", Shape::from_index(r.detection.label).map(|s| s.name()))?;
            d.set_item("score", r.score)?;
            d.set_item("bbox", r.detection.bbox.to_vec())?;
            d.set_item("mask", mask_bytes(py, &r.mask))?;
            out.append(d)?;
        }
        Ok(out)
    }

    /// Box and mask AP on the held-out scenes of the `eval` settings.
    fn evaluate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = evaluate_model(
            &self.trainer.model,
            &self.trainer.params,
            &self.cfg.eval,
            self.cfg.train.max_instances,
        )
        .map_err(err)?;
        let d = PyDict::new(py);
        for (name, t) in [("box", &r.boxes), ("mask", &r.masks)] {
            d.set_item(format!("{name}_ap"), t.mean())?;
            d.set_item(format!("{name}_ap50"), t.at_threshold(0.5))?;
            d.set_item(format!("{name}_ap75"), t.at_threshold(0.75))?;
        }
        Ok(d)
    }

    /// Per-stage median seconds and multiply-accumulates of one forward pass.
    #[pyo3(signature = (size=64, rois=50, repetitions=3))]
    fn bench<'py>(
        &self,
        py: Python<'py>,
        size: usize,
        rois: usize,
        repetitions: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let r = bench(&self.cfg.model, size, 1, rois, repetitions, self.cfg.train.seed).map_err(err)?;
        let d = PyDict::new(py);
        for s in &r.stages {
            let st = PyDict::new(py);
            st.set_item("median", s.median)?;
            st.set_item("p95", s.p95)?;
            st.set_item("macs", s.macs)?;
            d.set_item(&s.stage, st)?;
        }
        Ok(d)
    }
}

/// One synthetic scene: `rgb` bytes plus instances with label, box and mask bytes.
#[pyfunction]
#[pyo3(signature = (seed, size=64, max_instances=5))]
fn generate_sample<'py>(py: Python<'py>, seed: u64, size: usize, max_instances: usize) -> PyResult<Bound<'py, PyDict>> {
    let s = gen_sample(seed, size, size, max_instances).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("height", s.height)?;
    d.set_item("width", s.width)?;
    d.set_item("rgb", PyBytes::new(py, &s.rgb))?;
    let insts = PyList::empty(py);
    for inst in &s.instances {
        let i = PyDict::new(py);
        i.set_item("label", inst.label.index())?;
        i.set_item("class_name", inst.label.name())?;
        i.set_item("bbox", inst.bbox.to_vec())?;
        i.set_item("mask", mask_bytes(py, &inst.mask))?;
        insts.append(i)?;
    }
    d.set_item("instances", insts)?;
    Ok(d)
}

/// Row-major run lengths starting with a background run.
#[pyfunction]
fn rle_encode(mask: &[u8], height: usize, width: usize) -> PyResult<Vec<u32>> {
    Ok(rle_enc(&mask_from_bytes(mask, height, width)?).counts)
}

#[pyfunction]
fn rle_decode<'py>(py: Python<'py>, counts: Vec<u32>, height: usize, width: usize) -> PyResult<Bound<'py, PyBytes>> {
    let m = rle_dec(&Rle {
        size: [height, width],
        counts,
    })
    .map_err(err)?;
    Ok(mask_bytes(py, &m))
}

#[pyfunction]
fn assign_level_canonical(w: f64, h: f64) -> PyResult<u32> {
    canonical(w, h, &AssignConfig::default()).map_err(err)
}

#[pyfunction]
fn assign_level_adaptive(w: f64, h: f64, input_area: f64) -> PyResult<u32> {
    adaptive(w, h, input_area, &AssignConfig::default()).map_err(err)
}

/// Class-aware suppression; returns the indices of the kept boxes in score order.
#[pyfunction]
#[pyo3(signature = (boxes, scores, labels, iou=0.6, budget=100))]
fn nms(boxes: Vec<[f32; 4]>, scores: Vec<f32>, labels: Vec<usize>, iou: f32, budget: usize) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() || boxes.len() != labels.len() {
        return Err(PyValueError::new_err("boxes, scores and labels differ in length"));
    }
    // The level field carries the input index through suppression.
    let dets: Vec<Detection> = boxes
        .iter()
        .zip(&scores)
        .zip(&labels)
        .enumerate()
        .map(|(i, ((&bbox, &score), &label))| Detection {
            bbox,
            label,
            score,
            level: i as u32,
            centerness: 1.0,
        })
        .collect();
    Ok(nms_impl(&dets, iou, budget).iter().map(|d| d.level as usize).collect())
}

#[pyfunction]
#[pyo3(signature = (lite=true))]
fn config_reference(lite: bool) -> String {
    Config::reference(lite)
}

#[pymodule]
fn centermask_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(rle_encode, m)?)?;
    m.add_function(wrap_pyfunction!(rle_decode, m)?)?;
    m.add_function(wrap_pyfunction!(assign_level_canonical, m)?)?;
    m.add_function(wrap_pyfunction!(assign_level_adaptive, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(config_reference, m)?)?;
    Ok(())
}
