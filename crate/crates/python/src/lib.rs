//! Python bindings for `compgan`.
//!
//! Bundles cross the boundary as flat float lists, images as PNG bytes.
//! Slot arguments are indices; `Schema.parse_slots` turns names into them.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tch::Tensor;

use compgan::checkpoint::Model as CoreModel;
use compgan::config::ModelConfig;
use compgan::coords::GridTransform;
use compgan::editing::{self, ClassAreaScorer};
use compgan::fusion;
use compgan::generator::GenerateOptions;
use compgan::image_io::{labels_to_rgb, png_bytes, tensor_to_rgb};
use compgan::latent;
use compgan::schema::SemanticSchema;
use compgan::train::TrainMode;
use compgan::trainer::{run, TrainOptions};

fn py_err(e: compgan::Error) -> PyErr {
    match e {
        compgan::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        compgan::Error::Torch(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn slot_set(slots: Option<Vec<usize>>, num_slots: usize) -> BTreeSet<usize> {
    match slots {
        Some(s) => s.into_iter().collect(),
        None => (0..num_slots).collect(),
    }
}

#[pyclass(name = "Schema", from_py_object)]
#[derive(Clone)]
pub struct PySchema {
    inner: SemanticSchema,
}

#[pymethods]
impl PySchema {
    /// The six-class schema of the toy dataset.
    #[staticmethod]
    fn toy() -> Self {
        Self {
            inner: SemanticSchema::toy(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SemanticSchema::load(path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: SemanticSchema::from_json(text).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn class_names(&self) -> Vec<String> {
        self.inner.classes().iter().map(|c| c.name.clone()).collect()
    }

    fn transparent(&self) -> Vec<bool> {
        self.inner.transparent_flags()
    }

    fn slot_names(&self) -> Vec<String> {
        latent::slot_names(&self.inner)
    }

    /// Indices for `base`, `<class>`, `<class>.shape` or `<class>.texture`.
    fn parse_slots(&self, name: &str) -> PyResult<Vec<usize>> {
        latent::parse_slots(name, &self.inner).map_err(py_err)
    }
}

#[pyclass(name = "LatentBundle", from_py_object)]
#[derive(Clone)]
pub struct PyLatentBundle {
    inner: latent::LatentBundle,
}

#[pymethods]
impl PyLatentBundle {
    #[new]
    fn new(num_classes: usize, latent_dim: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: latent::LatentBundle::from_slots(num_classes, latent_dim, data).map_err(py_err)?,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn num_slots(&self) -> usize {
        self.inner.num_slots()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn slot(&self, index: usize) -> PyResult<Vec<f32>> {
        Ok(self.inner.slot(index).map_err(py_err)?.to_vec())
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.as_slice().to_vec()
    }

    /// Takes `slots` from `other` and keeps the rest.
    fn mix(&self, other: &Self, slots: Vec<usize>) -> PyResult<Self> {
        let slots = slots.into_iter().collect();
        Ok(Self {
            inner: self.inner.mix(&other.inner, &slots).map_err(py_err)?,
        })
    }

    /// Interpolates `slots` (all when omitted) towards `other`.
    #[pyo3(signature = (other, t, slots=None))]
    fn lerp(&self, other: &Self, t: f32, slots: Option<Vec<usize>>) -> PyResult<Self> {
        let slots = slot_set(slots, self.inner.num_slots());
        Ok(Self {
            inner: self.inner.lerp(&other.inner, t, &slots).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.as_slice().len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "LatentBundle(num_classes={}, latent_dim={})",
            self.inner.num_classes(),
            self.inner.latent_dim()
        )
    }
}

#[pyclass(name = "EditDirection", from_py_object)]
#[derive(Clone)]
pub struct PyEditDirection {
    inner: editing::EditDirection,
}

#[pymethods]
impl PyEditDirection {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: editing::EditDirection::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn attribute(&self) -> String {
        self.inner.attribute.clone()
    }

    #[getter]
    fn train_accuracy(&self) -> f64 {
        self.inner.train_accuracy
    }

    #[getter]
    fn validation_accuracy(&self) -> Option<f64> {
        self.inner.validation_accuracy
    }

    /// `bundle + alpha * direction` on `slots` (all when omitted).
    #[pyo3(signature = (bundle, alpha, slots=None))]
    fn apply(&self, bundle: &PyLatentBundle, alpha: f32, slots: Option<Vec<usize>>) -> PyResult<PyLatentBundle> {
        let slots = slot_set(slots, bundle.inner.num_slots());
        Ok(PyLatentBundle {
            inner: editing::apply_edit(&bundle.inner, &self.inner, alpha, &slots).map_err(py_err)?,
        })
    }
}

/// A trained generator loaded from a checkpoint.
#[pyclass(name = "Model", unsendable)]
pub struct PyModel {
    inner: CoreModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreModel::load(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.generator.config.image_resolution
    }

    fn schema(&self) -> PySchema {
        PySchema {
            inner: self.inner.generator.schema.clone(),
        }
    }

    /// `count` bundles drawn from `seed` and truncated towards the mean.
    #[pyo3(signature = (seed, count=1, psi=1.0))]
    fn sample(&self, seed: u64, count: usize, psi: f64) -> PyResult<Vec<PyLatentBundle>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = self.inner.generator.sample_bundles(&mut rng, count).map_err(py_err)?;
        raw.into_iter()
            .map(|b| {
                Ok(PyLatentBundle {
                    inner: b.truncate(psi, &self.inner.stats).map_err(py_err)?,
                })
            })
            .collect()
    }

    /// Renders one bundle and returns `(image_png, segmentation_png)`.
    /// `transform` is `(dx, dy, s)`.
    #[pyo3(signature = (bundle, active_classes=None, transform=None))]
    fn render<'py>(
        &self,
        py: Python<'py>,
        bundle: &PyLatentBundle,
        active_classes: Option<Vec<usize>>,
        transform: Option<(f64, f64, f64)>,
    ) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyBytes>)> {
        let g = &self.inner.generator;
        let mut options = GenerateOptions {
            active_classes: active_classes.map(|c| c.into_iter().collect()),
            ..GenerateOptions::default()
        };
        if let Some((dx, dy, s)) = transform {
            options.transform = GridTransform { dx, dy, s };
            options.transform.validate().map_err(py_err)?;
        }
        let out = g
            .generate(std::slice::from_ref(&bundle.inner), &options, None)
            .map_err(py_err)?;
        let image = tensor_to_rgb(&out.render.image.get(0)).map_err(py_err)?;
        let seg = labels_to_rgb(&out.labels().get(0), &g.schema.palette()).map_err(py_err)?;
        Ok((PyBytes::new(py, &png_bytes(&image)), PyBytes::new(py, &png_bytes(&seg))))
    }

    /// Fits a direction for the area of class `attribute`.
    #[pyo3(signature = (attribute, samples=2000, seed=0))]
    fn fit_direction(&self, attribute: &str, samples: usize, seed: u64) -> PyResult<PyEditDirection> {
        let g = &self.inner.generator;
        let class = g
            .schema
            .class_id(attribute)
            .ok_or_else(|| PyValueError::new_err(format!("unknown class `{attribute}`")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = editing::fit_attribute(g, &mut rng, samples, &ClassAreaScorer { class }, attribute)
            .map_err(py_err)?;
        Ok(PyEditDirection { inner })
    }
}

/// Pseudo-depth fusion weights for one set of pixels.
///
/// `depths[k][p]` is the depth of class `k` at pixel `p`. Returns the
/// softmax mask and the modified mask in which opaque classes compete
/// only among themselves.
#[pyfunction]
fn fuse(depths: Vec<Vec<f64>>, transparent: Vec<bool>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let k = depths.len();
    let p = depths.first().map_or(0, Vec::len);
    if k == 0 || p == 0 || depths.iter().any(|d| d.len() != p) {
        return Err(PyValueError::new_err("depths must be a non-empty K x P list"));
    }
    let flat: Vec<f64> = depths.into_iter().flatten().collect();
    let d = Tensor::from_slice(&flat).reshape([1, k as i64, p as i64, 1]);
    let m = fusion::depth_to_mask(&d).map_err(py_err)?;
    let mt = fusion::modified_mask_with_flags(&m, &d, &transparent).map_err(py_err)?;
    let rows = |t: &Tensor| -> PyResult<Vec<Vec<f64>>> {
        let v = Vec::<f64>::try_from(t.reshape([-1])).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(v.chunks(p).map(<[f64]>::to_vec).collect())
    };
    Ok((rows(m.tensor())?, rows(mt.tensor())?))
}

/// Writes the toy dataset and returns its directory.
#[pyfunction]
#[pyo3(signature = (out, seed=0, count=256, resolution=64))]
fn make_toy_dataset(out: PathBuf, seed: u64, count: usize, resolution: u32) -> PyResult<PathBuf> {
    compgan::toy::make_toy_dataset(seed, count, resolution, &out).map_err(py_err)
}

/// Runs training and returns the path of the latest checkpoint.
#[pyfunction]
#[pyo3(signature = (config, data, out, steps, seed=0, finetune=false, resume=None, schema=None, flip=false))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    config: PathBuf,
    data: PathBuf,
    out: PathBuf,
    steps: u64,
    seed: u64,
    finetune: bool,
    resume: Option<PathBuf>,
    schema: Option<PathBuf>,
    flip: bool,
) -> PyResult<PathBuf> {
    let config = ModelConfig::load(&config).map_err(py_err)?;
    let schema = SemanticSchema::load(schema.unwrap_or_else(|| data.join("schema.json"))).map_err(py_err)?;
    let options = TrainOptions {
        config,
        schema,
        data_dir: data,
        out_dir: out,
        mode: if finetune {
            TrainMode::Finetune
        } else {
            TrainMode::Joint
        },
        resume,
        seed,
        steps,
        sample_every: 0,
        checkpoint_every: 0,
        flip,
    };
    let summary = py.detach(|| run(&options)).map_err(py_err)?;
    Ok(summary.checkpoint)
}

#[pymodule]
pub fn pycompgan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchema>()?;
    m.add_class::<PyLatentBundle>()?;
    m.add_class::<PyEditDirection>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(make_toy_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
