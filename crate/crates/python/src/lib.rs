//! Python bindings. Structured results cross the boundary as plain dicts and lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use splatscope::config::RunConfig;
use splatscope::gateway::{Gateway, MockScript};
use splatscope::grounding::{self, InstanceLabeling};
use splatscope::pipeline::{gateway_from_config, parse_questions, Pipeline as CorePipeline};
use splatscope::prompts::Prompts;
use splatscope::render::RenderOptions;
use splatscope::scene::{self, Scene as CoreScene};
use splatscope::sidecar::attach_semantics;
use splatscope::{synthetic, views, Error};

create_exception!(splatscope, SplatscopeError, PyException);
create_exception!(splatscope, InsufficientEvidenceError, SplatscopeError);
create_exception!(splatscope, TransportError, SplatscopeError);
create_exception!(splatscope, BudgetError, SplatscopeError);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        "insufficient_evidence" | "no_instance" => InsufficientEvidenceError::new_err(msg),
        "transport" => TransportError::new_err(msg),
        "budget" => BudgetError::new_err(msg),
        _ => SplatscopeError::new_err(msg),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Immutable Gaussian scene with its cameras.
#[pyclass(frozen)]
struct Scene {
    inner: CoreScene,
}

impl Scene {
    fn camera(&self, id: u32) -> PyResult<&scene::Camera> {
        self.inner
            .camera(id)
            .ok_or_else(|| SplatscopeError::new_err(format!("no camera with id {id}")))
    }
}

#[pymethods]
impl Scene {
    /// Loads a Gaussian PLY and a camera registry, optionally attaching a semantic sidecar.
    #[staticmethod]
    #[pyo3(signature = (scene, cameras, sidecar=None))]
    fn load(scene: PathBuf, cameras: PathBuf, sidecar: Option<PathBuf>) -> PyResult<Scene> {
        let mut s = scene::load_scene(&scene, &cameras).map_err(py_err)?;
        if let Some(p) = sidecar {
            s = attach_semantics(&s, &p).map_err(py_err)?;
        }
        Ok(Scene { inner: s })
    }

    /// The bundled synthetic fixture: two pillows and a sink on a table, eight cameras.
    #[staticmethod]
    fn fixture() -> Scene {
        Scene {
            inner: synthetic::fixture_scene(),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene({} gaussians, {} cameras, {} categories)",
            self.inner.len(),
            self.inner.cameras().len(),
            self.inner.vocab().len()
        )
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.inner.vocab().to_vec()
    }

    #[getter]
    fn camera_ids(&self) -> Vec<u32> {
        self.inner.cameras().iter().map(|c| c.id).collect()
    }

    /// Category id per Gaussian, `None` where unlabelled.
    #[getter]
    fn categories(&self) -> Vec<Option<usize>> {
        self.inner.gaussians().iter().map(|g| g.category).collect()
    }

    #[getter]
    fn means(&self) -> Vec<[f64; 3]> {
        self.inner.gaussians().iter().map(|g| g.mean.into()).collect()
    }

    /// PNG bytes of the color render through camera `camera_id`.
    fn render_png<'py>(&self, py: Python<'py>, camera_id: u32) -> PyResult<Bound<'py, PyBytes>> {
        let cam = self.camera(camera_id)?.clone();
        let png = py
            .detach(|| splatscope::render::render(&self.inner, &cam, None))
            .map_err(py_err)?
            .color_png();
        Ok(PyBytes::new(py, &png))
    }

    /// Fraction of `cluster` that wins the per-pixel weight argmax in camera `camera_id`.
    #[pyo3(signature = (cluster, camera_id, visibility_threshold=0.5))]
    fn visibility_score(
        &self,
        py: Python<'_>,
        cluster: Vec<usize>,
        camera_id: u32,
        visibility_threshold: f64,
    ) -> PyResult<f64> {
        let cam = self.camera(camera_id)?.clone();
        let opts = RenderOptions {
            visibility_threshold,
            ..Default::default()
        };
        py.detach(|| views::visibility_score(&self.inner, &cluster, &cam, &opts))
            .map_err(py_err)
    }

    /// Ids among `ids` whose means fall inside camera `camera_id`'s frustum.
    fn frustum_filter(&self, ids: Vec<usize>, camera_id: u32) -> PyResult<Vec<usize>> {
        let cam = self.camera(camera_id)?;
        grounding::frustum_filter(&self.inner, &ids, cam).map_err(py_err)
    }

    /// Per-Gaussian IoU weights: volume over the 90th percentile, clipped to [0, 1].
    fn normalized_volume(&self) -> PyResult<Vec<f64>> {
        grounding::normalized_volume(&self.inner).map_err(py_err)
    }
}

/// Question answering and evaluation over one scene.
#[pyclass(frozen)]
struct Pipeline {
    inner: CorePipeline,
    gateway_config: RunConfig,
    mock: Option<MockScript>,
}

impl Pipeline {
    fn gateway(&self) -> PyResult<Gateway> {
        match &self.mock {
            Some(script) => Ok(Gateway::mock(script.clone())),
            None => gateway_from_config(&self.gateway_config).map_err(py_err),
        }
    }
}

#[pymethods]
impl Pipeline {
    /// Builds a pipeline from a `key = value` config file.
    #[new]
    fn new(config: PathBuf) -> PyResult<Pipeline> {
        let cfg = RunConfig::load(&config).map_err(py_err)?;
        let inner = CorePipeline::from_config(&cfg).map_err(py_err)?;
        Ok(Pipeline {
            inner,
            gateway_config: cfg,
            mock: None,
        })
    }

    /// Pipeline over the fixture scene, answered by its bundled mock script.
    #[staticmethod]
    fn fixture() -> PyResult<Pipeline> {
        let inner =
            CorePipeline::new(synthetic::fixture_scene(), Prompts::default(), RunConfig::default()).map_err(py_err)?;
        let script = MockScript::parse(synthetic::FIXTURE_MOCK_SCRIPT).map_err(py_err)?;
        Ok(Pipeline {
            inner,
            gateway_config: RunConfig::default(),
            mock: Some(script),
        })
    }

    /// Replaces the chat backend with a mock script given as JSON text.
    fn with_mock_script(&self, script_json: &str) -> PyResult<Pipeline> {
        Ok(Pipeline {
            inner: self.inner.clone(),
            gateway_config: self.gateway_config.clone(),
            mock: Some(MockScript::parse(script_json).map_err(py_err)?),
        })
    }

    #[getter]
    fn scene(&self) -> Scene {
        Scene {
            inner: self.inner.scene().clone(),
        }
    }

    /// Answer record for `question` as a dict.
    fn answer<'py>(&self, py: Python<'py>, question: &str) -> PyResult<Bound<'py, PyAny>> {
        let gw = self.gateway()?;
        let run = py.detach(|| self.inner.answer(&gw, question)).map_err(py_err)?;
        json_to_py(py, &run.record.to_json())
    }

    /// Frustum-filtered prediction (and IoU when `gt` ids are given) as a dict.
    #[pyo3(signature = (question, gt=None))]
    fn segment<'py>(&self, py: Python<'py>, question: &str, gt: Option<Vec<usize>>) -> PyResult<Bound<'py, PyAny>> {
        let gw = self.gateway()?;
        let run = py
            .detach(|| self.inner.segment(&gw, question, gt.as_deref()))
            .map_err(py_err)?;
        let text = serde_json::to_string(&run.result).map_err(|e| py_err(e.into()))?;
        json_to_py(py, &text)
    }

    /// Runs JSON-lines questions; `labels` is one optional instance id per Gaussian.
    #[pyo3(signature = (questions_jsonl, labels=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        questions_jsonl: &str,
        labels: Option<Vec<Option<u32>>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let items = parse_questions(questions_jsonl).map_err(py_err)?;
        let labels = labels.map(|labels| InstanceLabeling {
            labels,
            source: grounding::LabelSource::File,
        });
        let gw = self.gateway()?;
        let report = py.detach(|| self.inner.evaluate(&gw, &items, labels.as_ref()));
        json_to_py(py, &report.to_json())
    }
}

/// Volume-weighted IoU of two id sets.
#[pyfunction]
fn miou_3d(pred: Vec<usize>, gt: Vec<usize>, weights: Vec<f64>) -> PyResult<f64> {
    grounding::miou_3d(&pred, &gt, &weights).map_err(py_err)
}

/// Percentage of IoUs above `k_percent / 100`.
#[pyfunction]
fn acc_at_k(ious: Vec<f64>, k_percent: f64) -> PyResult<f64> {
    grounding::acc_at_k(&ious, k_percent).map_err(py_err)
}

/// Writes the fixture scene, cameras, categories and mock script into `dir`.
#[pyfunction]
fn write_fixture(dir: PathBuf) -> PyResult<()> {
    synthetic::write_fixture(&dir).map_err(py_err)
}

/// Question-driven view selection and referring segmentation over Gaussian splatting scenes.
#[pymodule(name = "splatscope")]
mod splatscope_module {
    #[pymodule_export]
    use super::{
        acc_at_k, miou_3d, write_fixture, BudgetError, InsufficientEvidenceError, Pipeline, Scene, SplatscopeError,
        TransportError,
    };

    use pyo3::prelude::*;

    #[pymodule_init]
    fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
        m.add("__version__", env!("CARGO_PKG_VERSION"))
    }
}
