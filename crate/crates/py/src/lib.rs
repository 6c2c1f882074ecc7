use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use repnerv::compression::rd_point;
use repnerv::{
    count_params_and_flops, evaluate, read_frames, train, Budget, BranchKind, Checkpoint, ModelConfig, RepMode,
    RepNerv, SynthKind, TrainConfig,
};

fn err(e: repnerv::Error) -> PyErr {
    match e {
        repnerv::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<RepMode> {
    match mode {
        "online" => Ok(RepMode::OnlineTrain),
        "explicit" => Ok(RepMode::ExplicitTrain),
        "deployed" => Ok(RepMode::Deployed),
        _ => Err(PyValueError::new_err(format!("mode must be online, explicit or deployed, got {mode:?}"))),
    }
}

fn parse_branches(names: Option<Vec<String>>) -> PyResult<Vec<BranchKind>> {
    match names {
        None => Ok(ModelConfig::default().branches),
        Some(v) => v.iter().map(|s| s.parse().map_err(err)).collect(),
    }
}

/// Frames in [0, 1], shape (T, 3, H, W).
#[pyclass(module = "repnerv", skip_from_py_object)]
#[derive(Clone)]
struct Video {
    inner: repnerv::Video,
}

#[pymethods]
impl Video {
    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: read_frames(dir).map_err(err)? })
    }

    fn write(&self, dir: PathBuf) -> PyResult<usize> {
        Ok(repnerv::video::write_video(&self.inner, dir).map_err(err)?.len())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.inner.tensor().shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Frame `i` as a flat channel-major list of floats.
    fn frame(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("frame {i} out of range")));
        }
        Ok(self.inner.frame(i).into_data())
    }

    fn __repr__(&self) -> String {
        let (t, c, h, w) = self.shape();
        format!("Video(frames={t}, channels={c}, height={h}, width={w})")
    }
}

#[pyfunction]
#[pyo3(signature = (kind, frames=16, height=32, width=64, seed=0))]
fn synth_video(kind: &str, frames: usize, height: usize, width: usize, seed: u64) -> PyResult<Video> {
    let kind: SynthKind = kind.parse().map_err(err)?;
    Ok(Video { inner: repnerv::synth_video(kind, frames, height, width, seed).map_err(err)? })
}

/// Decoder from frame index to frame.
#[pyclass(module = "repnerv", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: RepNerv<f32>,
    step: u64,
}

fn report_dict<'py>(py: Python<'py>, r: &repnerv::EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("psnr", r.psnr.clone())?;
    d.set_item("ms_ssim", r.ms_ssim.clone())?;
    d.set_item("mean_psnr", r.mean_psnr)?;
    d.set_item("mean_ms_ssim", r.mean_ms_ssim)?;
    d.set_item("fps", r.fps)?;
    Ok(d)
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (height=32, width=64, factors=None, channels=None, branches=None, mode="online", seed=0))]
    fn new(
        height: usize,
        width: usize,
        factors: Option<Vec<usize>>,
        channels: Option<Vec<usize>>,
        branches: Option<Vec<String>>,
        mode: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let d = ModelConfig::default();
        let factors = factors.unwrap_or(d.factors.clone());
        let prod: usize = factors.iter().product();
        if prod == 0 || height % prod != 0 || width % prod != 0 {
            return Err(PyValueError::new_err(format!("{height}x{width} not divisible by {prod}")));
        }
        let cfg = ModelConfig {
            frame_height: height,
            frame_width: width,
            base_height: height / prod,
            base_width: width / prod,
            channels: channels.unwrap_or(d.channels.clone()),
            factors,
            branches: parse_branches(branches)?,
            ..d
        };
        Ok(Self { inner: RepNerv::init(cfg, parse_mode(mode)?, seed).map_err(err)?, step: 0 })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(err)?;
        Ok(Self { inner: ck.model, step: ck.step })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(self.inner.clone(), self.step).save(path).map_err(err)
    }

    #[getter]
    fn deployed(&self) -> bool {
        self.inner.is_deployed()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.step
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Trains in place; returns the metric log as a list of dicts.
    #[pyo3(signature = (video, budget="steps:100", seed=0, lr0=5e-4, alpha=0.7))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        video: &Video,
        budget: &str,
        seed: u64,
        lr0: f64,
        alpha: f64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let budget: Budget = budget.parse().map_err(err)?;
        let cfg = TrainConfig { seed, lr0, alpha, ..TrainConfig::default() };
        let model = self.inner.clone();
        let video = video.inner.clone();
        let out = py.detach(move || train(model, &video, &cfg, budget)).map_err(err)?;
        self.inner = out.checkpoint.model;
        self.step += out.steps;
        out.log
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("step", r.step)?;
                d.set_item("epoch", r.epoch)?;
                d.set_item("wall_clock_s", r.wall_clock_s)?;
                d.set_item("lr", r.lr)?;
                d.set_item("loss", r.loss)?;
                d.set_item("psnr", r.psnr)?;
                d.set_item("ms_ssim", r.ms_ssim)?;
                Ok(d)
            })
            .collect()
    }

    /// Deploy-form copy with every block collapsed into one convolution.
    fn fuse(&self) -> PyResult<Self> {
        Ok(Self { inner: self.inner.structural_fuse().map_err(err)?, step: self.step })
    }

    fn decode_frame(&self, index: usize, frames: usize) -> PyResult<Vec<f32>> {
        Ok(self.inner.decode_frame(index, frames).map_err(err)?.into_data())
    }

    fn evaluate<'py>(&self, py: Python<'py>, video: &Video) -> PyResult<Bound<'py, PyDict>> {
        let r = evaluate(&self.inner, &video.inner).map_err(err)?;
        report_dict(py, &r)
    }

    /// Prune, optionally fine-tune, quantize and entropy-code; writes `path`
    /// when given and returns the rate-distortion point.
    #[pyo3(signature = (video, sparsity=0.1, bits=8, finetune_steps=0, path=None))]
    fn compress<'py>(
        &self,
        py: Python<'py>,
        video: &Video,
        sparsity: f64,
        bits: u8,
        finetune_steps: u64,
        path: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let deployed = if self.inner.is_deployed() { self.inner.clone() } else { self.inner.structural_fuse().map_err(err)? };
        let cfg = TrainConfig::default();
        let finetune = (finetune_steps > 0).then_some((finetune_steps, &cfg));
        let (p, cm) = rd_point(&deployed, &video.inner, sparsity, bits, finetune).map_err(err)?;
        if let Some(path) = path {
            cm.save(path).map_err(err)?;
        }
        let d = PyDict::new(py);
        d.set_item("sparsity", p.sparsity)?;
        d.set_item("bits", p.bits)?;
        d.set_item("total_bits", p.total_bits)?;
        d.set_item("bpp", p.bpp)?;
        d.set_item("psnr", p.psnr)?;
        d.set_item("ms_ssim", p.ms_ssim)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model({}x{}, factors={:?}, channels={:?}, params={}, deployed={})",
            c.frame_height,
            c.frame_width,
            c.factors,
            c.channels,
            self.inner.param_count(),
            self.inner.is_deployed()
        )
    }
}

/// `(params, macs)` of the default desk architecture with `branches` in `mode`.
#[pyfunction]
#[pyo3(signature = (branches=None, mode="online"))]
fn complexity(branches: Option<Vec<String>>, mode: &str) -> PyResult<(usize, usize)> {
    let cfg = ModelConfig { branches: parse_branches(branches)?, ..ModelConfig::default() };
    let c = count_params_and_flops(&cfg, parse_mode(mode)?).map_err(err)?;
    Ok((c.params, c.macs))
}

#[pymodule]
#[pyo3(name = "repnerv")]
fn repnerv_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Video>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth_video, m)?)?;
    m.add_function(wrap_pyfunction!(complexity, m)?)?;
    Ok(())
}
