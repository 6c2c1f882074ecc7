//! Optimisation loop and evaluation: L1 + SSIM loss, Adam, cosine annealing.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Op, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::compression::PruneMask;
use crate::error::{shape_err, Error, Result};
use crate::metrics;
use crate::model::{normalized_index, RepNerv};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;
use crate::video::Video;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the L1 term; the SSIM term gets `1 - alpha`.
    pub alpha: f64,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds the per-epoch frame shuffle.
    pub seed: u64,
    /// Frames per optimiser step.
    pub batch: usize,
    /// Evaluate and log every this many epochs; 0 logs only the final row.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            lr0: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            batch: 1,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        Ok(())
    }
}

/// Stopping rule for [`train`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Steps(u64),
    /// Training wall-clock seconds; evaluation time is not charged.
    Seconds(f64),
}

impl std::str::FromStr for Budget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("budget {s:?} is not steps:N or seconds:S"));
        let (k, v) = s.split_once(':').ok_or_else(bad)?;
        match k {
            "steps" => v.parse().map(Budget::Steps).map_err(|_| bad()),
            "seconds" => match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(Budget::Seconds(x)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for Budget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Budget::Steps(n) => write!(f, "steps:{n}"),
            Budget::Seconds(s) => write!(f, "seconds:{s}"),
        }
    }
}

/// Mean over frames of `alpha * mean|pred - gt| + (1 - alpha) * (1 - SSIM)`.
pub fn loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, alpha: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return shape_err(format!("loss: {:?} vs {:?}", pred.shape(), gt.shape()));
    }
    let mad = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
        .sum::<f64>()
        / pred.len().max(1) as f64;
    Ok(alpha * mad + (1.0 - alpha) * (1.0 - metrics::ssim(pred, gt)?))
}

/// Records the loss on `tape`; differentiable in `pred`.
pub fn loss_tape<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var, alpha: f64) -> Result<Var> {
    let mad = tape.push(Op::MeanAbsDiff { pred, target: gt })?;
    let ssim = tape.push(Op::Ssim { pred, target: gt })?;
    let l1 = tape.affine(mad, alpha, 0.0)?;
    let s = tape.affine(ssim, -(1.0 - alpha), 1.0 - alpha)?;
    tape.add(l1, s)
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} outside [0, {total_steps}]")));
    }
    Ok(cosine_at(step as f64 / total_steps as f64, lr0))
}

fn cosine_at(frac: f64, lr0: f64) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac.clamp(0.0, 1.0)).cos())
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return shape_err(format!("adam: {:?} vs {:?} vs {:?}", p.shape(), g.shape(), m.shape()));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let (b1, b2) = (c::<T>(beta1), c::<T>(beta2));
    let (one, lr_t, bc1, bc2, eps) = (T::one(), c::<T>(lr), c::<T>(bc1), c::<T>(bc2), c::<T>(eps));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let mh = md[i] / bc1;
            let vh = vd[i] / bc2;
            pd[i] -= lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-frame reconstruction quality and decode speed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: Vec<f64>,
    pub ms_ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ms_ssim: f64,
    pub ms_ssim_scales: usize,
    pub decode_seconds: f64,
    pub fps: f64,
}

/// Decodes every frame one at a time and scores it against `video`.
pub fn evaluate(model: &RepNerv<f32>, video: &Video) -> Result<EvalReport> {
    let n = video.len();
    let cfg = model.config();
    if (cfg.frame_height, cfg.frame_width) != (video.height(), video.width()) {
        return shape_err(format!(
            "model decodes {}x{}, video is {}x{}",
            cfg.frame_height,
            cfg.frame_width,
            video.height(),
            video.width()
        ));
    }
    let start = Instant::now();
    let decoded = (0..n).map(|i| model.decode_frame(i, n)).collect::<Result<Vec<_>>>()?;
    let decode_seconds = start.elapsed().as_secs_f64();
    let scales = metrics::ms_ssim_scales(video.height(), video.width());
    let mut psnr = Vec::with_capacity(n);
    let mut ms = Vec::with_capacity(n);
    for (i, d) in decoded.iter().enumerate() {
        let gt = video.frame(i);
        psnr.push(metrics::psnr(d, &gt)?);
        ms.push(metrics::ms_ssim(d, &gt, Some(scales))?);
    }
    Ok(EvalReport {
        mean_psnr: psnr.iter().sum::<f64>() / n as f64,
        mean_ms_ssim: ms.iter().sum::<f64>() / n as f64,
        psnr,
        ms_ssim: ms,
        ms_ssim_scales: scales,
        decode_seconds,
        fps: n as f64 / decode_seconds.max(1e-12),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub wall_clock_s: f64,
    pub lr: f64,
    pub loss: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,epoch,wall_clock_s,lr,loss,psnr,ms_ssim";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:e},{:.9},{:.6},{:.8}",
                r.step, r.epoch, r.wall_clock_s, r.lr, r.loss, r.psnr, r.ms_ssim
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn final_psnr(&self) -> Option<f64> {
        self.rows.last().map(|r| r.psnr)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub steps: u64,
    /// Seconds spent in optimiser steps, excluding evaluation.
    pub train_seconds: f64,
}

impl TrainOutcome {
    pub fn mean_step_seconds(&self) -> f64 {
        self.train_seconds / self.steps.max(1) as f64
    }
}

pub fn train(model: RepNerv<f32>, video: &Video, cfg: &TrainConfig, budget: Budget) -> Result<TrainOutcome> {
    train_masked(model, video, cfg, budget, None)
}

/// [`train`] that re-applies `mask` after every update so pruned weights stay zero.
pub fn train_masked(
    mut model: RepNerv<f32>,
    video: &Video,
    cfg: &TrainConfig,
    budget: Budget,
    mask: Option<&PruneMask>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Budget::Seconds(s) = budget {
        if !(s > 0.0) {
            return Err(Error::InvalidArgument("seconds budget must be positive".into()));
        }
    }
    if let Some(m) = mask {
        m.apply(&mut model)?;
    }
    let mut log = TrainLog::default();
    if budget == Budget::Steps(0) {
        return Ok(TrainOutcome { checkpoint: Checkpoint::new(model, 0), log, steps: 0, train_seconds: 0.0 });
    }
    let m = model.config();
    if (m.frame_height, m.frame_width) != (video.height(), video.width()) {
        return shape_err(format!(
            "model decodes {}x{}, video is {}x{}",
            m.frame_height,
            m.frame_width,
            video.height(),
            video.width()
        ));
    }
    let n = video.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut state = AdamState::new(&model.param_tensors());
    let (mut step, mut epoch, mut elapsed) = (0u64, 0u64, 0.0f64);
    let (mut loss_sum, mut loss_count, mut lr) = (0.0f64, 0u64, cfg.lr0);
    let done = |step: u64, elapsed: f64| match budget {
        Budget::Steps(total) => step >= total,
        Budget::Seconds(s) => elapsed >= s,
    };
    'outer: loop {
        order.shuffle(&mut rng);
        epoch += 1;
        for chunk in order.chunks(cfg.batch) {
            if done(step, elapsed) {
                break 'outer;
            }
            lr = match budget {
                Budget::Steps(total) => cosine_lr(step, total, cfg.lr0)?,
                Budget::Seconds(s) => cosine_at(elapsed / s, cfg.lr0),
            };
            let t0 = Instant::now();
            let ts: Vec<f64> = chunk.iter().map(|&i| normalized_index(i, n)).collect();
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let pred = model.forward_tape(&mut tape, &vars, &ts)?;
            let gt = tape.constant(video.gather(chunk));
            let l = loss_tape(&mut tape, pred, gt, cfg.alpha)?;
            let value = tape.value(l).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { step: step as usize, value });
            }
            let mut grads = tape.backward(l)?;
            let g: Vec<Tensor<f32>> = vars.flat().into_iter().map(|v| grads.take(v)).collect();
            adam_step(&mut model.param_tensors_mut(), &g, &mut state, lr, cfg.beta1, cfg.beta2, cfg.eps)?;
            if let Some(m) = mask {
                m.apply(&mut model)?;
            }
            elapsed += t0.elapsed().as_secs_f64();
            step += 1;
            loss_sum += value;
            loss_count += 1;
        }
        if cfg.eval_every > 0 && epoch % cfg.eval_every as u64 == 0 {
            log.rows.push(log_row(&model, video, step, epoch, elapsed, lr, loss_sum / loss_count.max(1) as f64)?);
            (loss_sum, loss_count) = (0.0, 0);
        }
    }
    if log.rows.last().is_none_or(|r| r.step != step) {
        let mean = if loss_count > 0 { loss_sum / loss_count as f64 } else { log.rows.last().map_or(0.0, |r| r.loss) };
        log.rows.push(log_row(&model, video, step, epoch, elapsed, lr, mean)?);
    }
    Ok(TrainOutcome { checkpoint: Checkpoint::new(model, step), log, steps: step, train_seconds: elapsed })
}

fn log_row(model: &RepNerv<f32>, video: &Video, step: u64, epoch: u64, elapsed: f64, lr: f64, loss: f64) -> Result<LogRow> {
    let r = evaluate(model, video)?;
    Ok(LogRow { step, epoch, wall_clock_s: elapsed, lr, loss, psnr: r.mean_psnr, ms_ssim: r.mean_ms_ssim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::online_rep::RepMode;
    use crate::rep_blocks::BranchKind;
    use crate::video::{synth_video, SynthKind};

    fn tiny_cfg(branches: Vec<BranchKind>) -> ModelConfig {
        ModelConfig {
            frame_height: 16,
            frame_width: 16,
            base_height: 4,
            base_width: 4,
            channels: vec![8, 8, 8],
            mlp_hidden: 16,
            pe_levels: 8,
            branches,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = Tensor::uniform([2, 3, 16, 16], 0.0, 0.8, &mut rng);
        for a in [0.0, 0.3, 0.7, 1.0] {
            assert!(loss(&x, &x, a).unwrap().abs() < 1e-12);
        }
        let y = x.map(|v| v + 0.1);
        assert!((loss(&y, &x, 1.0).unwrap() - 0.1).abs() < 1e-12);
        assert!(loss(&y, &x, 0.7).unwrap() > 0.0);
        assert!(loss(&x, &x.slice_batch(0), 0.7).is_err());
    }

    #[test]
    fn tape_loss_matches_value_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f64> = Tensor::uniform([1, 3, 12, 12], 0.0, 1.0, &mut rng);
        let y: Tensor<f64> = Tensor::uniform([1, 3, 12, 12], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (p, g) = (tape.param(x.clone()), tape.constant(y.clone()));
        let l = loss_tape(&mut tape, p, g, 0.7).unwrap();
        assert!((tape.value(l).data()[0] - loss(&x, &y, 0.7).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 5e-4).unwrap(), 5e-4);
        assert!(cosine_lr(100, 100, 5e-4).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, 100, 5e-4).unwrap() - 2.5e-4).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 5e-4).is_err());
        assert!(cosine_lr(0, 0, 5e-4).is_err());
    }

    #[test]
    fn adam_cases() {
        let mut p = Tensor::<f64>::from_vec([1, 3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let orig = p.clone();
        let mut st = AdamState::new(&[&p]);
        st.m[0] = Tensor::full([1, 3, 1, 1], 0.0);
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[Tensor::zeros([1, 3, 1, 1])], &mut st, 1e-3, 0.5, 0.999, 1e-8).unwrap();
        }
        assert_eq!(p, orig);
        let mut q = Tensor::<f64>::scalar(0.0);
        let mut st = AdamState::new(&[&q]);
        adam_step(&mut [&mut q], &[Tensor::scalar(1.0)], &mut st, 0.01, 0.5, 0.999, 1e-8).unwrap();
        assert!((q.data()[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!(adam_step(&mut [&mut q], &[Tensor::zeros([1, 2, 1, 1])], &mut st, 0.01, 0.5, 0.999, 1e-8).is_err());
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("steps:10".parse::<Budget>().unwrap(), Budget::Steps(10));
        assert_eq!("seconds:2.5".parse::<Budget>().unwrap(), Budget::Seconds(2.5));
        for bad in ["steps", "steps:-1", "minutes:3", "seconds:x"] {
            assert!(bad.parse::<Budget>().is_err(), "{bad}");
        }
    }

    #[test]
    fn zero_budget_returns_initial_model() {
        let v = synth_video(SynthKind::MovingGradient, 4, 16, 16, 0).unwrap();
        let m = RepNerv::init(tiny_cfg(ERB()), RepMode::OnlineTrain, 0).unwrap();
        let out = train(m.clone(), &v, &TrainConfig::default(), Budget::Steps(0)).unwrap();
        assert!(out.log.rows.is_empty());
        assert_eq!(out.checkpoint.model, m);
        assert!(train(m, &v, &TrainConfig::default(), Budget::Seconds(0.0)).is_err());
    }

    #[allow(non_snake_case)]
    fn ERB() -> Vec<BranchKind> {
        crate::rep_blocks::ERB_BRANCHES.to_vec()
    }

    #[test]
    fn constant_frame_is_learned() {
        let v = Video::new(Tensor::full([1, 3, 16, 16], 0.3)).unwrap();
        let m = RepNerv::init(tiny_cfg(vec![BranchKind::Vanilla3x3]), RepMode::ExplicitTrain, 0).unwrap();
        let cfg = TrainConfig { eval_every: 100, lr0: 1e-3, ..TrainConfig::default() };
        let out = train(m, &v, &cfg, Budget::Steps(500)).unwrap();
        let psnr = out.log.final_psnr().unwrap();
        assert!(psnr > 40.0, "psnr {psnr}");
        assert_eq!(out.log.rows.last().unwrap().step, 500);
    }

    #[test]
    fn online_and_explicit_training_agree() {
        let v = synth_video(SynthKind::BouncingSquare, 4, 16, 16, 3).unwrap();
        let cfg = TrainConfig { eval_every: 0, ..TrainConfig::default() };
        let m = RepNerv::init(tiny_cfg(ERB()), RepMode::OnlineTrain, 4).unwrap();
        let mut e = m.clone();
        e.set_train_mode(RepMode::ExplicitTrain).unwrap();
        let a = train(m, &v, &cfg, Budget::Steps(20)).unwrap();
        let b = train(e, &v, &cfg, Budget::Steps(20)).unwrap();
        assert_eq!(a.log.rows.len(), 1);
        assert!((a.log.final_psnr().unwrap() - b.log.final_psnr().unwrap()).abs() < 1e-3);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let v = synth_video(SynthKind::ColorNoiseSmooth, 4, 16, 16, 3).unwrap();
        let cfg = TrainConfig { seed: 11, ..TrainConfig::default() };
        let run = || train(RepNerv::init(tiny_cfg(ERB()), RepMode::OnlineTrain, 2).unwrap(), &v, &cfg, Budget::Steps(10)).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.checkpoint, b.checkpoint);
        let strip = |l: &TrainLog| l.rows.iter().map(|r| (r.step, r.epoch, r.lr, r.loss, r.psnr, r.ms_ssim)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(a.log.rows.len(), 3);
        assert!(a.log.to_csv().starts_with("step,epoch,wall_clock_s,lr,loss,psnr,ms_ssim\n"));
    }

    #[test]
    fn evaluate_matches_trainer_log() {
        let v = synth_video(SynthKind::MovingGradient, 3, 16, 16, 3).unwrap();
        let out = train(RepNerv::init(tiny_cfg(ERB()), RepMode::OnlineTrain, 2).unwrap(), &v, &TrainConfig::default(), Budget::Steps(6)).unwrap();
        let r = evaluate(&out.checkpoint.model, &v).unwrap();
        assert_eq!(r.mean_psnr, out.log.final_psnr().unwrap());
        assert_eq!(r.psnr.len(), 3);
        assert!(r.fps > 0.0);
    }
}
