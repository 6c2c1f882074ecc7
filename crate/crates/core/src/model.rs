//! The decoder network: frame index -> positional encoding -> MLP -> decoder
//! stages (rep layer, pixel shuffle, GELU) -> 3x3 head -> clamp to [0, 1].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::KernelVars;
use crate::online_rep::{LayerVars, RepLayer, RepMode};
use crate::ops::ConvWeight;
use crate::rep_blocks::{BlockConfig, BranchKind, RepBlock, ERB_BRANCHES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub base_height: usize,
    pub base_width: usize,
    /// Pixel-shuffle factor of each decoder stage.
    pub factors: Vec<usize>,
    /// Channel width of the MLP feature map followed by the width after each stage.
    pub channels: Vec<usize>,
    pub mlp_hidden: usize,
    pub pe_base: f64,
    pub pe_levels: usize,
    /// Branches of every decoder-stage block; `["3x3"]` is the plain-conv baseline.
    pub branches: Vec<BranchKind>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_height: 32,
            frame_width: 64,
            base_height: 8,
            base_width: 16,
            factors: vec![2, 2],
            channels: vec![16, 16, 8],
            mlp_hidden: 64,
            pe_base: 1.25,
            pe_levels: 40,
            branches: ERB_BRANCHES.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.factors.is_empty() || self.factors.contains(&0) {
            return bad("factors must be a non-empty list of positive integers".into());
        }
        let prod: usize = self.factors.iter().product();
        if self.base_height * prod != self.frame_height || self.base_width * prod != self.frame_width {
            return bad(format!(
                "base {}x{} times factor product {prod} must equal frame {}x{}",
                self.base_height, self.base_width, self.frame_height, self.frame_width
            ));
        }
        if self.channels.len() != self.factors.len() + 1 {
            return bad(format!(
                "channels needs {} entries (MLP width plus one per stage), got {}",
                self.factors.len() + 1,
                self.channels.len()
            ));
        }
        if self.channels.contains(&0) || self.mlp_hidden == 0 || self.pe_levels == 0 {
            return bad("channel widths, mlp_hidden and pe_levels must be positive".into());
        }
        if !(self.pe_base > 0.0) {
            return bad("pe_base must be positive".into());
        }
        if self.branches.is_empty() {
            return bad("branches must not be empty".into());
        }
        Ok(())
    }

    /// Halving channel schedule with a floor of [`MIN_CHANNELS`].
    pub fn halving_channels(first: usize, stages: usize) -> Vec<usize> {
        let mut v = vec![first];
        for _ in 0..stages {
            let last = *v.last().unwrap();
            v.push((last / 2).max(MIN_CHANNELS));
        }
        v
    }

    pub fn stage_blocks(&self) -> Vec<BlockConfig> {
        (0..self.factors.len())
            .map(|k| {
                let f = self.factors[k];
                BlockConfig {
                    in_channels: self.channels[k],
                    out_channels: self.channels[k + 1] * f * f,
                    branches: self.branches.clone(),
                }
            })
            .collect()
    }

    /// Spatial size at the input of stage `k`.
    pub fn stage_size(&self, k: usize) -> (usize, usize) {
        let p: usize = self.factors[..k].iter().product();
        (self.base_height * p, self.base_width * p)
    }

    pub fn mlp_out(&self) -> usize {
        self.channels[0] * self.base_height * self.base_width
    }
}

/// `(sin(b^0 pi t), cos(b^0 pi t), ..., sin(b^{L-1} pi t), cos(b^{L-1} pi t))`.
pub fn positional_encode(t: f64, base: f64, levels: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("frame position {t} outside [0, 1]")));
    }
    let mut v = Vec::with_capacity(2 * levels);
    for l in 0..levels {
        let a = base.powi(l as i32) * std::f64::consts::PI * t;
        v.push(a.sin());
        v.push(a.cos());
    }
    Ok(v)
}

/// `index / (T - 1)`; a single-frame video maps to 0.
pub fn normalized_index(index: usize, frames: usize) -> f64 {
    if frames <= 1 {
        0.0
    } else {
        index as f64 / (frames - 1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub mlp: [KernelVars; 2],
    pub stages: Vec<LayerVars>,
    pub head: KernelVars,
}

impl ModelVars {
    /// Same order as [`RepNerv::param_tensors`].
    pub fn flat(&self) -> Vec<Var> {
        let mut v = vec![self.mlp[0].kernel, self.mlp[0].bias, self.mlp[1].kernel, self.mlp[1].bias];
        for s in &self.stages {
            v.extend(s.flat());
        }
        v.push(self.head.kernel);
        v.push(self.head.bias);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepNerv<T = f32> {
    cfg: ModelConfig,
    mlp: [ConvWeight<T>; 2],
    stages: Vec<RepLayer<T>>,
    head: ConvWeight<T>,
}

fn fan_in_uniform<T: Scalar>(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let b = 1.0 / ((shape[1] * shape[2] * shape[3]) as f64).sqrt();
    Tensor::uniform(shape, -b, b, rng)
}

impl<T: Scalar> RepNerv<T> {
    /// Seeded initialisation in one of the two train-form modes.
    pub fn init(cfg: ModelConfig, mode: RepMode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pe = 2 * cfg.pe_levels;
        let dense = |i: usize, o: usize, rng: &mut ChaCha8Rng| -> ConvWeight<T> {
            let kernel = fan_in_uniform([o, i, 1, 1], rng);
            let b = 1.0 / (i as f64).sqrt();
            ConvWeight {
                kernel,
                bias: Tensor::uniform([1, o, 1, 1], -b, b, rng),
            }
        };
        let mlp = [dense(pe, cfg.mlp_hidden, &mut rng), dense(cfg.mlp_hidden, cfg.mlp_out(), &mut rng)];
        let stages = cfg
            .stage_blocks()
            .iter()
            .map(|b| RepLayer::train(RepBlock::init(b, &mut rng), mode))
            .collect::<Result<Vec<_>>>()?;
        let last = *cfg.channels.last().unwrap();
        let head = ConvWeight {
            kernel: fan_in_uniform([3, last, 3, 3], &mut rng),
            bias: Tensor::full([1, 3, 1, 1], T::from_f64_lossy(0.5)),
        };
        Ok(Self { cfg, mlp, stages, head })
    }

    pub fn from_parts(cfg: ModelConfig, mlp: [ConvWeight<T>; 2], stages: Vec<RepLayer<T>>, head: ConvWeight<T>) -> Result<Self> {
        cfg.validate()?;
        let blocks = cfg.stage_blocks();
        if stages.len() != blocks.len() || stages.iter().zip(&blocks).any(|(s, b)| s.cfg() != b) {
            return Err(Error::InvalidArgument("stage layers do not match the model config".into()));
        }
        let pe = 2 * cfg.pe_levels;
        if mlp[0].kernel.shape() != [cfg.mlp_hidden, pe, 1, 1]
            || mlp[1].kernel.shape() != [cfg.mlp_out(), cfg.mlp_hidden, 1, 1]
            || head.kernel.shape() != [3, *cfg.channels.last().unwrap(), 3, 3]
        {
            return Err(Error::Shape("MLP or head weights do not match the model config".into()));
        }
        Ok(Self { cfg, mlp, stages, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn stages(&self) -> &[RepLayer<T>] {
        &self.stages
    }

    pub fn mlp(&self) -> &[ConvWeight<T>; 2] {
        &self.mlp
    }

    pub fn head(&self) -> &ConvWeight<T> {
        &self.head
    }

    /// Mode shared by all stages, or `None` for a mixed model.
    pub fn mode(&self) -> Option<RepMode> {
        let m = self.stages.first()?.mode();
        self.stages.iter().all(|s| s.mode() == m).then_some(m)
    }

    pub fn set_train_mode(&mut self, mode: RepMode) -> Result<()> {
        self.stages.iter_mut().try_for_each(|s| s.set_train_mode(mode))
    }

    pub fn is_deployed(&self) -> bool {
        self.stages.iter().all(|s| s.mode() == RepMode::Deployed)
    }

    /// Replaces every rep layer by its single fused convolution.
    pub fn structural_fuse(&self) -> Result<Self> {
        Ok(Self {
            cfg: self.cfg.clone(),
            mlp: self.mlp.clone(),
            stages: self.stages.iter().map(|s| s.structural_fuse()).collect::<Result<_>>()?,
            head: self.head.clone(),
        })
    }

    pub fn register(&self, tape: &mut Tape<T>) -> ModelVars {
        let mut reg = |w: &ConvWeight<T>| KernelVars {
            kernel: tape.param(w.kernel.clone()),
            bias: tape.param(w.bias.clone()),
        };
        let mlp = [reg(&self.mlp[0]), reg(&self.mlp[1])];
        let stages = self.stages.iter().map(|s| s.register(tape)).collect();
        let head = KernelVars {
            kernel: tape.param(self.head.kernel.clone()),
            bias: tape.param(self.head.bias.clone()),
        };
        ModelVars { mlp, stages, head }
    }

    /// Records a batched forward pass for the normalised frame positions `ts`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, vars: &ModelVars, ts: &[f64]) -> Result<Var> {
        if ts.is_empty() {
            return Err(Error::InvalidArgument("no frame positions".into()));
        }
        let cfg = &self.cfg;
        let pe_len = 2 * cfg.pe_levels;
        let mut enc = Vec::with_capacity(ts.len() * pe_len);
        for &t in ts {
            enc.extend(positional_encode(t, cfg.pe_base, cfg.pe_levels)?.into_iter().map(T::from_f64_lossy));
        }
        let n = ts.len();
        let x = tape.constant(Tensor::from_vec([n, pe_len, 1, 1], enc)?);
        let h = tape.linear(x, vars.mlp[0].kernel, vars.mlp[0].bias)?;
        let h = tape.gelu(h)?;
        let h = tape.linear(h, vars.mlp[1].kernel, vars.mlp[1].bias)?;
        let mut h = tape.reshape(h, [n, cfg.channels[0], cfg.base_height, cfg.base_width])?;
        for ((layer, lv), &f) in self.stages.iter().zip(&vars.stages).zip(&cfg.factors) {
            h = layer.forward_tape(tape, lv, h)?;
            h = tape.pixel_shuffle(h, f)?;
            h = tape.gelu(h)?;
        }
        let y = tape.conv2d(h, vars.head.kernel, Some(vars.head.bias), 1, 1)?;
        tape.push(Op::Clamp01 { x: y })
    }

    /// Decodes frames at normalised positions `ts`, shape (len, 3, H, W).
    pub fn decode(&self, ts: &[f64]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let y = self.forward_tape(&mut tape, &vars, ts)?;
        Ok(tape.value(y).clone())
    }

    pub fn decode_frame(&self, index: usize, frames: usize) -> Result<Tensor<T>> {
        self.decode(&[normalized_index(index, frames)])
    }

    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.mlp[0].kernel, &self.mlp[0].bias, &self.mlp[1].kernel, &self.mlp[1].bias];
        for s in &self.stages {
            v.extend(s.param_tensors());
        }
        v.push(&self.head.kernel);
        v.push(&self.head.bias);
        v
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let [m0, m1] = &mut self.mlp;
        let mut v = vec![&mut m0.kernel, &mut m0.bias, &mut m1.kernel, &mut m1.bias];
        for s in &mut self.stages {
            v.extend(s.param_tensors_mut());
        }
        v.push(&mut self.head.kernel);
        v.push(&mut self.head.bias);
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["mlp0.weight", "mlp0.bias", "mlp1.weight", "mlp1.bias"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for (k, s) in self.stages.iter().enumerate() {
            v.extend(s.param_names().into_iter().map(|n| format!("stage{k}.{n}")));
        }
        v.push("head.weight".into());
        v.push("head.bias".into());
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> RepNerv<U> {
        let cw = |w: &ConvWeight<T>| ConvWeight { kernel: w.kernel.cast(), bias: w.bias.cast() };
        let stages = self
            .stages
            .iter()
            .map(|s| match s.params() {
                crate::online_rep::LayerParams::Branched(b) => RepLayer::train(
                    RepBlock {
                        cfg: b.cfg.clone(),
                        branches: b
                            .branches
                            .iter()
                            .map(|br| crate::rep_blocks::BranchSpec {
                                kind: br.kind,
                                params: br.params.iter().map(|p| p.cast()).collect(),
                            })
                            .collect(),
                    },
                    s.mode(),
                )
                .expect("train-form layer"),
                crate::online_rep::LayerParams::Fused(f) => {
                    RepLayer::deployed(s.cfg().clone(), crate::fusion::FusedConv(cw(&f.0))).expect("fused layer")
                }
            })
            .collect();
        RepNerv {
            cfg: self.cfg.clone(),
            mlp: [cw(&self.mlp[0]), cw(&self.mlp[1])],
            stages,
            head: cw(&self.head),
        }
    }
}

/// Parameter count and multiply-accumulates for one decoded frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Complexity {
    pub params: usize,
    pub macs: usize,
}

/// Params and MACs of a `k x k` same-padded convolution over an `h x w` map.
pub fn conv_cost(in_ch: usize, out_ch: usize, k: usize, h: usize, w: usize) -> Complexity {
    Complexity {
        params: in_ch * out_ch * k * k + out_ch,
        macs: in_ch * out_ch * k * k * h * w,
    }
}

/// Explicit-branch MACs over an `h x w` map (sequential stages see the padded map).
fn branch_macs(kind: BranchKind, i: usize, o: usize, h: usize, w: usize) -> usize {
    use BranchKind::*;
    let hw = h * w;
    let padded = (h + 2) * (w + 2);
    let proj = if i != o { i * o * padded } else { 0 };
    match kind {
        Vanilla3x3 => 9 * i * o * hw,
        Asym1x3 | Asym3x1 => 3 * i * o * hw,
        Point1x1 => i * o * hw,
        Seq1x1_3x3 => i * i * padded + 9 * i * o * hw,
        Seq1x1_3x3_1x1 => i * i * padded + 9 * i * i * hw + i * o * hw,
        AvgPool3x3 => proj + 9 * o * hw,
        ScaledFixed(_) => proj + 9 * o * hw + o * hw,
    }
}

/// MACs spent turning branch parameters into the fused kernel.
fn fusion_macs(kind: BranchKind, i: usize, o: usize) -> usize {
    use BranchKind::*;
    match kind {
        Vanilla3x3 | Asym1x3 | Asym3x1 | Point1x1 => 0,
        Seq1x1_3x3 => 9 * o * i * i + 9 * o * i,
        Seq1x1_3x3_1x1 => (9 * i * i * i + 9 * i * i) + (9 * o * i * i + o * i),
        AvgPool3x3 | ScaledFixed(_) if i != o => 9 * o * o * i + 9 * o * o,
        AvgPool3x3 => 0,
        ScaledFixed(_) => 9 * o,
    }
}

pub fn count_params_and_flops(cfg: &ModelConfig, mode: RepMode) -> Result<Complexity> {
    cfg.validate()?;
    let pe = 2 * cfg.pe_levels;
    let mut params = pe * cfg.mlp_hidden + cfg.mlp_hidden + cfg.mlp_hidden * cfg.mlp_out() + cfg.mlp_out();
    let mut macs = pe * cfg.mlp_hidden + cfg.mlp_hidden * cfg.mlp_out();
    for (k, b) in cfg.stage_blocks().iter().enumerate() {
        let (h, w) = cfg.stage_size(k);
        let (i, o) = (b.in_channels, b.out_channels);
        let plain = conv_cost(i, o, 3, h, w);
        match mode {
            RepMode::Deployed => {
                params += plain.params;
                macs += plain.macs;
            }
            RepMode::OnlineTrain => {
                params += b.train_param_count();
                macs += plain.macs + b.branches.iter().map(|&kd| fusion_macs(kd, i, o)).sum::<usize>();
            }
            RepMode::ExplicitTrain => {
                params += b.train_param_count();
                macs += b.branches.iter().map(|&kd| branch_macs(kd, i, o, h, w)).sum::<usize>();
            }
        }
    }
    let head = conv_cost(*cfg.channels.last().unwrap(), 3, 3, cfg.frame_height, cfg.frame_width);
    Ok(Complexity {
        params: params + head.params,
        macs: macs + head.macs,
    })
}
