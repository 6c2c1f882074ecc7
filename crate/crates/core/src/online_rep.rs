//! Layers that train as multi-branch blocks and deploy as one convolution.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{fuse_block, fuse_block_tape, FusedConv, KernelVars};
use crate::ops::ConvWeight;
use crate::rep_blocks::{block_forward_explicit_tape, BlockConfig, RepBlock};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepMode {
    /// Fuse branch parameters on the tape each forward, then run one convolution.
    OnlineTrain,
    /// Run every branch and sum the outputs.
    ExplicitTrain,
    /// A single 3x3 convolution; branch parameters are gone.
    Deployed,
}

impl std::str::FromStr for RepMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" | "online_train" => Ok(Self::OnlineTrain),
            "explicit" | "explicit_train" => Ok(Self::ExplicitTrain),
            "deployed" => Ok(Self::Deployed),
            _ => Err(Error::InvalidArgument(format!("unknown layer mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T> {
    Branched(RepBlock<T>),
    Fused(FusedConv<T>),
}

/// Parameters of one layer as recorded on a tape.
#[derive(Clone, Debug)]
pub enum LayerVars {
    Branched(Vec<Vec<Var>>),
    Fused(KernelVars),
}

impl LayerVars {
    pub fn flat(&self) -> Vec<Var> {
        match self {
            Self::Branched(v) => v.iter().flatten().copied().collect(),
            Self::Fused(kv) => vec![kv.kernel, kv.bias],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepLayer<T = f32> {
    cfg: BlockConfig,
    mode: RepMode,
    params: LayerParams<T>,
}

impl<T: Scalar> RepLayer<T> {
    pub fn train(block: RepBlock<T>, mode: RepMode) -> Result<Self> {
        if mode == RepMode::Deployed {
            return Err(Error::Mode("use RepLayer::deployed for fused layers".into()));
        }
        Ok(Self {
            cfg: block.cfg.clone(),
            mode,
            params: LayerParams::Branched(block),
        })
    }

    pub fn deployed(cfg: BlockConfig, fused: FusedConv<T>) -> Result<Self> {
        let w = fused.weight();
        if w.kernel.shape() != [cfg.out_channels, cfg.in_channels, 3, 3] {
            return Err(Error::Shape(format!(
                "fused kernel {:?} does not match {}->{}",
                w.kernel.shape(),
                cfg.in_channels,
                cfg.out_channels
            )));
        }
        Ok(Self {
            cfg,
            mode: RepMode::Deployed,
            params: LayerParams::Fused(fused),
        })
    }

    pub fn cfg(&self) -> &BlockConfig {
        &self.cfg
    }

    pub fn mode(&self) -> RepMode {
        self.mode
    }

    pub fn params(&self) -> &LayerParams<T> {
        &self.params
    }

    /// Switch between the two train-form modes.
    pub fn set_train_mode(&mut self, mode: RepMode) -> Result<()> {
        if self.mode == RepMode::Deployed || mode == RepMode::Deployed {
            return Err(Error::Mode("cannot move into or out of deployed form".into()));
        }
        self.mode = mode;
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape<T>) -> LayerVars {
        match &self.params {
            LayerParams::Branched(b) => LayerVars::Branched(b.register(tape)),
            LayerParams::Fused(f) => LayerVars::Fused(KernelVars {
                kernel: tape.param(f.0.kernel.clone()),
                bias: tape.param(f.0.bias.clone()),
            }),
        }
    }

    /// Records this layer's forward pass in its current mode.
    pub fn forward_tape(&self, tape: &mut Tape<T>, vars: &LayerVars, x: Var) -> Result<Var> {
        match (self.mode, vars) {
            (RepMode::OnlineTrain, LayerVars::Branched(v)) => {
                let kv = fuse_block_tape(tape, &self.cfg, v)?;
                tape.conv2d(x, kv.kernel, Some(kv.bias), 1, 1)
            }
            (RepMode::ExplicitTrain, LayerVars::Branched(v)) => {
                block_forward_explicit_tape(tape, &self.cfg, v, x)
            }
            (RepMode::Deployed, LayerVars::Fused(kv)) => {
                tape.conv2d(x, kv.kernel, Some(kv.bias), 1, 1)
            }
            _ => Err(Error::Mode("layer variables do not match layer mode".into())),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward_tape(&mut tape, &vars, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Forward pass through the on-tape fused kernel. Only valid in online mode.
    pub fn online_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.mode != RepMode::OnlineTrain {
            return Err(Error::Mode(format!("online_forward needs OnlineTrain, layer is {:?}", self.mode)));
        }
        self.forward(x)
    }

    /// Collapses the branches into one convolution.
    pub fn structural_fuse(&self) -> Result<Self> {
        match &self.params {
            LayerParams::Fused(_) => Err(Error::Mode("layer is already deployed".into())),
            LayerParams::Branched(b) => Self::deployed(self.cfg.clone(), fuse_block(b)?),
        }
    }

    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        match &self.params {
            LayerParams::Branched(b) => b.branches.iter().flat_map(|s| s.params.iter()).collect(),
            LayerParams::Fused(f) => vec![&f.0.kernel, &f.0.bias],
        }
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match &mut self.params {
            LayerParams::Branched(b) => b.branches.iter_mut().flat_map(|s| s.params.iter_mut()).collect(),
            LayerParams::Fused(f) => vec![&mut f.0.kernel, &mut f.0.bias],
        }
    }

    /// Names parallel to [`Self::param_tensors`].
    pub fn param_names(&self) -> Vec<String> {
        match &self.params {
            LayerParams::Branched(b) => b
                .branches
                .iter()
                .enumerate()
                .flat_map(|(j, s)| {
                    s.kind
                        .param_shapes(self.cfg.in_channels, self.cfg.out_channels)
                        .into_iter()
                        .map(move |(n, _)| format!("branch{j}.{}.{n}", s.kind))
                })
                .collect(),
            LayerParams::Fused(_) => vec!["fused.weight".into(), "fused.bias".into()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn fused_weight(&self) -> Result<ConvWeight<T>> {
        match &self.params {
            LayerParams::Fused(f) => Ok(f.0.clone()),
            LayerParams::Branched(b) => Ok(fuse_block(b)?.0),
        }
    }
}

/// Median-of-group-means wall-clock seconds per forward+backward.
#[derive(Clone, Copy, Debug)]
pub struct StepTimes {
    pub explicit: f64,
    pub online: f64,
    pub plain: f64,
}

fn time_layer<T: Scalar>(layer: &RepLayer<T>, x: &Tensor<T>, reps: usize) -> Result<f64> {
    let run = || -> Result<()> {
        let mut tape = Tape::new();
        let vars = layer.register(&mut tape);
        let xv = tape.constant(x.clone());
        let y = layer.forward_tape(&mut tape, &vars, xv)?;
        let s = tape.sum(y)?;
        let g = tape.backward(s)?;
        std::hint::black_box(&g);
        Ok(())
    };
    for _ in 0..3 {
        run()?;
    }
    let groups = 5;
    let per = reps.div_ceil(groups);
    let mut means = Vec::with_capacity(groups);
    for _ in 0..groups {
        let t0 = Instant::now();
        for _ in 0..per {
            run()?;
        }
        means.push(t0.elapsed().as_secs_f64() / per as f64);
    }
    means.sort_by(|a, b| a.total_cmp(b));
    Ok(means[groups / 2])
}

/// Times one training step of the same block in explicit, online and deployed form.
pub fn step_time_probe<T: Scalar>(block: &RepBlock<T>, x: &Tensor<T>, repetitions: usize) -> Result<StepTimes> {
    if repetitions < 10 {
        return Err(Error::InvalidArgument("step_time_probe needs at least 10 repetitions".into()));
    }
    let explicit = RepLayer::train(block.clone(), RepMode::ExplicitTrain)?;
    let online = RepLayer::train(block.clone(), RepMode::OnlineTrain)?;
    let plain = online.structural_fuse()?;
    Ok(StepTimes {
        explicit: time_layer(&explicit, x, repetitions)?,
        online: time_layer(&online, x, repetitions)?,
        plain: time_layer(&plain, x, repetitions)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Op;
    use crate::ops;
    use crate::rep_blocks::{BranchKind, BranchSpec};
    use crate::tensor::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vanilla_only_erb_is_plain_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut blk = RepBlock::<f32>::zeros(&BlockConfig::erb(3, 4));
        blk.branches[0] = BranchSpec::random(BranchKind::Vanilla3x3, 3, 4, &mut rng);
        let w = ConvWeight::new(blk.branches[0].params[0].clone(), blk.branches[0].params[1].clone()).unwrap();
        let layer = RepLayer::train(blk, RepMode::OnlineTrain).unwrap();
        let x = Tensor::uniform([1, 3, 6, 6], -1.0, 1.0, &mut rng);
        assert_eq!(layer.online_forward(&x).unwrap(), ops::conv2d(&x, &w, 1).unwrap());
    }

    #[test]
    fn modes_agree_and_deploy_preserves_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blk = RepBlock::<f32>::random(&BlockConfig::erb(4, 8), &mut rng);
        let online = RepLayer::train(blk.clone(), RepMode::OnlineTrain).unwrap();
        let explicit = RepLayer::train(blk, RepMode::ExplicitTrain).unwrap();
        let deployed = online.structural_fuse().unwrap();
        assert_eq!(deployed.mode(), RepMode::Deployed);
        assert_eq!(deployed.param_count(), 8 * 4 * 9 + 8);
        assert!(deployed.param_count() < online.param_count());
        for _ in 0..50 {
            let x = Tensor::uniform([1, 4, 7, 5], -1.0, 1.0, &mut rng);
            let a = online.online_forward(&x).unwrap();
            let b = explicit.forward(&x).unwrap();
            let d = deployed.forward(&x).unwrap();
            assert!(rel_err(&a, &b) <= 1e-5);
            assert!(rel_err(&d, &a) <= 1e-6);
        }
    }

    #[test]
    fn mode_errors() {
        let blk = RepBlock::<f32>::zeros(&BlockConfig::erb(2, 2));
        let explicit = RepLayer::train(blk.clone(), RepMode::ExplicitTrain).unwrap();
        assert!(explicit.online_forward(&Tensor::zeros([1, 2, 3, 3])).is_err());
        let dep = explicit.structural_fuse().unwrap();
        assert!(dep.structural_fuse().is_err());
        assert!(RepLayer::train(blk, RepMode::Deployed).is_err());
    }

    #[test]
    fn single_vanilla_deploys_bit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let blk = RepBlock::<f32>::random(&BlockConfig::plain(3, 3), &mut rng);
        let dep = RepLayer::train(blk.clone(), RepMode::OnlineTrain).unwrap().structural_fuse().unwrap();
        let w = dep.fused_weight().unwrap();
        assert_eq!(w.kernel, blk.branches[0].params[0]);
        assert_eq!(w.bias, blk.branches[0].params[1]);
    }

    #[test]
    fn online_forward_runs_one_input_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blk = RepBlock::<f32>::random(&BlockConfig::erb(3, 6), &mut rng);
        // Explicit: three branches read x directly, the sequential chain reads its padded copy.
        for (mode, expected, total) in [(RepMode::OnlineTrain, 1, 1), (RepMode::ExplicitTrain, 3, 6)] {
            let layer = RepLayer::train(blk.clone(), mode).unwrap();
            let mut tape = Tape::new();
            let vars = layer.register(&mut tape);
            let x = tape.constant(Tensor::uniform([1, 3, 5, 5], -1.0, 1.0, &mut rng));
            layer.forward_tape(&mut tape, &vars, x).unwrap();
            assert_eq!(tape.convs_over(x), expected, "{mode:?}");
            assert_eq!(tape.count_ops(|op| matches!(op, Op::Conv2d { .. })), total, "{mode:?}");
        }
    }

    #[test]
    fn probe_requires_repetitions() {
        let blk = RepBlock::<f32>::zeros(&BlockConfig::erb(2, 2));
        assert!(step_time_probe(&blk, &Tensor::zeros([1, 2, 4, 4]), 5).is_err());
        let t = step_time_probe(&blk, &Tensor::zeros([1, 2, 4, 4]), 10).unwrap();
        assert!(t.explicit > 0.0 && t.online > 0.0 && t.plain > 0.0);
    }
}
