//! Closed-form collapse of a multi-branch block into one 3x3 convolution.
//!
//! All algebra is recorded on a [`Tape`] so the same code path serves online
//! training (gradients flow back into each branch) and one-off structural
//! fusion (a throwaway tape of constants).

use crate::autodiff::{Op, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::{self, ConvWeight};
use crate::rep_blocks::{BlockConfig, BranchKind, BranchSpec, RepBlock, BOX_3X3};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A single 3x3 convolution equivalent to a whole block.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv<T = f32>(pub ConvWeight<T>);

impl<T: Scalar> FusedConv<T> {
    pub fn weight(&self) -> &ConvWeight<T> {
        &self.0
    }

    pub fn into_weight(self) -> ConvWeight<T> {
        self.0
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, &self.0, 1)
    }
}

/// Kernel/bias pair of tape variables.
#[derive(Clone, Copy, Debug)]
pub struct KernelVars {
    pub kernel: Var,
    pub bias: Var,
}

fn zero_bias<T: Scalar>(tape: &mut Tape<T>, ch: usize) -> Var {
    tape.constant(Tensor::zeros([1, ch, 1, 1]))
}

/// Records the 3x3 equivalent of one branch.
pub fn fuse_branch_tape<T: Scalar>(
    tape: &mut Tape<T>,
    kind: BranchKind,
    p: &[Var],
    in_ch: usize,
    out_ch: usize,
) -> Result<KernelVars> {
    use BranchKind::*;
    let kv = |kernel, bias| KernelVars { kernel, bias };
    Ok(match kind {
        Vanilla3x3 => kv(p[0], p[1]),
        Asym1x3 | Asym3x1 | Point1x1 => kv(tape.push(Op::PadKernel { k: p[0] })?, p[1]),
        Seq1x1_3x3 => {
            let t = fuse_sequential_pair_tape(tape, p[0], p[1], p[2], p[3])?;
            kv(t.kernel, t.bias)
        }
        Seq1x1_3x3_1x1 => {
            let t = fuse_sequential_pair_tape(tape, p[0], p[1], p[2], p[3])?;
            fuse_post_pointwise_tape(tape, t, p[4], p[5])?
        }
        AvgPool3x3 | ScaledFixed(_) => {
            let per_channel = match kind {
                ScaledFixed(f) => {
                    let s = *p.last().expect("scale parameter");
                    tape.push(Op::ScaledFilterKernel { s, filter: *f.taps() })?
                }
                _ => tape.constant(ops::depthwise_kernel(out_ch, &BOX_3X3)),
            };
            if in_ch != out_ch {
                let kernel = tape.push(Op::ComposePointwise { outer: per_channel, inner: p[0] })?;
                let bias = tape.push(Op::BiasThrough { k: per_channel, b: p[1] })?;
                kv(kernel, bias)
            } else {
                let bias = zero_bias(tape, out_ch);
                kv(per_channel, bias)
            }
        }
    })
}

/// 1x1 then 3x3: `K[o][i] = sum_m Ks2[o][m] * Ks1[m][i]`,
/// `B[o] = Bs2[o] + sum_m Bs1[m] * sum_hw Ks2[o][m]`.
pub fn fuse_sequential_pair_tape<T: Scalar>(
    tape: &mut Tape<T>,
    ks1: Var,
    bs1: Var,
    ks2: Var,
    bs2: Var,
) -> Result<KernelVars> {
    let k1 = tape.value(ks1).shape();
    let k2 = tape.value(ks2).shape();
    if k1[2] != 1 || k1[3] != 1 || k2[2] != 3 || k2[3] != 3 {
        return shape_err(format!("sequential pair expects 1x1 then 3x3, got {k1:?}, {k2:?}"));
    }
    if k2[1] != k1[0] {
        return shape_err(format!("sequential pair inner channels {} vs {}", k1[0], k2[1]));
    }
    let kernel = tape.push(Op::ComposePointwise { outer: ks2, inner: ks1 })?;
    let through = tape.push(Op::BiasThrough { k: ks2, b: bs1 })?;
    let bias = tape.add(bs2, through)?;
    Ok(KernelVars { kernel, bias })
}

/// Appends a 1x1 after a fused 3x3: `K'[o] = sum_m Ks3[o][m] * K[m]`,
/// `B'[o] = Bs3[o] + sum_m Ks3[o][m] * B[m]`.
pub fn fuse_post_pointwise_tape<T: Scalar>(
    tape: &mut Tape<T>,
    tmp: KernelVars,
    ks3: Var,
    bs3: Var,
) -> Result<KernelVars> {
    let k3 = tape.value(ks3).shape();
    let kt = tape.value(tmp.kernel).shape();
    if k3[2] != 1 || k3[3] != 1 {
        return shape_err(format!("post-pointwise kernel must be 1x1, got {k3:?}"));
    }
    if k3[1] != kt[0] {
        return shape_err(format!("post-pointwise channels {} vs {}", k3[1], kt[0]));
    }
    let kernel = tape.push(Op::ComposePointwise { outer: ks3, inner: tmp.kernel })?;
    let through = tape.push(Op::BiasThrough { k: ks3, b: tmp.bias })?;
    let bias = tape.add(bs3, through)?;
    Ok(KernelVars { kernel, bias })
}

/// Records the fused kernel of a whole block, summing branches left to right.
pub fn fuse_block_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &BlockConfig,
    vars: &[Vec<Var>],
) -> Result<KernelVars> {
    let mut acc: Option<KernelVars> = None;
    for (kind, p) in cfg.branches.iter().zip(vars) {
        let f = fuse_branch_tape(tape, *kind, p, cfg.in_channels, cfg.out_channels)?;
        acc = Some(match acc {
            None => f,
            Some(a) => KernelVars {
                kernel: tape.add(a.kernel, f.kernel)?,
                bias: tape.add(a.bias, f.bias)?,
            },
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("block has no branches".into()))
}

fn read_out<T: Scalar>(tape: &Tape<T>, kv: KernelVars) -> Result<ConvWeight<T>> {
    ConvWeight::new(tape.value(kv.kernel).clone(), tape.value(kv.bias).clone())
}

pub fn pad_to_3x3<T: Scalar>(k: &Tensor<T>) -> Result<Tensor<T>> {
    ops::pad_kernel_3x3(k)
}

pub fn fuse_asymmetric<T: Scalar>(
    k13: &Tensor<T>,
    b13: &Tensor<T>,
    k31: &Tensor<T>,
    b31: &Tensor<T>,
) -> Result<ConvWeight<T>> {
    if k13.shape()[2..] != [1, 3] || k31.shape()[2..] != [3, 1] {
        return shape_err("asymmetric pair expects 1x3 and 3x1 kernels");
    }
    let mut tape = Tape::new();
    let vars = [k13, b13, k31, b31].map(|t| tape.constant(t.clone()));
    let p13 = tape.push(Op::PadKernel { k: vars[0] })?;
    let p31 = tape.push(Op::PadKernel { k: vars[2] })?;
    let kernel = tape.add(p13, p31)?;
    let bias = tape.add(vars[1], vars[3])?;
    read_out(&tape, KernelVars { kernel, bias })
}

pub fn fuse_sequential_pair<T: Scalar>(
    ks1: &Tensor<T>,
    bs1: &Tensor<T>,
    ks2: &Tensor<T>,
    bs2: &Tensor<T>,
) -> Result<ConvWeight<T>> {
    let mut tape = Tape::new();
    let v = [ks1, bs1, ks2, bs2].map(|t| tape.constant(t.clone()));
    let kv = fuse_sequential_pair_tape(&mut tape, v[0], v[1], v[2], v[3])?;
    read_out(&tape, kv)
}

pub fn fuse_post_pointwise<T: Scalar>(
    k_tmp: &Tensor<T>,
    b_tmp: &Tensor<T>,
    ks3: &Tensor<T>,
    bs3: &Tensor<T>,
) -> Result<ConvWeight<T>> {
    let mut tape = Tape::new();
    let v = [k_tmp, b_tmp, ks3, bs3].map(|t| tape.constant(t.clone()));
    let kv = fuse_post_pointwise_tape(&mut tape, KernelVars { kernel: v[0], bias: v[1] }, v[2], v[3])?;
    read_out(&tape, kv)
}

pub fn fuse_branch<T: Scalar>(spec: &BranchSpec<T>, in_ch: usize, out_ch: usize) -> Result<ConvWeight<T>> {
    let spec = BranchSpec::new(spec.kind, in_ch, out_ch, spec.params.clone())?;
    let mut tape = Tape::new();
    let p: Vec<Var> = spec.params.iter().map(|t| tape.constant(t.clone())).collect();
    let kv = fuse_branch_tape(&mut tape, spec.kind, &p, in_ch, out_ch)?;
    read_out(&tape, kv)
}

pub fn fuse_block<T: Scalar>(block: &RepBlock<T>) -> Result<FusedConv<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Vec<Var>> = block
        .branches
        .iter()
        .map(|b| b.params.iter().map(|t| tape.constant(t.clone())).collect())
        .collect();
    let kv = fuse_block_tape(&mut tape, &block.cfg, &vars)?;
    Ok(FusedConv(read_out(&tape, kv)?))
}
