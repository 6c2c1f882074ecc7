//! Multi-branch reparameterization blocks and the ablation branch library.
//!
//! Every branch is a linear map whose explicit forward is defined here; its
//! single 3x3 equivalent lives in [`crate::fusion`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Op, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
pub const LAPLACIAN: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
pub const BOX_3X3: [f64; 9] = [1.0 / 9.0; 9];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FixedFilter {
    SobelX,
    SobelY,
    Laplacian,
}

impl FixedFilter {
    pub fn taps(self) -> &'static [f64; 9] {
        match self {
            Self::SobelX => &SOBEL_X,
            Self::SobelY => &SOBEL_Y,
            Self::Laplacian => &LAPLACIAN,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BranchKind {
    Vanilla3x3,
    Asym1x3,
    Asym3x1,
    Point1x1,
    Seq1x1_3x3,
    Seq1x1_3x3_1x1,
    AvgPool3x3,
    ScaledFixed(FixedFilter),
}

impl BranchKind {
    pub const ALL: [BranchKind; 10] = [
        Self::Vanilla3x3,
        Self::Asym1x3,
        Self::Asym3x1,
        Self::Point1x1,
        Self::Seq1x1_3x3,
        Self::Seq1x1_3x3_1x1,
        Self::AvgPool3x3,
        Self::ScaledFixed(FixedFilter::SobelX),
        Self::ScaledFixed(FixedFilter::SobelY),
        Self::ScaledFixed(FixedFilter::Laplacian),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla3x3 => "3x3",
            Self::Asym1x3 => "1x3",
            Self::Asym3x1 => "3x1",
            Self::Point1x1 => "1x1",
            Self::Seq1x1_3x3 => "1x1-3x3",
            Self::Seq1x1_3x3_1x1 => "1x1-3x3-1x1",
            Self::AvgPool3x3 => "avgpool",
            Self::ScaledFixed(FixedFilter::SobelX) => "sobel_x",
            Self::ScaledFixed(FixedFilter::SobelY) => "sobel_y",
            Self::ScaledFixed(FixedFilter::Laplacian) => "laplacian",
        }
    }

    /// Fixed-filter branches need a learnable 1x1 projection when the block changes width.
    fn projected(self, in_ch: usize, out_ch: usize) -> bool {
        matches!(self, Self::AvgPool3x3 | Self::ScaledFixed(_)) && in_ch != out_ch
    }

    /// Parameter names and shapes, in storage order. Sequential branches run
    /// their hidden stages at the input width.
    pub fn param_shapes(self, in_ch: usize, out_ch: usize) -> Vec<(&'static str, [usize; 4])> {
        let (i, o) = (in_ch, out_ch);
        let bias = |c| [1, c, 1, 1];
        match self {
            Self::Vanilla3x3 => vec![("weight", [o, i, 3, 3]), ("bias", bias(o))],
            Self::Asym1x3 => vec![("weight", [o, i, 1, 3]), ("bias", bias(o))],
            Self::Asym3x1 => vec![("weight", [o, i, 3, 1]), ("bias", bias(o))],
            Self::Point1x1 => vec![("weight", [o, i, 1, 1]), ("bias", bias(o))],
            Self::Seq1x1_3x3 => vec![
                ("s1_weight", [i, i, 1, 1]),
                ("s1_bias", bias(i)),
                ("s2_weight", [o, i, 3, 3]),
                ("s2_bias", bias(o)),
            ],
            Self::Seq1x1_3x3_1x1 => vec![
                ("s1_weight", [i, i, 1, 1]),
                ("s1_bias", bias(i)),
                ("s2_weight", [i, i, 3, 3]),
                ("s2_bias", bias(i)),
                ("s3_weight", [o, i, 1, 1]),
                ("s3_bias", bias(o)),
            ],
            Self::AvgPool3x3 => {
                if self.projected(i, o) {
                    vec![("proj_weight", [o, i, 1, 1]), ("proj_bias", bias(o))]
                } else {
                    vec![]
                }
            }
            Self::ScaledFixed(_) => {
                let mut v = Vec::new();
                if self.projected(i, o) {
                    v.push(("proj_weight", [o, i, 1, 1]));
                    v.push(("proj_bias", bias(o)));
                }
                v.push(("scale", bias(o)));
                v
            }
        }
    }

    pub fn param_count(self, in_ch: usize, out_ch: usize) -> usize {
        self.param_shapes(in_ch, out_ch)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BranchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('×', "x");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown branch kind '{s}'")))
    }
}

impl TryFrom<String> for BranchKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BranchKind> for String {
    fn from(k: BranchKind) -> String {
        k.name().to_string()
    }
}

/// Declarative block description: channel widths and the parallel branches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub branches: Vec<BranchKind>,
}

impl BlockConfig {
    pub fn new(in_channels: usize, out_channels: usize, branches: Vec<BranchKind>) -> Result<Self> {
        let cfg = Self { in_channels, out_channels, branches };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The enhanced block: 3x3, the 1x3/3x1 pair and the 1x1-3x3-1x1 chain.
    pub fn erb(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            branches: ERB_BRANCHES.to_vec(),
        }
    }

    pub fn plain(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            branches: vec![BranchKind::Vanilla3x3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("block channels must be positive".into()));
        }
        if self.branches.is_empty() {
            return Err(Error::InvalidArgument("block needs at least one branch".into()));
        }
        Ok(())
    }

    pub fn train_param_count(&self) -> usize {
        self.branches
            .iter()
            .map(|k| k.param_count(self.in_channels, self.out_channels))
            .sum()
    }

    pub fn deploy_param_count(&self) -> usize {
        self.out_channels * self.in_channels * 9 + self.out_channels
    }
}

pub const ERB_BRANCHES: [BranchKind; 4] = [
    BranchKind::Vanilla3x3,
    BranchKind::Asym1x3,
    BranchKind::Asym3x1,
    BranchKind::Seq1x1_3x3_1x1,
];

/// Scaled-filter column of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaledSelection {
    AvgPool,
    Sobel,
    Laplacian,
    SobelLaplacian,
}

/// One row of the branch ablation: which branch groups are switched on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Table3Flags {
    pub vanilla: bool,
    pub asymmetric: bool,
    pub pointwise: bool,
    pub seq_1x1_3x3: bool,
    pub scaled: Option<ScaledSelection>,
    pub seq_1x1_3x3_1x1: bool,
}

impl Table3Flags {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.vanilla {
            parts.push("3x3".to_string());
        }
        if self.asymmetric {
            parts.push("1x3&3x1".into());
        }
        if self.pointwise {
            parts.push("1x1".into());
        }
        if self.seq_1x1_3x3 {
            parts.push("1x1-3x3".into());
        }
        if let Some(s) = self.scaled {
            parts.push(
                match s {
                    ScaledSelection::AvgPool => "AvgPool",
                    ScaledSelection::Sobel => "Sobel",
                    ScaledSelection::Laplacian => "Laplacian",
                    ScaledSelection::SobelLaplacian => "Sobel&Laplacian",
                }
                .into(),
            );
        }
        if self.seq_1x1_3x3_1x1 {
            parts.push("1x1-3x3-1x1".into());
        }
        parts.join("+")
    }
}

/// The fourteen ablation rows in table order; the last row is the enhanced block.
pub fn table3_rows() -> Vec<Table3Flags> {
    use ScaledSelection::*;
    let row = |vanilla, asymmetric, pointwise, seq2, scaled, seq3| Table3Flags {
        vanilla,
        asymmetric,
        pointwise,
        seq_1x1_3x3: seq2,
        scaled,
        seq_1x1_3x3_1x1: seq3,
    };
    vec![
        row(true, false, false, false, None, false),
        row(true, true, false, false, None, false),
        row(true, false, true, false, None, false),
        row(true, true, true, false, None, false),
        row(true, false, false, true, None, false),
        row(true, true, false, true, None, false),
        row(true, false, true, true, None, false),
        row(true, true, true, true, None, false),
        row(true, true, false, true, Some(AvgPool), false),
        row(true, true, false, true, Some(SobelLaplacian), false),
        row(true, true, false, true, Some(Laplacian), false),
        row(true, true, false, true, Some(Sobel), false),
        row(true, true, false, false, Some(Sobel), true),
        row(true, true, false, false, None, true),
    ]
}

pub fn make_table3_config(flags: &Table3Flags, in_ch: usize, out_ch: usize) -> Result<BlockConfig> {
    use BranchKind::*;
    let mut b = Vec::new();
    if flags.vanilla {
        b.push(Vanilla3x3);
    }
    if flags.asymmetric {
        b.extend([Asym1x3, Asym3x1]);
    }
    if flags.pointwise {
        b.push(Point1x1);
    }
    if flags.seq_1x1_3x3 {
        b.push(Seq1x1_3x3);
    }
    match flags.scaled {
        None => {}
        Some(ScaledSelection::AvgPool) => b.push(AvgPool3x3),
        Some(ScaledSelection::Sobel) => {
            b.extend([ScaledFixed(FixedFilter::SobelX), ScaledFixed(FixedFilter::SobelY)])
        }
        Some(ScaledSelection::Laplacian) => b.push(ScaledFixed(FixedFilter::Laplacian)),
        Some(ScaledSelection::SobelLaplacian) => b.extend([
            ScaledFixed(FixedFilter::SobelX),
            ScaledFixed(FixedFilter::SobelY),
            ScaledFixed(FixedFilter::Laplacian),
        ]),
    }
    if flags.seq_1x1_3x3_1x1 {
        b.push(Seq1x1_3x3_1x1);
    }
    if b.is_empty() {
        return Err(Error::InvalidArgument("empty branch selection".into()));
    }
    BlockConfig::new(in_ch, out_ch, b)
}

/// A branch kind together with its parameter tensors (ordered per [`BranchKind::param_shapes`]).
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSpec<T = f32> {
    pub kind: BranchKind,
    pub params: Vec<Tensor<T>>,
}

impl<T: Scalar> BranchSpec<T> {
    pub fn new(kind: BranchKind, in_ch: usize, out_ch: usize, params: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = kind.param_shapes(in_ch, out_ch);
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|((_, s), p)| *s != p.shape())
        {
            return shape_err(format!(
                "{kind}: expected {:?}, got {:?}",
                shapes.iter().map(|s| s.1).collect::<Vec<_>>(),
                params.iter().map(|p| p.shape()).collect::<Vec<_>>()
            ));
        }
        Ok(Self { kind, params })
    }

    pub fn zeros(kind: BranchKind, in_ch: usize, out_ch: usize) -> Self {
        Self {
            kind,
            params: kind
                .param_shapes(in_ch, out_ch)
                .into_iter()
                .map(|(_, s)| Tensor::zeros(s))
                .collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(kind: BranchKind, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            kind,
            params: kind
                .param_shapes(in_ch, out_ch)
                .into_iter()
                .map(|(_, s)| Tensor::uniform(s, -1.0, 1.0, rng))
                .collect(),
        }
    }

    /// Training initialisation: fan-in uniform for learned kernels, near-identity
    /// channel mixing for the sequential 1x1 stages, zero filter scales.
    pub fn init<R: Rng + ?Sized>(kind: BranchKind, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let params = kind
            .param_shapes(in_ch, out_ch)
            .into_iter()
            .map(|(name, s)| {
                let fan_in = (s[1] * s[2] * s[3]) as f64;
                let bound = 1.0 / fan_in.sqrt();
                match name {
                    "weight" | "s2_weight" | "proj_weight" => Tensor::uniform(s, -bound, bound, rng),
                    "bias" if kind == BranchKind::Vanilla3x3 => {
                        let b = 1.0 / ((in_ch * 9) as f64).sqrt();
                        Tensor::uniform(s, -b, b, rng)
                    }
                    "s1_weight" | "s3_weight" => {
                        let mut t = Tensor::uniform(s, -0.01, 0.01, rng);
                        for o in 0..s[0] {
                            let i = o % s[1];
                            let v = t.at(o, i, 0, 0) + T::one();
                            t.set(o, i, 0, 0, v);
                        }
                        t
                    }
                    _ => Tensor::zeros(s),
                }
            })
            .collect();
        Self { kind, params }
    }
}

/// A block configuration with concrete branch parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RepBlock<T = f32> {
    pub cfg: BlockConfig,
    pub branches: Vec<BranchSpec<T>>,
}

impl<T: Scalar> RepBlock<T> {
    pub fn new(cfg: BlockConfig, branches: Vec<BranchSpec<T>>) -> Result<Self> {
        cfg.validate()?;
        if branches.len() != cfg.branches.len()
            || branches.iter().zip(&cfg.branches).any(|(b, k)| b.kind != *k)
        {
            return Err(Error::InvalidArgument("branch list does not match config".into()));
        }
        for b in &branches {
            BranchSpec::new(b.kind, cfg.in_channels, cfg.out_channels, b.params.clone())?;
        }
        Ok(Self { cfg, branches })
    }

    fn build(cfg: &BlockConfig, f: impl FnMut(BranchKind) -> BranchSpec<T>) -> Self {
        Self {
            cfg: cfg.clone(),
            branches: cfg.branches.iter().copied().map(f).collect(),
        }
    }

    pub fn zeros(cfg: &BlockConfig) -> Self {
        Self::build(cfg, |k| BranchSpec::zeros(k, cfg.in_channels, cfg.out_channels))
    }

    pub fn random<R: Rng + ?Sized>(cfg: &BlockConfig, rng: &mut R) -> Self {
        Self::build(cfg, |k| BranchSpec::random(k, cfg.in_channels, cfg.out_channels, rng))
    }

    pub fn init<R: Rng + ?Sized>(cfg: &BlockConfig, rng: &mut R) -> Self {
        Self::build(cfg, |k| BranchSpec::init(k, cfg.in_channels, cfg.out_channels, rng))
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().flat_map(|b| &b.params).map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> RepBlock<U> {
        RepBlock {
            cfg: self.cfg.clone(),
            branches: self
                .branches
                .iter()
                .map(|b| BranchSpec { kind: b.kind, params: b.params.iter().map(|p| p.cast()).collect() })
                .collect(),
        }
    }

    pub fn map_params(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            cfg: self.cfg.clone(),
            branches: self
                .branches
                .iter()
                .map(|b| BranchSpec {
                    kind: b.kind,
                    params: b.params.iter().map(&f).collect(),
                })
                .collect(),
        }
    }

    /// Pushes every branch parameter onto `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Vec<Var>> {
        self.branches
            .iter()
            .map(|b| b.params.iter().map(|p| tape.param(p.clone())).collect())
            .collect()
    }
}

fn check_input<T: Scalar>(tape: &Tape<T>, x: Var, in_ch: usize) -> Result<()> {
    let c = tape.value(x).shape()[1];
    if c != in_ch {
        return shape_err(format!("block expects {in_ch} input channels, got {c}"));
    }
    Ok(())
}

/// Records the literal (unfused) computation of one branch.
pub fn branch_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    kind: BranchKind,
    p: &[Var],
    x: Var,
    in_ch: usize,
    out_ch: usize,
) -> Result<Var> {
    use BranchKind::*;
    check_input(tape, x, in_ch)?;
    match kind {
        Vanilla3x3 => tape.conv2d(x, p[0], Some(p[1]), 1, 1),
        Asym1x3 => tape.conv2d(x, p[0], Some(p[1]), 0, 1),
        Asym3x1 => tape.conv2d(x, p[0], Some(p[1]), 1, 0),
        Point1x1 => tape.conv2d(x, p[0], Some(p[1]), 0, 0),
        // Pointwise stages run on the zero-padded input, so the bias of the first
        // 1x1 also fills the border seen by the 3x3 stage.
        Seq1x1_3x3 => {
            let xp = tape.push(Op::Pad { x, p: 1 })?;
            let h = tape.conv2d(xp, p[0], Some(p[1]), 0, 0)?;
            tape.conv2d(h, p[2], Some(p[3]), 0, 0)
        }
        Seq1x1_3x3_1x1 => {
            let xp = tape.push(Op::Pad { x, p: 1 })?;
            let h = tape.conv2d(xp, p[0], Some(p[1]), 0, 0)?;
            let h = tape.conv2d(h, p[2], Some(p[3]), 0, 0)?;
            tape.conv2d(h, p[4], Some(p[5]), 0, 0)
        }
        AvgPool3x3 | ScaledFixed(_) => {
            let filter = match kind {
                ScaledFixed(f) => *f.taps(),
                _ => BOX_3X3,
            };
            let filtered = if kind.projected(in_ch, out_ch) {
                let xp = tape.push(Op::Pad { x, p: 1 })?;
                let h = tape.conv2d(xp, p[0], Some(p[1]), 0, 0)?;
                tape.push(Op::DepthwiseFixed { x: h, filter, pad: 0 })?
            } else {
                tape.push(Op::DepthwiseFixed { x, filter, pad: 1 })?
            };
            match kind {
                ScaledFixed(_) => {
                    let s = *p.last().expect("scale parameter");
                    tape.push(Op::ChannelScale { x: filtered, s })
                }
                _ => Ok(filtered),
            }
        }
    }
}

/// Records the sum of all branch outputs.
pub fn block_forward_explicit_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &BlockConfig,
    vars: &[Vec<Var>],
    x: Var,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (kind, p) in cfg.branches.iter().zip(vars) {
        let y = branch_forward_tape(tape, *kind, p, x, cfg.in_channels, cfg.out_channels)?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("block has no branches".into()))
}

pub fn branch_forward<T: Scalar>(
    spec: &BranchSpec<T>,
    in_ch: usize,
    out_ch: usize,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p: Vec<Var> = spec.params.iter().map(|t| tape.constant(t.clone())).collect();
    let y = branch_forward_tape(&mut tape, spec.kind, &p, xv, in_ch, out_ch)?;
    Ok(tape.value(y).clone())
}

pub fn block_forward_explicit<T: Scalar>(block: &RepBlock<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars: Vec<Vec<Var>> = block
        .branches
        .iter()
        .map(|b| b.params.iter().map(|t| tape.constant(t.clone())).collect())
        .collect();
    let y = block_forward_explicit_tape(&mut tape, &block.cfg, &vars, xv)?;
    Ok(tape.value(y).clone())
}
