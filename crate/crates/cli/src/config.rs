//! Flat `key = value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use repnerv::rep_blocks::{BranchKind, ERB_BRANCHES};
use repnerv::{Budget, ModelConfig, SynthKind, TrainConfig};

/// Training-form selector for `train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Online,
    Explicit,
    Plain,
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "online" => Ok(Self::Online),
            "explicit" => Ok(Self::Explicit),
            "plain" => Ok(Self::Plain),
            _ => Err(format!("mode must be online, explicit or plain, got {s:?}")),
        }
    }
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Online => "online",
            Self::Explicit => "explicit",
            Self::Plain => "plain",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateRows {
    Table3,
    All,
}

impl FromStr for AblateRows {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "table3" => Ok(Self::Table3),
            "all" => Ok(Self::All),
            _ => Err(format!("rows must be table3 or all, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub kind: SynthKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub factors: Vec<usize>,
    pub channels: Vec<usize>,
    pub mlp_hidden: usize,
    pub pe_base: f64,
    pub pe_levels: usize,
    pub branches: Vec<BranchKind>,
    pub train: TrainConfig,
    pub mode: TrainMode,
    pub budget: Budget,
    pub sparsity: f64,
    pub bits: u8,
    pub finetune_steps: u64,
    /// Extra bit depths for the rate-distortion CSV; empty means the single operating point.
    pub sweep_bits: Vec<u8>,
    pub rows: AblateRows,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            kind: SynthKind::MovingGradient,
            frames: 16,
            height: m.frame_height,
            width: m.frame_width,
            factors: m.factors,
            channels: m.channels,
            mlp_hidden: m.mlp_hidden,
            pe_base: m.pe_base,
            pe_levels: m.pe_levels,
            branches: m.branches,
            train: TrainConfig::default(),
            mode: TrainMode::Online,
            budget: Budget::Steps(300),
            sparsity: repnerv::compression::DEFAULT_SPARSITY,
            bits: repnerv::compression::DEFAULT_BITS,
            finetune_steps: 0,
            sweep_bits: Vec::new(),
            rows: AblateRows::Table3,
        }
    }
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("bad list element {s:?}")))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

pub const KEYS: &[&str] = &[
    "kind", "frames", "height", "width", "factors", "channels", "mlp_hidden", "pe_base", "pe_levels", "branches",
    "alpha", "lr0", "beta1", "beta2", "eps", "seed", "batch", "eval_every", "mode", "budget",
    "sparsity", "bits", "finetune_steps", "sweep_bits", "rows",
];

impl RunConfig {
    /// Sets one key; the error names the problem but not the location.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "kind" => self.kind = v.parse().map_err(|e: repnerv::Error| e.to_string())?,
            "frames" => self.frames = num(v)?,
            "height" => self.height = num(v)?,
            "width" => self.width = num(v)?,
            "factors" => self.factors = list(v)?,
            "channels" => self.channels = list(v)?,
            "mlp_hidden" => self.mlp_hidden = num(v)?,
            "pe_base" => self.pe_base = num(v)?,
            "pe_levels" => self.pe_levels = num(v)?,
            "branches" => {
                self.branches = if v == "erb" {
                    ERB_BRANCHES.to_vec()
                } else {
                    list::<BranchKind>(v)?
                }
            }
            "alpha" => self.train.alpha = num(v)?,
            "lr0" => self.train.lr0 = num(v)?,
            "beta1" => self.train.beta1 = num(v)?,
            "beta2" => self.train.beta2 = num(v)?,
            "eps" => self.train.eps = num(v)?,
            "seed" => self.train.seed = num(v)?,
            "batch" => self.train.batch = num(v)?,
            "eval_every" => self.train.eval_every = num(v)?,
            "mode" => self.mode = v.parse()?,
            "budget" => self.budget = v.parse().map_err(|e: repnerv::Error| e.to_string())?,
            "sparsity" => self.sparsity = num(v)?,
            "bits" => self.bits = num(v)?,
            "finetune_steps" => self.finetune_steps = num(v)?,
            "sweep_bits" => self.sweep_bits = if v.is_empty() { Vec::new() } else { list(v)? },
            "rows" => self.rows = v.parse()?,
            _ => return Err(format!("unknown key {key:?}; known keys: {}", KEYS.join(", "))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment. Errors carry `origin:line`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected key = value, got {line:?}", no + 1))?;
            self.set(k.trim(), v).map_err(|e| format!("{origin}:{}: {e}", no + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), String> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| format!("override {o:?} is not key=value"))?;
            self.set(k.trim(), v).map_err(|e| format!("override {o:?}: {e}"))?;
        }
        Ok(())
    }

    /// Cross-field checks that do not need the video.
    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(format!("sparsity {} must lie in [0, 1)", self.sparsity));
        }
        if let Some(b) = std::iter::once(&self.bits).chain(&self.sweep_bits).find(|b| !(2..=16).contains(*b)) {
            return Err(format!("bits {b} must lie in [2, 16]"));
        }
        if let Budget::Seconds(s) = self.budget {
            if !(s > 0.0) {
                return Err("seconds budget must be positive".into());
            }
        }
        Ok(())
    }

    /// Model architecture for an `h x w` video; plain mode forces a single 3x3 branch.
    pub fn model_config(&self, h: usize, w: usize) -> Result<ModelConfig, String> {
        let prod: usize = self.factors.iter().product();
        if prod == 0 || h % prod != 0 || w % prod != 0 {
            return Err(format!("frame {h}x{w} is not divisible by the factor product {prod}"));
        }
        let branches = if self.mode == TrainMode::Plain { vec![BranchKind::Vanilla3x3] } else { self.branches.clone() };
        let cfg = ModelConfig {
            frame_height: h,
            frame_width: w,
            base_height: h / prod,
            base_width: w / prod,
            factors: self.factors.clone(),
            channels: self.channels.clone(),
            mlp_hidden: self.mlp_hidden,
            pe_base: self.pe_base,
            pe_levels: self.pe_levels,
            branches,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Copies the architecture keys from an existing model.
    pub fn adopt_model(&mut self, m: &ModelConfig) {
        self.height = m.frame_height;
        self.width = m.frame_width;
        self.factors = m.factors.clone();
        self.channels = m.channels.clone();
        self.mlp_hidden = m.mlp_hidden;
        self.pe_base = m.pe_base;
        self.pe_levels = m.pe_levels;
        self.branches = m.branches.clone();
    }

    /// Every key in a fixed order, readable back by [`Self::apply_text`].
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::from("# resolved run configuration\n");
        let rows = match self.rows {
            AblateRows::Table3 => "table3",
            AblateRows::All => "all",
        };
        let branches: Vec<&str> = self.branches.iter().map(|b| b.name()).collect();
        for (k, v) in [
            ("kind", self.kind.to_string()),
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("factors", join(&self.factors)),
            ("channels", join(&self.channels)),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("pe_base", self.pe_base.to_string()),
            ("pe_levels", self.pe_levels.to_string()),
            ("branches", branches.join(",")),
            ("alpha", t.alpha.to_string()),
            ("lr0", t.lr0.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps", t.eps.to_string()),
            ("seed", t.seed.to_string()),
            ("batch", t.batch.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("mode", self.mode.name().to_string()),
            ("budget", self.budget.to_string()),
            ("sparsity", self.sparsity.to_string()),
            ("bits", self.bits.to_string()),
            ("finetune_steps", self.finetune_steps.to_string()),
            ("sweep_bits", join(&self.sweep_bits)),
            ("rows", rows.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("lr0 = 0.001 # faster\nbranches = 3x3,1x1\n\n# only a comment\nbudget=seconds:2.5", "f")
            .unwrap();
        assert_eq!(c.train.lr0, 0.001);
        assert_eq!(c.branches, vec![BranchKind::Vanilla3x3, BranchKind::Point1x1]);
        assert_eq!(c.budget, Budget::Seconds(2.5));
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "resolved").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_key_is_written() {
        let text = RunConfig::default().to_text();
        for k in KEYS {
            assert!(text.contains(&format!("\n{k} = ")), "{k}");
        }
    }

    #[test]
    fn diagnostics_name_the_line() {
        let mut c = RunConfig::default();
        let e = c.apply_text("alpha = 0.5\nlearning_rate = 3", "run.cfg").unwrap_err();
        assert!(e.starts_with("run.cfg:2:") && e.contains("unknown key"), "{e}");
        let e = c.apply_text("alpha 0.5", "run.cfg").unwrap_err();
        assert!(e.starts_with("run.cfg:1:"), "{e}");
        let e = c.apply_text("bits = many", "x").unwrap_err();
        assert!(e.contains("x:1"), "{e}");
    }

    #[test]
    fn overrides_and_validation() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["sparsity=1.0".into()]).unwrap();
        assert!(c.validate().is_err());
        assert!(c.apply_overrides(&["nokey".into()]).is_err());
        c.apply_overrides(&["sparsity=0.2".into(), "mode=plain".into()]).unwrap();
        c.validate().unwrap();
        let m = c.model_config(32, 64).unwrap();
        assert_eq!(m.branches, vec![BranchKind::Vanilla3x3]);
        assert_eq!((m.base_height, m.base_width), (8, 16));
        assert!(c.model_config(30, 64).is_err());
    }
}
