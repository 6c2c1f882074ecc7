//! Subcommand implementations.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use repnerv::compression::{rd_csv, rd_point};
use repnerv::online_rep::RepMode;
use repnerv::rep_blocks::{make_table3_config, table3_rows, BranchKind};
use repnerv::{count_params_and_flops, evaluate, read_frames, synth_video, train, Checkpoint, RepNerv, Video};

use crate::config::{AblateRows, RunConfig, TrainMode};

/// Splits failures into bad invocations (exit 1) and everything else (exit 2).
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<repnerv::Error> for Failure {
    fn from(e: repnerv::Error) -> Self {
        Self::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn usage(e: impl Into<String>) -> Failure {
    Failure::Usage(e.into())
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_resolved(cfg: &RunConfig, path: &Path) -> Outcome {
    fs::write(path, cfg.to_text()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_video(dir: &Path) -> Outcome<Video> {
    Ok(read_frames(dir).with_context(|| format!("reading frames from {}", dir.display()))?)
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?)
}

fn rep_mode(m: TrainMode) -> RepMode {
    match m {
        TrainMode::Explicit => RepMode::ExplicitTrain,
        TrainMode::Online | TrainMode::Plain => RepMode::OnlineTrain,
    }
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Outcome {
    let video = synth_video(cfg.kind, cfg.frames, cfg.height, cfg.width, cfg.train.seed)
        .map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    repnerv::video::write_video(&video, out)?;
    write_resolved(cfg, &out.join("resolved.cfg"))?;
    println!("wrote {} frames of {} to {}", video.len(), cfg.kind, out.display());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, frames: &Path, out: &Path) -> Outcome {
    let video = load_video(frames)?;
    let model_cfg = cfg.model_config(video.height(), video.width()).map_err(usage)?;
    let mut resolved = cfg.clone();
    resolved.adopt_model(&model_cfg);
    resolved.frames = video.len();
    let model = RepNerv::init(model_cfg, rep_mode(cfg.mode), cfg.train.seed)?;
    let outcome = train(model, &video, &cfg.train, cfg.budget)?;
    outcome.checkpoint.save(out).with_context(|| format!("writing {}", out.display()))?;
    outcome.log.write_csv(sibling(out, ".metrics.csv"))?;
    write_resolved(&resolved, &sibling(out, ".resolved.cfg"))?;
    match outcome.log.final_psnr() {
        Some(p) => println!("{} steps in {:.2} s, final PSNR {p:.4} dB", outcome.steps, outcome.train_seconds),
        None => println!("0 steps, wrote initial checkpoint"),
    }
    Ok(())
}

pub fn fuse(cfg: &RunConfig, input: &Path, out: &Path) -> Outcome {
    let ck = load_checkpoint(input)?;
    if ck.model.is_deployed() {
        return Err(Failure::Runtime(anyhow::anyhow!("{} is already in deploy form", input.display())));
    }
    let before = ck.model.param_count();
    let fused = Checkpoint::new(ck.model.structural_fuse()?, ck.step);
    fused.save(out).with_context(|| format!("writing {}", out.display()))?;
    let mut resolved = cfg.clone();
    resolved.adopt_model(ck.model.config());
    write_resolved(&resolved, &sibling(out, ".resolved.cfg"))?;
    println!("fused {before} parameters into {}", fused.model.param_count());
    Ok(())
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, frames: &Path, out: &Path) -> Outcome {
    let ck = load_checkpoint(ckpt)?;
    let video = load_video(frames)?;
    let report = evaluate(&ck.model, &video)?;
    fs::write(out, serde_json::to_string_pretty(&report).context("encoding report")? + "\n")
        .with_context(|| format!("writing {}", out.display()))?;
    let mut resolved = cfg.clone();
    resolved.adopt_model(ck.model.config());
    resolved.frames = video.len();
    write_resolved(&resolved, &sibling(out, ".resolved.cfg"))?;
    println!(
        "mean PSNR {:.4} dB, MS-SSIM {:.6}, {:.1} fps",
        report.mean_psnr, report.mean_ms_ssim, report.fps
    );
    Ok(())
}

pub fn compress(cfg: &RunConfig, ckpt: &Path, frames: &Path, out: &Path) -> Outcome {
    let ck = load_checkpoint(ckpt)?;
    let video = load_video(frames)?;
    let model = if ck.model.is_deployed() { ck.model } else { ck.model.structural_fuse()? };
    let finetune = (cfg.finetune_steps > 0).then_some((cfg.finetune_steps, &cfg.train));
    let (point, cm) = rd_point(&model, &video, cfg.sparsity, cfg.bits, finetune)?;
    let bits = cm.save(out).with_context(|| format!("writing {}", out.display()))?;
    let mut points = vec![point.clone()];
    for &b in cfg.sweep_bits.iter().filter(|&&b| b != cfg.bits) {
        points.push(rd_point(&model, &video, cfg.sparsity, b, finetune)?.0);
    }
    fs::write(sibling(out, ".rd.csv"), rd_csv(&points))?;
    let mut resolved = cfg.clone();
    resolved.adopt_model(model.config());
    resolved.frames = video.len();
    write_resolved(&resolved, &sibling(out, ".resolved.cfg"))?;
    println!("{bits} bits ({:.4} bpp), PSNR {:.4} dB", point.bpp, point.psnr);
    Ok(())
}

/// Branch sets for the ablation: the table rows, then each single branch kind not already covered.
pub fn ablation_rows(rows: AblateRows, in_ch: usize, out_ch: usize) -> repnerv::Result<Vec<(String, Vec<BranchKind>)>> {
    let mut out = Vec::new();
    for flags in table3_rows() {
        out.push((flags.label(), make_table3_config(&flags, in_ch, out_ch)?.branches));
    }
    if rows == AblateRows::All {
        for k in BranchKind::ALL {
            if !out.iter().any(|(_, b)| b.as_slice() == [k]) {
                out.push((k.name().to_string(), vec![k]));
            }
        }
    }
    Ok(out)
}

pub fn ablate(cfg: &RunConfig, frames: &Path, out: &Path) -> Outcome {
    let video = load_video(frames)?;
    let base = cfg.model_config(video.height(), video.width()).map_err(usage)?;
    let mut csv = String::from("label,branches,train_params,deploy_params,steps,psnr,ms_ssim\n");
    for (label, branches) in ablation_rows(cfg.rows, base.channels[0], base.channels[1])? {
        let model_cfg = repnerv::ModelConfig { branches: branches.clone(), ..base.clone() };
        let train_params = count_params_and_flops(&model_cfg, RepMode::OnlineTrain)?.params;
        let deploy_params = count_params_and_flops(&model_cfg, RepMode::Deployed)?.params;
        let model = RepNerv::init(model_cfg, RepMode::OnlineTrain, cfg.train.seed)?;
        let outcome = train(model, &video, &cfg.train, cfg.budget)?;
        let report = evaluate(&outcome.checkpoint.model, &video)?;
        let names: Vec<&str> = branches.iter().map(|b| b.name()).collect();
        let _ = writeln!(
            csv,
            "{label},{},{train_params},{deploy_params},{},{:.6},{:.8}",
            names.join(" "),
            outcome.steps,
            report.mean_psnr,
            report.mean_ms_ssim
        );
        eprintln!("{label}: {:.4} dB", report.mean_psnr);
    }
    fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    let mut resolved = cfg.clone();
    resolved.adopt_model(&base);
    resolved.frames = video.len();
    write_resolved(&resolved, &sibling(out, ".resolved.cfg"))?;
    Ok(())
}
