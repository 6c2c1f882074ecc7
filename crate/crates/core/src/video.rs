//! Frame ingestion and writing (binary PPM) and synthetic test videos.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_FPS: f64 = 30.0;

/// `T` RGB frames in [0, 1], stored as one (T, 3, H, W) tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    frames: Tensor<f32>,
    pub fps: f64,
}

impl Video {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        let [t, c, h, w] = frames.shape();
        if t == 0 || c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("video needs (T>0, 3, H>0, W>0), got {:?}", frames.shape())));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("frame value {v} outside [0, 1]")));
        }
        Ok(Self { frames, fps: DEFAULT_FPS })
    }

    pub fn from_frames(frames: &[Tensor<f32>]) -> Result<Self> {
        Self::new(Tensor::stack(frames)?)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.frames
    }

    /// Frame `i` as a (1, 3, H, W) tensor.
    pub fn frame(&self, i: usize) -> Tensor<f32> {
        self.frames.slice_batch(i)
    }

    /// Frames at the given indices, stacked along the batch axis.
    pub fn gather(&self, idx: &[usize]) -> Tensor<f32> {
        let per = self.frames.len() / self.len();
        let mut data = Vec::with_capacity(per * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.frames.data()[i * per..(i + 1) * per]);
        }
        let [_, c, h, w] = self.frames.shape();
        Tensor::from_vec([idx.len(), c, h, w], data).expect("gathered frame sizes")
    }
}

/// `round(x * 255)` with halves rounded up.
pub fn to_byte(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes a (1, 3, H, W) frame as binary PPM.
pub fn write_frame(frame: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let [n, c, h, w] = frame.shape();
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("write_frame needs (1, 3, H, W), got {:?}", frame.shape())));
    }
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(to_byte(frame.at(0, ch, y, x)));
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:05}.ppm")
}

/// Writes every frame as `frame_%05d.ppm` into `dir`, creating it if needed.
pub fn write_video(video: &Video, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    (0..video.len())
        .map(|i| {
            let p = dir.join(frame_file_name(i));
            write_frame(&video.frame(i), &p)?;
            Ok(p)
        })
        .collect()
}

fn parse_ppm(bytes: &[u8], name: &str) -> Result<Tensor<f32>> {
    let bad = |m: &str| Error::Format(format!("{name}: {m}"));
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero-sized image"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after header"));
    }
    pos += 1;
    let px = &bytes[pos..];
    if px.len() < 3 * w * h {
        return Err(bad("truncated pixel data"));
    }
    let mut t = Tensor::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                t.set(0, c, y, x, px[3 * (y * w + x) + c] as f32 / 255.0);
            }
        }
    }
    Ok(t)
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    parse_ppm(&fs::read(path)?, &path.display().to_string())
}

/// Reads every `.ppm` file in `dir` in lexicographic file-name order.
pub fn read_frames(dir: impl AsRef<Path>) -> Result<Video> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no .ppm frames in {}", dir.display())));
    }
    let frames = paths.iter().map(read_frame).collect::<Result<Vec<_>>>()?;
    let first = frames[0].shape();
    if let Some((p, f)) = paths.iter().zip(&frames).find(|(_, f)| f.shape() != first) {
        return Err(Error::Shape(format!(
            "{} is {}x{}, expected {}x{}",
            p.display(),
            f.shape()[3],
            f.shape()[2],
            first[3],
            first[2]
        )));
    }
    Video::from_frames(&frames)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    MovingGradient,
    BouncingSquare,
    ColorNoiseSmooth,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [Self::MovingGradient, Self::BouncingSquare, Self::ColorNoiseSmooth];

    pub fn name(self) -> &'static str {
        match self {
            Self::MovingGradient => "moving_gradient",
            Self::BouncingSquare => "bouncing_square",
            Self::ColorNoiseSmooth => "color_noise_smooth",
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown video kind {s:?}")))
    }
}

/// Deterministic synthetic video; adjacent frames change slowly.
pub fn synth_video(kind: SynthKind, frames: usize, height: usize, width: usize, seed: u64) -> Result<Video> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidArgument("frames, height and width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros([frames, 3, height, width]);
    let tau = std::f64::consts::TAU;
    match kind {
        SynthKind::MovingGradient => {
            // A slanted sinusoidal ramp per channel drifting at a fixed speed.
            let params: Vec<[f64; 4]> = (0..3)
                .map(|_| {
                    [
                        rng.gen_range(0.5..1.5),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.01..0.04),
                    ]
                })
                .collect();
            for f in 0..frames {
                for (c, &[fx, fy, ph, sp]) in params.iter().enumerate() {
                    for y in 0..height {
                        for x in 0..width {
                            let u = fx * x as f64 / width as f64 + fy * y as f64 / height as f64 + ph + sp * f as f64;
                            t.set(f, c, y, x, (0.5 + 0.45 * (tau * u).sin()) as f32);
                        }
                    }
                }
            }
        }
        SynthKind::BouncingSquare => {
            let side = (height.min(width) / 4).max(1);
            let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.45));
            let fg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.55..0.95));
            let (span_y, span_x) = ((height - side) as i64, (width - side) as i64);
            let (mut py, mut px) = (rng.gen_range(0..=span_y), rng.gen_range(0..=span_x));
            let (mut vy, mut vx) = (if rng.gen() { 1i64 } else { -1 }, if rng.gen() { 2i64 } else { -2 });
            for f in 0..frames {
                for c in 0..3 {
                    for y in 0..height {
                        for x in 0..width {
                            let inside = (py..py + side as i64).contains(&(y as i64))
                                && (px..px + side as i64).contains(&(x as i64));
                            t.set(f, c, y, x, if inside { fg[c] } else { bg[c] });
                        }
                    }
                }
                for (p, v, span) in [(&mut py, &mut vy, span_y), (&mut px, &mut vx, span_x)] {
                    let mut next = *p + *v;
                    if next < 0 || next > span {
                        *v = -*v;
                        next = (*p + *v).clamp(0, span);
                    }
                    *p = next;
                }
            }
        }
        SynthKind::ColorNoiseSmooth => {
            // A handful of random low-frequency plane waves per channel, each with its own drift.
            let waves: Vec<Vec<[f64; 5]>> = (0..3)
                .map(|_| {
                    (0..4)
                        .map(|_| {
                            [
                                rng.gen_range(-3.0..3.0),
                                rng.gen_range(-3.0..3.0),
                                rng.gen_range(0.0..1.0),
                                rng.gen_range(-0.03..0.03),
                                rng.gen_range(0.05..0.12),
                            ]
                        })
                        .collect()
                })
                .collect();
            for f in 0..frames {
                for (c, ws) in waves.iter().enumerate() {
                    for y in 0..height {
                        for x in 0..width {
                            let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
                            let s: f64 = ws
                                .iter()
                                .map(|&[kx, ky, ph, sp, amp]| amp * (tau * (kx * u + ky * v + ph + sp * f as f64)).sin())
                                .sum();
                            t.set(f, c, y, x, (0.5 + s).clamp(0.0, 1.0) as f32);
                        }
                    }
                }
            }
        }
    }
    Video::new(t)
}

/// Mean absolute difference between consecutive frames, one entry per pair.
pub fn adjacent_mad(video: &Video) -> Vec<f64> {
    (1..video.len())
        .map(|i| {
            let (a, b) = (video.frame(i - 1), video.frame(i));
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
        })
        .collect()
}
