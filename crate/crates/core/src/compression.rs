//! Post-training compression: global magnitude pruning, per-tensor affine
//! quantization, canonical Huffman coding and the `RNVZ` container.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{skeleton, Checkpoint, LayerRecord};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RepNerv};
use crate::online_rep::RepMode;
use crate::tensor::Tensor;
use crate::training::{evaluate, train_masked, Budget, TrainConfig};
use crate::video::Video;

pub const DEFAULT_SPARSITY: f64 = 0.1;
pub const DEFAULT_BITS: u8 = 8;

/// Keep flags for every parameter tensor of a model, in parameter order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    pub keep: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn all_kept(model: &RepNerv<f32>) -> Self {
        Self { keep: model.param_tensors().iter().map(|t| vec![true; t.len()]).collect() }
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().flatten().filter(|k| !**k).count()
    }

    fn check(&self, tensors: &[&Tensor<f32>]) -> Result<()> {
        if self.keep.len() != tensors.len() || self.keep.iter().zip(tensors).any(|(k, t)| k.len() != t.len()) {
            return Err(Error::Shape("prune mask does not match the model parameters".into()));
        }
        Ok(())
    }

    /// Zeroes every pruned position of `model`.
    pub fn apply(&self, model: &mut RepNerv<f32>) -> Result<()> {
        self.check(&model.param_tensors())?;
        for (t, k) in model.param_tensors_mut().into_iter().zip(&self.keep) {
            for (v, &keep) in t.data_mut().iter_mut().zip(k) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }
}

/// Zeroes the `floor(sparsity * N)` smallest magnitudes across all tensors with
/// `prunable[i]` set. Ties go to the earlier (tensor, index) position.
pub fn prune_tensors(tensors: &mut [&mut Tensor<f32>], prunable: &[bool], sparsity: f64) -> Result<Vec<Vec<bool>>> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!("sparsity {sparsity} outside [0, 1)")));
    }
    if prunable.len() != tensors.len() {
        return Err(Error::Shape("prunable flags do not match tensors".into()));
    }
    let mut ranked: Vec<(f32, usize, usize)> = tensors
        .iter()
        .zip(prunable)
        .enumerate()
        .filter(|(_, (_, &p))| p)
        .flat_map(|(ti, (t, _))| t.data().iter().enumerate().map(move |(i, v)| (v.abs(), ti, i)))
        .collect();
    let k = (sparsity * ranked.len() as f64).floor() as usize;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut keep: Vec<Vec<bool>> = tensors.iter().map(|t| vec![true; t.len()]).collect();
    for &(_, ti, i) in &ranked[..k] {
        keep[ti][i] = false;
        tensors[ti].data_mut()[i] = 0.0;
    }
    Ok(keep)
}

/// Global magnitude pruning of a deploy-form model; biases are exempt.
pub fn prune(model: &RepNerv<f32>, sparsity: f64) -> Result<(RepNerv<f32>, PruneMask)> {
    if !model.is_deployed() {
        return Err(Error::Mode("pruning needs a deploy-form (fused) model".into()));
    }
    let mut out = model.clone();
    let prunable: Vec<bool> = out.param_names().iter().map(|n| !n.ends_with("bias")).collect();
    let keep = prune_tensors(&mut out.param_tensors_mut(), &prunable, sparsity)?;
    Ok((out, PruneMask { keep }))
}

/// Masked fine-tuning; pruned positions stay exactly zero.
pub fn finetune_after_prune(
    model: RepNerv<f32>,
    mask: &PruneMask,
    video: &Video,
    steps: u64,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let cfg = TrainConfig { eval_every: 0, ..cfg.clone() };
    Ok(train_masked(model, video, &cfg, Budget::Steps(steps), Some(mask))?.checkpoint)
}

/// Integer codes plus the affine map back to reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub codes: Vec<u32>,
    pub min: f32,
    pub scale: f32,
    pub bits: u8,
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bits {bits} outside [2, 16]")));
    }
    Ok(())
}

/// Per-tensor affine quantization: `q = round((x - min) / scale)`, clamped.
pub fn quantize(values: &[f32], bits: u8) -> Result<Quantized> {
    check_bits(bits)?;
    let levels = (1u32 << bits) - 1;
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() || lo == hi {
        let min = if values.is_empty() { 0.0 } else { lo };
        return Ok(Quantized { codes: vec![0; values.len()], min, scale: 0.0, bits });
    }
    let scale = ((hi as f64 - lo as f64) / levels as f64) as f32;
    let codes = values
        .iter()
        .map(|&v| (((v as f64 - lo as f64) / scale as f64).round()).clamp(0.0, levels as f64) as u32)
        .collect();
    Ok(Quantized { codes, min: lo, scale, bits })
}

/// `min + scale * q`.
pub fn dequantize(codes: &[u32], min: f32, scale: f32) -> Vec<f32> {
    codes.iter().map(|&q| (min as f64 + scale as f64 * q as f64) as f32).collect()
}

/// Canonical Huffman code lengths for a `(symbol, count)` histogram.
/// A lone symbol gets a 1-bit code.
pub fn huffman_lengths(hist: &BTreeMap<u32, u64>) -> BTreeMap<u32, u8> {
    let mut out = BTreeMap::new();
    if hist.len() == 1 {
        out.insert(*hist.keys().next().unwrap(), 1);
        return out;
    }
    // Nodes are merged by (count, creation order) so the tree is deterministic.
    let mut parent: Vec<usize> = Vec::new();
    let mut heap = BinaryHeap::new();
    for (i, &c) in hist.values().enumerate() {
        parent.push(usize::MAX);
        heap.push(Reverse((c, i)));
    }
    while heap.len() > 1 {
        let Reverse((ca, a)) = heap.pop().unwrap();
        let Reverse((cb, b)) = heap.pop().unwrap();
        let id = parent.len();
        parent.push(usize::MAX);
        parent[a] = id;
        parent[b] = id;
        heap.push(Reverse((ca + cb, id)));
    }
    for (i, &s) in hist.keys().enumerate() {
        let (mut d, mut n) = (0u8, i);
        while parent[n] != usize::MAX {
            n = parent[n];
            d += 1;
        }
        out.insert(s, d);
    }
    out
}

/// Canonical codes ordered by (length, symbol).
fn canonical_codes(lengths: &BTreeMap<u32, u8>) -> BTreeMap<u32, (u64, u8)> {
    let mut by_len: Vec<(u8, u32)> = lengths.iter().map(|(&s, &l)| (l, s)).collect();
    by_len.sort();
    let mut codes = BTreeMap::new();
    let (mut code, mut prev) = (0u64, 0u8);
    for (i, &(l, s)) in by_len.iter().enumerate() {
        if i > 0 {
            code = (code + 1) << (l - prev);
        } else {
            code <<= l;
        }
        prev = l;
        codes.insert(s, (code, l));
    }
    codes
}

/// Huffman-coded symbol streams sharing one code table.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyCoded {
    /// `(symbol, code length)` pairs; codes are rebuilt canonically.
    pub table: Vec<(u32, u8)>,
    pub stream_lens: Vec<usize>,
    pub payload: Vec<u8>,
    pub payload_bits: u64,
}

pub fn entropy_encode(streams: &[Vec<u32>]) -> EntropyCoded {
    let mut hist = BTreeMap::new();
    for s in streams.iter().flatten() {
        *hist.entry(*s).or_insert(0u64) += 1;
    }
    let lengths = huffman_lengths(&hist);
    let codes = canonical_codes(&lengths);
    let mut payload = Vec::new();
    let mut nbits = 0u64;
    for &s in streams.iter().flatten() {
        let (code, len) = codes[&s];
        for b in (0..len).rev() {
            if nbits % 8 == 0 {
                payload.push(0);
            }
            if (code >> b) & 1 == 1 {
                *payload.last_mut().unwrap() |= 0x80 >> (nbits % 8);
            }
            nbits += 1;
        }
    }
    EntropyCoded {
        table: lengths.into_iter().collect(),
        stream_lens: streams.iter().map(|s| s.len()).collect(),
        payload,
        payload_bits: nbits,
    }
}

pub fn entropy_decode(coded: &EntropyCoded) -> Result<Vec<Vec<u32>>> {
    let lengths: BTreeMap<u32, u8> = coded.table.iter().copied().collect();
    let lookup: BTreeMap<(u8, u64), u32> = canonical_codes(&lengths).into_iter().map(|(s, (c, l))| ((l, c), s)).collect();
    let max_len = lengths.values().copied().max().unwrap_or(0);
    let mut pos = 0u64;
    let mut out = Vec::with_capacity(coded.stream_lens.len());
    for &n in &coded.stream_lens {
        let mut s = Vec::with_capacity(n);
        for _ in 0..n {
            let (mut code, mut len) = (0u64, 0u8);
            loop {
                if pos >= coded.payload_bits || len >= max_len {
                    return Err(Error::Format("corrupt entropy-coded payload".into()));
                }
                let bit = (coded.payload[(pos / 8) as usize] >> (7 - pos % 8)) & 1;
                pos += 1;
                code = (code << 1) | bit as u64;
                len += 1;
                if let Some(&sym) = lookup.get(&(len, code)) {
                    s.push(sym);
                    break;
                }
            }
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantRecord {
    pub name: String,
    pub shape: [usize; 4],
    pub min: f32,
    pub scale: f32,
    pub bits: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub layers: Vec<LayerRecord>,
    pub sparsity: f64,
    pub bits: u8,
    pub tensors: Vec<QuantRecord>,
}

/// A quantized, entropy-coded deploy-form model.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub manifest: CompressedManifest,
    pub mask: PruneMask,
    pub coded: EntropyCoded,
}

const ZMAGIC: &[u8; 4] = b"RNVZ";

/// Quantizes the kept weights of a deploy-form model and entropy-codes them.
/// Pruned positions carry no code; they decode to exact zeros.
pub fn compress(model: &RepNerv<f32>, mask: &PruneMask, sparsity: f64, bits: u8) -> Result<CompressedModel> {
    check_bits(bits)?;
    if !model.is_deployed() {
        return Err(Error::Mode("compression needs a deploy-form (fused) model".into()));
    }
    let tensors = model.param_tensors();
    mask.check(&tensors)?;
    let mut records = Vec::with_capacity(tensors.len());
    let mut streams = Vec::with_capacity(tensors.len());
    for ((name, t), keep) in model.param_names().into_iter().zip(&tensors).zip(&mask.keep) {
        let kept: Vec<f32> = t.data().iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| *v).collect();
        let q = quantize(&kept, bits)?;
        records.push(QuantRecord { name, shape: t.shape(), min: q.min, scale: q.scale, bits });
        streams.push(q.codes);
    }
    Ok(CompressedModel {
        manifest: CompressedManifest {
            format_version: 1,
            config: model.config().clone(),
            layers: model
                .stages()
                .iter()
                .map(|s| LayerRecord { mode: s.mode(), block: s.cfg().clone() })
                .collect(),
            sparsity,
            bits,
            tensors: records,
        },
        mask: mask.clone(),
        coded: entropy_encode(&streams),
    })
}

impl CompressedModel {
    pub fn decompress(&self) -> Result<RepNerv<f32>> {
        let m = &self.manifest;
        if m.layers.iter().any(|l| l.mode != RepMode::Deployed) {
            return Err(Error::Format("compressed model must hold fused layers".into()));
        }
        let mut model = skeleton(&m.config, &m.layers)?;
        let streams = entropy_decode(&self.coded)?;
        let names = model.param_names();
        self.mask.check(&model.param_tensors())?;
        if streams.len() != names.len() || m.tensors.len() != names.len() {
            return Err(Error::Format("tensor count mismatch".into()));
        }
        for (((t, rec), codes), (keep, name)) in model
            .param_tensors_mut()
            .into_iter()
            .zip(&m.tensors)
            .zip(&streams)
            .zip(self.mask.keep.iter().zip(&names))
        {
            if rec.name != *name || rec.shape != t.shape() {
                return Err(Error::Format(format!("tensor {} does not match layout {name}", rec.name)));
            }
            if codes.len() != keep.iter().filter(|k| **k).count() {
                return Err(Error::Format(format!("{name}: code count does not match mask")));
            }
            let mut vals = dequantize(codes, rec.min, rec.scale).into_iter();
            for (v, &k) in t.data_mut().iter_mut().zip(keep) {
                *v = if k { vals.next().unwrap() } else { 0.0 };
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(ZMAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        let flags: Vec<bool> = self.mask.keep.iter().flatten().copied().collect();
        out.extend_from_slice(&(flags.len() as u64).to_le_bytes());
        let mut packed = vec![0u8; flags.len().div_ceil(8)];
        for (i, &k) in flags.iter().enumerate() {
            if k {
                packed[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out.extend_from_slice(&packed);
        out.extend_from_slice(&(self.coded.table.len() as u32).to_le_bytes());
        for &(s, l) in &self.coded.table {
            out.extend_from_slice(&s.to_le_bytes());
            out.push(l);
        }
        for &n in &self.coded.stream_lens {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.coded.payload_bits.to_le_bytes());
        out.extend_from_slice(&self.coded.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != ZMAGIC {
            return Err(Error::Format("missing RNVZ magic".into()));
        }
        let mlen = r.u64()? as usize;
        let manifest: CompressedManifest = serde_json::from_slice(r.take(mlen)?)?;
        let nflags = r.u64()? as usize;
        let packed = r.take(nflags.div_ceil(8))?;
        let flags: Vec<bool> = (0..nflags).map(|i| packed[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        let mut keep = Vec::with_capacity(manifest.tensors.len());
        let mut at = 0;
        for rec in &manifest.tensors {
            let n: usize = rec.shape.iter().product();
            let slice = flags.get(at..at + n).ok_or_else(|| Error::Format("mask shorter than tensors".into()))?;
            keep.push(slice.to_vec());
            at += n;
        }
        if at != nflags {
            return Err(Error::Format("mask longer than tensors".into()));
        }
        let nt = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut table = Vec::with_capacity(nt);
        for _ in 0..nt {
            let s = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
            table.push((s, r.take(1)?[0]));
        }
        let stream_lens = (0..manifest.tensors.len()).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let payload_bits = r.u64()?;
        let payload = r.take(payload_bits.div_ceil(8) as usize)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(Self {
            manifest,
            mask: PruneMask { keep },
            coded: EntropyCoded { table, stream_lens, payload, payload_bits },
        })
    }

    /// Size of the serialized file in bits (manifest, mask, code table and payload).
    pub fn total_bits(&self) -> Result<u64> {
        Ok(8 * self.to_bytes()?.len() as u64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let b = self.to_bytes()?;
        std::fs::write(path, &b)?;
        Ok(8 * b.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::Format("truncated RNVZ file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Bits per pixel over all frames.
pub fn bpp(total_bits: u64, frames: usize, height: usize, width: usize) -> Result<f64> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidArgument("bpp needs positive dimensions".into()));
    }
    Ok(total_bits as f64 / (frames * height * width) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub sparsity: f64,
    pub bits: u8,
    pub finetune_steps: u64,
    pub total_bits: u64,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

/// Runs prune, optional fine-tune, quantize, encode, decode and evaluate for
/// every (sparsity, bits) pair.
pub fn rd_point(
    model: &RepNerv<f32>,
    video: &Video,
    sparsity: f64,
    bits: u8,
    finetune: Option<(u64, &TrainConfig)>,
) -> Result<(RdPoint, CompressedModel)> {
    let (mut pruned, mask) = prune(model, sparsity)?;
    let mut steps = 0;
    if let Some((n, cfg)) = finetune {
        pruned = finetune_after_prune(pruned, &mask, video, n, cfg)?.model;
        steps = n;
    }
    let cm = compress(&pruned, &mask, sparsity, bits)?;
    let total_bits = cm.total_bits()?;
    let report = evaluate(&cm.decompress()?, video)?;
    Ok((
        RdPoint {
            sparsity,
            bits,
            finetune_steps: steps,
            total_bits,
            bpp: bpp(total_bits, video.len(), video.height(), video.width())?,
            psnr: report.mean_psnr,
            ms_ssim: report.mean_ms_ssim,
        },
        cm,
    ))
}

pub fn rd_sweep(
    model: &RepNerv<f32>,
    video: &Video,
    sparsities: &[f64],
    bits: &[u8],
    finetune: Option<(u64, &TrainConfig)>,
) -> Result<Vec<RdPoint>> {
    let mut out = Vec::with_capacity(sparsities.len() * bits.len());
    for &s in sparsities {
        for &b in bits {
            out.push(rd_point(model, video, s, b, finetune)?.0);
        }
    }
    Ok(out)
}

pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut s = String::from("sparsity,bits,finetune_steps,total_bits,bpp,psnr,ms_ssim\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.8}",
            p.sparsity, p.bits, p.finetune_steps, p.total_bits, p.bpp, p.psnr, p.ms_ssim
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> RepNerv<f32> {
        let cfg = ModelConfig {
            frame_height: 16,
            frame_width: 16,
            base_height: 4,
            base_width: 4,
            channels: vec![8, 8, 8],
            mlp_hidden: 16,
            pe_levels: 6,
            ..ModelConfig::default()
        };
        RepNerv::init(cfg, RepMode::OnlineTrain, 1).unwrap().structural_fuse().unwrap()
    }

    #[test]
    fn prune_hand_case() {
        let mut t = Tensor::from_vec([1, 4, 1, 1], vec![0.1f32, -0.2, 0.3, -0.05]).unwrap();
        let keep = prune_tensors(&mut [&mut t], &[true], 0.5).unwrap();
        assert_eq!(t.data(), &[0.0, -0.2, 0.3, 0.0]);
        assert_eq!(keep[0], vec![false, true, true, false]);
        let mut u = Tensor::from_vec([1, 2, 1, 1], vec![1.0f32, 2.0]).unwrap();
        let keep = prune_tensors(&mut [&mut u], &[true], 0.0).unwrap();
        assert_eq!(keep[0], vec![true, true]);
        assert!(prune_tensors(&mut [&mut u], &[true], 1.0).is_err());
    }

    #[test]
    fn prune_ties_follow_position_order() {
        let mut a = Tensor::from_vec([1, 3, 1, 1], vec![0.5f32, -0.5, 0.5]).unwrap();
        let mut b = Tensor::from_vec([1, 1, 1, 1], vec![0.5f32]).unwrap();
        let keep = prune_tensors(&mut [&mut a, &mut b], &[true, true], 0.5).unwrap();
        assert_eq!(keep, vec![vec![false, false, true], vec![true]]);
    }

    #[test]
    fn model_prune_spares_biases() {
        let m = small_model();
        let (p, mask) = prune(&m, 0.3).unwrap();
        let names = p.param_names();
        let n_weights: usize = names.iter().zip(m.param_tensors()).filter(|(n, _)| !n.ends_with("bias")).map(|(_, t)| t.len()).sum();
        assert_eq!(mask.pruned_count(), (0.3 * n_weights as f64).floor() as usize);
        for (n, k) in names.iter().zip(&mask.keep) {
            if n.ends_with("bias") {
                assert!(k.iter().all(|&x| x));
            }
        }
        let train_form = RepNerv::<f32>::init(m.config().clone(), RepMode::OnlineTrain, 0).unwrap();
        assert!(matches!(prune(&train_form, 0.1), Err(Error::Mode(_))));
    }

    #[test]
    fn quantize_cases() {
        let q = quantize(&[0.0, 0.2, 1.0], 8).unwrap();
        assert_eq!(q.codes, vec![0, 51, 255]);
        let q = quantize(&[0.7; 5], 8).unwrap();
        assert_eq!(q.codes, vec![0; 5]);
        assert_eq!(q.scale, 0.0);
        assert_eq!(dequantize(&q.codes, q.min, q.scale), vec![0.7; 5]);
        assert!(quantize(&[1.0], 1).is_err());
        assert!(quantize(&[1.0], 17).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bits in 2..=16u8 {
            let v: Vec<f32> = (0..300).map(|_| rng.gen_range(-1.5f32..1.5)).collect();
            let q = quantize(&v, bits).unwrap();
            let d = dequantize(&q.codes, q.min, q.scale);
            for (a, b) in v.iter().zip(&d) {
                assert!((a - b).abs() <= q.scale / 2.0 + 1e-7, "bits {bits}");
            }
            assert_eq!(quantize(&d, bits).unwrap().codes, q.codes);
        }
    }

    #[test]
    fn huffman_three_symbols() {
        let c = entropy_encode(&[vec![7, 7, 8, 9]]);
        let lengths: BTreeMap<u32, u8> = c.table.iter().copied().collect();
        assert_eq!(lengths[&7], 1);
        assert_eq!((lengths[&8], lengths[&9]), (2, 2));
        assert_eq!(c.payload_bits, 6);
        assert_eq!(entropy_decode(&c).unwrap(), vec![vec![7, 7, 8, 9]]);
    }

    #[test]
    fn huffman_single_symbol_and_empty() {
        let c = entropy_encode(&[vec![3; 10], vec![]]);
        assert_eq!(c.payload_bits, 10);
        assert_eq!(entropy_decode(&c).unwrap(), vec![vec![3; 10], vec![]]);
        let e = entropy_encode(&[]);
        assert_eq!(e.payload_bits, 0);
        assert!(entropy_decode(&e).unwrap().is_empty());
    }

    #[test]
    fn huffman_uniform_is_near_fixed_width() {
        let s: Vec<u32> = (0..4096).map(|i| i % 256).collect();
        let c = entropy_encode(&[s]);
        assert_eq!(c.payload_bits, 8 * 4096);
    }

    #[test]
    fn compressed_model_round_trip() {
        let m = small_model();
        let (p, mask) = prune(&m, DEFAULT_SPARSITY).unwrap();
        let cm = compress(&p, &mask, DEFAULT_SPARSITY, DEFAULT_BITS).unwrap();
        let bytes = cm.to_bytes().unwrap();
        assert_eq!(8 * bytes.len() as u64, cm.total_bits().unwrap());
        let back = CompressedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, cm);
        let d = back.decompress().unwrap();
        for (t, k) in d.param_tensors().iter().zip(&mask.keep) {
            assert!(t.data().iter().zip(k).all(|(v, &keep)| keep || *v == 0.0));
        }
        assert!(cm.manifest.tensors.iter().all(|r| r.bits == DEFAULT_BITS));
        // Decoded values equal quantize -> dequantize of the kept weights.
        for ((dt, pt), k) in d.param_tensors().iter().zip(p.param_tensors()).zip(&mask.keep) {
            let kept: Vec<f32> = pt.data().iter().zip(k).filter(|(_, &x)| x).map(|(v, _)| *v).collect();
            let q = quantize(&kept, 8).unwrap();
            let want = dequantize(&q.codes, q.min, q.scale);
            let got: Vec<f32> = dt.data().iter().zip(k).filter(|(_, &x)| x).map(|(v, _)| *v).collect();
            assert_eq!(got, want);
        }
        let mut bad = bytes.clone();
        bad.pop();
        assert!(CompressedModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn bpp_cases() {
        assert_eq!(bpp(1_000_000, 10, 100, 100).unwrap(), 10.0);
        assert_eq!(bpp(1_000_000, 20, 100, 100).unwrap(), 5.0);
        assert!(bpp(1, 0, 1, 1).is_err());
    }

    #[test]
    fn empty_sweep_is_empty() {
        let m = small_model();
        let v = crate::video::synth_video(crate::video::SynthKind::MovingGradient, 2, 16, 16, 0).unwrap();
        assert!(rd_sweep(&m, &v, &[], &[8], None).unwrap().is_empty());
        assert!(rd_csv(&[]).lines().count() == 1);
    }
}
