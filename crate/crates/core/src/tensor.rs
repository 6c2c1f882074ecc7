use std::io::{Read, Write};

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::scalar::{c, Scalar};

/// Dense rank-4 array in (batch, channel, height, width) order, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Length-`d` vector stored as shape (1, d, 1, 1).
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: [1, data.len(), 1, 1],
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| c(rng.gen_range(lo..hi))).collect();
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, ch: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.shape;
        ((n * cc + ch) * hh + h) * ww + w
    }

    #[inline]
    pub fn at(&self, n: usize, ch: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, ch, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, ch: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, ch, h, w);
        self.data[i] = v;
    }

    /// Number of scalars per (n, c) plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn reshape(&self, shape: [usize; 4]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    /// Frame `n` as a (1, C, H, W) tensor.
    pub fn slice_batch(&self, n: usize) -> Self {
        let per = self.shape[1] * self.plane();
        Self {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::InvalidArgument("cannot stack zero tensors".into()));
        };
        let [_, ch, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != [ch, h, w] {
                return shape_err(format!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, ch, h, w],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} += {:?}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| c(v.to_f64_lossy())).collect(),
        }
    }

    /// Writes the `RNVT` binary form: magic, four u64 LE extents, f32 LE payload.
    pub fn write_rnvt<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"RNVT")?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_rnvt<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"RNVT" {
            return Err(Error::Format("missing RNVT magic".into()));
        }
        let mut shape = [0usize; 4];
        let mut buf = [0u8; 8];
        for e in shape.iter_mut() {
            r.read_exact(&mut buf)?;
            *e = usize::try_from(u64::from_le_bytes(buf))
                .map_err(|_| Error::Format("extent overflows usize".into()))?;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| c(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        Ok(Self { shape, data })
    }
}

/// max |a - b| / max |b|, the scaled infinity-norm error used by every equivalence check.
pub fn rel_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_err shape mismatch");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs().to_f64_lossy()));
    let scale = b.max_abs().to_f64_lossy().max(f64::MIN_POSITIVE);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
