//! Dense row-major `f64` tensors and the block pooling primitives.
//!
//! A tensor is either a single feature map `(C, H, W)` or a batch
//! `(B, C, H, W)`. Storage is channel-major: the last two axes are the
//! spatial grid and everything in front of them is flattened into a list
//! of planes. Pooling and replication act plane by plane with a square,
//! non-overlapping window (stride equals window).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() != 3 && shape.len() != 4 {
            return Err(Error::dim(format!(
                "expected rank 3 (C,H,W) or rank 4 (B,C,H,W), got shape {shape:?}"
            )));
        }
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero-sized axis in shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; len])
    }

    /// Builds a `(C, H, W)` tensor from `f(c, h, w)`.
    pub fn from_fn(
        (c, h, w): (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    data.push(f(ci, hi, wi));
                }
            }
        }
        Self::new(vec![c, h, w], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn channels(&self) -> usize {
        self.shape[self.rank() - 3]
    }

    pub fn height(&self) -> usize {
        self.shape[self.rank() - 2]
    }

    pub fn width(&self) -> usize {
        self.shape[self.rank() - 1]
    }

    /// Number of `H x W` planes (`C` or `B * C`).
    pub fn planes(&self) -> usize {
        self.shape[..self.rank() - 2].iter().product()
    }

    pub fn plane(&self, p: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.data[p * n..(p + 1) * n]
    }

    /// Value at `(c, h, w)` of a rank-3 tensor.
    pub fn at(&self, c: usize, h: usize, w: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.height() + h) * self.width() + w]
    }

    /// Same leading axes, new spatial grid.
    fn with_grid(&self, h: usize, w: usize) -> Vec<usize> {
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = h;
        shape[r - 1] = w;
        shape
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    /// Multiplies every cell of channel `c` by `w[c]`.
    pub fn broadcast_mul(&self, w: &ChannelVector) -> Result<Tensor> {
        let c = self.channels();
        if w.len() != c {
            return Err(Error::shape(format!(
                "channel vector of length {} against {c} channels",
                w.len()
            )));
        }
        let n = self.height() * self.width();
        let mut data = self.data.clone();
        for (p, plane) in data.chunks_mut(n).enumerate() {
            let s = w.as_slice()[p % c];
            plane.iter_mut().for_each(|v| *v *= s);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial mean of every channel of a rank-3 tensor.
    pub fn channel_means(&self) -> Vec<f64> {
        let n = self.height() * self.width();
        self.data
            .chunks(n)
            .map(|p| p.iter().sum::<f64>() / n as f64)
            .collect()
    }
}

/// Per-channel scale factors broadcast over the spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector(Vec<f64>);

impl ChannelVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("channel vector must be non-empty"));
        }
        Ok(Self(values))
    }

    pub fn filled(len: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn ones(len: usize) -> Result<Self> {
        Self::filled(len, 1.0)
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::filled(len, 0.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_window(x: &Tensor, k: usize) -> Result<(usize, usize)> {
    let (h, w) = (x.height(), x.width());
    if k == 0 {
        return Err(Error::dim("pooling window must be positive"));
    }
    if h % k != 0 || w % k != 0 {
        return Err(Error::dim(format!(
            "{h}x{w} grid is not divisible by window {k}"
        )));
    }
    Ok((h / k, w / k))
}

fn pool(x: &Tensor, k: usize, reduce: impl Fn(&[f64], usize, usize, usize) -> f64) -> Result<Tensor> {
    let (oh, ow) = check_window(x, k)?;
    let w = x.width();
    let mut data = Vec::with_capacity(x.planes() * oh * ow);
    for p in 0..x.planes() {
        let plane = x.plane(p);
        for by in 0..oh {
            for bx in 0..ow {
                data.push(reduce(plane, w, by * k, bx * k));
            }
        }
    }
    Tensor::new(x.with_grid(oh, ow), data)
}

/// Mean of every `k x k` block, summed row-major with Neumaier compensation.
/// The compensated sum keeps the mean within about half an ulp, so the
/// high-frequency residual of each block sums to zero to within a few ulp.
pub fn block_avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let denom = (k * k) as f64;
    pool(x, k, |plane, w, y0, x0| {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for dy in 0..k {
            for &v in &plane[(y0 + dy) * w + x0..(y0 + dy) * w + x0 + k] {
                let t = sum + v;
                comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
                sum = t;
            }
        }
        (sum + comp) / denom
    })
}

/// Maximum of every `k x k` block.
pub fn block_max_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    pool(x, k, |plane, w, y0, x0| {
        let mut m = f64::NEG_INFINITY;
        for dy in 0..k {
            for dx in 0..k {
                m = m.max(plane[(y0 + dy) * w + x0 + dx]);
            }
        }
        m
    })
}

/// Flat index (into `x.data()`) of the first maximal element of every
/// `k x k` block, in row-major block order. Ties resolve to the earliest
/// cell in row-major order.
pub fn block_argmax(x: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (oh, ow) = check_window(x, k)?;
    let (h, w) = (x.height(), x.width());
    let mut out = Vec::with_capacity(x.planes() * oh * ow);
    for p in 0..x.planes() {
        let base = p * h * w;
        let plane = x.plane(p);
        for by in 0..oh {
            for bx in 0..ow {
                let mut best = (by * k) * w + bx * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = (by * k + dy) * w + bx * k + dx;
                        if plane[i] > plane[best] {
                            best = i;
                        }
                    }
                }
                out.push(base + best);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour upsampling: every cell becomes a `k x k` block.
pub fn upsample_replicate(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::dim("replication factor must be positive"));
    }
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = (h * k, w * k);
    let mut data = Vec::with_capacity(x.planes() * oh * ow);
    for p in 0..x.planes() {
        let plane = x.plane(p);
        for y in 0..oh {
            let row = &plane[(y / k) * w..(y / k + 1) * w];
            for xx in 0..ow {
                data.push(row[xx / k]);
            }
        }
    }
    Tensor::new(x.with_grid(oh, ow), data)
}
