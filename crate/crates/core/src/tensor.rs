//! Dense row-major `f64` tensors and the structural kernels used by the
//! localization head: 2×2 pooling, per-axis reduction and their backward
//! passes.
//!
//! All pooling uses non-overlapping windows of 2 with stride 2. Max pooling
//! breaks ties by taking the first window element in row-major order, and the
//! backward pass routes the upstream gradient to that same element.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("zero dimension in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 1-D tensor owning `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from nested rows; all rows must have the same length.
    pub fn matrix<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(h * w);
        for r in rows {
            let r = r.as_ref();
            if r.len() != w {
                return shape_err("ragged rows");
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![h, w], data)
    }

    /// Length-`len` vector that is `amplitude` at `index` and zero elsewhere.
    pub fn one_hot(len: usize, index: usize, amplitude: f64) -> Self {
        let mut data = vec![0.0; len];
        data[index] = amplitude;
        Tensor::vector(data)
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

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => shape_err(format!("expected rank 2, got shape {:?}", self.shape)),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!(
                "axpy shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry; the first one wins on ties.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Window aggregation used by the pooling kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Average,
}

/// Per-axis reduction used to turn a 2-D map into x and y logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceKind {
    Sum,
    Mean,
}

// Plane-level kernels shared with the network's multi-channel pooling.

/// Row-major offsets of the 2×2 window whose top-left corner is `(2i, 2j)`.
#[inline]
fn window(w: usize, i: usize, j: usize) -> [usize; 4] {
    let a = 2 * i * w + 2 * j;
    [a, a + 1, a + w, a + w + 1]
}

#[inline]
fn window_argmax(src: &[f64], idx: [usize; 4]) -> usize {
    let mut best = idx[0];
    for &k in &idx[1..] {
        if src[k] > src[best] {
            best = k;
        }
    }
    best
}

pub(crate) fn pool_plane(src: &[f64], h: usize, w: usize, kind: PoolKind, dst: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(dst.len(), oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let idx = window(w, i, j);
            dst[i * ow + j] = match kind {
                PoolKind::Max => src[window_argmax(src, idx)],
                PoolKind::Average => idx.iter().map(|&k| src[k]).sum::<f64>() * 0.25,
            };
        }
    }
}

/// Accumulates the pooling gradient for one plane into `dsrc`.
pub(crate) fn pool_plane_backward(
    src: &[f64],
    h: usize,
    w: usize,
    kind: PoolKind,
    upstream: &[f64],
    dsrc: &mut [f64],
) {
    let (oh, ow) = (h / 2, w / 2);
    for i in 0..oh {
        for j in 0..ow {
            let g = upstream[i * ow + j];
            let idx = window(w, i, j);
            match kind {
                PoolKind::Max => dsrc[window_argmax(src, idx)] += g,
                PoolKind::Average => idx.iter().for_each(|&k| dsrc[k] += 0.25 * g),
            }
        }
    }
}

fn check_even_2d(x: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = x.dims2()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("pool2d needs even dimensions, got {h}x{w}"));
    }
    Ok((h, w))
}

/// 2×2, stride-2 pooling of an `H×W` map into `H/2×W/2`.
pub fn pool2d(x: &Tensor, kind: PoolKind) -> Result<Tensor> {
    let (h, w) = check_even_2d(x)?;
    let mut out = vec![0.0; (h / 2) * (w / 2)];
    pool_plane(x.data(), h, w, kind, &mut out);
    Tensor::new(vec![h / 2, w / 2], out)
}

/// Gradient of [`pool2d`] with respect to `x`.
pub fn pool2d_backward(x: &Tensor, kind: PoolKind, upstream: &Tensor) -> Result<Tensor> {
    let (h, w) = check_even_2d(x)?;
    if upstream.shape() != [h / 2, w / 2] {
        return shape_err(format!(
            "pool2d upstream {:?} does not match input {h}x{w}",
            upstream.shape()
        ));
    }
    let mut dx = Tensor::zeros(&[h, w]);
    pool_plane_backward(x.data(), h, w, kind, upstream.data(), dx.data_mut());
    Ok(dx)
}

fn check_even_1d(v: &Tensor) -> Result<usize> {
    match v.shape() {
        [c] if c % 2 == 0 => Ok(*c),
        s => shape_err(format!("pool1d needs an even-length vector, got {s:?}")),
    }
}

/// Length-2, stride-2 pooling of a vector.
pub fn pool1d(v: &Tensor, kind: PoolKind) -> Result<Tensor> {
    let c = check_even_1d(v)?;
    let d = v.data();
    let out = (0..c / 2)
        .map(|i| {
            let (a, b) = (d[2 * i], d[2 * i + 1]);
            match kind {
                PoolKind::Max => {
                    if b > a {
                        b
                    } else {
                        a
                    }
                }
                PoolKind::Average => 0.5 * (a + b),
            }
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// Gradient of [`pool1d`] with respect to `v`.
pub fn pool1d_backward(v: &Tensor, kind: PoolKind, upstream: &Tensor) -> Result<Tensor> {
    let c = check_even_1d(v)?;
    if upstream.shape() != [c / 2] {
        return shape_err("pool1d upstream length mismatch");
    }
    let d = v.data();
    let mut dv = vec![0.0; c];
    for (i, &g) in upstream.data().iter().enumerate() {
        match kind {
            PoolKind::Max => {
                let k = if d[2 * i + 1] > d[2 * i] {
                    2 * i + 1
                } else {
                    2 * i
                };
                dv[k] += g;
            }
            PoolKind::Average => {
                dv[2 * i] += 0.5 * g;
                dv[2 * i + 1] += 0.5 * g;
            }
        }
    }
    Ok(Tensor::vector(dv))
}

/// Collapses an `H×W` map into x-logits (one per column, length `W`) and
/// y-logits (one per row, length `H`).
pub fn reduce_axes(x: &Tensor, kind: ReduceKind) -> Result<(Tensor, Tensor)> {
    let (h, w) = x.dims2()?;
    let d = x.data();
    let mut xs = vec![0.0; w];
    let mut ys = vec![0.0; h];
    for i in 0..h {
        let row = &d[i * w..(i + 1) * w];
        for (acc, &v) in xs.iter_mut().zip(row) {
            *acc += v;
        }
        ys[i] = row.iter().sum();
    }
    if kind == ReduceKind::Mean {
        xs.iter_mut().for_each(|v| *v /= h as f64);
        ys.iter_mut().for_each(|v| *v /= w as f64);
    }
    Ok((Tensor::vector(xs), Tensor::vector(ys)))
}

/// Gradient of [`reduce_axes`]; the map shape is `[len(upstream_y), len(upstream_x)]`.
pub fn reduce_axes_backward(
    kind: ReduceKind,
    upstream_x: &Tensor,
    upstream_y: &Tensor,
) -> Result<Tensor> {
    let (w, h) = match (upstream_x.shape(), upstream_y.shape()) {
        ([w], [h]) => (*w, *h),
        _ => return shape_err("reduce_axes upstream gradients must be vectors"),
    };
    let (sx, sy) = match kind {
        ReduceKind::Sum => (1.0, 1.0),
        ReduceKind::Mean => (1.0 / h as f64, 1.0 / w as f64),
    };
    let gx = upstream_x.data();
    let gy = upstream_y.data();
    let mut out = Vec::with_capacity(h * w);
    for &gyi in gy {
        out.extend(gx.iter().map(|&gxj| sx * gxj + sy * gyi));
    }
    Tensor::new(vec![h, w], out)
}

impl From<Tensor> for Vec<f64> {
    fn from(t: Tensor) -> Self {
        t.data
    }
}

impl TryFrom<(Vec<usize>, Vec<f64>)> for Tensor {
    type Error = Error;

    fn try_from((shape, data): (Vec<usize>, Vec<f64>)) -> Result<Self> {
        Tensor::new(shape, data)
    }
}
