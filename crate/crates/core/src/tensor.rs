//! Dense row-major `f64` tensors and the forward kernels the tape is built on.
//!
//! Every kernel here is a pure function with a fixed summation order, so the
//! same inputs always produce bit-identical outputs.

use std::fmt;

use crate::error::{HglError, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Normalization domain for [`softmax`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SoftmaxMode {
    /// One distribution over every entry.
    Global,
    /// One distribution per row.
    PerRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    /// Pass-through; used for purely affine layers.
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub(crate) fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(HglError::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(HglError::dim("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
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

    /// Row count of a matrix; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(HglError::Contract(format!(
                "expected a scalar, found shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(HglError::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn add_scaled_assign(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape.len() != 2 {
        return Err(HglError::dim(op, &t.shape, &[0, 0]));
    }
    Ok(())
}

/// `a · b` for `a: R×S`, `b: S×T`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul", a)?;
    require_matrix("matmul", b)?;
    let (r, s) = (a.shape[0], a.shape[1]);
    let (s2, t) = (b.shape[0], b.shape[1]);
    if s != s2 {
        return Err(HglError::dim("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; r * t];
    for i in 0..r {
        let out_row = &mut out[i * t..(i + 1) * t];
        for k in 0..s {
            let av = a.data[i * s + k];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[k * t..(k + 1) * t];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![r, t],
        data: out,
    })
}

/// `a · bᵀ` for `a: R×S`, `b: T×S`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul_nt", a)?;
    require_matrix("matmul_nt", b)?;
    let (r, s) = (a.shape[0], a.shape[1]);
    let (t, s2) = (b.shape[0], b.shape[1]);
    if s != s2 {
        return Err(HglError::dim("matmul_nt", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; r * t];
    for i in 0..r {
        let a_row = &a.data[i * s..(i + 1) * s];
        for j in 0..t {
            let b_row = &b.data[j * s..(j + 1) * s];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * t + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![r, t],
        data: out,
    })
}

/// `aᵀ · b` for `a: S×R`, `b: S×T`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul_tn", a)?;
    require_matrix("matmul_tn", b)?;
    let (s, r) = (a.shape[0], a.shape[1]);
    let (s2, t) = (b.shape[0], b.shape[1]);
    if s != s2 {
        return Err(HglError::dim("matmul_tn", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; r * t];
    for k in 0..s {
        let a_row = &a.data[k * r..(k + 1) * r];
        let b_row = &b.data[k * t..(k + 1) * t];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * t..(i + 1) * t];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![r, t],
        data: out,
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    require_matrix("transpose", a)?;
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor {
        shape: vec![c, r],
        data: out,
    })
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Max-subtracted softmax over all entries or over each row.
pub fn softmax(x: &Tensor, mode: SoftmaxMode) -> Result<Tensor> {
    if x.data.is_empty() {
        return Err(HglError::Domain {
            op: "softmax",
            reason: "empty tensor".into(),
        });
    }
    let mut out = vec![0.0; x.data.len()];
    match mode {
        SoftmaxMode::Global => softmax_slice(&x.data, &mut out),
        SoftmaxMode::PerRow => {
            let c = x.cols();
            for (xr, or) in x.data.chunks(c).zip(out.chunks_mut(c)) {
                softmax_slice(xr, or);
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Per-row `log softmax`, computed via log-sum-exp.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.data.is_empty() {
        return Err(HglError::Domain {
            op: "log_softmax",
            reason: "empty tensor".into(),
        });
    }
    let c = x.cols();
    let mut out = vec![0.0; x.data.len()];
    for (xr, or) in x.data.chunks(c).zip(out.chunks_mut(c)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Column-wise concatenation `[a, b]` of two matrices with equal row counts.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("concat", a)?;
    require_matrix("concat", b)?;
    if a.shape[0] != b.shape[0] {
        return Err(HglError::dim("concat", &a.shape, &b.shape));
    }
    let r = a.shape[0];
    let (ca, cb) = (a.shape[1], b.shape[1]);
    let mut data = Vec::with_capacity(r * (ca + cb));
    for i in 0..r {
        data.extend_from_slice(&a.data[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.data[i * cb..(i + 1) * cb]);
    }
    Ok(Tensor {
        shape: vec![r, ca + cb],
        data,
    })
}

pub fn activate(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// Mean over rows, `R×C → 1×C`.
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    require_matrix("mean_rows", x)?;
    let (r, c) = (x.shape[0], x.shape[1]);
    if r == 0 {
        return Err(HglError::Domain {
            op: "mean_rows",
            reason: "no rows".into(),
        });
    }
    let mut out = vec![0.0; c];
    for row in x.data.chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = 1.0 / r as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(Tensor {
        shape: vec![1, c],
        data: out,
    })
}

/// All ordered pairs: row `i*Q + j` of the output is `u_i + v_j`.
pub fn pairwise_add(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    require_matrix("pairwise_add", u)?;
    require_matrix("pairwise_add", v)?;
    if u.shape[1] != v.shape[1] {
        return Err(HglError::dim("pairwise_add", &u.shape, &v.shape));
    }
    let (p, q, c) = (u.shape[0], v.shape[0], u.shape[1]);
    let mut data = Vec::with_capacity(p * q * c);
    for i in 0..p {
        let ur = &u.data[i * c..(i + 1) * c];
        for j in 0..q {
            let vr = &v.data[j * c..(j + 1) * c];
            data.extend(ur.iter().zip(vr).map(|(a, b)| a + b));
        }
    }
    Ok(Tensor {
        shape: vec![p * q, c],
        data,
    })
}
