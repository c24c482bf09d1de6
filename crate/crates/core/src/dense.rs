//! Plaintext dense tensors, the reference every tile tensor result is checked
//! against. Storage is row-major.

use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::shape::ElementwiseOp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DenseError {
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("tensor shape must be non-empty with positive extents, got {0:?}")]
    BadShape(Vec<usize>),
    #[error("incompatible shapes {left:?} and {right:?}: {reason}")]
    Incompatible {
        left: Vec<usize>,
        right: Vec<usize>,
        reason: String,
    },
    #[error("dimension {dim} out of range for rank {rank}")]
    DimOutOfRange { dim: usize, rank: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize, DenseError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(DenseError::BadShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

/// Iterates over every multi-index of `shape` in row-major order.
pub fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.contains(&0) {
        return;
    }
    let mut idx = vec![0; shape.len()];
    loop {
        f(&idx);
        let mut i = shape.len();
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            idx[i] += 1;
            if idx[i] < shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, DenseError> {
        let expected = check_shape(&shape)?;
        if values.len() != expected {
            return Err(DenseError::LengthMismatch {
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(DenseTensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, DenseError> {
        let n = check_shape(shape)?;
        Ok(DenseTensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        })
    }

    pub fn from_fn(
        shape: &[usize],
        mut f: impl FnMut(&[usize]) -> f64,
    ) -> Result<Self, DenseError> {
        let n = check_shape(shape)?;
        let mut values = Vec::with_capacity(n);
        for_each_index(shape, |idx| values.push(f(idx)));
        Ok(DenseTensor {
            shape: shape.to_vec(),
            values,
        })
    }

    /// Uniform values in `[-1, 1)`.
    pub fn random(shape: &[usize], rng: &mut impl Rng) -> Result<Self, DenseError> {
        Self::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    pub fn identity(n: usize) -> Result<Self, DenseError> {
        Self::from_fn(&[n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.values[o] = v;
    }

    /// Metadata-only reshape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, DenseError> {
        Self::new(shape.to_vec(), self.values.clone())
    }

    /// Shape with every extent-1 dimension removed (`[1]` for a scalar).
    pub fn squeezed_shape(&self) -> Vec<usize> {
        let s: Vec<usize> = self.shape.iter().copied().filter(|&n| n != 1).collect();
        if s.is_empty() {
            vec![1]
        } else {
            s
        }
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self, DenseError> {
        if self.rank() != 2 {
            return Err(DenseError::Incompatible {
                left: self.shape.clone(),
                right: vec![],
                reason: "transpose needs a matrix".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Self::from_fn(&[c, r], |i| self.values[i[1] * c + i[0]])
    }

    /// Largest absolute value (0 for an all-zero tensor).
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Parses the text format: a `shape:` header followed by row-major
    /// values. Lines starting with `#` are comments.
    pub fn from_text(text: &str) -> Result<Self, DenseError> {
        let mut shape: Option<Vec<usize>> = None;
        let mut values = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = no + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| DenseError::Parse { line: lineno, msg };
            match &shape {
                None => {
                    let rest = line
                        .strip_prefix("shape:")
                        .ok_or_else(|| parse_err("expected `shape:` header".into()))?;
                    let dims = rest
                        .split_whitespace()
                        .map(|t| {
                            t.parse::<usize>()
                                .map_err(|_| parse_err(format!("bad extent `{t}`")))
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    check_shape(&dims).map_err(|e| parse_err(e.to_string()))?;
                    shape = Some(dims);
                }
                Some(_) => {
                    for tok in line.split_whitespace() {
                        values.push(
                            tok.parse::<f64>()
                                .map_err(|_| parse_err(format!("bad number `{tok}`")))?,
                        );
                    }
                }
            }
        }
        let shape = shape.ok_or(DenseError::Parse {
            line: text.lines().count().max(1),
            msg: "missing `shape:` header".into(),
        })?;
        Self::new(shape, values)
    }

    /// Text format with one row of the last dimension per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("shape:");
        for n in &self.shape {
            let _ = write!(out, " {n}");
        }
        out.push('\n');
        let row = *self.shape.last().unwrap_or(&1);
        for chunk in self.values.chunks(row) {
            let line: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Elementwise operator with broadcasting of extent-1 dimensions.
pub fn dense_elementwise(
    a: &DenseTensor,
    b: &DenseTensor,
    op: ElementwiseOp,
) -> Result<DenseTensor, DenseError> {
    let incompatible = |reason: String| DenseError::Incompatible {
        left: a.shape.clone(),
        right: b.shape.clone(),
        reason,
    };
    if a.rank() != b.rank() {
        return Err(incompatible("ranks differ".into()));
    }
    let mut shape = Vec::with_capacity(a.rank());
    for (i, (&x, &y)) in a.shape.iter().zip(&b.shape).enumerate() {
        if x != y && x != 1 && y != 1 {
            return Err(incompatible(format!("dimension {} has {x} vs {y}", i + 1)));
        }
        shape.push(x.max(y));
    }
    let mut ia = vec![0; a.rank()];
    let mut ib = vec![0; b.rank()];
    DenseTensor::from_fn(&shape, |idx| {
        for k in 0..idx.len() {
            ia[k] = idx[k] % a.shape[k];
            ib[k] = idx[k] % b.shape[k];
        }
        op.apply(a.get(&ia), b.get(&ib))
    })
}

/// Sums over dimension `dim` (1-based), keeping it with extent 1.
pub fn dense_sum(a: &DenseTensor, dim: usize) -> Result<DenseTensor, DenseError> {
    if dim == 0 || dim > a.rank() {
        return Err(DenseError::DimOutOfRange {
            dim,
            rank: a.rank(),
        });
    }
    let i = dim - 1;
    let mut shape = a.shape.clone();
    let n = shape[i];
    shape[i] = 1;
    let mut src = vec![0; a.rank()];
    DenseTensor::from_fn(&shape, |idx| {
        src.copy_from_slice(idx);
        (0..n)
            .map(|k| {
                src[i] = k;
                a.get(&src)
            })
            .sum()
    })
}

fn check_matmul(a: &DenseTensor, b: &DenseTensor) -> Result<(usize, usize, usize), DenseError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(DenseError::Incompatible {
            left: a.shape.clone(),
            right: b.shape.clone(),
            reason: "matrix product needs [a,b] x [b,c]".into(),
        });
    }
    Ok((a.shape[0], a.shape[1], b.shape[1]))
}

/// Standard matrix product.
pub fn dense_matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor, DenseError> {
    let (m, k, n) = check_matmul(a, b)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a.values[i * k + p];
            for j in 0..n {
                out[i * n + j] += x * b.values[p * n + j];
            }
        }
    }
    DenseTensor::new(vec![m, n], out)
}

/// Matrix product through `sum(A[a,b,1] * B[1,b,c], 2)`, reshaped to `[a,c]`.
pub fn dense_matmul_broadcast(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor, DenseError> {
    let (m, k, n) = check_matmul(a, b)?;
    let a3 = a.reshape(&[m, k, 1])?;
    let b3 = b.reshape(&[1, k, n])?;
    let prod = dense_elementwise(&a3, &b3, ElementwiseOp::Mul)?;
    dense_sum(&prod, 2)?.reshape(&[m, n])
}

/// `max |a - e| / max |e|`, falling back to the absolute error when the
/// expected tensor is all zeros. Shapes must hold the same number of values.
pub fn relative_error(actual: &DenseTensor, expected: &DenseTensor) -> f64 {
    assert_eq!(
        actual.len(),
        expected.len(),
        "relative_error on tensors of different sizes"
    );
    let diff = actual
        .values
        .iter()
        .zip(&expected.values)
        .fold(0.0f64, |m, (a, e)| m.max((a - e).abs()));
    let scale = expected.max_abs();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
