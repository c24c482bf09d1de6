//! Tile tensor shape notation.
//!
//! A shape such as `[5/2,*/4,18?/8]` describes both the tensor packed inside a
//! tile tensor and how it is laid out across tiles. Each comma separated entry
//! is a [`DimSpec`]: the original extent `n`, the replication count `d` (the
//! `*` part), the tile extent `t` (below the slash) and the `?` flag marking
//! unused slots that may hold arbitrary values.
//!
//! Grammar (whitespace is allowed around every token):
//!
//! ```text
//! shape     = "[" , dim , { "," , dim } , "]" ;
//! dim       = numerator , [ "/" , integer ] ;
//! numerator = [ integer ] , [ "*" , [ integer ] ] , [ "?" ] ;
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Errors raised while parsing shapes or combining them.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("dimension {dim}: {msg}")]
    Constraint { dim: usize, msg: String },
    #[error("shape must have at least one dimension")]
    Empty,
    #[error("rank mismatch: {left} vs {right}")]
    RankMismatch { left: usize, right: usize },
    #[error("dimension {dim}: tile extents differ ({left} vs {right})")]
    TileMismatch {
        dim: usize,
        left: usize,
        right: usize,
    },
    #[error("dimension {dim}: `{left}` and `{right}` are incompatible: {reason}")]
    Incompatible {
        dim: usize,
        left: String,
        right: String,
        reason: String,
    },
    #[error("dimension {dim} out of range for rank {rank}")]
    DimOutOfRange { dim: usize, rank: usize },
    #[error("tile extents multiply to {product} but the backend has {slots} slots")]
    SlotMismatch { product: usize, slots: usize },
    #[error("tensor of shape {tensor:?} does not match {shape}")]
    TensorMismatch { tensor: Vec<usize>, shape: String },
    #[error("cannot pack into {0}: packing never produces unknown slots")]
    UnknownTarget(String),
    #[error("dimension {dim}: {msg}")]
    Precondition { dim: usize, msg: String },
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
}

impl ShapeError {
    /// Renders the offending input with a caret under the error position.
    /// Returns `None` for errors that are not tied to a position.
    pub fn caret(&self, input: &str) -> Option<String> {
        match self {
            ShapeError::Syntax { pos, .. } => {
                let col = input[..(*pos).min(input.len())].chars().count();
                Some(format!("{input}\n{}^", " ".repeat(col)))
            }
            _ => None,
        }
    }

    pub fn is_syntax(&self) -> bool {
        matches!(
            self,
            ShapeError::Syntax { .. } | ShapeError::Constraint { .. } | ShapeError::Empty
        )
    }
}

/// One dimension of a tile tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DimSpec {
    /// Extent of the original tensor along this dimension.
    pub n: usize,
    /// Physical replication count.
    pub d: usize,
    /// Tile extent.
    pub t: usize,
    /// Unused slots along this dimension may hold arbitrary values.
    pub unknown: bool,
}

impl DimSpec {
    pub fn new(n: usize, d: usize, t: usize, unknown: bool) -> Result<Self, ShapeError> {
        let spec = DimSpec { n, d, t, unknown };
        spec.validate(1)?;
        Ok(spec)
    }

    /// `n/t` without replication.
    pub fn plain(n: usize, t: usize) -> Self {
        DimSpec {
            n,
            d: 1,
            t,
            unknown: false,
        }
    }

    /// `*/t`: a degenerate dimension replicated across the whole tile extent.
    pub fn replicated(t: usize) -> Self {
        DimSpec {
            n: 1,
            d: t,
            t,
            unknown: false,
        }
    }

    /// `1?/t`
    pub fn unknown_one(t: usize) -> Self {
        DimSpec {
            n: 1,
            d: 1,
            t,
            unknown: true,
        }
    }

    fn validate(&self, dim: usize) -> Result<(), ShapeError> {
        let fail = |msg: String| Err(ShapeError::Constraint { dim, msg });
        if self.n == 0 || self.d == 0 || self.t == 0 {
            return fail("extents must be positive".into());
        }
        if self.d > 1 && self.n > 1 {
            return fail(format!(
                "replication requires a degenerate dimension (n={}, d={})",
                self.n, self.d
            ));
        }
        if self.d > self.t {
            return fail(format!(
                "replication count {} exceeds tile extent {}",
                self.d, self.t
            ));
        }
        Ok(())
    }

    /// Number of leading logical positions holding data (`n·d`).
    pub fn used(&self) -> usize {
        self.n * self.d
    }

    /// Number of tiles along this dimension.
    pub fn external(&self) -> usize {
        self.used().div_ceil(self.t)
    }

    pub fn is_fully_replicated(&self) -> bool {
        self.n == 1 && self.d == self.t
    }

    pub fn is_partially_replicated(&self) -> bool {
        self.d > 1 && self.d < self.t
    }
}

impl fmt::Display for DimSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.d > 1 {
            f.write_str("*")?;
            if self.d < self.t {
                write!(f, "{}", self.d)?;
            }
        } else {
            write!(f, "{}", self.n)?;
        }
        if self.unknown {
            f.write_str("?")?;
        }
        if self.t > 1 {
            write!(f, "/{}", self.t)?;
        }
        Ok(())
    }
}

/// Parsed tile tensor shape.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TileTensorShape {
    dims: Vec<DimSpec>,
    relaxed: bool,
}

impl TileTensorShape {
    pub fn new(dims: Vec<DimSpec>) -> Result<Self, ShapeError> {
        if dims.is_empty() {
            return Err(ShapeError::Empty);
        }
        for (i, d) in dims.iter().enumerate() {
            d.validate(i + 1)?;
        }
        Ok(TileTensorShape {
            dims,
            relaxed: false,
        })
    }

    /// Marks the shape as relaxed: its tile extents may multiply to fewer
    /// slots than the backend provides.
    pub fn with_relaxed(mut self, relaxed: bool) -> Self {
        self.relaxed = relaxed;
        self
    }

    pub fn dims(&self) -> &[DimSpec] {
        &self.dims
    }

    pub fn dim(&self, i: usize) -> &DimSpec {
        &self.dims[i]
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn relaxed(&self) -> bool {
        self.relaxed
    }

    /// Original tensor extents `[n_1..n_k]`.
    pub fn tensor_shape(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.n).collect()
    }

    /// Tile extents `[t_1..t_k]`.
    pub fn tile_shape(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.t).collect()
    }

    /// Number of slots addressed by the tile interpretation, `∏ t_i`.
    pub fn tile_slots(&self) -> usize {
        self.dims.iter().map(|d| d.t).product()
    }

    pub fn has_unknowns(&self) -> bool {
        self.dims.iter().any(|d| d.unknown)
    }

    /// Checks the slot-count contract against a backend with `slots` slots.
    pub fn check_slots(&self, slots: usize) -> Result<(), ShapeError> {
        let product = self.tile_slots();
        let ok = if self.relaxed {
            product <= slots
        } else {
            product == slots
        };
        if ok {
            Ok(())
        } else {
            Err(ShapeError::SlotMismatch { product, slots })
        }
    }

    /// Same shape with every `?` flag cleared.
    pub fn without_unknowns(&self) -> Self {
        let mut out = self.clone();
        for d in &mut out.dims {
            d.unknown = false;
        }
        out
    }

    pub(crate) fn with_dim(&self, i: usize, spec: DimSpec) -> Self {
        let mut out = self.clone();
        out.dims[i] = spec;
        out
    }

    /// Index of the first dimension with a tile extent above one.
    pub fn lowest_nontrivial_dim(&self) -> Option<usize> {
        self.dims.iter().position(|d| d.t > 1)
    }
}

impl fmt::Display for TileTensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

impl FromStr for TileTensorShape {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Parser { src: s, pos: 0 }.shape()
    }
}

/// Parses the textual shape notation, applying the omission defaults.
pub fn parse_shape(text: &str) -> Result<TileTensorShape, ShapeError> {
    text.parse()
}

/// Canonical text form. `parse_shape(&format_shape(x)) == x`.
pub fn format_shape(shape: &TileTensorShape) -> String {
    shape.to_string()
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ShapeError> {
        Err(ShapeError::Syntax {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ShapeError> {
        if self.eat(c) {
            Ok(())
        } else {
            match self.peek() {
                Some(found) => self.err(format!("expected `{c}`, found `{found}`")),
                None => self.err(format!("expected `{c}`, found end of input")),
            }
        }
    }

    fn integer(&mut self) -> Result<Option<usize>, ShapeError> {
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Ok(None);
        }
        match self.src[start..self.pos].parse::<usize>() {
            Ok(v) => Ok(Some(v)),
            Err(_) => {
                self.pos = start;
                self.err("integer too large")
            }
        }
    }

    fn shape(&mut self) -> Result<TileTensorShape, ShapeError> {
        self.expect('[')?;
        let mut dims = Vec::new();
        loop {
            let start = self.pos;
            let spec = self.dim()?;
            spec.validate(dims.len() + 1).map_err(|e| match e {
                // keep the position so the caret points at the offending entry
                ShapeError::Constraint { msg, .. } => ShapeError::Syntax {
                    pos: start + (self.src[start..].len() - self.src[start..].trim_start().len()),
                    msg: format!("dimension {}: {msg}", dims.len() + 1),
                },
                other => other,
            })?;
            dims.push(spec);
            if self.eat(',') {
                continue;
            }
            self.expect(']')?;
            break;
        }
        self.skip_ws();
        if self.pos < self.src.len() {
            return self.err("trailing characters after shape");
        }
        TileTensorShape::new(dims)
    }

    fn dim(&mut self) -> Result<DimSpec, ShapeError> {
        let n = self.integer()?;
        let star = self.eat('*');
        let d = if star { self.integer()? } else { None };
        let unknown = self.eat('?');
        if n.is_none() && !star {
            return match self.peek() {
                Some(c) => self.err(format!("expected extent, found `{c}`")),
                None => self.err("expected extent, found end of input"),
            };
        }
        let t = if self.eat('/') {
            match self.integer()? {
                Some(t) => t,
                None => return self.err("expected tile extent after `/`"),
            }
        } else {
            1
        };
        let n = n.unwrap_or(1);
        let d = match (star, d) {
            (false, _) => 1,
            (true, None) => t,
            (true, Some(d)) => d,
        };
        Ok(DimSpec { n, d, t, unknown })
    }
}

/// Tiles per dimension: `e_i = ⌈n_i·d_i / t_i⌉`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExternalShape(pub Vec<usize>);

impl ExternalShape {
    pub fn extents(&self) -> &[usize] {
        &self.0
    }

    /// Total number of tiles.
    pub fn tile_count(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for ExternalShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{e}")?;
        }
        f.write_str("]")
    }
}

pub fn external_shape(shape: &TileTensorShape) -> ExternalShape {
    ExternalShape(shape.dims.iter().map(DimSpec::external).collect())
}

/// Binary elementwise operators on tensors and tile tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementwiseOp {
    Add,
    Mul,
}

impl ElementwiseOp {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Mul => a * b,
        }
    }
}

impl FromStr for ElementwiseOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "add" | "+" => Ok(ElementwiseOp::Add),
            "mul" | "*" => Ok(ElementwiseOp::Mul),
            other => Err(format!("unknown elementwise operator `{other}`")),
        }
    }
}

/// Result shape of `a op b`, or the first rule the pair violates.
///
/// Per dimension the tile extents must agree and the packed extents must be
/// equal or one side must be fully replicated (`*/t`). Unknown flags follow
/// the usual propagation; for `mul`, a dimension's flag is dropped when one
/// operand is free of `?`, is not broadcast across tiles on that dimension and
/// holds zeros in every slot past the result's used range, since those zeros
/// absorb whatever the other operand carries.
pub fn elementwise_result_shape(
    a: &TileTensorShape,
    b: &TileTensorShape,
    op: ElementwiseOp,
) -> Result<TileTensorShape, ShapeError> {
    if a.rank() != b.rank() {
        return Err(ShapeError::RankMismatch {
            left: a.rank(),
            right: b.rank(),
        });
    }
    let mut dims = Vec::with_capacity(a.rank());
    for (i, (x, y)) in a.dims.iter().zip(&b.dims).enumerate() {
        let dim = i + 1;
        if x.t != y.t {
            return Err(ShapeError::TileMismatch {
                dim,
                left: x.t,
                right: y.t,
            });
        }
        let incompatible = |reason: &str| ShapeError::Incompatible {
            dim,
            left: x.to_string(),
            right: y.to_string(),
            reason: reason.to_string(),
        };
        if x.is_partially_replicated() || y.is_partially_replicated() {
            return Err(incompatible(
                "partial replication cannot take part in elementwise operators",
            ));
        }
        if !(x.n == y.n || x.is_fully_replicated() || y.is_fully_replicated()) {
            return Err(incompatible(
                "extents differ and neither side is fully replicated",
            ));
        }
        let n = x.n.max(y.n);
        let d = x.d.min(y.d);
        let e = (n * d).div_ceil(x.t);
        let padded = e * x.t > n * d;
        let mut unknown = (padded && x.used() != y.used()) || x.unknown || y.unknown;
        if unknown && op == ElementwiseOp::Mul {
            let absorbs = |s: &TileTensorShape, spec: &DimSpec| {
                !s.has_unknowns() && spec.external() == e && spec.used() <= n * d
            };
            if absorbs(a, x) || absorbs(b, y) {
                unknown = false;
            }
        }
        dims.push(DimSpec {
            n,
            d,
            t: x.t,
            unknown,
        });
    }
    Ok(TileTensorShape {
        dims,
        relaxed: a.relaxed || b.relaxed,
    })
}

/// Result shape of summing over dimension `dim` (1-based).
///
/// * `t = 1` gives `1`;
/// * the lowest dimension with `t > 1` gives `*/t` (unless the shape is
///   relaxed, where rotation does not wrap within the tile interpretation);
/// * any other dimension, or one already flagged `?`, gives `1?/t`.
///
/// A replicated dimension (`d > 1`) has extent one, so summing it leaves the
/// shape untouched.
pub fn sum_result_shape(
    shape: &TileTensorShape,
    dim: usize,
) -> Result<TileTensorShape, ShapeError> {
    if dim == 0 || dim > shape.rank() {
        return Err(ShapeError::DimOutOfRange {
            dim,
            rank: shape.rank(),
        });
    }
    let i = dim - 1;
    let spec = shape.dims[i];
    let out = if spec.d > 1 && !spec.unknown {
        spec
    } else if spec.t == 1 {
        DimSpec::plain(1, 1)
    } else if spec.unknown {
        DimSpec::unknown_one(spec.t)
    } else if shape.lowest_nontrivial_dim() == Some(i) && !shape.relaxed {
        DimSpec::replicated(spec.t)
    } else {
        DimSpec::unknown_one(spec.t)
    };
    Ok(shape.with_dim(i, out))
}
