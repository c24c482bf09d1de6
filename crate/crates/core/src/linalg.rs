//! Matrix-vector and matrix-matrix products over tile tensors.
//!
//! Every product is an elementwise multiply followed by a sum over the shared
//! dimension. Which dimension is shared, and so where the result lands, is
//! decided by how the operands were packed:
//!
//! | function    | left operand          | right operand         | result                |
//! |-------------|-----------------------|-----------------------|-----------------------|
//! | `matvec_a`  | `[a/t1,b/t2]`         | `[*/t1,b/t2]`         | `[a/t1,1?/t2]`        |
//! | `matvec_b`  | `[b/t1,a/t2]` (Mᵀ)    | `[b/t1,*/t2]`         | `[*/t1,a/t2]`         |
//! | `matmul_a`  | `[a/t1,b/t2,*/t3]`    | `[*/t1,b/t2,c/t3]`    | `[a/t1,1?/t2,c/t3]`   |
//! | `matmul_b`  | `[b/t1,a/t2,*/t3]` (M₁ᵀ) | `[b/t1,*/t2,c/t3]` | `[*/t1,a/t2,c/t3]`    |
//!
//! When the summed dimension happens to be the lowest one with a tile extent
//! above one, the `1?` result comes out replicated (`*`) instead.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::backend::{CostReport, Session};
use crate::dense::DenseTensor;
use crate::error::{Error, Result};
use crate::shape::{DimSpec, ElementwiseOp, ShapeError, TileTensorShape};
use crate::tile_tensor::{
    clean_unknowns, replicate_dim, tt_elementwise, tt_sum, SumVariant, TileTensor,
};

#[derive(Debug, Clone, Copy)]
enum Expect {
    Replicated,
    Extent(usize),
}

fn check_operand(what: &str, shape: &TileTensorShape, expect: &[Expect]) -> Result<()> {
    if shape.rank() != expect.len() {
        return Err(Error::invalid(format!(
            "{what} must have rank {}, got {shape}",
            expect.len()
        )));
    }
    for (i, (d, e)) in shape.dims().iter().zip(expect).enumerate() {
        let fail = |msg: String| -> Result<()> {
            Err(ShapeError::Precondition { dim: i + 1, msg }.into())
        };
        if d.unknown {
            return fail(format!("{what} {shape} carries unknown slots"));
        }
        match *e {
            Expect::Replicated if !d.is_fully_replicated() => {
                return fail(format!("{what} {shape} must be fully replicated here"))
            }
            Expect::Extent(n) if d.d != 1 || d.n != n => {
                return fail(format!(
                    "{what} {shape} must have extent {n} without replication"
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

fn mul_then_sum(
    x: &TileTensor,
    y: &TileTensor,
    dim: usize,
    variant: SumVariant,
) -> Result<TileTensor> {
    let prod = tt_elementwise(x, y, ElementwiseOp::Mul)?;
    tt_sum(&prod, dim, variant)
}

/// `M·V` from `M` packed `[a/t1,b/t2]` and `V` packed `[*/t1,b/t2]`.
pub fn matvec_a(m: &TileTensor, v: &TileTensor, variant: SumVariant) -> Result<TileTensor> {
    let d = m.shape().dims();
    if d.len() != 2 {
        return Err(Error::invalid(format!(
            "matrix must have rank 2, got {}",
            m.shape()
        )));
    }
    let (a, b) = (d[0].n, d[1].n);
    check_operand("matrix", m.shape(), &[Expect::Extent(a), Expect::Extent(b)])?;
    check_operand(
        "vector",
        v.shape(),
        &[Expect::Replicated, Expect::Extent(b)],
    )?;
    mul_then_sum(m, v, 2, variant)
}

/// `M·V` from `Mᵀ` packed `[b/t1,a/t2]` and `V` packed `[b/t1,*/t2]`. The
/// result is replicated along dimension 1, ready to serve as the vector of
/// [`matvec_a`].
pub fn matvec_b(mt: &TileTensor, v: &TileTensor, variant: SumVariant) -> Result<TileTensor> {
    let d = mt.shape().dims();
    if d.len() != 2 {
        return Err(Error::invalid(format!(
            "matrix must have rank 2, got {}",
            mt.shape()
        )));
    }
    let (b, a) = (d[0].n, d[1].n);
    check_operand(
        "transposed matrix",
        mt.shape(),
        &[Expect::Extent(b), Expect::Extent(a)],
    )?;
    check_operand(
        "vector",
        v.shape(),
        &[Expect::Extent(b), Expect::Replicated],
    )?;
    mul_then_sum(mt, v, 1, variant)
}

/// `M₁·M₂` from `[a/t1,b/t2,*/t3]` and `[*/t1,b/t2,c/t3]`.
pub fn matmul_a(m1: &TileTensor, m2: &TileTensor, variant: SumVariant) -> Result<TileTensor> {
    let d1 = m1.shape().dims();
    let d2 = m2.shape().dims();
    if d1.len() != 3 || d2.len() != 3 {
        return Err(Error::invalid("matmul operands must have rank 3"));
    }
    let (a, b, c) = (d1[0].n, d1[1].n, d2[2].n);
    check_operand(
        "left matrix",
        m1.shape(),
        &[Expect::Extent(a), Expect::Extent(b), Expect::Replicated],
    )?;
    check_operand(
        "right matrix",
        m2.shape(),
        &[Expect::Replicated, Expect::Extent(b), Expect::Extent(c)],
    )?;
    mul_then_sum(m1, m2, 2, variant)
}

/// `M₁·M₂` from `M₁ᵀ` packed `[b/t1,a/t2,*/t3]` and `M₂` packed
/// `[b/t1,*/t2,c/t3]`. The result is replicated along dimension 1.
pub fn matmul_b(m1t: &TileTensor, m2: &TileTensor, variant: SumVariant) -> Result<TileTensor> {
    let d1 = m1t.shape().dims();
    let d2 = m2.shape().dims();
    if d1.len() != 3 || d2.len() != 3 {
        return Err(Error::invalid("matmul operands must have rank 3"));
    }
    let (b, a, c) = (d1[0].n, d1[1].n, d2[2].n);
    check_operand(
        "transposed left matrix",
        m1t.shape(),
        &[Expect::Extent(b), Expect::Extent(a), Expect::Replicated],
    )?;
    check_operand(
        "right matrix",
        m2.shape(),
        &[Expect::Extent(b), Expect::Replicated, Expect::Extent(c)],
    )?;
    mul_then_sum(m1t, m2, 1, variant)
}

/// How a matrix product is laid out in tiles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PackingMethod {
    /// Matrix `[a/1,b/s]`, vector `[1,b/s]`.
    RowOrder,
    /// Matrix `[a/s,b/1]`, vector `[*/s,b]`.
    ColumnOrder,
    /// `Mᵀ` as `[b/t1,a/t2]` with `t1` the smallest divisor of `s` that is at
    /// least `b`, vector `[b/t1,*/t2]`.
    InputPacking,
    /// Weights `[a,b,*/s]`, data `X[b,n]` as `[1,b,n/s]`: one sample per slot.
    BatchPacking,
    /// Explicit tile extents: two for matrix-vector, three for matrix-matrix.
    General(Vec<usize>),
}

impl fmt::Display for PackingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PackingMethod::RowOrder => f.write_str("row_order"),
            PackingMethod::ColumnOrder => f.write_str("column_order"),
            PackingMethod::InputPacking => f.write_str("input_packing"),
            PackingMethod::BatchPacking => f.write_str("batch_packing"),
            PackingMethod::General(t) => {
                let t: Vec<String> = t.iter().map(ToString::to_string).collect();
                write!(f, "general({})", t.join(","))
            }
        }
    }
}

impl FromStr for PackingMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "row_order" | "row-order" => Ok(PackingMethod::RowOrder),
            "column_order" | "column-order" => Ok(PackingMethod::ColumnOrder),
            "input_packing" | "input-packing" => Ok(PackingMethod::InputPacking),
            "batch_packing" | "batch-packing" => Ok(PackingMethod::BatchPacking),
            other => parse_extents(other).map(PackingMethod::General),
        }
    }
}

/// Parses `4,256` or `4x256` into tile extents.
pub fn parse_extents(s: &str) -> Result<Vec<usize>, String> {
    let inner = s
        .strip_prefix("general(")
        .and_then(|x| x.strip_suffix(')'))
        .unwrap_or(s);
    let out = inner
        .split([',', 'x'])
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad tile extent `{t}` in `{s}`"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() || out.contains(&0) {
        return Err(format!("tile extents must be positive: `{s}`"));
    }
    Ok(out)
}

/// Operand role within a product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// `M[a,b]` for [`matvec_a`].
    Matrix,
    /// `V[b]` for [`matvec_a`].
    Vector,
    /// `M[a,b]`, packed as `Mᵀ` for [`matvec_b`].
    TransposedMatrix,
    /// `V[b]` for [`matvec_b`].
    ColumnVector,
    /// `M₁[a,b]` for [`matmul_a`].
    Lhs,
    /// `M₂[b,c]` for [`matmul_a`].
    Rhs,
    /// `M₁[a,b]`, packed as `M₁ᵀ` for [`matmul_b`].
    TransposedLhs,
    /// `M₂[b,c]` for [`matmul_b`].
    ColumnRhs,
}

fn plain(n: usize, t: usize) -> DimSpec {
    DimSpec::plain(n, t)
}

fn rep(t: usize) -> DimSpec {
    DimSpec::replicated(t)
}

fn as_vector(v: &DenseTensor) -> Result<usize> {
    let sq = v.squeezed_shape();
    if sq.len() != 1 {
        return Err(Error::invalid(format!(
            "expected a vector, got shape {:?}",
            v.shape()
        )));
    }
    Ok(sq[0])
}

fn as_matrix(m: &DenseTensor) -> Result<(usize, usize)> {
    if m.rank() != 2 {
        return Err(Error::invalid(format!(
            "expected a matrix, got shape {:?}",
            m.shape()
        )));
    }
    Ok((m.shape()[0], m.shape()[1]))
}

/// Smallest divisor of `s` that is at least `b`.
pub fn smallest_divisor_at_least(s: usize, b: usize) -> Option<usize> {
    (b.max(1)..=s).find(|t| s.is_multiple_of(*t))
}

fn general2(method: &PackingMethod, s: usize, b: usize) -> Result<(usize, usize)> {
    match method {
        PackingMethod::RowOrder => Ok((1, s)),
        PackingMethod::ColumnOrder => Ok((s, 1)),
        PackingMethod::InputPacking => {
            if b > s {
                return Err(Error::invalid(format!(
                    "input packing needs the vector length {b} to fit in {s} slots"
                )));
            }
            let t1 = smallest_divisor_at_least(s, b).expect("s itself divides s");
            Ok((t1, s / t1))
        }
        PackingMethod::General(t) if t.len() == 2 => Ok((t[0], t[1])),
        other => Err(Error::invalid(format!(
            "{other} does not describe a matrix-vector packing"
        ))),
    }
}

/// Packs one operand of a product according to `method`.
pub fn pack_for_method(
    m: &DenseTensor,
    role: Role,
    method: &PackingMethod,
    session: &Arc<Session>,
) -> Result<TileTensor> {
    let s = session.slot_count();
    let (data, dims): (DenseTensor, Vec<DimSpec>) = match (method, role) {
        (PackingMethod::BatchPacking, Role::Matrix) => {
            let (a, b) = as_matrix(m)?;
            (
                m.reshape(&[a, b, 1])?,
                vec![plain(a, 1), plain(b, 1), rep(s)],
            )
        }
        (PackingMethod::BatchPacking, Role::Vector) => {
            let (b, n) = as_matrix(m)?;
            if n > s {
                return Err(Error::invalid(format!("batch of {n} exceeds {s} slots")));
            }
            (
                m.reshape(&[1, b, n])?,
                vec![plain(1, 1), plain(b, 1), plain(n, s)],
            )
        }
        (PackingMethod::General(t), role) if t.len() == 3 => {
            let (t1, t2, t3) = (t[0], t[1], t[2]);
            let (x, y) = as_matrix(m)?;
            match role {
                Role::Lhs => (
                    m.reshape(&[x, y, 1])?,
                    vec![plain(x, t1), plain(y, t2), rep(t3)],
                ),
                Role::Rhs => (
                    m.reshape(&[1, x, y])?,
                    vec![rep(t1), plain(x, t2), plain(y, t3)],
                ),
                Role::TransposedLhs => (
                    m.transpose()?.reshape(&[y, x, 1])?,
                    vec![plain(y, t1), plain(x, t2), rep(t3)],
                ),
                Role::ColumnRhs => (
                    m.reshape(&[x, 1, y])?,
                    vec![plain(x, t1), rep(t2), plain(y, t3)],
                ),
                other => {
                    return Err(Error::invalid(format!(
                        "{other:?} is a matrix-vector role; {method} has three tile extents"
                    )))
                }
            }
        }
        (method, role) => {
            let b = match role {
                Role::Vector | Role::ColumnVector => as_vector(m)?,
                Role::Matrix | Role::TransposedMatrix => as_matrix(m)?.1,
                other => {
                    return Err(Error::invalid(format!(
                        "{other:?} is a matrix-matrix role; {method} has two tile extents"
                    )))
                }
            };
            let (t1, t2) = general2(method, s, b)?;
            let transposed = *method == PackingMethod::InputPacking;
            match (role, transposed) {
                (Role::Matrix, false) => {
                    let (a, b) = as_matrix(m)?;
                    (m.clone(), vec![plain(a, t1), plain(b, t2)])
                }
                (Role::Vector, false) => (m.reshape(&[1, b])?, vec![rep(t1), plain(b, t2)]),
                (Role::Matrix | Role::TransposedMatrix, true) | (Role::TransposedMatrix, false) => {
                    let (a, b) = as_matrix(m)?;
                    (m.transpose()?, vec![plain(b, t1), plain(a, t2)])
                }
                (Role::Vector | Role::ColumnVector, true) | (Role::ColumnVector, false) => {
                    (m.reshape(&[b, 1])?, vec![plain(b, t1), rep(t2)])
                }
                _ => unreachable!("roles filtered above"),
            }
        }
    };
    let shape = TileTensorShape::new(dims)?;
    TileTensor::pack(&data, &shape, session)
}

/// `M·V` (or `W·X` for a batch) under the given packing method. Returns the
/// packed result; [`product_values`] extracts the plain vector.
pub fn matvec(
    m: &DenseTensor,
    v: &DenseTensor,
    method: &PackingMethod,
    session: &Arc<Session>,
    variant: SumVariant,
) -> Result<TileTensor> {
    match method {
        PackingMethod::BatchPacking => {
            let w = pack_for_method(m, Role::Matrix, method, session)?;
            let x = pack_for_method(v, Role::Vector, method, session)?;
            mul_then_sum(&w, &x, 2, variant)
        }
        PackingMethod::InputPacking => {
            let mt = pack_for_method(m, Role::TransposedMatrix, method, session)?;
            let x = pack_for_method(v, Role::ColumnVector, method, session)?;
            matvec_b(&mt, &x, variant)
        }
        _ => {
            let mm = pack_for_method(m, Role::Matrix, method, session)?;
            let x = pack_for_method(v, Role::Vector, method, session)?;
            matvec_a(&mm, &x, variant)
        }
    }
}

/// Unpacks a product result and drops its extent-1 dimensions.
pub fn product_values(t: &TileTensor) -> DenseTensor {
    let d = t.unpack();
    let sq = d.squeezed_shape();
    d.reshape(&sq).expect("same number of values")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineOptions {
    pub variant: SumVariant,
    /// Bootstrap the running vector whenever its depth would run out.
    pub auto_bootstrap: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub result: TileTensor,
    /// Operations spent by this pipeline alone.
    pub cost: CostReport,
}

impl PipelineOutput {
    pub fn vector(&self) -> DenseTensor {
        let d = self.result.unpack();
        let n = d.len();
        d.reshape(&[n]).expect("same number of values")
    }
}

fn ensure_depth(t: TileTensor, options: &PipelineOptions) -> TileTensor {
    if options.auto_bootstrap && t.min_chain_index() == 0 {
        t.bootstrap()
    } else {
        t
    }
}

/// Computes `M_k(...(M_2(M_1 V)))` alternating the two matrix-vector forms.
/// Odd-position matrices (1st, 3rd, ...) are packed transposed and consume a
/// `[b/t1,*/t2]` vector; even-position ones consume the replicated output of
/// the previous stage directly. After each even-position stage the unknown
/// slots are masked away and the result is replicated back into
/// `[x/t1,*/t2]`.
pub fn pipeline(
    matrices: &[DenseTensor],
    v: &DenseTensor,
    tile: [usize; 2],
    session: &Arc<Session>,
    options: PipelineOptions,
) -> Result<PipelineOutput> {
    if matrices.is_empty() {
        return Err(Error::invalid("pipeline needs at least one matrix"));
    }
    let mut len = as_vector(v)?;
    for (k, m) in matrices.iter().enumerate() {
        let (rows, cols) = as_matrix(m).map_err(|e| e.at_stage(format!("stage {}", k + 1)))?;
        if cols != len {
            return Err(Error::invalid(format!(
                "matrix {} has {cols} columns but its input has length {len}",
                k + 1
            ))
            .at_stage(format!("stage {}", k + 1)));
        }
        len = rows;
    }
    let before = session.cost_report();
    let method = PackingMethod::General(tile.to_vec());
    let variant = options.variant;
    let mut current = pack_for_method(v, Role::ColumnVector, &method, session)
        .map_err(|e| e.at_stage("pack input"))?;
    for (k, m) in matrices.iter().enumerate() {
        let stage = k + 1;
        if k % 2 == 0 {
            if k > 0 {
                current = ensure_depth(current, &options);
                current = clean_unknowns(&current)
                    .map_err(|e| e.at_stage(format!("stage {stage} (clean)")))?;
                current = replicate_dim(&current, 2, variant)
                    .map_err(|e| e.at_stage(format!("stage {stage} (replicate)")))?;
            }
            let label = format!("stage {stage} (transposed form)");
            let mt = pack_for_method(m, Role::TransposedMatrix, &method, session)
                .map_err(|e| e.at_stage(label.clone()))?;
            current = ensure_depth(current, &options);
            current = matvec_b(&mt, &current, variant).map_err(|e| e.at_stage(label))?;
        } else {
            let label = format!("stage {stage} (row form)");
            let mm = pack_for_method(m, Role::Matrix, &method, session)
                .map_err(|e| e.at_stage(label.clone()))?;
            current = ensure_depth(current, &options);
            current = matvec_a(&mm, &current, variant).map_err(|e| e.at_stage(label))?;
        }
    }
    Ok(PipelineOutput {
        result: current,
        cost: session.cost_report() - before,
    })
}

/// Every ordered `k`-tuple of positive integers whose product is `s`.
pub fn factorizations(s: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return if s == 1 { vec![vec![]] } else { vec![] };
    }
    if k == 1 {
        return vec![vec![s]];
    }
    let mut out = Vec::new();
    for d in (1..=s).filter(|d| s.is_multiple_of(*d)) {
        for mut rest in factorizations(s / d, k - 1) {
            rest.insert(0, d);
            out.push(rest);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TileCandidate {
    pub tile: [usize; 2],
    pub cost: CostReport,
}

impl TileCandidate {
    /// Multiplications, rotations and mask multiplications combined.
    pub fn score(&self) -> u64 {
        self.cost.multiplications + self.cost.rotations + self.cost.mask_multiplications
    }
}

/// Runs [`pipeline`] under every two-way factorization of `slots` and ranks
/// the tile extents by [`TileCandidate::score`], breaking ties on additions.
/// Factorizations the pipeline rejects are left out.
pub fn search_tile_extents(
    matrices: &[DenseTensor],
    v: &DenseTensor,
    slots: usize,
    depth: u32,
    options: PipelineOptions,
) -> Result<Vec<TileCandidate>> {
    let mut out = Vec::new();
    for f in factorizations(slots, 2) {
        let session = Session::with_slots(slots, depth)?;
        let tile = [f[0], f[1]];
        if let Ok(run) = pipeline(matrices, v, tile, &session, options) {
            out.push(TileCandidate {
                tile,
                cost: run.cost,
            });
        }
    }
    out.sort_by_key(|c| (c.score(), c.cost.additions, c.tile));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{dense_matmul, relative_error};
    use crate::external_shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(v: &DenseTensor) -> DenseTensor {
        v.reshape(&[v.len(), 1]).unwrap()
    }

    fn oracle(m: &DenseTensor, v: &DenseTensor) -> DenseTensor {
        let r = dense_matmul(m, &col(v)).unwrap();
        r.reshape(&[r.len()]).unwrap()
    }

    #[test]
    fn identity_matvec_both_forms() {
        let ses = Session::with_slots(4, 4).unwrap();
        let i2 = DenseTensor::identity(2).unwrap();
        let v = DenseTensor::new(vec![2], vec![3.0, 5.0]).unwrap();
        let g = PackingMethod::General(vec![2, 2]);
        let m = pack_for_method(&i2, Role::Matrix, &g, &ses).unwrap();
        let x = pack_for_method(&v, Role::Vector, &g, &ses).unwrap();
        let r = matvec_a(&m, &x, SumVariant::RightToLeft).unwrap();
        assert_eq!(r.shape().to_string(), "[2/2,1?/2]");
        assert_eq!(product_values(&r).values(), &[3.0, 5.0]);
        let mt = pack_for_method(&i2, Role::TransposedMatrix, &g, &ses).unwrap();
        let xc = pack_for_method(&v, Role::ColumnVector, &g, &ses).unwrap();
        let rb = matvec_b(&mt, &xc, SumVariant::RightToLeft).unwrap();
        assert_eq!(rb.shape().to_string(), "[*/2,2/2]");
        let s = rb.tiles()[0].slots();
        assert_eq!(s, &[3.0, 5.0, 3.0, 5.0]);
        assert!(matvec_a(&x, &m, SumVariant::RightToLeft).is_err());
    }

    #[test]
    fn random_matvecs_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ses = Session::with_slots(8, 4).unwrap();
        let g = PackingMethod::General(vec![2, 4]);
        let m = DenseTensor::random(&[5, 6], &mut rng).unwrap();
        let v = DenseTensor::random(&[6], &mut rng).unwrap();
        let r = matvec(&m, &v, &g, &ses, SumVariant::RightToLeft).unwrap();
        assert!(relative_error(&product_values(&r), &oracle(&m, &v)) <= 1e-9);
        let m2 = DenseTensor::random(&[6, 5], &mut rng).unwrap();
        let v2 = DenseTensor::random(&[5], &mut rng).unwrap();
        let mt = pack_for_method(&m2, Role::TransposedMatrix, &g, &ses).unwrap();
        let x = pack_for_method(&v2, Role::ColumnVector, &g, &ses).unwrap();
        let r2 = matvec_b(&mt, &x, SumVariant::RightToLeft).unwrap();
        assert!(relative_error(&product_values(&r2), &oracle(&m2, &v2)) <= 1e-9);
    }

    #[test]
    fn special_case_methods() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ses = Session::with_slots(16, 4).unwrap();
        let m = DenseTensor::random(&[5, 3], &mut rng).unwrap();
        let v = DenseTensor::random(&[3], &mut rng).unwrap();
        for method in [
            PackingMethod::RowOrder,
            PackingMethod::ColumnOrder,
            PackingMethod::InputPacking,
        ] {
            let r = matvec(&m, &v, &method, &ses, SumVariant::RightToLeft).unwrap();
            assert!(
                relative_error(&product_values(&r), &oracle(&m, &v)) <= 1e-9,
                "{method}"
            );
        }
        let mt = pack_for_method(&m, Role::Matrix, &PackingMethod::InputPacking, &ses).unwrap();
        assert_eq!(mt.shape().to_string(), "[3/4,5/4]");
        assert_eq!(
            pack_for_method(&m, Role::Matrix, &PackingMethod::RowOrder, &ses)
                .unwrap()
                .shape()
                .to_string(),
            "[5,3/16]"
        );
        assert_eq!(
            pack_for_method(&m, Role::Matrix, &PackingMethod::ColumnOrder, &ses)
                .unwrap()
                .shape()
                .to_string(),
            "[5/16,3]"
        );
        let x = DenseTensor::random(&[3, 7], &mut rng).unwrap();
        let r = matvec(
            &m,
            &x,
            &PackingMethod::BatchPacking,
            &ses,
            SumVariant::RightToLeft,
        )
        .unwrap();
        assert_eq!(r.shape().to_string(), "[5,1,7/16]");
        assert!(relative_error(&product_values(&r), &dense_matmul(&m, &x).unwrap()) <= 1e-9);
        let w = pack_for_method(&m, Role::Matrix, &PackingMethod::BatchPacking, &ses).unwrap();
        assert_eq!(w.shape().to_string(), "[5,3,*/16]");
        let big = DenseTensor::random(&[2, 17], &mut rng).unwrap();
        assert!(pack_for_method(&big, Role::Matrix, &PackingMethod::InputPacking, &ses).is_err());
    }

    #[test]
    fn divisor_rule() {
        assert_eq!(smallest_divisor_at_least(16, 3), Some(4));
        assert_eq!(smallest_divisor_at_least(16, 16), Some(16));
        assert_eq!(smallest_divisor_at_least(12, 5), Some(6));
        assert_eq!(smallest_divisor_at_least(16, 17), None);
    }

    #[test]
    fn matmuls_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ses = Session::with_slots(8, 4).unwrap();
        let g = PackingMethod::General(vec![2, 2, 2]);
        let m1 = DenseTensor::random(&[3, 4], &mut rng).unwrap();
        let m2 = DenseTensor::random(&[4, 5], &mut rng).unwrap();
        let want = dense_matmul(&m1, &m2).unwrap();
        let l = pack_for_method(&m1, Role::Lhs, &g, &ses).unwrap();
        let r = pack_for_method(&m2, Role::Rhs, &g, &ses).unwrap();
        let a = matmul_a(&l, &r, SumVariant::RightToLeft).unwrap();
        assert_eq!(a.shape().to_string(), "[3/2,1?/2,5/2]");
        assert!(relative_error(&product_values(&a), &want) <= 1e-9);
        let lt = pack_for_method(&m1, Role::TransposedLhs, &g, &ses).unwrap();
        let rc = pack_for_method(&m2, Role::ColumnRhs, &g, &ses).unwrap();
        let b = matmul_b(&lt, &rc, SumVariant::RightToLeft).unwrap();
        assert_eq!(b.shape().to_string(), "[*/2,3/2,5/2]");
        assert!(relative_error(&product_values(&b), &want) <= 1e-9);
        let i2 = DenseTensor::identity(2).unwrap();
        let x = DenseTensor::random(&[2, 2], &mut rng).unwrap();
        let id = matmul_a(
            &pack_for_method(&i2, Role::Lhs, &g, &ses).unwrap(),
            &pack_for_method(&x, Role::Rhs, &g, &ses).unwrap(),
            SumVariant::RightToLeft,
        )
        .unwrap();
        assert!(relative_error(&product_values(&id), &x) <= 1e-12);
    }

    #[test]
    fn pipeline_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ses = Session::with_slots(32, 8).unwrap();
        let v = DenseTensor::random(&[7], &mut rng).unwrap();
        let ms = vec![
            DenseTensor::random(&[5, 7], &mut rng).unwrap(),
            DenseTensor::random(&[9, 5], &mut rng).unwrap(),
            DenseTensor::random(&[7, 9], &mut rng).unwrap(),
        ];
        let out = pipeline(&ms, &v, [4, 8], &ses, PipelineOptions::default()).unwrap();
        let want = ms.iter().fold(v.clone(), |acc, m| oracle(m, &acc));
        assert!(relative_error(&out.vector(), &want) <= 1e-9);
        assert!(out.cost.mask_multiplications > 0);

        let two = pipeline(&ms[..2], &v, [4, 8], &ses, PipelineOptions::default()).unwrap();
        assert_eq!(two.cost.mask_multiplications, 0);

        let id = DenseTensor::identity(7).unwrap();
        let same = pipeline(
            &[id.clone(), id],
            &v,
            [4, 8],
            &ses,
            PipelineOptions::default(),
        )
        .unwrap();
        assert!(relative_error(&same.vector(), &v) <= 1e-12);
    }

    #[test]
    fn pipeline_depth_and_bootstrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = DenseTensor::random(&[4], &mut rng).unwrap();
        let ms: Vec<_> = (0..3)
            .map(|_| DenseTensor::random(&[4, 4], &mut rng).unwrap())
            .collect();
        let ses = Session::with_slots(16, 2).unwrap();
        let err = pipeline(&ms, &v, [4, 4], &ses, PipelineOptions::default()).unwrap_err();
        assert!(err.is_depth_exhausted());
        assert!(err.to_string().starts_with("stage 3"), "{err}");
        let opts = PipelineOptions {
            auto_bootstrap: true,
            ..Default::default()
        };
        let out = pipeline(&ms, &v, [4, 4], &ses, opts).unwrap();
        assert!(out.cost.bootstraps > 0);
        let want = ms.iter().fold(v.clone(), |acc, m| oracle(m, &acc));
        assert!(relative_error(&out.vector(), &want) <= 1e-9);
        let bad = vec![DenseTensor::random(&[4, 3], &mut rng).unwrap()];
        assert!(pipeline(&bad, &v, [4, 4], &ses, PipelineOptions::default()).is_err());
    }

    #[test]
    fn factorization_listing() {
        assert_eq!(
            factorizations(8, 2),
            vec![vec![1, 8], vec![2, 4], vec![4, 2], vec![8, 1]]
        );
        assert_eq!(factorizations(8, 3).len(), 10);
        assert!(factorizations(12, 3)
            .iter()
            .all(|f| f.iter().product::<usize>() == 12));
    }

    #[test]
    fn tile_search_ranks_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = DenseTensor::random(&[6], &mut rng).unwrap();
        let ms = vec![
            DenseTensor::random(&[6, 6], &mut rng).unwrap(),
            DenseTensor::random(&[6, 6], &mut rng).unwrap(),
        ];
        let c = search_tile_extents(&ms, &v, 16, 8, PipelineOptions::default()).unwrap();
        assert_eq!(c.len(), 5);
        assert!(c.windows(2).all(|w| w[0].score() <= w[1].score()));
    }

    #[test]
    fn tile_count_witness() {
        let general = TileTensorShape::new(vec![plain(768, 4), plain(768, 256)]).unwrap();
        let row = TileTensorShape::new(vec![plain(768, 1), plain(768, 1024)]).unwrap();
        assert_eq!(external_shape(&general).tile_count(), 576);
        assert_eq!(external_shape(&row).tile_count(), 768);
        assert_eq!(general.to_string(), "[768/4,768/256]");
    }
}
