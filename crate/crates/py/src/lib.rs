//! Python bindings: shape algebra, pack/unpack, products and the
//! CryptoNets cost counts.

use std::collections::HashMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use tt_core::linalg::{matmul_a, pack_for_method, PackingMethod, Role};
use tt_core::nn::{
    bootstrap_lower_bound as bound, cryptonets_infer, FilterGroup, InferenceOptions, NetworkSpec,
};
use tt_core::{
    elementwise_result_shape, external_shape, parse_shape, sum_result_shape, CostReport,
    DenseTensor, ElementwiseOp, Session, SumVariant, TileTensor,
};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Counts = HashMap<&'static str, u64>;

fn cost_dict(c: &CostReport) -> Counts {
    HashMap::from([
        ("additions", c.additions),
        ("multiplications", c.multiplications),
        ("mask_multiplications", c.mask_multiplications),
        ("rotations", c.rotations),
        ("bootstraps", c.bootstraps),
    ])
}

/// Canonical form of a shape string.
#[pyfunction]
fn canonical_shape(shape: &str) -> PyResult<String> {
    Ok(parse_shape(shape).map_err(err)?.to_string())
}

/// Tiles along each dimension.
#[pyfunction(name = "external_shape")]
fn external(shape: &str) -> PyResult<Vec<usize>> {
    Ok(external_shape(&parse_shape(shape).map_err(err)?).0)
}

/// Result shape of `a op b`, with `op` either "add" or "mul".
#[pyfunction]
fn elementwise_shape(a: &str, b: &str, op: &str) -> PyResult<String> {
    let op: ElementwiseOp = op.parse().map_err(err)?;
    let a = parse_shape(a).map_err(err)?;
    let b = parse_shape(b).map_err(err)?;
    Ok(elementwise_result_shape(&a, &b, op)
        .map_err(err)?
        .to_string())
}

/// Result shape of summing over `dim` (1-based).
#[pyfunction]
fn sum_shape(shape: &str, dim: usize) -> PyResult<String> {
    Ok(sum_result_shape(&parse_shape(shape).map_err(err)?, dim)
        .map_err(err)?
        .to_string())
}

/// Rotations of a rotate-and-sum over `n` elements.
#[pyfunction]
#[pyo3(signature = (n, variant = "rtl"))]
fn rotations(n: usize, variant: &str) -> PyResult<u32> {
    if n == 0 {
        return Err(err("n must be positive"));
    }
    let v: SumVariant = variant.parse().map_err(err)?;
    Ok(v.rotations(n))
}

/// Bootstrap lower bound; `groups` holds `(count, filter_h, filter_w, out_rows)`.
#[pyfunction]
fn bootstrap_lower_bound(groups: Vec<(u64, u64, u64, u64)>, depth: u32) -> PyResult<u64> {
    let groups: Vec<FilterGroup> = groups
        .into_iter()
        .map(|(count, filter_h, filter_w, out_rows)| FilterGroup {
            count,
            filter_h,
            filter_w,
            out_rows,
        })
        .collect();
    bound(&groups, depth).map_err(err)
}

/// Packs row-major `values` of extents `dims` into `shape` and returns
/// `(tiles, unpacked values)`.
#[pyfunction]
fn pack_unpack(
    values: Vec<f64>,
    dims: Vec<usize>,
    shape: &str,
    slots: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let a = DenseTensor::new(dims, values).map_err(err)?;
    let shape = parse_shape(shape).map_err(err)?;
    let ses = Session::with_slots(slots, 1).map_err(err)?;
    let t = TileTensor::pack(&a, &shape, &ses).map_err(err)?;
    let tiles = t.tiles().iter().map(|x| x.slots().to_vec()).collect();
    Ok((tiles, t.unpack().into_values()))
}

/// `a @ b` over three tile extents; returns `(rows, cost)`.
#[pyfunction]
fn matmul(
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    tile: (usize, usize, usize),
) -> PyResult<(Vec<Vec<f64>>, Counts)> {
    let dense = |m: Vec<Vec<f64>>| -> PyResult<DenseTensor> {
        let rows = m.len();
        let cols = m.first().map_or(0, Vec::len);
        if m.iter().any(|r| r.len() != cols) {
            return Err(err("ragged matrix"));
        }
        DenseTensor::new(vec![rows, cols], m.concat()).map_err(err)
    };
    let (a, b) = (dense(a)?, dense(b)?);
    let method = PackingMethod::General(vec![tile.0, tile.1, tile.2]);
    let ses = Session::with_slots(tile.0 * tile.1 * tile.2, 4).map_err(err)?;
    let l = pack_for_method(&a, Role::Lhs, &method, &ses).map_err(err)?;
    let r = pack_for_method(&b, Role::Rhs, &method, &ses).map_err(err)?;
    let out = matmul_a(&l, &r, SumVariant::default())
        .map_err(err)?
        .unpack();
    let (rows, cols) = (a.shape()[0], b.shape()[1]);
    let v = out.values();
    Ok((
        (0..rows)
            .map(|i| v[i * cols..(i + 1) * cols].to_vec())
            .collect(),
        cost_dict(&ses.cost_report()),
    ))
}

/// Runs the CryptoNets network with seeded weights on `batch` random
/// samples and returns the operation counts.
#[pyfunction]
#[pyo3(signature = (tile = (32, 256, 1), batch = 1, seed = 0))]
fn cryptonets_counts(tile: (usize, usize, usize), batch: usize, seed: u64) -> PyResult<Counts> {
    let net = NetworkSpec::cryptonets().with_random_weights(seed);
    let x = net.random_batch(batch, seed.wrapping_add(1)).map_err(err)?;
    let ses = Session::with_slots(tile.0 * tile.1 * tile.2, 8).map_err(err)?;
    let run = cryptonets_infer(
        &net,
        &x,
        [tile.0, tile.1, tile.2],
        &ses,
        InferenceOptions::default(),
    )
    .map_err(err)?;
    Ok(cost_dict(&run.cost))
}

#[pymodule]
fn tiletensor_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(canonical_shape, m)?)?;
    m.add_function(wrap_pyfunction!(external, m)?)?;
    m.add_function(wrap_pyfunction!(elementwise_shape, m)?)?;
    m.add_function(wrap_pyfunction!(sum_shape, m)?)?;
    m.add_function(wrap_pyfunction!(rotations, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(pack_unpack, m)?)?;
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add_function(wrap_pyfunction!(cryptonets_counts, m)?)?;
    Ok(())
}
