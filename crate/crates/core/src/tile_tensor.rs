//! Tile tensors: a dense tensor packed into an external grid of tiles.
//!
//! A tile of `s` slots is read as a small tensor of shape `[t_1..t_k]`
//! (row-major). Tile `l` of the external grid holds the logical indices
//! `j_i = l_i·t_i + c_i`, where `c` is the slot's in-tile coordinate.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::backend::{Session, Tile};
use crate::dense::{for_each_index, DenseTensor};
use crate::error::{Error, Result};
use crate::shape::{
    elementwise_result_shape, external_shape, sum_result_shape, DimSpec, ElementwiseOp,
    ExternalShape, ShapeError, TileTensorShape,
};

/// Rotate-and-sum schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SumVariant {
    /// Left-to-right repeated doubling: `(bits(n)-1) + (popcount(n)-1)` rotations.
    LeftToRight,
    /// Right-to-left repeated doubling: `floor(log2 n) + popcount(n) - 1` rotations.
    #[default]
    RightToLeft,
    /// Plain doubling over a power-of-two count. When summing a tensor
    /// dimension, counts are rounded up to a power of two whenever the slots
    /// past the data are known zeros.
    PowerOfTwo,
}

impl SumVariant {
    /// Rotations used by [`rotate_and_sum`] for `n` elements.
    pub fn rotations(self, n: usize) -> u32 {
        assert!(n >= 1);
        let log = usize::BITS - 1 - n.leading_zeros();
        let pop = n.count_ones();
        match self {
            SumVariant::LeftToRight | SumVariant::RightToLeft => log + pop - 1,
            SumVariant::PowerOfTwo => n.next_power_of_two().trailing_zeros(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SumVariant::LeftToRight => "left-to-right",
            SumVariant::RightToLeft => "right-to-left",
            SumVariant::PowerOfTwo => "power-of-two",
        }
    }

    /// The variant to run for a count of `n`: power-of-two schedules only
    /// apply to power-of-two counts.
    fn for_count(self, n: usize) -> SumVariant {
        match self {
            SumVariant::PowerOfTwo if !n.is_power_of_two() => SumVariant::RightToLeft,
            v => v,
        }
    }
}

impl fmt::Display for SumVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SumVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ltr" | "left-to-right" => Ok(SumVariant::LeftToRight),
            "rtl" | "right-to-left" => Ok(SumVariant::RightToLeft),
            "auto" | "pow2" | "power-of-two" => Ok(SumVariant::PowerOfTwo),
            other => Err(format!(
                "unknown sum variant `{other}` (expected ltr, rtl or auto)"
            )),
        }
    }
}

/// Computes `L^n` along a stride: slot `h` of the result holds
/// `Σ_{k<n} L[h + k·stride]` (indices cyclic). A negative stride sums
/// backwards, which spreads a value forward into the following positions.
pub fn rotate_and_sum(
    session: &Session,
    l: &Tile,
    n: usize,
    stride: i64,
    variant: SumVariant,
) -> Result<Tile> {
    if n == 0 {
        return Err(Error::invalid("rotate-and-sum needs a positive count"));
    }
    let rot = |t: &Tile, k: usize| session.rotate(t, k as i64 * stride);
    match variant {
        SumVariant::PowerOfTwo => {
            if !n.is_power_of_two() {
                return Err(Error::invalid(format!(
                    "power-of-two summation needs a power-of-two count, got {n}"
                )));
            }
            let mut s = l.clone();
            let mut e = 1;
            while e < n {
                s = session.add(&s, &rot(&s, e))?;
                e *= 2;
            }
            Ok(s)
        }
        SumVariant::LeftToRight => {
            let bits = usize::BITS - n.leading_zeros();
            let mut s = l.clone();
            let mut e = 1;
            for j in (0..bits - 1).rev() {
                s = session.add(&s, &rot(&s, e))?;
                e *= 2;
                if n >> j & 1 == 1 {
                    s = session.add(l, &rot(&s, 1))?;
                    e += 1;
                }
            }
            debug_assert_eq!(e, n);
            Ok(s)
        }
        SumVariant::RightToLeft => {
            let mut x = l.clone();
            let mut y: Option<Tile> = None;
            let mut e = 1;
            let mut m = n;
            loop {
                if m & 1 == 1 {
                    y = Some(match y {
                        None => x.clone(),
                        Some(y) => session.add(&x, &rot(&y, e))?,
                    });
                }
                m >>= 1;
                if m == 0 {
                    return Ok(y.expect("n > 0 has a set bit"));
                }
                x = session.add(&x, &rot(&x, e))?;
                e *= 2;
            }
        }
    }
}

/// Sums the first `n` slots of a flat tile into slot 0 (and, generally, the
/// `n` slots starting at `j` into slot `j`).
pub fn sum_tile_flat(session: &Session, l: &Tile, n: usize, variant: SumVariant) -> Result<Tile> {
    let s = session.slot_count();
    if n == 0 || n > s {
        return Err(Error::invalid(format!("count {n} must lie in 1..={s}")));
    }
    rotate_and_sum(session, l, n, 1, variant)
}

/// Sums a tile along dimension `dim` (1-based) of its tile interpretation.
/// Only the slots at in-tile coordinate 0 along `dim` are meaningful, except
/// for the first dimension where every coordinate receives the sum.
pub fn sum_tile_dim(
    session: &Session,
    l: &Tile,
    tile_shape: &[usize],
    dim: usize,
    variant: SumVariant,
) -> Result<Tile> {
    if dim == 0 || dim > tile_shape.len() {
        return Err(ShapeError::DimOutOfRange {
            dim,
            rank: tile_shape.len(),
        }
        .into());
    }
    let product: usize = tile_shape.iter().product();
    if product != session.slot_count() {
        return Err(ShapeError::SlotMismatch {
            product,
            slots: session.slot_count(),
        }
        .into());
    }
    let t = tile_shape[dim - 1];
    let stride: usize = tile_shape[dim..].iter().product();
    rotate_and_sum(session, l, t, stride as i64, variant.for_count(t))
}

fn tile_strides(shape: &TileTensorShape) -> Vec<usize> {
    let t = shape.tile_shape();
    let mut out = vec![1; t.len()];
    for i in (0..t.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * t[i + 1];
    }
    out
}

fn unravel(mut k: usize, ext: &[usize]) -> Vec<usize> {
    let mut l = vec![0; ext.len()];
    for i in (0..ext.len()).rev() {
        l[i] = k % ext[i];
        k /= ext[i];
    }
    l
}

fn ravel(l: &[usize], ext: &[usize]) -> usize {
    l.iter().zip(ext).fold(0, |acc, (&i, &n)| acc * n + i)
}

/// Logical indices held by slot `h` of tile `tile_index`.
pub fn logical_indices(
    shape: &TileTensorShape,
    tile_index: &[usize],
    h: usize,
) -> Result<Vec<usize>, ShapeError> {
    let ext = external_shape(shape);
    if tile_index.len() != shape.rank() {
        return Err(ShapeError::IndexOutOfRange(format!(
            "tile index {tile_index:?} has rank {} but the shape has rank {}",
            tile_index.len(),
            shape.rank()
        )));
    }
    if let Some(i) = (0..shape.rank()).find(|&i| tile_index[i] >= ext.0[i]) {
        return Err(ShapeError::IndexOutOfRange(format!(
            "tile index {} along dimension {} exceeds external extent {}",
            tile_index[i],
            i + 1,
            ext.0[i]
        )));
    }
    if h >= shape.tile_slots() {
        return Err(ShapeError::IndexOutOfRange(format!(
            "slot {h} outside the {} slots of the tile interpretation",
            shape.tile_slots()
        )));
    }
    let strides = tile_strides(shape);
    Ok(shape
        .dims()
        .iter()
        .enumerate()
        .map(|(i, d)| tile_index[i] * d.t + (h / strides[i]) % d.t)
        .collect())
}

/// Inverse of [`logical_indices`]: the tile index and slot holding `j`.
pub fn slot_of(shape: &TileTensorShape, j: &[usize]) -> Result<(Vec<usize>, usize), ShapeError> {
    let ext = external_shape(shape);
    if j.len() != shape.rank() {
        return Err(ShapeError::IndexOutOfRange(format!(
            "index {j:?} has rank {} but the shape has rank {}",
            j.len(),
            shape.rank()
        )));
    }
    let strides = tile_strides(shape);
    let mut l = Vec::with_capacity(j.len());
    let mut h = 0;
    for (i, d) in shape.dims().iter().enumerate() {
        if j[i] >= ext.0[i] * d.t {
            return Err(ShapeError::IndexOutOfRange(format!(
                "logical index {} along dimension {} exceeds {}",
                j[i],
                i + 1,
                ext.0[i] * d.t
            )));
        }
        l.push(j[i] / d.t);
        h += (j[i] % d.t) * strides[i];
    }
    Ok((l, h))
}

/// A packed tensor: its shape, the external grid of tiles (row-major) and
/// the session that owns the tiles.
#[derive(Debug, Clone)]
pub struct TileTensor {
    shape: TileTensorShape,
    external: ExternalShape,
    tiles: Vec<Tile>,
    session: Arc<Session>,
}

impl TileTensor {
    pub(crate) fn from_parts(
        shape: TileTensorShape,
        tiles: Vec<Tile>,
        session: Arc<Session>,
    ) -> Result<Self> {
        let external = external_shape(&shape);
        if tiles.len() != external.tile_count() {
            return Err(Error::invalid(format!(
                "{} tiles given for external shape {external}",
                tiles.len()
            )));
        }
        Ok(TileTensor {
            shape,
            external,
            tiles,
            session,
        })
    }

    pub fn shape(&self) -> &TileTensorShape {
        &self.shape
    }

    pub fn external(&self) -> &ExternalShape {
        &self.external
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    /// Direct tile access for tests that plant sentinel values.
    pub fn tiles_mut(&mut self) -> &mut [Tile] {
        &mut self.tiles
    }

    pub fn tile(&self, index: &[usize]) -> &Tile {
        &self.tiles[ravel(index, &self.external.0)]
    }

    pub fn session(&self) -> &Arc<Session> {
        &self.session
    }

    pub fn min_chain_index(&self) -> u32 {
        self.tiles
            .iter()
            .map(Tile::chain_index)
            .min()
            .unwrap_or(self.session.max_chain_index())
    }

    fn with_shape(&self, shape: TileTensorShape) -> TileTensor {
        TileTensor {
            external: external_shape(&shape),
            shape,
            tiles: self.tiles.clone(),
            session: self.session.clone(),
        }
    }

    /// Packs `a` into `shape`. The tensor's extents must equal the shape's
    /// `n_i`, up to inserting or dropping extent-1 dimensions.
    pub fn pack(a: &DenseTensor, shape: &TileTensorShape, session: &Arc<Session>) -> Result<Self> {
        if shape.has_unknowns() {
            return Err(ShapeError::UnknownTarget(shape.to_string()).into());
        }
        shape.check_slots(session.slot_count())?;
        let want = shape.tensor_shape();
        let reshaped;
        let a = if a.shape() == want.as_slice() {
            a
        } else {
            let squeeze =
                |v: &[usize]| -> Vec<usize> { v.iter().copied().filter(|&n| n != 1).collect() };
            if squeeze(a.shape()) != squeeze(&want) {
                return Err(ShapeError::TensorMismatch {
                    tensor: a.shape().to_vec(),
                    shape: shape.to_string(),
                }
                .into());
            }
            reshaped = a.reshape(&want)?;
            &reshaped
        };
        let external = external_shape(shape);
        let s = session.slot_count();
        let used = shape.tile_slots();
        let strides = tile_strides(shape);
        let dims = shape.dims();
        let tiles = (0..external.tile_count())
            .into_par_iter()
            .map(|k| {
                let l = unravel(k, &external.0);
                let mut slots = vec![0.0; s];
                let mut j = vec![0; dims.len()];
                'slot: for (h, slot) in slots.iter_mut().enumerate().take(used) {
                    for (i, d) in dims.iter().enumerate() {
                        let ji = l[i] * d.t + (h / strides[i]) % d.t;
                        if ji >= d.used() {
                            continue 'slot;
                        }
                        j[i] = ji % d.n;
                    }
                    *slot = a.get(&j);
                }
                session.make_tile(slots)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TileTensor {
            shape: shape.clone(),
            external,
            tiles,
            session: session.clone(),
        })
    }

    /// Reads replica 0 of every logical element.
    pub fn unpack(&self) -> DenseTensor {
        let n = self.shape.tensor_shape();
        let strides = tile_strides(&self.shape);
        let dims = self.shape.dims();
        let mut values = Vec::with_capacity(n.iter().product());
        let mut l = vec![0; n.len()];
        for_each_index(&n, |j| {
            let mut h = 0;
            for (i, d) in dims.iter().enumerate() {
                l[i] = j[i] / d.t;
                h += (j[i] % d.t) * strides[i];
            }
            values.push(self.tiles[ravel(&l, &self.external.0)].slots()[h]);
        });
        DenseTensor::new(n, values).expect("tensor shape is valid")
    }

    /// True when slot `h` of tile `l` is allowed to hold arbitrary values.
    fn is_free_slot(&self, l: &[usize], h: usize, strides: &[usize]) -> bool {
        if h >= self.shape.tile_slots() {
            return true;
        }
        self.shape
            .dims()
            .iter()
            .enumerate()
            .any(|(i, d)| d.unknown && l[i] * d.t + (h / strides[i]) % d.t >= d.used())
    }

    /// Overwrites every slot the shape leaves unconstrained (unused slots on
    /// `?` dimensions and padding past a relaxed tile) with values drawn from
    /// `rng`. Returns the number of slots written.
    pub fn fill_unknown_slots(&mut self, rng: &mut impl Rng) -> usize {
        let strides = tile_strides(&self.shape);
        let mut written = 0;
        for k in 0..self.tiles.len() {
            let l = unravel(k, &self.external.0);
            let free: Vec<usize> = (0..self.session.slot_count())
                .filter(|&h| self.is_free_slot(&l, h, &strides))
                .collect();
            let slots = self.tiles[k].slots_mut();
            for h in free {
                slots[h] = rng.random_range(-1000.0..1000.0);
                written += 1;
            }
        }
        written
    }

    /// Restores every tile to full depth.
    pub fn bootstrap(&self) -> TileTensor {
        TileTensor {
            tiles: self
                .tiles
                .iter()
                .map(|t| self.session.bootstrap(t))
                .collect(),
            ..self.clone()
        }
    }
}

fn same_session(a: &TileTensor, b: &TileTensor) -> Result<()> {
    if Arc::ptr_eq(&a.session, &b.session) {
        Ok(())
    } else {
        Err(Error::invalid("tile tensors belong to different sessions"))
    }
}

/// Elementwise `a op b` with broadcasting of fully replicated dimensions.
pub fn tt_elementwise(a: &TileTensor, b: &TileTensor, op: ElementwiseOp) -> Result<TileTensor> {
    same_session(a, b)?;
    let shape = elementwise_result_shape(&a.shape, &b.shape, op)?;
    let ext = external_shape(&shape);
    let session = &a.session;
    let source = |x: &TileTensor, l: &[usize]| -> usize {
        let idx: Vec<usize> = l
            .iter()
            .zip(&x.external.0)
            .map(|(&li, &e)| if e == 1 { 0 } else { li })
            .collect();
        ravel(&idx, &x.external.0)
    };
    let tiles = (0..ext.tile_count())
        .into_par_iter()
        .map(|k| {
            let l = unravel(k, &ext.0);
            let ta = &a.tiles[source(a, &l)];
            let tb = &b.tiles[source(b, &l)];
            match op {
                ElementwiseOp::Add => session.add(ta, tb),
                ElementwiseOp::Mul => session.mul(ta, tb),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TileTensor {
        shape,
        external: ext,
        tiles,
        session: session.clone(),
    })
}

/// Sums dimension `dim` (1-based): tiles along the dimension are added, then
/// each remaining tile is reduced in place by a strided rotate-and-sum.
pub fn tt_sum(t: &TileTensor, dim: usize, variant: SumVariant) -> Result<TileTensor> {
    let out_shape = sum_result_shape(&t.shape, dim)?;
    let i = dim - 1;
    let spec = *t.shape.dim(i);
    if spec.d > 1 {
        // a single replicated value: the sum is that value
        return Ok(t.with_shape(out_shape));
    }
    let session = &t.session;
    let stride = tile_strides(&t.shape)[i] as i64;
    let ti = spec.t;
    let e_i = t.external.0[i];
    let last_count = spec.used() - (e_i - 1) * ti;
    let replicating = out_shape.dim(i).d > 1;
    let garbage = spec.unknown && last_count < ti;
    let mut out_ext = t.external.0.clone();
    out_ext[i] = 1;

    let reduce = |group: Vec<&Tile>| -> Result<Tile> {
        let add_all = |tiles: &[&Tile]| -> Result<Tile> {
            let mut acc = tiles[0].clone();
            for x in &tiles[1..] {
                acc = session.add(&acc, x)?;
            }
            Ok(acc)
        };
        if ti == 1 {
            return add_all(&group);
        }
        let ras = |l: &Tile, n: usize| rotate_and_sum(session, l, n, stride, variant.for_count(n));
        if !garbage {
            let total = add_all(&group)?;
            let count = if replicating || e_i > 1 {
                ti
            } else if variant == SumVariant::PowerOfTwo
                && !spec.unknown
                && spec.used().next_power_of_two() <= ti
            {
                spec.used().next_power_of_two()
            } else {
                spec.used()
            };
            ras(&total, count)
        } else if e_i == 1 {
            ras(group[0], last_count)
        } else {
            let full = add_all(&group[..e_i - 1])?;
            let a = ras(&full, ti)?;
            let b = ras(group[e_i - 1], last_count)?;
            Ok(session.add(&a, &b)?)
        }
    };

    let tiles = (0..out_ext.iter().product::<usize>())
        .into_par_iter()
        .map(|k| {
            let mut l = unravel(k, &out_ext);
            let group: Vec<&Tile> = (0..e_i)
                .map(|li| {
                    l[i] = li;
                    &t.tiles[ravel(&l, &t.external.0)]
                })
                .collect();
            reduce(group)
        })
        .collect::<Result<Vec<_>>>()?;
    TileTensor::from_parts(out_shape, tiles, session.clone())
}

/// Indicator of the slots holding data (1) versus unused or padding (0).
fn used_mask(shape: &TileTensorShape, l: &[usize], s: usize) -> Vec<f64> {
    let strides = tile_strides(shape);
    let used = shape.tile_slots();
    (0..s)
        .map(|h| {
            let inside = h < used
                && shape
                    .dims()
                    .iter()
                    .enumerate()
                    .all(|(i, d)| l[i] * d.t + (h / strides[i]) % d.t < d.used());
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Zeroes every unused slot by a plaintext mask multiply and clears the `?`
/// flags. Shapes without `?` are returned unchanged at no cost.
pub fn clean_unknowns(t: &TileTensor) -> Result<TileTensor> {
    if !t.shape.has_unknowns() {
        return Ok(t.clone());
    }
    let s = t.session.slot_count();
    let tiles = t
        .tiles
        .par_iter()
        .enumerate()
        .map(|(k, tile)| {
            let mask = used_mask(&t.shape, &unravel(k, &t.external.0), s);
            t.session.mask_mul(tile, &mask)
        })
        .collect::<Result<Vec<_>, _>>()?;
    TileTensor::from_parts(t.shape.without_unknowns(), tiles, t.session.clone())
}

/// Turns a degenerate dimension `1/t` into a fully replicated `*/t` by a
/// backward rotate-and-sum. The tensor must be free of `?` and not relaxed,
/// since every slot past the value along the dimension is summed in.
pub fn replicate_dim(t: &TileTensor, dim: usize, variant: SumVariant) -> Result<TileTensor> {
    let rank = t.shape.rank();
    if dim == 0 || dim > rank {
        return Err(ShapeError::DimOutOfRange { dim, rank }.into());
    }
    let i = dim - 1;
    let spec = *t.shape.dim(i);
    if spec.is_fully_replicated() {
        return Ok(t.clone());
    }
    let fail = |msg: &str| -> Result<TileTensor> {
        Err(ShapeError::Precondition {
            dim,
            msg: msg.to_string(),
        }
        .into())
    };
    if spec.n != 1 || spec.d != 1 {
        return fail("replication needs a degenerate, unreplicated dimension");
    }
    if t.shape.has_unknowns() {
        return fail("clean unknown slots before replicating");
    }
    if t.shape.relaxed() {
        return fail("replication is not available on relaxed shapes");
    }
    let stride = tile_strides(&t.shape)[i] as i64;
    let v = variant.for_count(spec.t);
    let tiles = t
        .tiles
        .par_iter()
        .map(|tile| rotate_and_sum(&t.session, tile, spec.t, -stride, v))
        .collect::<Result<Vec<_>>>()?;
    let shape = t.shape.with_dim(i, DimSpec::replicated(spec.t));
    TileTensor::from_parts(shape, tiles, t.session.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{dense_elementwise, dense_sum, relative_error};
    use crate::shape::parse_shape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(s: &str) -> TileTensorShape {
        parse_shape(s).unwrap()
    }

    fn session_for(sh: &TileTensorShape) -> Arc<Session> {
        Session::with_slots(sh.tile_slots(), 8).unwrap()
    }

    fn seq(shape: &[usize]) -> DenseTensor {
        let mut k = 0.0;
        DenseTensor::from_fn(shape, |_| {
            k += 1.0;
            k
        })
        .unwrap()
    }

    #[test]
    fn eq1_examples() {
        let s = shape("[5/2,6/4]");
        assert_eq!(logical_indices(&s, &[1, 0], 5).unwrap(), vec![3, 1]);
        assert_eq!(logical_indices(&s, &[0, 0], 0).unwrap(), vec![0, 0]);
        assert_eq!(slot_of(&s, &[3, 1]).unwrap(), (vec![1, 0], 5));
        let flat = shape("[3,4]");
        assert_eq!(logical_indices(&flat, &[2, 3], 0).unwrap(), vec![2, 3]);
        assert!(logical_indices(&s, &[3, 0], 0).is_err());
        assert!(logical_indices(&s, &[0, 0], 8).is_err());
        assert!(slot_of(&s, &[6, 0]).is_err());
    }

    #[test]
    fn pack_replicated_vector() {
        let sh = shape("[5/2,*/4]");
        let ses = session_for(&sh);
        let v = DenseTensor::new(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let t = TileTensor::pack(&v, &sh, &ses).unwrap();
        assert_eq!(t.external().0, vec![3, 1]);
        assert_eq!(
            t.tile(&[0, 0]).slots(),
            &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]
        );
        assert_eq!(
            t.tile(&[2, 0]).slots(),
            &[5.0, 5.0, 5.0, 5.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(t.unpack().values(), v.values());
        let partial = TileTensor::pack(&v, &shape("[5/2,*3/4]"), &ses).unwrap();
        assert_eq!(
            partial.tile(&[0, 0]).slots(),
            &[1.0, 1.0, 1.0, 0.0, 2.0, 2.0, 2.0, 0.0]
        );
        assert_eq!(partial.unpack().values(), v.values());
    }

    #[test]
    fn pack_matrix_fig1c() {
        let sh = shape("[5/2,6/4]");
        let ses = session_for(&sh);
        let m = seq(&[5, 6]);
        let t = TileTensor::pack(&m, &sh, &ses).unwrap();
        assert_eq!(t.tiles().len(), 6);
        assert_eq!(
            t.tile(&[0, 1]).slots(),
            &[5.0, 6.0, 0.0, 0.0, 11.0, 12.0, 0.0, 0.0]
        );
        assert_eq!(
            t.tile(&[2, 0]).slots(),
            &[25.0, 26.0, 27.0, 28.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(t.unpack(), m);
    }

    #[test]
    fn pack_rejects_bad_targets() {
        let ses = Session::with_slots(8, 2).unwrap();
        let v = seq(&[5]);
        assert!(matches!(
            TileTensor::pack(&v, &shape("[5/2,1?/4]"), &ses),
            Err(Error::Shape(ShapeError::UnknownTarget(_)))
        ));
        assert!(TileTensor::pack(&v, &shape("[6/2,1/4]"), &ses).is_err());
        assert!(TileTensor::pack(&v, &shape("[5/2,1/2]"), &ses).is_err());
    }

    #[test]
    fn unpack_ignores_unknown_slots() {
        let sh = shape("[5/2,1/4]");
        let ses = session_for(&sh);
        let v = seq(&[5]);
        let t = TileTensor::pack(&v, &sh, &ses).unwrap();
        let mut q = t.with_shape(shape("[5/2,1?/4]"));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(q.fill_unknown_slots(&mut rng), 3 * 6);
        assert_eq!(q.unpack().values(), v.values());
    }

    #[test]
    fn rotation_counts_table() {
        let ses = Session::with_slots(4096, 1).unwrap();
        let l = ses
            .make_tile((0..4096).map(|x| (x % 17) as f64).collect())
            .unwrap();
        for (n, variant, want) in [
            (1190, SumVariant::LeftToRight, 14),
            (1190, SumVariant::RightToLeft, 14),
            (2048, SumVariant::LeftToRight, 11),
            (2048, SumVariant::RightToLeft, 11),
            (2048, SumVariant::PowerOfTwo, 11),
            (8, SumVariant::LeftToRight, 3),
            (1, SumVariant::RightToLeft, 0),
        ] {
            ses.reset_counters();
            let r = sum_tile_flat(&ses, &l, n, variant).unwrap();
            assert_eq!(ses.cost_report().rotations, want, "{n} {variant}");
            assert_eq!(variant.rotations(n), want as u32);
            let direct: f64 = l.slots()[..n].iter().sum();
            assert_eq!(r.slots()[0], direct);
        }
        assert!(sum_tile_flat(&ses, &l, 1190, SumVariant::PowerOfTwo).is_err());
        assert!(sum_tile_flat(&ses, &l, 0, SumVariant::RightToLeft).is_err());
        assert!(sum_tile_flat(&ses, &l, 4097, SumVariant::RightToLeft).is_err());
    }

    #[test]
    fn full_sum_replicates() {
        let ses = Session::with_slots(12, 1).unwrap();
        let l = ses.make_tile((1..=12).map(f64::from).collect()).unwrap();
        for v in [SumVariant::LeftToRight, SumVariant::RightToLeft] {
            let r = sum_tile_flat(&ses, &l, 12, v).unwrap();
            assert!(r.slots().iter().all(|&x| x == 78.0));
        }
    }

    #[test]
    fn tile_dim_sums() {
        let ses = Session::with_slots(8, 1).unwrap();
        let l = ses.make_tile((1..=8).map(f64::from).collect()).unwrap();
        let r = sum_tile_dim(&ses, &l, &[2, 4], 1, SumVariant::RightToLeft).unwrap();
        assert_eq!(r.slots(), &[6.0, 8.0, 10.0, 12.0, 6.0, 8.0, 10.0, 12.0]);
        let c = sum_tile_dim(&ses, &l, &[2, 4], 2, SumVariant::RightToLeft).unwrap();
        assert_eq!((c.slots()[0], c.slots()[4]), (10.0, 26.0));
        let flat = sum_tile_dim(&ses, &l, &[8], 1, SumVariant::RightToLeft).unwrap();
        assert_eq!(
            flat,
            sum_tile_flat(&ses, &l, 8, SumVariant::RightToLeft).unwrap()
        );
        assert!(sum_tile_dim(&ses, &l, &[2, 4], 3, SumVariant::RightToLeft).is_err());
        assert!(sum_tile_dim(&ses, &l, &[2, 2], 1, SumVariant::RightToLeft).is_err());
    }

    #[test]
    fn table_one_shapes_and_values() {
        let sh = shape("[4,3/8,5/16]");
        let ses = session_for(&sh);
        let a = seq(&[4, 3, 5]);
        let t = TileTensor::pack(&a, &sh, &ses).unwrap();
        for (dim, want) in [
            (1, "[1,3/8,5/16]"),
            (2, "[4,*/8,5/16]"),
            (3, "[4,3/8,1?/16]"),
        ] {
            let r = tt_sum(&t, dim, SumVariant::RightToLeft).unwrap();
            assert_eq!(r.shape().to_string(), want);
            assert_eq!(r.unpack(), dense_sum(&a, dim).unwrap());
        }
    }

    #[test]
    fn small_sum_example() {
        let sh = shape("[2/2,2/2]");
        let ses = session_for(&sh);
        let a = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = TileTensor::pack(&a, &sh, &ses).unwrap();
        let r = tt_sum(&t, 2, SumVariant::RightToLeft).unwrap();
        assert_eq!(r.shape().to_string(), "[2/2,1?/2]");
        assert_eq!(r.unpack().values(), &[3.0, 7.0]);
    }

    #[test]
    fn replicated_row_sum_is_slot_identical() {
        let sh = shape("[3/4,5/2]");
        let ses = session_for(&sh);
        let t = TileTensor::pack(&seq(&[3, 5]), &sh, &ses).unwrap();
        let r = tt_sum(&t, 1, SumVariant::RightToLeft).unwrap();
        assert_eq!(r.shape().to_string(), "[*/4,5/2]");
        for tile in r.tiles() {
            let s = tile.slots();
            for h in 0..8 {
                assert_eq!(s[h], s[h % 2]);
            }
        }
    }

    #[test]
    fn sum_over_unknowns_ignores_sentinels() {
        let sh = shape("[*/4,9/2]");
        let ses = session_for(&sh);
        let v = seq(&[9]);
        let rep = TileTensor::pack(&v, &sh, &ses).unwrap();
        let m = TileTensor::pack(&seq(&[10, 9]), &shape("[10/4,9/2]"), &ses).unwrap();
        // [*/4,9/2] + [10/4,9/2]: dimension 1 becomes 10?/4 (12 slots, 10 used)
        let mut q = tt_elementwise(&rep, &m, ElementwiseOp::Add).unwrap();
        assert_eq!(q.shape().to_string(), "[10?/4,9/2]");
        let expected = dense_elementwise(
            &v.reshape(&[1, 9]).unwrap(),
            &seq(&[10, 9]),
            ElementwiseOp::Add,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(q.fill_unknown_slots(&mut rng) > 0);
        let r = tt_sum(&q, 1, SumVariant::RightToLeft).unwrap();
        assert_eq!(r.shape().to_string(), "[1?/4,9/2]");
        assert!(relative_error(&r.unpack(), &dense_sum(&expected, 1).unwrap()) < 1e-12);
    }

    #[test]
    fn clean_and_replicate() {
        let sh = shape("[3/2,4/4]");
        let ses = session_for(&sh);
        let m = seq(&[3, 4]);
        let t = TileTensor::pack(&m, &sh, &ses).unwrap();
        let mut s = tt_sum(&t, 2, SumVariant::RightToLeft).unwrap();
        assert_eq!(s.shape().to_string(), "[3/2,1?/4]");
        s.fill_unknown_slots(&mut ChaCha8Rng::seed_from_u64(9));
        ses.reset_counters();
        let c = clean_unknowns(&s).unwrap();
        assert_eq!(c.shape().to_string(), "[3/2,1/4]");
        assert_eq!(ses.cost_report().mask_multiplications, 2);
        assert_eq!(c.unpack(), s.unpack());
        let before = ses.cost_report();
        assert_eq!(clean_unknowns(&c).unwrap().shape(), c.shape());
        assert_eq!(ses.cost_report(), before);
        let r = replicate_dim(&c, 2, SumVariant::RightToLeft).unwrap();
        assert_eq!(r.shape().to_string(), "[3/2,*/4]");
        assert_eq!((ses.cost_report() - before).rotations, 2 * 2);
        let row_sums = dense_sum(&m, 2).unwrap();
        for (k, tile) in r.tiles().iter().enumerate() {
            for h in 0..8 {
                let row = 2 * k + h / 4;
                let want = if row < 3 { row_sums.values()[row] } else { 0.0 };
                assert_eq!(tile.slots()[h], want);
            }
        }
        assert!(replicate_dim(&s, 2, SumVariant::RightToLeft).is_err());
        assert!(replicate_dim(&t, 2, SumVariant::RightToLeft).is_err());
        let narrow = TileTensor::pack(&seq(&[3]), &shape("[3/8,1]"), &ses).unwrap();
        assert_eq!(
            replicate_dim(&narrow, 2, SumVariant::RightToLeft)
                .unwrap()
                .shape()
                .to_string(),
            "[3/8,1]"
        );
    }

    #[test]
    fn depth_exhaustion_propagates() {
        let sh = shape("[4/4]");
        let ses = Session::with_slots(4, 1).unwrap();
        let t = TileTensor::pack(&seq(&[4]), &sh, &ses).unwrap();
        let sq = tt_elementwise(&t, &t, ElementwiseOp::Mul).unwrap();
        let err = tt_elementwise(&sq, &t, ElementwiseOp::Mul).unwrap_err();
        assert!(err.is_depth_exhausted());
        let again = tt_elementwise(&sq.bootstrap(), &t, ElementwiseOp::Mul).unwrap();
        assert_eq!(again.unpack().values(), &[1.0, 8.0, 27.0, 64.0]);
    }

    #[test]
    fn relaxed_shapes_pack_and_sum() {
        let sh = shape("[3/4,5/2]").with_relaxed(true);
        let ses = Session::with_slots(16, 4).unwrap();
        let a = seq(&[3, 5]);
        let t = TileTensor::pack(&a, &sh, &ses).unwrap();
        assert!(t.tiles()[0].slots()[8..].iter().all(|&x| x == 0.0));
        assert_eq!(t.unpack(), a);
        let r = tt_sum(&t, 1, SumVariant::RightToLeft).unwrap();
        assert_eq!(r.shape().to_string(), "[1?/4,5/2]");
        assert_eq!(r.unpack(), dense_sum(&a, 1).unwrap());
    }

    proptest! {
        #[test]
        fn eq1_bijection(t1 in 1usize..5, t2 in 1usize..5, n1 in 1usize..9, n2 in 1usize..9, h in 0usize..16) {
            let sh = TileTensorShape::new(vec![DimSpec::plain(n1, t1), DimSpec::plain(n2, t2)]).unwrap();
            let h = h % (t1 * t2);
            let ext = external_shape(&sh);
            for k in 0..ext.tile_count() {
                let l = unravel(k, &ext.0);
                let j = logical_indices(&sh, &l, h).unwrap();
                prop_assert_eq!(slot_of(&sh, &j).unwrap(), (l, h));
            }
        }

        #[test]
        fn exponent_law(vals in prop::collection::vec(-100i32..100, 16), x in 1usize..16, y in 1usize..16) {
            prop_assume!(x + y <= 16);
            let ses = Session::with_slots(16, 1).unwrap();
            let l = ses.make_tile(vals.into_iter().map(f64::from).collect()).unwrap();
            let lx = rotate_and_sum(&ses, &l, x, 1, SumVariant::RightToLeft).unwrap();
            let ly = rotate_and_sum(&ses, &l, y, 1, SumVariant::LeftToRight).unwrap();
            let combined = ses.add(&lx, &ses.rotate(&ly, x as i64)).unwrap();
            let lxy = rotate_and_sum(&ses, &l, x + y, 1, SumVariant::RightToLeft).unwrap();
            prop_assert_eq!(combined.slots(), lxy.slots());
        }

        #[test]
        fn rotation_closed_forms(n in 1usize..5000) {
            let ses = Session::with_slots(n, 1).unwrap();
            let l = ses.zero_tile();
            for v in [SumVariant::LeftToRight, SumVariant::RightToLeft] {
                ses.reset_counters();
                rotate_and_sum(&ses, &l, n, 1, v).unwrap();
                prop_assert_eq!(ses.cost_report().rotations, u64::from(v.rotations(n)));
            }
        }
    }
}
