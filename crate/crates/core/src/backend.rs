//! Plaintext stand-in for an HE SIMD machine.
//!
//! Tiles are fixed-width vectors of `s` reals. The only primitives are
//! elementwise add/multiply, multiplication by a plaintext vector and cyclic
//! rotation. Every primitive is counted in the owning [`Session`], and each
//! tile carries a chain index that multiplications consume and bootstrapping
//! restores.

use std::fmt;
use std::ops::Sub;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("expected {expected} slots, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("multiplication depth exhausted (chain index {chain}); a bootstrap is required")]
    DepthExhausted { chain: u32 },
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendConfig {
    pub slot_count: usize,
    /// Multiplication depth available to a fresh or bootstrapped tile.
    pub max_chain_index: u32,
}

impl BackendConfig {
    pub fn new(slot_count: usize, max_chain_index: u32) -> Result<Self, BackendError> {
        if slot_count == 0 {
            return Err(BackendError::Config("slot count must be positive".into()));
        }
        if max_chain_index == 0 {
            return Err(BackendError::Config("depth must be positive".into()));
        }
        Ok(BackendConfig {
            slot_count,
            max_chain_index,
        })
    }
}

/// Snapshot of a session's counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostReport {
    pub additions: u64,
    pub multiplications: u64,
    pub mask_multiplications: u64,
    pub rotations: u64,
    /// Rotations whose offset (either direction) is a power of two.
    pub rotations_pow2: u64,
    pub bootstraps: u64,
}

impl CostReport {
    pub fn to_key_values(&self) -> String {
        self.to_string()
    }

    /// Parses the `key=value` form back. Unknown keys are rejected.
    pub fn from_key_values(text: &str) -> Result<Self, String> {
        let mut r = CostReport::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{line}`"))?;
            let v: u64 = v.parse().map_err(|_| format!("bad count in `{line}`"))?;
            match k {
                "additions" => r.additions = v,
                "multiplications" => r.multiplications = v,
                "mask_multiplications" => r.mask_multiplications = v,
                "rotations" => r.rotations = v,
                "rotations_pow2" => r.rotations_pow2 = v,
                "bootstraps" => r.bootstraps = v,
                other => return Err(format!("unknown counter `{other}`")),
            }
        }
        Ok(r)
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "additions={}", self.additions)?;
        writeln!(f, "multiplications={}", self.multiplications)?;
        writeln!(f, "mask_multiplications={}", self.mask_multiplications)?;
        writeln!(f, "rotations={}", self.rotations)?;
        writeln!(f, "rotations_pow2={}", self.rotations_pow2)?;
        writeln!(f, "bootstraps={}", self.bootstraps)
    }
}

impl Sub for CostReport {
    type Output = CostReport;

    fn sub(self, rhs: CostReport) -> CostReport {
        CostReport {
            additions: self.additions - rhs.additions,
            multiplications: self.multiplications - rhs.multiplications,
            mask_multiplications: self.mask_multiplications - rhs.mask_multiplications,
            rotations: self.rotations - rhs.rotations,
            rotations_pow2: self.rotations_pow2 - rhs.rotations_pow2,
            bootstraps: self.bootstraps - rhs.bootstraps,
        }
    }
}

/// A slot vector plus its remaining multiplication depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    slots: Vec<f64>,
    chain_index: u32,
}

impl Tile {
    pub fn slots(&self) -> &[f64] {
        &self.slots
    }

    pub fn chain_index(&self) -> u32 {
        self.chain_index
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Direct slot access, bypassing the counted primitives. Meant for tests
    /// that plant sentinel values in regions a shape declares unused.
    pub fn slots_mut(&mut self) -> &mut [f64] {
        &mut self.slots
    }
}

#[derive(Debug, Default)]
struct Counters {
    additions: AtomicU64,
    multiplications: AtomicU64,
    mask_multiplications: AtomicU64,
    rotations: AtomicU64,
    rotations_pow2: AtomicU64,
    bootstraps: AtomicU64,
}

/// Owns the configuration and the operation counters. Share it as
/// `Arc<Session>`; counters are atomic so tiles can be processed in parallel.
#[derive(Debug)]
pub struct Session {
    config: BackendConfig,
    counters: Counters,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

impl Session {
    pub fn new(config: BackendConfig) -> Arc<Session> {
        Arc::new(Session {
            config,
            counters: Counters::default(),
        })
    }

    pub fn with_slots(slot_count: usize, depth: u32) -> Result<Arc<Session>, BackendError> {
        Ok(Session::new(BackendConfig::new(slot_count, depth)?))
    }

    pub fn config(&self) -> BackendConfig {
        self.config
    }

    pub fn slot_count(&self) -> usize {
        self.config.slot_count
    }

    pub fn max_chain_index(&self) -> u32 {
        self.config.max_chain_index
    }

    pub fn cost_report(&self) -> CostReport {
        let c = &self.counters;
        CostReport {
            additions: c.additions.load(Ordering::Relaxed),
            multiplications: c.multiplications.load(Ordering::Relaxed),
            mask_multiplications: c.mask_multiplications.load(Ordering::Relaxed),
            rotations: c.rotations.load(Ordering::Relaxed),
            rotations_pow2: c.rotations_pow2.load(Ordering::Relaxed),
            bootstraps: c.bootstraps.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counters(&self) {
        let c = &self.counters;
        for a in [
            &c.additions,
            &c.multiplications,
            &c.mask_multiplications,
            &c.rotations,
            &c.rotations_pow2,
            &c.bootstraps,
        ] {
            a.store(0, Ordering::Relaxed);
        }
    }

    fn check_len(&self, got: usize) -> Result<(), BackendError> {
        let expected = self.config.slot_count;
        if got == expected {
            Ok(())
        } else {
            Err(BackendError::LengthMismatch { expected, got })
        }
    }

    pub fn make_tile(&self, values: Vec<f64>) -> Result<Tile, BackendError> {
        self.check_len(values.len())?;
        Ok(Tile {
            slots: values,
            chain_index: self.config.max_chain_index,
        })
    }

    pub fn zero_tile(&self) -> Tile {
        Tile {
            slots: vec![0.0; self.config.slot_count],
            chain_index: self.config.max_chain_index,
        }
    }

    /// Cyclic left rotation: `out[j] = l[j + offset mod s]`.
    pub fn rotate(&self, l: &Tile, offset: i64) -> Tile {
        let s = self.config.slot_count;
        let k = offset.rem_euclid(s as i64) as usize;
        if k == 0 {
            return l.clone();
        }
        bump(&self.counters.rotations);
        if k.is_power_of_two() || (s - k).is_power_of_two() {
            bump(&self.counters.rotations_pow2);
        }
        let mut slots = Vec::with_capacity(s);
        slots.extend_from_slice(&l.slots[k..]);
        slots.extend_from_slice(&l.slots[..k]);
        Tile {
            slots,
            chain_index: l.chain_index,
        }
    }

    pub fn add(&self, a: &Tile, b: &Tile) -> Result<Tile, BackendError> {
        self.check_len(a.len())?;
        self.check_len(b.len())?;
        bump(&self.counters.additions);
        Ok(Tile {
            slots: a.slots.iter().zip(&b.slots).map(|(x, y)| x + y).collect(),
            chain_index: a.chain_index.min(b.chain_index),
        })
    }

    /// Adds a plaintext vector; counted as an addition.
    pub fn add_plain(&self, a: &Tile, p: &[f64]) -> Result<Tile, BackendError> {
        self.check_len(a.len())?;
        self.check_len(p.len())?;
        bump(&self.counters.additions);
        Ok(Tile {
            slots: a.slots.iter().zip(p).map(|(x, y)| x + y).collect(),
            chain_index: a.chain_index,
        })
    }

    fn consume(chain: u32) -> Result<u32, BackendError> {
        chain
            .checked_sub(1)
            .ok_or(BackendError::DepthExhausted { chain })
    }

    pub fn mul(&self, a: &Tile, b: &Tile) -> Result<Tile, BackendError> {
        self.check_len(a.len())?;
        self.check_len(b.len())?;
        let chain_index = Self::consume(a.chain_index.min(b.chain_index))?;
        bump(&self.counters.multiplications);
        Ok(Tile {
            slots: a.slots.iter().zip(&b.slots).map(|(x, y)| x * y).collect(),
            chain_index,
        })
    }

    /// Multiplies by a plaintext vector.
    pub fn mask_mul(&self, a: &Tile, mask: &[f64]) -> Result<Tile, BackendError> {
        self.check_len(a.len())?;
        self.check_len(mask.len())?;
        let chain_index = Self::consume(a.chain_index)?;
        bump(&self.counters.mask_multiplications);
        Ok(Tile {
            slots: a.slots.iter().zip(mask).map(|(x, y)| x * y).collect(),
            chain_index,
        })
    }

    /// Multiplies every slot by a plaintext scalar. This is a plaintext
    /// multiply, so it is counted with the mask multiplications.
    pub fn scalar_mul(&self, a: &Tile, c: f64) -> Result<Tile, BackendError> {
        self.check_len(a.len())?;
        let chain_index = Self::consume(a.chain_index)?;
        bump(&self.counters.mask_multiplications);
        Ok(Tile {
            slots: a.slots.iter().map(|x| x * c).collect(),
            chain_index,
        })
    }

    /// Adds a plaintext scalar to every slot; counted as an addition.
    pub fn add_scalar(&self, a: &Tile, c: f64) -> Tile {
        bump(&self.counters.additions);
        Tile {
            slots: a.slots.iter().map(|x| x + c).collect(),
            chain_index: a.chain_index,
        }
    }

    pub fn bootstrap(&self, a: &Tile) -> Tile {
        bump(&self.counters.bootstraps);
        Tile {
            slots: a.slots.clone(),
            chain_index: self.config.max_chain_index,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn session(s: usize, d: u32) -> Arc<Session> {
        Session::with_slots(s, d).unwrap()
    }

    #[test]
    fn make_tile_checks_length() {
        let s = session(4, 3);
        let t = s.make_tile(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.chain_index(), 3);
        assert_eq!(s.make_tile(vec![0.0; 4]).unwrap().slots(), &[0.0; 4]);
        assert_eq!(
            s.make_tile(vec![1.0, 2.0, 3.0]),
            Err(BackendError::LengthMismatch {
                expected: 4,
                got: 3
            })
        );
        assert_eq!(s.cost_report(), CostReport::default());
    }

    #[test]
    fn rotation_examples() {
        let s = session(4, 3);
        let t = s.make_tile(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.rotate(&t, 1).slots(), &[2.0, 3.0, 4.0, 1.0]);
        assert_eq!(s.rotate(&t, -1).slots(), &[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(s.cost_report().rotations, 2);
        assert_eq!(s.rotate(&t, 0).slots(), t.slots());
        assert_eq!(s.rotate(&t, 8).slots(), t.slots());
        assert_eq!(s.cost_report().rotations, 2);
    }

    #[test]
    fn power_of_two_tagging() {
        let s = session(12, 1);
        let t = s.zero_tile();
        s.rotate(&t, 4);
        s.rotate(&t, -4);
        s.rotate(&t, 3);
        s.rotate(&t, 5);
        let r = s.cost_report();
        assert_eq!((r.rotations, r.rotations_pow2), (4, 2));
    }

    #[test]
    fn chain_rules() {
        let s = session(2, 2);
        let a = s.make_tile(vec![1.0, 2.0]).unwrap();
        let b = s.make_tile(vec![3.0, 4.0]).unwrap();
        let p = s.mul(&a, &b).unwrap();
        assert_eq!(p.slots(), &[3.0, 8.0]);
        assert_eq!(p.chain_index(), 1);
        assert_eq!(s.add(&a, &p).unwrap().chain_index(), 1);
        let q = s.mask_mul(&p, &[1.0, 0.0]).unwrap();
        assert_eq!(q.chain_index(), 0);
        assert_eq!(
            s.mul(&q, &a),
            Err(BackendError::DepthExhausted { chain: 0 })
        );
        assert_eq!(
            s.scalar_mul(&q, 2.0),
            Err(BackendError::DepthExhausted { chain: 0 })
        );
        let r = s.cost_report();
        assert_eq!(
            (r.multiplications, r.mask_multiplications, r.additions),
            (1, 1, 1)
        );
    }

    #[test]
    fn bootstrap_restores_and_counts() {
        let s = session(2, 2);
        let a = s.make_tile(vec![1.0, 2.0]).unwrap();
        let low = s.mask_mul(&s.mul(&a, &a).unwrap(), &[1.0, 1.0]).unwrap();
        assert_eq!(low.chain_index(), 0);
        let b = s.bootstrap(&low);
        assert_eq!(b.slots(), low.slots());
        assert_eq!(b.chain_index(), 2);
        s.bootstrap(&b);
        assert_eq!(s.cost_report().bootstraps, 2);
    }

    #[test]
    fn report_format_round_trips() {
        let s = session(4, 1);
        let t = s.zero_tile();
        for k in 1..=3 {
            s.rotate(&t, k);
        }
        let r = s.cost_report();
        assert_eq!(r.rotations, 3);
        let text = r.to_key_values();
        assert!(text.starts_with("additions=0\nmultiplications=0\n"));
        assert_eq!(CostReport::from_key_values(&text).unwrap(), r);
        s.reset_counters();
        assert_eq!(s.cost_report(), CostReport::default());
    }

    proptest! {
        #[test]
        fn rotations_compose(vals in prop::collection::vec(-10.0f64..10.0, 1..20), a in -40i64..40, b in -40i64..40) {
            let s = session(vals.len(), 1);
            let t = s.make_tile(vals).unwrap();
            prop_assert_eq!(s.rotate(&s.rotate(&t, a), b), s.rotate(&t, a + b));
        }

        #[test]
        fn add_mul_commute(x in prop::collection::vec(-10.0f64..10.0, 8), y in prop::collection::vec(-10.0f64..10.0, 8)) {
            let s = session(8, 4);
            let a = s.make_tile(x).unwrap();
            let b = s.make_tile(y).unwrap();
            prop_assert_eq!(s.add(&a, &b).unwrap(), s.add(&b, &a).unwrap());
            prop_assert_eq!(s.mul(&a, &b).unwrap(), s.mul(&b, &a).unwrap());
        }
    }
}
