//! Per-bucket batch sizing.
//!
//! The dual-constraint rule intersects a linear memory bound with a
//! polynomial compute bound:
//!
//! ```text
//! B = max(1, min(⌊M_mem / S⌋, ⌊M_comp / S^p⌋))
//! ```
//!
//! The equal-token baseline holds `B · S` at a fixed budget.

use alloc::vec::Vec;

use crate::shapes::Bucket;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualConstraint {
    m_mem: f64,
    m_comp: f64,
    p: f64,
}

impl DualConstraint {
    pub fn new(m_mem: f64, m_comp: f64, p: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(m_mem) {
            return Err(Error::InvalidConstraint("m_mem must be finite and > 0"));
        }
        if !ok(m_comp) {
            return Err(Error::InvalidConstraint("m_comp must be finite and > 0"));
        }
        if !ok(p) {
            return Err(Error::InvalidConstraint("p must be finite and > 0"));
        }
        Ok(Self { m_mem, m_comp, p })
    }

    pub fn m_mem(&self) -> f64 {
        self.m_mem
    }

    pub fn m_comp(&self) -> f64 {
        self.m_comp
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenBudget {
    budget: u64,
}

impl TokenBudget {
    pub fn new(budget: u64) -> Result<Self> {
        if budget == 0 {
            return Err(Error::InvalidConstraint("token budget must be >= 1"));
        }
        Ok(Self { budget })
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }
}

/// Which bound produced the batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Binding {
    Memory,
    Compute,
    /// Both bounds allow less than one sample; the batch is clamped to 1.
    Floor,
}

impl Binding {
    pub fn as_str(&self) -> &'static str {
        match self {
            Binding::Memory => "memory",
            Binding::Compute => "compute",
            Binding::Floor => "floor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchPolicy {
    Dual(DualConstraint),
    EqualToken(TokenBudget),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub bucket: Bucket,
    pub batch_size: u64,
    /// `None` for the equal-token policy.
    pub binding: Option<Binding>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BucketPlan {
    pub entries: Vec<PlanEntry>,
}

impl BucketPlan {
    pub fn batch_for(&self, bucket: &Bucket) -> Option<u64> {
        self.entries
            .iter()
            .find(|e| e.bucket.shape == bucket.shape)
            .map(|e| e.batch_size)
    }
}

/// Largest integer `q` with `q · unit <= limit`, evaluated in `f64`.
///
/// The quotient is floored once and then nudged so that the defining
/// inequality holds for the product as the caller would compute it.
fn admissible_count(limit: f64, unit: f64) -> f64 {
    let mut q = libm::floor(limit / unit);
    if q >= 9.0e15 {
        return q;
    }
    while (q + 1.0) * unit <= limit {
        q += 1.0;
    }
    while q > 0.0 && q * unit > limit {
        q -= 1.0;
    }
    q
}

fn to_count(q: f64) -> u64 {
    if q >= u64::MAX as f64 {
        u64::MAX
    } else {
        q as u64
    }
}

/// Batch size for a bucket of `seq_len` tokens under the dual constraint.
///
/// A tie between the two bounds reports [`Binding::Compute`].
pub fn dual_constraint_batch(seq_len: u64, c: &DualConstraint) -> Result<(u64, Binding)> {
    if seq_len == 0 {
        return Err(Error::ZeroSequence);
    }
    let s = seq_len as f64;
    let mem = admissible_count(c.m_mem, s);
    let comp = admissible_count(c.m_comp, libm::pow(s, c.p));
    let bound = mem.min(comp);
    if bound < 1.0 {
        return Ok((1, Binding::Floor));
    }
    let binding = if mem < comp {
        Binding::Memory
    } else {
        Binding::Compute
    };
    Ok((to_count(bound), binding))
}

pub fn equal_token_batch(seq_len: u64, t: &TokenBudget) -> Result<u64> {
    if seq_len == 0 {
        return Err(Error::ZeroSequence);
    }
    Ok((t.budget / seq_len).max(1))
}

/// Attention-dominated load `B · S²`, exact or an overflow error.
pub fn physical_load(batch: u64, seq_len: u64) -> Result<u128> {
    if batch == 0 || seq_len == 0 {
        return Err(Error::ZeroSequence);
    }
    let s = u128::from(seq_len);
    s.checked_mul(s)
        .and_then(|sq| sq.checked_mul(u128::from(batch)))
        .ok_or(Error::Overflow("physical load"))
}

/// One plan entry per bucket, in catalog order.
pub fn emit_plan(catalog: &[Bucket], policy: &BatchPolicy) -> Result<BucketPlan> {
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let entries = catalog
        .iter()
        .map(|&bucket| {
            let (batch_size, binding) = match policy {
                BatchPolicy::Dual(c) => {
                    let (b, binding) = dual_constraint_batch(bucket.seq_len, c)?;
                    (b, Some(binding))
                }
                BatchPolicy::EqualToken(t) => (equal_token_batch(bucket.seq_len, t)?, None),
            };
            Ok(PlanEntry {
                bucket,
                batch_size,
                binding,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BucketPlan { entries })
}
