//! Thread-local arithmetic counters.
//!
//! Every counted kernel in this crate reports the multiplies and adds it
//! executes, plus the size of the largest temporary it materializes. The
//! counters are per thread, so concurrent tests and workers never mix their
//! tallies; merge snapshots explicitly when combining workers.

use std::cell::Cell;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub mults: u64,
    pub adds: u64,
    /// Largest intermediate (in elements) recorded since the last reset.
    pub peak_intermediate: u64,
}

impl OpCounts {
    /// Multiplies plus adds; one multiply-add is two FLOPs.
    pub fn flops(&self) -> u64 {
        self.mults + self.adds
    }
}

impl Add for OpCounts {
    type Output = OpCounts;

    fn add(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            mults: self.mults + rhs.mults,
            adds: self.adds + rhs.adds,
            peak_intermediate: self.peak_intermediate.max(rhs.peak_intermediate),
        }
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: OpCounts) {
        *self = *self + rhs;
    }
}

impl Sub for OpCounts {
    type Output = OpCounts;

    /// Difference of cumulative counts. The peak is carried from `self`.
    fn sub(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            mults: self.mults - rhs.mults,
            adds: self.adds - rhs.adds,
            peak_intermediate: self.peak_intermediate,
        }
    }
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const {
        Cell::new(OpCounts { mults: 0, adds: 0, peak_intermediate: 0 })
    };
}

#[inline]
pub fn record(mults: u64, adds: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.mults += mults;
        v.adds += adds;
        c.set(v);
    });
}

/// Records `m` multiplies and `m - outputs` adds: a reduction of `m / outputs`
/// products per output starting from the first product.
#[inline]
pub(crate) fn record_contraction(products: u64, outputs: u64) {
    record(products, products.saturating_sub(outputs));
}

#[inline]
pub fn record_intermediate(elements: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.peak_intermediate = v.peak_intermediate.max(elements);
        c.set(v);
    });
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(|c| c.get())
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

/// Runs `f` with a fresh peak tracker and returns its result together with
/// the counts it added. The enclosing tallies are restored and then include
/// the work done by `f`.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, OpCounts) {
    let outer = snapshot();
    COUNTS.with(|c| c.set(OpCounts::default()));
    let out = f();
    let inner = snapshot();
    COUNTS.with(|c| c.set(outer + inner));
    (out, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_zeroes_everything() {
        record(3, 2);
        record_intermediate(10);
        reset();
        assert_eq!(snapshot(), OpCounts::default());
    }

    #[test]
    fn measure_isolates_and_merges() {
        reset();
        record(5, 5);
        let ((), inner) = measure(|| {
            record(2, 1);
            record_intermediate(7);
        });
        assert_eq!(inner.mults, 2);
        assert_eq!(inner.adds, 1);
        assert_eq!(inner.peak_intermediate, 7);
        let total = snapshot();
        assert_eq!(total.mults, 7);
        assert_eq!(total.adds, 6);
        assert_eq!(total.peak_intermediate, 7);
    }
}
