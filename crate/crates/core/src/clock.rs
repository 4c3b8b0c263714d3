//! Logical time and deterministic randomness for the simulated deployment.
//!
//! All module timings are expressed in simulated milliseconds; nothing in
//! the workspace reads the wall clock.

use std::cell::Cell;

/// Monotone logical clock in simulated milliseconds.
#[derive(Debug, Default)]
pub struct Clock {
    now_ms: Cell<u64>,
}

impl Clock {
    pub fn new() -> Clock {
        Clock { now_ms: Cell::new(0) }
    }

    pub fn now(&self) -> u64 {
        self.now_ms.get()
    }

    pub fn advance(&self, delta_ms: u64) {
        self.now_ms.set(self.now_ms.get() + delta_ms);
    }

    /// Moves the clock forward to `time_ms`; never moves it backwards.
    pub fn advance_to(&self, time_ms: u64) {
        if time_ms > self.now_ms.get() {
            self.now_ms.set(time_ms);
        }
    }
}

/// Deployment-wide SCN allocator: the logical commit timestamp service.
/// Every commit, metadata mutation, and snapshot read draws from the same
/// source, so scn comparisons order events across modules.
#[derive(Debug, Default)]
pub struct ScnSource {
    last: Cell<u64>,
}

impl ScnSource {
    pub fn new() -> ScnSource {
        ScnSource { last: Cell::new(0) }
    }

    pub fn next(&self) -> crate::types::Scn {
        let v = self.last.get() + 1;
        self.last.set(v);
        crate::types::Scn(v)
    }

    /// Latest allocated SCN; the snapshot point for new transactions.
    pub fn current(&self) -> crate::types::Scn {
        crate::types::Scn(self.last.get())
    }

    /// Moves the allocator past an SCN observed during recovery.
    pub fn observe(&self, scn: crate::types::Scn) {
        if scn.0 > self.last.get() {
            self.last.set(scn.0);
        }
    }
}

/// splitmix64: small, fast, and identical on every platform. Not for
/// cryptography; for reproducible simulation only.
#[derive(Debug, Clone)]
pub struct SimRng {
    state: u64,
}

impl SimRng {
    pub fn new(seed: u64) -> SimRng {
        SimRng { state: seed.wrapping_add(0x9E37_79B9_7F4A_7C15) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, bound). bound = 0 returns 0.
    pub fn below(&mut self, bound: u64) -> u64 {
        if bound == 0 {
            return 0;
        }
        self.next_u64() % bound
    }

    pub fn range(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len() as u64) as usize]
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_never_goes_backwards() {
        let c = Clock::new();
        c.advance(10);
        c.advance_to(5);
        assert_eq!(c.now(), 10);
        c.advance_to(25);
        assert_eq!(c.now(), 25);
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = SimRng::new(42);
        let mut b = SimRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SimRng::new(43);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn below_respects_bound() {
        let mut r = SimRng::new(7);
        for _ in 0..1000 {
            assert!(r.below(10) < 10);
        }
    }
}
