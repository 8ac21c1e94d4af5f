//! Simulated time. Every component that needs a timestamp receives one
//! from a [`SimClock`] owned by the caller, so runs are reproducible and
//! expiry behaviour can be tested by advancing time explicitly.

/// A monotone counter of whole seconds since an arbitrary epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimClock {
    now_s: u64,
}

impl SimClock {
    /// Starts the clock at `start_s` seconds.
    pub fn starting_at(start_s: u64) -> Self {
        Self { now_s: start_s }
    }

    /// Current simulated time in seconds.
    pub fn now(&self) -> u64 {
        self.now_s
    }

    /// Advances the clock by `secs`, saturating instead of wrapping.
    pub fn advance(&mut self, secs: u64) {
        self.now_s = self.now_s.saturating_add(secs);
    }
}

impl Default for SimClock {
    /// A fixed, documented epoch so that default-configured runs are
    /// byte-reproducible across hosts.
    fn default() -> Self {
        Self::starting_at(1_700_000_000)
    }
}
