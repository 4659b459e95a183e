use serde::{Deserialize, Serialize};

/// How intermediate activations are kept between forward and backward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    /// Keep every intermediate activation.
    #[default]
    Standard,
    /// Keep only block inputs; rebuild block internals during backward.
    Recompute,
}

/// Bookkeeping for activations held alive for the backward pass.
///
/// Counts bytes of cached tensors, not allocator traffic, so the numbers are
/// reproducible across platforms.
#[derive(Clone, Debug, Default)]
pub struct Activations {
    mode: MemoryMode,
    live_bytes: usize,
    peak_bytes: usize,
}

impl Activations {
    pub fn new(mode: MemoryMode) -> Self {
        Self {
            mode,
            live_bytes: 0,
            peak_bytes: 0,
        }
    }

    pub fn mode(&self) -> MemoryMode {
        self.mode
    }

    pub fn retain(&mut self, values: usize) {
        self.live_bytes += values * std::mem::size_of::<f64>();
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
    }

    pub fn release(&mut self, values: usize) {
        self.live_bytes = self
            .live_bytes
            .saturating_sub(values * std::mem::size_of::<f64>());
    }

    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }
}
