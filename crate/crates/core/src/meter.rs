//! Tagged byte accounting for scratch buffers.
//!
//! Kernels that allocate scratch space register it here through a
//! [`Charge`] guard; the guard releases its bytes on drop. The meter keeps
//! the peak of simultaneously-live bytes and the cumulative bytes per tag.

use std::cell::RefCell;
use std::collections::BTreeMap;

/// Tag carried by every buffer that holds a materialized per-sample gradient.
pub const PER_SAMPLE_GRAD: &str = "per-sample-grad";

#[derive(Debug, Default)]
struct MeterState {
    live: usize,
    peak: usize,
    per_tag: BTreeMap<String, usize>,
    live_per_tag: BTreeMap<String, usize>,
    peak_per_tag: BTreeMap<String, usize>,
}

#[derive(Debug, Default)]
pub struct AllocationMeter {
    state: RefCell<MeterState>,
}

/// Live allocation registered with an [`AllocationMeter`].
#[must_use = "dropping the charge releases the bytes immediately"]
pub struct Charge<'m> {
    meter: &'m AllocationMeter,
    tag: String,
    bytes: usize,
}

impl Drop for Charge<'_> {
    fn drop(&mut self) {
        let mut s = self.meter.state.borrow_mut();
        s.live -= self.bytes;
        if let Some(v) = s.live_per_tag.get_mut(&self.tag) {
            *v -= self.bytes;
        }
    }
}

impl AllocationMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&self, tag: &str, bytes: usize) -> Charge<'_> {
        let mut s = self.state.borrow_mut();
        s.live += bytes;
        s.peak = s.peak.max(s.live);
        *s.per_tag.entry(tag.to_string()).or_default() += bytes;
        let live_tag = {
            let v = s.live_per_tag.entry(tag.to_string()).or_default();
            *v += bytes;
            *v
        };
        let p = s.peak_per_tag.entry(tag.to_string()).or_default();
        *p = (*p).max(live_tag);
        Charge {
            meter: self,
            tag: tag.to_string(),
            bytes,
        }
    }

    /// Charge for `count` elements of `S`.
    pub fn charge_elems<S>(&self, tag: &str, count: usize) -> Charge<'_> {
        self.charge(tag, count * std::mem::size_of::<S>())
    }

    pub fn peak_bytes(&self) -> usize {
        self.state.borrow().peak
    }

    pub fn live_bytes(&self) -> usize {
        self.state.borrow().live
    }

    /// Cumulative bytes ever charged under `tag`.
    pub fn tag_bytes(&self, tag: &str) -> usize {
        self.state.borrow().per_tag.get(tag).copied().unwrap_or(0)
    }

    /// Largest number of bytes live at once under `tag`.
    pub fn tag_peak_bytes(&self, tag: &str) -> usize {
        self.state.borrow().peak_per_tag.get(tag).copied().unwrap_or(0)
    }

    pub fn per_tag_bytes(&self) -> BTreeMap<String, usize> {
        self.state.borrow().per_tag.clone()
    }

    pub fn reset(&self) {
        *self.state.borrow_mut() = MeterState::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_overlap() {
        let m = AllocationMeter::new();
        {
            let _a = m.charge("x", 100);
            {
                let _b = m.charge("y", 50);
                assert_eq!(m.live_bytes(), 150);
            }
            let _c = m.charge("y", 20);
        }
        assert_eq!(m.live_bytes(), 0);
        assert_eq!(m.peak_bytes(), 150);
        assert_eq!(m.tag_bytes("y"), 70);
        assert_eq!(m.tag_peak_bytes("y"), 50);
        assert_eq!(m.tag_bytes(PER_SAMPLE_GRAD), 0);
    }
}
