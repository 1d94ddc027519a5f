use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub size: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            size: 20,
            stride: 10,
        }
    }
}

/// Index ranges of sliding windows over `n` samples. A final window ending
/// at the last sample is appended when the stride would leave a tail
/// uncovered. `None` yields one window over everything.
pub fn window_ranges(n: usize, spec: Option<WindowSpec>) -> Vec<Range<usize>> {
    let Some(spec) = spec else {
        return vec![0..n];
    };
    let size = spec.size.min(n);
    let mut out: Vec<Range<usize>> = (0..)
        .map(|i| i * spec.stride)
        .take_while(|s| s + size <= n)
        .map(|s| s..s + size)
        .collect();
    if out.last().is_none_or(|r| r.end < n) {
        out.push(n - size..n);
    }
    out
}
