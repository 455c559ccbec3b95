use std::sync::atomic::{AtomicU64, Ordering};

/// Sequential id source. Ids are `<prefix>-<n>` with a zero-padded counter,
/// so runs with the same request order produce the same ids.
#[derive(Debug, Default)]
pub struct IdGen {
    next: AtomicU64,
}

impl IdGen {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_raw(&self) -> u64 {
        self.next.fetch_add(1, Ordering::Relaxed) + 1
    }

    pub fn next(&self, prefix: &str) -> String {
        format!("{prefix}-{:08}", self.next_raw())
    }
}
