//! Benchmark host crate; the measurements live in `benches/`.

pub use splitguard;
