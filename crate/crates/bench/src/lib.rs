//! Benchmarks live in `benches/`; run them with `cargo bench -p points2pix-bench`.
