// SPDX-License-Identifier: Apache-2.0

//! Benchmarks live under `benches/`; run them with `cargo bench -p gridcast-bench`.
