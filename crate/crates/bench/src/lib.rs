// SPDX-License-Identifier: Apache-2.0

//! Criterion benchmarks for the protection model; see `benches/`.
