//! Support code for the `apikey` binary: the benchmark harness, key and
//! config files, and booting the exchange.

pub mod bench;
pub mod files;
