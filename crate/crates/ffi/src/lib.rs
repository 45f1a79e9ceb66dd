//! C ABI surface. Filled in alongside the core crate.
