//! Shared helpers for the criterion benches. The interesting code lives in
//! `benches/hot_path.rs`; this library only exists so the bench target has
//! a crate to attach to.

pub use masia_core;
