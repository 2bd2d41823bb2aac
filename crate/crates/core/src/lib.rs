#![allow(clippy::needless_range_loop)]

pub mod align;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod text;
pub mod train;
