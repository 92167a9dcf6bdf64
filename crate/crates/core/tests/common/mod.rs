#![allow(dead_code, clippy::needless_range_loop)]

pub mod instances;
pub mod reference;
