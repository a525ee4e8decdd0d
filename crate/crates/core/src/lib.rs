//! Simulation lab for fetch-window alignment side channels on single-stepped
//! victims: listing model, frontend batching, latency model, statistics,
//! attack pipelines and the branch-alignment countermeasure.

pub mod frontend;
pub mod listing;
pub mod timing;
pub mod stats;
pub mod attacks;
pub mod defense;
