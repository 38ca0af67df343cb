//! Trace-driven simulation of MoE expert offloading.

pub mod cache;
pub mod config;
pub mod experiment;
pub mod gatesim;
pub mod pipeline;
pub mod predict;
pub mod quant;
pub mod strategy;
pub mod trace;
