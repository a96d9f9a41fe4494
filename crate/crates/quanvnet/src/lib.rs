//! Hybrid quantum-classical image classification.
//!
//! A small CNN front end feeds a sliding-window quantum convolution layer
//! (a parameterized circuit simulated exactly on a statevector), whose
//! feature map is classified by a dense head. Circuit architectures are
//! described by a genome grammar and can be searched with an LSTM policy
//! trained by REINFORCE. Everything is deterministic given a seed.

pub mod controller;
pub mod data;
pub mod genome;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod qsim;
pub mod quanv;
