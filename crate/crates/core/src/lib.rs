//! Hierarchical activity recognition (HAR) and protective behavior detection
//! (PBD) over skeleton joint coordinates with graph-convolution/LSTM networks.

pub mod bodygraph;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod network;
pub mod numerics;
