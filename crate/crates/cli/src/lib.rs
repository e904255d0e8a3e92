//! Library surface of the experiment CLI: the config document and the CSV
//! emitters, shared between the binary and the acceptance suite.

pub mod config;
pub mod outputs;
