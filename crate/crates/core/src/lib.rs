pub mod codec;
pub mod control;
pub mod error;
pub mod invariant;
pub mod quantizer;
pub mod rdf;
pub mod sim;
pub mod stats;
