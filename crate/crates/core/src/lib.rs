//! ROSA: suffix-automaton retrieval over binarized feature routes.
//!
//! The pipeline is `symbolizer` (project, binarize, pack) → `retrieval`
//! (per-route automata, destinations, counterfactual tables) → `injection`
//! (read values, build the injected vector) → `backward` (exact head
//! gradients plus counterfactual surrogate gradients). `model` wires these
//! into a small windowed-attention decoder trained on `mqar`.

pub mod backward;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod injection;
pub mod model;
pub mod mqar;
pub mod norm;
pub mod oracle;
pub mod real;
pub mod retrieval;
pub mod sam;
pub mod symbolizer;
pub mod tensor;

pub use error::{Result, RosaError};
