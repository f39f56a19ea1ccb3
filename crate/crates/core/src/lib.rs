//! Token-adaptive barrier preference optimization for schema-constrained
//! structured generation, at desk scale.

pub mod align;
pub mod config;
pub mod confusion;
pub mod eval;
pub mod objectives;
pub mod parallel;
pub mod pipeline;
pub mod policy;
pub mod schema;
pub mod synth;
pub mod trainer;
