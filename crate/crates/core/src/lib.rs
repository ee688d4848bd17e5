//! Fine-grained entity typing with prompt-guided expressions and constrained
//! hierarchical contrastive training, on a small from-scratch encoder.

pub mod autodiff;
pub mod contrast;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod ontology;
pub mod prompt;
pub mod trainer;
