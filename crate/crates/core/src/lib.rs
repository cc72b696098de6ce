pub mod config;
pub mod corpus;
pub mod curiosity;
pub mod evalharness;
pub mod factorization;
pub mod linalg;
pub mod optim;
pub mod relevance;
pub mod reranker;
pub mod pipeline;
pub mod rng;
pub mod sequence;
pub mod snapshot;
pub mod surprise;
pub mod synth;
