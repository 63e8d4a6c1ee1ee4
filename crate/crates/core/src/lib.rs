//! Bi-encoder reply suggestion workbench.
//!
//! Trains message/response transformer encoders with a symmetric matching
//! loss, serves ranked reply suggestions from a cached response set, and runs
//! compression ablation grids (layer dropping, layer freezing, hybrids)
//! with wall-clock and relevance reporting.

pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod matching;
pub mod ranker;
pub mod response_set;
pub mod tensor;
