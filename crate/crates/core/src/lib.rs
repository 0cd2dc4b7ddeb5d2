//! Offline dialogue policy learning with pairwise causal reward learning and
//! safe policy improvement.

pub mod diffkit;
pub mod io;
pub mod toywoz;
pub mod metrics;
pub mod policy;
pub mod prefreward;
pub mod analysis;
pub mod labels;
pub mod pipeline;
