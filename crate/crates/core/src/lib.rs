pub mod cli;
pub mod config;
pub mod dynamics;
pub mod feasibility;
pub mod lcp;
pub mod pipeline;
pub mod safety;
pub mod scenario;
pub mod uncertainty;
