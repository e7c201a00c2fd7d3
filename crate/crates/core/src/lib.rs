pub mod guided;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod reward;
pub mod store;
pub mod value;
pub mod ivr;
pub mod stats;
pub mod eval;
pub mod config;
