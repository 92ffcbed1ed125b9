//! Battery evaluation: canonical PIT representations, AAI functionals,
//! moduli metrics, covering-net certification, cognitive cores and the
//! statistics around them.

pub mod battery;
pub mod canonical;
pub mod certify;
pub mod cognitive;
pub mod functionals;
pub mod moduli;
pub mod rng;
pub mod simulator;
pub mod stats;
