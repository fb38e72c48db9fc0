//! Double machine learning tests of full mediation and mediator
//! exogeneity, a back-door/front-door comparison test, Monte Carlo
//! benchmarks, exact discrete-population oracles, and a graphical
//! verifier for the identifying assumptions.

pub mod bdfd;
pub mod citest;
pub mod dag;
pub mod data;
pub mod error;
pub mod lasso;
pub mod oracle;
pub mod sim;

pub use error::{Error, Result};
