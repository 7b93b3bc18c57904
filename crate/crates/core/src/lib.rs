pub mod cli;
pub mod converter;
pub mod data_io;
pub mod error;
pub mod families;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod nonparametric;
pub mod optim;
pub mod plot;
pub mod quadrature;
pub mod simulator;
pub mod special;

pub use error::{Error, Result};
pub use families::{Distribution, FamilyId, ParamVector};
