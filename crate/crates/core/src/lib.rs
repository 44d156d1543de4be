pub mod autodiff;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod toy;
pub mod trajectory;

pub use error::{Error, Result};
