pub mod dataio;
pub mod error;
pub mod estimator;
pub mod exec;
pub mod linalg;
pub mod metrics;
pub mod noddi;
pub mod phantom;
pub mod pipeline;
pub mod quadrature;
pub mod shbasis;
pub mod sphere;

pub use error::{Error, Result};
pub use exec::Exec;
