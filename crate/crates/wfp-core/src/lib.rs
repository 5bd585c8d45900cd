pub mod cli_io;
pub mod constants;
pub mod density_matrix;
pub mod error;
pub mod fourier;
pub mod numerics;
pub mod phase_grid;
pub mod potential_theta;
pub mod propagator;
pub mod spectral;
pub mod steady_state;
pub mod wfp_operator;

pub use error::{Result, WfpError};
