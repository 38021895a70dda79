pub mod diffcore;
pub mod statespace;
pub mod model;
pub mod objective;
pub mod trainer;
pub mod lorenz;
pub mod evalkit;
pub mod dataio;
