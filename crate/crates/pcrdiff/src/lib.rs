pub mod cli;
pub mod datasyn;
pub mod diffusion;
pub mod evalkit;
pub(crate) mod knn;
pub mod nnkit;
pub mod regnet;
pub mod trainer;
pub mod geom3d;
