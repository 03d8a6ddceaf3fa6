pub mod blob;
pub mod demo;
pub mod detect;
pub mod diffusion;
pub mod eval;
pub mod encoder;
pub mod nn;
pub mod sim;
pub mod train;
