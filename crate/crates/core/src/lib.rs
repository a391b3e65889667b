pub mod cli;
pub mod data;
pub mod eval;
pub mod layers;
pub mod model;
pub mod preprocess;
pub mod selfcheck;
pub mod tensor;
pub mod train;
