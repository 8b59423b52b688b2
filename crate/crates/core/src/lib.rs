pub mod data;
pub mod net;
pub mod infer;
pub mod tensor;
pub mod train;
