pub mod checkpoint;
pub mod eval;
pub mod frechet;
pub mod probe;
pub mod synth;
pub mod tensor_file;
