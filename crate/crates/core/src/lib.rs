pub mod autodiff;
pub mod model;
pub mod distill;
pub mod memory;
pub mod trainer;
pub mod harness;
