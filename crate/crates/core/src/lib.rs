#![no_std]
#[cfg(any(test, feature = "std"))]
extern crate std;
extern crate alloc;

pub mod corpus;
pub mod evalsvc;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod quant;
pub mod rouge;
pub mod tokenizer;
pub mod trainer;
