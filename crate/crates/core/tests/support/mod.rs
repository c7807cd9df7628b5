#![allow(dead_code)]
pub mod adapters;
pub mod gradcheck;
pub mod overfit;
pub mod quantcheck;
