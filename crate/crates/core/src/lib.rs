pub mod aggregation;
pub mod cli;
pub mod error;
pub mod kv;
pub mod labels;
pub mod losses;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod seeding;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
