pub mod error;
pub mod fcca;
pub mod flars;
pub mod funcrep;
pub mod gpmix;
pub mod linalg;
pub mod persist;
pub mod simgen;

pub use error::{FlarsError, Result};
