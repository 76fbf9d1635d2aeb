pub mod augment;
pub mod certvalidate;
pub mod error;
pub mod poly;
pub mod simkit;
pub mod soscompile;
pub mod sysmodel;

pub use error::{Error, Result};
