//! Annotation service: hands out highlight and comparison tasks, validates
//! and persists submissions to an append-only log, reports inter-annotator
//! agreement and exports the data in the corpus JSONL formats.

pub mod config;
mod error;
pub mod http;
pub mod store;

pub use config::ServiceConfig;
pub use error::{ServiceError, ServiceResult};
pub use http::{router, serve};
pub use store::Store;
