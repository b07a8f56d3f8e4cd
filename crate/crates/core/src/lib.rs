//! Human-in-the-loop dialogue summarization: highlight and preference
//! rewards, a small recurrent summarizer trained with PPO, and the
//! evaluation metrics used to compare it against references.

pub mod config;
pub mod corpus;
mod error;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod ppo;
pub mod reward_global;
pub mod reward_local;
pub mod synthfeed;
pub mod textproc;

pub use error::{Error, Result};
