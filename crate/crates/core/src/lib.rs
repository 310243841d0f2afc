//! Command-log normalization, workflow mining and next-command recommendation
//! for BIM authoring sessions.

pub mod align;
pub mod augment;
pub mod error;
pub mod flow;
pub mod io;
pub mod live;
pub mod model;
pub mod pipeline;
pub mod redundancy;
pub mod stages;
pub mod synthetic;
pub mod types;

pub use error::{CoreError, FieldError, Result};
pub use types::{Category, Level, LogEntry, Prefix, RawSession, VocabItem, Vocabulary};
