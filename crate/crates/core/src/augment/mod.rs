//! Documentation-backed metadata, workflow merging, step features and
//! dataset finalization.

pub mod bpe;
pub mod dataset;
pub mod docs;
pub mod features;
pub mod meta;

pub use bpe::{learn_workflows, BpeModel};
pub use dataset::{finalize_dataset, read_dataset, write_dataset, Catalog, Dataset, DatasetConfig, NormStats, Sequence, Split};
pub use docs::{ingest_documentation, retrieve_context, DocChunk};
pub use features::{compute_features, Step, StepBuilder};
pub use meta::{augment_command, augment_workflow, CommandMeta, LabelRegistry, MetaProvider, Registries};
