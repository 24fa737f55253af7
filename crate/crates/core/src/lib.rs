//! Rehearsal-based continual learning (ER, DER, DER++) with an auxiliary
//! data stream that pre-activates future classification heads, plus the
//! most-activated-heads (MAH) mapping of incoming classes onto those heads.
//!
//! Module map:
//! - [`tensor`]: dense tensors, reverse-mode tape, SGD
//! - [`model`]: MLP / small CNN backbones with one shared output layer
//! - [`data`]: datasets, class-incremental task sequences, the auxiliary pool
//! - [`buffer`]: reservoir replay memory with stored logits
//! - [`mah`]: head ownership bookkeeping and the MAH assignment
//! - [`methods`]: the training loops
//! - [`metrics`]: Class-IL / Task-IL accuracy, loss-peak statistics
//! - [`experiment`]: config parsing, grid execution, reporting

pub mod buffer;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mah;
pub mod methods;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tensor;

pub use buffer::{BufferEntry, Reservoir};
pub use data::{AuxiliaryPool, Batch, Dataset, MixedBatch, SplitDataset, TaskSequence, TaskSpec};
pub use error::{Error, Result};
pub use mah::{ClassLogitProfile, HeadMap, HeadOwner};
pub use methods::{Method, MethodConfig, RunResult, TrainTrace};
pub use metrics::EvalRecord;
pub use model::{BackboneConfig, BackboneKind, HeadMask, Model};
pub use tensor::{Graph, Parameter, Tensor, Var};
