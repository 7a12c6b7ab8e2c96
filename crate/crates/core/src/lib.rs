//! Memory-augmented student-teacher adaptation for streaming domain shift.
//!
//! A teacher network pseudo-labels each incoming sample and writes its
//! features into a bank of unit-norm memory items; the student reads the bank
//! back and is trained with a pseudo-label cross-entropy plus a contrastive
//! loss against the retrieved items. The teacher tracks the student by EMA.

pub mod adapt;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod losses;
pub mod memory;
pub mod numerics;
pub mod streamsim;

pub use adapt::{adapt_one, AdaptConfig, EncoderParams, StepMetrics, StudentTeacherState};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use harness::{RunConfig, RunMode, RunReport, Settings};
pub use losses::{ContrastForm, LossValue, MemClrConfig};
pub use memory::{MemoryBank, ProjectionSet, ReadResult};
pub use numerics::{DenseMatrix, GradReport};
pub use streamsim::{DomainSpec, Observation, Shift, ShiftSpec, StreamSample};
