//! Source network, DRN modules, the student assembly and checkpoints.

mod checkpoint;
mod drn;
mod params;
mod source;
mod student;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use drn::{drn_forward, drn_identity, DRN_EPS, FUSION_KERNEL};
pub use params::{Bound, ParamSet};
pub use source::{ForwardOut, SourceNet, TapHook, TapPoint, SOURCE_ARCH};
pub use student::{StudentBinding, StudentNet, STUDENT_ARCH};
