//! Dense arrays, reverse-mode differentiation, optimizers and schedules.

mod array;
pub mod init;
pub mod optim;
pub mod schedule;
pub mod tape;

pub use array::DenseArray;
pub use optim::{AdamW, AdamWConfig, SgdMomentum};
pub use schedule::{lr_at, ScheduleConfig};
pub use tape::{Gradients, Tape, Var};
