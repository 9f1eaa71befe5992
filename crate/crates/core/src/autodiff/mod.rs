//! Reverse-mode differentiation over vector-valued primitives.

mod gradcheck;
mod tape;

pub use gradcheck::{evaluate, finite_difference_check, forward_and_backward, relative_error, GradCheck, Program};
pub use tape::{CompositeLayout, Fault, Gradients, Tape, Var, REGISTERED_PRIMITIVES};

pub(crate) use tape::upsample_forward;
