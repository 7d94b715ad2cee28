//! Dense arrays with reverse-mode differentiation, parameters, Adam and VTF1 I/O.

mod array;
mod optim;
mod params;
mod tape;
mod var;
pub mod vtf;

pub use array::{Array, Scalar};
pub use optim::{clip_grad_norm, Adam, LrSchedule};
pub use params::{read_manifest, write_manifest, Param, ParamId, ParamStore};
pub use tape::Tape;
pub use var::{Conv2dSpec, Var};
pub use vtf::{read_vtf, write_vtf, IntArray, VtfTensor};
