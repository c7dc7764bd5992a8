//! Checks shared by `mmp conformance` and the acceptance runner, each
//! parameterised by scale.

pub mod api;
pub mod collectives;
pub mod matching;
pub mod shim;
pub mod shim_oracle;
pub mod wire;
