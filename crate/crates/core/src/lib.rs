//! A message-passing runtime with two API surfaces.
//!
//! The idiomatic surface ([`Universe`], [`Communicator`], [`Request`]) returns
//! values and structured [`MpError`]s, counts in 64 bits and ties object
//! lifetimes to scopes. The [`legacy`] surface is a flat, code-returning
//! binding implemented on top of it.
//!
//! ```
//! use mmp_core::{run_in_process, ANY_SOURCE};
//!
//! let sums = run_in_process(2, |u| {
//!     let world = u.world();
//!     if u.rank() == 0 {
//!         world.send(&[1i32, 2, 3], 1, 7).unwrap();
//!         0
//!     } else {
//!         let mut buf = [0i32; 3];
//!         let st = world.recv(&mut buf, ANY_SOURCE, 7).unwrap();
//!         assert_eq!(st.count, 3);
//!         buf.iter().sum()
//!     }
//! });
//! assert_eq!(sums, vec![0, 6]);
//! ```

mod collectives;
mod comm;
mod datatype;
mod error;
mod fault;
pub mod frame;
pub mod legacy;
pub mod matching;
mod request;
mod runtime;
pub mod transport;

pub use collectives::{Reducible, ReductionOp};
pub use comm::{run_in_process, run_in_process_with, Communicator, Config, Group, Mode, Universe};
pub use datatype::{datatype_of, DatatypeDescriptor, DatatypeKind, Element};
pub use error::{ErrorClass, MpError, Result};
pub use fault::{ApiOp, Fault, FaultInjector};
pub use frame::{ContextId, EnvelopeHeader, MessageEnvelope};
pub use matching::{MatchStats, Rank, RequestId, Source, Tag, TagSelector, ANY_SOURCE, ANY_TAG, TAG_UB};
pub use request::{wait_all, Request, RequestKind, RequestRef, RequestState, Status};
pub use runtime::{OutgoingMessage, SendTap, TapAction};
pub use transport::{LocalEndpoint, TcpConfig};
