//! Numerical laboratory for oscillatory integral operators with
//! 1-homogeneous phase functions.
//!
//! The crate builds the extension-type operators
//! `T f(x) = integral of exp(i phi^lambda(x; w)) a^lambda(x; w) f(w) dw`
//! over frequency sectors, and instruments the geometry behind their
//! `L^p` mapping properties: curvature and normal-form conditions on the
//! phase, wave-packet decompositions and their tube geometry, polynomial
//! partitioning of mass, broad norms over lower-dimensional obstructions,
//! parabolic rescaling of flat sectors, and a tube-compression experiment
//! in which translated wave packets concentrate near a low-degree variety.
//!
//! Start from [`phase::PhaseField`] for the phase families, `oscquad` for
//! direct quadrature of the operator, and the `examples/` directory for
//! runnable end-to-end studies.

pub mod amplitude;
pub mod broadnorm;
pub mod bump;
pub mod error;
pub mod field;
pub mod mesh;
pub mod oscquad;
pub mod partition;
pub mod phase;
pub mod poly;
pub mod subspace;
pub mod transverse;
pub mod wavepacket;

pub use error::{OscError, Result};
