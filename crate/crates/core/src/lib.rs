pub mod coupling;
pub mod criticality;
pub mod dist;
pub mod error;
pub mod evolution;
pub mod free_energy;
pub mod mass;
pub mod numeric;
pub mod regularity;
pub mod rng;
pub mod tree_mc;

pub use dist::{Arity, Dist, LatticeDist, SystemSpec};
pub use error::{DrError, Result};
pub use mass::{Backend, Mass};
