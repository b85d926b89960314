//! Invertible transformations: coupling layers, planar flows, and the
//! branched transport model built from them.

mod bnf;
mod coupling;
mod planar;

pub use bnf::{hash_coordinates, BnfArchitecture, BnfModel, BnfVariant, YBranch, SOURCE_NOISE_SPACING};
pub use coupling::{CouplingLayer, CouplingScratch, CouplingTape, FlowStack, StackTape};
pub use planar::{PlanarFlow1D, PlanarTape, PlanarUnit};
