//! Intra-spectrum (neighborhood) and inter-spectrum (cross-deformable) attention.

pub mod deformable;
pub mod neighborhood;

pub use deformable::{cda_forward, offset_net, reference_grid, CDAConfig, ReferenceGrid};
pub use neighborhood::{na_forward, neighborhood, NAConfig};
