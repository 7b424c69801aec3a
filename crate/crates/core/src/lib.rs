//! Self-supervised refinement of masked-image-modeling encoders with
//! nearest-neighbor alignment heads attached to intermediate blocks.

pub mod data;
pub mod encoder;
pub mod gradcheck;
pub mod harness;
pub mod heads;
pub mod layers;
pub mod nna;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod queue;
pub mod probe;
pub mod trainer;
pub mod views;
pub mod cluster;
