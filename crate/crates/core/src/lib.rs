pub mod adversary;
pub mod device;
pub mod isa;
pub mod rng;
pub mod sake;
pub mod verifier;
pub mod vf;
