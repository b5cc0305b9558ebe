//! Test support that is part of the public surface: the gradient oracle
//! used by both the unit suite and the acceptance gate, and a disk cache
//! for trained artifacts so expensive fixtures are built once per machine.

pub mod cache;
pub mod gradcheck;
