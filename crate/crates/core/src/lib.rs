//! Privacy-preserving fraud scoring: encrypted boosted trees and an encrypted
//! one-hidden-layer network, served through a three-party protocol.

pub mod ckks;
pub mod data;
pub mod gbdt;
pub mod harness;
pub mod he_gbdt;
pub mod nn;
pub mod ope;
pub mod paillier;
pub mod protocol;
