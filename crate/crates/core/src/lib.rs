//! Proof-of-authentication certificate authority.
//!
//! An OIDC-driven CA that embeds, instead of the requester's bearer token, a
//! Guillou-Quisquater proof of knowledge of the token's RS256 signature. The
//! identity provider's historical verification keys are kept in a
//! witness-cosigned transparency log so certificates stay verifiable after
//! key rotation.

pub mod bench;
pub mod bigint;
pub mod ca;
pub mod cert;
pub mod ct;
pub mod games;
pub mod gq;
pub mod hexser;
pub mod idp;
pub mod jose;
pub mod keys;
pub mod ledger;
pub mod merkle;
pub mod service;
pub mod sim;
pub mod verifier;
