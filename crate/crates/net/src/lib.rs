//! HTTP/JSON transport for the identity provider, JWK ledger, witnesses,
//! CT log and CA. Servers are axum routers over the in-process services;
//! clients are blocking and implement the same service traits, so the CA and
//! verifier run unchanged over the network.

pub mod client;
pub mod server;
pub mod wire;
