//! OTS payment channels: a two-party channel whose old states are revoked by
//! one-time signatures over increasing sequence numbers, executed against a
//! simulated UTXO chain with a small script interpreter.

pub mod analysis;
pub mod chain;
pub mod channel;
pub mod crypto;
pub mod encoding;
pub mod harness;
pub mod htlc;
pub mod script;
pub mod txgraph;
pub mod watchtower;
