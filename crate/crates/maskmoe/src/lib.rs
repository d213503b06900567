//! Desk-scale mixture-of-experts language-modeling laboratory.
//!
//! The crate trains small decoder-only transformers whose feed-forward
//! sublayers can be swapped between a dense FFN and several
//! mixture-of-experts variants:
//!
//! * `smoe` - learned softmax router, top-k dispatch
//! * `hash` - fixed random token-to-expert assignment
//! * `share_moe` - learned router plus an always-on shared expert
//! * `maskmoe` - learned router with per-token visibility masks that
//!   restrict frequent tokens to `V_a` experts and infrequent tokens to
//!   `V_b` experts, fixed before training
//!
//! Everything runs on a single CPU core with a small tape-based autograd
//! engine ([`autograd`]), deterministic seeded RNG streams ([`rng`]), and
//! plain-file artifacts (vocab, frequency tables, mask tables, metrics,
//! routing logs, checkpoints) so experiments are reproducible end to end.
//!
//! Entry points: the runnable examples under `examples/` walk each
//! capability; the `maskmoe` bin wraps the same library calls in a small
//! subcommand CLI (see [`cli`]).

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod maskgen;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod rng;
pub mod routing;
pub mod textgen;
pub mod train;

pub use error::{Error, Result};
