//! Leaderless DAG-based Byzantine-fault-tolerant consensus protocols, with a
//! deterministic discrete-event simulation harness, adversarial network
//! models, post-hoc trace checkers and an exhaustive interleaving explorer.
//!
//! The protocol family grows in four steps: `attest` (pure attestation),
//! `conflict-attest` (a leader-based side consensus resolves conflicting
//! transactions), `conflict-exclude` (DAG evidence short-circuits the side
//! protocol), and `casanova` (voting rounds embedded in block production
//! replace the side protocol entirely).

pub mod checker;
pub mod dag;
pub mod dls;
pub mod explore;
pub mod protocol;
pub mod quorum;
pub mod scoring;
pub mod sim;
pub mod types;
pub mod wire;

#[cfg(test)]
pub(crate) mod testutil;

pub use dag::{ActiveSet, Dag, DagError, InsertOutcome, InvalidReason};
pub use quorum::{alternatives_bound, quorum_sizes, round_start_offset, QuorumSizes};
pub use scoring::{find_k_observed_set, score, transaction_score, viewscore, RoundFilter, VoterSet, Weights};
pub use types::{Block, BlockHash, ConflictIndex, Transaction, TxHash, ValidatorId, Vote};
