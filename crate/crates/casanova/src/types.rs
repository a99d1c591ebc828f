//! Core domain types: validators, conflict indices, transactions, votes and blocks.
//!
//! All content-addressed types compute their hash from the canonical binary
//! encoding in [`crate::wire`], so hashes are stable across platforms and runs.

use std::collections::BTreeSet;
use std::fmt;

use crate::wire;

/// Sentinel creator id reserved for the genesis block.
pub const GENESIS_CREATOR: u32 = u32::MAX;

/// Index of a validator, in `[0, N)` for a scenario with `N` validators.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ValidatorId(pub u32);

impl ValidatorId {
    pub fn genesis() -> Self {
        ValidatorId(GENESIS_CREATOR)
    }

    pub fn is_genesis(self) -> bool {
        self.0 == GENESIS_CREATOR
    }
}

impl fmt::Display for ValidatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_genesis() {
            write!(f, "g")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl fmt::Debug for ValidatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{self}")
    }
}

/// The partition class of a transaction. Two transactions conflict iff they
/// carry the same index.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ConflictIndex(pub String);

impl ConflictIndex {
    pub fn new(s: impl Into<String>) -> Self {
        ConflictIndex(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConflictIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ConflictIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i:{}", self.0)
    }
}

impl From<&str> for ConflictIndex {
    fn from(s: &str) -> Self {
        ConflictIndex(s.to_string())
    }
}

macro_rules! hash_newtype {
    ($name:ident, $prefix:literal) => {
        /// 32-byte content hash.
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; 32]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; 32] {
                &self.0
            }

            /// Short hex form used in traces and DOT labels.
            pub fn short(&self) -> String {
                hex::encode(&self.0[..6])
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Option<Self> {
                let raw = hex::decode(s).ok()?;
                let arr: [u8; 32] = raw.try_into().ok()?;
                Some($name(arr))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, ":{}"), self.short())
            }
        }

        impl serde::Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> serde::Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                $name::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad hash hex"))
            }
        }
    };
}

hash_newtype!(TxHash, "tx");
hash_newtype!(BlockHash, "blk");

/// An opaque event submitted by a client, tagged with its conflict index and
/// the transaction hashes it requires to be recorded first.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Transaction {
    payload: Vec<u8>,
    index: ConflictIndex,
    requested_parents: BTreeSet<TxHash>,
    hash: TxHash,
}

impl Transaction {
    pub fn new(
        payload: impl Into<Vec<u8>>,
        index: ConflictIndex,
        requested_parents: BTreeSet<TxHash>,
    ) -> Self {
        let payload = payload.into();
        let hash = wire::transaction_hash(&payload, &index, &requested_parents);
        Transaction {
            payload,
            index,
            requested_parents,
            hash,
        }
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn index(&self) -> &ConflictIndex {
        &self.index
    }

    pub fn requested_parents(&self) -> &BTreeSet<TxHash> {
        &self.requested_parents
    }

    pub fn hash(&self) -> TxHash {
        self.hash
    }
}

/// A round-tagged vote for one alternative of a conflict index.
///
/// `lock_evidence`, when present, names the earlier round in which the voter
/// observed a fault-tolerant-majority score for the choice; `-1` refers to the
/// pre-conflict state.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Vote {
    pub index: ConflictIndex,
    pub choice: TxHash,
    pub round: u32,
    pub lock_evidence: Option<i64>,
}

impl Vote {
    pub fn new(index: ConflictIndex, choice: TxHash, round: u32, lock_evidence: Option<i64>) -> Self {
        debug_assert!(lock_evidence.map_or(true, |p| p < round as i64));
        Vote {
            index,
            choice,
            round,
            lock_evidence,
        }
    }
}

/// A DAG node: creator-attributed, referencing one or more parents, carrying
/// transactions, votes and conflict markers.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Block {
    creator: ValidatorId,
    seq: u64,
    parents: BTreeSet<BlockHash>,
    transactions: Vec<Transaction>,
    votes: Vec<Vote>,
    conflict_attestations: Vec<(ConflictIndex, i64)>,
    hash: BlockHash,
}

impl Block {
    pub fn new(
        creator: ValidatorId,
        seq: u64,
        parents: BTreeSet<BlockHash>,
        transactions: Vec<Transaction>,
        votes: Vec<Vote>,
        conflict_attestations: Vec<(ConflictIndex, i64)>,
    ) -> Self {
        let mut b = Block {
            creator,
            seq,
            parents,
            transactions,
            votes,
            conflict_attestations,
            hash: BlockHash([0; 32]),
        };
        b.hash = wire::block_hash(&b);
        b
    }

    /// The unique parentless block every scenario starts from. It carries no
    /// transactions or votes and is scored as created by all validators.
    pub fn genesis() -> Self {
        Block::new(
            ValidatorId::genesis(),
            0,
            BTreeSet::new(),
            Vec::new(),
            Vec::new(),
            Vec::new(),
        )
    }

    pub fn is_genesis(&self) -> bool {
        self.creator.is_genesis() && self.parents.is_empty()
    }

    pub fn creator(&self) -> ValidatorId {
        self.creator
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn parents(&self) -> &BTreeSet<BlockHash> {
        &self.parents
    }

    pub fn transactions(&self) -> &[Transaction] {
        &self.transactions
    }

    pub fn votes(&self) -> &[Vote] {
        &self.votes
    }

    pub fn conflict_attestations(&self) -> &[(ConflictIndex, i64)] {
        &self.conflict_attestations
    }

    pub fn hash(&self) -> BlockHash {
        self.hash
    }

    /// True if this block marks its creator's conflict awareness for `i`:
    /// it carries a vote or a conflict attestation for that index.
    pub fn marks_conflict(&self, i: &ConflictIndex) -> bool {
        self.votes.iter().any(|v| &v.index == i)
            || self.conflict_attestations.iter().any(|(ci, _)| ci == i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tx_hash_is_content_derived() {
        let a = Transaction::new(b"pay".to_vec(), "acct-1".into(), BTreeSet::new());
        let b = Transaction::new(b"pay".to_vec(), "acct-1".into(), BTreeSet::new());
        let c = Transaction::new(b"pay".to_vec(), "acct-2".into(), BTreeSet::new());
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn genesis_is_fixed() {
        let g1 = Block::genesis();
        let g2 = Block::genesis();
        assert!(g1.is_genesis());
        assert_eq!(g1.hash(), g2.hash());
        assert!(g1.parents().is_empty());
        assert!(g1.transactions().is_empty());
        assert!(g1.votes().is_empty());
    }

    #[test]
    fn block_hash_covers_all_fields() {
        let g = Block::genesis();
        let parents: BTreeSet<_> = [g.hash()].into_iter().collect();
        let tx = Transaction::new(b"x".to_vec(), "i".into(), BTreeSet::new());
        let b1 = Block::new(ValidatorId(0), 0, parents.clone(), vec![tx.clone()], vec![], vec![]);
        let b2 = Block::new(ValidatorId(1), 0, parents.clone(), vec![tx.clone()], vec![], vec![]);
        let b3 = Block::new(ValidatorId(0), 1, parents.clone(), vec![tx.clone()], vec![], vec![]);
        let b4 = Block::new(ValidatorId(0), 0, parents.clone(), vec![], vec![], vec![]);
        let v = Vote::new("i".into(), tx.hash(), 0, None);
        let b5 = Block::new(ValidatorId(0), 0, parents, vec![tx], vec![v], vec![]);
        let hashes = [b1.hash(), b2.hash(), b3.hash(), b4.hash(), b5.hash()];
        for (i, a) in hashes.iter().enumerate() {
            for b in &hashes[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }
}
