//! Phased leader-based side consensus (accept / propose / acknowledge /
//! lock-release rounds), used by the conflict-attest and conflict-exclude
//! protocol variants to pick one representative among conflicting
//! transactions.
//!
//! Each phase has a round-robin leader and four fixed-length rounds; the
//! round length grows by a constant every phase, so rounds eventually exceed
//! any finite message delay. Locks carry an associated phase and a proof of
//! acceptability (the accept messages that justified them). A phase `-1` lock
//! models pre-existing DAG evidence: the holder saw a fault-tolerant-majority
//! score for the value before joining. Such a lock carries a sentinel proof
//! and is only released by a verifiable later-phase lock on another value —
//! which, when a fault-tolerant majority truly attested the value, can never
//! form.
//!
//! Messages are authenticated by construction: the simulator never lets a
//! validator forge another's sender tag, and proofs embed whole messages, so
//! they cannot be fabricated either.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::quorum::quorum_sizes_unchecked;
use crate::types::{ConflictIndex, TxHash, ValidatorId};
use crate::wire::{Reader, WireError, Writer};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DlsError {
    #[error("alternatives must be nonempty")]
    EmptyAlternatives,
    #[error("initial lock value is not among the alternatives")]
    LockNotAlternative,
    #[error("transaction index mismatch")]
    IndexMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DlsConfig {
    pub n: u32,
    pub f: u32,
    /// Length of each round in phase 0, in ticks.
    pub base_round: u64,
    /// Added to the round length every phase.
    pub phase_increment: u64,
}

impl DlsConfig {
    pub fn new(n: u32, f: u32) -> Self {
        DlsConfig {
            n,
            f,
            base_round: 4,
            phase_increment: 2,
        }
    }

    pub fn leader(&self, phase: u64) -> ValidatorId {
        ValidatorId((phase % self.n as u64) as u32)
    }

    pub fn round_len(&self, phase: u64) -> u64 {
        self.base_round + phase * self.phase_increment
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlsRound {
    Accept,
    Propose,
    Acknowledge,
    LockRelease,
}

impl DlsRound {
    fn next(self) -> (Self, bool) {
        match self {
            DlsRound::Accept => (DlsRound::Propose, false),
            DlsRound::Propose => (DlsRound::Acknowledge, false),
            DlsRound::Acknowledge => (DlsRound::LockRelease, false),
            DlsRound::LockRelease => (DlsRound::Accept, true),
        }
    }
}

/// Proof that a lock was acceptable when taken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LockProof {
    /// Sentinel for phase -1 locks; vouched for by the DAG evidence the
    /// caller verified before joining, not re-checked here.
    FtmObserved,
    /// The accept messages (sender, acceptable list) that named the value.
    Accepts(Vec<(ValidatorId, Vec<TxHash>)>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DlsLock {
    pub value: TxHash,
    pub phase: i64,
    pub proof: LockProof,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DlsBody {
    Accept {
        acceptable: Vec<TxHash>,
    },
    Lock {
        value: TxHash,
        proof: Vec<(ValidatorId, Vec<TxHash>)>,
    },
    Ack {
        value: TxHash,
    },
    LockEvidence {
        locks: Vec<(TxHash, u64, Vec<(ValidatorId, Vec<TxHash>)>)>,
    },
    Decide {
        value: TxHash,
        acks: Vec<ValidatorId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DlsMessage {
    pub from: ValidatorId,
    pub index: ConflictIndex,
    pub phase: u64,
    pub body: DlsBody,
}

/// An outgoing message: `to = None` broadcasts to all validators (including
/// a loop-back to the sender, which the owning machine handles inline).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DlsOut {
    pub to: Option<ValidatorId>,
    pub msg: DlsMessage,
}

#[derive(Debug, Clone)]
pub struct DlsState {
    cfg: DlsConfig,
    me: ValidatorId,
    index: ConflictIndex,
    alternatives: BTreeSet<TxHash>,
    locks: BTreeMap<TxHash, (i64, LockProof)>,
    phase: u64,
    round: DlsRound,
    round_started_at: u64,
    decided: Option<(TxHash, u64)>,
    /// accept messages seen, keyed by (phase, sender)
    accepts: BTreeMap<(u64, u32), BTreeSet<TxHash>>,
    /// acks I collected as leader, keyed by (phase, value)
    acks: BTreeMap<(u64, TxHash), BTreeSet<u32>>,
    /// what I proposed as leader, per phase
    proposed: BTreeMap<u64, TxHash>,
    /// locks installed from lock messages of the current phase, to be acked
    taken_this_phase: Vec<(TxHash, u64)>,
    /// malformed or unverifiable messages dropped
    pub dropped: u64,
}

impl DlsState {
    /// Joins the side consensus for `index`. With `initial_lock` set, the
    /// state starts with a phase -1 lock on that value (altered initial
    /// conditions driven by DAG evidence).
    pub fn new(
        cfg: DlsConfig,
        me: ValidatorId,
        index: ConflictIndex,
        alternatives: BTreeSet<TxHash>,
        initial_lock: Option<TxHash>,
        now: u64,
    ) -> Result<(Self, Vec<DlsOut>), DlsError> {
        if alternatives.is_empty() {
            return Err(DlsError::EmptyAlternatives);
        }
        if let Some(v) = initial_lock {
            if !alternatives.contains(&v) {
                return Err(DlsError::LockNotAlternative);
            }
        }
        let mut locks = BTreeMap::new();
        if let Some(v) = initial_lock {
            locks.insert(v, (-1, LockProof::FtmObserved));
        }
        let mut st = DlsState {
            cfg,
            me,
            index,
            alternatives,
            locks,
            phase: 0,
            round: DlsRound::Accept,
            round_started_at: now,
            decided: None,
            accepts: BTreeMap::new(),
            acks: BTreeMap::new(),
            proposed: BTreeMap::new(),
            taken_this_phase: Vec::new(),
            dropped: 0,
        };
        let out = st.enter_round();
        Ok((st, out))
    }

    pub fn index(&self) -> &ConflictIndex {
        &self.index
    }

    pub fn decided(&self) -> Option<(TxHash, u64)> {
        self.decided
    }

    pub fn phase(&self) -> u64 {
        self.phase
    }

    pub fn round(&self) -> DlsRound {
        self.round
    }

    pub fn locks(&self) -> impl Iterator<Item = DlsLock> + '_ {
        self.locks.iter().map(|(v, (p, proof))| DlsLock {
            value: *v,
            phase: *p,
            proof: proof.clone(),
        })
    }

    /// With one lock only that value is acceptable; with several, nothing
    /// is; with none, every known alternative.
    pub fn acceptable(&self) -> BTreeSet<TxHash> {
        match self.locks.len() {
            0 => self.alternatives.clone(),
            1 => self.locks.keys().copied().collect(),
            _ => BTreeSet::new(),
        }
    }

    /// Grows the alternative set; the acceptable set follows the lock rules.
    pub fn add_alternative(&mut self, index: &ConflictIndex, tx: TxHash) -> Result<(), DlsError> {
        if index != &self.index {
            return Err(DlsError::IndexMismatch);
        }
        self.alternatives.insert(tx);
        Ok(())
    }

    /// When the next round boundary falls.
    pub fn next_boundary(&self) -> u64 {
        self.round_started_at + self.cfg.round_len(self.phase)
    }

    /// Advances through every round boundary up to `now`, emitting each
    /// round's starting messages.
    pub fn tick(&mut self, now: u64) -> Vec<DlsOut> {
        let mut out = Vec::new();
        while self.next_boundary() <= now {
            let boundary = self.next_boundary();
            let (next, wraps) = self.round.next();
            self.round = next;
            self.round_started_at = boundary;
            if wraps {
                self.phase += 1;
                self.taken_this_phase.clear();
            }
            out.extend(self.enter_round());
        }
        out
    }

    fn enter_round(&mut self) -> Vec<DlsOut> {
        let mut out = Vec::new();
        match self.round {
            DlsRound::Accept => {
                let acceptable: Vec<TxHash> = self.acceptable().into_iter().collect();
                out.push(DlsOut {
                    to: Some(self.cfg.leader(self.phase)),
                    msg: DlsMessage {
                        from: self.me,
                        index: self.index.clone(),
                        phase: self.phase,
                        body: DlsBody::Accept { acceptable },
                    },
                });
            }
            DlsRound::Propose => {
                if self.cfg.leader(self.phase) == self.me {
                    out.extend(self.propose());
                }
            }
            DlsRound::Acknowledge => {
                let phase = self.phase;
                let leader = self.cfg.leader(phase);
                let to_ack: Vec<TxHash> = self
                    .taken_this_phase
                    .iter()
                    .filter(|(_, p)| *p == phase)
                    .map(|(v, _)| *v)
                    .collect();
                for value in to_ack {
                    out.push(DlsOut {
                        to: Some(leader),
                        msg: DlsMessage {
                            from: self.me,
                            index: self.index.clone(),
                            phase,
                            body: DlsBody::Ack { value },
                        },
                    });
                }
            }
            DlsRound::LockRelease => {
                // Broadcast the lock messages behind every verifiable lock
                // held; phase -1 sentinels stay local.
                let locks: Vec<_> = self
                    .locks
                    .iter()
                    .filter_map(|(v, (p, proof))| match proof {
                        LockProof::Accepts(acc) if *p >= 0 => Some((*v, *p as u64, acc.clone())),
                        _ => None,
                    })
                    .collect();
                if !locks.is_empty() {
                    out.push(DlsOut {
                        to: None,
                        msg: DlsMessage {
                            from: self.me,
                            index: self.index.clone(),
                            phase: self.phase,
                            body: DlsBody::LockEvidence { locks },
                        },
                    });
                }
            }
        }
        out
    }

    /// Leader proposal: a value is proposable when `N - f` distinct accept
    /// messages of this phase name it; ties break toward the lowest hash.
    fn propose(&mut self) -> Vec<DlsOut> {
        let phase = self.phase;
        let need = (self.cfg.n - self.cfg.f) as usize;
        let mut backers: BTreeMap<TxHash, Vec<(ValidatorId, Vec<TxHash>)>> = BTreeMap::new();
        for ((p, sender), acceptable) in &self.accepts {
            if *p != phase {
                continue;
            }
            for v in acceptable {
                backers
                    .entry(*v)
                    .or_default()
                    .push((ValidatorId(*sender), acceptable.iter().copied().collect()));
            }
        }
        // BTreeMap iterates lowest hash first
        let candidate = backers
            .into_iter()
            .find(|(_, senders)| senders.len() >= need);
        let Some((value, proof)) = candidate else {
            return Vec::new(); // refrains from sending a lock message
        };
        self.proposed.insert(phase, value);
        vec![DlsOut {
            to: None,
            msg: DlsMessage {
                from: self.me,
                index: self.index.clone(),
                phase,
                body: DlsBody::Lock { value, proof },
            },
        }]
    }

    fn verify_lock_proof(&self, value: &TxHash, proof: &[(ValidatorId, Vec<TxHash>)]) -> bool {
        let mut senders = BTreeSet::new();
        for (sender, acceptable) in proof {
            if !acceptable.contains(value) {
                return false;
            }
            senders.insert(sender.0);
        }
        senders.len() >= (self.cfg.n - self.cfg.f) as usize
    }

    /// Handles one authenticated message. Returns follow-up messages (a
    /// leader reaching a decision broadcasts it with its ack proof).
    pub fn receive(&mut self, msg: DlsMessage, _now: u64) -> Vec<DlsOut> {
        if msg.index != self.index {
            self.dropped += 1;
            return Vec::new();
        }
        match msg.body {
            DlsBody::Accept { acceptable } => {
                self.accepts
                    .entry((msg.phase, msg.from.0))
                    .or_insert_with(|| acceptable.into_iter().collect());
                Vec::new()
            }
            DlsBody::Lock { value, proof } => {
                if msg.from != self.cfg.leader(msg.phase) || !self.verify_lock_proof(&value, &proof)
                {
                    self.dropped += 1;
                    return Vec::new();
                }
                let phase = msg.phase as i64;
                let install = match self.locks.get(&value) {
                    // releases the earlier lock on the same value only
                    Some((held, _)) => *held < phase,
                    None => true,
                };
                if install {
                    self.locks.insert(value, (phase, LockProof::Accepts(proof)));
                    self.alternatives.insert(value);
                }
                if msg.phase == self.phase {
                    self.taken_this_phase.push((value, msg.phase));
                }
                Vec::new()
            }
            DlsBody::Ack { value } => {
                if self.cfg.leader(msg.phase) != self.me
                    || self.proposed.get(&msg.phase) != Some(&value)
                {
                    self.dropped += 1;
                    return Vec::new();
                }
                let entry = self.acks.entry((msg.phase, value)).or_default();
                entry.insert(msg.from.0);
                let nfm = quorum_sizes_unchecked(self.cfg.n, self.cfg.f).nfm as usize;
                if entry.len() >= nfm && self.decided.is_none() {
                    self.decided = Some((value, msg.phase));
                    let acks = entry.iter().map(|&v| ValidatorId(v)).collect();
                    return vec![DlsOut {
                        to: None,
                        msg: DlsMessage {
                            from: self.me,
                            index: self.index.clone(),
                            phase: msg.phase,
                            body: DlsBody::Decide { value, acks },
                        },
                    }];
                }
                Vec::new()
            }
            DlsBody::LockEvidence { locks } => {
                for (w, evidenced_phase, proof) in locks {
                    if !self.verify_lock_proof(&w, &proof) {
                        self.dropped += 1;
                        continue;
                    }
                    let kp = evidenced_phase as i64;
                    // holding (v, k) with v != w and k' >= k releases v
                    let released: Vec<TxHash> = self
                        .locks
                        .iter()
                        .filter(|(v, (k, _))| **v != w && kp >= *k)
                        .map(|(v, _)| *v)
                        .collect();
                    for v in released {
                        self.locks.remove(&v);
                    }
                }
                Vec::new()
            }
            DlsBody::Decide { value, acks } => {
                let distinct: BTreeSet<u32> = acks.iter().map(|v| v.0).collect();
                let nfm = quorum_sizes_unchecked(self.cfg.n, self.cfg.f).nfm as usize;
                if msg.from != self.cfg.leader(msg.phase) || distinct.len() < nfm {
                    self.dropped += 1;
                    return Vec::new();
                }
                if self.decided.is_none() {
                    self.decided = Some((value, msg.phase));
                }
                Vec::new()
            }
        }
    }
}

pub fn encode_dls(msg: &DlsMessage) -> Vec<u8> {
    fn put_proof(w: &mut Writer, proof: &[(ValidatorId, Vec<TxHash>)]) {
        w.put_u32(proof.len() as u32);
        for (s, list) in proof {
            w.put_u32(s.0);
            w.put_u32(list.len() as u32);
            for t in list {
                w.put_hash(t.as_bytes());
            }
        }
    }
    let mut w = Writer::new();
    w.put_u32(msg.from.0);
    w.put_bytes(msg.index.as_str().as_bytes());
    w.put_u64(msg.phase);
    match &msg.body {
        DlsBody::Accept { acceptable } => {
            w.put_u8(0);
            w.put_u32(acceptable.len() as u32);
            for t in acceptable {
                w.put_hash(t.as_bytes());
            }
        }
        DlsBody::Lock { value, proof } => {
            w.put_u8(1);
            w.put_hash(value.as_bytes());
            put_proof(&mut w, proof);
        }
        DlsBody::Ack { value } => {
            w.put_u8(2);
            w.put_hash(value.as_bytes());
        }
        DlsBody::LockEvidence { locks } => {
            w.put_u8(3);
            w.put_u32(locks.len() as u32);
            for (v, p, proof) in locks {
                w.put_hash(v.as_bytes());
                w.put_u64(*p);
                put_proof(&mut w, proof);
            }
        }
        DlsBody::Decide { value, acks } => {
            w.put_u8(4);
            w.put_hash(value.as_bytes());
            w.put_u32(acks.len() as u32);
            for a in acks {
                w.put_u32(a.0);
            }
        }
    }
    w.finish()
}

pub fn decode_dls(buf: &[u8]) -> Result<DlsMessage, WireError> {
    fn get_proof(r: &mut Reader) -> Result<Vec<(ValidatorId, Vec<TxHash>)>, WireError> {
        let n = r.get_u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let s = ValidatorId(r.get_u32()?);
            let m = r.get_u32()? as usize;
            let mut list = Vec::with_capacity(m);
            for _ in 0..m {
                list.push(TxHash(r.get_hash()?));
            }
            out.push((s, list));
        }
        Ok(out)
    }
    let mut r = Reader::new(buf);
    let from = ValidatorId(r.get_u32()?);
    let raw = r.get_bytes()?;
    let index =
        ConflictIndex(String::from_utf8(raw).map_err(|_| WireError::Malformed("index utf8"))?);
    let phase = r.get_u64()?;
    let body = match r.get_u8()? {
        0 => {
            let n = r.get_u32()? as usize;
            let mut acceptable = Vec::with_capacity(n);
            for _ in 0..n {
                acceptable.push(TxHash(r.get_hash()?));
            }
            DlsBody::Accept { acceptable }
        }
        1 => {
            let value = TxHash(r.get_hash()?);
            let proof = get_proof(&mut r)?;
            DlsBody::Lock { value, proof }
        }
        2 => DlsBody::Ack {
            value: TxHash(r.get_hash()?),
        },
        3 => {
            let n = r.get_u32()? as usize;
            let mut locks = Vec::with_capacity(n);
            for _ in 0..n {
                let v = TxHash(r.get_hash()?);
                let p = r.get_u64()?;
                let proof = get_proof(&mut r)?;
                locks.push((v, p, proof));
            }
            DlsBody::LockEvidence { locks }
        }
        4 => {
            let value = TxHash(r.get_hash()?);
            let n = r.get_u32()? as usize;
            let mut acks = Vec::with_capacity(n);
            for _ in 0..n {
                acks.push(ValidatorId(r.get_u32()?));
            }
            DlsBody::Decide { value, acks }
        }
        _ => return Err(WireError::Malformed("dls body tag")),
    };
    r.finish()?;
    Ok(DlsMessage {
        from,
        index,
        phase,
        body,
    })
}
