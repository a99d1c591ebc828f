//! The four validator state machines behind one event-handler interface:
//! receive-block, receive-event (client transaction), time-expire (block
//! production) and side-consensus-achieved, plus the formal `decide`
//! function.
//!
//! * `attest` records events in the DAG; conflicts are outside its contract.
//! * `conflict-attest` resolves every conflict through the side consensus.
//! * `conflict-exclude` first looks for a fault-tolerant-majority observed
//!   set in the DAG; only when that evidence is absent does it join the side
//!   consensus (with a phase -1 lock when one alternative already carries an
//!   FTM score).
//! * `casanova` replaces the side protocol with voting rounds embedded in
//!   block production.
//!
//! Machines are single-threaded event loops: every handler is a pure
//! transition from (state, event) to (state, effects); all cross-validator
//! interaction flows through the returned effects.

mod conflict;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

pub use conflict::{ConflictState, LockView};

use crate::dag::{Dag, InsertOutcome, InvalidReason};
use crate::dls::{DlsConfig, DlsMessage, DlsOut, DlsState};
use crate::quorum::{alternatives_bound, quorum_sizes_unchecked};
use crate::scoring::{find_k_observed, own_score, Basis, VoterSet, Weights};
use crate::types::{Block, BlockHash, ConflictIndex, Transaction, TxHash, ValidatorId, Vote};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolVariant {
    Attest,
    ConflictAttest,
    ConflictExclude,
    Casanova,
}

impl ProtocolVariant {
    pub fn uses_side_consensus(self) -> bool {
        matches!(
            self,
            ProtocolVariant::ConflictAttest | ProtocolVariant::ConflictExclude
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("conflict index {0} is not in progress")]
    NotInProgress(ConflictIndex),
    #[error("resolution transaction does not belong to index {0}")]
    ResolutionIndexMismatch(ConflictIndex),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineParams {
    pub n: u32,
    pub f: u32,
    pub variant: ProtocolVariant,
    pub dls: DlsConfig,
    /// Scales the round schedule: round r starts `round_unit * r(r+3)/2`
    /// own blocks after round 0.
    pub round_unit: u64,
    pub weights: Weights,
}

impl MachineParams {
    pub fn new(n: u32, f: u32, variant: ProtocolVariant) -> Self {
        MachineParams {
            n,
            f,
            variant,
            dls: DlsConfig::new(n, f),
            round_unit: 1,
            weights: Weights::unit(n),
        }
    }

    pub fn ftm(&self) -> u64 {
        quorum_sizes_unchecked(self.n, self.f).ftm as u64
    }
}

/// How a decision was reached.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum DecisionPath {
    /// Sole recorded alternative (attest variant).
    Attestation,
    /// A fault-tolerant-majority observed set in the DAG.
    ObservedSet,
    /// The side consensus protocol completed.
    SideProtocol,
    /// A round-r FTM-observed voting quorum (casanova).
    VoteRound,
}

/// A decision transition, reported once per index when the machine first
/// resolves it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionEvent {
    pub index: ConflictIndex,
    pub value: TxHash,
    pub round: i64,
    pub path: DecisionPath,
    /// Alternatives known before the triggering event.
    pub prior_alternatives: BTreeSet<TxHash>,
    /// Alternatives first seen during the triggering event.
    pub new_alternatives: BTreeSet<TxHash>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    InvalidBlock(InvalidReason),
    AlternativesBoundExceeded,
}

/// Effects a handler asks the surrounding harness to carry out.
#[derive(Debug, Clone)]
pub enum Effect {
    /// Send a side-consensus message (already looped back locally when it
    /// addressed this machine).
    DlsSend(DlsOut),
    /// Wake the side consensus instance for `index` at tick `at`.
    DlsSchedule { index: ConflictIndex, at: u64 },
    Decided(DecisionEvent),
    FaultRecorded { peer: ValidatorId, kind: FaultKind },
}

/// `decide`'s answer: a chosen representative or the currently known
/// alternatives (empty when no transaction of the index was seen).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Chosen { value: TxHash, round: i64 },
    Alternatives(BTreeSet<TxHash>),
}

impl Decision {
    pub fn chosen(&self) -> Option<(TxHash, i64)> {
        match self {
            Decision::Chosen { value, round } => Some((*value, *round)),
            Decision::Alternatives(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub value: TxHash,
    pub round: i64,
    pub path: DecisionPath,
}

/// One validator's deterministic event-loop state.
#[derive(Clone)]
pub struct ValidatorMachine {
    params: MachineParams,
    me: ValidatorId,
    dag: Dag,
    waiting: Vec<Transaction>,
    waiting_hashes: BTreeSet<TxHash>,
    /// Conflict indices with an open conflict (rounds or side consensus).
    inprogress: BTreeSet<ConflictIndex>,
    resolved: BTreeMap<ConflictIndex, Resolution>,
    conflicts: BTreeMap<ConflictIndex, ConflictState>,
    dls: BTreeMap<ConflictIndex, DlsState>,
    /// Conflicts discovered but not yet attested in an own block.
    unmarked_conflicts: BTreeSet<ConflictIndex>,
    /// Decisions not yet attested in an own block, with their round.
    unmarked_decisions: BTreeMap<ConflictIndex, i64>,
    /// Known-alternatives snapshot from the end of the previous handler,
    /// used to report decision transitions.
    alts_seen: BTreeMap<ConflictIndex, BTreeSet<TxHash>>,
    suspected: BTreeSet<ValidatorId>,
    next_seq: u64,
    clock: u64,
}

impl ValidatorMachine {
    pub fn new(me: ValidatorId, params: MachineParams) -> Self {
        let dag = Dag::new(params.n);
        ValidatorMachine {
            params,
            me,
            dag,
            waiting: Vec::new(),
            waiting_hashes: BTreeSet::new(),
            inprogress: BTreeSet::new(),
            resolved: BTreeMap::new(),
            conflicts: BTreeMap::new(),
            dls: BTreeMap::new(),
            unmarked_conflicts: BTreeSet::new(),
            unmarked_decisions: BTreeMap::new(),
            alts_seen: BTreeMap::new(),
            suspected: BTreeSet::new(),
            next_seq: 0,
            clock: 0,
        }
    }

    pub fn id(&self) -> ValidatorId {
        self.me
    }

    pub fn params(&self) -> &MachineParams {
        &self.params
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn waiting(&self) -> impl Iterator<Item = &Transaction> {
        self.waiting.iter()
    }

    pub fn inprogress(&self) -> &BTreeSet<ConflictIndex> {
        &self.inprogress
    }

    pub fn resolutions(&self) -> &BTreeMap<ConflictIndex, Resolution> {
        &self.resolved
    }

    pub fn conflict_state(&self, i: &ConflictIndex) -> Option<&ConflictState> {
        self.conflicts.get(i)
    }

    pub fn dls_state(&self, i: &ConflictIndex) -> Option<&DlsState> {
        self.dls.get(i)
    }

    pub fn suspected(&self) -> &BTreeSet<ValidatorId> {
        &self.suspected
    }

    fn tx_recorded(&self, h: &TxHash) -> bool {
        self.dag.transaction(h).is_some() || self.waiting_hashes.contains(h)
    }

    /// Possibly adds a client event to the waiting set: all requested
    /// parents must be recorded or waiting, and (in the conflict-aware
    /// variants) its index must not already be contested, resolved, or
    /// represented in the waiting set. Ignored requests are silent.
    pub fn handle_receive_event(&mut self, tx: Transaction, now: u64) {
        self.clock = now;
        if self.tx_recorded(&tx.hash()) {
            return;
        }
        if !tx.requested_parents().iter().all(|p| self.tx_recorded(p)) {
            return;
        }
        if self.params.variant != ProtocolVariant::Attest {
            let i = tx.index();
            if self.inprogress.contains(i) || self.resolved.contains_key(i) {
                return;
            }
            if self.waiting.iter().any(|w| w.index() == i) {
                return;
            }
        }
        self.waiting_hashes.insert(tx.hash());
        self.waiting.push(tx);
    }

    /// Possibly adds a peer's block (and any pending blocks it satisfies) to
    /// the DAG, discovering conflicts and re-evaluating decisions.
    pub fn handle_receive_block(&mut self, b: Block, now: u64) -> Vec<Effect> {
        self.clock = now;
        let creator = b.creator();
        let hash = b.hash();
        let mut effects = Vec::new();
        match self.dag.insert(b) {
            InsertOutcome::Invalid(reason) => {
                self.suspected.insert(creator);
                effects.push(Effect::FaultRecorded {
                    peer: creator,
                    kind: FaultKind::InvalidBlock(reason),
                });
                return effects;
            }
            InsertOutcome::Buffered | InsertOutcome::Duplicate => return effects,
            InsertOutcome::Inserted { satisfied, rejected } => {
                for (_, reason) in &rejected {
                    effects.push(Effect::FaultRecorded {
                        peer: creator,
                        kind: FaultKind::InvalidBlock(*reason),
                    });
                }
                let mut inserted = vec![hash];
                inserted.extend(satisfied);
                for h in inserted {
                    self.scan_inserted_block(&h, now, &mut effects);
                }
            }
        }
        self.run_decision_checks(&mut effects);
        self.snapshot_alternatives();
        effects
    }

    /// Creates the next block: parents are the current leaves, transactions
    /// the drained waiting set, votes those due at this block's round
    /// boundaries. The block is recorded locally and handed back for
    /// broadcast.
    pub fn handle_time_expire(&mut self, now: u64) -> (Block, Vec<Effect>) {
        let block = self.build_block(now);
        let effects = self.commit_own_block(block.clone(), now);
        (block, effects)
    }

    /// First half of block production: assembles the next block without
    /// recording it. Callers that transform outgoing blocks (fault
    /// injection) commit the transformed block instead.
    pub fn build_block(&mut self, now: u64) -> Block {
        self.clock = now;
        let seq = self.next_seq;
        self.next_seq += 1;

        let votes = if self.params.variant == ProtocolVariant::Casanova {
            self.compute_votes(seq)
        } else {
            Vec::new()
        };
        let mut attests: Vec<(ConflictIndex, i64)> = Vec::new();
        if self.params.variant.uses_side_consensus() {
            for i in std::mem::take(&mut self.unmarked_conflicts) {
                attests.push((i, 0));
            }
        }
        for (i, round) in std::mem::take(&mut self.unmarked_decisions) {
            attests.push((i, round));
        }

        let parents = self.dag.leaves().clone();
        let transactions = std::mem::take(&mut self.waiting);
        self.waiting_hashes.clear();
        Block::new(self.me, seq, parents, transactions, votes, attests)
    }

    /// Second half of block production: records an own block locally.
    pub fn commit_own_block(&mut self, block: Block, now: u64) -> Vec<Effect> {
        self.clock = now;
        let hash = block.hash();
        let mut effects = Vec::new();
        let outcome = self.dag.insert(block);
        debug_assert!(outcome.is_inserted(), "own block must insert cleanly");
        self.scan_inserted_block(&hash, now, &mut effects);
        self.run_decision_checks(&mut effects);
        self.snapshot_alternatives();
        effects
    }

    /// Called when the side consensus for `i` reaches `resolution`. The
    /// index moves to resolved and the resolution is queued for inclusion in
    /// the next block. A late decision for an index already resolved by
    /// exclusion is discarded.
    pub fn handle_side_consensus_achieved(
        &mut self,
        i: &ConflictIndex,
        resolution: Transaction,
        phase: u64,
        now: u64,
    ) -> Result<Vec<Effect>, ProtocolError> {
        self.clock = now;
        if resolution.index() != i {
            return Err(ProtocolError::ResolutionIndexMismatch(i.clone()));
        }
        if self.resolved.contains_key(i) {
            return Ok(Vec::new());
        }
        if !self.inprogress.contains(i) {
            return Err(ProtocolError::NotInProgress(i.clone()));
        }
        let value = resolution.hash();
        if !self.waiting_hashes.contains(&value) {
            self.waiting_hashes.insert(value);
            self.waiting.push(resolution);
        }
        let mut effects = Vec::new();
        self.resolve(
            i.clone(),
            value,
            phase as i64,
            DecisionPath::SideProtocol,
            &mut effects,
        );
        Ok(effects)
    }

    /// Delivers a side-consensus message to the instance for its index.
    pub fn handle_dls_message(&mut self, msg: DlsMessage, now: u64) -> Vec<Effect> {
        self.clock = now;
        let i = msg.index.clone();
        if self.resolved.contains_key(&i) || !self.dls.contains_key(&i) {
            return Vec::new();
        }
        let outs = self.dls.get_mut(&i).unwrap().receive(msg, now);
        let mut effects = Vec::new();
        self.route_dls(&i, outs, now, &mut effects);
        self.finish_dls_if_decided(&i, now, &mut effects);
        self.snapshot_alternatives();
        effects
    }

    /// Advances the side-consensus round clock for `i`.
    pub fn handle_dls_tick(&mut self, i: &ConflictIndex, now: u64) -> Vec<Effect> {
        self.clock = now;
        let Some(st) = self.dls.get_mut(i) else {
            return Vec::new();
        };
        let outs = st.tick(now);
        let next = st.next_boundary();
        let mut effects = Vec::new();
        self.route_dls(i, outs, now, &mut effects);
        self.finish_dls_if_decided(i, now, &mut effects);
        if self.dls.contains_key(i) {
            effects.push(Effect::DlsSchedule {
                index: i.clone(),
                at: next,
            });
        }
        effects
    }

    /// Sends outgoing side-consensus messages, looping self-addressed ones
    /// back through `receive` immediately.
    fn route_dls(
        &mut self,
        i: &ConflictIndex,
        outs: Vec<DlsOut>,
        now: u64,
        effects: &mut Vec<Effect>,
    ) {
        let mut queue = outs;
        while !queue.is_empty() {
            let mut next = Vec::new();
            for out in queue {
                let to_self = out.to.is_none() || out.to == Some(self.me);
                let to_peers = out.to.is_none() || out.to != Some(self.me);
                if to_peers {
                    effects.push(Effect::DlsSend(out.clone()));
                }
                if to_self {
                    if let Some(st) = self.dls.get_mut(i) {
                        next.extend(st.receive(out.msg, now));
                    }
                }
            }
            queue = next;
        }
    }

    fn finish_dls_if_decided(&mut self, i: &ConflictIndex, now: u64, effects: &mut Vec<Effect>) {
        let decided = self.dls.get(i).and_then(|st| st.decided());
        let Some((value, phase)) = decided else {
            return;
        };
        if let Some(tx) = self.dag.transaction(&value).cloned() {
            match self.handle_side_consensus_achieved(i, tx, phase, now) {
                Ok(more) => effects.extend(more),
                Err(_) => {}
            }
        } else {
            // The decided value's content has not reached this validator;
            // record the outcome without re-attesting the transaction.
            let mut eff = Vec::new();
            self.resolve(i.clone(), value, phase as i64, DecisionPath::SideProtocol, &mut eff);
            effects.extend(eff);
        }
        self.dls.remove(i);
    }

    /// Conflict discovery and alternative tracking for one freshly inserted
    /// block.
    fn scan_inserted_block(&mut self, h: &BlockHash, now: u64, effects: &mut Vec<Effect>) {
        let block = self
            .dag
            .block(h)
            .expect("scan runs only on stored blocks")
            .clone();
        let creator = block.creator();
        for tx in block.transactions() {
            let i = tx.index().clone();
            let alts = self.dag.contained_alternatives(&i);
            if alts.len() < 2 {
                continue;
            }
            let newly_found = !self.conflict_known(&i);
            if newly_found {
                self.on_conflict_discovered(&i, now, effects);
            }
            // Feed new alternatives to whatever is handling the conflict.
            if self.params.variant == ProtocolVariant::Casanova {
                if let Some(cs) = self.conflicts.get_mut(&i) {
                    let bound = alternatives_bound(self.params.n, self.params.f);
                    if !cs.offer_alternative(tx.hash(), bound) {
                        self.suspected.insert(creator);
                        effects.push(Effect::FaultRecorded {
                            peer: creator,
                            kind: FaultKind::AlternativesBoundExceeded,
                        });
                    }
                }
            } else if let Some(st) = self.dls.get_mut(&i) {
                let _ = st.add_alternative(&i, tx.hash());
            }
        }
    }

    fn conflict_known(&self, i: &ConflictIndex) -> bool {
        self.conflicts.contains_key(i)
            || self.dls.contains_key(i)
            || self.inprogress.contains(i)
            || self.resolved.contains_key(i)
            || self.unmarked_conflicts.contains(i)
    }

    fn on_conflict_discovered(&mut self, i: &ConflictIndex, now: u64, effects: &mut Vec<Effect>) {
        match self.params.variant {
            ProtocolVariant::Attest => {} // conflicts are outside the contract
            ProtocolVariant::ConflictAttest => {
                self.unmarked_conflicts.insert(i.clone());
                self.start_side_consensus(i, None, now, effects);
            }
            ProtocolVariant::ConflictExclude => {
                self.unmarked_conflicts.insert(i.clone());
                // First decision criterion: an FTM-observed set already in
                // the DAG resolves the conflict outright; the side protocol
                // is never joined.
                if let Some((value, _)) = self.exclusion_evidence(i) {
                    self.record_resolution_tx(&value);
                    self.resolve(i.clone(), value, -1, DecisionPath::ObservedSet, effects);
                    return;
                }
                // Otherwise join the side consensus; a pre-conflict FTM
                // score for one alternative grants a phase -1 lock.
                let lock = self.ftm_scored_alternative(i);
                self.start_side_consensus(i, lock, now, effects);
            }
            ProtocolVariant::Casanova => {
                let alts = self.dag.contained_alternatives(i);
                let cs = ConflictState::open(i.clone(), alts);
                self.conflicts.insert(i.clone(), cs);
                self.inprogress.insert(i.clone());
            }
        }
    }

    fn start_side_consensus(
        &mut self,
        i: &ConflictIndex,
        initial_lock: Option<TxHash>,
        now: u64,
        effects: &mut Vec<Effect>,
    ) {
        let alts = self.dag.contained_alternatives(i);
        let (st, outs) = DlsState::new(
            self.params.dls,
            self.me,
            i.clone(),
            alts,
            initial_lock,
            now,
        )
        .expect("a discovered conflict has at least two alternatives");
        let next = st.next_boundary();
        self.dls.insert(i.clone(), st);
        self.inprogress.insert(i.clone());
        self.route_dls(i, outs, now, effects);
        self.finish_dls_if_decided(i, now, effects);
        if self.dls.contains_key(i) {
            effects.push(Effect::DlsSchedule {
                index: i.clone(),
                at: next,
            });
        }
    }

    /// An alternative of `i` backed by a fault-tolerant-majority observed
    /// set under the conflict-scoped basis, lowest hash first.
    fn exclusion_evidence(&self, i: &ConflictIndex) -> Option<(TxHash, VoterSet)> {
        let k = self.params.ftm();
        let basis = Basis::Conflict(i.clone());
        for alt in self.dag.contained_alternatives(i) {
            if let Some(set) = find_k_observed(&self.dag, k, &alt, &basis, &self.params.weights) {
                return Some((alt, set));
            }
        }
        None
    }

    /// An alternative whose own conflict-scoped score reaches FTM (grounds
    /// for a phase -1 lock), if any.
    fn ftm_scored_alternative(&self, i: &ConflictIndex) -> Option<TxHash> {
        let k = self.params.ftm();
        let basis = Basis::Conflict(i.clone());
        self.dag
            .contained_alternatives(i)
            .into_iter()
            .find(|alt| own_score(&self.dag, alt, &basis).weight(&self.params.weights) >= k)
    }

    /// Queues the resolution transaction for re-attestation in the next
    /// block, when its content is known.
    fn record_resolution_tx(&mut self, value: &TxHash) {
        if let Some(tx) = self.dag.transaction(value).cloned() {
            if !self.waiting_hashes.contains(value) {
                self.waiting_hashes.insert(*value);
                self.waiting.push(tx);
            }
        }
    }

    fn resolve(
        &mut self,
        i: ConflictIndex,
        value: TxHash,
        round: i64,
        path: DecisionPath,
        effects: &mut Vec<Effect>,
    ) {
        if self.resolved.contains_key(&i) {
            return;
        }
        self.inprogress.remove(&i);
        self.dls.remove(&i);
        self.unmarked_decisions.insert(i.clone(), round);
        let prior = self.alts_seen.get(&i).cloned().unwrap_or_default();
        let current = self.dag.known_alternatives(&i);
        let new: BTreeSet<TxHash> = current.difference(&prior).copied().collect();
        self.resolved.insert(
            i.clone(),
            Resolution { value, round, path },
        );
        effects.push(Effect::Decided(DecisionEvent {
            index: i,
            value,
            round,
            path,
            prior_alternatives: prior,
            new_alternatives: new,
        }));
    }

    /// Re-evaluates every open index against the formal decision criteria.
    fn run_decision_checks(&mut self, effects: &mut Vec<Effect>) {
        let candidates: Vec<ConflictIndex> = self
            .dag
            .conflict_indices_seen()
            .into_iter()
            .filter(|i| !self.resolved.contains_key(i))
            .collect();
        for i in candidates {
            match self.params.variant {
                ProtocolVariant::Attest => {
                    let alts = self.dag.contained_alternatives(&i);
                    if alts.len() == 1 {
                        let value = *alts.iter().next().unwrap();
                        self.resolve(i, value, -1, DecisionPath::Attestation, effects);
                    }
                }
                ProtocolVariant::ConflictAttest => {} // only the side protocol decides
                ProtocolVariant::ConflictExclude => {
                    if !self.conflict_known(&i) {
                        continue;
                    }
                    if let Some((value, _)) = self.exclusion_evidence(&i) {
                        self.record_resolution_tx(&value);
                        self.resolve(i, value, -1, DecisionPath::ObservedSet, effects);
                    }
                }
                ProtocolVariant::Casanova => {
                    if let Some((value, round)) = casanova_scan(
                        &self.dag,
                        self.params.ftm(),
                        &self.params.weights,
                        &i,
                    ) {
                        let path = if round < 0 {
                            DecisionPath::ObservedSet
                        } else {
                            DecisionPath::VoteRound
                        };
                        self.resolve(i, value, round, path, effects);
                    }
                }
            }
        }
    }

    fn snapshot_alternatives(&mut self) {
        for i in self.dag.conflict_indices_seen() {
            let alts = self.dag.known_alternatives(&i);
            self.alts_seen.insert(i, alts);
        }
    }

    /// Votes due in the block about to be produced at `seq`: one per
    /// in-progress index whose round boundary falls on this block.
    fn compute_votes(&mut self, seq: u64) -> Vec<Vote> {
        let mut votes = Vec::new();
        let indices: Vec<ConflictIndex> = self.inprogress.iter().cloned().collect();
        for i in indices {
            let Some(cs) = self.conflicts.get_mut(&i) else {
                continue;
            };
            let round = match cs.round_due(seq, self.params.round_unit) {
                Some(r) => r,
                None => continue,
            };
            let lock = current_lock(&self.dag, &self.params, &i);
            let vote = match lock {
                // Rule 1: locked validators attest the locked value; the
                // evidence names the round whose FTM score justified the
                // lock. A lock from this round or later is still binding on
                // the choice but carries no prior-round evidence.
                Some(LockView { value, round: p }) => {
                    let evidence = if p < round as i64 { Some(p) } else { None };
                    Vote::new(i.clone(), value, round, evidence)
                }
                // Rule 2: the lowest-hash alternative seen so far.
                None => match cs.lowest_alternative() {
                    Some(choice) => Vote::new(i.clone(), choice, round, None),
                    None => continue,
                },
            };
            votes.push(vote);
        }
        votes
    }

    /// Canonical digest of all behavior-relevant machine state. Two
    /// machines with equal digests evolve identically under equal inputs.
    /// (Side-consensus internals are summarized by instance keys only; the
    /// explorer, the only digest consumer, never runs those variants.)
    pub fn canonical_digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.me.0.to_le_bytes());
        h.update(self.dag.digest());
        h.update([0x01]);
        for t in &self.waiting {
            h.update(t.hash().as_bytes());
        }
        h.update([0x02]);
        for i in &self.inprogress {
            h.update(i.as_str().as_bytes());
            h.update([0]);
        }
        h.update([0x03]);
        for (i, r) in &self.resolved {
            h.update(i.as_str().as_bytes());
            h.update([0]);
            h.update(r.value.as_bytes());
            h.update(r.round.to_le_bytes());
        }
        h.update([0x04]);
        for (i, cs) in &self.conflicts {
            h.update(i.as_str().as_bytes());
            h.update([0]);
            h.update(cs.round0_seq().unwrap_or(u64::MAX).to_le_bytes());
            h.update(cs.current_round().to_le_bytes());
            for a in cs.alternatives() {
                h.update(a.as_bytes());
            }
        }
        h.update([0x05]);
        for i in &self.unmarked_conflicts {
            h.update(i.as_str().as_bytes());
            h.update([0]);
        }
        for (i, r) in &self.unmarked_decisions {
            h.update(i.as_str().as_bytes());
            h.update([0]);
            h.update(r.to_le_bytes());
        }
        h.update([0x06]);
        for v in &self.suspected {
            h.update(v.0.to_le_bytes());
        }
        for i in self.dls.keys() {
            h.update(i.as_str().as_bytes());
            h.update([0]);
        }
        h.update(self.next_seq.to_le_bytes());
        h.finalize().into()
    }

    /// The formal decision function over this machine's DAG.
    pub fn decide(&self, i: &ConflictIndex) -> Decision {
        match self.params.variant {
            ProtocolVariant::Attest => {
                let alts = self.dag.contained_alternatives(i);
                if alts.len() == 1 {
                    Decision::Chosen {
                        value: *alts.iter().next().unwrap(),
                        round: -1,
                    }
                } else {
                    Decision::Alternatives(alts)
                }
            }
            ProtocolVariant::ConflictAttest => match self.resolved.get(i) {
                Some(r) => Decision::Chosen {
                    value: r.value,
                    round: r.round,
                },
                None => Decision::Alternatives(self.dag.known_alternatives(i)),
            },
            ProtocolVariant::ConflictExclude => {
                if let Some((value, _)) = self.exclusion_evidence(i) {
                    return Decision::Chosen { value, round: -1 };
                }
                match self.resolved.get(i) {
                    Some(r) => Decision::Chosen {
                        value: r.value,
                        round: r.round,
                    },
                    None => Decision::Alternatives(self.dag.known_alternatives(i)),
                }
            }
            ProtocolVariant::Casanova => {
                match casanova_scan(&self.dag, self.params.ftm(), &self.params.weights, i) {
                    Some((value, round)) => Decision::Chosen { value, round },
                    None => Decision::Alternatives(self.dag.known_alternatives(i)),
                }
            }
        }
    }
}

/// The casanova decision criterion, as a pure function of a DAG: the value
/// with a round-r FTM-observed set, minimizing r across rounds; round -1
/// covers pre-conflict attestation evidence.
pub fn casanova_scan(
    dag: &Dag,
    ftm: u64,
    weights: &Weights,
    i: &ConflictIndex,
) -> Option<(TxHash, i64)> {
    let basis = Basis::Conflict(i.clone());
    for alt in dag.contained_alternatives(i) {
        if find_k_observed(dag, ftm, &alt, &basis, weights).is_some() {
            return Some((alt, -1));
        }
    }
    for r in dag.vote_rounds(i) {
        let basis = Basis::Round(i.clone(), r);
        for alt in dag.vote_choices_at(i, r) {
            if find_k_observed(dag, ftm, &alt, &basis, weights).is_some() {
                return Some((alt, r as i64));
            }
        }
    }
    None
}

/// The machine's current lock for `i`, derived from the DAG: the highest
/// round in which some alternative's score reached FTM, that alternative
/// being the locked value. Monotone in the DAG, so a lock is only ever
/// superseded by one with a later round.
pub fn current_lock(dag: &Dag, params: &MachineParams, i: &ConflictIndex) -> Option<LockView> {
    let k = params.ftm();
    let mut best: Option<LockView> = None;
    let conflict_basis = Basis::Conflict(i.clone());
    for alt in dag.contained_alternatives(i) {
        if own_score(dag, &alt, &conflict_basis).weight(&params.weights) >= k {
            let cand = LockView {
                value: alt,
                round: -1,
            };
            if best.is_none() {
                best = Some(cand);
            }
        }
    }
    for r in dag.vote_rounds(i) {
        let basis = Basis::Round(i.clone(), r);
        for alt in dag.vote_choices_at(i, r) {
            if own_score(dag, &alt, &basis).weight(&params.weights) >= k {
                let better = match &best {
                    Some(b) => (r as i64) > b.round,
                    None => true,
                };
                if better {
                    best = Some(LockView {
                        value: alt,
                        round: r as i64,
                    });
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::*;

    fn machines(n: u32, f: u32, variant: ProtocolVariant) -> Vec<ValidatorMachine> {
        (0..n)
            .map(|v| ValidatorMachine::new(ValidatorId(v), MachineParams::new(n, f, variant)))
            .collect()
    }

    /// Every machine produces a block at `now`, then all blocks are
    /// cross-delivered to every other machine. Returns all decision events.
    fn produce_and_flood(ms: &mut [ValidatorMachine], now: u64) -> Vec<(u32, DecisionEvent)> {
        let mut events = Vec::new();
        let mut blocks = Vec::new();
        for m in ms.iter_mut() {
            let (b, effects) = m.handle_time_expire(now);
            for e in effects {
                if let Effect::Decided(d) = e {
                    events.push((m.id().0, d));
                }
            }
            blocks.push(b);
        }
        for b in blocks {
            for m in ms.iter_mut() {
                if m.id() == b.creator() {
                    continue;
                }
                for e in m.handle_receive_block(b.clone(), now) {
                    if let Effect::Decided(d) = e {
                        events.push((m.id().0, d));
                    }
                }
            }
        }
        events
    }

    #[test]
    fn receive_event_guards() {
        let mut m = machines(4, 1, ProtocolVariant::ConflictAttest).remove(0);
        // fresh index, no parents: added
        let t1 = tx("a", "i");
        m.handle_receive_event(t1.clone(), 0);
        assert_eq!(m.waiting().count(), 1);
        // unknown requested parent: ignored
        let ghost = tx("ghost", "x").hash();
        let t2 = tx_with_parents("b", "j", &[ghost]);
        m.handle_receive_event(t2, 0);
        assert_eq!(m.waiting().count(), 1);
        // second transaction with an index already waiting: ignored
        let t3 = tx("c", "i");
        m.handle_receive_event(t3, 0);
        assert_eq!(m.waiting().count(), 1);
        // satisfied requested parent (still waiting): added
        let t4 = tx_with_parents("d", "k", &[t1.hash()]);
        m.handle_receive_event(t4, 0);
        assert_eq!(m.waiting().count(), 2);
    }

    #[test]
    fn attest_variant_skips_index_guard() {
        let mut m = machines(4, 1, ProtocolVariant::Attest).remove(0);
        m.handle_receive_event(tx("a", "i"), 0);
        m.handle_receive_event(tx("b", "i"), 0);
        assert_eq!(m.waiting().count(), 2);
    }

    #[test]
    fn time_expire_builds_blocks_from_leaves_and_waiting() {
        let mut m = machines(4, 1, ProtocolVariant::Attest).remove(0);
        let g = m.dag().genesis_hash();
        // empty waiting on a genesis-only DAG
        let (b0, _) = m.handle_time_expire(0);
        assert_eq!(b0.parents().iter().copied().collect::<Vec<_>>(), vec![g]);
        assert!(b0.transactions().is_empty());
        assert_eq!(b0.seq(), 0);
        // waiting drained into the next block
        let t1 = tx("a", "i");
        let t2 = tx("b", "j");
        m.handle_receive_event(t1.clone(), 1);
        m.handle_receive_event(t2.clone(), 1);
        let (b1, _) = m.handle_time_expire(1);
        assert_eq!(b1.transactions().len(), 2);
        assert_eq!(m.waiting().count(), 0);
        // self-chain rule: each block descends from the creator's previous
        assert!(m.dag().is_ancestor(&b0.hash(), &b1.hash()).unwrap());
    }

    #[test]
    fn attest_resolves_single_alternative() {
        let mut ms = machines(4, 0, ProtocolVariant::Attest);
        let t = tx("pay", "acct");
        for m in ms.iter_mut() {
            m.handle_receive_event(t.clone(), 0);
        }
        let events = produce_and_flood(&mut ms, 0);
        assert_eq!(events.len(), 4);
        for (_, d) in &events {
            assert_eq!(d.value, t.hash());
            assert_eq!(d.path, DecisionPath::Attestation);
        }
        for m in &ms {
            assert_eq!(
                m.decide(&"acct".into()).chosen().map(|(v, _)| v),
                Some(t.hash())
            );
        }
    }

    #[test]
    fn decide_reports_alternatives_before_any_quorum() {
        let mut ms = machines(4, 1, ProtocolVariant::Casanova);
        let i: ConflictIndex = "acct".into();
        // nothing seen yet
        assert_eq!(ms[0].decide(&i), Decision::Alternatives(Default::default()));
        let e = tx("pay-a", "acct");
        let e2 = tx("pay-b", "acct");
        ms[0].handle_receive_event(e.clone(), 0);
        ms[1].handle_receive_event(e2.clone(), 0);
        produce_and_flood(&mut ms, 0);
        // conflict seen, no observed set yet
        let d = ms[2].decide(&i);
        let want: std::collections::BTreeSet<_> = [e.hash(), e2.hash()].into_iter().collect();
        assert_eq!(d, Decision::Alternatives(want));
    }

    #[test]
    fn casanova_thirteen_block_round_zero_decision() {
        // genesis + four container blocks + four round-0 vote blocks + four
        // observer blocks = 13 blocks; the final deliveries complete the
        // round-0 FTM-observed set for the lowest-hash alternative.
        let mut ms = machines(4, 1, ProtocolVariant::Casanova);
        let e = tx("pay-a", "acct");
        let e2 = tx("pay-b", "acct");
        let expect = e.hash().min(e2.hash());
        ms[0].handle_receive_event(e.clone(), 0);
        ms[1].handle_receive_event(e.clone(), 0);
        ms[2].handle_receive_event(e2.clone(), 0);
        ms[3].handle_receive_event(e2.clone(), 0);

        // layer 1: containers; conflict discovered on cross-delivery
        let ev = produce_and_flood(&mut ms, 0);
        assert!(ev.is_empty());
        for m in &ms {
            assert!(m.inprogress().contains(&"acct".into()));
        }
        // layer 2: round-0 votes (no locks: both scores below FTM, so all
        // pick the lowest hash)
        let ev = produce_and_flood(&mut ms, 10);
        assert!(ev.is_empty());
        // layer 3: observers; every machine decides (e_min, round 0)
        let ev = produce_and_flood(&mut ms, 20);
        let deciders: std::collections::BTreeSet<u32> =
            ev.iter().map(|(v, _)| *v).collect();
        assert_eq!(deciders.len(), 4);
        for (_, d) in &ev {
            assert_eq!((d.value, d.round), (expect, 0));
            assert_eq!(d.path, DecisionPath::VoteRound);
        }
        for m in &ms {
            assert_eq!(m.dag().len(), 13);
            assert_eq!(m.decide(&"acct".into()).chosen(), Some((expect, 0)));
        }
    }

    #[test]
    fn casanova_decides_unconflicted_index_by_observation() {
        // A conflict-free transaction still reaches a decision: plain
        // attestations form the round -1 observed set after two layers.
        let mut ms = machines(4, 1, ProtocolVariant::Casanova);
        let t = tx("pay", "acct");
        for m in ms.iter_mut() {
            m.handle_receive_event(t.clone(), 0);
        }
        produce_and_flood(&mut ms, 0);
        let ev = produce_and_flood(&mut ms, 10);
        assert!(!ev.is_empty());
        for m in &ms {
            assert_eq!(m.decide(&"acct".into()).chosen(), Some((t.hash(), -1)));
        }
    }

    #[test]
    fn exclusion_resolves_without_side_protocol() {
        // e spreads and is observed to an FTM-observed set before the
        // conflicting e2 ever appears: the conflict is resolved outright and
        // the side protocol never starts.
        let mut ms = machines(4, 1, ProtocolVariant::ConflictExclude);
        let i: ConflictIndex = "acct".into();
        let e = tx("pay-a", "acct");
        for m in ms.iter_mut() {
            m.handle_receive_event(e.clone(), 0);
        }
        produce_and_flood(&mut ms, 0); // containers
        produce_and_flood(&mut ms, 10); // observations -> FTM-observed set

        // e2 arrives as a client request at validator 3 (its index is not
        // yet contested there) and lands in 3's next block
        let e2 = tx("pay-b", "acct");
        ms[3].handle_receive_event(e2.clone(), 20);
        let (b, effects) = ms[3].handle_time_expire(20);
        let decided: Vec<_> = effects
            .iter()
            .filter_map(|ef| match ef {
                Effect::Decided(d) => Some(d.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(decided.len(), 1);
        assert_eq!(decided[0].value, e.hash());
        assert_eq!(decided[0].path, DecisionPath::ObservedSet);
        assert!(ms[3].dls_state(&i).is_none());

        // the block carrying e2 spreads; everyone resolves to e without DLS
        for v in 0..3 {
            let effects = ms[v].handle_receive_block(b.clone(), 21);
            assert!(effects.iter().any(|ef| matches!(
                ef,
                Effect::Decided(d) if d.value == e.hash() && d.path == DecisionPath::ObservedSet
            )));
            assert!(ms[v].dls_state(&i).is_none());
        }
    }

    #[test]
    fn conflict_attest_starts_side_consensus_and_feeds_alternatives() {
        let mut ms = machines(4, 1, ProtocolVariant::ConflictAttest);
        let i: ConflictIndex = "acct".into();
        let e = tx("pay-a", "acct");
        let e2 = tx("pay-b", "acct");
        ms[0].handle_receive_event(e.clone(), 0);
        ms[2].handle_receive_event(e2.clone(), 0);
        produce_and_flood(&mut ms, 0);
        for m in &ms {
            assert!(m.dls_state(&i).is_some(), "side consensus running");
            assert!(m.inprogress().contains(&i));
            assert_eq!(m.dls_state(&i).unwrap().acceptable().len(), 2);
        }
        // a third alternative arrives inside a block from a validator that
        // attested it before learning of the conflict
        let e3 = tx("pay-c", "acct");
        let tip2 = *ms[0]
            .dag()
            .most_recent_blocks(ValidatorId(2))
            .iter()
            .next()
            .unwrap();
        let leaves: Vec<_> = ms[0].dag().leaves().iter().copied().collect();
        let mut parents = leaves;
        if !parents.contains(&tip2) {
            parents.push(tip2);
        }
        let b = block(2, 1, &parents, vec![e3.clone()]);
        ms[0].handle_receive_block(b, 5);
        let acceptable = ms[0].dls_state(&i).unwrap().acceptable();
        assert!(acceptable.contains(&e3.hash()));
        assert_eq!(acceptable.len(), 3);
    }

    #[test]
    fn side_consensus_achieved_flow_and_races() {
        let mut ms = machines(4, 1, ProtocolVariant::ConflictAttest);
        let i: ConflictIndex = "acct".into();
        let e = tx("pay-a", "acct");
        let e2 = tx("pay-b", "acct");
        ms[0].handle_receive_event(e.clone(), 0);
        ms[2].handle_receive_event(e2.clone(), 0);
        produce_and_flood(&mut ms, 0);

        // resolution index mismatch is rejected
        let wrong = tx("other", "other-index");
        assert!(ms[1]
            .handle_side_consensus_achieved(&i, wrong, 0, 5)
            .is_err());

        // standard flow: resolved grows, resolution re-enters waiting
        let effects = ms[1]
            .handle_side_consensus_achieved(&i, e.clone(), 0, 5)
            .unwrap();
        assert!(effects
            .iter()
            .any(|ef| matches!(ef, Effect::Decided(d) if d.path == DecisionPath::SideProtocol)));
        assert!(ms[1].resolutions().contains_key(&i));
        assert!(!ms[1].inprogress().contains(&i));
        assert!(ms[1].waiting().any(|t| t.hash() == e.hash()));

        // a late duplicate decision for an already-resolved index is a no-op
        let effects = ms[1]
            .handle_side_consensus_achieved(&i, e2.clone(), 1, 6)
            .unwrap();
        assert!(effects.is_empty());
        assert_eq!(ms[1].resolutions()[&i].value, e.hash());
    }

    #[test]
    fn vote_rules_lock_and_lowest_hash() {
        // Validator 3 watches a conflict where validators 0..2 voted e in
        // round 0: it locks (e, 0) and votes e thereafter, with evidence
        // once the lock round is in its past.
        let mut m = ValidatorMachine::new(
            ValidatorId(3),
            MachineParams::new(4, 1, ProtocolVariant::Casanova),
        );
        let g = m.dag().genesis_hash();
        let e = tx("pay-a", "acct");
        let e2 = tx("pay-b", "acct");
        // containers by 0 and 1
        let c0 = block(0, 0, &[g], vec![e.clone()]);
        let c1 = block(1, 0, &[g], vec![e2.clone()]);
        m.handle_receive_block(c0.clone(), 0);
        m.handle_receive_block(c1.clone(), 0);
        assert!(m.inprogress().contains(&"acct".into()));
        // round-0 votes for e by 0, 1, 2
        let v0 = block_voting(0, 1, &[c0.hash(), c1.hash()], vec![], vec![vote("acct", e.hash(), 0)]);
        let v1 = block_voting(1, 1, &[c0.hash(), c1.hash()], vec![], vec![vote("acct", e.hash(), 0)]);
        let v2 = block_voting(2, 0, &[c0.hash(), c1.hash()], vec![], vec![vote("acct", e.hash(), 0)]);
        for b in [v0, v1, v2] {
            m.handle_receive_block(b, 1);
        }
        let lock = current_lock(m.dag(), m.params(), &"acct".into()).unwrap();
        assert_eq!((lock.value, lock.round), (e.hash(), 0));

        // rule 1 at 3's round 0: the lock binds the choice; no prior-round
        // evidence exists yet
        let (b0, _) = m.handle_time_expire(10);
        assert_eq!(b0.votes().len(), 1);
        assert_eq!(b0.votes()[0].choice, e.hash());
        assert_eq!(b0.votes()[0].round, 0);
        assert_eq!(b0.votes()[0].lock_evidence, None);
        // off-boundary block: no vote
        let (b1, _) = m.handle_time_expire(20);
        assert!(b1.votes().is_empty());
        // round 1 (two blocks after round 0): evidence cites round 0
        let (b2, _) = m.handle_time_expire(30);
        assert_eq!(b2.votes().len(), 1);
        assert_eq!(b2.votes()[0].round, 1);
        assert_eq!(b2.votes()[0].lock_evidence, Some(0));
    }

    #[test]
    fn vote_rule_two_picks_lowest_hash_without_lock() {
        let mut ms = machines(4, 1, ProtocolVariant::Casanova);
        let e = tx("pay-a", "acct");
        let e2 = tx("pay-b", "acct");
        ms[0].handle_receive_event(e.clone(), 0);
        ms[2].handle_receive_event(e2.clone(), 0);
        produce_and_flood(&mut ms, 0);
        let expect = e.hash().min(e2.hash());
        for m in ms.iter_mut() {
            let (b, _) = m.handle_time_expire(10);
            assert_eq!(b.votes().len(), 1);
            assert_eq!(b.votes()[0].choice, expect);
            assert_eq!(b.votes()[0].lock_evidence, None);
        }
    }

    #[test]
    fn decide_takes_earliest_round_with_quorum() {
        // Crafted (fault-exceeding) history where e gains a round-1 quorum
        // and e2 a round-2 quorum: decide returns the round-1 value.
        let m_params = MachineParams::new(4, 1, ProtocolVariant::Casanova);
        let mut m = ValidatorMachine::new(ValidatorId(3), m_params);
        let g = m.dag().genesis_hash();
        let e = tx("pay-a", "acct");
        let e2 = tx("pay-b", "acct");
        let c = block(2, 0, &[g], vec![e.clone(), e2.clone()]);
        m.handle_receive_block(c.clone(), 0);
        let mut tips = vec![c.hash(); 3];
        let mut seqs = [0u64, 0, 1];
        let creators = [0u32, 1, 2];
        let mut layer = |m: &mut ValidatorMachine,
                         tips: &mut Vec<crate::types::BlockHash>,
                         seqs: &mut [u64; 3],
                         votes_for: &crate::types::Transaction,
                         round: u32,
                         now: u64| {
            let parents: Vec<_> = tips.clone();
            let mut new_tips = Vec::new();
            for (k, &cr) in creators.iter().enumerate() {
                let mut ps = parents.clone();
                ps.push(tips[k]);
                let b = block_voting(
                    cr,
                    seqs[k],
                    &ps,
                    vec![],
                    vec![vote("acct", votes_for.hash(), round)],
                );
                seqs[k] += 1;
                new_tips.push(b.hash());
                m.handle_receive_block(b, now);
            }
            *tips = new_tips;
        };
        layer(&mut m, &mut tips, &mut seqs, &e, 1, 1);
        layer(&mut m, &mut tips, &mut seqs, &e2, 2, 2);
        // one more connective layer so every view covers both vote sets
        let parents: Vec<_> = tips.clone();
        for (k, &cr) in creators.iter().enumerate() {
            let b = block(cr, seqs[k], &parents, vec![]);
            m.handle_receive_block(b, 3);
        }
        assert_eq!(m.decide(&"acct".into()).chosen(), Some((e.hash(), 1)));
    }
}
