//! Block, transaction and view scoring, and k-observed-set detection.
//!
//! The score of a block is the set of validators that created it or any of
//! its descendants; a validator's viewscore recomputes that on the sub-DAG
//! visible at its most recent block. A `k`-observed set for a target is a set
//! `S` of validators, each of whose views assigns the target weight at least
//! `k`, with `weight(S) >= k` — the decision quorum uses `k = FTM`.
//!
//! Three attestation bases are supported:
//!
//! * containment — creators of self-or-descendants of the blocks containing
//!   the transaction (plain scoring, no round attached);
//! * conflict-scoped — only blocks a validator created before it first marked
//!   the conflict count as its attestation toward an alternative (used for
//!   pre-conflict "round -1" evidence, where mere observation after learning
//!   of the conflict must not count toward either side);
//! * round votes — explicit round-r vote records for the alternative.
//!
//! Proven equivocators are excluded both as attesters and as observers.

use fixedbitset::FixedBitSet;

use crate::dag::{Dag, DagError};
use crate::types::{BlockHash, ConflictIndex, TxHash, ValidatorId};

/// Maps validators to positive integer weights; defaults to the constant 1,
/// in which case weights reduce to counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Weights {
    per: Vec<u64>,
}

impl Weights {
    pub fn unit(n: u32) -> Self {
        Weights {
            per: vec![1; n as usize],
        }
    }

    pub fn new(per: Vec<u64>) -> Self {
        assert!(per.iter().all(|&w| w > 0), "weights must be positive");
        Weights { per }
    }

    pub fn get(&self, v: ValidatorId) -> u64 {
        self.per[v.0 as usize]
    }

    pub fn of_mask(&self, mask: u64) -> u64 {
        let mut total = 0;
        let mut m = mask;
        while m != 0 {
            let v = m.trailing_zeros() as usize;
            total += self.per[v];
            m &= m - 1;
        }
        total
    }

    pub fn total(&self) -> u64 {
        self.per.iter().sum()
    }
}

/// A set of validators, stored as a bitmask (validator counts are <= 64).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VoterSet {
    pub mask: u64,
}

impl VoterSet {
    pub fn from_mask(mask: u64) -> Self {
        VoterSet { mask }
    }

    pub fn contains(&self, v: ValidatorId) -> bool {
        self.mask >> v.0 & 1 == 1
    }

    pub fn len(&self) -> u32 {
        self.mask.count_ones()
    }

    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = ValidatorId> + '_ {
        (0..64u32)
            .filter(move |v| self.mask >> v & 1 == 1)
            .map(ValidatorId)
    }

    pub fn weight(&self, w: &Weights) -> u64 {
        w.of_mask(self.mask)
    }
}

impl FromIterator<ValidatorId> for VoterSet {
    fn from_iter<T: IntoIterator<Item = ValidatorId>>(iter: T) -> Self {
        let mut mask = 0;
        for v in iter {
            mask |= 1 << v.0;
        }
        VoterSet { mask }
    }
}

/// Restricts scoring to attestations of one voting round of one conflict
/// index. Blocks from later rounds are excluded and earlier-round
/// attestations do not count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundFilter {
    pub index: ConflictIndex,
    pub round: u32,
}

/// Creators of `b` and of every descendant of `b` (genesis counts as created
/// by all validators).
pub fn score(dag: &Dag, b: &BlockHash) -> Result<VoterSet, DagError> {
    let idx = dag.idx(b).ok_or(DagError::UnknownBlock(*b))?;
    Ok(VoterSet::from_mask(dag.score_mask(idx)))
}

/// Resolves `u`'s single most-recent block index, or the genesis index when
/// `u` has produced nothing. Errors if `u` has equivocated.
fn view_tip(dag: &Dag, u: ValidatorId) -> Result<usize, DagError> {
    let tips = dag.most_recent_blocks(u);
    if tips.len() > 1 {
        return Err(DagError::EquivocatorQueried(u));
    }
    let tip = tips.iter().next().expect("most_recent_blocks is nonempty");
    Ok(dag.idx(tip).expect("tip is stored"))
}

/// `u`'s view of the score of `b`: the score computed on the induced sub-DAG
/// of `u`'s most recent block and its ancestors. Empty when `b` is outside
/// that sub-DAG.
pub fn viewscore(dag: &Dag, u: ValidatorId, b: &BlockHash) -> Result<VoterSet, DagError> {
    let bi = dag.idx(b).ok_or(DagError::UnknownBlock(*b))?;
    let tip = view_tip(dag, u)?;
    let cone = dag.ancestors_of(tip);
    if !cone.contains(bi) {
        return Ok(VoterSet::default());
    }
    let mut mask = 0;
    for c in cone.ones() {
        if dag.ancestors_of(c).contains(bi) {
            mask |= dag.creator_contribution(c);
        }
    }
    Ok(VoterSet::from_mask(mask))
}

fn tx_known(dag: &Dag, tx: &TxHash) -> bool {
    if dag.container_idxs(tx).is_some() {
        return true;
    }
    dag.transaction(tx).is_some()
}

fn tx_vote_referenced(dag: &Dag, i: &ConflictIndex, tx: &TxHash) -> bool {
    dag.vote_rounds(i)
        .iter()
        .any(|r| dag.vote_choices_at(i, *r).contains(tx))
}

/// Score of a transaction: union of the scores of the blocks containing it,
/// or, under a [`RoundFilter`], the validators whose round-r votes chose it.
pub fn transaction_score(
    dag: &Dag,
    tx: &TxHash,
    filter: Option<&RoundFilter>,
) -> Result<VoterSet, DagError> {
    match filter {
        None => {
            let containers = dag
                .container_idxs(tx)
                .ok_or(DagError::UnknownTransaction(*tx))?;
            let mut mask = 0;
            for &c in containers {
                mask |= dag.score_mask(c);
            }
            Ok(VoterSet::from_mask(mask))
        }
        Some(f) => {
            if !tx_known(dag, tx) && !tx_vote_referenced(dag, &f.index, tx) {
                return Err(DagError::UnknownTransaction(*tx));
            }
            let mut mask = 0;
            if let Some(rec) = dag.vote_record(&f.index, f.round, tx) {
                for v in rec.keys() {
                    mask |= 1u64 << v;
                }
            }
            Ok(VoterSet::from_mask(mask))
        }
    }
}

/// A validator's attestations toward `tx` as visible inside a view cone,
/// under the containment basis.
fn containment_view(dag: &Dag, cone: &FixedBitSet, tx: &TxHash) -> u64 {
    let Some(containers) = dag.container_idxs(tx) else {
        return 0;
    };
    let mut mask = 0;
    for c in cone.ones() {
        let anc = dag.ancestors_of(c);
        if containers.iter().any(|&ci| anc.contains(ci)) {
            mask |= dag.creator_contribution(c);
        }
    }
    mask
}

/// Round-r voters for `tx` whose vote blocks lie inside the view cone.
fn round_view(dag: &Dag, cone: &FixedBitSet, i: &ConflictIndex, round: u32, tx: &TxHash) -> u64 {
    let Some(rec) = dag.vote_record(i, round, tx) else {
        return 0;
    };
    let mut mask = 0;
    for (v, (_, h)) in rec {
        if let Some(bi) = dag.idx(h) {
            if cone.contains(bi) {
                mask |= 1u64 << v;
            }
        }
    }
    mask
}

/// Pre-marker attesters toward alternative `alt` of index `i` whose
/// attestation blocks lie inside the view cone.
fn conflict_view(dag: &Dag, cone: &FixedBitSet, i: &ConflictIndex, alt: &TxHash) -> u64 {
    let mut mask = 0;
    for v in 0..dag.validator_count() {
        if let Some((_, h)) = dag.attestation_of(i, alt, v) {
            if let Some(bi) = dag.idx(&h) {
                if cone.contains(bi) {
                    mask |= 1u64 << v;
                }
            }
        }
    }
    mask
}

/// What counts as an attestation toward the target value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Basis {
    /// Plain containment scoring (no round attached).
    Containment,
    /// Pre-conflict attestations toward an alternative of `0`'s index
    /// ("round -1" evidence).
    Conflict(ConflictIndex),
    /// Explicit round-r votes.
    Round(ConflictIndex, u32),
}

/// The straightforward detection algorithm: compute the candidate set
/// `C = {U : weight(U's view of the target) >= k}`; a k-observed set exists
/// iff `weight(C) >= k`, and `C` itself is then the maximal witness.
///
/// Equivocators are excluded entirely, both as candidates and as attesters.
pub fn find_k_observed(
    dag: &Dag,
    k: u64,
    target: &TxHash,
    basis: &Basis,
    weights: &Weights,
) -> Option<VoterSet> {
    let active = dag.active_set(0).mask;
    let mut candidates = 0u64;
    for v in 0..dag.validator_count() {
        if active >> v & 1 == 0 {
            continue;
        }
        let u = ValidatorId(v);
        let Ok(tip) = view_tip(dag, u) else {
            continue;
        };
        let cone = dag.ancestors_of(tip);
        let view = match basis {
            Basis::Containment => containment_view(dag, cone, target),
            Basis::Conflict(i) => conflict_view(dag, cone, i, target),
            Basis::Round(i, r) => round_view(dag, cone, i, *r, target),
        } & active;
        if weights.of_mask(view) >= k {
            candidates |= 1u64 << v;
        }
    }
    if weights.of_mask(candidates) >= k {
        Some(VoterSet::from_mask(candidates))
    } else {
        None
    }
}

/// Spec-facing wrapper: optional round filter selects between containment
/// and round-vote bases.
pub fn find_k_observed_set(
    dag: &Dag,
    k: u64,
    target: &TxHash,
    filter: Option<&RoundFilter>,
    weights: &Weights,
) -> Result<Option<VoterSet>, DagError> {
    let basis = match filter {
        None => {
            if !tx_known(dag, target) {
                return Err(DagError::UnknownTransaction(*target));
            }
            Basis::Containment
        }
        Some(f) => {
            if !tx_known(dag, target) && !tx_vote_referenced(dag, &f.index, target) {
                return Err(DagError::UnknownTransaction(*target));
            }
            Basis::Round(f.index.clone(), f.round)
        }
    };
    Ok(find_k_observed(dag, k, target, &basis, weights))
}

/// A validator's own score of an alternative under a basis (its full DAG is
/// its view). Used for the locking rules.
pub fn own_score(dag: &Dag, target: &TxHash, basis: &Basis) -> VoterSet {
    let active = dag.active_set(0).mask;
    let mask = match basis {
        Basis::Containment => {
            let mut m = 0;
            if let Some(cs) = dag.container_idxs(target) {
                for &c in cs {
                    m |= dag.score_mask(c);
                }
            }
            m
        }
        Basis::Conflict(i) => {
            let mut m = 0;
            for v in 0..dag.validator_count() {
                if dag.attestation_of(i, target, v).is_some() {
                    m |= 1u64 << v;
                }
            }
            m
        }
        Basis::Round(i, r) => {
            let mut m = 0;
            if let Some(rec) = dag.vote_record(i, *r, target) {
                for v in rec.keys() {
                    m |= 1u64 << v;
                }
            }
            m
        }
    };
    VoterSet::from_mask(mask & active)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::*;

    #[test]
    fn leaf_block_scores_its_creator_only() {
        let mut dag = Dag::new(4);
        let g = dag.genesis_hash();
        let b = block(2, 0, &[g], vec![]);
        let bh = b.hash();
        assert!(dag.insert(b).is_inserted());
        let s = score(&dag, &bh).unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![ValidatorId(2)]);
    }

    #[test]
    fn genesis_scores_all_validators() {
        let mut dag = Dag::new(4);
        let g = dag.genesis_hash();
        // all four validators produce a block
        let mut prev = g;
        for v in 0..4 {
            let b = block(v, 0, &[prev], vec![]);
            prev = b.hash();
            assert!(dag.insert(b).is_inserted());
        }
        let s = score(&dag, &g).unwrap();
        assert_eq!(s.len(), 4);
        // and even alone, genesis is treated as created by everyone
        let fresh = Dag::new(4);
        assert_eq!(score(&fresh, &g).unwrap().len(), 4);
    }

    #[test]
    fn chain_score_unions_descendant_creators() {
        // g <- a(by 0) <- b(by 1): score(a) = {0, 1}
        let mut dag = Dag::new(4);
        let g = dag.genesis_hash();
        let a = block(0, 0, &[g], vec![]);
        let b = block(1, 0, &[a.hash()], vec![]);
        let ah = a.hash();
        assert!(dag.insert(a).is_inserted());
        assert!(dag.insert(b).is_inserted());
        let s = score(&dag, &ah).unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![ValidatorId(0), ValidatorId(1)]);
    }

    #[test]
    fn viewscore_at_own_tip() {
        let mut dag = Dag::new(4);
        let g = dag.genesis_hash();
        let a = block(1, 0, &[g], vec![]);
        let ah = a.hash();
        assert!(dag.insert(a).is_inserted());
        // b is u's tip: inside the induced sub-DAG only b itself descends
        // from b
        let s = viewscore(&dag, ValidatorId(1), &ah).unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![ValidatorId(1)]);
    }

    #[test]
    fn viewscore_of_genesis_for_silent_validator_is_everyone() {
        let dag = Dag::new(4);
        let g = dag.genesis_hash();
        let s = viewscore(&dag, ValidatorId(3), &g).unwrap();
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn viewscore_outside_ancestry_is_empty() {
        let mut dag = Dag::new(4);
        let g = dag.genesis_hash();
        let a = block(0, 0, &[g], vec![]);
        let b = block(1, 0, &[g], vec![]);
        let bh = b.hash();
        assert!(dag.insert(a.clone()).is_inserted());
        assert!(dag.insert(b).is_inserted());
        // validator 0's cone is {g, a}; b is outside it
        let s = viewscore(&dag, ValidatorId(0), &bh).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn viewscore_of_equivocator_is_an_error() {
        let mut dag = Dag::new(4);
        let g = dag.genesis_hash();
        let a = block(0, 0, &[g], vec![tx("x", "i")]);
        let b = block(0, 0, &[g], vec![tx("y", "i")]);
        let ah = a.hash();
        assert!(dag.insert(a).is_inserted());
        assert!(dag.insert(b).is_inserted());
        assert_eq!(
            viewscore(&dag, ValidatorId(0), &ah),
            Err(DagError::EquivocatorQueried(ValidatorId(0)))
        );
    }

    #[test]
    fn transaction_score_unions_containing_blocks() {
        let mut dag = Dag::new(4);
        let g = dag.genesis_hash();
        let t = tx("t", "i");
        let th = t.hash();

        // in exactly one leaf block by validator 1
        let b1 = block(1, 0, &[g], vec![t.clone()]);
        assert!(dag.insert(b1.clone()).is_inserted());
        let s = transaction_score(&dag, &th, None).unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![ValidatorId(1)]);

        // in two sibling blocks by validators 1 and 2, no descendants
        let b2 = block(2, 0, &[g], vec![t.clone()]);
        assert!(dag.insert(b2).is_inserted());
        let s = transaction_score(&dag, &th, None).unwrap();
        assert_eq!(
            s.iter().collect::<Vec<_>>(),
            vec![ValidatorId(1), ValidatorId(2)]
        );

        let unknown = tx("nope", "i").hash();
        assert_eq!(
            transaction_score(&dag, &unknown, None),
            Err(DagError::UnknownTransaction(unknown))
        );
    }

    #[test]
    fn round_filtered_score_counts_only_that_rounds_votes() {
        // Six blocks: genesis, a container, round-0 votes by validators 0
        // and 1, a round-1 vote by validator 2, and a vote-free observer.
        // The round-0 filter yields exactly {0, 1}: the round-1 vote is a
        // later-round block and the vote-free block relays but attests
        // nothing.
        let mut dag = Dag::new(4);
        let g = dag.genesis_hash();
        let t = tx("t", "acct");
        let th = t.hash();
        let c = block(3, 0, &[g], vec![t]);
        let v0 = block_voting(0, 0, &[c.hash()], vec![], vec![vote("acct", th, 0)]);
        let v1 = block_voting(1, 0, &[c.hash()], vec![], vec![vote("acct", th, 0)]);
        let v2 = block_voting(2, 0, &[v0.hash(), v1.hash()], vec![], vec![vote("acct", th, 1)]);
        let obs = block(3, 1, &[v2.hash(), c.hash()], vec![]);
        for b in [c, v0, v1, v2, obs] {
            assert!(dag.insert(b).is_inserted());
        }
        let f = RoundFilter {
            index: "acct".into(),
            round: 0,
        };
        let s = transaction_score(&dag, &th, Some(&f)).unwrap();
        assert_eq!(
            s.iter().collect::<Vec<_>>(),
            vec![ValidatorId(0), ValidatorId(1)]
        );
    }

    #[test]
    fn k_observed_single_validator_self_observation() {
        // N=1: validator 0 attests the target, then builds one descendant.
        let mut dag = Dag::new(1);
        let g = dag.genesis_hash();
        let t = tx("t", "i");
        let th = t.hash();
        let b = block(0, 0, &[g], vec![t]);
        let d = block(0, 1, &[b.hash()], vec![]);
        assert!(dag.insert(b).is_inserted());
        assert!(dag.insert(d).is_inserted());
        let w = Weights::unit(1);
        let s = find_k_observed_set(&dag, 1, &th, None, &w).unwrap().unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![ValidatorId(0)]);
    }

    /// Builds the two-layer DAG: four first-layer blocks each containing the
    /// target, and `second_layer` validators adding blocks that reference
    /// all first-layer blocks.
    fn two_layer(second_layer: u32) -> (Dag, crate::types::TxHash) {
        let mut dag = Dag::new(4);
        let g = dag.genesis_hash();
        let t = tx("t", "i");
        let th = t.hash();
        let mut layer1 = Vec::new();
        for v in 0..4 {
            let b = block(v, 0, &[g], vec![t.clone()]);
            layer1.push(b.hash());
            assert!(dag.insert(b).is_inserted());
        }
        for v in 0..second_layer {
            let b = block(v, 1, &layer1, vec![]);
            assert!(dag.insert(b).is_inserted());
        }
        (dag, th)
    }

    #[test]
    fn k_observed_set_exists_with_full_second_layer() {
        // Hand evaluation of the 9-block DAG: every validator's tip sees all
        // four attestations, so the candidate set is all four >= FTM = 3.
        let (dag, th) = two_layer(4);
        let w = Weights::unit(4);
        let s = find_k_observed_set(&dag, 3, &th, None, &w).unwrap().unwrap();
        assert!(s.len() >= 3);
    }

    #[test]
    fn k_observed_set_absent_with_two_observers() {
        // Only validators 0 and 1 produced second-layer blocks: candidates
        // have weight 2 < 3.
        let (dag, th) = two_layer(2);
        let w = Weights::unit(4);
        assert_eq!(find_k_observed_set(&dag, 3, &th, None, &w).unwrap(), None);
    }

    #[test]
    fn score_monotone_under_insertion() {
        let mut dag = Dag::new(4);
        let g = dag.genesis_hash();
        let a = block(0, 0, &[g], vec![]);
        let ah = a.hash();
        assert!(dag.insert(a).is_inserted());
        let before = score(&dag, &ah).unwrap().mask;
        let b = block(1, 0, &[ah], vec![]);
        assert!(dag.insert(b).is_inserted());
        let after = score(&dag, &ah).unwrap().mask;
        assert_eq!(after & before, before);
        assert!(score(&dag, &ah).unwrap().contains(ValidatorId(0)));
    }

    #[test]
    fn quorum_intersection_arithmetic() {
        // Any FTM-weight set holds at least NFM correct validators and
        // intersects any other FTM set in at least f+1 members. With unit
        // weights this is pure arithmetic over set sizes; sweep exhaustively.
        for n in 1..=12u32 {
            for f in 0..=(n - 1) / 3 {
                let q = crate::quorum::quorum_sizes(n, f).unwrap();
                assert!(q.ftm - f >= q.nfm.min(q.ftm));
                assert_eq!(q.ftm - f, q.nfm);
                // two sets of size FTM in a universe of N intersect in at
                // least 2*FTM - N elements
                let min_intersection = (2 * q.ftm).saturating_sub(n);
                assert!(min_intersection >= f + 1);
            }
        }
    }
}
