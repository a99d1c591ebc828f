//! Post-hoc trace analysis: the safety and liveness definitions as
//! executable predicates, agreement between the two conflict-exclusion
//! decision paths, and the eventual-choice contract.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::protocol::{DecisionPath, ProtocolVariant};
use crate::quorum::round_start_offset;
use crate::sim::scenario::NetworkMode;
use crate::sim::{Trace, TraceRecord};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckerError {
    #[error("trace has no config record")]
    MissingConfig,
    #[error("liveness is only defined under partial synchrony; this trace is asynchronous")]
    AsyncTrace,
    #[error("trace horizon {have} is below the liveness bound {need}")]
    HorizonTooShort { need: u64, have: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Property {
    Safety,
    Liveness,
    Lemma1,
    EventualChoice,
}

impl std::fmt::Display for Property {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Property::Safety => "safety",
            Property::Liveness => "liveness",
            Property::Lemma1 => "lemma1",
            Property::EventualChoice => "eventual-choice",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct Verdict {
    pub property: Property,
    pub holds: bool,
    /// The property had nothing to check (reported for lemma-1 traces with
    /// no dual-path instance).
    pub vacuous: bool,
    /// The scenario ran outside the N >= 3f+1 bound; the verdict is
    /// reported but does not count as a protocol failure.
    pub bounds_exceeded: bool,
    /// Offending records, present exactly when the property fails.
    pub counterexample: Option<Vec<TraceRecord>>,
    pub detail: String,
}

impl Verdict {
    fn pass(property: Property, detail: impl Into<String>) -> Self {
        Verdict {
            property,
            holds: true,
            vacuous: false,
            bounds_exceeded: false,
            counterexample: None,
            detail: detail.into(),
        }
    }

    fn fail(property: Property, detail: impl Into<String>, witness: Vec<TraceRecord>) -> Self {
        Verdict {
            property,
            holds: false,
            vacuous: false,
            bounds_exceeded: false,
            counterexample: Some(witness),
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let state = if self.holds { "PASS" } else { "FAIL" };
        write!(f, "{}: {}", self.property, state)?;
        if self.vacuous {
            write!(f, " (vacuous)")?;
        }
        if self.bounds_exceeded {
            write!(f, " (bounds exceeded)")?;
        }
        if !self.detail.is_empty() {
            write!(f, " — {}", self.detail)?;
        }
        Ok(())
    }
}

pub(crate) struct TraceConfig {
    pub variant: ProtocolVariant,
    pub n: u32,
    pub f: u32,
    pub mode: NetworkMode,
    pub delta: u64,
    pub gst: u64,
    pub horizon: u64,
    pub block_interval: u64,
    pub round_unit: u64,
    pub byzantine: BTreeSet<u32>,
}

impl TraceConfig {
    pub fn of(trace: &Trace) -> Result<Self, CheckerError> {
        match trace.config() {
            Some(TraceRecord::Config {
                variant,
                n,
                f,
                mode,
                delta,
                gst,
                horizon,
                block_interval,
                round_unit,
                byzantine,
                ..
            }) => Ok(TraceConfig {
                variant: *variant,
                n: *n,
                f: *f,
                mode: *mode,
                delta: *delta,
                gst: *gst,
                horizon: *horizon,
                block_interval: *block_interval,
                round_unit: *round_unit,
                byzantine: byzantine.iter().map(|b| b.validator).collect(),
            }),
            _ => Err(CheckerError::MissingConfig),
        }
    }

    pub fn is_correct(&self, v: u32) -> bool {
        !self.byzantine.contains(&v)
    }

    pub fn bounds_exceeded(&self) -> bool {
        self.n < 3 * self.f + 1
    }
}

/// No two correct validators may decide differently for any index, at any
/// point in the trace; final summaries must agree with the decision events.
pub fn check_safety(trace: &Trace) -> Result<Verdict, CheckerError> {
    let cfg = TraceConfig::of(trace)?;
    let mut first: BTreeMap<&str, (&str, &TraceRecord)> = BTreeMap::new();
    let mut verdict = None;
    for r in &trace.records {
        if let TraceRecord::Decision {
            validator,
            index,
            value,
            ..
        } = r
        {
            if !cfg.is_correct(*validator) {
                continue;
            }
            match first.get(index.as_str()) {
                None => {
                    first.insert(index, (value, r));
                }
                Some((v0, r0)) if v0 != value => {
                    verdict = Some(Verdict::fail(
                        Property::Safety,
                        format!("conflicting decisions for index {index}"),
                        vec![(*r0).clone(), r.clone()],
                    ));
                    break;
                }
                Some(_) => {}
            }
        }
    }
    let mut verdict = match verdict {
        Some(v) => v,
        None => {
            // cross-check: final summaries repeat the recorded decisions
            let mut ok = true;
            let mut witness = Vec::new();
            for r in &trace.records {
                if let TraceRecord::Final {
                    validator,
                    decisions,
                    ..
                } = r
                {
                    if !cfg.is_correct(*validator) {
                        continue;
                    }
                    for (i, d) in decisions {
                        if let Some((v0, r0)) = first.get(i.as_str()) {
                            if *v0 != d.value {
                                ok = false;
                                witness = vec![(*r0).clone(), r.clone()];
                            }
                        }
                    }
                }
            }
            if ok {
                Verdict::pass(
                    Property::Safety,
                    format!("{} decided indices", first.len()),
                )
            } else {
                Verdict::fail(
                    Property::Safety,
                    "final summary disagrees with decision events",
                    witness,
                )
            }
        }
    };
    verdict.bounds_exceeded = cfg.bounds_exceeded();
    Ok(verdict)
}

/// Indices a correct validator has seen a transaction for: injections to
/// correct validators, plus transactions inside blocks created by or
/// delivered to correct validators.
fn needed_indices(trace: &Trace, cfg: &TraceConfig) -> BTreeMap<String, u64> {
    let mut blocks: BTreeMap<&str, &TraceRecord> = BTreeMap::new();
    for r in &trace.records {
        if let TraceRecord::Block { hash, .. } = r {
            blocks.insert(hash, r);
        }
    }
    let mut needed: BTreeMap<String, u64> = BTreeMap::new();
    let mut note = |idx: &str, tick: u64| {
        let e = needed.entry(idx.to_string()).or_insert(tick);
        *e = (*e).min(tick);
    };
    for r in &trace.records {
        match r {
            TraceRecord::Inject {
                tick, to, index, ..
            } if cfg.is_correct(*to) => note(index, *tick),
            TraceRecord::Block {
                tick,
                creator,
                txs,
                ..
            } if cfg.is_correct(*creator) => {
                for tx in txs {
                    note(&tx.index, *tick);
                }
            }
            TraceRecord::Deliver { tick, to, item, .. } if cfg.is_correct(*to) => {
                if let Some(TraceRecord::Block { txs, .. }) = blocks.get(item.as_str()) {
                    for tx in txs {
                        note(&tx.index, *tick);
                    }
                }
            }
            _ => {}
        }
    }
    needed
}

/// The conservative decision deadline: one long round plus
/// `N - f + f(N - f)` additional rounds of block production, after the
/// latest relevant injection has spread.
pub fn liveness_bound(cfg_n: u32, cfg_f: u32, block_interval: u64, round_unit: u64, gst: u64, delta: u64, base: u64) -> u64 {
    let extra_rounds = (cfg_n - cfg_f) as u64 + cfg_f as u64 * (cfg_n - cfg_f) as u64;
    let last_round = extra_rounds + 1;
    let blocks = round_unit * round_start_offset(last_round as u32 + 1) + 4;
    base + gst + 3 * delta + block_interval * blocks
}

/// Every index seen by a correct validator reaches a decision at every
/// correct validator within the liveness bound. Only defined for partially
/// synchronous traces; for the side-consensus variants only contested
/// indices are required to decide.
pub fn check_liveness(trace: &Trace) -> Result<Verdict, CheckerError> {
    let cfg = TraceConfig::of(trace)?;
    if cfg.mode != NetworkMode::PartialSync {
        return Err(CheckerError::AsyncTrace);
    }
    let mut needed = needed_indices(trace, &cfg);

    if cfg.variant.uses_side_consensus() {
        // only contested indices go through the side protocol
        let mut alts: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in &trace.records {
            if let TraceRecord::Block { txs, .. } = r {
                for tx in txs {
                    alts.entry(&tx.index).or_default().insert(&tx.hash);
                }
            }
        }
        needed.retain(|i, _| alts.get(i.as_str()).is_some_and(|s| s.len() >= 2));
    }

    let base = needed.values().copied().max().unwrap_or(0);
    let bound = liveness_bound(
        cfg.n,
        cfg.f,
        cfg.block_interval,
        cfg.round_unit,
        cfg.gst,
        cfg.delta,
        base,
    );
    if cfg.horizon < bound {
        return Err(CheckerError::HorizonTooShort {
            need: bound,
            have: cfg.horizon,
        });
    }

    let mut decided: BTreeMap<(u32, &str), u64> = BTreeMap::new();
    for r in &trace.records {
        if let TraceRecord::Decision {
            tick,
            validator,
            index,
            ..
        } = r
        {
            decided.entry((*validator, index)).or_insert(*tick);
        }
    }
    let mut latest = 0u64;
    for (index, _) in &needed {
        for v in 0..cfg.n {
            if !cfg.is_correct(v) {
                continue;
            }
            match decided.get(&(v, index.as_str())) {
                Some(tick) if *tick <= bound => latest = latest.max(*tick),
                Some(tick) => {
                    let mut verdict = Verdict::fail(
                        Property::Liveness,
                        format!(
                            "validator {v} decided index {index} at tick {tick}, past the bound {bound}"
                        ),
                        Vec::new(),
                    );
                    verdict.bounds_exceeded = cfg.bounds_exceeded();
                    return Ok(verdict);
                }
                None => {
                    let mut verdict = Verdict::fail(
                        Property::Liveness,
                        format!("validator {v} never decided index {index}"),
                        Vec::new(),
                    );
                    verdict.bounds_exceeded = cfg.bounds_exceeded();
                    return Ok(verdict);
                }
            }
        }
    }
    let mut verdict = Verdict::pass(
        Property::Liveness,
        format!(
            "{} indices decided everywhere; empirical latest tick {latest}, bound {bound}",
            needed.len()
        ),
    );
    verdict.bounds_exceeded = cfg.bounds_exceeded();
    verdict.vacuous = needed.is_empty();
    Ok(verdict)
}

/// In conflict-exclusion runs where some validators resolved via an
/// FTM-observed set while others completed the side protocol, both paths
/// must name the same value.
pub fn check_lemma1(trace: &Trace) -> Result<Verdict, CheckerError> {
    let cfg = TraceConfig::of(trace)?;
    let mut by_index: BTreeMap<&str, BTreeMap<DecisionPath, (&str, &TraceRecord)>> =
        BTreeMap::new();
    for r in &trace.records {
        if let TraceRecord::Decision {
            validator,
            index,
            value,
            path,
            ..
        } = r
        {
            if !cfg.is_correct(*validator) {
                continue;
            }
            by_index
                .entry(index)
                .or_default()
                .entry(*path)
                .or_insert((value, r));
        }
    }
    let mut dual = 0;
    for paths in by_index.values() {
        let observed = paths.get(&DecisionPath::ObservedSet);
        let side = paths.get(&DecisionPath::SideProtocol);
        if let (Some((v1, r1)), Some((v2, r2))) = (observed, side) {
            dual += 1;
            if v1 != v2 {
                return Ok(Verdict::fail(
                    Property::Lemma1,
                    "exclusion evidence and side protocol disagree",
                    vec![(*r1).clone(), (*r2).clone()],
                ));
            }
        }
    }
    let mut verdict = Verdict::pass(Property::Lemma1, format!("{dual} dual-path instances"));
    verdict.vacuous = dual == 0;
    verdict.bounds_exceeded = cfg.bounds_exceeded();
    Ok(verdict)
}

/// A decision reached without new alternatives arriving in the triggering
/// event must pick one of the previously known alternatives.
pub fn check_eventual_choice(trace: &Trace) -> Result<Verdict, CheckerError> {
    let cfg = TraceConfig::of(trace)?;
    let mut checked = 0;
    for r in &trace.records {
        if let TraceRecord::Decision {
            validator,
            value,
            prior_alts,
            new_alts,
            ..
        } = r
        {
            if !cfg.is_correct(*validator) {
                continue;
            }
            if new_alts.is_empty() && !prior_alts.is_empty() {
                checked += 1;
                if !prior_alts.contains(value) {
                    return Ok(Verdict::fail(
                        Property::EventualChoice,
                        "chosen value was not among the known alternatives",
                        vec![r.clone()],
                    ));
                }
            }
        }
    }
    Ok(Verdict::pass(
        Property::EventualChoice,
        format!("{checked} transitions checked"),
    ))
}

/// All checks that apply to a trace, in reporting order.
pub fn check_all(trace: &Trace) -> Result<Vec<Verdict>, CheckerError> {
    let cfg = TraceConfig::of(trace)?;
    let mut out = vec![check_safety(trace)?];
    if cfg.mode == NetworkMode::PartialSync {
        out.push(check_liveness(trace)?);
    }
    if cfg.variant == ProtocolVariant::ConflictExclude {
        out.push(check_lemma1(trace)?);
    }
    out.push(check_eventual_choice(trace)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::ByzantineAssignment;

    fn config_record(mode: NetworkMode, variant: ProtocolVariant) -> TraceRecord {
        TraceRecord::Config {
            variant,
            n: 4,
            f: 0,
            mode,
            delta: 2,
            gst: 0,
            seed: 0,
            horizon: 100_000,
            block_interval: 10,
            round_unit: 1,
            byzantine: Vec::<ByzantineAssignment>::new(),
        }
    }

    fn decision(validator: u32, index: &str, value: &str, path: DecisionPath) -> TraceRecord {
        TraceRecord::Decision {
            tick: 10,
            validator,
            index: index.into(),
            value: value.into(),
            round: 0,
            path,
            prior_alts: vec![value.to_string()],
            new_alts: vec![],
        }
    }

    #[test]
    fn safety_flags_forged_divergence() {
        let trace = Trace {
            records: vec![
                config_record(NetworkMode::Async, ProtocolVariant::Casanova),
                decision(0, "i", "aa", DecisionPath::VoteRound),
                decision(1, "i", "bb", DecisionPath::VoteRound),
            ],
        };
        let v = check_safety(&trace).unwrap();
        assert!(!v.holds);
        assert_eq!(v.counterexample.as_ref().unwrap().len(), 2);

        let agreeing = Trace {
            records: vec![
                config_record(NetworkMode::Async, ProtocolVariant::Casanova),
                decision(0, "i", "aa", DecisionPath::VoteRound),
                decision(1, "i", "aa", DecisionPath::VoteRound),
            ],
        };
        assert!(check_safety(&agreeing).unwrap().holds);
    }

    #[test]
    fn liveness_rejects_async_traces() {
        let trace = Trace {
            records: vec![config_record(NetworkMode::Async, ProtocolVariant::Casanova)],
        };
        assert!(matches!(check_liveness(&trace), Err(CheckerError::AsyncTrace)));
    }

    #[test]
    fn lemma1_dual_path_agreement_and_vacuity() {
        let dual_ok = Trace {
            records: vec![
                config_record(NetworkMode::PartialSync, ProtocolVariant::ConflictExclude),
                decision(0, "i", "aa", DecisionPath::ObservedSet),
                decision(1, "i", "aa", DecisionPath::SideProtocol),
            ],
        };
        let v = check_lemma1(&dual_ok).unwrap();
        assert!(v.holds && !v.vacuous);

        let divergent = Trace {
            records: vec![
                config_record(NetworkMode::PartialSync, ProtocolVariant::ConflictExclude),
                decision(0, "i", "aa", DecisionPath::ObservedSet),
                decision(1, "i", "bb", DecisionPath::SideProtocol),
            ],
        };
        assert!(!check_lemma1(&divergent).unwrap().holds);

        let single = Trace {
            records: vec![
                config_record(NetworkMode::PartialSync, ProtocolVariant::ConflictExclude),
                decision(0, "i", "aa", DecisionPath::ObservedSet),
            ],
        };
        let v = check_lemma1(&single).unwrap();
        assert!(v.holds && v.vacuous);
    }

    #[test]
    fn eventual_choice_flags_unknown_values() {
        let bad = Trace {
            records: vec![
                config_record(NetworkMode::Async, ProtocolVariant::Casanova),
                TraceRecord::Decision {
                    tick: 5,
                    validator: 0,
                    index: "i".into(),
                    value: "zz".into(),
                    round: 0,
                    path: DecisionPath::VoteRound,
                    prior_alts: vec!["aa".into(), "bb".into()],
                    new_alts: vec![],
                },
            ],
        };
        assert!(!check_eventual_choice(&bad).unwrap().holds);
    }
}
