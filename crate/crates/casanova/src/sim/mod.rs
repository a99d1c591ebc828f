//! Deterministic discrete-event simulator: N validator machines, a message
//! delivery adversary (asynchronous or partially synchronous), Byzantine
//! behavior models, and seeded reproducibility. The trace of a run is a pure
//! function of (scenario, seed).

pub mod byzantine;
pub mod scenario;
pub mod trace;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dls::{DlsBody, DlsMessage};
use crate::protocol::{Effect, MachineParams, ProtocolVariant, ValidatorMachine};
use crate::types::{Block, ConflictIndex, Transaction, TxHash, ValidatorId};

pub use byzantine::Node;
pub use scenario::{Behavior, NetworkMode, Scenario, ScenarioError};
pub use trace::{DeliverKind, FinalDecision, Trace, TraceRecord, TxRecord, VoteRecord};

#[derive(Debug, Clone)]
enum Payload {
    Timer,
    ClientTx(Transaction),
    Block {
        from: ValidatorId,
        block: Block,
        sent: u64,
    },
    Dls {
        from: ValidatorId,
        msg: DlsMessage,
        sent: u64,
    },
    DlsTick(ConflictIndex),
}

#[derive(Debug, Clone)]
struct QueuedEvent {
    at: u64,
    seq: u64,
    target: u32,
    payload: Payload,
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for QueuedEvent {}
impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we want the earliest event
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}
impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct Simulation {
    scenario: Scenario,
    seed: u64,
    nodes: Vec<Node>,
    queue: BinaryHeap<QueuedEvent>,
    next_seq: u64,
    now: u64,
    rng: ChaCha8Rng,
    records: Vec<TraceRecord>,
    /// Correct validators gossip each block they see once; this tracks what
    /// each has already forwarded.
    relayed: Vec<BTreeSet<crate::types::BlockHash>>,
    finalized: bool,
}

impl Simulation {
    /// Builds a simulation; `seed` overrides the scenario's seed when given.
    pub fn new(scenario: Scenario, seed: Option<u64>) -> Result<Self, ScenarioError> {
        scenario.validate(false)?;
        let seed = seed.unwrap_or(scenario.seed);
        let n = scenario.validators;
        let mut params = MachineParams::new(n, scenario.faults, scenario.variant);
        params.dls.base_round = scenario.dls.base_round;
        params.dls.phase_increment = scenario.dls.phase_increment;
        params.round_unit = scenario.round_unit;
        let nodes: Vec<Node> = (0..n)
            .map(|v| Node::new(ValidatorId(v), params.clone(), scenario.behavior_of(v)))
            .collect();

        let mut sim = Simulation {
            seed,
            nodes,
            queue: BinaryHeap::new(),
            next_seq: 0,
            now: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            records: Vec::new(),
            relayed: vec![BTreeSet::new(); n as usize],
            finalized: false,
            scenario,
        };
        sim.records.push(TraceRecord::Config {
            variant: sim.scenario.variant,
            n,
            f: sim.scenario.faults,
            mode: sim.scenario.network.mode,
            delta: sim.scenario.network.delta,
            gst: sim.scenario.network.gst,
            seed,
            horizon: sim.scenario.horizon,
            block_interval: sim.scenario.block_interval,
            round_unit: sim.scenario.round_unit,
            byzantine: sim.scenario.byzantine.clone(),
        });
        for inj in sim.scenario.injections.clone() {
            let parents: BTreeSet<TxHash> = inj
                .parents
                .iter()
                .filter_map(|h| TxHash::from_hex(h))
                .collect();
            let tx = Transaction::new(
                inj.payload.clone().into_bytes(),
                ConflictIndex::new(inj.index.clone()),
                parents,
            );
            for &r in &inj.recipients {
                sim.schedule(inj.at, r, Payload::ClientTx(tx.clone()));
            }
        }
        for v in 0..n {
            sim.schedule(sim.scenario.block_interval, v, Payload::Timer);
        }
        Ok(sim)
    }

    /// Runs the scenario to its horizon and emits the trace.
    pub fn run(scenario: Scenario, seed: Option<u64>) -> Result<Trace, ScenarioError> {
        let mut sim = Simulation::new(scenario, seed)?;
        let horizon = sim.scenario.horizon;
        sim.run_to(horizon);
        Ok(sim.finalize())
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn node(&self, v: u32) -> &Node {
        &self.nodes[v as usize]
    }

    pub fn machine(&self, v: u32) -> &ValidatorMachine {
        self.nodes[v as usize].machine()
    }

    pub fn correct_validators(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.scenario.validators).filter(|v| !self.scenario.is_byzantine(*v))
    }

    /// Re-seeds the network adversary; used to continue a finished run
    /// under a fresh adversarial schedule.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn schedule(&mut self, at: u64, target: u32, payload: Payload) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(QueuedEvent {
            at,
            seq,
            target,
            payload,
        });
    }

    /// Processes every event scheduled at or before `until`.
    pub fn run_to(&mut self, until: u64) {
        while let Some(ev) = self.queue.peek() {
            if ev.at > until {
                break;
            }
            let ev = self.queue.pop().unwrap();
            self.step_event(ev);
        }
        self.now = self.now.max(until);
    }

    fn step_event(&mut self, ev: QueuedEvent) {
        self.now = ev.at;
        let target = ev.target;
        match ev.payload {
            Payload::Timer => {
                let peers: Vec<ValidatorId> = (0..self.scenario.validators)
                    .filter(|v| *v != target)
                    .map(ValidatorId)
                    .collect();
                let (outs, effects) =
                    self.nodes[target as usize].handle_timer(self.now, &peers, &mut self.rng);
                for out in outs {
                    self.record_block(&out.block);
                    self.route_block(ValidatorId(target), out.block, &out.recipients);
                }
                self.process_effects(target, effects);
                let next = self.now + self.scenario.block_interval;
                self.schedule(next, target, Payload::Timer);
            }
            Payload::ClientTx(tx) => {
                self.records.push(TraceRecord::Inject {
                    tick: self.now,
                    to: target,
                    tx: tx.hash().to_hex(),
                    index: tx.index().as_str().to_string(),
                });
                self.nodes[target as usize].handle_client_tx(tx, self.now);
            }
            Payload::Block { from, block, sent } => {
                self.records.push(TraceRecord::Deliver {
                    tick: self.now,
                    to: target,
                    from: from.0,
                    kind: DeliverKind::Block,
                    item: block.hash().to_hex(),
                    sent,
                });
                let relay = !self.nodes[target as usize].is_byzantine()
                    && self.relayed[target as usize].insert(block.hash());
                let effects = self.nodes[target as usize].handle_block(block.clone(), self.now);
                self.process_effects(target, effects);
                // Gossip: a correct validator forwards each block it sees
                // once, so every broadcast eventually reaches everyone even
                // when the creator sent it selectively.
                if relay {
                    let peers: Vec<ValidatorId> = (0..self.scenario.validators)
                        .filter(|v| *v != target && *v != from.0)
                        .map(ValidatorId)
                        .collect();
                    self.route_block(ValidatorId(target), block, &peers);
                }
            }
            Payload::Dls { from, msg, sent } => {
                self.records.push(TraceRecord::Deliver {
                    tick: self.now,
                    to: target,
                    from: from.0,
                    kind: DeliverKind::Dls,
                    item: dls_item(&msg),
                    sent,
                });
                let effects = self.nodes[target as usize].handle_dls(msg, self.now);
                self.process_effects(target, effects);
            }
            Payload::DlsTick(index) => {
                let effects = self.nodes[target as usize].handle_dls_tick(&index, self.now);
                self.process_effects(target, effects);
            }
        }
    }

    fn record_block(&mut self, b: &Block) {
        self.records.push(TraceRecord::Block {
            tick: self.now,
            creator: b.creator().0,
            seq: b.seq(),
            hash: b.hash().to_hex(),
            txs: b
                .transactions()
                .iter()
                .map(|t| TxRecord {
                    hash: t.hash().to_hex(),
                    index: t.index().as_str().to_string(),
                })
                .collect(),
            votes: b
                .votes()
                .iter()
                .map(|v| VoteRecord {
                    index: v.index.as_str().to_string(),
                    choice: v.choice.to_hex(),
                    round: v.round,
                    evidence: v.lock_evidence,
                })
                .collect(),
            attests: b
                .conflict_attestations()
                .iter()
                .map(|(i, r)| (i.as_str().to_string(), *r))
                .collect(),
        });
    }

    fn process_effects(&mut self, source: u32, effects: Vec<Effect>) {
        for e in effects {
            match e {
                Effect::DlsSend(out) => {
                    let msg = out.msg;
                    let recipients: Vec<u32> = match out.to {
                        Some(t) if t.0 != source => vec![t.0],
                        Some(_) => Vec::new(), // self-sends already looped back
                        None => (0..self.scenario.validators)
                            .filter(|v| *v != source)
                            .collect(),
                    };
                    for r in recipients {
                        let sent = self.now;
                        if let Some(at) = self.delivery_time() {
                            self.schedule(
                                at,
                                r,
                                Payload::Dls {
                                    from: ValidatorId(source),
                                    msg: msg.clone(),
                                    sent,
                                },
                            );
                        }
                        if self.duplicate_roll() {
                            if let Some(at) = self.delivery_time() {
                                self.schedule(
                                    at,
                                    r,
                                    Payload::Dls {
                                        from: ValidatorId(source),
                                        msg: msg.clone(),
                                        sent,
                                    },
                                );
                            }
                        }
                    }
                }
                Effect::DlsSchedule { index, at } => {
                    let at = at.max(self.now + 1);
                    self.schedule(at, source, Payload::DlsTick(index));
                }
                Effect::Decided(d) => {
                    self.records.push(TraceRecord::Decision {
                        tick: self.now,
                        validator: source,
                        index: d.index.as_str().to_string(),
                        value: d.value.to_hex(),
                        round: d.round,
                        path: d.path,
                        prior_alts: d.prior_alternatives.iter().map(|h| h.to_hex()).collect(),
                        new_alts: d.new_alternatives.iter().map(|h| h.to_hex()).collect(),
                    });
                }
                Effect::FaultRecorded { peer, kind } => {
                    self.records.push(TraceRecord::Fault {
                        tick: self.now,
                        validator: source,
                        peer: peer.0,
                        kind: format!("{kind:?}"),
                    });
                }
            }
        }
    }

    fn route_block(&mut self, from: ValidatorId, block: Block, recipients: &[ValidatorId]) {
        let sent = self.now;
        for r in recipients {
            if let Some(at) = self.delivery_time() {
                self.schedule(
                    at,
                    r.0,
                    Payload::Block {
                        from,
                        block: block.clone(),
                        sent,
                    },
                );
            }
            if self.duplicate_roll() {
                if let Some(at) = self.delivery_time() {
                    self.schedule(
                        at,
                        r.0,
                        Payload::Block {
                            from,
                            block: block.clone(),
                            sent,
                        },
                    );
                }
            }
        }
    }

    /// When a message sent now arrives, or None when the adversary drops it.
    fn delivery_time(&mut self) -> Option<u64> {
        let net = &self.scenario.network;
        match net.mode {
            NetworkMode::PartialSync => {
                // delivered within (send, max(send, gst) + delta]
                let base = self.now.max(net.gst);
                Some(base + 1 + self.rng.random_range(0..net.delta))
            }
            NetworkMode::Async => {
                if net.drop_prob > 0.0 && self.rng.random_bool(net.drop_prob) {
                    return None;
                }
                Some(self.now + 1 + self.rng.random_range(0..=net.reorder_window))
            }
        }
    }

    fn duplicate_roll(&mut self) -> bool {
        let p = self.scenario.network.duplicate_prob;
        p > 0.0 && self.rng.random_bool(p)
    }

    /// Appends the per-validator summary records and returns the trace.
    pub fn finalize(&mut self) -> Trace {
        if !self.finalized {
            self.finalized = true;
            for v in 0..self.scenario.validators {
                let m = self.nodes[v as usize].machine();
                let decisions = m
                    .resolutions()
                    .iter()
                    .map(|(i, r)| {
                        (
                            i.as_str().to_string(),
                            FinalDecision {
                                value: r.value.to_hex(),
                                round: r.round,
                                path: r.path,
                            },
                        )
                    })
                    .collect();
                self.records.push(TraceRecord::Final {
                    validator: v,
                    blocks: m.dag().len(),
                    pending: m.dag().pending_len(),
                    dag_digest: hex::encode(m.dag().digest()),
                    decisions,
                });
            }
        }
        Trace {
            records: self.records.clone(),
        }
    }
}

fn dls_item(msg: &DlsMessage) -> String {
    let kind = match &msg.body {
        DlsBody::Accept { .. } => "accept",
        DlsBody::Lock { .. } => "lock",
        DlsBody::Ack { .. } => "ack",
        DlsBody::LockEvidence { .. } => "lock-evidence",
        DlsBody::Decide { .. } => "decide",
    };
    format!("{}:{}@{}", msg.index.as_str(), kind, msg.phase)
}

/// Convenience: run a scenario at a seed, also verifying trace determinism
/// by executing it twice and comparing bytes. Used throughout the test
/// suites so every scenario they run enforces the determinism contract.
pub fn run_replicated(scenario: &Scenario, seed: u64) -> Result<Trace, ScenarioError> {
    let t1 = Simulation::run(scenario.clone(), Some(seed))?;
    let t2 = Simulation::run(scenario.clone(), Some(seed))?;
    assert_eq!(
        t1.to_jsonl(),
        t2.to_jsonl(),
        "identical (scenario, seed) must produce byte-identical traces"
    );
    Ok(t1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::DecisionPath;
    use crate::sim::scenario::{ByzantineAssignment, DlsParams, Injection, NetworkConfig};

    pub(crate) fn base_scenario(variant: ProtocolVariant, n: u32, f: u32) -> Scenario {
        Scenario {
            variant,
            validators: n,
            faults: f,
            seed: 1,
            horizon: 600,
            block_interval: 10,
            round_unit: 1,
            network: NetworkConfig::default(),
            dls: DlsParams::default(),
            byzantine: Vec::new(),
            injections: Vec::new(),
            allow_exceeded_bounds: false,
        }
    }

    fn inject(at: u64, payload: &str, index: &str, recipients: &[u32]) -> Injection {
        Injection {
            at,
            payload: payload.into(),
            index: index.into(),
            recipients: recipients.to_vec(),
            parents: Vec::new(),
        }
    }

    #[test]
    fn single_validator_attest_records_the_transaction() {
        let mut sc = base_scenario(ProtocolVariant::Attest, 1, 0);
        sc.injections.push(inject(2, "pay", "acct", &[0]));
        let trace = run_replicated(&sc, 7).unwrap();
        let decided = trace.decisions().count();
        assert_eq!(decided, 1);
        match trace.records.last().unwrap() {
            TraceRecord::Final { decisions, .. } => {
                assert!(decisions.contains_key("acct"));
            }
            other => panic!("expected final record, got {other:?}"),
        }
    }

    #[test]
    fn double_spend_resolves_identically_everywhere() {
        let mut sc = base_scenario(ProtocolVariant::Casanova, 4, 0);
        sc.network.delta = 2;
        sc.injections.push(inject(5, "pay-a", "acct", &[0, 1]));
        sc.injections.push(inject(5, "pay-b", "acct", &[2, 3]));
        let trace = run_replicated(&sc, 3).unwrap();
        let mut values = BTreeSet::new();
        for r in trace.decisions() {
            if let TraceRecord::Decision { index, value, .. } = r {
                if index == "acct" {
                    values.insert(value.clone());
                }
            }
        }
        assert_eq!(values.len(), 1, "all validators choose the same value");
        // the chosen value is the lowest hash (no locks could have formed
        // before the conflict was everywhere)
        let e = Transaction::new(b"pay-a".to_vec(), "acct".into(), BTreeSet::new());
        let e2 = Transaction::new(b"pay-b".to_vec(), "acct".into(), BTreeSet::new());
        let expect = e.hash().min(e2.hash()).to_hex();
        assert_eq!(values.into_iter().next().unwrap(), expect);
    }

    #[test]
    fn partial_sync_respects_delivery_bound() {
        let mut sc = base_scenario(ProtocolVariant::Casanova, 4, 0);
        sc.network.delta = 5;
        sc.network.gst = 50;
        sc.injections.push(inject(0, "pay-a", "acct", &[0, 1]));
        sc.injections.push(inject(0, "pay-b", "acct", &[2, 3]));
        let trace = run_replicated(&sc, 11).unwrap();
        // every transmission sent at T must arrive by max(T, gst) + delta
        for r in &trace.records {
            if let TraceRecord::Deliver { tick, sent, .. } = r {
                assert!(*tick > *sent);
                assert!(*tick <= sent.max(&sc.network.gst) + sc.network.delta);
            }
        }
    }

    #[test]
    fn async_drops_and_duplicates_are_tolerated() {
        let mut sc = base_scenario(ProtocolVariant::Attest, 4, 0);
        sc.network.mode = NetworkMode::Async;
        sc.network.drop_prob = 0.3;
        sc.network.duplicate_prob = 0.2;
        sc.network.reorder_window = 20;
        sc.injections.push(inject(3, "pay", "acct", &[0, 1, 2, 3]));
        let trace = run_replicated(&sc, 5).unwrap();
        // duplicates delivered, DAGs unchanged by the second copy: every
        // correct validator still records the transaction exactly once
        for r in &trace.records {
            if let TraceRecord::Final { decisions, .. } = r {
                assert_eq!(decisions["acct"].path, DecisionPath::Attestation);
            }
        }
    }

    #[test]
    fn silent_byzantine_still_allows_decisions() {
        let mut sc = base_scenario(ProtocolVariant::Casanova, 4, 1);
        sc.byzantine.push(ByzantineAssignment {
            validator: 3,
            behavior: Behavior::Silent,
        });
        sc.injections.push(inject(5, "pay-a", "acct", &[0, 1]));
        sc.injections.push(inject(5, "pay-b", "acct", &[2, 3]));
        let trace = run_replicated(&sc, 9).unwrap();
        let mut deciders = BTreeSet::new();
        for r in trace.decisions() {
            if let TraceRecord::Decision {
                validator, index, ..
            } = r
            {
                if index == "acct" {
                    deciders.insert(*validator);
                }
            }
        }
        for v in [0, 1, 2] {
            assert!(deciders.contains(&v), "validator {v} must decide");
        }
    }

    #[test]
    fn equivocator_is_detected_and_excluded() {
        let mut sc = base_scenario(ProtocolVariant::Casanova, 4, 1);
        sc.byzantine.push(ByzantineAssignment {
            validator: 0,
            behavior: Behavior::Equivocator,
        });
        sc.injections.push(inject(5, "pay-a", "acct", &[0, 1]));
        sc.injections.push(inject(5, "pay-b", "acct", &[2, 3]));
        let mut sim = Simulation::new(sc.clone(), Some(2)).unwrap();
        sim.run_to(sc.horizon);
        // both branches spread far enough that correct validators prove the
        // fork
        let seen_fork = (1..4).any(|v| {
            sim.machine(v)
                .dag()
                .is_equivocator(crate::types::ValidatorId(0))
        });
        assert!(seen_fork, "fork must be visible to someone");
    }
}
