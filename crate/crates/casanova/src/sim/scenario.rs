//! Scenario files: everything a run needs, in TOML.
//!
//! ```toml
//! variant = "casanova"
//! validators = 4
//! faults = 1
//! seed = 42
//! horizon = 800
//! block_interval = 10
//!
//! [network]
//! mode = "partial-sync"
//! delta = 5
//! gst = 0
//!
//! [[byzantine]]
//! validator = 3
//! behavior = "silent"
//!
//! [[inject]]
//! at = 5
//! payload = "pay-alice"
//! index = "acct-1"
//! recipients = [0, 1]
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::ProtocolVariant;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("validator count must be in 1..=64, got {0}")]
    BadValidatorCount(u32),
    #[error("fault bound violated (N={n} < 3f+1 with f={f}); set allow_exceeded_bounds to run anyway")]
    FaultBound { n: u32, f: u32 },
    #[error("strict bounds requested: refusing N={n}, f={f}")]
    StrictBounds { n: u32, f: u32 },
    #[error("{assigned} byzantine assignments but faults = {f}")]
    FaultBudget { assigned: usize, f: u32 },
    #[error("byzantine assignment names validator {0} outside [0, N)")]
    BadByzantineValidator(u32),
    #[error("duplicate byzantine assignment for validator {0}")]
    DuplicateByzantine(u32),
    #[error("injection {0} names recipient outside [0, N)")]
    BadRecipient(usize),
    #[error("injection {0} scheduled after the horizon")]
    LateInjection(usize),
    #[error("network delta must be >= 1")]
    BadDelta,
    #[error("probability out of range: {0}")]
    BadProbability(&'static str),
    #[error("block_interval must be >= 1")]
    BadBlockInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkMode {
    /// Arbitrary drops, reorders and duplication; no delivery bound.
    Async,
    /// Every message sent at `t` is delivered by `max(t, gst) + delta`.
    PartialSync,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub mode: NetworkMode,
    pub delta: u64,
    pub gst: u64,
    /// Async mode only.
    pub drop_prob: f64,
    pub duplicate_prob: f64,
    pub reorder_window: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            mode: NetworkMode::PartialSync,
            delta: 2,
            gst: 0,
            drop_prob: 0.0,
            duplicate_prob: 0.0,
            reorder_window: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    /// Produces blocks and messages but never sends them.
    Silent,
    /// Maintains two diverging chains shown to disjoint halves of the peers.
    Equivocator,
    /// Adds a conflicting second vote for every vote it casts.
    DoubleVoter,
    /// Floods fresh alternatives for contested indices, past the bound.
    Spammer,
    /// Seeded random mix of valid-format misbehavior.
    Arbitrary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByzantineAssignment {
    pub validator: u32,
    pub behavior: Behavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub at: u64,
    pub payload: String,
    pub index: String,
    pub recipients: Vec<u32>,
    /// Transaction hashes (hex) this event requires to be recorded first.
    #[serde(default)]
    pub parents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DlsParams {
    pub base_round: u64,
    pub phase_increment: u64,
}

impl Default for DlsParams {
    fn default() -> Self {
        DlsParams {
            base_round: 4,
            phase_increment: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub variant: ProtocolVariant,
    pub validators: u32,
    #[serde(default)]
    pub faults: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default = "default_block_interval")]
    pub block_interval: u64,
    /// Scales the voting-round schedule, in blocks.
    #[serde(default = "default_round_unit")]
    pub round_unit: u64,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub dls: DlsParams,
    #[serde(default)]
    pub byzantine: Vec<ByzantineAssignment>,
    #[serde(default, rename = "inject")]
    pub injections: Vec<Injection>,
    /// Deliberately run outside the N >= 3f+1 bound (negative testing).
    #[serde(default)]
    pub allow_exceeded_bounds: bool,
}

fn default_seed() -> u64 {
    0
}
fn default_horizon() -> u64 {
    1000
}
fn default_block_interval() -> u64 {
    10
}
fn default_round_unit() -> u64 {
    1
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        sc.validate(false)?;
        Ok(sc)
    }

    pub fn validate(&self, strict_bounds: bool) -> Result<(), ScenarioError> {
        let n = self.validators;
        let f = self.faults;
        if n < 1 || n > 64 {
            return Err(ScenarioError::BadValidatorCount(n));
        }
        if n < 3 * f + 1 {
            if strict_bounds {
                return Err(ScenarioError::StrictBounds { n, f });
            }
            if !self.allow_exceeded_bounds {
                return Err(ScenarioError::FaultBound { n, f });
            }
        } else if strict_bounds && self.allow_exceeded_bounds {
            // allowed: the flag is only meaningful when bounds are exceeded
        }
        if self.byzantine.len() != f as usize {
            return Err(ScenarioError::FaultBudget {
                assigned: self.byzantine.len(),
                f,
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for b in &self.byzantine {
            if b.validator >= n {
                return Err(ScenarioError::BadByzantineValidator(b.validator));
            }
            if !seen.insert(b.validator) {
                return Err(ScenarioError::DuplicateByzantine(b.validator));
            }
        }
        for (k, inj) in self.injections.iter().enumerate() {
            if inj.recipients.iter().any(|&r| r >= n) {
                return Err(ScenarioError::BadRecipient(k));
            }
            if inj.at > self.horizon {
                return Err(ScenarioError::LateInjection(k));
            }
        }
        if self.network.delta == 0 {
            return Err(ScenarioError::BadDelta);
        }
        for (p, name) in [
            (self.network.drop_prob, "drop_prob"),
            (self.network.duplicate_prob, "duplicate_prob"),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ScenarioError::BadProbability(name));
            }
        }
        if self.block_interval == 0 {
            return Err(ScenarioError::BadBlockInterval);
        }
        Ok(())
    }

    pub fn is_byzantine(&self, v: u32) -> bool {
        self.byzantine.iter().any(|b| b.validator == v)
    }

    pub fn behavior_of(&self, v: u32) -> Option<Behavior> {
        self.byzantine
            .iter()
            .find(|b| b.validator == v)
            .map(|b| b.behavior)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
variant = "casanova"
validators = 4
faults = 1

[[byzantine]]
validator = 3
behavior = "silent"

[[inject]]
at = 5
payload = "pay"
index = "acct"
recipients = [0, 1]
"#;

    #[test]
    fn parses_minimal_scenario() {
        let sc = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(sc.validators, 4);
        assert_eq!(sc.faults, 1);
        assert_eq!(sc.network.mode, NetworkMode::PartialSync);
        assert_eq!(sc.behavior_of(3), Some(Behavior::Silent));
        assert_eq!(sc.injections.len(), 1);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = MINIMAL.replace("faults = 1", "faults = 2");
        assert!(matches!(
            Scenario::from_toml(&bad),
            Err(ScenarioError::FaultBound { .. })
        ));
        let bad = MINIMAL.replace("recipients = [0, 1]", "recipients = [0, 9]");
        assert!(matches!(
            Scenario::from_toml(&bad),
            Err(ScenarioError::BadRecipient(0))
        ));
        let bad = MINIMAL.replace("validator = 3", "validator = 3\n\n[[byzantine]]\nvalidator = 2");
        assert!(Scenario::from_toml(&bad).is_err());
        assert!(matches!(
            Scenario::from_toml("not toml at all ["),
            Err(ScenarioError::Parse(_))
        ));
    }

    #[test]
    fn strict_bounds_refuses_exceeded_configs() {
        let exceeded = MINIMAL
            .replace("faults = 1", "faults = 2\nallow_exceeded_bounds = true")
            .replace(
                "[[byzantine]]\nvalidator = 3\nbehavior = \"silent\"",
                "[[byzantine]]\nvalidator = 3\nbehavior = \"silent\"\n\n[[byzantine]]\nvalidator = 2\nbehavior = \"silent\"",
            );
        let sc = Scenario::from_toml(&exceeded).unwrap();
        assert!(sc.validate(false).is_ok());
        assert!(matches!(
            sc.validate(true),
            Err(ScenarioError::StrictBounds { .. })
        ));
    }
}
