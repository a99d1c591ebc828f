//! Quorum and round arithmetic.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QuorumError {
    #[error("fault bound violated: need N >= 3f + 1, got N={n}, f={f}")]
    FaultBound { n: u32, f: u32 },
}

/// Quorum sizes for `N` validators tolerating `f` Byzantine faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuorumSizes {
    /// Non-Faulty Majority: a majority of the correct validators.
    pub nfm: u32,
    /// Fault Tolerant Majority: a quorum guaranteed to contain an NFM.
    pub ftm: u32,
}

fn ceil_div2(x: u32) -> u32 {
    x / 2 + x % 2
}

/// NFM = ceil((N - f + 1) / 2), FTM = ceil((N + f + 1) / 2) = NFM + f.
/// Rejects configurations below the N >= 3f + 1 bound.
pub fn quorum_sizes(n: u32, f: u32) -> Result<QuorumSizes, QuorumError> {
    if n < 3 * f + 1 {
        return Err(QuorumError::FaultBound { n, f });
    }
    Ok(QuorumSizes {
        nfm: ceil_div2(n - f + 1),
        ftm: ceil_div2(n + f + 1),
    })
}

/// Like [`quorum_sizes`] but accepts configurations that exceed the fault
/// bound (for negative testing of deliberately broken scenarios).
pub fn quorum_sizes_unchecked(n: u32, f: u32) -> QuorumSizes {
    QuorumSizes {
        nfm: ceil_div2(n.saturating_sub(f) + 1),
        ftm: ceil_div2(n + f + 1),
    }
}

/// Block offset, counted in the validator's own blocks, at which voting
/// round `r` begins relative to the block that began round 0: r(r+3)/2.
pub fn round_start_offset(r: u32) -> u64 {
    let r = r as u64;
    r * (r + 3) / 2
}

/// Cap on the alternatives considered for one conflict index:
/// N - f + f(N - f).
pub fn alternatives_bound(n: u32, f: u32) -> u64 {
    let (n, f) = (n as u64, f as u64);
    n - f + f * (n - f)
}
