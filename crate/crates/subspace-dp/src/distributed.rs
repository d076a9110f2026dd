//! Distributed privatization of an identity release over disjoint shards.
//!
//! Several agents each hold one contiguous block of the database vector.
//! Every agent independently regenerates the SAME full-length noise vector
//! from a common seed (the noise is a pure function of the mechanism
//! configuration and the seed, never of the data), adds the slice covering
//! its own block, and publishes that block. Concatenating the blocks equals
//! the centralized release of the same mechanism with the same seed
//! bitwise: both paths execute the identical floating-point additions.
//!
//! Full regeneration then slicing is the only faithful strategy here: the
//! null-space projection couples coordinates across blocks, so an agent
//! cannot produce its slice from a shorter stream.
//!
//! Agents are simulated in-process but exchange their results through a
//! defined wire format so serialization is exercised. Each report carries a
//! digest of the regenerated noise; the aggregator compares digests across
//! agents before splicing, which catches a de-synchronized seed
//! deterministically.

use nalgebra::DVector;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::invariant::InvariantSystem;
use crate::mechanism::{MechanismId, NoiseScale, PreparedMechanism};
use crate::noise::NoiseSource;
use crate::query::{Histogram, LinearQuery};

/// Disjoint contiguous index blocks covering `0..n`, one per agent. Agent
/// ids are block positions (agent `l` owns the `l`-th block).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    ranges: Vec<(usize, usize)>,
    n: usize,
}

impl Partition {
    /// Split `0..n` into `m` blocks of near-equal size (the first `n mod m`
    /// blocks take one extra element).
    pub fn contiguous(n: usize, m: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::PartitionInvalid("empty index range".into()));
        }
        if m == 0 || m > n {
            return Err(Error::PartitionInvalid(format!(
                "cannot split {n} indices into {m} non-empty blocks"
            )));
        }
        let base = n / m;
        let extra = n % m;
        let mut ranges = Vec::with_capacity(m);
        let mut start = 0;
        for l in 0..m {
            let len = base + usize::from(l < extra);
            ranges.push((start, len));
            start += len;
        }
        Ok(Partition { ranges, n })
    }

    /// Build from explicit block sizes laid out left to right.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::PartitionInvalid("no blocks".into()));
        }
        if let Some(pos) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::PartitionInvalid(format!("block {pos} is empty")));
        }
        let mut ranges = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            ranges.push((start, len));
            start += len;
        }
        Ok(Partition { ranges, n: start })
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn m(&self) -> usize {
        self.ranges.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn range_of(&self, agent_id: u64) -> Option<(usize, usize)> {
        self.ranges.get(agent_id as usize).copied()
    }
}

/// One agent's published block plus the evidence the aggregator checks.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentReport {
    pub agent_id: u64,
    pub start: usize,
    pub len: usize,
    pub y_block: Vec<f64>,
    pub seed: u64,
    pub noise_digest: u64,
}

impl AgentReport {
    /// Wire format, all little-endian: `u64` block length, that many `f64`
    /// values, `u64` agent id, `u64` noise digest.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.y_block.len() + 3));
        out.extend_from_slice(&(self.y_block.len() as u64).to_le_bytes());
        for v in &self.y_block {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.agent_id.to_le_bytes());
        out.extend_from_slice(&self.noise_digest.to_le_bytes());
        out
    }

    /// Parse a wire payload. `partition` and `seed` supply the block layout
    /// and origin fields the wire intentionally omits.
    pub fn decode(bytes: &[u8], partition: &Partition, seed: u64) -> Result<Self> {
        let take = |bytes: &[u8], at: usize| -> Result<[u8; 8]> {
            bytes
                .get(at..at + 8)
                .and_then(|s| s.try_into().ok())
                .ok_or_else(|| Error::WireFormat(format!("truncated payload at byte {at}")))
        };
        let len = u64::from_le_bytes(take(bytes, 0)?) as usize;
        let expected_total = 8 * (len + 3);
        if bytes.len() != expected_total {
            return Err(Error::WireFormat(format!(
                "payload is {} bytes, block length {len} requires {expected_total}",
                bytes.len()
            )));
        }
        let mut y_block = Vec::with_capacity(len);
        for i in 0..len {
            y_block.push(f64::from_le_bytes(take(bytes, 8 * (i + 1))?));
        }
        let agent_id = u64::from_le_bytes(take(bytes, 8 * (len + 1))?);
        let noise_digest = u64::from_le_bytes(take(bytes, 8 * (len + 2))?);
        let (start, want_len) = partition
            .range_of(agent_id)
            .ok_or_else(|| Error::WireFormat(format!("unknown agent id {agent_id}")))?;
        if want_len != len {
            return Err(Error::WireFormat(format!(
                "agent {agent_id} block length {len} does not match partition ({want_len})"
            )));
        }
        Ok(AgentReport {
            agent_id,
            start,
            len,
            y_block,
            seed,
            noise_digest,
        })
    }
}

/// 64-bit digest of a regenerated noise vector (plus the seed it came
/// from): the cross-agent equality witness.
fn noise_digest(seed: u64, noise: &DVector<f64>) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"agent-noise-v1");
    hasher.update(seed.to_le_bytes());
    for v in noise.iter() {
        hasher.update(v.to_bits().to_le_bytes());
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}

fn check_additive(id: MechanismId) -> Result<()> {
    // Every runnable mechanism adds data-independent noise (the correlated
    // variant included: its shape depends on the query, not the data).
    // Composed releases are assembled objects, not a runnable noise recipe.
    if id == MechanismId::Composed {
        return Err(Error::NonAdditiveMechanism(id.to_string()));
    }
    Ok(())
}

/// Simulate the agent fleet. Each agent prepares the mechanism on its own,
/// regenerates the full noise vector from `(seed, stream 0)`, slices its
/// block, and adds its shard of `x`. Agents listed in `faulty_agents` use
/// `seed + 1`, modeling a de-synchronized replica; their reports are
/// returned as produced so the aggregator's checks can be exercised.
pub fn simulate_agents(
    x: &Histogram,
    sys: &InvariantSystem,
    mechanism: MechanismId,
    scale: NoiseScale,
    seed: u64,
    partition: &Partition,
    faulty_agents: &[u64],
) -> Result<Vec<AgentReport>> {
    check_additive(mechanism)?;
    if partition.n() != sys.n() {
        return Err(Error::DimensionMismatch {
            what: "partition vs invariant system",
            expected: sys.n(),
            got: partition.n(),
        });
    }
    if x.d() != sys.n() {
        return Err(Error::DimensionMismatch {
            what: "database vs invariant system",
            expected: sys.n(),
            got: x.d(),
        });
    }
    let query = LinearQuery::identity(sys.n());
    // Fail fast on configuration errors before spawning anything.
    PreparedMechanism::prepare(mechanism, &query, sys, scale)?;

    let counts = x.counts();
    let results: Vec<Result<AgentReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..partition.m())
            .map(|l| {
                let (start, len) = partition.ranges()[l];
                let query = &query;
                let agent_seed = if faulty_agents.contains(&(l as u64)) {
                    seed.wrapping_add(1)
                } else {
                    seed
                };
                scope.spawn(move || -> Result<AgentReport> {
                    let prepared = PreparedMechanism::prepare(mechanism, query, sys, scale)?;
                    let noise = prepared.noise(NoiseSource::new(agent_seed, 0));
                    let digest = noise_digest(agent_seed, &noise);
                    let y_block: Vec<f64> =
                        (start..start + len).map(|i| counts[i] + noise[i]).collect();
                    Ok(AgentReport {
                        agent_id: l as u64,
                        start,
                        len,
                        y_block,
                        seed: agent_seed,
                        noise_digest: digest,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("agent thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// Splice agent blocks into the full release vector without digest checks.
/// Coverage is still enforced: every block present exactly once with the
/// partition's layout.
pub fn assemble_unchecked(reports: &[AgentReport], partition: &Partition) -> Result<DVector<f64>> {
    let mut seen = vec![false; partition.m()];
    let mut out = DVector::zeros(partition.n());
    for report in reports {
        let (start, len) = partition.range_of(report.agent_id).ok_or_else(|| {
            Error::PartitionInvalid(format!("unknown agent id {}", report.agent_id))
        })?;
        let idx = report.agent_id as usize;
        if seen[idx] {
            return Err(Error::PartitionInvalid(format!(
                "duplicate report for agent {}",
                report.agent_id
            )));
        }
        if report.start != start || report.len != len || report.y_block.len() != len {
            return Err(Error::PartitionInvalid(format!(
                "agent {} block does not match the partition layout",
                report.agent_id
            )));
        }
        seen[idx] = true;
        for (offset, v) in report.y_block.iter().enumerate() {
            out[start + offset] = *v;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::MissingAgent {
            agent_id: missing as u64,
        });
    }
    Ok(out)
}

/// Validate digests across agents, then splice. A de-synchronized agent
/// regenerates different noise, so its digest disagrees with the majority
/// and is reported.
pub fn aggregate(reports: &[AgentReport], partition: &Partition) -> Result<DVector<f64>> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("agent report set"));
    }
    let mut counts: Vec<(u64, usize)> = Vec::new();
    for report in reports {
        match counts.iter_mut().find(|(d, _)| *d == report.noise_digest) {
            Some((_, c)) => *c += 1,
            None => counts.push((report.noise_digest, 1)),
        }
    }
    let (majority, _) = counts
        .iter()
        .max_by_key(|(_, c)| *c)
        .copied()
        .expect("non-empty report set");
    if let Some(offender) = reports
        .iter()
        .filter(|r| r.noise_digest != majority)
        .map(|r| r.agent_id)
        .max()
    {
        return Err(Error::DigestMismatch { agent_id: offender });
    }
    assemble_unchecked(reports, partition)
}

/// Outcome of re-checking the global invariant on an aggregated release.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateCheck {
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Recompute `C y` against `C x` on the aggregate.
pub fn verify_aggregate(
    values: &DVector<f64>,
    sys: &InvariantSystem,
    x: &Histogram,
) -> Result<AggregateCheck> {
    let achieved = sys.apply_constraints(values)?;
    let targets = sys.apply_constraints(x.counts())?;
    let max_deviation = (achieved - targets).abs().max();
    let tolerance = sys.release_tolerance(x.counts());
    Ok(AggregateCheck {
        max_deviation,
        tolerance,
        pass: max_deviation <= tolerance,
    })
}

/// Honest end-to-end run: simulate agents, validate, splice.
pub fn run_distributed(
    x: &Histogram,
    sys: &InvariantSystem,
    mechanism: MechanismId,
    scale: NoiseScale,
    seed: u64,
    partition: &Partition,
) -> Result<(DVector<f64>, Vec<AgentReport>)> {
    let reports = simulate_agents(x, sys, mechanism, scale, seed, partition, &[])?;
    let values = aggregate(&reports, partition)?;
    Ok((values, reports))
}

/// The centralized release the distributed run must reproduce bitwise.
pub fn centralized_reference(
    x: &Histogram,
    sys: &InvariantSystem,
    mechanism: MechanismId,
    scale: NoiseScale,
    seed: u64,
) -> Result<DVector<f64>> {
    check_additive(mechanism)?;
    let query = LinearQuery::identity(sys.n());
    let prepared = PreparedMechanism::prepare(mechanism, &query, sys, scale)?;
    Ok(prepared
        .release(x, NoiseSource::new(seed, 0))?
        .into_values())
}
