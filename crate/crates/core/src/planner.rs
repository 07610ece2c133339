//! Chunk-size and head-group selection for a requested context.
//!
//! Both selectors are budget-driven rather than hard-coded: the chunk comes
//! from the roofline turning point, the group count from the largest head
//! group whose working set still fits the device after the framework
//! reserve. On a 24 GiB device the default reserve leaves an 8B-class model
//! a 4 GiB KV staging budget, which lands the doubling schedule exactly on
//! power-of-two boundaries for an 8-KV-head model: one group through 512K
//! tokens, two through 1M, four through 2M, eight through 4M.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::memory::{footprint, MemoryReport};
use crate::roofline::turning_point;
use crate::workload::{HardwareSpec, ModelSpec, PolicyKind};

/// Framework overhead (fragmentation, logits, workspace) assumed by the
/// planner when sizing the device budget: about 4.42 GiB, calibrated so an
/// 8B-class model on a 24 GiB device keeps a 4 GiB KV staging budget and the
/// group schedule lands on power-of-two bracket boundaries.
pub const DEFAULT_PLANNING_RESERVE: u64 = 4_743_757_824;

/// Margin between the turning point and the chosen chunk.
pub const CHUNK_SAFETY_FACTOR: u64 = 5;

#[derive(Debug, Clone, Serialize)]
pub struct Plan {
    pub context: u64,
    pub chunk: u64,
    /// KV heads staged together per layer sweep.
    pub heads_per_group: u64,
    /// Head groups per layer (`num_kv_heads / heads_per_group`).
    pub group_count: u64,
    pub policy: PolicyKind,
    pub feasibility: MemoryReport,
}

/// The turning point rounded up to its power-of-two bucket, as headline
/// numbers quote it.
pub fn turning_point_bucket(m: &ModelSpec, hw: &HardwareSpec) -> u64 {
    turning_point(m, hw).next_power_of_two()
}

/// Prefill chunk: the bucketed turning point times a safety factor, at least
/// 1024, floored to a multiple of 1024.
pub fn select_chunk(m: &ModelSpec, hw: &HardwareSpec) -> u64 {
    let raw = (turning_point_bucket(m, hw) * CHUNK_SAFETY_FACTOR).max(1024);
    (raw / 1024) * 1024
}

fn divisors_descending(n: u64) -> impl Iterator<Item = u64> {
    (1..=n).rev().filter(move |g| n.is_multiple_of(*g))
}

/// Largest head group (fewest groups) whose footprint at `context` fits the
/// device budget under `reserve`.
pub fn select_groups(
    m: &ModelSpec,
    hw: &HardwareSpec,
    context: u64,
    chunk: u64,
    reserve: u64,
) -> Result<u64> {
    for g in divisors_descending(m.num_kv_heads) {
        let policy = PolicyKind::HeadOffload { heads_per_group: g };
        let report = footprint(m, hw, policy, context, chunk)?;
        let device_ok = report.total_on_device + reserve <= hw.device_capacity;
        let host_ok = report.kv_total <= hw.host_capacity;
        if device_ok && host_ok {
            return Ok(g);
        }
    }
    Err(Error::Infeasible(format!(
        "no head grouping fits {context} tokens on {} (device {} B, reserve {reserve} B)",
        hw.name, hw.device_capacity
    )))
}

/// Compose chunk and group selection into a feasibility-checked plan.
pub fn plan(m: &ModelSpec, hw: &HardwareSpec, context: u64) -> Result<Plan> {
    plan_with_reserve(m, hw, context, DEFAULT_PLANNING_RESERVE)
}

pub fn plan_with_reserve(
    m: &ModelSpec,
    hw: &HardwareSpec,
    context: u64,
    reserve: u64,
) -> Result<Plan> {
    if context == 0 {
        return Err(Error::InvalidSpec {
            field: "context",
            reason: "must be >= 1".into(),
        });
    }
    let chunk = select_chunk(m, hw).min(context);
    let heads_per_group = select_groups(m, hw, context, chunk, reserve)?;
    let policy = PolicyKind::HeadOffload { heads_per_group };
    let feasibility = footprint(m, hw, policy, context, chunk)?;
    debug_assert!(feasibility.total_on_device + reserve <= hw.device_capacity);
    Ok(Plan {
        context,
        chunk,
        heads_per_group,
        group_count: m.num_kv_heads / heads_per_group,
        policy,
        feasibility,
    })
}

/// Resolve `Adaptive` to the concrete policy the planner would run; other
/// policies pass through unchanged.
pub fn resolve_policy(
    m: &ModelSpec,
    hw: &HardwareSpec,
    policy: PolicyKind,
    context: u64,
) -> Result<PolicyKind> {
    match policy {
        PolicyKind::Adaptive => Ok(plan(m, hw, context)?.policy),
        other => Ok(other),
    }
}
