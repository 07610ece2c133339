//! Analytic simulation: the same sweep schedule the numeric runtime follows,
//! with per-step durations from the hardware model and no tensor math.
//! Usable at full scale (million-token contexts) where numeric execution is
//! out of reach.

use crate::error::{Error, Result};
use crate::memory::{
    activation_bytes, footprint, kv_cache_bytes, kv_on_device_bytes, resident_tokens,
    weight_bytes, weight_param_count,
};
use crate::workload::{HardwareSpec, ModelSpec, PolicyKind};

use super::arena::{Arena, Tier};
use super::pipeline::{schedule_sweep, StreamClock, SweepStep};
use super::timeline::SimTimeline;

/// Chunk iteration: yields `(tokens_before, chunk_len)`.
pub(crate) fn chunks(context: u64, chunk: u64) -> Vec<(u64, u64)> {
    let chunk = chunk.max(1);
    let mut out = Vec::new();
    let mut done = 0;
    while done < context {
        let len = chunk.min(context - done);
        out.push((done, len));
        done += len;
    }
    out
}

fn reject_unresolved(policy: PolicyKind) -> Result<()> {
    if matches!(policy, PolicyKind::Adaptive) {
        return Err(Error::UnresolvedPolicy(
            "adaptive must be resolved to a concrete policy before execution".into(),
        ));
    }
    Ok(())
}

/// Pre-allocate the run's memory in both tiers, per the footprint model.
/// Failing here, before any compute runs, is how an infeasible policy surfaces.
pub fn allocate_arenas(
    m: &ModelSpec,
    hw: &HardwareSpec,
    policy: PolicyKind,
    capacity_tokens: u64,
    chunk: u64,
) -> Result<(Arena, Arena)> {
    reject_unresolved(policy)?;
    policy.validate_for(m)?;
    let mut device = Arena::new(Tier::Device, hw.device_capacity);
    let mut host = Arena::new(Tier::Host, hw.host_capacity);

    device.alloc(weight_bytes(m) / hw.device_count, "weights")?;
    device.alloc(
        activation_bytes(m, resident_tokens(policy, capacity_tokens, chunk)),
        "activations",
    )?;
    let kv_device = kv_on_device_bytes(m, policy, capacity_tokens)? / hw.device_count;
    if policy.is_offload() {
        host.alloc(kv_cache_bytes(m, capacity_tokens), "kv-pool")?;
        // Ping-pong staging: two slots, each holding one head-group block.
        device.alloc(kv_device / 2, "kv-stage-0")?;
        device.alloc(kv_device - kv_device / 2, "kv-stage-1")?;
    } else {
        device.alloc(kv_device, "kv-cache")?;
    }
    Ok((device, host))
}

/// Per-group sweep steps for one layer of one prefill chunk.
pub fn prefill_layer_steps(
    m: &ModelSpec,
    hw: &HardwareSpec,
    policy: PolicyKind,
    past: u64,
    len: u64,
) -> Vec<SweepStep> {
    let groups = policy.group_count(m).unwrap_or(1);
    let g = policy.heads_per_group(m).unwrap_or(m.num_kv_heads);
    let b = m.batch as f64;
    let d = m.hidden_dim as f64;
    let d_kv = m.kv_dim() as f64;
    let dt = m.dtype_bytes as f64;
    let l = m.num_layers as f64;
    let s_end = (past + len) as f64;
    let c = len as f64;

    let flops_layer = b * (4.0 * c * s_end * d + 2.0 * weight_param_count(m) as f64 / l * c);
    let hbm_layer = weight_bytes(m) as f64 / l + b * (2.0 * c * d + 2.0 * s_end * d_kv) * dt;
    let flops_step = flops_layer / groups as f64;
    let secs = (flops_step / hw.peak_flops).max(hbm_layer / groups as f64 / hw.mem_bw);

    let (prefetch, evict) = if policy.is_offload() {
        let block = 2 * m.batch * m.head_dim * g * m.dtype_bytes;
        (past * block, len * block)
    } else {
        (0, 0)
    };
    (0..groups)
        .map(|_| SweepStep {
            compute_secs: secs,
            compute_flops: flops_step,
            prefetch_bytes: prefetch,
            evict_bytes: evict,
        })
        .collect()
}

/// Per-group sweep steps for one layer of one decode step with `cache_len`
/// tokens already cached.
pub fn decode_layer_steps(
    m: &ModelSpec,
    hw: &HardwareSpec,
    policy: PolicyKind,
    cache_len: u64,
) -> Vec<SweepStep> {
    let groups = policy.group_count(m).unwrap_or(1);
    let g = policy.heads_per_group(m).unwrap_or(m.num_kv_heads);
    let b = m.batch as f64;
    let d = m.hidden_dim as f64;
    let dt = m.dtype_bytes as f64;
    let l = m.num_layers as f64;
    let s = (cache_len + 1) as f64;

    let flops_layer = b * (4.0 * s * d + 2.0 * weight_param_count(m) as f64 / l);
    let hbm_layer = weight_bytes(m) as f64 / l + b * 2.0 * s * d * dt;
    let flops_step = flops_layer / groups as f64;
    let secs = (flops_step / hw.peak_flops).max(hbm_layer / groups as f64 / hw.mem_bw);

    let (prefetch, evict) = if policy.is_offload() {
        let block = 2 * m.batch * m.head_dim * g * m.dtype_bytes;
        (cache_len * block, block)
    } else {
        (0, 0)
    };
    (0..groups)
        .map(|_| SweepStep {
            compute_secs: secs,
            compute_flops: flops_step,
            prefetch_bytes: prefetch,
            evict_bytes: evict,
        })
        .collect()
}

/// Analytic prefill: one pipelined sweep per (chunk, layer), lanes joining at
/// every sweep boundary.
pub fn simulate_prefill(
    m: &ModelSpec,
    hw: &HardwareSpec,
    policy: PolicyKind,
    context: u64,
    chunk: u64,
) -> Result<SimTimeline> {
    reject_unresolved(policy)?;
    let chunk = if policy.is_chunked() { chunk.min(context).max(1) } else { context.max(1) };
    let (device, _host) = allocate_arenas(m, hw, policy, context, chunk)?;
    let mut timeline = SimTimeline::default();
    let mut clock = StreamClock::default();
    let mut t = 0.0;
    for (past, len) in chunks(context, chunk) {
        for _layer in 0..m.num_layers {
            let steps = prefill_layer_steps(m, hw, policy, past, len);
            t = schedule_sweep(&mut timeline, &mut clock, hw, t, &steps).end;
        }
    }
    timeline.peak_device_bytes = device.peak();
    Ok(timeline)
}

/// Analytic decode of `tokens` steps after a `context`-token prefill. Decode
/// prefetch spans layer boundaries: each token is a single pipelined sweep
/// across every layer's groups, with one fill per token.
pub fn simulate_decode(
    m: &ModelSpec,
    hw: &HardwareSpec,
    policy: PolicyKind,
    context: u64,
    tokens: u64,
) -> Result<SimTimeline> {
    reject_unresolved(policy)?;
    let chunk = if policy.is_chunked() { context.clamp(1, 10 * 1024) } else { context.max(1) };
    let (device, _host) = allocate_arenas(m, hw, policy, context + tokens, chunk)?;
    let mut timeline = SimTimeline::default();
    let mut clock = StreamClock::default();
    let mut t = 0.0;
    for token in 0..tokens {
        let mut steps = Vec::new();
        for _layer in 0..m.num_layers {
            steps.extend(decode_layer_steps(m, hw, policy, context + token));
        }
        t = schedule_sweep(&mut timeline, &mut clock, hw, t, &steps).end;
    }
    timeline.peak_device_bytes = device.peak();
    Ok(timeline)
}

/// Feasibility gate shared by the runtimes: the policy's full footprint must
/// fit the device.
pub fn check_fits_device(
    m: &ModelSpec,
    hw: &HardwareSpec,
    policy: PolicyKind,
    context: u64,
    chunk: u64,
) -> Result<()> {
    let report = footprint(m, hw, policy, context, chunk)?;
    if report.total_on_device > hw.device_capacity {
        return Err(Error::CapacityExceeded(format!(
            "{policy} needs {} B on device at {context} tokens, capacity is {} B",
            report.total_on_device, hw.device_capacity
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::pipeline::sweep_makespan_law;
    use crate::workload::{find_model, find_profile};

    #[test]
    fn standard_prefill_has_no_transfers() {
        let m = find_model("toy").unwrap();
        let hw = find_profile("profile-a").unwrap();
        let tl = simulate_prefill(&m, &hw, PolicyKind::Standard, 64, 16).unwrap();
        assert!(tl.transfers.is_empty());
        assert!(tl.makespan > 0.0);
    }

    #[test]
    fn zero_steps_decode_is_empty() {
        let m = find_model("toy").unwrap();
        let hw = find_profile("profile-a").unwrap();
        let tl = simulate_decode(&m, &hw, PolicyKind::LayerOffload, 64, 0).unwrap();
        assert!(tl.transfers.is_empty() && tl.computes.is_empty());
        assert_eq!(tl.makespan, 0.0);
    }

    #[test]
    fn prefill_sweeps_obey_makespan_law() {
        let m = find_model("llama3-8b").unwrap();
        let hw = find_profile("profile-a").unwrap();
        let policy = PolicyKind::HeadOffload { heads_per_group: 2 };
        // One sweep in isolation must land exactly on the law.
        let steps = prefill_layer_steps(&m, &hw, policy, 40 * 1024, 10 * 1024);
        let mut tl = SimTimeline::default();
        let mut clock = StreamClock::default();
        let end = schedule_sweep(&mut tl, &mut clock, &hw, 0.0, &steps).end;
        assert!((end - sweep_makespan_law(&hw, &steps)).abs() < 1e-12);
        tl.check_pingpong_safety().unwrap();
    }

    #[test]
    fn footprint_sized_arena_admits_the_working_set_exactly() {
        let m = find_model("llama3-8b").unwrap();
        let mut hw = find_profile("profile-a").unwrap();
        let policy = PolicyKind::HeadOffload { heads_per_group: 1 };
        let s = 1u64 << 20;
        let chunk = 10 * 1024;
        let report = crate::memory::footprint(&m, &hw, policy, s, chunk).unwrap();

        hw.device_capacity = report.total_on_device;
        let (device, host) = allocate_arenas(&m, &hw, policy, s, chunk).unwrap();
        assert_eq!(device.used(), report.total_on_device);
        assert_eq!(host.used(), report.kv_total);

        hw.device_capacity = report.total_on_device - 1;
        let err = allocate_arenas(&m, &hw, policy, s, chunk).unwrap_err();
        assert!(matches!(err, Error::CapacityExceeded(_)));
    }

    #[test]
    fn oversized_context_is_rejected_before_compute() {
        let m = find_model("llama3-8b").unwrap();
        let hw = find_profile("profile-a").unwrap();
        let err = simulate_prefill(&m, &hw, PolicyKind::Standard, 1 << 20, 10 * 1024).unwrap_err();
        assert!(matches!(err, Error::CapacityExceeded(_)));
    }

    #[test]
    fn adaptive_is_rejected() {
        let m = find_model("toy").unwrap();
        let hw = find_profile("profile-a").unwrap();
        assert!(matches!(
            simulate_prefill(&m, &hw, PolicyKind::Adaptive, 64, 16),
            Err(Error::UnresolvedPolicy(_))
        ));
    }
}
