//! Attention FLOP/traffic counts, roofline classification, and phase-time
//! estimates.
//!
//! Conventions follow the published table layout this module reproduces:
//! causal masking is not discounted from prefill FLOPs, decode traffic is
//! counted at full hidden width for both resident and offloaded execution,
//! and offload traffic counts KV bytes only.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::memory::{activation_bytes, kv_cache_bytes, weight_bytes, weight_param_count};
use crate::workload::{HardwareSpec, ModelSpec, PolicyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Prefill,
    Decode,
}

/// Attention kernel granularity: one fused kernel over all heads, or one
/// kernel per group of `heads_per_group` KV heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Kernel {
    FullLayer,
    HeadWise { heads_per_group: u64 },
}

impl Kernel {
    /// Fraction of a layer's heads covered by one kernel launch.
    fn head_fraction(&self, m: &ModelSpec) -> f64 {
        match self {
            Kernel::FullLayer => 1.0,
            Kernel::HeadWise { heads_per_group } => {
                *heads_per_group as f64 / m.num_kv_heads as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Bound {
    Compute,
    Memory,
}

impl std::fmt::Display for Bound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bound::Compute => write!(f, "compute"),
            Bound::Memory => write!(f, "memory"),
        }
    }
}

/// One point on the roofline: a kernel's operation count, traffic, and the
/// throughput attainable on the given hardware.
#[derive(Debug, Clone, Serialize)]
pub struct RooflinePoint {
    pub phase: Phase,
    pub kernel: Kernel,
    pub offload: bool,
    pub context: u64,
    pub ops: f64,
    pub bytes_moved: f64,
    pub arithmetic_intensity: f64,
    pub attainable: f64,
    pub bound: Bound,
}

/// Per-layer attention FLOPs: `4*S^2*D` for prefill, `4*S*D` for decode,
/// scaled down for head-wise kernels.
pub fn attention_ops(m: &ModelSpec, phase: Phase, kernel: Kernel, context: u64) -> f64 {
    let s = context as f64;
    let d = m.hidden_dim as f64;
    let full = match phase {
        Phase::Prefill => 4.0 * s * s * d,
        Phase::Decode => 4.0 * s * d,
    };
    full * kernel.head_fraction(m)
}

/// Per-layer attention traffic in bytes over the governing channel.
pub fn attention_bytes(
    m: &ModelSpec,
    phase: Phase,
    kernel: Kernel,
    context: u64,
    offload: bool,
) -> f64 {
    let s = context as f64;
    let d = m.hidden_dim as f64;
    let d_kv = m.kv_dim() as f64;
    let dt = m.dtype_bytes as f64;
    let full = match (phase, offload) {
        // Q and O at hidden width, K and V at KV width.
        (Phase::Prefill, false) => (2.0 * s * d + 2.0 * s * d_kv) * dt,
        // Offload moves KV only.
        (Phase::Prefill, true) => 2.0 * s * d_kv * dt,
        // Full-width convention regardless of residency.
        (Phase::Decode, _) => 2.0 * s * d * dt,
    };
    full * kernel.head_fraction(m)
}

/// Bandwidth governing a kernel: device memory when resident, the bulk link
/// for prefill offload, the small-transfer link for decode offload.
pub fn effective_bandwidth(hw: &HardwareSpec, phase: Phase, offload: bool) -> f64 {
    match (phase, offload) {
        (_, false) => hw.mem_bw,
        (Phase::Prefill, true) => hw.link_bw_large,
        (Phase::Decode, true) => hw.link_bw_small,
    }
}

/// Fill in arithmetic intensity, attainable throughput, and the bound class.
pub fn classify(
    m: &ModelSpec,
    hw: &HardwareSpec,
    phase: Phase,
    kernel: Kernel,
    offload: bool,
    context: u64,
) -> RooflinePoint {
    let ops = attention_ops(m, phase, kernel, context);
    let bytes_moved = attention_bytes(m, phase, kernel, context, offload);
    let ai = ops / bytes_moved;
    let bw = effective_bandwidth(hw, phase, offload);
    let attainable = (ai * bw).min(hw.peak_flops);
    let bound = if ai * bw >= hw.peak_flops {
        Bound::Compute
    } else {
        Bound::Memory
    };
    RooflinePoint {
        phase,
        kernel,
        offload,
        context,
        ops,
        bytes_moved,
        arithmetic_intensity: ai,
        attainable,
        bound,
    }
}

/// One row of the standard comparison table: the same kernel evaluated
/// resident and offloaded.
#[derive(Debug, Clone, Serialize)]
pub struct RooflineRow {
    pub regular: RooflinePoint,
    pub offload: RooflinePoint,
}

impl RooflineRow {
    pub const CSV_HEADER: &'static str = "phase,kernel,context,ops,regular_memory,regular_ai,\
         regular_attainable,regular_bound,offload_memory,offload_ai,offload_attainable,offload_bound";

    pub fn csv_row(&self) -> String {
        let kernel = match self.regular.kernel {
            Kernel::FullLayer => "full-layer".to_string(),
            Kernel::HeadWise { heads_per_group } => format!("head-wise({heads_per_group})"),
        };
        let phase = match self.regular.phase {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        };
        format!(
            "{},{},{},{:.6e},{:.6e},{:.1},{:.6e},{},{:.6e},{:.1},{:.6e},{}",
            phase,
            kernel,
            self.regular.context,
            self.regular.ops,
            self.regular.bytes_moved,
            self.regular.arithmetic_intensity,
            self.regular.attainable,
            self.regular.bound,
            self.offload.bytes_moved,
            self.offload.arithmetic_intensity,
            self.offload.attainable,
            self.offload.bound,
        )
    }
}

/// The 12-row table evaluated at 1k/10k/100k for the fused and single-head
/// kernels, prefill then decode.
pub fn standard_table(m: &ModelSpec, hw: &HardwareSpec) -> Vec<RooflineRow> {
    let contexts = [1024u64, 10 * 1024, 100 * 1024];
    let kernels = [Kernel::FullLayer, Kernel::HeadWise { heads_per_group: 1 }];
    let mut rows = Vec::new();
    for phase in [Phase::Prefill, Phase::Decode] {
        for kernel in kernels {
            for s in contexts {
                rows.push(RooflineRow {
                    regular: classify(m, hw, phase, kernel, false, s),
                    offload: classify(m, hw, phase, kernel, true, s),
                });
            }
        }
    }
    rows
}

/// Smallest chunk length at which offloaded prefill reaches the compute
/// ceiling: solve `AI_offload(S) * link_bw_large >= peak_flops` for S.
pub fn turning_point(m: &ModelSpec, hw: &HardwareSpec) -> u64 {
    // AI_offload(S) = 4*S^2*D / (2*S*D_kv*dt) = 2*S*D / (D_kv*dt).
    let d = m.hidden_dim as f64;
    let d_kv = m.kv_dim() as f64;
    let dt = m.dtype_bytes as f64;
    let s = hw.peak_flops * d_kv * dt / (2.0 * d * hw.link_bw_large);
    (s.ceil() as u64).max(1)
}

fn chunk_lengths(context: u64, chunk: u64) -> impl Iterator<Item = (u64, u64)> {
    // Yields (tokens_before_chunk, chunk_len).
    let chunk = chunk.max(1);
    let mut done = 0u64;
    std::iter::from_fn(move || {
        if done >= context {
            return None;
        }
        let len = chunk.min(context - done);
        let past = done;
        done += len;
        Some((past, len))
    })
}

/// Whole-model wall-time estimate for one phase: `max(T_comp, T_mem)` per
/// chunk (prefill) or per generated token (decode).
///
/// Prefill sums over chunks with the attended context growing per chunk.
/// Decode returns seconds per token at a fixed cache size `context`.
pub fn phase_time(
    m: &ModelSpec,
    hw: &HardwareSpec,
    phase: Phase,
    policy: PolicyKind,
    context: u64,
    chunk: u64,
) -> Result<f64> {
    if matches!(policy, PolicyKind::Adaptive) {
        return Err(Error::UnresolvedPolicy(
            "adaptive must be resolved before estimating phase time".into(),
        ));
    }
    policy.validate_for(m)?;
    let l = m.num_layers as f64;
    let d = m.hidden_dim as f64;
    let d_kv = m.kv_dim() as f64;
    let dt = m.dtype_bytes as f64;
    let b = m.batch as f64;
    let params = weight_param_count(m) as f64;
    let w_bytes = weight_bytes(m) as f64;

    match phase {
        Phase::Prefill => {
            let step = if policy.is_chunked() { chunk } else { context };
            let mut total = 0.0;
            for (past, len) in chunk_lengths(context, step) {
                let s_end = (past + len) as f64;
                let c = len as f64;
                let flops = b * (l * 4.0 * c * s_end * d + 2.0 * params * c);
                let hbm = w_bytes
                    + activation_bytes(m, len) as f64
                    + b * l * (2.0 * c * d + 2.0 * s_end * d_kv) * dt;
                let t_comp = flops / hw.peak_flops;
                let t_hbm = hbm / hw.mem_bw;
                let t_link = if policy.is_offload() {
                    // Prefetch re-reads the existing cache; evict writes the
                    // chunk delta. The streams run concurrently.
                    let prefetch = b * l * 2.0 * past as f64 * d_kv * dt;
                    let evict = b * l * 2.0 * c * d_kv * dt;
                    prefetch.max(evict) / hw.link_bw_large
                } else {
                    0.0
                };
                total += t_comp.max(t_hbm).max(t_link);
            }
            Ok(total)
        }
        Phase::Decode => {
            let s = context as f64;
            let flops = b * (l * 4.0 * s * d + 2.0 * params);
            let kv_hbm = match policy {
                PolicyKind::KvQuant4 => b * l * 2.0 * s * d * dt / 4.0,
                _ => b * l * 2.0 * s * d * dt,
            };
            let hbm = w_bytes + kv_hbm;
            let t_comp = flops / hw.peak_flops;
            let t_hbm = hbm / hw.mem_bw;
            let t_link = if policy.is_offload() {
                // The full cache streams through the bulk link each token.
                kv_cache_bytes(m, context) as f64 / hw.link_bw_large
            } else {
                0.0
            };
            Ok(t_comp.max(t_hbm).max(t_link))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{find_model, find_profile};

    fn llama3_8b() -> ModelSpec {
        find_model("llama3-8b").unwrap()
    }

    fn assert_close_pct(actual: f64, expected: f64, pct: f64) {
        let rel = (actual - expected).abs() / expected.abs();
        assert!(
            rel <= pct / 100.0,
            "expected {expected:.4e} within {pct}%, got {actual:.4e}"
        );
    }

    #[test]
    fn prefill_ops_match_published_cells() {
        let m = llama3_8b();
        assert_close_pct(
            attention_ops(&m, Phase::Prefill, Kernel::FullLayer, 10 * 1024),
            1.7e12,
            5.0,
        );
        assert_close_pct(
            attention_ops(&m, Phase::Decode, Kernel::FullLayer, 10 * 1024),
            168e6,
            5.0,
        );
        assert_close_pct(
            attention_ops(&m, Phase::Prefill, Kernel::HeadWise { heads_per_group: 1 }, 10 * 1024),
            215e9,
            5.0,
        );
    }

    #[test]
    fn traffic_matches_published_cells() {
        let m = llama3_8b();
        assert_close_pct(
            attention_bytes(&m, Phase::Prefill, Kernel::FullLayer, 10 * 1024, false),
            209e6,
            5.0,
        );
        assert_close_pct(
            attention_bytes(&m, Phase::Prefill, Kernel::FullLayer, 10 * 1024, true),
            42e6,
            5.0,
        );
        assert_close_pct(
            attention_bytes(&m, Phase::Prefill, Kernel::HeadWise { heads_per_group: 1 }, 1024, true),
            0.5e6,
            5.0,
        );
    }

    #[test]
    fn classification_flips_at_short_offloaded_prefill() {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();

        let short = classify(&m, &hw, Phase::Prefill, Kernel::FullLayer, true, 1024);
        assert_close_pct(short.arithmetic_intensity, 4100.0, 5.0);
        assert_close_pct(short.attainable, 102e12, 5.0);
        assert_eq!(short.bound, Bound::Memory);

        let long = classify(&m, &hw, Phase::Prefill, Kernel::FullLayer, true, 10 * 1024);
        assert_close_pct(long.arithmetic_intensity, 41000.0, 5.0);
        assert_eq!(long.attainable, hw.peak_flops);
        assert_eq!(long.bound, Bound::Compute);

        let decode = classify(&m, &hw, Phase::Decode, Kernel::FullLayer, false, 100 * 1024);
        assert_eq!(decode.arithmetic_intensity, 1.0);
        assert_close_pct(decode.attainable, 1e12, 0.1);
        assert_eq!(decode.bound, Bound::Memory);
    }

    #[test]
    fn head_wise_kernels_preserve_arithmetic_intensity() {
        let m = llama3_8b();
        for phase in [Phase::Prefill, Phase::Decode] {
            for offload in [false, true] {
                for s in [1024u64, 10240, 102400] {
                    let full_ops = attention_ops(&m, phase, Kernel::FullLayer, s);
                    let full_bytes = attention_bytes(&m, phase, Kernel::FullLayer, s, offload);
                    let hw_ops =
                        attention_ops(&m, phase, Kernel::HeadWise { heads_per_group: 1 }, s);
                    let hw_bytes =
                        attention_bytes(&m, phase, Kernel::HeadWise { heads_per_group: 1 }, s, offload);
                    assert!((full_ops / full_bytes - hw_ops / hw_bytes).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn turning_point_llama3_8b() {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();
        let tp = turning_point(&m, &hw);
        assert_eq!(tp, 1650);

        // Oracle: linear scan for the smallest compute-bound chunk.
        let scan = (1..10_000)
            .find(|&s| {
                let p = classify(&m, &hw, Phase::Prefill, Kernel::FullLayer, true, s);
                p.bound == Bound::Compute
            })
            .unwrap();
        assert_eq!(tp, scan);
    }

    #[test]
    fn turning_point_profile_b_matches_scan() {
        let m = llama3_8b();
        let hw = find_profile("profile-b").unwrap();
        let tp = turning_point(&m, &hw);
        let scan = (1..100_000)
            .find(|&s| {
                let p = classify(&m, &hw, Phase::Prefill, Kernel::FullLayer, true, s);
                p.bound == Bound::Compute
            })
            .unwrap();
        assert_eq!(tp, scan);
    }

    #[test]
    fn infinite_link_means_always_compute_bound() {
        let m = llama3_8b();
        let mut hw = find_profile("profile-a").unwrap();
        hw.link_bw_large = 1e30;
        hw.mem_bw = 1e30;
        assert_eq!(turning_point(&m, &hw), 1);
    }

    #[test]
    fn zero_token_prefill_takes_no_time() {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();
        let t = phase_time(&m, &hw, Phase::Prefill, PolicyKind::Standard, 0, 10 * 1024).unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn phase_times_within_latency_envelope() {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();
        let policy = PolicyKind::HeadOffload { heads_per_group: 4 };

        let prefill =
            phase_time(&m, &hw, Phase::Prefill, policy, 1 << 20, 10 * 1024).unwrap();
        assert!((1016.5..=3049.5).contains(&prefill), "prefill {prefill}");

        let decode = phase_time(&m, &hw, Phase::Decode, policy, 1 << 20, 10 * 1024).unwrap();
        assert!((3.205..=9.615).contains(&decode), "decode {decode}");
    }

    #[test]
    fn phase_time_monotone_in_context() {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();
        for phase in [Phase::Prefill, Phase::Decode] {
            for policy in PolicyKind::table_policies() {
                let mut prev = 0.0;
                for s in [1024u64, 4096, 16384, 65536, 262144] {
                    let t = phase_time(&m, &hw, phase, policy, s, 10 * 1024).unwrap();
                    assert!(t >= prev, "{phase:?} {policy} not monotone at {s}");
                    prev = t;
                }
            }
        }
    }
}
