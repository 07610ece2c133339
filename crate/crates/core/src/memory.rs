//! Closed-form memory accounting per policy and the max-context solver.
//!
//! All quantities are exact integer byte counts. The on-device total is
//! `weights + kv_on_device + activation`; offload policies additionally carry
//! the full cache footprint (`kv_total`) that must fit in host memory.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::workload::{HardwareSpec, ModelSpec, PolicyKind};

/// Per-policy memory breakdown at one context length.
#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub policy: PolicyKind,
    /// Context length in tokens.
    pub context: u64,
    /// Prefill chunk length in tokens (equals `context` for unchunked policies).
    pub chunk: u64,
    pub weights: u64,
    pub kv_on_device: u64,
    pub activation: u64,
    pub total_on_device: u64,
    /// Cache across both tiers; equals `kv_on_device` for resident policies.
    pub kv_total: u64,
}

impl MemoryReport {
    /// Fixed CSV column order.
    pub const CSV_HEADER: &'static str =
        "policy,context,chunk,weights,kv_on_device,activation,total_on_device,kv_total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.policy,
            self.context,
            self.chunk,
            self.weights,
            self.kv_on_device,
            self.activation,
            self.total_on_device,
            self.kv_total
        )
    }
}

/// Linear-layer parameter count from the exact architecture sum: untied
/// embedding + LM head, q/k/v/o projections with grouped KV width, and the
/// gated three-matrix MLP. Norm parameters are ignored.
pub fn weight_param_count(m: &ModelSpec) -> u64 {
    let d = m.hidden_dim;
    let d_kv = m.kv_dim();
    let per_layer = d * d            // q projection
        + 2 * d * d_kv               // k and v projections
        + d * d                      // output projection
        + 3 * d * m.intermediate_dim; // gate / up / down
    2 * m.vocab_size * d + m.num_layers * per_layer
}

pub fn weight_bytes(m: &ModelSpec) -> u64 {
    weight_param_count(m) * m.dtype_bytes
}

/// Total KV cache for `context` tokens: `2 * B * L * S * D_kv * dtype_bytes`.
pub fn kv_cache_bytes(m: &ModelSpec, context: u64) -> u64 {
    2 * m.batch * m.num_layers * context * m.kv_dim() * m.dtype_bytes
}

/// Forward-pass intermediate memory for `resident_tokens` live positions:
/// `(D + 2I) * tokens * dtype_bytes`.
pub fn activation_bytes(m: &ModelSpec, resident_tokens: u64) -> u64 {
    (m.hidden_dim + 2 * m.intermediate_dim) * resident_tokens * m.dtype_bytes
}

/// Tokens whose activations are live at once: the whole context for
/// unchunked policies, one chunk for chunked ones.
pub fn resident_tokens(policy: PolicyKind, context: u64, chunk: u64) -> u64 {
    if policy.is_chunked() {
        chunk.min(context)
    } else {
        context
    }
}

/// Device-resident KV bytes under `policy` at `context` tokens. Offload
/// policies hold two staging copies of one group block (ping-pong), so their
/// working set is `2 * 2 * B * S * group_width * dtype_bytes`.
pub fn kv_on_device_bytes(m: &ModelSpec, policy: PolicyKind, context: u64) -> Result<u64> {
    policy.validate_for(m)?;
    let full = kv_cache_bytes(m, context);
    match policy {
        PolicyKind::Standard | PolicyKind::ChunkedPrefill => Ok(full),
        PolicyKind::KvQuant4 => Ok(full.div_ceil(4)),
        PolicyKind::LayerOffload => {
            Ok(2 * 2 * m.batch * context * m.kv_dim() * m.dtype_bytes)
        }
        PolicyKind::HeadOffload { heads_per_group } => {
            Ok(2 * 2 * m.batch * context * m.head_dim * heads_per_group * m.dtype_bytes)
        }
        PolicyKind::Adaptive => Err(Error::UnresolvedPolicy(
            "adaptive must be resolved to a concrete policy before memory accounting".into(),
        )),
    }
}

/// Cache bytes across both tiers.
pub fn kv_total_bytes(m: &ModelSpec, policy: PolicyKind, context: u64) -> Result<u64> {
    let full = kv_cache_bytes(m, context);
    match policy {
        PolicyKind::KvQuant4 => Ok(full.div_ceil(4)),
        PolicyKind::Adaptive => Err(Error::UnresolvedPolicy(
            "adaptive must be resolved to a concrete policy before memory accounting".into(),
        )),
        _ => Ok(full),
    }
}

/// Assemble the full breakdown. Weights and device-resident KV are divided
/// across pipeline stages; activations and the host-side cache are not.
pub fn footprint(
    m: &ModelSpec,
    hw: &HardwareSpec,
    policy: PolicyKind,
    context: u64,
    chunk: u64,
) -> Result<MemoryReport> {
    let dc = hw.device_count;
    if !m.num_layers.is_multiple_of(dc) {
        return Err(Error::InvalidSpec {
            field: "device_count",
            reason: format!(
                "num_layers ({}) must divide evenly across {} pipeline stages",
                m.num_layers, dc
            ),
        });
    }
    let chunk = if policy.is_chunked() { chunk.min(context) } else { context };
    let weights = weight_bytes(m) / dc;
    let kv_on_device = kv_on_device_bytes(m, policy, context)? / dc;
    let activation = activation_bytes(m, resident_tokens(policy, context, chunk));
    Ok(MemoryReport {
        policy,
        context,
        chunk,
        weights,
        kv_on_device,
        activation,
        total_on_device: weights + kv_on_device + activation,
        kv_total: kv_total_bytes(m, policy, context)?,
    })
}

fn fits(
    m: &ModelSpec,
    hw: &HardwareSpec,
    policy: PolicyKind,
    context: u64,
    chunk: u64,
    reserve: u64,
) -> Result<bool> {
    let report = footprint(m, hw, policy, context, chunk)?;
    let device_ok = report.total_on_device + reserve <= hw.device_capacity;
    let host_ok = !policy.is_offload() || report.kv_total <= hw.host_capacity;
    Ok(device_ok && host_ok)
}

/// Largest context (whole tokens) whose footprint fits the device budget,
/// and, for offload policies, whose full cache fits host memory.
///
/// The component model is linear in `S`, so the bound is solved in closed
/// form and then pinned to the exact integer boundary with the footprint
/// formula itself.
pub fn max_context(
    m: &ModelSpec,
    hw: &HardwareSpec,
    policy: PolicyKind,
    chunk: u64,
    reserve: u64,
) -> Result<u64> {
    policy.validate_for(m)?;
    if matches!(policy, PolicyKind::Adaptive) {
        return Err(Error::UnresolvedPolicy(
            "adaptive must be resolved before solving for max context".into(),
        ));
    }
    let dc = hw.device_count;
    let weights = weight_bytes(m) / dc;
    if weights + reserve >= hw.device_capacity {
        return Err(Error::Infeasible(format!(
            "weights ({weights} B) plus reserve ({reserve} B) exceed device capacity ({} B)",
            hw.device_capacity
        )));
    }

    // Per-token slopes of the linear model, in bytes/token.
    let kv_dev_slope = kv_on_device_bytes(m, policy, 1)? as f64 / dc as f64;
    let act_slope = if policy.is_chunked() {
        0.0
    } else {
        activation_bytes(m, 1) as f64
    };
    let act_fixed = if policy.is_chunked() {
        activation_bytes(m, chunk)
    } else {
        0
    };

    let budget = hw.device_capacity as f64 - (weights + reserve + act_fixed) as f64;
    if budget <= 0.0 {
        return Err(Error::Infeasible(
            "chunk activations alone exceed the device budget".into(),
        ));
    }
    let mut s = (budget / (kv_dev_slope + act_slope)).floor() as u64;

    if policy.is_offload() {
        let kv_total_slope = kv_total_bytes(m, policy, 1)? as f64;
        let s_host = (hw.host_capacity as f64 / kv_total_slope).floor() as u64;
        s = s.min(s_host);
    }

    // The closed form floors in f64; pin the boundary exactly.
    while s >= 1 && !fits(m, hw, policy, s, chunk, reserve)? {
        s -= 1;
    }
    while fits(m, hw, policy, s + 1, chunk, reserve)? {
        s += 1;
    }
    if s < 1 {
        return Err(Error::Infeasible(format!(
            "no context of at least one token fits under policy {policy}"
        )));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{find_model, find_profile, GIB};

    fn llama3_8b() -> ModelSpec {
        find_model("llama3-8b").unwrap()
    }

    fn gib(bytes: u64) -> f64 {
        bytes as f64 / GIB as f64
    }

    fn assert_close_pct(actual: f64, expected: f64, pct: f64) {
        let rel = (actual - expected).abs() / expected.abs();
        assert!(
            rel <= pct / 100.0,
            "expected {expected} within {pct}%, got {actual} (off by {:.2}%)",
            rel * 100.0
        );
    }

    /// Independent oracle: enumerate every projection matrix and sum element
    /// counts, instead of using the factored per-layer expression.
    fn param_count_oracle(m: &ModelSpec) -> u64 {
        let d = m.hidden_dim;
        let d_kv = m.kv_dim();
        let mut total = 0u64;
        total += m.vocab_size * d; // embedding
        total += m.vocab_size * d; // lm head
        for _layer in 0..m.num_layers {
            for (rows, cols) in [
                (d, d),                    // W_Q
                (d, d_kv),                 // W_K
                (d, d_kv),                 // W_V
                (d, d),                    // W_O
                (d, m.intermediate_dim),   // gate
                (d, m.intermediate_dim),   // up
                (m.intermediate_dim, d),   // down
            ] {
                total += rows * cols;
            }
        }
        total
    }

    #[test]
    fn llama3_8b_param_count_matches_oracle() {
        let m = llama3_8b();
        let n = weight_param_count(&m);
        assert_eq!(n, param_count_oracle(&m));
        // ~8.03e9 parameters.
        assert_close_pct(n as f64, 8.03e9, 0.1);
    }

    #[test]
    fn llama3_8b_weight_bytes_near_published_total() {
        let m = llama3_8b();
        assert_close_pct(gib(weight_bytes(&m)), 15.08, 2.0);
    }

    #[test]
    fn llama3_70b_weight_bytes() {
        let m = find_model("llama3-70b").unwrap();
        assert_close_pct(weight_bytes(&m) as f64, 70.6e9 * 2.0, 0.5);
    }

    #[test]
    fn degenerate_model_has_zero_weight_bytes() {
        let mut m = llama3_8b();
        m.vocab_size = 0;
        m.num_layers = 0;
        assert_eq!(weight_bytes(&m), 0);
    }

    #[test]
    fn kv_cache_1m_tokens_is_128_gib() {
        let m = llama3_8b();
        assert_eq!(kv_cache_bytes(&m, 1 << 20), 128 * GIB);
        assert_eq!(kv_cache_bytes(&m, 0), 0);
        assert_close_pct(gib(kv_cache_bytes(&m, 45 * 1024)), 5.63, 2.0);
    }

    #[test]
    fn activation_values() {
        let m = llama3_8b();
        assert_eq!(activation_bytes(&m, 1 << 20), 64 * GIB);
        assert_close_pct(gib(activation_bytes(&m, 10 * 1024)), 0.625, 0.01);
        assert_eq!(activation_bytes(&m, 0), 0);
    }

    #[test]
    fn kv_on_device_per_policy() {
        let m = llama3_8b();
        let s = 1u64 << 20;
        assert_eq!(
            kv_on_device_bytes(&m, PolicyKind::LayerOffload, s).unwrap(),
            8 * GIB
        );
        assert_eq!(
            kv_on_device_bytes(&m, PolicyKind::HeadOffload { heads_per_group: 1 }, s).unwrap(),
            GIB
        );
        assert_close_pct(
            gib(kv_on_device_bytes(&m, PolicyKind::HeadOffload { heads_per_group: 1 }, 4_096_000)
                .unwrap()),
            3.91,
            2.0,
        );
        assert!(matches!(
            kv_on_device_bytes(&m, PolicyKind::Adaptive, s),
            Err(Error::UnresolvedPolicy(_))
        ));
    }

    #[test]
    fn head_offload_full_group_equals_layer_offload() {
        let m = llama3_8b();
        for s in [1u64, 4096, 1 << 20] {
            assert_eq!(
                kv_on_device_bytes(&m, PolicyKind::HeadOffload { heads_per_group: m.num_kv_heads }, s)
                    .unwrap(),
                kv_on_device_bytes(&m, PolicyKind::LayerOffload, s).unwrap()
            );
        }
    }

    #[test]
    fn footprint_1m_table() {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();
        let s = 1u64 << 20;
        let chunk = 10 * 1024;

        let std = footprint(&m, &hw, PolicyKind::Standard, s, chunk).unwrap();
        assert_close_pct(gib(std.total_on_device), 207.0, 2.0);

        let head =
            footprint(&m, &hw, PolicyKind::HeadOffload { heads_per_group: 1 }, s, chunk).unwrap();
        assert_close_pct(gib(head.total_on_device), 16.7, 2.0);
        assert_eq!(head.kv_total, 128 * GIB);
    }

    #[test]
    fn footprint_measured_contexts() {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();
        let r = footprint(&m, &hw, PolicyKind::Standard, 25 * 1024, 25 * 1024).unwrap();
        assert_close_pct(gib(r.total_on_device), 19.77, 2.0);
        assert_close_pct(gib(r.kv_on_device), 3.13, 2.0);
        assert_close_pct(gib(r.activation), 1.56, 2.0);
    }

    #[test]
    fn max_context_head_offload_is_host_bound() {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();
        let s = max_context(&m, &hw, PolicyKind::HeadOffload { heads_per_group: 1 }, 10 * 1024, 0)
            .unwrap();
        assert_eq!(s, 4_194_304);
    }

    #[test]
    fn max_context_reserve_eats_everything() {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();
        let err = max_context(&m, &hw, PolicyKind::Standard, 10 * 1024, hw.device_capacity);
        assert!(matches!(err, Err(Error::Infeasible(_))));
    }

    /// Oracle: invert the footprint model by bisection and compare with the
    /// closed form.
    fn max_context_bisect(
        m: &ModelSpec,
        hw: &HardwareSpec,
        policy: PolicyKind,
        chunk: u64,
        reserve: u64,
    ) -> u64 {
        let (mut lo, mut hi) = (1u64, 1u64 << 40);
        assert!(fits(m, hw, policy, lo, chunk, reserve).unwrap());
        while lo + 1 < hi {
            let mid = lo + (hi - lo) / 2;
            if fits(m, hw, policy, mid, chunk, reserve).unwrap() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[test]
    fn max_context_standard_with_calibrated_reserve() {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();
        let reserve = (4.7 * GIB as f64) as u64;
        let s = max_context(&m, &hw, PolicyKind::Standard, 10 * 1024, reserve).unwrap();
        assert_eq!(s, max_context_bisect(&m, &hw, PolicyKind::Standard, 10 * 1024, reserve));
        assert!((20 * 1024..=30 * 1024).contains(&s), "got {s}");
    }

    #[test]
    fn max_context_matches_bisection_for_all_policies() {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();
        for policy in PolicyKind::table_policies() {
            let s = max_context(&m, &hw, policy, 10 * 1024, 0).unwrap();
            let oracle = max_context_bisect(&m, &hw, policy, 10 * 1024, 0);
            assert_eq!(s, oracle, "policy {policy}");
        }
    }

    #[test]
    fn max_context_boundary_is_tight_for_gpu_bound_policies() {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();
        for policy in [PolicyKind::Standard, PolicyKind::ChunkedPrefill, PolicyKind::KvQuant4] {
            let s = max_context(&m, &hw, policy, 10 * 1024, 0).unwrap();
            assert!(fits(&m, &hw, policy, s, 10 * 1024, 0).unwrap());
            assert!(!fits(&m, &hw, policy, s + 1, 10 * 1024, 0).unwrap());
        }
    }
}
