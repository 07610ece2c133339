//! Model and hardware descriptors: validation, built-in catalogs, and JSON IO.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes in one GiB; all human-facing byte quantities are reported in GiB.
pub const GIB: u64 = 1 << 30;

/// Transfers below this size count as per-token-scale and use the smaller
/// effective link bandwidth.
pub const SMALL_TRANSFER_BYTES: u64 = 1 << 20;

fn default_batch() -> u64 {
    1
}

/// Transformer architecture dimensions; input to every memory/FLOP formula.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub num_q_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub hidden_dim: u64,
    pub intermediate_dim: u64,
    pub vocab_size: u64,
    /// Bytes per element of weights/KV/activations (1, 2, or 4).
    pub dtype_bytes: u64,
    #[serde(default = "default_batch")]
    pub batch: u64,
}

impl ModelSpec {
    /// KV width per layer: `num_kv_heads * head_dim`. Grouped-query models
    /// cache keys/values at this width, not at `hidden_dim`.
    pub fn kv_dim(&self) -> u64 {
        self.num_kv_heads * self.head_dim
    }

    /// Query heads sharing one KV head.
    pub fn gqa_ratio(&self) -> u64 {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(field: &'static str, v: u64) -> Result<()> {
            if v == 0 {
                return Err(Error::InvalidSpec {
                    field,
                    reason: "must be >= 1".into(),
                });
            }
            Ok(())
        }
        positive("num_layers", self.num_layers)?;
        positive("num_q_heads", self.num_q_heads)?;
        positive("num_kv_heads", self.num_kv_heads)?;
        positive("head_dim", self.head_dim)?;
        positive("hidden_dim", self.hidden_dim)?;
        positive("intermediate_dim", self.intermediate_dim)?;
        positive("vocab_size", self.vocab_size)?;
        positive("batch", self.batch)?;
        if !matches!(self.dtype_bytes, 1 | 2 | 4) {
            return Err(Error::InvalidSpec {
                field: "dtype_bytes",
                reason: format!("must be 1, 2, or 4, got {}", self.dtype_bytes),
            });
        }
        if self.hidden_dim != self.num_q_heads * self.head_dim {
            return Err(Error::InvalidSpec {
                field: "hidden_dim",
                reason: format!(
                    "hidden_dim ({}) must equal num_q_heads * head_dim ({} * {})",
                    self.hidden_dim, self.num_q_heads, self.head_dim
                ),
            });
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::InvalidSpec {
                field: "num_kv_heads",
                reason: format!(
                    "num_q_heads ({}) must be divisible by num_kv_heads ({})",
                    self.num_q_heads, self.num_kv_heads
                ),
            });
        }
        Ok(())
    }
}

/// One accelerator profile: compute peak, memory bandwidth, link bandwidths,
/// and the two tier capacities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub name: String,
    /// Peak compute throughput in FLOP/s.
    pub peak_flops: f64,
    /// Device memory bandwidth in bytes/s.
    pub mem_bw: f64,
    /// Host link bandwidth for bulk transfers, bytes/s.
    pub link_bw_large: f64,
    /// Effective host link bandwidth for per-token-scale transfers, bytes/s.
    pub link_bw_small: f64,
    /// Device memory capacity in bytes.
    pub device_capacity: u64,
    /// Host memory available for offloaded KV, in bytes.
    pub host_capacity: u64,
    /// Pipeline-parallel stage count.
    #[serde(default = "default_batch")]
    pub device_count: u64,
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("peak_flops", self.peak_flops),
            ("mem_bw", self.mem_bw),
            ("link_bw_large", self.link_bw_large),
            ("link_bw_small", self.link_bw_small),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidSpec {
                    field,
                    reason: format!("must be a positive finite rate, got {v}"),
                });
            }
        }
        if self.link_bw_small > self.link_bw_large {
            return Err(Error::InvalidSpec {
                field: "link_bw_small",
                reason: "must not exceed link_bw_large".into(),
            });
        }
        if self.link_bw_large > self.mem_bw {
            return Err(Error::InvalidSpec {
                field: "link_bw_large",
                reason: "must not exceed mem_bw".into(),
            });
        }
        if self.device_count == 0 {
            return Err(Error::InvalidSpec {
                field: "device_count",
                reason: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    /// Link bandwidth for a transfer of `bytes`: bulk transfers ride the full
    /// link, per-token-scale transfers see the lower effective rate.
    pub fn link_bw_for(&self, bytes: u64) -> f64 {
        if bytes < SMALL_TRANSFER_BYTES {
            self.link_bw_small
        } else {
            self.link_bw_large
        }
    }
}

/// KV-cache placement policy. Serializes as its display name, e.g.
/// `"head-offload(2)"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    /// Everything resident on device; prompt processed in one pass.
    Standard,
    /// Resident KV, prompt processed in fixed-size chunks.
    ChunkedPrefill,
    /// Resident KV stored at 4-bit width (size accounting only).
    KvQuant4,
    /// KV offloaded per layer; one layer's heads staged at a time.
    LayerOffload,
    /// KV offloaded per head group; `heads_per_group` KV heads staged at a time.
    HeadOffload { heads_per_group: u64 },
    /// Placeholder resolved to a concrete policy by the planner before use.
    Adaptive,
}

impl PolicyKind {
    /// Policies that keep the bulk of the KV cache on the host.
    pub fn is_offload(&self) -> bool {
        matches!(self, PolicyKind::LayerOffload | PolicyKind::HeadOffload { .. })
    }

    /// Policies whose prefill bounds activation memory to one chunk.
    pub fn is_chunked(&self) -> bool {
        matches!(self, PolicyKind::ChunkedPrefill | PolicyKind::HeadOffload { .. })
    }

    /// Head groups staged per layer sweep, or `None` for resident policies.
    pub fn group_count(&self, m: &ModelSpec) -> Option<u64> {
        match self {
            PolicyKind::LayerOffload => Some(1),
            PolicyKind::HeadOffload { heads_per_group } => {
                Some(m.num_kv_heads / heads_per_group)
            }
            _ => None,
        }
    }

    /// KV heads staged together for offload policies.
    pub fn heads_per_group(&self, m: &ModelSpec) -> Option<u64> {
        match self {
            PolicyKind::LayerOffload => Some(m.num_kv_heads),
            PolicyKind::HeadOffload { heads_per_group } => Some(*heads_per_group),
            _ => None,
        }
    }

    pub fn validate_for(&self, m: &ModelSpec) -> Result<()> {
        if let PolicyKind::HeadOffload { heads_per_group } = self {
            if *heads_per_group == 0 || !m.num_kv_heads.is_multiple_of(*heads_per_group) {
                return Err(Error::InvalidSpec {
                    field: "heads_per_group",
                    reason: format!(
                        "{} must divide num_kv_heads ({})",
                        heads_per_group, m.num_kv_heads
                    ),
                });
            }
        }
        Ok(())
    }

    /// The five concrete policies of the standard comparison table.
    pub fn table_policies() -> [PolicyKind; 5] {
        [
            PolicyKind::Standard,
            PolicyKind::ChunkedPrefill,
            PolicyKind::KvQuant4,
            PolicyKind::LayerOffload,
            PolicyKind::HeadOffload { heads_per_group: 1 },
        ]
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::Standard => write!(f, "standard"),
            PolicyKind::ChunkedPrefill => write!(f, "chunked-prefill"),
            PolicyKind::KvQuant4 => write!(f, "kv-quant-4"),
            PolicyKind::LayerOffload => write!(f, "layer-offload"),
            PolicyKind::HeadOffload { heads_per_group } => {
                write!(f, "head-offload({heads_per_group})")
            }
            PolicyKind::Adaptive => write!(f, "adaptive"),
        }
    }
}

impl Serialize for PolicyKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicyKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    /// Accepts the display names plus short aliases. `head` parses with one
    /// head per group; callers override via their own `--groups` flag.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase();
        match norm.as_str() {
            "standard" => Ok(PolicyKind::Standard),
            "chunked" | "chunked-prefill" => Ok(PolicyKind::ChunkedPrefill),
            "kvquant4" | "kv-quant-4" | "4bit" => Ok(PolicyKind::KvQuant4),
            "layer" | "layer-offload" => Ok(PolicyKind::LayerOffload),
            "adaptive" => Ok(PolicyKind::Adaptive),
            _ => {
                if norm == "head" || norm == "head-offload" || norm == "headwise" {
                    return Ok(PolicyKind::HeadOffload { heads_per_group: 1 });
                }
                if let Some(rest) = norm
                    .strip_prefix("head-offload(")
                    .and_then(|r| r.strip_suffix(')'))
                {
                    let g: u64 = rest.parse().map_err(|_| Error::InvalidSpec {
                        field: "policy",
                        reason: format!("bad head group count in `{s}`"),
                    })?;
                    return Ok(PolicyKind::HeadOffload { heads_per_group: g });
                }
                Err(Error::InvalidSpec {
                    field: "policy",
                    reason: format!(
                        "unknown policy `{s}` (expected standard, chunked, kvquant4, layer, head, adaptive)"
                    ),
                })
            }
        }
    }
}

// ── JSON IO ──────────────────────────────────────────────────────────────

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.display().to_string(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model_spec(path: impl AsRef<Path>) -> Result<ModelSpec> {
    let spec: ModelSpec = read_json(path.as_ref())?;
    spec.validate()?;
    Ok(spec)
}

pub fn save_model_spec(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    write_json(path.as_ref(), spec)
}

pub fn load_hardware_spec(path: impl AsRef<Path>) -> Result<HardwareSpec> {
    let spec: HardwareSpec = read_json(path.as_ref())?;
    spec.validate()?;
    Ok(spec)
}

pub fn save_hardware_spec(path: impl AsRef<Path>, spec: &HardwareSpec) -> Result<()> {
    spec.validate()?;
    write_json(path.as_ref(), spec)
}

// ── Built-in catalogs ────────────────────────────────────────────────────

macro_rules! builtin_model {
    ($file:literal) => {
        include_str!(concat!("../../../configs/models/", $file))
    };
}

const BUILTIN_MODELS: &[&str] = &[
    builtin_model!("llama3-8b.json"),
    builtin_model!("llama2-7b.json"),
    builtin_model!("mistral-7b.json"),
    builtin_model!("qwen2-7b.json"),
    builtin_model!("gemma2-9b.json"),
    builtin_model!("llama3-70b.json"),
    builtin_model!("toy.json"),
];

const BUILTIN_PROFILES: &[&str] = &[
    include_str!("../../../configs/hardware/profile-a.json"),
    include_str!("../../../configs/hardware/profile-b.json"),
];

/// Model catalog shipped with the crate.
pub fn builtin_models() -> Vec<ModelSpec> {
    BUILTIN_MODELS
        .iter()
        .map(|text| {
            let m: ModelSpec = serde_json::from_str(text).expect("builtin model parses");
            m.validate().expect("builtin model valid");
            m
        })
        .collect()
}

/// Hardware profiles shipped with the crate.
pub fn builtin_profiles() -> Vec<HardwareSpec> {
    BUILTIN_PROFILES
        .iter()
        .map(|text| {
            let hw: HardwareSpec = serde_json::from_str(text).expect("builtin profile parses");
            hw.validate().expect("builtin profile valid");
            hw
        })
        .collect()
}

pub fn find_model(name: &str) -> Option<ModelSpec> {
    builtin_models().into_iter().find(|m| m.name == name)
}

pub fn find_profile(name: &str) -> Option<HardwareSpec> {
    builtin_profiles().into_iter().find(|h| h.name == name)
}
