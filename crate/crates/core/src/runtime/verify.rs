//! Cross-policy output equivalence: every offload policy must reproduce the
//! resident baseline bit-for-bit up to tolerance.

use serde::Serialize;

use crate::error::Result;
use crate::workload::{HardwareSpec, ModelSpec, PolicyKind};

use super::exec::{RunMode, Runtime};

/// Absolute tolerance for multi-layer output agreement.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct PolicyDeviation {
    pub policy: PolicyKind,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub context: u64,
    pub chunk: u64,
    pub seed: u64,
    pub decode_steps: u64,
    pub tolerance: f64,
    pub deviations: Vec<PolicyDeviation>,
    pub pass: bool,
}

impl EquivalenceReport {
    pub fn max_deviation(&self) -> f64 {
        self.deviations
            .iter()
            .map(|d| d.max_deviation)
            .fold(0.0, f64::max)
    }

    pub fn status_line(&self) -> String {
        if self.pass {
            format!(
                "PASS max_dev {:.3e} <= {:.0e}",
                self.max_deviation(),
                self.tolerance
            )
        } else {
            format!(
                "FAIL max_dev {:.3e} > {:.0e}",
                self.max_deviation(),
                self.tolerance
            )
        }
    }
}

fn run_outputs(
    m: &ModelSpec,
    hw: &HardwareSpec,
    policy: PolicyKind,
    context: u64,
    chunk: u64,
    decode_steps: u64,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    let mut rt = Runtime::new(
        m,
        hw,
        policy,
        context,
        chunk,
        decode_steps,
        RunMode::Simulated,
        seed,
    )?;
    let mut outputs = vec![rt.prefill()?];
    outputs.extend(rt.decode(decode_steps)?);
    rt.timeline().assert_resource_bounds();
    rt.timeline()
        .check_pingpong_safety()
        .map_err(crate::error::Error::InvalidState)?;
    Ok(outputs)
}

fn pairwise_dev(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs() as f64))
        .fold(0.0, f64::max)
}

/// Run every policy on one seed and compare outputs (prefill summary plus
/// each decoded hidden state) against the `Standard` baseline.
pub fn verify_equivalence(
    m: &ModelSpec,
    hw: &HardwareSpec,
    context: u64,
    chunk: u64,
    policies: &[PolicyKind],
    seed: u64,
    decode_steps: u64,
) -> Result<EquivalenceReport> {
    let baseline = run_outputs(m, hw, PolicyKind::Standard, context, chunk, decode_steps, seed)?;
    let mut deviations = Vec::with_capacity(policies.len());
    for &policy in policies {
        let outputs = if policy == PolicyKind::Standard {
            baseline.clone()
        } else {
            run_outputs(m, hw, policy, context, chunk, decode_steps, seed)?
        };
        deviations.push(PolicyDeviation {
            policy,
            max_deviation: pairwise_dev(&baseline, &outputs),
        });
    }
    let pass = deviations
        .iter()
        .all(|d| d.max_deviation <= EQUIVALENCE_TOLERANCE);
    Ok(EquivalenceReport {
        context,
        chunk,
        seed,
        decode_steps,
        tolerance: EQUIVALENCE_TOLERANCE,
        deviations,
        pass,
    })
}
