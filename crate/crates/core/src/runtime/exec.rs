//! Numeric execution of the offload pipeline over the mini-engine.
//!
//! The runtime owns both tiers: the KV pool (host side for offload policies,
//! device side otherwise) plus ping-pong staging. Offloaded groups are staged
//! into a scratch copy, attended against, and their freshly produced rows
//! written back to the pool, so a corrupted pool byte provably corrupts the
//! output.
//!
//! Simulated mode runs groups sequentially under a virtual clock. Overlapped
//! mode runs real prefetch/compute/evict lanes with two staging permits per
//! direction; outputs are identical, only wall-clock concurrency differs.

use std::ops::Range;
use std::sync::{mpsc, RwLock};

use crate::engine::{
    attention_heads_into, project_qkv, split_heads, EngineModel, HeadKvCache, KvSource, Matrix,
};
use crate::error::{Error, Result};
use crate::workload::{HardwareSpec, ModelSpec, PolicyKind};

use super::arena::Arena;
use super::pipeline::{schedule_sweep, StreamClock};
use super::simulate::{allocate_arenas, chunks, decode_layer_steps, prefill_layer_steps};
use super::timeline::SimTimeline;

/// Numeric runs keep every cache element in memory; cap the element count so
/// full-scale contexts are routed to the analytic simulation instead.
pub const MAX_NUMERIC_ELEMENTS: u64 = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Sequential execution under a deterministic virtual clock.
    Simulated,
    /// Real concurrent lanes validating the hand-off contract.
    Overlapped,
}

/// A staged copy of one head group's cache block, including the rows the
/// current chunk just produced.
struct StagedGroup {
    first_head: usize,
    blocks: Vec<(Vec<f32>, Vec<f32>, usize)>,
}

impl KvSource for StagedGroup {
    fn head(&self, kv_head: usize) -> (&[f32], &[f32], usize) {
        let b = &self.blocks[kv_head - self.first_head];
        (&b.0, &b.1, b.2)
    }
}

fn stage_group(
    pool: &HeadKvCache,
    layer: usize,
    heads: Range<usize>,
    k_heads: &[Vec<f32>],
    v_heads: &[Vec<f32>],
) -> StagedGroup {
    let dim = pool.head_dim();
    let first_head = heads.start;
    let blocks = heads
        .map(|h| {
            let (k, v, len) = pool.head(layer, h);
            let delta_rows = k_heads[h].len() / dim;
            let mut ks = Vec::with_capacity(k.len() + k_heads[h].len());
            ks.extend_from_slice(k);
            ks.extend_from_slice(&k_heads[h]);
            let mut vs = Vec::with_capacity(v.len() + v_heads[h].len());
            vs.extend_from_slice(v);
            vs.extend_from_slice(&v_heads[h]);
            (ks, vs, len + delta_rows)
        })
        .collect();
    StagedGroup { first_head, blocks }
}

/// Prefetch/compute/evict over real threads. Two permits bound the prefetch
/// lane to one group of lookahead, mirroring the two staging slots; a staged
/// block is released only after the compute that reads it completes.
#[allow(clippy::too_many_arguments)]
fn sweep_groups_overlapped(
    engine: &EngineModel,
    pool: &RwLock<HeadKvCache>,
    layer: usize,
    q: &Matrix,
    k_heads: &[Vec<f32>],
    v_heads: &[Vec<f32>],
    causal_offset: usize,
    groups: usize,
    heads_per_group: usize,
    out: &mut Matrix,
) -> Result<()> {
    std::thread::scope(|scope| -> Result<()> {
        let (staged_tx, staged_rx) = mpsc::channel::<StagedGroup>();
        let (evict_tx, evict_rx) = mpsc::channel::<usize>();
        let (slot_tx, slot_rx) = mpsc::channel::<()>();
        let _ = slot_tx.send(());
        let _ = slot_tx.send(());

        scope.spawn(move || {
            for group in 0..groups {
                if slot_rx.recv().is_err() {
                    return;
                }
                let heads = group * heads_per_group..(group + 1) * heads_per_group;
                let staged = {
                    let guard = pool.read().expect("pool lock");
                    stage_group(&guard, layer, heads, k_heads, v_heads)
                };
                if staged_tx.send(staged).is_err() {
                    return;
                }
            }
        });

        let evictor = scope.spawn(move || -> Result<()> {
            while let Ok(group) = evict_rx.recv() {
                let mut guard = pool.write().expect("pool lock");
                for h in group * heads_per_group..(group + 1) * heads_per_group {
                    guard.append(layer, h, &k_heads[h], &v_heads[h])?;
                }
            }
            Ok(())
        });

        let mut compute_err = None;
        for group in 0..groups {
            let Ok(staged) = staged_rx.recv() else {
                compute_err = Some(Error::InvalidState("prefetch lane stopped early".into()));
                break;
            };
            let heads = group * heads_per_group..(group + 1) * heads_per_group;
            if let Err(e) = attention_heads_into(engine, q, &staged, heads, causal_offset, out) {
                compute_err = Some(e);
                break;
            }
            drop(staged);
            let _ = slot_tx.send(());
            if evict_tx.send(group).is_err() {
                break;
            }
        }
        drop(evict_tx);
        drop(slot_tx);
        let evict_result = evictor.join().expect("evict lane must not panic");
        match compute_err {
            Some(e) => Err(e),
            None => evict_result,
        }
    })
}

/// A prefill/decode run of one policy over the two-tier memory model.
#[derive(Debug)]
pub struct Runtime {
    spec: ModelSpec,
    hw: HardwareSpec,
    policy: PolicyKind,
    context: u64,
    run_chunk: u64,
    mode: RunMode,
    engine: EngineModel,
    /// Host pool for offload policies, device cache otherwise.
    pool: RwLock<HeadKvCache>,
    device: Arena,
    host: Arena,
    clock: StreamClock,
    timeline: SimTimeline,
    now: f64,
    positions: u64,
}

impl Runtime {
    /// Pre-allocates both tiers for `context + decode_headroom` tokens; fails
    /// with `CapacityExceeded` before any compute if the policy cannot fit.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: &ModelSpec,
        hw: &HardwareSpec,
        policy: PolicyKind,
        context: u64,
        chunk: u64,
        decode_headroom: u64,
        mode: RunMode,
        seed: u64,
    ) -> Result<Self> {
        match policy {
            PolicyKind::Adaptive => {
                return Err(Error::UnresolvedPolicy(
                    "adaptive must be resolved to a concrete policy before execution".into(),
                ))
            }
            PolicyKind::KvQuant4 => {
                return Err(Error::InvalidState(
                    "kv-quant-4 is an analytic memory policy; numeric execution is undefined".into(),
                ))
            }
            _ => {}
        }
        policy.validate_for(spec)?;
        let capacity = context + decode_headroom;
        let elements = 2 * spec.num_layers * spec.num_kv_heads * capacity * spec.head_dim;
        if elements > MAX_NUMERIC_ELEMENTS {
            return Err(Error::InvalidState(format!(
                "numeric execution is desk-scale only ({elements} cache elements requested); \
                 use the analytic simulation for large contexts"
            )));
        }
        let run_chunk = if policy.is_chunked() {
            chunk.min(context.max(1)).max(1)
        } else {
            context.max(1)
        };
        let (device, host) = allocate_arenas(spec, hw, policy, capacity, run_chunk)?;
        let engine = EngineModel::new(spec, seed);
        let pool = RwLock::new(engine.new_cache(capacity as usize));
        Ok(Runtime {
            spec: spec.clone(),
            hw: hw.clone(),
            policy,
            context,
            run_chunk,
            mode,
            engine,
            pool,
            device,
            host,
            clock: StreamClock::default(),
            timeline: SimTimeline::default(),
            now: 0.0,
            positions: 0,
        })
    }

    fn forward_layer(&mut self, layer: usize, x: &Matrix, causal_offset: u64) -> Result<Matrix> {
        let (q, k, v) = project_qkv(self.engine.layer(layer), x)?;
        let k_heads = split_heads(&self.engine, &k);
        let v_heads = split_heads(&self.engine, &v);
        let mut out = Matrix::zeros(x.rows(), self.engine.hidden_dim());
        let offset = causal_offset as usize;
        match self.policy.group_count(&self.spec) {
            None => {
                let pool = self.pool.get_mut().expect("pool lock");
                for h in 0..self.engine.num_kv_heads {
                    pool.append(layer, h, &k_heads[h], &v_heads[h])?;
                }
                attention_heads_into(
                    &self.engine,
                    &q,
                    &pool.layer_view(layer),
                    0..self.engine.num_kv_heads,
                    offset,
                    &mut out,
                )?;
            }
            Some(groups) => {
                let groups = groups as usize;
                let g = self.policy.heads_per_group(&self.spec).unwrap() as usize;
                match self.mode {
                    RunMode::Simulated => {
                        let pool = self.pool.get_mut().expect("pool lock");
                        for group in 0..groups {
                            let heads = group * g..(group + 1) * g;
                            let staged =
                                stage_group(pool, layer, heads.clone(), &k_heads, &v_heads);
                            attention_heads_into(
                                &self.engine,
                                &q,
                                &staged,
                                heads.clone(),
                                offset,
                                &mut out,
                            )?;
                            for h in heads {
                                pool.append(layer, h, &k_heads[h], &v_heads[h])?;
                            }
                        }
                    }
                    RunMode::Overlapped => {
                        sweep_groups_overlapped(
                            &self.engine,
                            &self.pool,
                            layer,
                            &q,
                            &k_heads,
                            &v_heads,
                            offset,
                            groups,
                            g,
                            &mut out,
                        )?;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Process the configured context; returns the final position's hidden
    /// state. The pool ends holding `context` tokens on every head.
    pub fn prefill(&mut self) -> Result<Vec<f32>> {
        if self.positions != 0 {
            return Err(Error::InvalidState("prefill must run first and once".into()));
        }
        if self.context == 0 {
            self.timeline.peak_device_bytes = self.device.peak();
            return Ok(vec![0.0; self.engine.hidden_dim()]);
        }
        let mut summary = vec![0.0; self.engine.hidden_dim()];
        for (past, len) in chunks(self.context, self.run_chunk) {
            let mut x = self.engine.embed_chunk(past, len as usize);
            for layer in 0..self.engine.num_layers {
                x = self.forward_layer(layer, &x, past)?;
                let steps = prefill_layer_steps(&self.spec, &self.hw, self.policy, past, len);
                self.now =
                    schedule_sweep(&mut self.timeline, &mut self.clock, &self.hw, self.now, &steps)
                        .end;
            }
            if past + len == self.context {
                summary = x.row(x.rows() - 1).to_vec();
            }
        }
        self.positions = self.context;
        self.timeline.peak_device_bytes = self.device.peak();
        Ok(summary)
    }

    /// Generate one token; decode prefetch pipelines across layer boundaries,
    /// so each token is a single sweep over every layer's groups.
    pub fn decode_one(&mut self) -> Result<Vec<f32>> {
        if self.positions == 0 {
            return Err(Error::InvalidState("decode requires a prefilled cache".into()));
        }
        let cache_len = self.positions;
        let x0 = Matrix::from_vec(
            1,
            self.engine.hidden_dim(),
            self.engine.embedding(cache_len),
        )?;
        let mut x = x0;
        for layer in 0..self.engine.num_layers {
            x = self.forward_layer(layer, &x, cache_len)?;
        }
        let mut steps = Vec::new();
        for _layer in 0..self.engine.num_layers {
            steps.extend(decode_layer_steps(&self.spec, &self.hw, self.policy, cache_len));
        }
        self.now =
            schedule_sweep(&mut self.timeline, &mut self.clock, &self.hw, self.now, &steps).end;
        self.positions += 1;
        self.timeline.peak_device_bytes = self.device.peak();
        Ok(x.row(0).to_vec())
    }

    pub fn decode(&mut self, tokens: u64) -> Result<Vec<Vec<f32>>> {
        (0..tokens).map(|_| self.decode_one()).collect()
    }

    pub fn timeline(&self) -> &SimTimeline {
        &self.timeline
    }

    pub fn device_arena(&self) -> &Arena {
        &self.device
    }

    pub fn host_arena(&self) -> &Arena {
        &self.host
    }

    pub fn policy(&self) -> PolicyKind {
        self.policy
    }

    pub fn positions(&self) -> u64 {
        self.positions
    }

    /// Bytes the KV pool would occupy at the model's dtype width, counting
    /// filled tokens only. For offload policies this is the host-resident
    /// cache.
    pub fn pool_kv_bytes(&self) -> u64 {
        self.pool
            .read()
            .expect("pool lock")
            .filled_bytes(self.spec.dtype_bytes)
    }

    /// Direct mutable access to the KV pool. Fault-injection hook for
    /// negative-control testing.
    pub fn pool_mut(&mut self) -> &mut HeadKvCache {
        self.pool.get_mut().expect("pool lock")
    }
}
