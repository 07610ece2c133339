//! Two-tier offload runtime: capacity-enforced arenas, ping-pong staging,
//! dual-stream transfer scheduling, and a simulated-time ledger.

mod arena;
mod exec;
mod pipeline;
mod simulate;
mod timeline;
mod verify;

pub use arena::{Arena, Handle, Tier};
pub use exec::{RunMode, Runtime, MAX_NUMERIC_ELEMENTS};
pub use pipeline::{schedule_sweep, sweep_makespan_law, StreamClock, SweepSchedule, SweepStep};
pub use simulate::{
    allocate_arenas, check_fits_device, decode_layer_steps, prefill_layer_steps,
    simulate_decode, simulate_prefill,
};
pub use timeline::{
    ComputeInterval, Direction, SimTimeline, SlotRef, Stream, TransferEvent,
};
pub use verify::{
    verify_equivalence, EquivalenceReport, PolicyDeviation, EQUIVALENCE_TOLERANCE,
};
