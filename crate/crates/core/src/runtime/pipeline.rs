//! Depth-2 pipelined sweep scheduling over three lanes: one compute lane and
//! two transfer streams (prefetch H2D, evict D2H).
//!
//! A sweep processes `n` head groups. While group `i` computes, the prefetch
//! stream stages group `i+1`'s cache block into the other ping-pong slot and
//! the evict stream writes group `i-1`'s freshly produced rows back to the
//! host. Step boundaries advance by `max(compute_i, prefetch_{i+1},
//! evict_{i-1})`, so the simulated makespan of a sweep is exactly
//!
//! ```text
//! fill + sum_i max(compute_i, transfer_i) + drain
//! ```
//!
//! with `fill` the first prefetch, `drain` the last evict, and `transfer_i`
//! the per-stream work concurrent with step `i`.

use crate::workload::HardwareSpec;

use super::timeline::{
    ComputeInterval, Direction, SimTimeline, SlotRef, Stream, TransferEvent,
};

/// Per-stream clock enforcing that events on one stream never overlap.
#[derive(Debug, Default, Clone)]
pub struct StreamClock {
    prefetch_end: f64,
    evict_end: f64,
}

impl StreamClock {
    fn lane_end(&mut self, stream: Stream) -> &mut f64 {
        match stream {
            Stream::Prefetch => &mut self.prefetch_end,
            Stream::Evict => &mut self.evict_end,
        }
    }

    /// Schedule one transfer. It starts at `max(not_before, previous end on
    /// the same stream)` and lasts `bytes / link bandwidth` for its size
    /// class.
    pub fn schedule_transfer(
        &mut self,
        hw: &HardwareSpec,
        direction: Direction,
        bytes: u64,
        not_before: f64,
        slot: Option<SlotRef>,
    ) -> TransferEvent {
        let stream = match direction {
            Direction::HostToDevice => Stream::Prefetch,
            Direction::DeviceToHost => Stream::Evict,
        };
        let lane = self.lane_end(stream);
        let start = not_before.max(*lane);
        let end = start + bytes as f64 / hw.link_bw_for(bytes);
        *lane = end;
        TransferEvent {
            direction,
            stream,
            bytes,
            start,
            end,
            slot,
        }
    }
}

/// One head-group step of a sweep.
#[derive(Debug, Clone, Copy, Default)]
pub struct SweepStep {
    /// Attention + projection time for this group on the compute lane.
    pub compute_secs: f64,
    pub compute_flops: f64,
    /// Cache block staged before this group can compute (0 = resident).
    pub prefetch_bytes: u64,
    /// Rows written back to the host after this group computes.
    pub evict_bytes: u64,
}

impl SweepStep {
    fn prefetch_secs(&self, hw: &HardwareSpec) -> f64 {
        if self.prefetch_bytes == 0 {
            0.0
        } else {
            self.prefetch_bytes as f64 / hw.link_bw_for(self.prefetch_bytes)
        }
    }

    fn evict_secs(&self, hw: &HardwareSpec) -> f64 {
        if self.evict_bytes == 0 {
            0.0
        } else {
            self.evict_bytes as f64 / hw.link_bw_for(self.evict_bytes)
        }
    }
}

/// Boundaries of a scheduled sweep: `window[i]` is where step `i`'s compute
/// begins; `end` includes the drain.
#[derive(Debug, Clone)]
pub struct SweepSchedule {
    pub windows: Vec<f64>,
    pub end: f64,
}

/// Emit one sweep's events into `timeline`, starting no earlier than `t0`.
/// Returns the sweep schedule; `schedule.end` is when every lane has joined.
pub fn schedule_sweep(
    timeline: &mut SimTimeline,
    clock: &mut StreamClock,
    hw: &HardwareSpec,
    t0: f64,
    steps: &[SweepStep],
) -> SweepSchedule {
    let n = steps.len();
    if n == 0 {
        return SweepSchedule {
            windows: Vec::new(),
            end: t0,
        };
    }
    let in_slot = |i: usize| SlotRef {
        stream: Stream::Prefetch,
        index: i % 2,
    };
    let out_slot = |i: usize| SlotRef {
        stream: Stream::Evict,
        index: i % 2,
    };

    // Fill: stage the first group's block before any compute.
    let mut t = t0;
    if steps[0].prefetch_bytes > 0 {
        let ev = clock.schedule_transfer(
            hw,
            Direction::HostToDevice,
            steps[0].prefetch_bytes,
            t,
            Some(in_slot(0)),
        );
        t = ev.end;
        timeline.push_transfer(ev);
    }

    let mut windows = Vec::with_capacity(n);
    for i in 0..n {
        windows.push(t);
        let step = &steps[i];
        let mut window = step.compute_secs;

        if step.compute_secs > 0.0 || step.compute_flops > 0.0 {
            timeline.push_compute(ComputeInterval {
                start: t,
                end: t + step.compute_secs,
                flops: step.compute_flops,
                slot: (step.prefetch_bytes > 0 || step.evict_bytes > 0).then(|| in_slot(i)),
            });
        }
        // Prefetch the next group while this one computes.
        if let Some(next) = steps.get(i + 1) {
            if next.prefetch_bytes > 0 {
                let ev = clock.schedule_transfer(
                    hw,
                    Direction::HostToDevice,
                    next.prefetch_bytes,
                    t,
                    Some(in_slot(i + 1)),
                );
                window = window.max(ev.end - t);
                timeline.push_transfer(ev);
            }
        }
        // Evict the previous group's delta while this one computes.
        if i > 0 && steps[i - 1].evict_bytes > 0 {
            let ev = clock.schedule_transfer(
                hw,
                Direction::DeviceToHost,
                steps[i - 1].evict_bytes,
                t,
                Some(out_slot(i - 1)),
            );
            window = window.max(ev.end - t);
            timeline.push_transfer(ev);
        }
        t += window;
    }

    // Drain: the last group's write-back happens after its compute.
    if steps[n - 1].evict_bytes > 0 {
        let ev = clock.schedule_transfer(
            hw,
            Direction::DeviceToHost,
            steps[n - 1].evict_bytes,
            t,
            Some(out_slot(n - 1)),
        );
        t = ev.end;
        timeline.push_transfer(ev);
    }
    SweepSchedule { windows, end: t }
}

/// The closed-form makespan a sweep must match exactly in simulated mode.
pub fn sweep_makespan_law(hw: &HardwareSpec, steps: &[SweepStep]) -> f64 {
    let n = steps.len();
    if n == 0 {
        return 0.0;
    }
    let fill = steps[0].prefetch_secs(hw);
    let drain = steps[n - 1].evict_secs(hw);
    let mut body = 0.0;
    for i in 0..n {
        let prefetch_next = steps.get(i + 1).map_or(0.0, |s| s.prefetch_secs(hw));
        let evict_prev = if i > 0 { steps[i - 1].evict_secs(hw) } else { 0.0 };
        body += steps[i].compute_secs.max(prefetch_next).max(evict_prev);
    }
    fill + body + drain
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::find_profile;

    #[test]
    fn transfer_duration_is_bytes_over_bandwidth() {
        let hw = find_profile("profile-a").unwrap();
        let mut clock = StreamClock::default();
        let ev = clock.schedule_transfer(&hw, Direction::HostToDevice, 1 << 30, 0.0, None);
        assert!((ev.end - ev.start - 0.042_949_672_96).abs() < 1e-12);
    }

    #[test]
    fn zero_byte_transfer_has_zero_duration() {
        let hw = find_profile("profile-a").unwrap();
        let mut clock = StreamClock::default();
        let ev = clock.schedule_transfer(&hw, Direction::DeviceToHost, 0, 1.5, None);
        assert_eq!(ev.start, 1.5);
        assert_eq!(ev.end, 1.5);
    }

    #[test]
    fn same_stream_transfers_serialize() {
        let hw = find_profile("profile-a").unwrap();
        let mut clock = StreamClock::default();
        let first = clock.schedule_transfer(&hw, Direction::HostToDevice, 25_000_000_000, 0.0, None);
        let second = clock.schedule_transfer(&hw, Direction::HostToDevice, 1, 0.0, None);
        assert_eq!(second.start, first.end);
    }

    #[test]
    fn opposite_streams_run_concurrently() {
        let hw = find_profile("profile-a").unwrap();
        let mut clock = StreamClock::default();
        let a = clock.schedule_transfer(&hw, Direction::HostToDevice, 25_000_000_000, 0.0, None);
        let b = clock.schedule_transfer(&hw, Direction::DeviceToHost, 25_000_000_000, 0.0, None);
        assert_eq!(a.start, b.start);
    }

    #[test]
    fn sweep_matches_makespan_law_exactly() {
        let hw = find_profile("profile-a").unwrap();
        // Three synthetic steps (seconds chosen via byte counts on the bulk
        // link): mixes compute-dominated and transfer-dominated windows.
        let gib = 1u64 << 30;
        let steps = [
            SweepStep {
                compute_secs: 0.05,
                compute_flops: 1e12,
                prefetch_bytes: gib,
                evict_bytes: gib / 4,
            },
            SweepStep {
                compute_secs: 0.01,
                compute_flops: 1e11,
                prefetch_bytes: 2 * gib,
                evict_bytes: gib / 4,
            },
            SweepStep {
                compute_secs: 0.08,
                compute_flops: 2e12,
                prefetch_bytes: gib / 2,
                evict_bytes: gib,
            },
        ];
        let mut timeline = SimTimeline::default();
        let mut clock = StreamClock::default();
        let sched = schedule_sweep(&mut timeline, &mut clock, &hw, 0.0, &steps);
        let law = sweep_makespan_law(&hw, &steps);
        assert!(
            (sched.end - law).abs() < 1e-12,
            "scheduled {} vs law {law}",
            sched.end
        );
        timeline.assert_resource_bounds();
        timeline.check_pingpong_safety().unwrap();
    }

    #[test]
    fn fully_overlapped_sweep_costs_fill_plus_compute() {
        let hw = find_profile("profile-a").unwrap();
        // Transfers much smaller than compute: makespan = fill + sum compute.
        let steps: Vec<SweepStep> = (0..4)
            .map(|_| SweepStep {
                compute_secs: 1.0,
                compute_flops: 1e12,
                prefetch_bytes: 25_000_000, // 1 ms on the bulk link
                evict_bytes: 25_000_000,
            })
            .collect();
        let mut timeline = SimTimeline::default();
        let mut clock = StreamClock::default();
        let sched = schedule_sweep(&mut timeline, &mut clock, &hw, 0.0, &steps);
        assert!((sched.end - (0.001 + 4.0 + 0.001)).abs() < 1e-9);
    }
}
