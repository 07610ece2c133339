//! Simulated-time ledger of compute and transfer intervals.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    HostToDevice,
    DeviceToHost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Stream {
    Prefetch,
    Evict,
}

/// Which ping-pong staging slot an interval touches, when any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SlotRef {
    pub stream: Stream,
    pub index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferEvent {
    pub direction: Direction,
    pub stream: Stream,
    pub bytes: u64,
    pub start: f64,
    pub end: f64,
    /// Staging slot written (prefetch) or read (evict).
    pub slot: Option<SlotRef>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComputeInterval {
    pub start: f64,
    pub end: f64,
    pub flops: f64,
    /// Staging slot the computation reads, for offloaded groups.
    pub slot: Option<SlotRef>,
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct SimTimeline {
    pub computes: Vec<ComputeInterval>,
    pub transfers: Vec<TransferEvent>,
    pub makespan: f64,
    /// Peak device-arena bytes observed during the run.
    pub peak_device_bytes: u64,
    #[serde(skip)]
    prefetch_last_end: f64,
    #[serde(skip)]
    evict_last_end: f64,
}

impl SimTimeline {
    pub fn push_compute(&mut self, interval: ComputeInterval) {
        debug_assert!(interval.end >= interval.start);
        self.makespan = self.makespan.max(interval.end);
        self.computes.push(interval);
    }

    pub fn push_transfer(&mut self, event: TransferEvent) {
        debug_assert!(event.end >= event.start);
        let last = match event.stream {
            Stream::Prefetch => &mut self.prefetch_last_end,
            Stream::Evict => &mut self.evict_last_end,
        };
        assert!(
            event.start >= *last - 1e-12,
            "events on one stream must not overlap"
        );
        *last = event.end;
        self.makespan = self.makespan.max(event.end);
        self.transfers.push(event);
    }

    pub fn total_compute(&self) -> f64 {
        self.computes.iter().map(|c| c.end - c.start).sum()
    }

    pub fn stream_busy(&self, stream: Stream) -> f64 {
        self.transfers
            .iter()
            .filter(|e| e.stream == stream)
            .map(|e| e.end - e.start)
            .sum()
    }

    pub fn total_transfer_bytes(&self, stream: Stream) -> u64 {
        self.transfers
            .iter()
            .filter(|e| e.stream == stream)
            .map(|e| e.bytes)
            .sum()
    }

    /// Fraction of transfer busy-time that overlaps some compute interval.
    /// A run with no transfers is fully hidden by definition.
    pub fn overlap_fraction(&self) -> f64 {
        let total: f64 = self.transfers.iter().map(|e| e.end - e.start).sum();
        if total == 0.0 {
            return 1.0;
        }
        // Compute intervals come from a single lane in schedule order, so
        // they are already disjoint and sorted.
        let mut spans: Vec<(f64, f64)> = Vec::with_capacity(self.computes.len());
        for c in &self.computes {
            match spans.last_mut() {
                Some(last) if c.start <= last.1 => last.1 = last.1.max(c.end),
                _ => spans.push((c.start, c.end)),
            }
        }
        let mut overlapped = 0.0;
        for t in &self.transfers {
            let idx = spans.partition_point(|s| s.1 <= t.start);
            for s in &spans[idx..] {
                if s.0 >= t.end {
                    break;
                }
                let lo = t.start.max(s.0);
                let hi = t.end.min(s.1);
                if hi > lo {
                    overlapped += hi - lo;
                }
            }
        }
        (overlapped / total).clamp(0.0, 1.0)
    }

    /// No single lane can beat its own busy time.
    pub fn assert_resource_bounds(&self) {
        let eps = 1e-9 * self.makespan.max(1.0);
        assert!(self.makespan + eps >= self.total_compute());
        assert!(self.makespan + eps >= self.stream_busy(Stream::Prefetch));
        assert!(self.makespan + eps >= self.stream_busy(Stream::Evict));
    }

    /// Ping-pong safety: a slot is never touched while an earlier interval on
    /// the same slot is still in flight. All slot accesses are exclusive, so
    /// any overlap between two intervals on one slot is a violation.
    pub fn check_pingpong_safety(&self) -> std::result::Result<(), String> {
        type SlotSpans = Vec<(f64, f64, &'static str)>;
        let mut by_slot: std::collections::HashMap<(Stream, usize), SlotSpans> =
            std::collections::HashMap::new();
        for t in &self.transfers {
            if let Some(slot) = t.slot {
                by_slot
                    .entry((slot.stream, slot.index))
                    .or_default()
                    .push((t.start, t.end, "transfer"));
            }
        }
        for c in &self.computes {
            if let Some(slot) = c.slot {
                by_slot
                    .entry((slot.stream, slot.index))
                    .or_default()
                    .push((c.start, c.end, "compute"));
            }
        }
        let eps = 1e-12;
        for ((stream, index), mut spans) in by_slot {
            spans.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut open_end = f64::NEG_INFINITY;
            let mut open_kind = "";
            for (start, end, kind) in spans {
                if start < open_end - eps {
                    return Err(format!(
                        "slot {stream:?}#{index} reused before completion: {kind} at {start:.3e} \
                         overlaps open {open_kind} ending {open_end:.3e}"
                    ));
                }
                if end > open_end {
                    open_end = end;
                    open_kind = kind;
                }
            }
        }
        Ok(())
    }

    /// JSON export: one summary object plus events sorted by start time.
    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Event<'a> {
            kind: &'a str,
            #[serde(skip_serializing_if = "Option::is_none")]
            stream: Option<Stream>,
            start: f64,
            end: f64,
            #[serde(skip_serializing_if = "Option::is_none")]
            bytes: Option<u64>,
            #[serde(skip_serializing_if = "Option::is_none")]
            flops: Option<f64>,
        }
        let mut events: Vec<Event> = self
            .computes
            .iter()
            .map(|c| Event {
                kind: "compute",
                stream: None,
                start: c.start,
                end: c.end,
                bytes: None,
                flops: Some(c.flops),
            })
            .chain(self.transfers.iter().map(|t| Event {
                kind: "transfer",
                stream: Some(t.stream),
                start: t.start,
                end: t.end,
                bytes: Some(t.bytes),
                flops: None,
            }))
            .collect();
        events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        serde_json::json!({
            "makespan": self.makespan,
            "overlap_fraction": self.overlap_fraction(),
            "peak_device_bytes": self.peak_device_bytes,
            "events": events,
        })
    }

    pub fn summary_line(&self) -> String {
        format!(
            "makespan {:.6e} s, overlap {:.3}, peak device {} B",
            self.makespan,
            self.overlap_fraction(),
            self.peak_device_bytes
        )
    }
}
