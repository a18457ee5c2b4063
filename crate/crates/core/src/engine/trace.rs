//! Time-ordered simulator output and aggregate throughput statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::ModelVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    GradientReady,
    GossipExchange,
    SyncBarrier,
    MetricProbe,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::GradientReady => "gradient_ready",
            EventKind::GossipExchange => "gossip_exchange",
            EventKind::SyncBarrier => "sync_barrier",
            EventKind::MetricProbe => "metric_probe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "gradient_ready" => EventKind::GradientReady,
            "gossip_exchange" => EventKind::GossipExchange,
            "sync_barrier" => EventKind::SyncBarrier,
            "metric_probe" => EventKind::MetricProbe,
            _ => return None,
        })
    }
}

/// One row of a training trace. Update rows (`gossip_exchange` for the
/// asynchronous run, `gradient_ready` for the synchronous one) each advance
/// the global iteration counter by one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub virtual_time: f64,
    pub global_iter: usize,
    pub worker: Option<usize>,
    pub event: EventKind,
    pub loss: Option<f64>,
    pub grad_norm_sq: Option<f64>,
    pub staleness: Option<usize>,
    pub eps_spent: Option<f64>,
    /// Duration of the gradient computation behind an update; not serialized
    /// to trace files.
    #[serde(skip)]
    pub compute_time: Option<f64>,
}

impl TraceRecord {
    pub fn is_update(&self) -> bool {
        matches!(self.event, EventKind::GradientReady | EventKind::GossipExchange)
    }
}

/// Average model `theta^t` captured at a metric probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeState {
    pub global_iter: usize,
    pub virtual_time: f64,
    pub theta: ModelVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Adpsgd,
    Sync,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub final_theta: ModelVector,
    pub total_virtual_time: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub lr_rule: String,
    pub batch_size: usize,
    pub max_staleness: usize,
    /// Accumulated per-iteration RDP cost at the calibrated order.
    pub rdp_spent: Option<f64>,
}

/// Receiver of simulator output.
pub trait TraceSink {
    fn record(&mut self, record: TraceRecord);

    fn probe(&mut self, _state: ProbeState) {}
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _record: TraceRecord) {}
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
    pub probes: Vec<ProbeState>,
    pub summary: Option<RunSummary>,
}

impl TraceSink for TrainingTrace {
    fn record(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    fn probe(&mut self, state: ProbeState) {
        self.probes.push(state);
    }
}

impl TrainingTrace {
    pub fn updates(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.is_update())
    }

    pub fn probe_records(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.event == EventKind::MetricProbe)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSummary {
    pub updates: usize,
    pub wall_time: f64,
    pub updates_per_time: f64,
    pub mean_staleness: f64,
    pub max_staleness: usize,
    /// Mean duration of the gradient computations behind the updates.
    pub mean_compute_time: Option<f64>,
    /// Wall time of each synchronous round (barrier to barrier).
    pub round_times: Vec<f64>,
}

impl ThroughputSummary {
    pub fn mean_round_time(&self) -> Option<f64> {
        if self.round_times.is_empty() {
            None
        } else {
            Some(self.round_times.iter().sum::<f64>() / self.round_times.len() as f64)
        }
    }
}

pub fn throughput_summary(trace: &TrainingTrace) -> Result<ThroughputSummary> {
    throughput_of(&trace.records)
}

pub fn throughput_of(records: &[TraceRecord]) -> Result<ThroughputSummary> {
    if records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let updates: Vec<&TraceRecord> = records.iter().filter(|r| r.is_update()).collect();
    let wall_time = records.iter().map(|r| r.virtual_time).fold(0.0, f64::max);
    let staleness: Vec<usize> = updates.iter().filter_map(|r| r.staleness).collect();
    let compute: Vec<f64> = updates.iter().filter_map(|r| r.compute_time).collect();
    let mut round_times = Vec::new();
    let mut last_barrier = 0.0;
    for r in records.iter().filter(|r| r.event == EventKind::SyncBarrier) {
        round_times.push(r.virtual_time - last_barrier);
        last_barrier = r.virtual_time;
    }
    Ok(ThroughputSummary {
        updates: updates.len(),
        wall_time,
        updates_per_time: if wall_time > 0.0 { updates.len() as f64 / wall_time } else { f64::INFINITY },
        mean_staleness: if staleness.is_empty() {
            0.0
        } else {
            staleness.iter().sum::<usize>() as f64 / staleness.len() as f64
        },
        max_staleness: staleness.iter().copied().max().unwrap_or(0),
        mean_compute_time: if compute.is_empty() {
            None
        } else {
            Some(compute.iter().sum::<f64>() / compute.len() as f64)
        },
        round_times,
    })
}
