use std::collections::VecDeque;

use serde::Serialize;

/// Row labels of the timing report.
pub const ROW_NAMES: [&str; 3] = ["Packet Travel Time", "Simulation Step", "Total"];
/// Samples required before a summary is available.
pub const MIN_SAMPLES: usize = 100;
pub const DEFAULT_WINDOW: usize = 1000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("timing profile needs {MIN_SAMPLES} samples, has {have}")]
pub struct InsufficientSamples {
    pub have: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
}

impl Stats {
    /// Nearest-rank percentiles. Panics on an empty slice.
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |p: f64| sorted[((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        Self {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50: rank(0.5),
            p99: rank(0.99),
            max: sorted[sorted.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingSummary {
    /// Ticks stepped since the profiler was created.
    pub ticks: u64,
    /// Sender timestamp to server receipt, µs (one-way; assumes a shared clock).
    pub packet_travel_us: Stats,
    pub sim_step_us: Stats,
    pub total_us: Stats,
}

impl TimingSummary {
    pub fn rows(&self) -> [(&'static str, &Stats); 3] {
        [
            (ROW_NAMES[0], &self.packet_travel_us),
            (ROW_NAMES[1], &self.sim_step_us),
            (ROW_NAMES[2], &self.total_us),
        ]
    }
}

/// Rolling per-tick latency samples.
///
/// A sample is taken on every tick that consumes a fresh tracking packet:
/// the packet's travel time and that tick's step time. Ticks with no new
/// input have no travel time and only advance the tick counter.
#[derive(Debug, Clone)]
pub struct TimingProfile {
    window: usize,
    travel: VecDeque<f64>,
    step: VecDeque<f64>,
    ticks: u64,
}

impl Default for TimingProfile {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW)
    }
}

impl TimingProfile {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            travel: VecDeque::new(),
            step: VecDeque::new(),
            ticks: 0,
        }
    }

    pub fn tick(&mut self) {
        self.ticks += 1;
    }

    pub fn record(&mut self, travel_us: f64, step_us: f64) {
        if self.travel.len() == self.window {
            self.travel.pop_front();
            self.step.pop_front();
        }
        self.travel.push_back(travel_us);
        self.step.push_back(step_us);
    }

    pub fn samples(&self) -> usize {
        self.travel.len()
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn summary(&self) -> Result<TimingSummary, InsufficientSamples> {
        if self.travel.len() < MIN_SAMPLES {
            return Err(InsufficientSamples { have: self.travel.len() });
        }
        let travel: Vec<f64> = self.travel.iter().copied().collect();
        let step: Vec<f64> = self.step.iter().copied().collect();
        let total: Vec<f64> = travel.iter().zip(&step).map(|(a, b)| a + b).collect();
        Ok(TimingSummary {
            ticks: self.ticks,
            packet_travel_us: Stats::from_samples(&travel),
            sim_step_us: Stats::from_samples(&step),
            total_us: Stats::from_samples(&total),
        })
    }
}
