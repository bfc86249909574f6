//! Run metrics and their line-oriented record form.

use serde::Serialize;
use std::time::Duration;

/// What one device did during one mode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceModeMetrics {
    pub device: usize,
    pub compute_time: Duration,
    pub staging_time: Duration,
    pub staging_bytes: u64,
    pub shards: usize,
    pub nnz: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModeMetrics {
    pub mode: usize,
    pub shards: usize,
    pub nnz: usize,
    pub devices: Vec<DeviceModeMetrics>,
    /// Largest per-device compute time.
    pub compute_span: Duration,
    pub allgather_time: Duration,
    pub allgather_bytes: u64,
    pub allgather_steps: usize,
    pub barriers: usize,
    /// Time spent building this mode's partition plan.
    pub preprocessing_time: Duration,
    pub wall_time: Duration,
}

impl ModeMetrics {
    pub fn staging_bytes(&self) -> u64 {
        self.devices.iter().map(|d| d.staging_bytes).sum()
    }

    /// Staging plus compute of the busiest device, plus the all-gather.
    pub fn critical_path(&self) -> Duration {
        self.devices
            .iter()
            .map(|d| d.staging_time + d.compute_time)
            .max()
            .unwrap_or_default()
            + self.allgather_time
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub devices: usize,
    pub modes: Vec<ModeMetrics>,
    pub wall_time: Duration,
}

impl RunMetrics {
    /// Compute time per device summed over modes.
    pub fn device_compute_times(&self) -> Vec<Duration> {
        let mut out = vec![Duration::ZERO; self.devices];
        for m in &self.modes {
            for d in &m.devices {
                out[d.device] += d.compute_time;
            }
        }
        out
    }

    /// `(max - min) / sum` of per-device compute time, in percent.
    pub fn imbalance_pct(&self) -> f64 {
        imbalance_pct(&self.device_compute_times())
    }

    pub fn compute_span(&self) -> Duration {
        self.modes.iter().map(|m| m.compute_span).sum()
    }

    pub fn staging_bytes(&self) -> u64 {
        self.modes.iter().map(ModeMetrics::staging_bytes).sum()
    }

    pub fn allgather_bytes(&self) -> u64 {
        self.modes.iter().map(|m| m.allgather_bytes).sum()
    }

    pub fn allgather_time(&self) -> Duration {
        self.modes.iter().map(|m| m.allgather_time).sum()
    }

    pub fn preprocessing_time(&self) -> Duration {
        self.modes.iter().map(|m| m.preprocessing_time).sum()
    }

    /// Flattens the metrics into records, per mode first, then totals.
    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for m in &self.modes {
            let mode = Some(m.mode);
            out.push(MetricRecord::seconds("preprocessing_time", mode, None, m.preprocessing_time));
            for d in &m.devices {
                let dev = Some(d.device);
                out.push(MetricRecord::seconds("compute_time", mode, dev, d.compute_time));
                out.push(MetricRecord::seconds("staging_time", mode, dev, d.staging_time));
                out.push(MetricRecord::new("staging_bytes", mode, dev, d.staging_bytes as f64, Unit::Bytes));
                out.push(MetricRecord::new("shards", mode, dev, d.shards as f64, Unit::Count));
                out.push(MetricRecord::new("nnz", mode, dev, d.nnz as f64, Unit::Count));
            }
            out.push(MetricRecord::seconds("compute_span", mode, None, m.compute_span));
            out.push(MetricRecord::seconds("allgather_time", mode, None, m.allgather_time));
            out.push(MetricRecord::new("allgather_bytes", mode, None, m.allgather_bytes as f64, Unit::Bytes));
            out.push(MetricRecord::new("barriers", mode, None, m.barriers as f64, Unit::Count));
            out.push(MetricRecord::seconds("mode_wall_time", mode, None, m.wall_time));
        }
        for (device, t) in self.device_compute_times().into_iter().enumerate() {
            out.push(MetricRecord::seconds("compute_time", None, Some(device), t));
        }
        out.push(MetricRecord::seconds("compute_span", None, None, self.compute_span()));
        out.push(MetricRecord::new("imbalance", None, None, self.imbalance_pct(), Unit::Percent));
        out.push(MetricRecord::seconds("wall_time", None, None, self.wall_time));
        out
    }
}

/// `(max - min) / sum * 100`; zero when nothing ran.
pub fn imbalance_pct(times: &[Duration]) -> f64 {
    let total: f64 = times.iter().map(Duration::as_secs_f64).sum();
    if times.is_empty() || total <= 0.0 {
        return 0.0;
    }
    let max = times.iter().max().copied().unwrap_or_default().as_secs_f64();
    let min = times.iter().min().copied().unwrap_or_default().as_secs_f64();
    (max - min) / total * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Seconds,
    Bytes,
    Count,
    Percent,
    Ratio,
}

/// One line of metrics output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub metric: String,
    pub mode: Option<usize>,
    pub device: Option<usize>,
    pub value: f64,
    pub unit: Unit,
}

impl MetricRecord {
    pub fn new(metric: &str, mode: Option<usize>, device: Option<usize>, value: f64, unit: Unit) -> Self {
        Self {
            metric: metric.to_owned(),
            mode,
            device,
            value,
            unit,
        }
    }

    pub fn seconds(metric: &str, mode: Option<usize>, device: Option<usize>, t: Duration) -> Self {
        Self::new(metric, mode, device, t.as_secs_f64(), Unit::Seconds)
    }
}
