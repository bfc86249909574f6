//! Line-delimited JSON metric records.

use serde::Serialize;
use shardkrp::metrics::MetricRecord;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

/// One output line. Every field is always present; absent context is `null`.
#[derive(Debug, Serialize)]
pub struct Record<'a> {
    pub command: &'a str,
    /// Device count of the run the metric came from.
    pub devices: Option<usize>,
    pub iteration: Option<usize>,
    #[serde(flatten)]
    pub metric: MetricRecord,
}

pub struct Sink {
    out: Box<dyn Write>,
    command: &'static str,
}

impl Sink {
    pub fn open(command: &'static str, path: Option<&Path>) -> io::Result<Self> {
        let out: Box<dyn Write> = match path {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout())),
        };
        Ok(Self { out, command })
    }

    pub fn emit(&mut self, devices: Option<usize>, iteration: Option<usize>, metric: MetricRecord) -> io::Result<()> {
        let rec = Record {
            command: self.command,
            devices,
            iteration,
            metric,
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")
    }

    pub fn emit_all(
        &mut self,
        devices: Option<usize>,
        iteration: Option<usize>,
        metrics: impl IntoIterator<Item = MetricRecord>,
    ) -> io::Result<()> {
        for m in metrics {
            self.emit(devices, iteration, m)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// `4_800_000 -> "4.8M"`, `177_000 -> "177K"`, `46 -> "46"`.
pub fn human_count(n: u64) -> String {
    const UNITS: [(f64, &str); 3] = [(1e9, "B"), (1e6, "M"), (1e3, "K")];
    for (scale, suffix) in UNITS {
        if n as f64 >= scale {
            let v = format!("{:.1}", n as f64 / scale);
            let v = v.strip_suffix(".0").unwrap_or(&v);
            return format!("{v}{suffix}");
        }
    }
    n.to_string()
}

pub fn human_shape(shape: &[u64]) -> String {
    shape.iter().map(|&n| human_count(n)).collect::<Vec<_>>().join(" × ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use shardkrp::metrics::Unit;

    #[test]
    fn table_shapes() {
        assert_eq!(human_shape(&[4_800_000, 1_800_000, 1_800_000]), "4.8M × 1.8M × 1.8M");
        assert_eq!(
            human_shape(&[15_500_000, 6_200_000, 783_900, 6_100, 6_100]),
            "15.5M × 6.2M × 783.9K × 6.1K × 6.1K"
        );
        assert_eq!(human_shape(&[46, 239_200, 239_200]), "46 × 239.2K × 239.2K");
        assert_eq!(human_count(177_000), "177K");
        assert_eq!(human_count(1_700_000_000), "1.7B");
        assert_eq!(human_count(999), "999");
    }

    #[test]
    fn record_layout() {
        let rec = Record {
            command: "mttkrp",
            devices: Some(4),
            iteration: None,
            metric: MetricRecord::new("nnz", Some(1), None, 12.0, Unit::Count),
        };
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            r#"{"command":"mttkrp","devices":4,"iteration":null,"metric":"nnz","mode":1,"device":null,"value":12.0,"unit":"count"}"#
        );
    }
}
