//! Benchmark metrics: bucketed throughput, per-tier cache hit ratios over
//! time, write-stall windows, object-store traffic, and compaction
//! counts. Emitted as CSV with a stable column set.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("bad csv header: {0}")]
    BadHeader(String),
    #[error("bad csv row {line}: {reason}")]
    BadRow { line: usize, reason: String },
}

/// One timeline bucket. Hit ratios are fractions of read-path block
/// requests served by each tier within the bucket.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsBucket {
    pub time_ms: u64,
    pub ops: u64,
    pub hit_mem: f64,
    pub hit_local: f64,
    pub hit_dist: f64,
    pub hit_overall: f64,
    pub stalls: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub bucket_ms: u64,
    pub buckets: Vec<MetricsBucket>,
    /// Disjoint [start, end) spans of buckets with queued writes and zero
    /// accepted writes.
    pub stall_windows: Vec<(u64, u64)>,
    pub bytes_to_store: u64,
    pub bytes_from_store: u64,
    pub compactions: BTreeMap<String, u64>,
}

impl MetricsReport {
    pub fn stall_window_count(&self) -> usize {
        self.stall_windows.len()
    }

    pub fn total_ops(&self) -> u64 {
        self.buckets.iter().map(|b| b.ops).sum()
    }

    /// Columns are stable: time_ms, ops, hit_mem, hit_local, hit_dist,
    /// hit_overall, stalls.
    pub const CSV_HEADER: &'static str =
        "time_ms,ops,hit_mem,hit_local,hit_dist,hit_overall,stalls";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for b in &self.buckets {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                b.time_ms, b.ops, b.hit_mem, b.hit_local, b.hit_dist, b.hit_overall, b.stalls
            ));
        }
        out
    }

    /// Parses `to_csv` output back into the bucket timeline. Stall
    /// windows and traffic counters live outside the CSV; only the
    /// timeline round-trips.
    pub fn from_csv(text: &str) -> Result<MetricsReport, MetricsError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != Self::CSV_HEADER {
            return Err(MetricsError::BadHeader(header.to_string()));
        }
        let mut buckets = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 7 {
                return Err(MetricsError::BadRow {
                    line: i + 2,
                    reason: format!("expected 7 columns, got {}", parts.len()),
                });
            }
            let field = |idx: usize| -> Result<f64, MetricsError> {
                parts[idx].parse().map_err(|_| MetricsError::BadRow {
                    line: i + 2,
                    reason: format!("bad number {:?}", parts[idx]),
                })
            };
            buckets.push(MetricsBucket {
                time_ms: field(0)? as u64,
                ops: field(1)? as u64,
                hit_mem: field(2)?,
                hit_local: field(3)?,
                hit_dist: field(4)?,
                hit_overall: field(5)?,
                stalls: field(6)? as u64,
            });
        }
        let bucket_ms = match buckets.as_slice() {
            [a, b, ..] => b.time_ms - a.time_ms,
            _ => 0,
        };
        Ok(MetricsReport { bucket_ms, buckets, ..MetricsReport::default() })
    }

    /// Human-readable table for the CLI.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>10} {:>8} {:>8} {:>9} {:>8} {:>11} {:>7}\n",
            "time_ms", "ops", "hit_mem", "hit_local", "hit_dist", "hit_overall", "stalls"
        ));
        for b in &self.buckets {
            out.push_str(&format!(
                "{:>10} {:>8} {:>8.3} {:>9.3} {:>8.3} {:>11.3} {:>7}\n",
                b.time_ms, b.ops, b.hit_mem, b.hit_local, b.hit_dist, b.hit_overall, b.stalls
            ));
        }
        out.push_str(&format!(
            "stall_windows={} bytes_to_store={} bytes_from_store={}\n",
            self.stall_windows.len(),
            self.bytes_to_store,
            self.bytes_from_store
        ));
        for (kind, count) in &self.compactions {
            out.push_str(&format!("compactions[{kind}]={count}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        MetricsReport {
            bucket_ms: 100,
            buckets: vec![
                MetricsBucket {
                    time_ms: 0,
                    ops: 42,
                    hit_mem: 0.5,
                    hit_local: 0.25,
                    hit_dist: 0.125,
                    hit_overall: 0.875,
                    stalls: 0,
                },
                MetricsBucket {
                    time_ms: 100,
                    ops: 17,
                    hit_mem: 0.9,
                    hit_local: 0.05,
                    hit_dist: 0.0,
                    hit_overall: 0.95,
                    stalls: 1,
                },
                MetricsBucket { time_ms: 200, ops: 0, ..MetricsBucket::default() },
            ],
            stall_windows: vec![(100, 200)],
            bytes_to_store: 1024,
            bytes_from_store: 2048,
            compactions: [("mini".to_string(), 3)].into_iter().collect(),
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = MetricsReport::default();
        assert_eq!(r.to_csv(), format!("{}\n", MetricsReport::CSV_HEADER));
    }

    #[test]
    fn csv_row_per_bucket() {
        let csv = sample().to_csv();
        assert_eq!(csv.lines().count(), 4, "header + 3 buckets");
    }

    #[test]
    fn csv_round_trips_the_timeline() {
        let report = sample();
        let parsed = MetricsReport::from_csv(&report.to_csv()).unwrap();
        assert_eq!(parsed.buckets, report.buckets);
        assert_eq!(parsed.bucket_ms, report.bucket_ms);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(matches!(
            MetricsReport::from_csv("nope\n1,2,3"),
            Err(MetricsError::BadHeader(_))
        ));
    }
}
