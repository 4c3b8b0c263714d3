//! Benchmark orchestration: drives a simulated cluster with a generated
//! workload, samples cache counters per time bucket, detects write-stall
//! windows, and assembles the metrics report.

use crate::cache::OutcomeCounts;
use crate::metrics::{MetricsBucket, MetricsReport};
use crate::sim::{Cluster, OpOutcome, SimConfig, SimError};
use crate::store::ObjectStore as _;
use crate::workload::{gen_workload, OpKind, WorkloadSpec};

pub const BUCKET_MS: u64 = 100;

#[derive(Debug)]
pub struct BenchOutput {
    pub report: MetricsReport,
    pub trace: String,
    pub state_digest: String,
}

fn cluster_outcomes(cluster: &Cluster) -> OutcomeCounts {
    let mut total = OutcomeCounts::default();
    for node in cluster.nodes.values() {
        let o = node.cache().outcomes();
        total.memory += o.memory;
        total.local += o.local;
        total.distributed += o.distributed;
        total.object_store += o.object_store;
    }
    total
}

/// Runs a workload against a fresh cluster built from `config` and
/// returns the bucketed report. The same config and workload always
/// produce the identical report and trace.
pub fn run_bench(config: SimConfig, workload: &WorkloadSpec) -> Result<BenchOutput, SimError> {
    let seed = config.seed;
    let cluster = Cluster::build(config);
    let ops = gen_workload(workload, seed);
    let end_ms = ops.last().map(|op| op.at_ms).unwrap_or(0) + 2 * BUCKET_MS;
    cluster.set_horizon(end_ms + 5_000);
    cluster.inject_workload(&ops);

    // Advance bucket by bucket, sampling cumulative counters at each edge.
    let n_buckets = end_ms.div_ceil(BUCKET_MS);
    let mut samples = Vec::with_capacity(n_buckets as usize + 1);
    samples.push(cluster_outcomes(&cluster));
    for b in 0..n_buckets {
        cluster.run_until_time((b + 1) * BUCKET_MS)?;
        samples.push(cluster_outcomes(&cluster));
    }
    // Drain stragglers (retries, background completion) for final counts.
    cluster.run_to_quiescence()?;

    let op_log = cluster.op_log();
    let mut buckets = Vec::with_capacity(n_buckets as usize);
    for b in 0..n_buckets as usize {
        let lo = b as u64 * BUCKET_MS;
        let hi = lo + BUCKET_MS;
        let mut ops_done = 0u64;
        let mut writes_done = 0u64;
        let mut rejects = 0u64;
        for (t, outcome) in &op_log {
            if *t < lo || *t >= hi {
                continue;
            }
            match outcome {
                OpOutcome::WriteDone => {
                    ops_done += 1;
                    writes_done += 1;
                }
                OpOutcome::ReadDone => ops_done += 1,
                OpOutcome::WriteRejected => rejects += 1,
            }
        }
        let delta = OutcomeCounts {
            memory: samples[b + 1].memory - samples[b].memory,
            local: samples[b + 1].local - samples[b].local,
            distributed: samples[b + 1].distributed - samples[b].distributed,
            object_store: samples[b + 1].object_store - samples[b].object_store,
        };
        let total = delta.total() as f64;
        let ratio = |n: u64| if total > 0.0 { n as f64 / total } else { 0.0 };
        let stalled = (writes_done == 0 && rejects > 0) as u64;
        buckets.push(MetricsBucket {
            time_ms: lo,
            ops: ops_done,
            hit_mem: ratio(delta.memory),
            hit_local: ratio(delta.local),
            hit_dist: ratio(delta.distributed),
            hit_overall: ratio(delta.memory + delta.local + delta.distributed),
            stalls: stalled,
        });
    }

    // Merge consecutive stalled buckets into disjoint windows.
    let mut stall_windows = Vec::new();
    let mut open: Option<(u64, u64)> = None;
    for b in &buckets {
        if b.stalls > 0 {
            open = match open {
                Some((start, _)) => Some((start, b.time_ms + BUCKET_MS)),
                None => Some((b.time_ms, b.time_ms + BUCKET_MS)),
            };
        } else if let Some(window) = open.take() {
            stall_windows.push(window);
        }
    }
    if let Some(window) = open {
        stall_windows.push(window);
    }

    let store_stats = cluster.store.stats();
    let mut compactions = std::collections::BTreeMap::new();
    for event in cluster.trace.events() {
        let key = match event.kind.as_str() {
            "dump_complete" => {
                if event.detail.contains("kind=micro") {
                    "micro"
                } else {
                    "mini"
                }
            }
            "compaction_publish" => {
                if event.detail.contains("kind=minor") {
                    "minor"
                } else {
                    "major"
                }
            }
            _ => continue,
        };
        *compactions.entry(key.to_string()).or_insert(0) += 1;
    }

    let report = MetricsReport {
        bucket_ms: BUCKET_MS,
        buckets,
        stall_windows,
        bytes_to_store: store_stats.bytes_written,
        bytes_from_store: store_stats.bytes_read,
        compactions,
    };
    let trace = cluster.trace.export();
    let state_digest = cluster.state_digest();
    Ok(BenchOutput { report, trace, state_digest })
}

/// The fraction of read-path requests that landed in any cache tier,
/// cumulatively over a run of `ops` against `cluster`. Used by warm
/// working-set checks.
pub fn combined_cache_hit_ratio(before: OutcomeCounts, after: OutcomeCounts) -> f64 {
    let total = after.total() - before.total();
    if total == 0 {
        return 1.0;
    }
    let missed = after.object_store - before.object_store;
    1.0 - missed as f64 / total as f64
}

/// Line-by-line comparison of two exported artifacts (reports or traces).
pub fn diff_lines(a: &str, b: &str) -> Vec<String> {
    let mut diffs = Vec::new();
    let mut left = a.lines();
    let mut right = b.lines();
    let mut line = 0usize;
    loop {
        line += 1;
        match (left.next(), right.next()) {
            (None, None) => break,
            (l, r) if l == r => {}
            (l, r) => diffs.push(format!(
                "line {line}: {} != {}",
                l.unwrap_or("<eof>"),
                r.unwrap_or("<eof>")
            )),
        }
        if diffs.len() >= 20 {
            diffs.push("... (truncated)".to_string());
            break;
        }
    }
    diffs
}

/// True when a bench output is byte-identical to another: the determinism
/// bar for repeated runs of the same configuration.
pub fn outputs_identical(a: &BenchOutput, b: &BenchOutput) -> bool {
    a.report == b.report && a.trace == b.trace && a.state_digest == b.state_digest
}

pub fn workload_for_tests(op_count: u64, put_fraction: f64) -> WorkloadSpec {
    WorkloadSpec { op_count, put_fraction, ..WorkloadSpec::default() }
}

/// A write-only workload paced to keep the dump pipeline busy.
pub fn saturating_write_spec(op_count: u64, ops_per_second: u64, value_len: u32) -> WorkloadSpec {
    WorkloadSpec {
        put_fraction: 1.0,
        op_count,
        ops_per_second,
        value_len,
        key_space: 10_000,
        ..WorkloadSpec::default()
    }
}

pub fn op_kind_is_put(kind: OpKind) -> bool {
    matches!(kind, OpKind::Put { .. })
}
