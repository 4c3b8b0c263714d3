//! Deterministic workload generation: seeded op streams with uniform or
//! zipfian key popularity, a put/get mix, and client arrival pacing.

use crate::clock::SimRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Uniform,
    Zipfian { theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Put { key: u64, value_len: u32 },
    Get { key: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkloadOp {
    pub at_ms: u64,
    pub kind: OpKind,
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub distribution: Distribution,
    /// Fraction of puts; the remainder are gets. Must be within [0, 1].
    pub put_fraction: f64,
    pub key_space: u64,
    pub op_count: u64,
    /// Simulated client arrival rate.
    pub ops_per_second: u64,
    /// Concurrent simulated clients (informational; arrivals are paced).
    pub concurrency: u32,
    pub value_len: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            distribution: Distribution::Uniform,
            put_fraction: 0.5,
            key_space: 1000,
            op_count: 10_000,
            ops_per_second: 1_000,
            concurrency: 4,
            value_len: 64,
        }
    }
}

/// Inverse-CDF sampler over ranked key popularity.
struct KeySampler {
    cdf: Vec<f64>,
}

impl KeySampler {
    fn new(spec: &WorkloadSpec) -> KeySampler {
        let n = spec.key_space.max(1) as usize;
        let mut weights = Vec::with_capacity(n);
        match spec.distribution {
            Distribution::Uniform => weights.resize(n, 1.0),
            Distribution::Zipfian { theta } => {
                for rank in 1..=n {
                    weights.push(1.0 / (rank as f64).powf(theta));
                }
            }
        }
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        KeySampler { cdf }
    }

    fn sample(&self, rng: &mut SimRng) -> u64 {
        let u = rng.unit();
        self.cdf.partition_point(|&c| c < u) as u64
    }
}

/// Same spec and seed always produce the identical op stream.
pub fn gen_workload(spec: &WorkloadSpec, seed: u64) -> Vec<WorkloadOp> {
    assert!((0.0..=1.0).contains(&spec.put_fraction), "op mix fractions must sum to 1");
    let mut rng = SimRng::new(seed);
    let sampler = KeySampler::new(spec);
    let mut ops = Vec::with_capacity(spec.op_count as usize);
    let rate = spec.ops_per_second.max(1);
    for i in 0..spec.op_count {
        let at_ms = i * 1000 / rate;
        let key = sampler.sample(&mut rng);
        let kind = if rng.chance(spec.put_fraction) {
            OpKind::Put { key, value_len: spec.value_len }
        } else {
            OpKind::Get { key }
        };
        ops.push(WorkloadOp { at_ms, kind });
    }
    ops
}

pub fn key_bytes(key: u64) -> Vec<u8> {
    format!("key{key:010}").into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let spec = WorkloadSpec::default();
        assert_eq!(gen_workload(&spec, 7), gen_workload(&spec, 7));
        assert_ne!(gen_workload(&spec, 7), gen_workload(&spec, 8));
    }

    #[test]
    fn uniform_frequencies_balanced() {
        let spec = WorkloadSpec { key_space: 10, op_count: 10_000, ..WorkloadSpec::default() };
        let ops = gen_workload(&spec, 42);
        let mut counts = [0u64; 10];
        for op in &ops {
            let key = match op.kind {
                OpKind::Put { key, .. } | OpKind::Get { key } => key,
            };
            counts[key as usize] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.1).abs() <= 0.02, "frequency {freq} outside 0.1 +/- 0.02");
        }
    }

    #[test]
    fn zipfian_head_beats_tail() {
        let spec = WorkloadSpec {
            distribution: Distribution::Zipfian { theta: 0.99 },
            key_space: 100,
            op_count: 20_000,
            ..WorkloadSpec::default()
        };
        let ops = gen_workload(&spec, 42);
        let mut counts = vec![0u64; 100];
        for op in &ops {
            let key = match op.kind {
                OpKind::Put { key, .. } | OpKind::Get { key } => key,
            };
            counts[key as usize] += 1;
        }
        assert!(
            counts[0] > counts[9] && counts[9] > 0,
            "rank-1 ({}) must beat rank-10 ({})",
            counts[0],
            counts[9]
        );
    }

    #[test]
    fn pure_get_mix_has_no_puts() {
        let spec = WorkloadSpec { put_fraction: 0.0, op_count: 500, ..WorkloadSpec::default() };
        let ops = gen_workload(&spec, 1);
        assert!(ops.iter().all(|op| matches!(op.kind, OpKind::Get { .. })));
    }

    #[test]
    fn arrivals_follow_the_rate() {
        let spec = WorkloadSpec { op_count: 100, ops_per_second: 50, ..WorkloadSpec::default() };
        let ops = gen_workload(&spec, 1);
        assert_eq!(ops.first().unwrap().at_ms, 0);
        assert_eq!(ops.last().unwrap().at_ms, 99 * 1000 / 50);
    }
}
