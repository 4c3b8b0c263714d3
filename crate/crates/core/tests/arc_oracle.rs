//! ARC oracle equivalence: the production cache must produce the exact
//! hit/miss sequence of the independently written reference transcription,
//! with all structural invariants holding after every step, across random
//! traces, capacities, and resizes.

mod common;

use common::ReferenceArc;
use shoal::cache::arc::ArcCache;
use shoal::clock::SimRng;

fn run_equivalence(seed: u64, capacity: usize, accesses: usize, key_space: u64) {
    let mut arc = ArcCache::new(capacity);
    let mut reference = ReferenceArc::new(capacity);
    let mut rng = SimRng::new(seed);
    for step in 0..accesses {
        let key = rng.below(key_space);
        let got = arc.access(key).is_hit();
        let want = reference.access(key);
        assert_eq!(
            got, want,
            "seed {seed} capacity {capacity} step {step} key {key}: hit/miss diverged"
        );
        arc.check_invariants().unwrap_or_else(|e| {
            panic!("seed {seed} capacity {capacity} step {step}: {e}");
        });
        assert_eq!(arc.target(), reference.p, "adaptation target diverged at step {step}");
    }
}

#[test]
fn oracle_equivalence_small_capacities() {
    for capacity in [1usize, 2, 3, 4] {
        for seed in 0..10 {
            run_equivalence(seed, capacity, 2_000, capacity as u64 * 3);
        }
    }
}

#[test]
fn oracle_equivalence_with_skewed_traces() {
    // Zipf-ish reuse: small key spaces produce heavy ghost traffic.
    for (capacity, key_space) in [(8usize, 12u64), (16, 20), (64, 100), (64, 40)] {
        for seed in 0..5 {
            run_equivalence(seed + 100, capacity, 5_000, key_space);
        }
    }
}

#[test]
fn oracle_equivalence_across_resizes() {
    let mut arc = ArcCache::new(8);
    let mut reference = ReferenceArc::new(8);
    let mut rng = SimRng::new(5);
    let sizes = [8usize, 4, 6, 12, 3, 8];
    for (round, &size) in sizes.iter().enumerate() {
        arc.resize(size);
        reference.resize(size);
        arc.check_invariants().unwrap();
        for step in 0..2_000 {
            let key = rng.below(24);
            let got = arc.access(key).is_hit();
            let want = reference.access(key);
            assert_eq!(got, want, "round {round} step {step} diverged after resize to {size}");
            arc.check_invariants()
                .unwrap_or_else(|e| panic!("round {round} step {step}: {e}"));
        }
    }
}

#[test]
fn resize_up_never_hurts_the_same_suffix() {
    // Replaying the identical access suffix after growing the cache must
    // achieve at least the hit ratio of the smaller cache.
    let mut rng = SimRng::new(9);
    let prefix: Vec<u64> = (0..2_000).map(|_| rng.below(32)).collect();
    let suffix: Vec<u64> = (0..2_000).map(|_| rng.below(32)).collect();

    let run = |resize_to: Option<usize>| -> usize {
        let mut arc = ArcCache::new(4);
        for &k in &prefix {
            arc.access(k);
        }
        if let Some(c) = resize_to {
            arc.resize(c);
        }
        suffix.iter().filter(|&&k| arc.access(k).is_hit()).count()
    };
    let small = run(None);
    let grown = run(Some(8));
    assert!(
        grown >= small,
        "hit count after growing ({grown}) fell below the small cache ({small})"
    );
}
