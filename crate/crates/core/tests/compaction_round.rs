//! Major compaction rounds end to end: the seven phases over a leader,
//! worker, and warming replicas; the checksum-mismatch retry path under
//! cache corruption; offloaded compaction equivalence; and crash
//! re-dispatch idempotence.

mod common;

use std::rc::Rc;

use common::{add_replica, engine_fixture, fast_engine_config, EngineFixture, NODE, STREAM, TABLET};
use shoal::compaction::{
    offload_compaction, CompactionCoordinator, TaskState, WorkerPool,
};
use shoal::engine::Engine;
use shoal::trace::Trace;
use shoal::types::{NodeId, Row, Scn, SsTableKind};

fn populated_fixture(rows: u64) -> EngineFixture {
    let f = engine_fixture(fast_engine_config());
    for i in 1..=rows {
        let key = format!("key{:04}", i % 97);
        f.engine.write_row(TABLET, Row::put(key.into_bytes(), vec![b'v'; 32], Scn(i))).unwrap();
        if i % 40 == 0 {
            f.engine.mini_compact(TABLET).unwrap();
            f.engine.flush_dumps(TABLET).unwrap();
        }
    }
    f.engine.flush_dumps(TABLET).unwrap();
    f.engine.upload_increments(TABLET).unwrap();
    f
}

fn coordinator(f: &EngineFixture) -> CompactionCoordinator {
    CompactionCoordinator::new(f.clock.clone(), Rc::new(Trace::disabled()), f.meta.clone())
}

#[test]
fn seven_phase_round_preserves_read_state() {
    let f = populated_fixture(300);
    let replica = add_replica(&f, NodeId(2), fast_engine_config());
    replica.poll_meta().unwrap();
    let merge_scn = Scn(300);
    let before = f.engine.read_state_checksum(TABLET, merge_scn).unwrap();

    let coord = coordinator(&f);
    let report = coord
        .run_round(&f.engine, &f.engine, &[replica.clone()], &[TABLET], merge_scn, &[])
        .unwrap();
    assert!(report.verified);
    assert_eq!(report.retries, 0);

    let after = f.engine.read_state_checksum(TABLET, merge_scn).unwrap();
    assert_eq!(before, after, "read state at the merge snapshot must not change");

    let major = f.engine.major_handle(TABLET).expect("baseline exists");
    assert_eq!(major.table.kind, SsTableKind::Major);
    assert_eq!(major.table.start_scn(), Scn(0), "baseline covers full history");
    assert_eq!(major.table.checksum, coord.task(TABLET, merge_scn).unwrap().checksum);
    assert_eq!(coord.task(TABLET, merge_scn).unwrap().state, TaskState::Verified);
    assert!(
        f.engine.shared_increment_keys(TABLET).is_empty(),
        "increments consumed at the snapshot"
    );
    // The replica switched too and reads identically.
    let replica_after = replica.read_state_checksum(TABLET, merge_scn).unwrap();
    assert_eq!(replica_after, after);
}

#[test]
fn no_increment_round_is_identity() {
    let f = populated_fixture(100);
    let merge_scn = Scn(100);
    let coord = coordinator(&f);
    coord.run_round(&f.engine, &f.engine, &[], &[TABLET], merge_scn, &[]).unwrap();
    let first = f.engine.major_handle(TABLET).unwrap();

    // Second round at a later snapshot with nothing new: metadata bump
    // only, checksum unchanged.
    let merge_scn2 = Scn(120);
    coord.run_round(&f.engine, &f.engine, &[], &[TABLET], merge_scn2, &[]).unwrap();
    let second = f.engine.major_handle(TABLET).unwrap();
    assert_eq!(first.table.checksum, second.table.checksum);
    let ids_first: Vec<_> = first.table.blocks.iter().map(|b| b.id).collect();
    let ids_second: Vec<_> = second.table.blocks.iter().map(|b| b.id).collect();
    assert_eq!(ids_first, ids_second, "identity merge reuses every block");
}

#[test]
fn corrupted_replica_cache_triggers_retry_then_verifies() {
    let f = populated_fixture(200);
    let replica = add_replica(&f, NodeId(2), fast_engine_config());
    replica.poll_meta().unwrap();
    let merge_scn = Scn(200);
    let coord = coordinator(&f);

    // Phases 1-4 normally.
    coord.rs_initiate(&[TABLET], merge_scn).unwrap();
    coord.leader_schedule(&f.engine, merge_scn).unwrap();
    coord.worker_execute(&f.engine, merge_scn).unwrap();

    // The replica warms the new baseline, then its cached copy rots
    // before it reports (phase 5): decode fails or rows differ, so the
    // reported checksum cannot match.
    replica.poll_meta().unwrap();
    let major = replica.major_handle(TABLET).expect("replica sees new baseline");
    for block in &major.table.blocks {
        let key = shoal::engine::block_object_key(TABLET, block.id);
        replica.cache().prefetch_macro(block.id, &key, 0);
    }
    let corrupted = replica.cache().corrupt_local_macro(major.table.blocks[0].id);
    assert!(corrupted, "block must be resident to corrupt");
    coord.replica_warm_and_report(&replica, TABLET, merge_scn).unwrap();

    // Phase 6: mismatch -> retry (re-warm from shared storage) -> verified.
    let report = coord.rs_verify(&[replica.clone()], &[TABLET], merge_scn, &[]).unwrap();
    assert!(report.verified);
    assert!(
        (1..=3).contains(&report.retries),
        "expected convergence within 3 retries, took {}",
        report.retries
    );
    assert_eq!(coord.task(TABLET, merge_scn).unwrap().state, TaskState::Verified);
}

#[test]
fn primary_index_pair_verification() {
    // Two tablets maintained in lockstep stand in for a primary table and
    // its index.
    let f = engine_fixture(fast_engine_config());
    let index_tablet = shoal::types::TabletId(2);
    f.engine.create_tablet(index_tablet, STREAM);
    for i in 1..=100u64 {
        let key = format!("key{:03}", i % 31).into_bytes();
        f.engine.write_row(TABLET, Row::put(key.clone(), vec![b'v'; 16], Scn(i))).unwrap();
        f.engine.write_row(index_tablet, Row::put(key, vec![b'v'; 16], Scn(i))).unwrap();
    }
    for t in [TABLET, index_tablet] {
        f.engine.mini_compact(t).unwrap();
        f.engine.flush_dumps(t).unwrap();
        f.engine.upload_increments(t).unwrap();
    }
    let coord = coordinator(&f);
    let report = coord
        .run_round(
            &f.engine,
            &f.engine,
            &[],
            &[TABLET, index_tablet],
            Scn(100),
            &[(TABLET, index_tablet)],
        )
        .unwrap();
    assert!(report.verified, "primary and index checksums agree");
}

#[test]
fn offloaded_compaction_equals_in_place() {
    // Same writes on two separate deployments: one merges in place, the
    // other offloads to an idle worker. Logical checksums must agree.
    let build = |seed_rows: u64| populated_fixture(seed_rows);

    let in_place = build(250);
    in_place.engine.merge_to_major(TABLET, Scn(250)).unwrap();
    let in_place_major = in_place.engine.major_handle(TABLET).unwrap();

    let offloaded = build(250);
    let worker: Rc<Engine> = add_replica(&offloaded, NodeId(300), fast_engine_config());
    let pool = WorkerPool::new();
    pool.add(worker);
    let coord = coordinator(&offloaded);
    let all_nodes = vec![offloaded.engine.clone()];
    let handle = offload_compaction(
        &coord,
        &offloaded.log,
        &offloaded.meta,
        &pool,
        TABLET,
        STREAM,
        shoal::types::LogStreamId(90),
        Scn(250),
        Some(NODE),
        &all_nodes,
    )
    .unwrap();

    assert_eq!(handle.table.checksum, in_place_major.table.checksum);
    assert_eq!(
        pool.idle_nodes(),
        vec![NodeId(300)],
        "worker returned to the pool after verification"
    );
    assert!(
        offloaded.meta.sswriter_holder(STREAM).is_none(),
        "worker released the sswriter lease"
    );
    // The RW node's cache was preloaded with the new baseline.
    let preloaded = all_nodes[0].cache().local_resident_macros();
    for block in &handle.table.blocks {
        assert!(preloaded.contains(&block.id), "block {} not preloaded", block.id);
    }
}

#[test]
fn worker_crash_redispatch_yields_single_final_version() {
    let f = populated_fixture(150);
    let merge_scn = Scn(150);

    // First worker crashes after phase 3: output objects written, no
    // metadata published.
    let (output_a, _inputs) = f.engine.merge_to_major_unpublished(TABLET, merge_scn).unwrap();
    let version_before = f
        .meta
        .with_view(|v| v.meta_file(shoal::meta::MetaLevel::Tablet, TABLET.0).map(|m| m.version))
        .unwrap_or(0);

    // Lease expires; the task re-dispatches (same tablet, same merge_scn)
    // and the redo overwrites identical objects before one publish.
    let (output_b, obsolete) = f.engine.merge_to_major(TABLET, merge_scn).unwrap();
    assert_eq!(output_a.table, output_b.table, "redo produced identical output");
    assert!(!obsolete.contains(&output_b.object_key));

    let version_after = f
        .meta
        .with_view(|v| v.meta_file(shoal::meta::MetaLevel::Tablet, TABLET.0).map(|m| m.version))
        .unwrap();
    assert_eq!(version_after, version_before + 1, "single final metadata version");
}
