//! Checksum and block-codec verification against independent references,
//! plus the structural property tests for the block formats.

mod common;

use common::reference_crc32;
use proptest::prelude::*;
use shoal::types::{
    crc32, decode_macro_block, encode_macro_block, logical_checksum, sort_rows, Crc32,
    MacroBlockId, MicroBlock, Row, Scn,
};

#[test]
fn crc32_matches_bitwise_reference_on_known_vectors() {
    // The check value everyone quotes for this polynomial.
    assert_eq!(reference_crc32(b"123456789"), 0xCBF4_3926);
    assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    for input in [
        b"".as_slice(),
        b"a",
        b"abc",
        b"message digest",
        b"the quick brown fox jumps over the lazy dog",
        &[0xFFu8; 32],
        &[0x00u8; 32],
    ] {
        assert_eq!(crc32(input), reference_crc32(input), "input {input:?}");
    }
}

#[test]
fn logical_checksum_matches_canonical_serialization_oracle() {
    // Independently serialize rows: length-prefixed key, length-prefixed
    // value, 8-byte big-endian scn, tombstone flag, rows in canonical
    // order; then CRC the whole thing.
    let rows = vec![
        Row::put(b"k1".to_vec(), b"v1".to_vec(), Scn(3)),
        Row::put(b"k2".to_vec(), b"v2".to_vec(), Scn(4)),
    ];
    let mut oracle_bytes = Vec::new();
    for row in &rows {
        oracle_bytes.extend_from_slice(&(row.key.len() as u32).to_be_bytes());
        oracle_bytes.extend_from_slice(&row.key);
        oracle_bytes.extend_from_slice(&(row.value.len() as u32).to_be_bytes());
        oracle_bytes.extend_from_slice(&row.value);
        oracle_bytes.extend_from_slice(&row.commit_scn.0.to_be_bytes());
        oracle_bytes.push(row.tombstone as u8);
    }
    assert_eq!(logical_checksum(&rows), reference_crc32(&oracle_bytes));
}

proptest! {
    #[test]
    fn crc32_matches_reference(data in proptest::collection::vec(any::<u8>(), 0..512)) {
        prop_assert_eq!(crc32(&data), reference_crc32(&data));
    }

    #[test]
    fn crc32_incremental_update_law(
        a in proptest::collection::vec(any::<u8>(), 0..256),
        b in proptest::collection::vec(any::<u8>(), 0..256),
    ) {
        let mut streaming = Crc32::new();
        streaming.update(&a);
        streaming.update(&b);
        let mut joined = a.clone();
        joined.extend_from_slice(&b);
        prop_assert_eq!(streaming.finish(), crc32(&joined));
    }
}

fn arb_rows() -> impl Strategy<Value = Vec<Row>> {
    proptest::collection::btree_map(
        proptest::collection::vec(any::<u8>(), 1..8),
        proptest::collection::btree_set(1u64..100, 1..4),
        1..20,
    )
    .prop_map(|keys| {
        let mut rows = Vec::new();
        for (key, scns) in keys {
            for scn in scns {
                let tombstone = scn % 7 == 0;
                rows.push(Row {
                    key: key.clone(),
                    value: if tombstone { Vec::new() } else { vec![scn as u8; 4] },
                    commit_scn: Scn(scn),
                    tombstone,
                });
            }
        }
        sort_rows(&mut rows);
        rows
    })
}

/// Packs rows into micro-blocks with `per_block` rows each, never
/// splitting one key's versions across blocks.
fn pack(rows: &[Row], per_block: usize) -> Vec<MicroBlock> {
    let mut blocks = Vec::new();
    let mut current: Vec<Row> = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let boundary = i > 0 && rows[i - 1].key != row.key;
        if boundary && current.len() >= per_block {
            blocks.push(MicroBlock::from_rows(std::mem::take(&mut current)).unwrap());
        }
        current.push(row.clone());
    }
    if !current.is_empty() {
        blocks.push(MicroBlock::from_rows(current).unwrap());
    }
    blocks
}

proptest! {
    /// decode(encode(x)) == x for all well-formed micro-block lists.
    #[test]
    fn macro_block_round_trips(rows in arb_rows(), per_block in 1usize..6) {
        let blocks = pack(&rows, per_block);
        let (block, bytes) = encode_macro_block(MacroBlockId(1), blocks.clone()).unwrap();
        let decoded = decode_macro_block(MacroBlockId(1), &bytes).unwrap();
        prop_assert_eq!(&decoded, &block);
        prop_assert_eq!(decoded.micro_blocks, blocks);
    }

    /// Repacking macro-blocks never changes the logical checksum.
    #[test]
    fn logical_checksum_is_packing_invariant(rows in arb_rows(), a in 1usize..4, b in 4usize..9) {
        let pack_a = pack(&rows, a);
        let pack_b = pack(&rows, b);
        let rows_a: Vec<Row> = pack_a.iter().flat_map(|m| m.rows.clone()).collect();
        let rows_b: Vec<Row> = pack_b.iter().flat_map(|m| m.rows.clone()).collect();
        prop_assert_eq!(logical_checksum(&rows_a), logical_checksum(&rows_b));
        prop_assert_eq!(logical_checksum(&rows_a), logical_checksum(&rows));
    }

    /// Sorting by (key asc, scn desc) is idempotent and total.
    #[test]
    fn row_sort_is_idempotent(mut rows in arb_rows()) {
        let once = rows.clone();
        sort_rows(&mut rows);
        prop_assert_eq!(&rows, &once, "arb_rows emits canonical order");
        sort_rows(&mut rows);
        prop_assert_eq!(rows, once);
    }
}
