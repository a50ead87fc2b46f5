use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use kdn_core::codec::{decompress_cache, CodecProfile};
use kdn_core::model::TokenId;
use kdn_core::store::{CrashPoint, KeyMode, Store, StoreConfig, StoreError};
use kdn_core::{Model, ModelConfig};
use proptest::prelude::*;

fn model() -> Model {
    Model::new(ModelConfig::new(1, 2, 4, 32)).unwrap()
}

fn open(dir: &Path, capacity: u64) -> Store {
    Store::open(StoreConfig::new(dir).with_chunk_size(4).with_capacity(capacity)).unwrap()
}

fn blob_count(dir: &Path) -> usize {
    fs::read_dir(dir.join("blobs")).unwrap().count()
}

/// Every listed entry is readable and decodes; no unreferenced blobs remain.
fn assert_consistent(dir: &Path, store: &Store) {
    let entries = store.list();
    for e in &entries {
        let chunk = store.get(&e.key).unwrap().expect("listed entry must be readable");
        decompress_cache(&chunk).unwrap();
    }
    assert_eq!(blob_count(dir), entries.len());
    assert_eq!(store.total_size(), entries.iter().map(|e| e.size).sum::<u64>());
}

#[derive(Debug, Clone)]
enum Op {
    Put(Vec<TokenId>, KeyMode),
    Pin(usize, bool),
    Get(Vec<TokenId>, KeyMode),
}

fn op() -> impl Strategy<Value = Op> {
    let text = prop::collection::vec(0u32..32, 1..14);
    let mode = prop::sample::select(vec![KeyMode::Chain, KeyMode::Standalone]);
    prop_oneof![
        3 => (text.clone(), mode.clone()).prop_map(|(t, m)| Op::Put(t, m)),
        1 => (0usize..64, any::<bool>()).prop_map(|(i, p)| Op::Pin(i, p)),
        1 => (text, mode).prop_map(|(t, m)| Op::Get(t, m)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_workloads_respect_capacity_and_reopen(ops in prop::collection::vec(op(), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let capacity = 3_000;
        let m = model();
        let p = CodecProfile::default();
        let s = open(dir.path(), capacity);
        for op in ops {
            match op {
                Op::Put(t, mode) => match s.store_text(&m, &t, mode, &p) {
                    Ok(_) | Err(StoreError::CapacityExceeded { .. }) => {}
                    Err(e) => panic!("{e}"),
                },
                Op::Pin(i, pin) => {
                    let list = s.list();
                    if !list.is_empty() {
                        s.set_pinned(&list[i % list.len()].key, pin).unwrap();
                    }
                }
                Op::Get(t, mode) => {
                    let r = s.retrieve_text(m.model_id(), &t, mode);
                    let hit_tokens: usize = r.hits.iter().map(|(_, c)| c.n_tokens).sum();
                    if mode == KeyMode::Chain {
                        prop_assert_eq!(hit_tokens + r.miss_suffix.len(), t.len());
                    }
                }
            }
            prop_assert!(s.total_size() <= capacity);
        }
        let before: BTreeSet<_> = s.list().into_iter().map(|e| (e.key, e.pinned)).collect();
        drop(s);
        let s = open(dir.path(), capacity);
        let after: BTreeSet<_> = s.list().into_iter().map(|e| (e.key, e.pinned)).collect();
        prop_assert_eq!(before, after);
        assert_consistent(dir.path(), &s);
    }
}

#[test]
fn every_crash_point_recovers() {
    let m = model();
    let p = CodecProfile::default();
    let texts: Vec<Vec<TokenId>> = (0..6u32)
        .map(|i| (0..10).map(|j| (i * 7 + j * 3) % 32).collect())
        .collect();
    for point in [CrashPoint::AfterBlobWrite, CrashPoint::MidManifestAppend] {
        for nth in 0..12 {
            let dir = tempfile::tempdir().unwrap();
            {
                let s = open(dir.path(), u64::MAX);
                s.inject_crash(nth, point);
                for t in &texts {
                    if s.store_text(&m, t, KeyMode::Chain, &p).is_err() {
                        break;
                    }
                }
            }
            let s = open(dir.path(), u64::MAX);
            assert_consistent(dir.path(), &s);
            // The store keeps working and can finish the interrupted work.
            for t in &texts {
                s.store_text(&m, t, KeyMode::Chain, &p).unwrap();
                let r = s.retrieve_text(m.model_id(), t, KeyMode::Chain);
                assert!(r.miss_suffix.is_empty(), "{point:?} {nth}");
            }
        }
    }
}

#[test]
fn pinned_bytes_over_capacity_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let p = CodecProfile::default();
    let s = open(dir.path(), 1_200);
    let mut pinned = Vec::new();
    let mut refused = false;
    for i in 0..20u32 {
        match s.store_text(&m, &[i, i + 1, i + 2, i + 3], KeyMode::Standalone, &p) {
            Ok(r) => {
                s.set_pinned(&r.keys[0], true).unwrap();
                pinned.push(r.keys[0]);
            }
            Err(StoreError::CapacityExceeded { .. }) => {
                refused = true;
                break;
            }
            Err(e) => panic!("{e}"),
        }
        assert!(s.total_size() <= 1_200);
    }
    assert!(refused, "capacity was never reached");
    assert!(
        pinned.iter().all(|k| s.contains(k)),
        "pinned entries must never be evicted"
    );
}
