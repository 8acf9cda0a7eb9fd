use std::collections::HashSet;
use std::io::Write;
use std::sync::{Arc, Barrier};
use std::thread;

use apikey_core::pool::{FileStore, MemoryStore, PoolError, ServerPool, ServerSecret};
use apikey_core::KeyId;
use proptest::prelude::*;
use zeroize::Zeroizing;

const STORE_KEY: [u8; 32] = [0x5a; 32];

fn kid(s: &str) -> KeyId {
    KeyId::parse(s).unwrap()
}

fn entry(i: u32) -> (Vec<u8>, ServerSecret) {
    let mut secret = [0u8; 32];
    secret[..4].copy_from_slice(&i.to_be_bytes());
    (i.to_be_bytes().to_vec(), Zeroizing::new(secret))
}

#[test]
fn sixty_four_threads_race_for_one_point() {
    for _ in 0..20 {
        let pool = Arc::new(ServerPool::in_memory());
        pool.add_batch(&kid("k"), vec![entry(1)]).unwrap();
        let barrier = Arc::new(Barrier::new(64));
        let wins: usize = (0..64)
            .map(|_| {
                let (pool, barrier) = (pool.clone(), barrier.clone());
                thread::spawn(move || {
                    barrier.wait();
                    pool.consume(&kid("k"), &1u32.to_be_bytes()).is_ok() as usize
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap())
            .sum();
        assert_eq!(wins, 1);
    }
}

#[test]
fn shared_pool_hands_out_each_point_once() {
    let pool = Arc::new(ServerPool::in_memory());
    pool.add_batch(&kid("k"), (0..500).map(entry).collect()).unwrap();
    let handles: Vec<_> = (0..64)
        .map(|t| {
            let pool = pool.clone();
            thread::spawn(move || {
                let mut got = Vec::new();
                for i in 0..500u32 {
                    let i = (i + t * 7) % 500;
                    if let Ok(s) = pool.consume(&kid("k"), &i.to_be_bytes()) {
                        got.push(u32::from_be_bytes(s[..4].try_into().unwrap()));
                    }
                }
                got
            })
        })
        .collect();
    let all: Vec<u32> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    let unique: HashSet<_> = all.iter().collect();
    assert_eq!(all.len(), 500);
    assert_eq!(unique.len(), 500);
    assert_eq!(pool.total_len(), 0);
}

#[test]
fn consumed_points_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.jsonl");
    {
        let pool = ServerPool::open(Box::new(FileStore::open(&path, &STORE_KEY).unwrap())).unwrap();
        pool.add_batch(&kid("a"), (0..10).map(entry).collect()).unwrap();
        pool.add_batch(&kid("b"), (0..3).map(entry).collect()).unwrap();
        for i in 0..4u32 {
            pool.consume(&kid("a"), &i.to_be_bytes()).unwrap();
        }
    }
    let contents = std::fs::read_to_string(&path).unwrap();
    assert!(!contents.contains(&hex::encode(entry(5).1.as_slice())), "secrets must be sealed");

    let reopen = || ServerPool::open(Box::new(FileStore::open(&path, &STORE_KEY).unwrap())).unwrap();
    let pool = reopen();
    assert_eq!(pool.len(&kid("a")), 6);
    assert_eq!(pool.len(&kid("b")), 3);
    for i in 0..4u32 {
        assert!(pool.is_consumed(&kid("a"), &i.to_be_bytes()));
        assert_eq!(pool.consume(&kid("a"), &i.to_be_bytes()).unwrap_err(), PoolError::UnknownPoint);
        assert_eq!(pool.add_batch(&kid("a"), vec![entry(i)]).unwrap_err(), PoolError::DuplicatePoint);
    }
    assert_eq!(*pool.consume(&kid("a"), &5u32.to_be_bytes()).unwrap(), *entry(5).1);
    drop(pool);

    // A second restart runs on the compacted log.
    let pool = reopen();
    assert_eq!(pool.len(&kid("a")), 5);
    for i in [0u32, 1, 2, 3, 5] {
        assert_eq!(pool.consume(&kid("a"), &i.to_be_bytes()).unwrap_err(), PoolError::UnknownPoint);
    }
    assert_eq!(*pool.consume(&kid("a"), &9u32.to_be_bytes()).unwrap(), *entry(9).1);
}

#[test]
fn torn_final_record_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.jsonl");
    {
        let pool = ServerPool::open(Box::new(FileStore::open(&path, &STORE_KEY).unwrap())).unwrap();
        pool.add_batch(&kid("a"), vec![entry(1), entry(2)]).unwrap();
    }
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(br#"{"op":"consume","key_id":"a","r":"000"#).unwrap();
    drop(f);
    let pool = ServerPool::open(Box::new(FileStore::open(&path, &STORE_KEY).unwrap())).unwrap();
    assert_eq!(pool.len(&kid("a")), 2);
}

#[test]
fn wrong_store_key_or_swapped_secret_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.jsonl");
    {
        let pool = ServerPool::open(Box::new(FileStore::open(&path, &STORE_KEY).unwrap())).unwrap();
        pool.add_batch(&kid("a"), vec![entry(1)]).unwrap();
    }
    let err = ServerPool::open(Box::new(FileStore::open(&path, &[0u8; 32]).unwrap())).unwrap_err();
    assert!(matches!(err, PoolError::Corrupt(_)));

    // Moving a sealed secret to another key id breaks its binding.
    let text = std::fs::read_to_string(&path).unwrap().replace(r#""key_id":"a""#, r#""key_id":"b""#);
    std::fs::write(&path, text).unwrap();
    let err = ServerPool::open(Box::new(FileStore::open(&path, &STORE_KEY).unwrap())).unwrap_err();
    assert!(matches!(err, PoolError::Corrupt(_)));
}

#[derive(Debug, Clone)]
enum Op {
    Add(Vec<u8>),
    Consume(u8),
    Restart,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        prop::collection::vec(0u8..24, 1..4).prop_map(Op::Add),
        (0u8..24).prop_map(Op::Consume),
        Just(Op::Restart),
    ]
}

proptest! {
    #[test]
    fn pool_matches_model(ops in prop::collection::vec(op(), 1..60)) {
        let store = MemoryStore::new();
        let mut pool = ServerPool::open(Box::new(store.clone())).unwrap();
        let mut live: HashSet<u8> = HashSet::new();
        let mut dead: HashSet<u8> = HashSet::new();
        let mut handed_out: Vec<u8> = Vec::new();
        for op in ops {
            match op {
                Op::Add(points) => {
                    let distinct: HashSet<_> = points.iter().collect();
                    let ok = distinct.len() == points.len()
                        && points.iter().all(|p| !live.contains(p) && !dead.contains(p));
                    let batch = points.iter().map(|&p| (vec![p], Zeroizing::new([p; 32]))).collect();
                    prop_assert_eq!(pool.add_batch(&kid("k"), batch).is_ok(), ok);
                    if ok {
                        live.extend(points);
                    }
                }
                Op::Consume(p) => {
                    let res = pool.consume(&kid("k"), &[p]);
                    prop_assert_eq!(res.is_ok(), live.remove(&p));
                    if let Ok(s) = res {
                        prop_assert_eq!(*s, [p; 32]);
                        dead.insert(p);
                        handed_out.push(p);
                    }
                }
                Op::Restart => {
                    drop(pool);
                    pool = ServerPool::open(Box::new(store.clone())).unwrap();
                }
            }
            prop_assert_eq!(pool.len(&kid("k")), live.len());
        }
        let unique: HashSet<_> = handed_out.iter().collect();
        prop_assert_eq!(unique.len(), handed_out.len());
    }
}
