//! Sequential operations against every store, checked against a map.

use std::collections::HashMap;

use dpmkv::central::{CentralConfig, CentralStore};
use dpmkv::direct::{DirectConfig, DirectStore, Variant};
use dpmkv::fabric::{Sim, SimConfig};
use dpmkv::sep::{SepConfig, SepStore};
use dpmkv::{KvStore, StoreError};
use proptest::prelude::*;

const SIZE: u64 = 24;

#[derive(Clone, Debug)]
enum Op {
    Create(u8),
    Put(u8, Vec<u8>),
    Get(u8),
    Del(u8),
}

fn op() -> impl Strategy<Value = Op> {
    let key = 0u8..6;
    prop_oneof![
        key.clone().prop_map(Op::Create),
        (key.clone(), prop::collection::vec(any::<u8>(), 0..=SIZE as usize + 8)).prop_map(|(k, v)| Op::Put(k, v)),
        key.clone().prop_map(Op::Get),
        key.prop_map(Op::Del),
    ]
}

/// Expected outcome of `op` on the model, applied to it.
fn model(m: &mut HashMap<u8, Vec<u8>>, op: &Op) -> Result<Option<Vec<u8>>, StoreError> {
    match op {
        Op::Create(k) if m.contains_key(k) => Err(StoreError::KeyExists),
        Op::Create(k) => {
            m.insert(*k, vec![0; SIZE as usize]);
            Ok(None)
        }
        Op::Put(k, _) | Op::Get(k) | Op::Del(k) if !m.contains_key(k) => Err(StoreError::KeyNotFound),
        Op::Put(_, v) if v.len() as u64 > SIZE => Err(StoreError::ValueTooLarge {
            len: v.len(),
            size: SIZE,
        }),
        Op::Put(k, v) => {
            m.insert(*k, v.clone());
            Ok(None)
        }
        Op::Get(k) => Ok(Some(m[k].clone())),
        Op::Del(k) => {
            m.remove(k);
            Ok(None)
        }
    }
}

fn run<C: KvStore>(sim: &Sim, clients: &[C], ops: &[Op]) -> Result<(), TestCaseError> {
    let mut m = HashMap::new();
    for (i, op) in ops.iter().enumerate() {
        // Alternate clients so cached state on one is exercised by the other.
        let c = clients[i % clients.len()].clone();
        let o = op.clone();
        let got = sim
            .block_on(async move {
                match o {
                    Op::Create(k) => c.create(&[k], SIZE).await.map(|_| None),
                    Op::Put(k, v) => c.put(&[k], &v).await.map(|_| None),
                    Op::Get(k) => c.get(&[k]).await.map(Some),
                    Op::Del(k) => c.del(&[k]).await.map(|_| None),
                }
            })
            .unwrap();
        let want = model(&mut m, op);
        prop_assert_eq!(
            format!("{got:?}"),
            format!("{want:?}"),
            "op {} {:?} on {}",
            i,
            op,
            clients[0].kind()
        );
    }
    Ok(())
}

fn sim() -> Sim {
    Sim::new(SimConfig::with_devices(3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn direct_lock_matches_map(ops in prop::collection::vec(op(), 1..60)) {
        let sim = sim();
        let s = DirectStore::new(&sim, DirectConfig::new(Variant::Lock));
        run(&sim, &[s.client(0), s.client(1)], &ops)?;
    }

    #[test]
    fn direct_crc_matches_map(ops in prop::collection::vec(op(), 1..60)) {
        let sim = sim();
        let s = DirectStore::new(&sim, DirectConfig::new(Variant::Crc));
        run(&sim, &[s.client(0), s.client(1)], &ops)?;
    }

    #[test]
    fn central_matches_map(ops in prop::collection::vec(op(), 1..60)) {
        let sim = sim();
        let s = CentralStore::new(&sim, CentralConfig::default());
        run(&sim, &[s.client(0), s.client(1)], &ops)?;
    }

    #[test]
    fn sep_matches_map(ops in prop::collection::vec(op(), 1..60), replication in 1usize..=3) {
        let sim = sim();
        let s = SepStore::new(&sim, SepConfig { replication, ..SepConfig::default() });
        run(&sim, &[s.client(0), s.client(1)], &ops)?;
    }
}
