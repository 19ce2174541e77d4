//! Reclamation safety checks for the sep store.
//!
//! Stale cursors are staged on purpose: a reader remembers where a key's
//! tail was, a writer churns until that slot has been reclaimed and handed
//! out again, and the reader then starts from the old location.

use std::collections::HashMap;

use anyhow::{anyhow, Result};
use dpmkv::fabric::{DeviceId, LinkClass, Sim, SimConfig};
use dpmkv::sep::{SepConfig, SepStore, SlotState, Transition};
use dpmkv::stamp::{key_hash, stamp, stamp_check, StampCheck};
use dpmkv::KvStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VALUE_SIZE: usize = 16;

#[derive(Clone, Copy, Debug)]
pub struct GcBattery {
    /// Stale-cursor reads to stage, each over a slot known to be reused.
    pub trials: u64,
    pub keys: u64,
    /// Writer operations between reuse checks.
    pub churn: u64,
    /// Sequential puts to one key in the wrap-around run.
    pub wrap_puts: u64,
    pub read_abort_t: u64,
    pub epoch_t: u64,
    pub seed: u64,
}

impl Default for GcBattery {
    fn default() -> Self {
        GcBattery {
            trials: 10_000,
            keys: 32,
            churn: 8,
            wrap_puts: 6_000,
            read_abort_t: 64,
            epoch_t: 512,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GcVerdict {
    /// Stale-cursor reads staged over a reused slot.
    pub trials: u64,
    /// Reads that returned another key's payload.
    pub cross_key: u64,
    /// Reads that returned anything but the key's latest value.
    pub stale: u64,
    pub transitions: u64,
    pub transition_violations: Vec<String>,
    /// Reclamations counted per slot in the wrap-around run.
    pub max_reuses: u32,
    pub detours: u64,
    pub detour_violations: Vec<String>,
    pub ms_dpm_bytes: u64,
}

impl GcVerdict {
    pub fn passed(&self) -> bool {
        self.trials > 0
            && self.cross_key == 0
            && self.stale == 0
            && self.transition_violations.is_empty()
            && self.detour_violations.is_empty()
            && self.max_reuses >= 256
    }
}

fn store(b: &GcBattery) -> (Sim, SepStore) {
    let sim = Sim::new(SimConfig {
        devices: 1,
        device_capacity: 16 << 20,
        seed: b.seed,
        record_log: false,
        max_steps: u64::MAX,
        ..SimConfig::default()
    });
    let store = SepStore::new(
        &sim,
        SepConfig {
            read_abort_t: b.read_abort_t,
            epoch_t: b.epoch_t,
            record_transitions: true,
            ..Default::default()
        },
    );
    (sim, store)
}

fn key(i: u64) -> Vec<u8> {
    format!("gc{i:04}").into_bytes()
}

/// Runs the whole battery.
pub fn gc_battery(b: &GcBattery) -> Result<GcVerdict> {
    let mut v = GcVerdict::default();
    stale_cursors(b, &mut v)?;
    wrap_around(b, &mut v)?;
    Ok(v)
}

fn stale_cursors(b: &GcBattery, v: &mut GcVerdict) -> Result<()> {
    let (sim, store) = store(b);
    let (reader, writer) = (store.client(0), store.client(1));
    let mut rng = ChaCha8Rng::seed_from_u64(b.seed);
    let mut gens = vec![0u32; b.keys as usize];
    let w = writer.clone();
    let keys = b.keys;
    sim.block_on(async move {
        for i in 0..keys {
            w.create(&key(i), VALUE_SIZE as u64).await?;
        }
        Ok::<_, dpmkv::StoreError>(())
    })?
    .map_err(|e| anyhow!("create: {e}"))?;

    let mut attempts = 0;
    while v.trials < b.trials {
        attempts += 1;
        if attempts > b.trials * 4 {
            return Err(anyhow!(
                "slots are not being reused ({} of {} trials)",
                v.trials,
                b.trials
            ));
        }
        let x = rng.random_range(0..b.keys);
        let r = reader.clone();
        sim.block_on(async move { r.get(&key(x)).await })?
            .map_err(|e| anyhow!("get: {e}"))?;
        let old = reader.cursor(&key(x)).ok_or_else(|| anyhow!("no cursor after a get"))?;
        let (dev, addr) = old.primary().slot();
        let mut reused = false;
        for _ in 0..64 {
            // Writes to x retire the slot under the cursor; writes to the
            // other keys take slots from the free list.
            let ops: Vec<(u64, u32)> = (0..b.churn)
                .map(|j| {
                    let k = if j == 0 { x } else { rng.random_range(0..b.keys) };
                    gens[k as usize] += 1;
                    (k, gens[k as usize])
                })
                .collect();
            let w = writer.clone();
            sim.block_on(async move {
                for (k, g) in ops {
                    w.put(&key(k), &stamp(&key(k), g, VALUE_SIZE)).await?;
                }
                w.flush_retires().await
            })?
            .map_err(|e| anyhow!("churn: {e}"))?;
            sim.advance(b.read_abort_t + 1);
            let now = store.with_ms(|ms| ms.slot_state(dev, addr));
            if let Some((SlotState::InChain | SlotState::Allocated(_), gc)) = now {
                if gc != old.primary().gc {
                    reused = true;
                    break;
                }
            }
        }
        if !reused || !reader.pin_cursor(&key(x), old) {
            continue;
        }
        v.trials += 1;
        let r = reader.clone();
        let got = sim
            .block_on(async move { r.get(&key(x)).await })?
            .map_err(|e| anyhow!("stale get: {e}"))?;
        match stamp_check(&got) {
            StampCheck::Consistent {
                key_hash: h,
                generation,
            } => {
                if h != key_hash(&key(x)) && generation != 0 {
                    v.cross_key += 1;
                } else if generation != gens[x as usize] {
                    v.stale += 1;
                }
            }
            StampCheck::Torn { .. } => v.cross_key += 1,
        }
    }
    store.with_ms(|ms| check_transitions(ms.transitions(), b.read_abort_t, b.epoch_t, v));
    v.ms_dpm_bytes += sim.meter().link_bytes(LinkClass::MsDpm);
    Ok(())
}

/// One key rewritten over and over so that its few slots cycle far past
/// the 8-bit gc version.
fn wrap_around(b: &GcBattery, v: &mut GcVerdict) -> Result<()> {
    let (sim, store) = store(b);
    let c = store.client(0);
    let c2 = c.clone();
    sim.block_on(async move { c2.create(b"wrap", VALUE_SIZE as u64).await })?
        .map_err(|e| anyhow!("create: {e}"))?;
    for g in 1..=b.wrap_puts {
        let c = c.clone();
        sim.block_on(async move {
            c.put(b"wrap", &stamp(b"wrap", g as u32, VALUE_SIZE)).await?;
            c.flush_retires().await
        })?
        .map_err(|e| anyhow!("put {g}: {e}"))?;
        sim.advance(b.read_abort_t + 1);
    }
    sim.advance(b.epoch_t + b.read_abort_t + 1);
    let c2 = c.clone();
    let last = sim
        .block_on(async move { c2.get(b"wrap").await })?
        .map_err(|e| anyhow!("final get: {e}"))?;
    if stamp_check(&last).generation() != Some(b.wrap_puts as u32) {
        v.detour_violations.push("wrap key lost its last value".into());
    }
    store.with_ms(|ms| {
        check_transitions(ms.transitions(), b.read_abort_t, b.epoch_t, v);
        let mut per_slot: HashMap<(DeviceId, u64), (u32, u32)> = HashMap::new();
        for t in ms.transitions() {
            if t.from == SlotState::ToGc {
                let e = per_slot.entry((t.device, t.address)).or_default();
                e.0 += 1;
                e.1 += (t.to == SlotState::Epoch) as u32;
            }
        }
        for (slot, (reuses, detours)) in &per_slot {
            if *detours != reuses / 256 {
                v.detour_violations
                    .push(format!("slot {slot:?}: {detours} detours over {reuses} reuses"));
            }
        }
        v.max_reuses = per_slot.values().map(|p| p.0).max().unwrap_or(0);
        v.detours = ms.epoch_detours();
    });
    v.ms_dpm_bytes += sim.meter().link_bytes(LinkClass::MsDpm);
    Ok(())
}

/// Every transition must leave the state the previous one entered, follow
/// the slot life cycle, and respect the reclamation delays.
pub fn check_transitions(ts: &[Transition], read_abort_t: u64, epoch_t: u64, v: &mut GcVerdict) {
    let mut state: HashMap<(DeviceId, u64), SlotState> = HashMap::new();
    let mut note = |msg: String| {
        if v.transition_violations.len() < 16 {
            v.transition_violations.push(msg);
        }
    };
    for t in ts {
        v.transitions += 1;
        let prev = state.insert((t.device, t.address), t.to).unwrap_or(SlotState::Free);
        if prev != t.from {
            note(format!("{t:?}: slot was {prev:?}"));
        }
        use SlotState::*;
        let legal = matches!(
            (t.from, t.to),
            (Free, Allocated(_))
                | (Allocated(_), Free | InChain | Retired)
                | (InChain, Retired)
                | (Retired, ToGc)
                | (ToGc, Free | Epoch)
                | (Epoch, Free)
        );
        if !legal {
            note(format!("{t:?}: illegal step"));
        }
        let receipt = t.receipt.unwrap_or(0);
        match (t.from, t.to) {
            (ToGc, Free) if t.time < receipt + read_abort_t => note(format!("{t:?}: freed early")),
            (Epoch, Free) if t.time < receipt + read_abort_t + epoch_t => note(format!("{t:?}: left epoch list early")),
            (ToGc, Epoch) if t.gc != 0 => note(format!("{t:?}: detour without wrap")),
            _ => {}
        }
    }
}
