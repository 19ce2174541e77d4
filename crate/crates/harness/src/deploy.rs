//! Building a store of any kind on a simulated fabric.

use dpmkv::central::{CentralClient, CentralConfig, CentralStore};
use dpmkv::direct::{DirectClient, DirectConfig, DirectStore, Variant};
use dpmkv::fabric::{Capacity, DeviceId, Nic, Sim, SimConfig};
use dpmkv::sep::{SepClient, SepConfig, SepStore};
use dpmkv::{KvStore, StoreError, StoreKind};

/// Per-round NIC limits used by benchmarks. A compute node's link is the
/// narrowest, a DPM serves many clients, the coordinator and the metadata
/// server sit in between.
pub fn bench_capacity() -> Capacity {
    Capacity {
        cn: Nic::new(16, 4096),
        dpm: Nic::new(64, 32 * 1024),
        coord: Nic::new(32, 16 * 1024),
        ms: Nic::new(8, 0),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StoreOpts {
    pub kind: StoreKind,
    pub replication: usize,
    /// Metadata cache (sep) or data cache (central), percent of keys.
    pub cache_pct: u32,
    pub load_balance: bool,
    /// Coordinator or metadata server handler count.
    pub handlers: u32,
}

impl StoreOpts {
    pub fn new(kind: StoreKind) -> Self {
        StoreOpts {
            kind,
            replication: 1,
            cache_pct: match kind {
                StoreKind::Sep => 100,
                _ => 0,
            },
            load_balance: true,
            handlers: 8,
        }
    }
}

#[derive(Clone)]
pub enum Store {
    Direct(DirectStore),
    Central(CentralStore),
    Sep(SepStore),
}

#[derive(Clone)]
pub enum Client {
    Direct(DirectClient),
    Central(CentralClient),
    Sep(SepClient),
}

/// Device bytes needed for `keys` entries of `value_size` under `opts`.
pub fn device_capacity(opts: &StoreOpts, keys: u64, value_size: u64, devices: u16) -> u64 {
    let per_key = dpmkv::alloc::size_class(value_size + 64) * 2 * opts.replication as u64;
    let need = per_key * keys / devices as u64;
    // Sep keeps retired versions around until reclaimed; leave headroom.
    (need * 2 + (32 << 20)).next_multiple_of(1 << 20)
}

impl Store {
    pub fn new(sim: &Sim, opts: &StoreOpts, keys: u64) -> Store {
        match opts.kind {
            StoreKind::DirectLock | StoreKind::DirectCrc => {
                let variant = if opts.kind == StoreKind::DirectLock {
                    Variant::Lock
                } else {
                    Variant::Crc
                };
                let mut c = DirectConfig::new(variant);
                c.replication = opts.replication;
                Store::Direct(DirectStore::new(sim, c))
            }
            StoreKind::Central => Store::Central(CentralStore::new(
                sim,
                CentralConfig {
                    replication: opts.replication,
                    handlers: opts.handlers,
                    cache_percent: opts.cache_pct,
                    ..Default::default()
                },
            )),
            StoreKind::Sep => Store::Sep(SepStore::new(
                sim,
                SepConfig {
                    replication: opts.replication,
                    cache_percent: opts.cache_pct,
                    load_balance: opts.load_balance,
                    ms_handlers: opts.handlers,
                    shortcut_bytes: (keys * 8).max(4096).next_multiple_of(4096),
                    ..Default::default()
                },
            )),
        }
    }

    pub fn client(&self, cn: u16) -> Client {
        match self {
            Store::Direct(s) => Client::Direct(s.client(cn)),
            Store::Central(s) => Client::Central(s.client(cn)),
            Store::Sep(s) => Client::Sep(s.client(cn)),
        }
    }

    /// Store-side repair after `device` failed and came back (or, with
    /// `None`, after the coordinator or metadata server lost its volatile
    /// state). Must run in a task.
    pub async fn recover(&self, sim: &Sim, device: Option<DeviceId>) -> Result<(), StoreError> {
        match self {
            Store::Direct(s) => {
                // Every live device, not just the failed one: a writer that
                // gave up on one replica may have left its lock elsewhere.
                for d in (0..sim.device_count()).filter(|d| sim.is_alive(*d)) {
                    s.recover(d).await?;
                }
                Ok(())
            }
            Store::Central(s) => {
                match device {
                    Some(d) => {
                        s.recover_dpm(d);
                    }
                    None => s.crash_coordinator(),
                }
                Ok(())
            }
            Store::Sep(s) => {
                if device.is_none() {
                    s.fail_over();
                }
                s.recover().await.map(|_| ())
            }
        }
    }
}

impl KvStore for Client {
    fn kind(&self) -> StoreKind {
        match self {
            Client::Direct(c) => c.kind(),
            Client::Central(c) => c.kind(),
            Client::Sep(c) => c.kind(),
        }
    }

    async fn create(&self, key: &[u8], size: u64) -> Result<(), StoreError> {
        match self {
            Client::Direct(c) => c.create(key, size).await,
            Client::Central(c) => c.create(key, size).await,
            Client::Sep(c) => c.create(key, size).await,
        }
    }

    async fn put(&self, key: &[u8], value: &[u8]) -> Result<(), StoreError> {
        match self {
            Client::Direct(c) => c.put(key, value).await,
            Client::Central(c) => c.put(key, value).await,
            Client::Sep(c) => c.put(key, value).await,
        }
    }

    async fn get(&self, key: &[u8]) -> Result<Vec<u8>, StoreError> {
        match self {
            Client::Direct(c) => c.get(key).await,
            Client::Central(c) => c.get(key).await,
            Client::Sep(c) => c.get(key).await,
        }
    }

    async fn del(&self, key: &[u8]) -> Result<(), StoreError> {
        match self {
            Client::Direct(c) => c.del(key).await,
            Client::Central(c) => c.del(key).await,
            Client::Sep(c) => c.del(key).await,
        }
    }
}

/// A simulated cluster running one store.
pub struct Deployment {
    pub sim: Sim,
    pub store: Store,
    pub opts: StoreOpts,
}

impl Deployment {
    pub fn new(opts: StoreOpts, mut config: SimConfig, keys: u64) -> Deployment {
        if opts.kind == StoreKind::Sep {
            // Shortcut words live at the start of every device.
            config.device_capacity += (keys * 8).next_multiple_of(64 * 1024);
        }
        let sim = Sim::new(config);
        let store = Store::new(&sim, &opts, keys);
        Deployment { sim, store, opts }
    }

    pub fn client(&self, cn: u16) -> Client {
        self.store.client(cn)
    }
}
