//! Single-threaded executor and fabric scheduler.

use std::cell::RefCell;
use std::collections::{BTreeMap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;

use super::device::{DpmImage, Health, Survivors};
use super::explore::Dfs;
use super::fault::{CrashPoint, FaultPlan};
use super::meter::{LinkClass, Meter, Path, RoundClass};
use super::{Capacity, ConnId, DeviceId, Endpoint, FabricError, SimConfig, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId(pub u32);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpRequest {
    Read {
        device: DeviceId,
        address: u64,
        len: u64,
    },
    Write {
        device: DeviceId,
        address: u64,
        data: Vec<u8>,
    },
    Cas {
        device: DeviceId,
        address: u64,
        expect: u64,
        new: u64,
    },
    /// Request message to a server endpoint. `response` is the expected
    /// reply size, used only for NIC occupancy; the reply is metered by
    /// [`Port::rpc_reply`].
    Rpc {
        server: Endpoint,
        request: u64,
        response: u64,
        data: u64,
    },
    /// Local persist point at the issuing endpoint. Costs no round trip.
    Flush,
}

impl OpRequest {
    fn kind(&self) -> OpKind {
        match self {
            OpRequest::Read { .. } => OpKind::Read,
            OpRequest::Write { .. } => OpKind::Write,
            OpRequest::Cas { .. } => OpKind::Cas,
            OpRequest::Rpc { .. } => OpKind::Rpc,
            OpRequest::Flush => OpKind::Flush,
        }
    }

    fn target(&self) -> Option<Endpoint> {
        match self {
            OpRequest::Read { device, .. } | OpRequest::Write { device, .. } | OpRequest::Cas { device, .. } => {
                Some(Endpoint::Dpm(*device))
            }
            OpRequest::Rpc { server, .. } => Some(*server),
            OpRequest::Flush => None,
        }
    }

    /// (request bytes, request payload bytes)
    fn sent(&self) -> (u64, u64) {
        match self {
            OpRequest::Read { .. } => (16, 0),
            OpRequest::Write { data, .. } => {
                let n = data.len() as u64;
                (16 + n, if n > 8 { n } else { 0 })
            }
            OpRequest::Cas { .. } => (32, 0),
            OpRequest::Rpc { request, data, .. } => (*request, *data),
            OpRequest::Flush => (0, 0),
        }
    }

    /// Bytes this op occupies on the two NICs it crosses.
    fn wire(&self) -> u64 {
        match self {
            OpRequest::Read { len, .. } => 16 + len,
            OpRequest::Rpc { request, response, .. } => request + response,
            OpRequest::Cas { .. } => 40,
            _ => self.sent().0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpOutput {
    Read(Vec<u8>),
    Written,
    /// Value found before the compare.
    Cas(u64),
    Delivered,
    Flushed,
}

impl OpOutput {
    pub fn into_bytes(self) -> Vec<u8> {
        match self {
            OpOutput::Read(b) => b,
            other => panic!("not a read result: {other:?}"),
        }
    }

    pub fn cas_old(&self) -> u64 {
        match self {
            OpOutput::Cas(v) => *v,
            other => panic!("not a CAS result: {other:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Read,
    Write,
    Cas,
    Rpc,
    Flush,
}

impl OpKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpKind::Read => "read",
            OpKind::Write => "write",
            OpKind::Cas => "cas",
            OpKind::Rpc => "rpc",
            OpKind::Flush => "flush",
        }
    }
}

/// One executed sub-operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub index: u64,
    pub task: TaskId,
    pub batch: u64,
    pub device: Option<DeviceId>,
    pub kind: OpKind,
    pub address: u64,
    pub len: u64,
    pub round: u64,
}

/// Marks the batch whose completion commits a value.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CommitMark {
    pub key: Vec<u8>,
    pub stamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitRecord {
    pub mark: CommitMark,
    /// Op-log index of the last sub-operation of the committing batch.
    pub op_index: u64,
    pub time: u64,
    pub task: TaskId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrashEvent {
    pub at: u64,
    pub device: Option<DeviceId>,
    pub permanent: bool,
    pub pending: Vec<(ConnId, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TaskState {
    Ready,
    Running,
    Waiting,
    Blocked,
    Spinning,
    Done,
}

struct TaskMeta {
    state: TaskState,
    conn: ConnId,
    background: bool,
    rtts: u64,
}

struct InFlight {
    ticket: u64,
    slot: usize,
    task: TaskId,
    conn: ConnId,
    batch: u64,
    issuer: Endpoint,
    req: OpRequest,
    /// Remaining (address, len) pieces of a write.
    pieces: VecDeque<(u64, u64)>,
    written: usize,
    finished: bool,
}

struct Ticket {
    task: TaskId,
    results: Vec<Option<Result<OpOutput, FabricError>>>,
    expects: Vec<Option<u64>>,
    remaining: usize,
    last_index: u64,
    commit: Option<CommitMark>,
    action: Option<Box<dyn FnOnce()>>,
}

enum Mode {
    Timed,
    Exhaustive(Rc<RefCell<Dfs>>),
}

struct World {
    devices: Vec<DpmImage>,
    meter: Meter,
    now: u64,
    steps: u64,
    seq: u64,
    op_index: u64,
    next_ticket: u64,
    next_batch: u64,
    record_log: bool,
    log: Vec<LogEntry>,
    commits: Vec<CommitRecord>,
    tasks: Vec<TaskMeta>,
    /// Ids of tasks not yet done, ascending.
    live: Vec<u32>,
    queue: Vec<InFlight>,
    fresh: Vec<InFlight>,
    tickets: FxHashMap<u64, Ticket>,
    finished: FxHashMap<u64, Vec<Result<OpOutput, FabricError>>>,
    current: Option<TaskId>,
    /// Task whose op the exhaustive scheduler last stepped.
    last_stepped: Option<TaskId>,
    progressed: bool,
    faults: FaultPlan,
    crashes: Vec<CrashEvent>,
    new_crashes: Vec<CrashEvent>,
    due: Vec<Box<dyn FnOnce()>>,
    capacity: Capacity,
    credit: FxHashMap<Endpoint, i64>,
    max_steps: u64,
    rng: ChaCha8Rng,
    counters: BTreeMap<String, u64>,
    gauges: BTreeMap<String, i64>,
    busy: BTreeMap<String, u64>,
}

type TaskFuture = Pin<Box<dyn Future<Output = ()>>>;
type CrashHook = Box<dyn FnMut(&Sim, &CrashEvent)>;

struct Inner {
    world: RefCell<World>,
    futures: RefCell<Vec<Option<TaskFuture>>>,
    hooks: RefCell<Vec<CrashHook>>,
    mode: Mode,
}

/// Handle to a simulated fabric and its executor. Cheap to clone.
#[derive(Clone)]
pub struct Sim(Rc<Inner>);

impl Sim {
    /// Seeded discrete-event mode.
    pub fn new(config: SimConfig) -> Sim {
        Self::build(config, Mode::Timed)
    }

    pub(crate) fn exhaustive(config: SimConfig, dfs: Rc<RefCell<Dfs>>) -> Sim {
        Self::build(config, Mode::Exhaustive(dfs))
    }

    fn build(config: SimConfig, mode: Mode) -> Sim {
        let devices = (0..config.devices)
            .map(|d| DpmImage::new(d, config.device_capacity))
            .collect();
        let world = World {
            devices,
            meter: Meter::default(),
            now: 0,
            steps: 0,
            seq: 0,
            op_index: 0,
            next_ticket: 0,
            next_batch: 0,
            record_log: config.record_log,
            log: Vec::new(),
            commits: Vec::new(),
            tasks: Vec::new(),
            live: Vec::new(),
            queue: Vec::new(),
            fresh: Vec::new(),
            tickets: FxHashMap::default(),
            finished: FxHashMap::default(),
            current: None,
            last_stepped: None,
            progressed: false,
            faults: config.faults,
            crashes: Vec::new(),
            new_crashes: Vec::new(),
            due: Vec::new(),
            capacity: config.capacity,
            credit: FxHashMap::default(),
            max_steps: config.max_steps,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            counters: BTreeMap::new(),
            gauges: BTreeMap::new(),
            busy: BTreeMap::new(),
        };
        Sim(Rc::new(Inner {
            world: RefCell::new(world),
            futures: RefCell::new(Vec::new()),
            hooks: RefCell::new(Vec::new()),
            mode,
        }))
    }

    pub fn is_exhaustive(&self) -> bool {
        matches!(self.0.mode, Mode::Exhaustive(_))
    }

    // ---- tasks ----

    pub fn spawn<F>(&self, fut: F) -> TaskId
    where
        F: Future<Output = ()> + 'static,
    {
        self.spawn_inner(Box::pin(fut), None, false)
    }

    pub fn spawn_with_result<T, F>(&self, fut: F) -> JoinHandle<T>
    where
        T: 'static,
        F: Future<Output = T> + 'static,
    {
        let slot = Rc::new(RefCell::new(None));
        let out = slot.clone();
        let task = self.spawn(async move {
            let v = fut.await;
            *out.borrow_mut() = Some(v);
        });
        JoinHandle { task, slot }
    }

    /// Spawns work on the current task's connection, metered off the
    /// critical path.
    pub fn spawn_background<F>(&self, fut: F) -> TaskId
    where
        F: Future<Output = ()> + 'static,
    {
        let conn = {
            let w = self.0.world.borrow();
            w.current.map(|t| w.tasks[t.0 as usize].conn)
        };
        self.spawn_inner(Box::pin(fut), conn, true)
    }

    fn spawn_inner(&self, fut: TaskFuture, conn: Option<ConnId>, background: bool) -> TaskId {
        let id = {
            let mut w = self.0.world.borrow_mut();
            let id = TaskId(w.tasks.len() as u32);
            w.tasks.push(TaskMeta {
                state: TaskState::Ready,
                conn: conn.unwrap_or(ConnId(id.0)),
                background,
                rtts: 0,
            });
            w.live.push(id.0);
            w.progressed = true;
            id
        };
        self.0.futures.borrow_mut().push(Some(fut));
        id
    }

    /// Stops a task: its future is dropped and its in-flight operations are
    /// discarded. Already-executed sub-operations stay applied.
    pub fn kill(&self, task: TaskId) {
        let fut = {
            let mut w = self.0.world.borrow_mut();
            let Some(meta) = w.tasks.get_mut(task.0 as usize) else {
                return;
            };
            meta.state = TaskState::Done;
            w.queue.retain(|op| op.task != task);
            w.fresh.retain(|op| op.task != task);
            w.tickets.retain(|_, t| t.task != task);
            w.progressed = true;
            self.0.futures.borrow_mut()[task.0 as usize].take()
        };
        drop(fut);
    }

    pub fn current_task(&self) -> Option<TaskId> {
        self.0.world.borrow().current
    }

    pub fn is_done(&self, task: TaskId) -> bool {
        self.0.world.borrow().tasks[task.0 as usize].state == TaskState::Done
    }

    /// Critical-path rounds issued by `task`.
    pub fn task_rtts(&self, task: TaskId) -> u64 {
        self.0.world.borrow().tasks[task.0 as usize].rtts
    }

    pub fn live_tasks(&self) -> usize {
        let w = self.0.world.borrow();
        w.live
            .iter()
            .filter(|&&i| w.tasks[i as usize].state != TaskState::Done)
            .count()
    }

    /// Spawns `fut`, runs everything to quiescence and returns its output.
    pub fn block_on<T, F>(&self, fut: F) -> Result<T, SimError>
    where
        T: 'static,
        F: Future<Output = T> + 'static,
    {
        let h = self.spawn_with_result(fut);
        self.run()?;
        h.take().ok_or(SimError::Unfinished)
    }

    /// Runs until no task can make progress.
    pub fn run(&self) -> Result<(), SimError> {
        self.run_until(|_| false).map(|_| ())
    }

    /// Runs until `stop` returns true (checked between rounds) or everything
    /// is finished. Returns whether `stop` fired.
    pub fn run_until(&self, mut stop: impl FnMut(&Sim) -> bool) -> Result<bool, SimError> {
        loop {
            self.poll_ready();
            if stop(self) {
                return Ok(true);
            }
            let (empty, spinning, blocked) = {
                let mut w = self.0.world.borrow_mut();
                w.prune();
                let w = &mut *w;
                let mut spinning = 0;
                let mut blocked = 0;
                for &i in &w.live {
                    match w.tasks[i as usize].state {
                        TaskState::Spinning => spinning += 1,
                        TaskState::Blocked => blocked += 1,
                        _ => {}
                    }
                }
                if w.queue.is_empty() && spinning > 0 {
                    // Only spinners can move; let them retry.
                    for &i in &w.live {
                        let t = &mut w.tasks[i as usize];
                        if t.state == TaskState::Spinning {
                            t.state = TaskState::Ready;
                        }
                    }
                    w.steps += 1;
                    if w.steps > w.max_steps {
                        return Err(SimError::StepLimit(w.max_steps));
                    }
                }
                (w.queue.is_empty(), spinning, blocked)
            };
            if empty {
                if spinning > 0 {
                    continue;
                }
                if blocked > 0 {
                    return Err(SimError::Deadlock(blocked));
                }
                return Ok(false);
            }
            {
                let w = self.0.world.borrow();
                if w.steps >= w.max_steps {
                    return Err(SimError::StepLimit(w.max_steps));
                }
            }
            match &self.0.mode {
                Mode::Timed => self.round(),
                Mode::Exhaustive(dfs) => self.step(dfs),
            }
            self.run_due();
            self.fire_hooks();
        }
    }

    fn run_due(&self) {
        let due = std::mem::take(&mut self.0.world.borrow_mut().due);
        for a in due {
            a();
        }
    }

    fn poll_ready(&self) {
        let waker = Waker::noop();
        let mut cx = Context::from_waker(waker);
        loop {
            let ready: Vec<TaskId> = {
                let mut w = self.0.world.borrow_mut();
                w.progressed = false;
                w.live
                    .iter()
                    .filter(|&&i| w.tasks[i as usize].state == TaskState::Ready)
                    .map(|&i| TaskId(i))
                    .collect()
            };
            if ready.is_empty() {
                break;
            }
            for t in ready {
                let fut = self.0.futures.borrow_mut()[t.0 as usize].take();
                let Some(mut fut) = fut else { continue };
                {
                    let mut w = self.0.world.borrow_mut();
                    if w.tasks[t.0 as usize].state != TaskState::Ready {
                        continue;
                    }
                    w.tasks[t.0 as usize].state = TaskState::Running;
                    w.current = Some(t);
                }
                let res = fut.as_mut().poll(&mut cx);
                let keep = {
                    let mut w = self.0.world.borrow_mut();
                    w.current = None;
                    let meta = &mut w.tasks[t.0 as usize];
                    match res {
                        Poll::Ready(()) => {
                            meta.state = TaskState::Done;
                            w.progressed = true;
                            false
                        }
                        Poll::Pending => {
                            match meta.state {
                                TaskState::Running => meta.state = TaskState::Blocked,
                                TaskState::Done => {}
                                _ => w.progressed = true,
                            }
                            w.tasks[t.0 as usize].state != TaskState::Done
                        }
                    }
                };
                if keep {
                    self.0.futures.borrow_mut()[t.0 as usize] = Some(fut);
                } else {
                    drop(fut);
                }
            }
            let mut w = self.0.world.borrow_mut();
            if w.progressed {
                w.prune();
                let w = &mut *w;
                for &i in &w.live {
                    let meta = &mut w.tasks[i as usize];
                    if meta.state == TaskState::Blocked {
                        meta.state = TaskState::Ready;
                    }
                }
            }
        }
        let mut w = self.0.world.borrow_mut();
        let mut fresh = std::mem::take(&mut w.fresh);
        if matches!(self.0.mode, Mode::Timed) {
            fresh.shuffle(&mut w.rng);
        }
        w.queue.extend(fresh);
    }

    fn round(&self) {
        let mut w = self.0.world.borrow_mut();
        let w = &mut *w;
        let cap = w.capacity;
        for (ep, credit) in w.credit.iter_mut() {
            let bytes = cap.of(*ep).bytes as i64;
            *credit = (*credit + bytes).min(bytes);
        }
        let mut ops_used: FxHashMap<Endpoint, u32> = FxHashMap::default();
        let mut selected = Vec::new();
        for (i, op) in w.queue.iter().enumerate() {
            let ends: Vec<Endpoint> = std::iter::once(op.issuer).chain(op.req.target()).collect();
            let fits = ends.iter().all(|ep| {
                let nic = cap.of(*ep);
                let ops_ok = nic.ops == 0 || ops_used.get(ep).copied().unwrap_or(0) < nic.ops;
                let bytes_ok = nic.bytes == 0 || *w.credit.entry(*ep).or_insert(nic.bytes as i64) > 0;
                ops_ok && bytes_ok
            });
            if fits {
                let wire = op.req.wire() as i64;
                for ep in ends {
                    *ops_used.entry(ep).or_insert(0) += 1;
                    if cap.of(ep).bytes > 0 {
                        *w.credit.get_mut(&ep).unwrap() -= wire;
                    }
                }
                selected.push(i);
            }
        }
        // Interleave the sub-steps of everything served this round.
        let mut live = selected.clone();
        while !live.is_empty() {
            let pick = w.rng.random_range(0..live.len());
            let i = live[pick];
            if w.exec_step(i) {
                live.swap_remove(pick);
            }
        }
        w.finish_completed();
        w.now += 1;
        w.steps += 1;
        w.tick_gauges();
    }

    fn step(&self, dfs: &Rc<RefCell<Dfs>>) {
        let mut w = self.0.world.borrow_mut();
        let w = &mut *w;
        // The oldest op of the task stepped last comes first. Any other
        // choice while that task still has ops queued is a preemption.
        let mut order: Vec<usize> = (0..w.queue.len()).collect();
        order.sort_by_key(|&j| Some(w.queue[j].task) != w.last_stepped);
        let running = Some(w.queue[order[0]].task) == w.last_stepped;
        let i = {
            let mut dfs = dfs.borrow_mut();
            if running && dfs.out_of_preemptions() {
                order.truncate(1);
            }
            let pick = dfs.choose(order.len());
            if running && pick > 0 {
                dfs.preempted();
            }
            order[pick]
        };
        let task = w.queue[i].task;
        w.last_stepped = Some(task);
        w.exec_step(i);
        w.finish_completed();
        for &id in &w.live {
            let meta = &mut w.tasks[id as usize];
            if meta.state == TaskState::Spinning && id != task.0 {
                meta.state = TaskState::Ready;
            }
        }
        w.now += 1;
        w.steps += 1;
        w.tick_gauges();
    }

    fn fire_hooks(&self) {
        let events = std::mem::take(&mut self.0.world.borrow_mut().new_crashes);
        if events.is_empty() {
            return;
        }
        let mut hooks = std::mem::take(&mut *self.0.hooks.borrow_mut());
        for ev in &events {
            for h in hooks.iter_mut() {
                h(self, ev);
            }
        }
        let mut slot = self.0.hooks.borrow_mut();
        hooks.append(&mut slot);
        *slot = hooks;
    }

    /// Registers a callback run after every crash, outside the scheduler.
    pub fn on_crash(&self, hook: impl FnMut(&Sim, &CrashEvent) + 'static) {
        self.0.hooks.borrow_mut().push(Box::new(hook));
    }

    // ---- ops ----

    fn submit(
        &self,
        issuer: Endpoint,
        reqs: Vec<OpRequest>,
        commit: Option<CommitMark>,
        action: Option<Box<dyn FnOnce()>>,
    ) -> u64 {
        let mut w = self.0.world.borrow_mut();
        let w = &mut *w;
        let task = w.current.expect("fabric operation outside a task");
        let (conn, background) = {
            let meta = &w.tasks[task.0 as usize];
            (meta.conn, meta.background)
        };
        let networked: Vec<&OpRequest> = reqs.iter().filter(|r| r.target().is_some()).collect();
        if let Some(first) = networked.first() {
            let link = LinkClass::between(issuer, first.target().unwrap());
            let kind = first.kind();
            let class = if networked.iter().all(|r| r.kind() == kind) {
                match kind {
                    OpKind::Read => RoundClass::Read,
                    OpKind::Write => RoundClass::Write,
                    OpKind::Cas => RoundClass::Cas,
                    _ => RoundClass::Rpc,
                }
            } else {
                RoundClass::Mixed
            };
            let path = if background { Path::Background } else { Path::Critical };
            w.meter.add_round(link, class, path);
            if !background {
                w.tasks[task.0 as usize].rtts += 1;
            }
        }
        let ticket = w.next_ticket;
        w.next_ticket += 1;
        let batch = w.next_batch;
        w.next_batch += 1;
        let mut expects = Vec::with_capacity(reqs.len());
        let n = reqs.len();
        for (slot, req) in reqs.into_iter().enumerate() {
            if let Some(target) = req.target() {
                let (bytes, data) = req.sent();
                w.meter.add_sent(issuer, target, bytes, data);
            }
            expects.push(match req {
                OpRequest::Cas { expect, .. } => Some(expect),
                _ => None,
            });
            let pieces = match &req {
                OpRequest::Write { address, data, .. } => {
                    DpmImage::split_words(*address, data.len() as u64).into_iter().collect()
                }
                _ => VecDeque::new(),
            };
            w.fresh.push(InFlight {
                ticket,
                slot,
                task,
                conn,
                batch,
                issuer,
                req,
                pieces,
                written: 0,
                finished: false,
            });
        }
        w.tickets.insert(
            ticket,
            Ticket {
                task,
                results: vec![None; n],
                expects,
                remaining: n,
                last_index: 0,
                commit,
                action,
            },
        );
        w.tasks[task.0 as usize].state = TaskState::Waiting;
        ticket
    }

    fn take_ticket(&self, ticket: u64) -> Option<Vec<Result<OpOutput, FabricError>>> {
        self.0.world.borrow_mut().finished.remove(&ticket)
    }

    /// Marks the current task as spinning: in exhaustive mode it is not
    /// rescheduled until some other task takes a fabric step.
    pub fn yield_spin(&self) -> SpinYield {
        SpinYield {
            sim: self.clone(),
            yielded: false,
        }
    }

    // ---- devices ----

    pub fn device_count(&self) -> u16 {
        self.0.world.borrow().devices.len() as u16
    }

    pub fn health(&self, device: DeviceId) -> Health {
        self.0.world.borrow().devices[device as usize].health()
    }

    pub fn is_dead(&self, device: DeviceId) -> bool {
        self.health(device) == Health::Dead
    }

    pub fn is_alive(&self, device: DeviceId) -> bool {
        self.health(device) == Health::Alive
    }

    pub fn with_device<T>(&self, device: DeviceId, f: impl FnOnce(&mut DpmImage) -> T) -> T {
        f(&mut self.0.world.borrow_mut().devices[device as usize])
    }

    /// Crashes a device now, outside any schedule point.
    pub fn crash_device(&self, device: DeviceId, permanent: bool, survivors: &Survivors) -> CrashEvent {
        let ev = {
            let mut w = self.0.world.borrow_mut();
            let at = w.op_index;
            let pending = w.devices[device as usize].crash(permanent, survivors);
            let ev = CrashEvent {
                at,
                device: Some(device),
                permanent,
                pending,
            };
            w.crashes.push(ev.clone());
            w.new_crashes.push(ev.clone());
            ev
        };
        self.fire_hooks();
        ev
    }

    pub fn recover_device(&self, device: DeviceId) -> Result<(), FabricError> {
        self.0.world.borrow_mut().devices[device as usize].recover()
    }

    /// Adds crash points to the active plan.
    pub fn add_fault(&self, point: CrashPoint) {
        self.0.world.borrow_mut().faults.add(point);
    }

    pub fn crashes(&self) -> Vec<CrashEvent> {
        self.0.world.borrow().crashes.clone()
    }

    // ---- observation ----

    pub fn now(&self) -> u64 {
        self.0.world.borrow().now
    }

    /// Lets `rounds` of idle time pass. Call between runs.
    pub fn advance(&self, rounds: u64) {
        self.0.world.borrow_mut().now += rounds;
    }

    /// Index the next executed sub-operation will get.
    pub fn op_index(&self) -> u64 {
        self.0.world.borrow().op_index
    }

    pub fn meter(&self) -> Meter {
        self.0.world.borrow().meter.clone()
    }

    pub fn with_meter<T>(&self, f: impl FnOnce(&Meter) -> T) -> T {
        f(&self.0.world.borrow().meter)
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.0.world.borrow().log.clone()
    }

    pub fn commits(&self) -> Vec<CommitRecord> {
        self.0.world.borrow().commits.clone()
    }

    pub fn commit_count(&self) -> usize {
        self.0.world.borrow().commits.len()
    }

    pub fn with_commits<T>(&self, f: impl FnOnce(&[CommitRecord]) -> T) -> T {
        f(&self.0.world.borrow().commits)
    }

    pub fn count(&self, name: &str, n: u64) {
        let mut w = self.0.world.borrow_mut();
        match w.counters.get_mut(name) {
            Some(v) => *v += n,
            None => {
                w.counters.insert(name.to_string(), n);
            }
        }
    }

    pub fn counter(&self, name: &str) -> u64 {
        self.0.world.borrow().counters.get(name).copied().unwrap_or(0)
    }

    pub fn counters(&self) -> BTreeMap<String, u64> {
        self.0.world.borrow().counters.clone()
    }

    /// Adjusts a level that is integrated over time (see [`Sim::busy`]).
    pub fn gauge_add(&self, name: &str, delta: i64) {
        let mut w = self.0.world.borrow_mut();
        *w.gauges.entry(name.to_string()).or_insert(0) += delta;
    }

    /// Sum over elapsed rounds of the gauge's level.
    pub fn busy(&self, name: &str) -> u64 {
        self.0.world.borrow().busy.get(name).copied().unwrap_or(0)
    }

    pub(crate) fn note_progress(&self) {
        if let Ok(mut w) = self.0.world.try_borrow_mut() {
            w.progressed = true;
        }
    }
}

impl World {
    fn prune(&mut self) {
        let tasks = &self.tasks;
        self.live.retain(|&i| tasks[i as usize].state != TaskState::Done);
    }

    /// Executes one sub-step of queue entry `i`. Returns true when the
    /// entry has finished.
    fn exec_step(&mut self, i: usize) -> bool {
        let op = &mut self.queue[i];
        let index = self.op_index;
        self.op_index += 1;
        let (device, kind, address, len, result, done) = match &op.req {
            OpRequest::Read { device, address, len } => {
                let r = match self.devices.get_mut(*device as usize) {
                    Some(d) => d.read(op.conn, *address, *len).map(OpOutput::Read),
                    None => Err(FabricError::NoSuchDevice(*device)),
                };
                (Some(*device), OpKind::Read, *address, *len, Some(r), true)
            }
            OpRequest::Write { device, address, data } => match self.devices.get_mut(*device as usize) {
                None => (
                    Some(*device),
                    OpKind::Write,
                    *address,
                    data.len() as u64,
                    Some(Err(FabricError::NoSuchDevice(*device))),
                    true,
                ),
                Some(dev) => {
                    let checked = dev
                        .check_alive()
                        .and_then(|_| dev.check_range(*address, data.len() as u64));
                    match (checked, op.pieces.pop_front()) {
                        (Err(e), _) => (Some(*device), OpKind::Write, *address, 0, Some(Err(e)), true),
                        (Ok(()), None) => (
                            Some(*device),
                            OpKind::Write,
                            *address,
                            0,
                            Some(Ok(OpOutput::Written)),
                            true,
                        ),
                        (Ok(()), Some((at, n))) => {
                            self.seq += 1;
                            let bytes = &data[op.written..op.written + n as usize];
                            let r = dev.write_sub(op.conn, self.seq, at, bytes);
                            op.written += n as usize;
                            let done = op.pieces.is_empty() || r.is_err();
                            let result = match (r, done) {
                                (Err(e), _) => Some(Err(e)),
                                (Ok(()), true) => Some(Ok(OpOutput::Written)),
                                (Ok(()), false) => None,
                            };
                            (Some(*device), OpKind::Write, at, n, result, done)
                        }
                    }
                }
            },
            OpRequest::Cas {
                device,
                address,
                expect,
                new,
            } => {
                self.seq += 1;
                let r = match self.devices.get_mut(*device as usize) {
                    Some(d) => d.cas(op.conn, self.seq, *address, *expect, *new).map(OpOutput::Cas),
                    None => Err(FabricError::NoSuchDevice(*device)),
                };
                (Some(*device), OpKind::Cas, *address, 8, Some(r), true)
            }
            OpRequest::Rpc { request, .. } => (None, OpKind::Rpc, 0, *request, Some(Ok(OpOutput::Delivered)), true),
            OpRequest::Flush => (None, OpKind::Flush, 0, 0, Some(Ok(OpOutput::Flushed)), true),
        };
        let (task, batch, ticket, slot) = (op.task, op.batch, op.ticket, op.slot);
        if self.record_log {
            self.log.push(LogEntry {
                index,
                task,
                batch,
                device,
                kind,
                address,
                len,
                round: self.now,
            });
        }
        if let Some(r) = result {
            if let Some(t) = self.tickets.get_mut(&ticket) {
                if let Ok(OpOutput::Read(bytes)) = &r {
                    let n = bytes.len() as u64;
                    let issuer = self.queue[i].issuer;
                    self.meter
                        .add_received(issuer, Endpoint::Dpm(device.unwrap()), n, if n > 8 { n } else { 0 });
                } else if let Ok(OpOutput::Cas(_)) = &r {
                    let issuer = self.queue[i].issuer;
                    self.meter.add_received(issuer, Endpoint::Dpm(device.unwrap()), 8, 0);
                }
                t.results[slot] = Some(r);
                t.remaining -= 1;
                t.last_index = index;
            }
        }
        self.queue[i].finished = done;
        for point in self.faults.take(index) {
            let target = point.device.or(device);
            let pending = match target {
                Some(d) if (d as usize) < self.devices.len() => {
                    self.devices[d as usize].crash(point.permanent, &point.survivors)
                }
                _ => Vec::new(),
            };
            let ev = CrashEvent {
                at: index,
                device: target,
                permanent: point.permanent,
                pending,
            };
            self.crashes.push(ev.clone());
            self.new_crashes.push(ev);
        }
        done
    }

    fn finish_completed(&mut self) {
        let done_tickets: Vec<u64> = self
            .tickets
            .iter()
            .filter(|(_, t)| t.remaining == 0)
            .map(|(k, _)| *k)
            .collect();
        self.queue.retain(|op| !op.finished);
        let mut done_tickets = done_tickets;
        done_tickets.sort_unstable();
        for id in done_tickets {
            let mut t = self.tickets.remove(&id).unwrap();
            if let Some(a) = t.action.take() {
                self.due.push(a);
            }
            let results: Vec<Result<OpOutput, FabricError>> = t.results.into_iter().map(|r| r.unwrap()).collect();
            if let Some(mark) = t.commit {
                let ok = results.iter().zip(&t.expects).all(|(r, e)| match (r, e) {
                    (Ok(OpOutput::Cas(old)), Some(expect)) => old == expect,
                    (Ok(_), _) => true,
                    (Err(_), _) => false,
                });
                if ok {
                    self.commits.push(CommitRecord {
                        mark,
                        op_index: t.last_index,
                        time: self.now,
                        task: t.task,
                    });
                }
            }
            self.finished.insert(id, results);
            let meta = &mut self.tasks[t.task.0 as usize];
            if meta.state == TaskState::Waiting {
                meta.state = TaskState::Ready;
            }
        }
    }

    fn tick_gauges(&mut self) {
        for (name, level) in &self.gauges {
            if *level > 0 {
                *self.busy.entry(name.clone()).or_insert(0) += *level as u64;
            }
        }
    }
}

/// Completion handle for [`Sim::spawn_with_result`]. Awaitable from other
/// tasks.
pub struct JoinHandle<T> {
    task: TaskId,
    slot: Rc<RefCell<Option<T>>>,
}

impl<T> JoinHandle<T> {
    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn take(&self) -> Option<T> {
        self.slot.borrow_mut().take()
    }

    pub fn is_finished(&self) -> bool {
        self.slot.borrow().is_some()
    }
}

impl<T> Future for JoinHandle<T> {
    type Output = T;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<T> {
        match self.slot.borrow_mut().take() {
            Some(v) => Poll::Ready(v),
            None => Poll::Pending,
        }
    }
}

struct OpFuture {
    sim: Sim,
    issuer: Endpoint,
    reqs: Option<Vec<OpRequest>>,
    commit: Option<CommitMark>,
    action: Option<Box<dyn FnOnce()>>,
    ticket: Option<u64>,
}

impl Future for OpFuture {
    type Output = Vec<Result<OpOutput, FabricError>>;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        match self.ticket {
            None => {
                let reqs = self.reqs.take().unwrap_or_default();
                if reqs.is_empty() {
                    return Poll::Ready(Vec::new());
                }
                let commit = self.commit.take();
                let action = self.action.take();
                let t = self.sim.submit(self.issuer, reqs, commit, action);
                self.ticket = Some(t);
                Poll::Pending
            }
            Some(t) => match self.sim.take_ticket(t) {
                Some(r) => Poll::Ready(r),
                None => {
                    // Re-polled while still waiting: keep the task parked.
                    let mut w = self.sim.0.world.borrow_mut();
                    if let Some(cur) = w.current {
                        w.tasks[cur.0 as usize].state = TaskState::Waiting;
                    }
                    Poll::Pending
                }
            },
        }
    }
}

pub struct SpinYield {
    sim: Sim,
    yielded: bool,
}

impl Future for SpinYield {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.yielded || !self.sim.is_exhaustive() {
            return Poll::Ready(());
        }
        self.yielded = true;
        let mut w = self.sim.0.world.borrow_mut();
        if let Some(cur) = w.current {
            w.tasks[cur.0 as usize].state = TaskState::Spinning;
        }
        Poll::Pending
    }
}

/// An endpoint's view of the fabric.
#[derive(Clone)]
pub struct Port {
    sim: Sim,
    endpoint: Endpoint,
}

impl Port {
    pub fn new(sim: &Sim, endpoint: Endpoint) -> Port {
        Port {
            sim: sim.clone(),
            endpoint,
        }
    }

    pub fn endpoint(&self) -> Endpoint {
        self.endpoint
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    /// Issues all requests in one round; results come back in order.
    pub async fn batch(&self, reqs: Vec<OpRequest>) -> Vec<Result<OpOutput, FabricError>> {
        OpFuture {
            sim: self.sim.clone(),
            issuer: self.endpoint,
            reqs: Some(reqs),
            commit: None,
            action: None,
            ticket: None,
        }
        .await
    }

    /// Like [`Port::batch`]; if every request succeeds (and every CAS
    /// swaps) the mark is appended to the commit log.
    pub async fn batch_commit(&self, reqs: Vec<OpRequest>, mark: CommitMark) -> Vec<Result<OpOutput, FabricError>> {
        OpFuture {
            sim: self.sim.clone(),
            issuer: self.endpoint,
            reqs: Some(reqs),
            commit: Some(mark),
            action: None,
            ticket: None,
        }
        .await
    }

    async fn one(&self, req: OpRequest) -> Result<OpOutput, FabricError> {
        self.batch(vec![req]).await.pop().unwrap()
    }

    pub async fn read(&self, device: DeviceId, address: u64, len: u64) -> Result<Vec<u8>, FabricError> {
        self.one(OpRequest::Read { device, address, len })
            .await
            .map(OpOutput::into_bytes)
    }

    pub async fn read_u64(&self, device: DeviceId, address: u64) -> Result<u64, FabricError> {
        let b = self.read(device, address, 8).await?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub async fn write(&self, device: DeviceId, address: u64, data: Vec<u8>) -> Result<(), FabricError> {
        self.one(OpRequest::Write { device, address, data }).await.map(|_| ())
    }

    /// Returns the value found before the compare.
    pub async fn cas(&self, device: DeviceId, address: u64, expect: u64, new: u64) -> Result<u64, FabricError> {
        self.one(OpRequest::Cas {
            device,
            address,
            expect,
            new,
        })
        .await
        .map(|o| o.cas_old())
    }

    /// Sends a request message of `request` bytes (`data` of them payload)
    /// and waits for it to be delivered. The server logic then runs inline;
    /// its reply is metered with [`Port::rpc_reply`].
    pub async fn rpc(&self, server: Endpoint, request: u64, response: u64, data: u64) -> Result<(), FabricError> {
        self.one(OpRequest::Rpc {
            server,
            request,
            response,
            data,
        })
        .await
        .map(|_| ())
    }

    /// Meters a reply of `bytes` (`data` payload) from `server` to this
    /// endpoint. No extra round: the reply closes the request's round trip.
    pub fn rpc_reply(&self, server: Endpoint, bytes: u64, data: u64) {
        self.sim
            .0
            .world
            .borrow_mut()
            .meter
            .add_received(self.endpoint, server, bytes, data);
    }

    /// Meters a one-way message (e.g. a push notification) without a round.
    pub fn notify(&self, to: Endpoint, bytes: u64) {
        self.sim
            .0
            .world
            .borrow_mut()
            .meter
            .add_sent(self.endpoint, to, bytes, 0);
    }

    /// Local persist point; optionally the commit point of a value.
    pub async fn flush(&self, mark: Option<CommitMark>) {
        let fut = OpFuture {
            sim: self.sim.clone(),
            issuer: self.endpoint,
            reqs: Some(vec![OpRequest::Flush]),
            commit: mark,
            action: None,
            ticket: None,
        };
        fut.await;
    }

    /// Like [`Port::flush`], but `action` runs as soon as the flush executes,
    /// before any crash injected at that point is handled. Use it to model
    /// state that becomes durable at the flush.
    pub async fn persist(&self, mark: Option<CommitMark>, action: impl FnOnce() + 'static) {
        let fut = OpFuture {
            sim: self.sim.clone(),
            issuer: self.endpoint,
            reqs: Some(vec![OpRequest::Flush]),
            commit: mark,
            action: Some(Box::new(action)),
            ticket: None,
        };
        fut.await;
    }

    /// Unsignaled write: posted in the background on this task's connection.
    pub fn post_write(&self, device: DeviceId, address: u64, data: Vec<u8>) {
        let port = self.clone();
        self.sim.spawn_background(async move {
            let _ = port.write(device, address, data).await;
        });
    }

    /// Posts a batch in the background on this task's connection.
    pub fn post_batch(&self, reqs: Vec<OpRequest>) {
        let port = self.clone();
        self.sim.spawn_background(async move {
            port.batch(reqs).await;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{FaultPlan, Nic};

    fn sim(devices: u16) -> Sim {
        Sim::new(SimConfig::with_devices(devices))
    }

    #[test]
    fn write_then_read_back() {
        let s = sim(1);
        let port = Port::new(&s, Endpoint::Cn(0));
        let out = s
            .block_on(async move {
                port.write(0, 3, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10]).await.unwrap();
                port.read(0, 3, 10).await.unwrap()
            })
            .unwrap();
        assert_eq!(out, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);
        // one write split into 8-byte-bounded pieces: [3,8) [8,13)
        let log = s.log();
        assert_eq!(log.len(), 3);
        assert_eq!((log[0].address, log[0].len), (3, 5));
        assert_eq!((log[1].address, log[1].len), (8, 5));
    }

    #[test]
    fn batch_is_one_round() {
        let s = sim(2);
        let port = Port::new(&s, Endpoint::Cn(0));
        let p = port.clone();
        let h = s.spawn_with_result(async move {
            p.batch(vec![
                OpRequest::Read {
                    device: 0,
                    address: 0,
                    len: 8,
                },
                OpRequest::Read {
                    device: 1,
                    address: 0,
                    len: 8,
                },
            ])
            .await
        });
        s.run().unwrap();
        assert_eq!(h.take().unwrap().len(), 2);
        assert_eq!(s.task_rtts(h.task()), 1);
        assert_eq!(s.meter().total_rtts(), 1);
    }

    #[test]
    fn flush_costs_no_round() {
        let s = sim(1);
        let port = Port::new(&s, Endpoint::Coord);
        let p = port.clone();
        let h = s.spawn_with_result(async move {
            p.flush(Some(CommitMark {
                key: b"k".to_vec(),
                stamp: 7,
            }))
            .await
        });
        s.run().unwrap();
        assert_eq!(s.task_rtts(h.task()), 0);
        assert_eq!(s.commits().len(), 1);
        assert_eq!(s.commits()[0].mark.stamp, 7);
    }

    #[test]
    fn failed_cas_is_not_a_commit() {
        let s = sim(1);
        let port = Port::new(&s, Endpoint::Cn(0));
        s.block_on(async move {
            let mark = CommitMark { key: vec![1], stamp: 1 };
            port.batch_commit(
                vec![OpRequest::Cas {
                    device: 0,
                    address: 0,
                    expect: 5,
                    new: 6,
                }],
                mark,
            )
            .await
        })
        .unwrap();
        assert!(s.commits().is_empty());
    }

    #[test]
    fn crash_point_truncates_unconfirmed() {
        let mut cfg = SimConfig::with_devices(1);
        cfg.faults = "1".parse::<FaultPlan>().unwrap();
        let s = Sim::new(cfg);
        let port = Port::new(&s, Endpoint::Cn(0));
        let r = s.block_on(async move { port.write(0, 0, vec![9; 24]).await }).unwrap();
        // crash after the second piece: the write fails, nothing durable
        assert_eq!(r, Err(FabricError::DeviceUnavailable(0)));
        assert_eq!(s.crashes().len(), 1);
        s.recover_device(0).unwrap();
        s.with_device(0, |d| assert_eq!(d.peek(0, 24), &[0u8; 24]));
    }

    #[test]
    fn crash_hook_can_kill() {
        let mut cfg = SimConfig::with_devices(1);
        cfg.faults = "0".parse::<FaultPlan>().unwrap();
        let s = Sim::new(cfg);
        let port = Port::new(&s, Endpoint::Cn(0));
        let p = port.clone();
        let victim = s.spawn(async move {
            let _ = p.read(0, 0, 8).await;
            let _ = p.read(0, 0, 8).await;
        });
        s.on_crash(move |sim, _| sim.kill(victim));
        s.run().unwrap();
        assert!(s.is_done(victim));
        assert_eq!(s.log().len(), 1);
    }

    #[test]
    fn background_write_inherits_connection() {
        let s = sim(1);
        let port = Port::new(&s, Endpoint::Cn(0));
        let h = s.spawn_with_result({
            let port = port.clone();
            async move {
                port.post_write(0, 0, vec![4; 8]);
            }
        });
        s.run().unwrap();
        let parent = h.task();
        let conn = ConnId(parent.0);
        s.with_device(0, |d| {
            assert_eq!(d.pending_by_conn(), vec![(conn, 1)]);
        });
        assert_eq!(s.task_rtts(parent), 0);
        assert_eq!(s.meter().critical_rtts(), 0);
    }

    #[test]
    fn nic_limit_serialises_rounds() {
        let mut cfg = SimConfig::with_devices(1);
        cfg.capacity.dpm = Nic::new(1, 0);
        let s = Sim::new(cfg);
        for c in 0..4 {
            let port = Port::new(&s, Endpoint::Cn(c));
            s.spawn(async move {
                port.read(0, 0, 8).await.unwrap();
            });
        }
        s.run().unwrap();
        assert_eq!(s.now(), 4);
    }

    #[test]
    fn byte_credit_spans_rounds() {
        let mut cfg = SimConfig::with_devices(1);
        cfg.capacity.cn = Nic::new(0, 64);
        let s = Sim::new(cfg);
        let port = Port::new(&s, Endpoint::Cn(0));
        s.block_on(async move {
            for _ in 0..4 {
                port.write(0, 0, vec![1; 112]).await.unwrap();
            }
        })
        .unwrap();
        // 128 wire bytes per write against 64 bytes per round
        assert!(s.now() >= 7, "now = {}", s.now());
    }

    #[test]
    fn exhaustive_explores_both_orders() {
        use crate::fabric::explore;
        let mut outcomes = std::collections::BTreeSet::new();
        let stats = explore(SimConfig::with_devices(1), 100, |s| {
            for v in [1u64, 2] {
                let port = Port::new(s, Endpoint::Cn(v as u16));
                s.spawn(async move {
                    port.write(0, 0, v.to_le_bytes().to_vec()).await.unwrap();
                });
            }
            s.run().map_err(|e| e.to_string())?;
            outcomes.insert(s.with_device(0, |d| d.peek(0, 1)[0]));
            Ok(())
        })
        .unwrap();
        assert_eq!(stats.schedules, 2);
        assert_eq!(outcomes.into_iter().collect::<Vec<_>>(), vec![1, 2]);
    }

    /// Interleavings of two tasks of `n` ops each with at most `k`
    /// preemptions, by brute force over all placements of A's ops.
    fn bounded_interleavings(n: usize, k: usize) -> u64 {
        let mut count = 0;
        for mask in 0u32..1 << (2 * n) {
            if mask.count_ones() as usize != n {
                continue;
            }
            let seq: Vec<bool> = (0..2 * n).map(|i| mask >> i & 1 == 1).collect();
            let mut left = [n, n];
            let mut pre = 0;
            for w in seq.windows(2) {
                left[w[0] as usize] -= 1;
                if w[0] != w[1] && left[w[0] as usize] > 0 {
                    pre += 1;
                }
            }
            count += (pre <= k) as u64;
        }
        count
    }

    #[test]
    fn preemption_bound_limits_schedules() {
        use crate::fabric::explore_bounded;
        for k in 0..4 {
            let stats = explore_bounded(SimConfig::with_devices(1), k, 1000, |s| {
                for v in [1u64, 2] {
                    let port = Port::new(s, Endpoint::Cn(v as u16));
                    s.spawn(async move {
                        for a in 0..3 {
                            port.write(0, 8 * a, v.to_le_bytes().to_vec()).await.unwrap();
                        }
                    });
                }
                s.run().map_err(|e| e.to_string())
            })
            .unwrap();
            assert_eq!(stats.schedules, bounded_interleavings(3, k), "k = {k}");
        }
    }

    #[test]
    fn exhaustive_bound_reported() {
        use crate::fabric::{explore, ExploreError};
        let r = explore(SimConfig::with_devices(1), 3, |s| {
            for v in 0..3u16 {
                let port = Port::new(s, Endpoint::Cn(v));
                s.spawn(async move {
                    port.read(0, 0, 8).await.unwrap();
                });
            }
            s.run().map_err(|e| e.to_string())
        });
        assert!(matches!(r, Err(ExploreError::Sim(SimError::BoundExceeded(3)))));
    }

    #[test]
    fn spinning_task_waits_for_others() {
        use crate::fabric::explore;
        // A spins until B's flag write lands; exploration stays finite.
        let stats = explore(SimConfig::with_devices(1), 1000, |s| {
            let a = Port::new(s, Endpoint::Cn(0));
            let b = Port::new(s, Endpoint::Cn(1));
            let sim = s.clone();
            s.spawn(async move {
                while a.cas(0, 0, 1, 2).await.unwrap() != 1 {
                    sim.yield_spin().await;
                }
            });
            s.spawn(async move {
                b.write(0, 0, 1u64.to_le_bytes().to_vec()).await.unwrap();
            });
            s.run().map_err(|e| e.to_string())
        })
        .unwrap();
        assert!(stats.schedules >= 2);
    }
}
