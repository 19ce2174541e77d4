//! Local (non-fabric) synchronisation between simulated tasks.
//!
//! These guard state that lives on one endpoint, such as a coordinator's
//! metadata. Waiting tasks are parked by the scheduler and re-polled when
//! something else makes progress.

use std::cell::RefCell;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll};

use super::Sim;

#[derive(Default)]
struct MutexState {
    locked: bool,
}

#[derive(Clone)]
pub struct SimMutex {
    sim: Sim,
    state: Rc<RefCell<MutexState>>,
}

pub struct SimMutexGuard {
    sim: Sim,
    state: Rc<RefCell<MutexState>>,
}

impl SimMutex {
    pub fn new(sim: &Sim) -> Self {
        SimMutex {
            sim: sim.clone(),
            state: Rc::default(),
        }
    }

    pub fn try_lock(&self) -> Option<SimMutexGuard> {
        let mut s = self.state.borrow_mut();
        if s.locked {
            return None;
        }
        s.locked = true;
        Some(SimMutexGuard {
            sim: self.sim.clone(),
            state: self.state.clone(),
        })
    }

    pub fn lock(&self) -> impl Future<Output = SimMutexGuard> + '_ {
        Acquire(move || self.try_lock())
    }
}

impl Drop for SimMutexGuard {
    fn drop(&mut self) {
        self.state.borrow_mut().locked = false;
        self.sim.note_progress();
    }
}

#[derive(Default)]
struct RwState {
    readers: u32,
    writer: bool,
}

/// Reader-writer lock. Waiting writers do not block new readers.
#[derive(Clone)]
pub struct SimRwLock {
    sim: Sim,
    state: Rc<RefCell<RwState>>,
}

pub struct SimReadGuard {
    sim: Sim,
    state: Rc<RefCell<RwState>>,
}

pub struct SimWriteGuard {
    sim: Sim,
    state: Rc<RefCell<RwState>>,
}

impl SimRwLock {
    pub fn new(sim: &Sim) -> Self {
        SimRwLock {
            sim: sim.clone(),
            state: Rc::default(),
        }
    }

    pub fn try_read(&self) -> Option<SimReadGuard> {
        let mut s = self.state.borrow_mut();
        if s.writer {
            return None;
        }
        s.readers += 1;
        Some(SimReadGuard {
            sim: self.sim.clone(),
            state: self.state.clone(),
        })
    }

    pub fn try_write(&self) -> Option<SimWriteGuard> {
        let mut s = self.state.borrow_mut();
        if s.writer || s.readers > 0 {
            return None;
        }
        s.writer = true;
        Some(SimWriteGuard {
            sim: self.sim.clone(),
            state: self.state.clone(),
        })
    }

    pub fn read(&self) -> impl Future<Output = SimReadGuard> + '_ {
        Acquire(move || self.try_read())
    }

    pub fn write(&self) -> impl Future<Output = SimWriteGuard> + '_ {
        Acquire(move || self.try_write())
    }
}

impl Drop for SimReadGuard {
    fn drop(&mut self) {
        self.state.borrow_mut().readers -= 1;
        self.sim.note_progress();
    }
}

impl Drop for SimWriteGuard {
    fn drop(&mut self) {
        self.state.borrow_mut().writer = false;
        self.sim.note_progress();
    }
}

struct SemState {
    available: u32,
    total: u32,
    gauge: Option<String>,
}

/// Counting semaphore. With a gauge name, the number of held permits is
/// integrated over time and readable through [`Sim::busy`].
#[derive(Clone)]
pub struct SimSemaphore {
    sim: Sim,
    state: Rc<RefCell<SemState>>,
}

pub struct SimSemaphorePermit {
    sim: Sim,
    state: Rc<RefCell<SemState>>,
}

impl SimSemaphore {
    pub fn new(sim: &Sim, permits: u32, gauge: Option<&str>) -> Self {
        SimSemaphore {
            sim: sim.clone(),
            state: Rc::new(RefCell::new(SemState {
                available: permits,
                total: permits,
                gauge: gauge.map(str::to_string),
            })),
        }
    }

    pub fn available(&self) -> u32 {
        self.state.borrow().available
    }

    pub fn total(&self) -> u32 {
        self.state.borrow().total
    }

    pub fn try_acquire(&self) -> Option<SimSemaphorePermit> {
        let gauge = {
            let mut s = self.state.borrow_mut();
            if s.available == 0 {
                return None;
            }
            s.available -= 1;
            s.gauge.clone()
        };
        if let Some(g) = gauge {
            self.sim.gauge_add(&g, 1);
        }
        Some(SimSemaphorePermit {
            sim: self.sim.clone(),
            state: self.state.clone(),
        })
    }

    pub fn acquire(&self) -> impl Future<Output = SimSemaphorePermit> + '_ {
        Acquire(move || self.try_acquire())
    }
}

impl Drop for SimSemaphorePermit {
    fn drop(&mut self) {
        let gauge = {
            let mut s = self.state.borrow_mut();
            s.available += 1;
            s.gauge.clone()
        };
        if let Some(g) = gauge {
            self.sim.gauge_add(&g, -1);
        }
        self.sim.note_progress();
    }
}

struct Acquire<F>(F);

impl<T, F: FnMut() -> Option<T> + Unpin> Future for Acquire<F> {
    type Output = T;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<T> {
        match (self.0)() {
            Some(g) => Poll::Ready(g),
            None => Poll::Pending,
        }
    }
}
