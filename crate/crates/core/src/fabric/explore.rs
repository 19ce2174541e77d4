//! Stateless exhaustive exploration of schedules by re-execution.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Sim, SimConfig, SimError};

/// Depth-first choice stack shared between runs.
#[derive(Debug, Default)]
pub struct Dfs {
    stack: Vec<(usize, usize)>,
    pos: usize,
    /// Preemptions allowed per schedule; `None` is unbounded.
    budget: Option<usize>,
    used: usize,
}

impl Dfs {
    pub(crate) fn choose(&mut self, options: usize) -> usize {
        debug_assert!(options > 0);
        if options == 1 {
            return 0;
        }
        let pick = if self.pos < self.stack.len() {
            let (chosen, n) = self.stack[self.pos];
            assert_eq!(n, options, "non-deterministic scenario under exhaustive exploration");
            chosen
        } else {
            self.stack.push((0, options));
            0
        };
        self.pos += 1;
        pick
    }

    pub(crate) fn out_of_preemptions(&self) -> bool {
        self.budget.is_some_and(|b| self.used >= b)
    }

    pub(crate) fn preempted(&mut self) {
        self.used += 1;
    }

    /// Moves to the next unexplored schedule; false when exhausted.
    fn advance(&mut self) -> bool {
        self.pos = 0;
        self.used = 0;
        while let Some((chosen, n)) = self.stack.pop() {
            if chosen + 1 < n {
                self.stack.push((chosen + 1, n));
                return true;
            }
        }
        false
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExploreStats {
    pub schedules: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ExploreError {
    #[error("schedule {schedule}: {message}")]
    Violation { schedule: u64, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Runs `body` once per distinct interleaving. `body` builds the scenario
/// on the fresh simulator it is given, runs it, and checks the outcome.
/// Fails with `BoundExceeded` when more than `bound` schedules exist.
pub fn explore<F>(config: SimConfig, bound: u64, body: F) -> Result<ExploreStats, ExploreError>
where
    F: FnMut(&Sim) -> Result<(), String>,
{
    explore_with(config, None, bound, body)
}

/// Like [`explore`], but only over schedules that preempt at most
/// `preemptions` times. Stepping anything but the oldest queued op of the
/// task stepped last is a preemption; switches forced by a task blocking
/// or finishing are free.
pub fn explore_bounded<F>(
    config: SimConfig,
    preemptions: usize,
    bound: u64,
    body: F,
) -> Result<ExploreStats, ExploreError>
where
    F: FnMut(&Sim) -> Result<(), String>,
{
    explore_with(config, Some(preemptions), bound, body)
}

fn explore_with<F>(
    config: SimConfig,
    budget: Option<usize>,
    bound: u64,
    mut body: F,
) -> Result<ExploreStats, ExploreError>
where
    F: FnMut(&Sim) -> Result<(), String>,
{
    let dfs = Rc::new(RefCell::new(Dfs {
        budget,
        ..Dfs::default()
    }));
    let mut stats = ExploreStats::default();
    loop {
        if stats.schedules >= bound {
            return Err(SimError::BoundExceeded(bound).into());
        }
        let sim = Sim::exhaustive(config.clone(), dfs.clone());
        body(&sim).map_err(|message| ExploreError::Violation {
            schedule: stats.schedules,
            message,
        })?;
        stats.schedules += 1;
        if !dfs.borrow_mut().advance() {
            return Ok(stats);
        }
    }
}
