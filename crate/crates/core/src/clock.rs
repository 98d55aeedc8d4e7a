//! Monotonic time sources. Timing code takes a `&dyn Clock` so benchmark
//! arithmetic can be driven by synthetic sequences in tests.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::time::{Duration, Instant};

pub trait Clock {
    /// Time since an arbitrary fixed origin. Never decreases.
    fn now(&self) -> Duration;
}

/// Wall clock backed by [`Instant`].
#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Clock that advances by a scripted list of increments, one per reading,
/// then repeats the last one. The first reading is zero.
#[derive(Debug)]
pub struct ScriptedClock {
    state: RefCell<(Duration, VecDeque<Duration>, Duration, bool)>,
}

impl ScriptedClock {
    pub fn new(steps: impl IntoIterator<Item = Duration>) -> Self {
        Self { state: RefCell::new((Duration::ZERO, steps.into_iter().collect(), Duration::ZERO, false)) }
    }

    /// A clock that never advances.
    pub fn frozen() -> Self {
        Self::new([])
    }

    /// Advances by the same step on every reading.
    pub fn constant(step: Duration) -> Self {
        Self::new([step])
    }
}

impl Clock for ScriptedClock {
    fn now(&self) -> Duration {
        let mut st = self.state.borrow_mut();
        let (t, steps, last, started) = &mut *st;
        if !*started {
            *started = true;
            return *t;
        }
        let step = steps.pop_front().unwrap_or(*last);
        *last = step;
        *t += step;
        *t
    }
}
