use std::time::{Duration, Instant};

/// Computation allowance for one solve or one controller step.
///
/// `max_iterations` counts Newton iterations of the inner feasibility solver;
/// `None` in both fields means unbounded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Budget {
    pub max_iterations: Option<usize>,
    pub deadline: Option<Instant>,
}

impl Budget {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn iterations(max: usize) -> Self {
        Self {
            max_iterations: Some(max),
            deadline: None,
        }
    }

    pub fn until(deadline: Instant) -> Self {
        Self {
            max_iterations: None,
            deadline: Some(deadline),
        }
    }

    pub fn for_duration(d: Duration) -> Self {
        Self::until(Instant::now() + d)
    }

    pub fn is_zero(&self) -> bool {
        self.max_iterations == Some(0)
    }

    pub fn deadline_passed(&self) -> bool {
        self.deadline.is_some_and(|d| Instant::now() >= d)
    }

    /// Iterations left after `used` have been spent, capped at `cap`.
    pub fn remaining(&self, used: usize, cap: usize) -> usize {
        match self.max_iterations {
            Some(m) => m.saturating_sub(used).min(cap),
            None => cap,
        }
    }
}
