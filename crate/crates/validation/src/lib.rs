//! Reporting helpers for the acceptance suite in `tests/acceptance.rs`.

use std::time::{Duration, Instant};

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: usize,
    pub title: &'static str,
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} {} [{:.1}s] {}",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.title,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

/// Runs `check`, which returns `(pass, detail)`, and fails it when it
/// exceeds `budget`.
pub fn timed(id: usize, title: &'static str, budget: Duration, check: impl FnOnce() -> (bool, String)) -> Verdict {
    let t = Instant::now();
    let (pass, mut detail) = check();
    let elapsed = t.elapsed();
    let in_time = elapsed <= budget;
    if !in_time {
        detail.push_str(&format!("; over the {:.0}s budget", budget.as_secs_f64()));
    }
    Verdict {
        id,
        title,
        pass: pass && in_time,
        detail,
        elapsed,
    }
}
