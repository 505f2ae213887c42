//! A per-thread tally of model work, used to give competing training
//! procedures equal compute budgets without reading the clock.

use std::cell::Cell;

thread_local! {
    static UNITS: Cell<u64> = const { Cell::new(0) };
}

/// Forward passes cost one unit per token, backward passes two.
pub(crate) fn charge(units: u64) {
    UNITS.with(|u| u.set(u.get() + units));
}

/// Units charged on this thread so far.
pub fn work_units() -> u64 {
    UNITS.with(Cell::get)
}
