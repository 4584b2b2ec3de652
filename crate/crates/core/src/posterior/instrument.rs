//! Thread-local call counters backing the one-pass contract: influence
//! scoring must perform exactly one posterior update (one adaptation run or
//! one Fisher solve) however many training points it scores.

use std::cell::Cell;

thread_local! {
    static EWC_ADAPT_CALLS: Cell<u64> = const { Cell::new(0) };
    static FISHER_SOLVE_CALLS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    EWC_ADAPT_CALLS.with(|c| c.set(0));
    FISHER_SOLVE_CALLS.with(|c| c.set(0));
}

pub fn ewc_adapt_calls() -> u64 {
    EWC_ADAPT_CALLS.with(|c| c.get())
}

pub fn fisher_solve_calls() -> u64 {
    FISHER_SOLVE_CALLS.with(|c| c.get())
}

pub(crate) fn note_ewc_adapt() {
    EWC_ADAPT_CALLS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn note_fisher_solve() {
    FISHER_SOLVE_CALLS.with(|c| c.set(c.get() + 1));
}
