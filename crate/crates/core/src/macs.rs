//! Multiply-accumulate counter instrumented into matmul and conv2d.
//!
//! Counting convention: one MAC per multiply inside a contraction, at the
//! nominal contraction size (zero-padded border taps of a convolution count
//! like any other tap, matching the usual FLOP-counter convention). Biases,
//! softmax, norms, activations, and elementwise arithmetic are not counted.
//! Only op forwards count; backward passes never touch the counter.
//!
//! The counter is invocation-local (thread-local): reset it, run one
//! forward, read it. Nothing is shared across threads.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Add `n` MACs to the current thread's counter.
pub fn add(n: u64) {
    MACS.with(|m| m.set(m.get().wrapping_add(n)));
}

/// Reset the counter to zero.
pub fn reset() {
    MACS.with(|m| m.set(0));
}

/// Current counter value.
pub fn total() -> u64 {
    MACS.with(|m| m.get())
}

/// Run `f` and return its result together with the MACs it executed.
/// The surrounding count is preserved.
pub fn scoped<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = total();
    let out = f();
    let after = total();
    (out, after - before)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoped_isolates_and_preserves() {
        reset();
        add(7);
        let ((), inner) = scoped(|| add(5));
        assert_eq!(inner, 5);
        assert_eq!(total(), 12);
    }
}
