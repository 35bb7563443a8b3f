//! Thread-local counter of attention-score entries materialized during a
//! forward pass. One entry is one (query, key) pair, independent of the
//! number of heads.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MeterReading {
    /// Largest count within a single attention block.
    pub peak_block: u64,
    /// Sum over every block since the last reset.
    pub total: u64,
}

thread_local! {
    static CURRENT: Cell<u64> = const { Cell::new(0) };
    static READING: Cell<MeterReading> = const { Cell::new(MeterReading { peak_block: 0, total: 0 }) };
}

pub fn reset() {
    CURRENT.with(|c| c.set(0));
    READING.with(|r| r.set(MeterReading::default()));
}

/// Marks the start of a new attention block.
pub fn begin_block() {
    CURRENT.with(|c| c.set(0));
}

pub(crate) fn record(pairs: u64) {
    let current = CURRENT.with(|c| {
        let v = c.get() + pairs;
        c.set(v);
        v
    });
    READING.with(|r| {
        let mut reading = r.get();
        reading.total += pairs;
        reading.peak_block = reading.peak_block.max(current);
        r.set(reading);
    });
}

pub fn reading() -> MeterReading {
    READING.with(Cell::get)
}
