//! Boundary cost events, the weight table, and the accounting ledger.
//!
//! Latency in this simulator is *accounted virtual cycles*: every boundary
//! action maps to exactly one [`CostEvent`], each occurrence bumps a counter,
//! and the weight table translates counters into cycles. The weight values
//! themselves ship in `weights/default.weights` and are calibration
//! parameters, not code.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// One countable boundary action. The set is closed: everything the
/// simulator accounts maps to exactly one of these per occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CostEvent {
    /// Privilege-mode switch on kernel entry (trap path only).
    ModeSwitchEnter,
    /// Privilege-mode switch on kernel exit (trap path only).
    ModeSwitchExit,
    /// Atomic interrupt-return instruction.
    IretReturn,
    /// Plain procedure return used by the staged return protocol.
    RetReturn,
    /// Switching between stacks on a transition.
    StackSwitch,
    /// The entry bookkeeping bundle (RCU note, state save, tracking).
    EntryChecks,
    /// The exit bookkeeping bundle (resched check, signal check).
    ExitChecks,
    /// One layer of the dispatch chain between a request and the transport.
    DispatchLayer,
    /// One byte moved between application and kernel buffers.
    CopyByte,
    /// Vectoring a page fault.
    PageFaultVector,
    /// Vectoring a double fault.
    DoubleFaultVector,
    /// Waking a blocked task (wake path plus scheduling latency).
    SchedWakeup,
    /// Voluntarily descheduling a blocking task.
    SchedSleep,
}

impl CostEvent {
    pub const ALL: [CostEvent; 13] = [
        CostEvent::ModeSwitchEnter,
        CostEvent::ModeSwitchExit,
        CostEvent::IretReturn,
        CostEvent::RetReturn,
        CostEvent::StackSwitch,
        CostEvent::EntryChecks,
        CostEvent::ExitChecks,
        CostEvent::DispatchLayer,
        CostEvent::CopyByte,
        CostEvent::PageFaultVector,
        CostEvent::DoubleFaultVector,
        CostEvent::SchedWakeup,
        CostEvent::SchedSleep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostEvent::ModeSwitchEnter => "ModeSwitchEnter",
            CostEvent::ModeSwitchExit => "ModeSwitchExit",
            CostEvent::IretReturn => "IretReturn",
            CostEvent::RetReturn => "RetReturn",
            CostEvent::StackSwitch => "StackSwitch",
            CostEvent::EntryChecks => "EntryChecks",
            CostEvent::ExitChecks => "ExitChecks",
            CostEvent::DispatchLayer => "DispatchLayer",
            CostEvent::CopyByte => "CopyByte",
            CostEvent::PageFaultVector => "PageFaultVector",
            CostEvent::DoubleFaultVector => "DoubleFaultVector",
            CostEvent::SchedWakeup => "SchedWakeup",
            CostEvent::SchedSleep => "SchedSleep",
        }
    }

    pub fn from_name(name: &str) -> Option<CostEvent> {
        CostEvent::ALL.iter().copied().find(|e| e.name() == name)
    }

    fn index(self) -> usize {
        CostEvent::ALL.iter().position(|e| *e == self).unwrap()
    }
}

impl fmt::Display for CostEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WeightError {
    #[error("UnknownKey: `{0}` is not a weight-table key")]
    UnknownKey(String),
    #[error("DuplicateKey: `{0}` appears more than once")]
    DuplicateKey(String),
    #[error("BadValue: `{0}` is not `key=value` with a non-negative integer value")]
    BadValue(String),
}

/// The shipped default weight file, embedded verbatim.
pub const DEFAULT_WEIGHTS_TEXT: &str = include_str!("../../../weights/default.weights");

/// Abstract cycles per [`CostEvent`] plus the three timing knobs carried in
/// the same file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightTable {
    weights: [u64; CostEvent::ALL.len()],
    /// Loopback delivery latency in cycles.
    pub delivery_delay: u64,
    /// Cycles consumed per poll-loop iteration.
    pub poll_tick: u64,
    /// Upper bound (exclusive) of the uniform per-wakeup jitter in cycles.
    pub wake_jitter: u64,
}

impl Default for WeightTable {
    fn default() -> Self {
        let mut table = WeightTable {
            weights: [0; CostEvent::ALL.len()],
            delivery_delay: 0,
            poll_tick: 0,
            wake_jitter: 0,
        };
        table
            .apply(DEFAULT_WEIGHTS_TEXT)
            .expect("shipped default weight file must parse");
        table
    }
}

impl WeightTable {
    /// Parses a weight file, overlaying it on the shipped defaults. Keys not
    /// present keep their default value; unknown or duplicate keys are
    /// rejected.
    pub fn parse(text: &str) -> Result<WeightTable, WeightError> {
        let mut table = WeightTable::default();
        table.apply(text)?;
        Ok(table)
    }

    fn apply(&mut self, text: &str) -> Result<(), WeightError> {
        let mut seen: Vec<String> = Vec::new();
        for raw in text.lines() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| WeightError::BadValue(line.to_string()))?;
            let key = key.trim();
            let value: u64 = value
                .trim()
                .parse()
                .map_err(|_| WeightError::BadValue(line.to_string()))?;
            if seen.iter().any(|k| k == key) {
                return Err(WeightError::DuplicateKey(key.to_string()));
            }
            seen.push(key.to_string());
            if let Some(event) = CostEvent::from_name(key) {
                self.weights[event.index()] = value;
            } else {
                match key {
                    "DeliveryDelay" => self.delivery_delay = value,
                    "PollTick" => self.poll_tick = value,
                    "WakeJitter" => self.wake_jitter = value,
                    _ => return Err(WeightError::UnknownKey(key.to_string())),
                }
            }
        }
        Ok(())
    }

    pub fn weight(&self, event: CostEvent) -> u64 {
        self.weights[event.index()]
    }

    pub fn set_weight(&mut self, event: CostEvent, cycles: u64) {
        self.weights[event.index()] = cycles;
    }

    /// Canonical rendering, suitable for echoing next to run outputs.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for event in CostEvent::ALL {
            out.push_str(&format!("{}={}\n", event.name(), self.weight(event)));
        }
        out.push_str(&format!("DeliveryDelay={}\n", self.delivery_delay));
        out.push_str(&format!("PollTick={}\n", self.poll_tick));
        out.push_str(&format!("WakeJitter={}\n", self.wake_jitter));
        out
    }
}

/// Monotone counters of boundary events paired with the weight table that
/// prices them.
#[derive(Debug, Clone)]
pub struct CostLedger {
    counts: [u64; CostEvent::ALL.len()],
    weights: WeightTable,
}

impl CostLedger {
    pub fn new(weights: WeightTable) -> CostLedger {
        CostLedger {
            counts: [0; CostEvent::ALL.len()],
            weights,
        }
    }

    pub fn count(&self, event: CostEvent) -> u64 {
        self.counts[event.index()]
    }

    /// Snapshot of all non-zero counters, ordered by event.
    pub fn counts(&self) -> BTreeMap<CostEvent, u64> {
        CostEvent::ALL
            .iter()
            .copied()
            .filter(|e| self.count(*e) > 0)
            .map(|e| (e, self.count(e)))
            .collect()
    }

    pub fn weights(&self) -> &WeightTable {
        &self.weights
    }

    /// Records `n` occurrences of `event`; returns the cycles charged.
    pub fn charge_n(&mut self, event: CostEvent, n: u64) -> u64 {
        self.counts[event.index()] += n;
        n * self.weights.weight(event)
    }

    pub fn charge(&mut self, event: CostEvent) -> u64 {
        self.charge_n(event, 1)
    }

    /// Total accounted cycles: sum over events of count x weight.
    pub fn accounted_cycles(&self) -> u64 {
        CostEvent::ALL
            .iter()
            .map(|e| self.count(*e) * self.weights.weight(*e))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accounted_cycles_is_counts_times_weights() {
        let mut weights = WeightTable::default();
        weights.set_weight(CostEvent::EntryChecks, 300);
        let mut ledger = CostLedger::new(weights);
        ledger.charge_n(CostEvent::EntryChecks, 2);
        assert_eq!(
            ledger.count(CostEvent::EntryChecks) * ledger.weights().weight(CostEvent::EntryChecks),
            600
        );
    }

    #[test]
    fn empty_ledger_accounts_zero() {
        let ledger = CostLedger::new(WeightTable::default());
        assert_eq!(ledger.accounted_cycles(), 0);
        assert!(ledger.counts().is_empty());
    }

    #[test]
    fn default_file_parses_and_roundtrips() {
        let table = WeightTable::default();
        assert_eq!(table.weight(CostEvent::CopyByte), 1);
        let rendered = table.render();
        let reparsed = WeightTable::parse(&rendered).unwrap();
        assert_eq!(reparsed, table);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = WeightTable::parse("Bogus=12\n").unwrap_err();
        assert_eq!(err, WeightError::UnknownKey("Bogus".to_string()));
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = WeightTable::parse("RetReturn=1\nRetReturn=2\n").unwrap_err();
        assert_eq!(err, WeightError::DuplicateKey("RetReturn".to_string()));
    }

    #[test]
    fn bad_value_rejected() {
        assert!(matches!(
            WeightTable::parse("RetReturn=-3\n"),
            Err(WeightError::BadValue(_))
        ));
        assert!(matches!(
            WeightTable::parse("just words\n"),
            Err(WeightError::BadValue(_))
        ));
    }

    #[test]
    fn partial_file_overlays_defaults() {
        let table = WeightTable::parse("IretReturn=999\n").unwrap();
        assert_eq!(table.weight(CostEvent::IretReturn), 999);
        assert_eq!(
            table.weight(CostEvent::RetReturn),
            WeightTable::default().weight(CostEvent::RetReturn)
        );
    }
}
