//! Strategy selection. `Auto` starts on the ID graph and compares, over
//! windows of [`WINDOW`] deltas, the bytes each strategy writes or would
//! have written.

use serde::{Deserialize, Serialize};

use super::Strategy;

pub const WINDOW: usize = 8;
pub const TO_SERIAL: f64 = 0.9;
pub const TO_IDGRAPH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyChoice {
    Serial,
    IdGraph,
    Auto,
}

impl std::str::FromStr for StrategyChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "serial" => Ok(StrategyChoice::Serial),
            "idgraph" | "id-graph" => Ok(StrategyChoice::IdGraph),
            "auto" => Ok(StrategyChoice::Auto),
            other => Err(format!("unknown strategy `{other}` (serial, idgraph, auto)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StrategySelector {
    choice: StrategyChoice,
    current: Strategy,
    idgraph_bytes: u64,
    serial_bytes: u64,
    filled: usize,
    /// Window ratios, for reporting.
    pub ratios: Vec<f64>,
}

impl StrategySelector {
    pub fn new(choice: StrategyChoice) -> Self {
        StrategySelector {
            choice,
            current: match choice {
                StrategyChoice::Serial => Strategy::Serial,
                StrategyChoice::IdGraph | StrategyChoice::Auto => Strategy::IdGraph,
            },
            idgraph_bytes: 0,
            serial_bytes: 0,
            filled: 0,
            ratios: Vec::new(),
        }
    }

    pub fn choice(&self) -> StrategyChoice {
        self.choice
    }

    pub fn current(&self) -> Strategy {
        self.current
    }

    /// Records one delta's measured or estimated sizes under both
    /// strategies. Fixed choices ignore the input.
    pub fn record(&mut self, idgraph_bytes: u64, serial_bytes: u64) {
        if self.choice != StrategyChoice::Auto {
            return;
        }
        self.idgraph_bytes += idgraph_bytes;
        self.serial_bytes += serial_bytes;
        self.filled += 1;
        if self.filled < WINDOW {
            return;
        }
        let r = self.idgraph_bytes as f64 / self.serial_bytes.max(1) as f64;
        self.ratios.push(r);
        if r > TO_SERIAL {
            self.current = Strategy::Serial;
        } else if r < TO_IDGRAPH {
            self.current = Strategy::IdGraph;
        }
        self.idgraph_bytes = 0;
        self.serial_bytes = 0;
        self.filled = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_choices_never_switch() {
        let mut s = StrategySelector::new(StrategyChoice::Serial);
        for _ in 0..20 {
            s.record(1, 1000);
        }
        assert_eq!(s.current(), Strategy::Serial);
        let mut s = StrategySelector::new(StrategyChoice::IdGraph);
        for _ in 0..20 {
            s.record(1000, 1);
        }
        assert_eq!(s.current(), Strategy::IdGraph);
    }

    #[test]
    fn auto_hysteresis() {
        let mut s = StrategySelector::new(StrategyChoice::Auto);
        assert_eq!(s.current(), Strategy::IdGraph);
        for _ in 0..WINDOW - 1 {
            s.record(100, 100);
        }
        assert_eq!(s.current(), Strategy::IdGraph, "no decision before a full window");
        s.record(100, 100);
        assert_eq!(s.current(), Strategy::Serial);
        // 0.7 is inside the band: stay.
        for _ in 0..WINDOW {
            s.record(70, 100);
        }
        assert_eq!(s.current(), Strategy::Serial);
        for _ in 0..WINDOW {
            s.record(40, 100);
        }
        assert_eq!(s.current(), Strategy::IdGraph);
        assert_eq!(s.ratios.len(), 3);
    }
}
