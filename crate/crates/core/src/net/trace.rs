//! Append-only event trace.
//!
//! Every line is `time_ms host direction summary` with a fixed field order,
//! so identical (config, seed) replays can be compared byte for byte.
//! Recording can be switched off for bulk batch runs; counters elsewhere do
//! not depend on it.

use std::fmt::Write as _;

/// What happened to the packet at this host, from the host's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Host put the packet on a link.
    Tx,
    /// Packet was delivered to the host.
    Rx,
    /// Packet was dropped in flight by the link's loss process.
    Lost,
    /// Packet was refused at the link because the source was spoofed on a
    /// link that does not permit spoofing.
    Filtered,
    /// Host-internal disposition worth auditing (discards, state changes).
    Note,
}

impl Direction {
    #[must_use]
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Tx => "tx",
            Direction::Rx => "rx",
            Direction::Lost => "lost",
            Direction::Filtered => "filtered",
            Direction::Note => "note",
        }
    }
}

#[derive(Debug, Default)]
pub struct Trace {
    enabled: bool,
    lines: Vec<String>,
}

impl Trace {
    #[must_use]
    pub fn new(enabled: bool) -> Trace {
        Trace { enabled, lines: Vec::new() }
    }

    #[must_use]
    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&mut self, t: u64, host: &str, dir: Direction, summary: &str) {
        if !self.enabled {
            return;
        }
        let mut line = String::with_capacity(summary.len() + host.len() + 16);
        let _ = write!(line, "{t} {host} {} {summary}", dir.as_str());
        self.lines.push(line);
    }

    #[must_use]
    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// All lines joined with newlines, trailing newline included; the byte
    /// string golden tests compare.
    #[must_use]
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }
}

/// Drop the `ipid=N` field from a trace line. Hardened IPID policies are
/// expected to change nothing else about benign traffic, and the functional
/// equivalence tests compare traces through this filter.
#[must_use]
pub fn line_without_ipid(line: &str) -> String {
    match line.find(" ipid=") {
        None => line.to_string(),
        Some(start) => {
            let rest = &line[start + 1..];
            // cut " ipid=N", keeping the following separator if any
            let end = rest.find(' ').map_or(line.len(), |e| start + 1 + e);
            format!("{}{}", &line[..start], &line[end..])
        }
    }
}
