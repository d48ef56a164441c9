//! Wire traces: newline-delimited records of unframed payloads.
//!
//! Line format: `<direction> <seconds> <base64 payload>` where direction is
//! `to_server` or `from_server` and seconds is wall-clock time since the
//! recording started, strictly increasing per direction.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use thiserror::Error;

use crate::protocol::{self, PerceptorSnapshot};
use crate::sexpr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ToServer,
    FromServer,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ToServer => "to_server",
            Direction::FromServer => "from_server",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub direction: Direction,
    pub time: f64,
    pub payload: Vec<u8>,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.6} {}",
            self.direction.as_str(),
            self.time,
            STANDARD.encode(&self.payload)
        )
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl TraceRecord {
    pub fn parse_line(text: &str, line: usize) -> Result<Self, TraceError> {
        let bad = |reason: String| TraceError::Malformed { line, reason };
        let mut parts = text.split_ascii_whitespace();
        let direction = match parts.next() {
            Some("to_server") => Direction::ToServer,
            Some("from_server") => Direction::FromServer,
            other => return Err(bad(format!("unknown direction {other:?}"))),
        };
        let time: f64 = parts
            .next()
            .and_then(|t| t.parse().ok())
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| bad("missing or invalid time".into()))?;
        let payload = parts
            .next()
            .ok_or_else(|| bad("missing payload".into()))
            .and_then(|p| {
                STANDARD
                    .decode(p)
                    .map_err(|e| bad(format!("bad base64: {e}")))
            })?;
        if parts.next().is_some() {
            return Err(bad("trailing fields".into()));
        }
        Ok(TraceRecord {
            direction,
            time,
            payload,
        })
    }
}

struct TapInner {
    out: Box<dyn Write + Send>,
    start: Instant,
    /// Last timestamp per direction, microseconds.
    last: [Option<u64>; 2],
    failed: bool,
    records: usize,
}

/// Shared trace sink; cloneable so several connections can write into one file.
#[derive(Clone)]
pub struct TraceTap(Arc<Mutex<TapInner>>);

impl TraceTap {
    pub fn new(out: impl Write + Send + 'static) -> Self {
        TraceTap(Arc::new(Mutex::new(TapInner {
            out: Box::new(out),
            start: Instant::now(),
            last: [None; 2],
            failed: false,
            records: 0,
        })))
    }

    pub fn record(&self, direction: Direction, payload: &[u8]) {
        let mut inner = self.0.lock().unwrap();
        let slot = direction as usize;
        let mut us = inner.start.elapsed().as_micros() as u64;
        if let Some(last) = inner.last[slot] {
            us = us.max(last + 1);
        }
        inner.last[slot] = Some(us);
        let t = us as f64 / 1e6;
        let rec = TraceRecord {
            direction,
            time: t,
            payload: payload.to_vec(),
        };
        if writeln!(inner.out, "{rec}").is_err() {
            if !inner.failed {
                inner.failed = true;
                log::warn!("trace write failed; further records dropped");
            }
        } else {
            inner.records += 1;
        }
    }

    /// Records written so far.
    pub fn records(&self) -> usize {
        self.0.lock().unwrap().records
    }

    pub fn flush(&self) -> io::Result<()> {
        self.0.lock().unwrap().out.flush()
    }
}

/// Outcome of replaying a trace.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ReplaySummary {
    pub records: usize,
    pub to_server: usize,
    pub from_server: usize,
    /// One line per decoded perceptor payload.
    pub cycles: Vec<String>,
}

/// Re-parses every payload in a trace. Server payloads are decoded as
/// perceptor snapshots; agent payloads must parse and carry only known
/// commands with valid arguments. Stops at the first offending line.
pub fn replay<R: BufRead>(input: R) -> Result<ReplaySummary, TraceError> {
    let mut summary = ReplaySummary::default();
    let mut previous: Option<PerceptorSnapshot> = None;
    let mut last_time = [f64::NEG_INFINITY; 2];

    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = TraceRecord::parse_line(&line, lineno)?;
        let bad = |reason: String| TraceError::Malformed {
            line: lineno,
            reason,
        };
        let slot = rec.direction as usize;
        if rec.time <= last_time[slot] {
            return Err(bad(format!(
                "time {} not after {}",
                rec.time, last_time[slot]
            )));
        }
        last_time[slot] = rec.time;
        summary.records += 1;
        match rec.direction {
            Direction::FromServer => {
                summary.from_server += 1;
                let snap = protocol::decode_snapshot(&rec.payload, previous.as_ref())
                    .map_err(|e| bad(e.to_string()))?;
                summary.cycles.push(snap.summary());
                previous = Some(snap);
            }
            Direction::ToServer => {
                summary.to_server += 1;
                let exprs = sexpr::parse(&rec.payload).map_err(|e| bad(e.to_string()))?;
                protocol::validate_agent_commands(&exprs).map_err(|e| bad(e.to_string()))?;
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_line_round_trips() {
        let rec = TraceRecord {
            direction: Direction::ToServer,
            time: 1.5,
            payload: b"(syn)".to_vec(),
        };
        let line = rec.to_string();
        assert_eq!(line, "to_server 1.500000 KHN5bik=");
        assert_eq!(TraceRecord::parse_line(&line, 1).unwrap(), rec);
    }

    #[test]
    fn corrupted_base64_reports_line() {
        let text = "to_server 0.1 KHN5bik=\nfrom_server 0.2 !!notbase64!!\n";
        let err = replay(text.as_bytes()).unwrap_err();
        assert!(
            matches!(err, TraceError::Malformed { line: 2, .. }),
            "{err}"
        );
    }

    #[test]
    fn tap_timestamps_strictly_increase() {
        #[derive(Clone, Default)]
        struct Sink(Arc<Mutex<Vec<u8>>>);
        impl Write for Sink {
            fn write(&mut self, b: &[u8]) -> io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let sink = Sink::default();
        let tap = TraceTap::new(sink.clone());
        for _ in 0..50 {
            tap.record(Direction::ToServer, b"(syn)");
        }
        let text = String::from_utf8(sink.0.lock().unwrap().clone()).unwrap();
        let summary = replay(text.as_bytes()).unwrap();
        assert_eq!(summary.to_server, 50);
    }

    #[test]
    fn out_of_order_time_rejected() {
        let text = "to_server 0.2 KHN5bik=\nto_server 0.1 KHN5bik=\n";
        assert!(matches!(
            replay(text.as_bytes()),
            Err(TraceError::Malformed { line: 2, .. })
        ));
    }
}
