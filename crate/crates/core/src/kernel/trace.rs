//! Trace records and the line-delimited JSON trace format.
//!
//! One record per line, with fields `seq`, `time`, `process`, `transition`
//! and `params`. Field order is fixed so that re-running a scenario yields a
//! byte-identical file.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ProcessId, VirtualTime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub time: VirtualTime,
    pub process: ProcessId,
    pub transition: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: sequence number {seq} does not increase")]
    NonMonotonicSeq { line: usize, seq: u64 },
    #[error("line {line}: time {time} goes backwards")]
    TimeWentBack { line: usize, time: VirtualTime },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Write events as JSON lines.
pub fn write_trace<W: Write>(mut out: W, events: &[TraceEvent]) -> std::io::Result<()> {
    for ev in events {
        serde_json::to_writer(&mut out, ev)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn trace_to_string(events: &[TraceEvent]) -> String {
    let mut buf = Vec::new();
    write_trace(&mut buf, events).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Parse a JSON-lines trace, checking seq and time monotonicity.
/// Blank lines are skipped; errors carry 1-based line numbers.
pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceEvent>, TraceError> {
    let mut events: Vec<TraceEvent> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(&line).map_err(|source| TraceError::Parse {
            line: lineno,
            source,
        })?;
        if let Some(prev) = events.last() {
            if ev.seq <= prev.seq {
                return Err(TraceError::NonMonotonicSeq {
                    line: lineno,
                    seq: ev.seq,
                });
            }
            if ev.time < prev.time {
                return Err(TraceError::TimeWentBack {
                    line: lineno,
                    time: ev.time,
                });
            }
        }
        events.push(ev);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn ev(seq: u64, time: u64) -> TraceEvent {
        TraceEvent {
            seq,
            time: VirtualTime(time),
            process: ProcessId::certifier(0),
            transition: "note".into(),
            params: json!({"x": 1}),
        }
    }

    #[test]
    fn line_format_is_stable() {
        let s = trace_to_string(&[ev(1, 0)]);
        assert_eq!(
            s,
            "{\"seq\":1,\"time\":0,\"process\":\"certifier:0\",\"transition\":\"note\",\"params\":{\"x\":1}}\n"
        );
        let back = read_trace(s.as_bytes()).unwrap();
        assert_eq!(back, vec![ev(1, 0)]);
    }

    #[test]
    fn rejects_bad_lines_with_line_number() {
        let text = format!("{}not json\n", trace_to_string(&[ev(1, 0)]));
        match read_trace(text.as_bytes()) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let text = trace_to_string(&[ev(2, 0), ev(2, 1)]);
        assert!(matches!(
            read_trace(text.as_bytes()),
            Err(TraceError::NonMonotonicSeq { line: 2, .. })
        ));
        let text = trace_to_string(&[ev(1, 5), ev(2, 1)]);
        assert!(matches!(
            read_trace(text.as_bytes()),
            Err(TraceError::TimeWentBack { line: 2, .. })
        ));
    }
}
