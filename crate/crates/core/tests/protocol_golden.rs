mod common;

use std::fs;
use std::io::BufReader;

use rcgym::protocol::{encode_effectors, parse_agent_commands, AgentCommand, EffectorBatch};
use rcgym::trace::{self, Direction, TraceRecord};

#[test]
fn effector_encodings_match_golden_strings() {
    let cases = common::effector_cases();
    assert!(cases.len() >= 8);
    for c in cases {
        let got = encode_effectors(&c.batch);
        match &c.expected {
            Some(bytes) => assert_eq!(
                got.as_deref().unwrap(),
                &bytes[..],
                "effectors.txt line {}",
                c.line
            ),
            None => assert!(got.is_err(), "effectors.txt line {} should be rejected", c.line),
        }
    }
}

#[test]
fn committed_traces_replay_cleanly() {
    let paths = common::golden_traces();
    assert!(!paths.is_empty());
    for p in paths {
        let summary = trace::replay(BufReader::new(fs::File::open(&p).unwrap()))
            .unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(summary.to_server > 0 && summary.from_server > 0, "{}", p.display());
        assert_eq!(summary.cycles.len(), summary.from_server);
    }
}

#[test]
fn recorded_effector_payloads_reencode_byte_for_byte() {
    let mut checked = 0;
    for p in common::golden_traces() {
        for (i, line) in fs::read_to_string(&p).unwrap().lines().enumerate() {
            let rec = TraceRecord::parse_line(line, i + 1).unwrap();
            if rec.direction != Direction::ToServer {
                continue;
            }
            let cmds = parse_agent_commands(&rec.payload).unwrap();
            if !cmds.iter().all(|c| matches!(c, AgentCommand::Velocity { .. } | AgentCommand::Sync)) {
                continue;
            }
            let mut batch = EffectorBatch::new(cmds.contains(&AgentCommand::Sync));
            for c in &cmds {
                if let AgentCommand::Velocity { joint, deg_per_s } = c {
                    batch.set(*joint, *deg_per_s);
                }
            }
            assert_eq!(encode_effectors(&batch).unwrap(), rec.payload, "{}:{}", p.display(), i + 1);
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn corrupted_trace_reports_its_line() {
    let p = &common::golden_traces()[0];
    let mut lines: Vec<String> = fs::read_to_string(p).unwrap().lines().map(String::from).collect();
    lines[6] = lines[6].replace(' ', " !!").to_string();
    let err = trace::replay(lines.join("\n").as_bytes()).unwrap_err();
    assert!(err.to_string().starts_with("line 7:"), "{err}");
}
