mod common;

use bimflow_core::io::{event_from_json, parse_log_stream, LogFormat};
use bimflow_core::redundancy::AssociationStats;
use bimflow_core::CoreError;
use common::criteria::{pipeline_fixture, run_log_compare};
use common::*;

#[test]
fn fixture_matches_every_golden_stage() {
    let o = pipeline_fixture();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn raw_support_of_symbol_pair() {
    let stats = AssociationStats::count(&log_compare_sessions(), 10);
    assert_eq!(stats.support_pair_ratio("Tool: Symbol", "Event: Create Symbol").unwrap(), (2, 16));
}

#[test]
fn symbol_tool_confidence_after_tracking() {
    let run = run_log_compare();
    let c = run.stats.confidence("Tool: Symbol", "Event: Create Symbol").unwrap();
    assert!((c - 0.5).abs() < 1e-12, "{c}");
}

#[test]
fn one_corrupt_line_is_counted_not_fatal() {
    let f = std::fs::File::open(fixture("three_lines.jsonl")).unwrap();
    let (entries, report) = parse_log_stream(f, LogFormat::Jsonl).unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!((report.read, report.accepted, report.rejected), (3, 2, 1));
}

#[test]
fn live_event_validation_lists_every_bad_field() {
    let v = serde_json::json!({ "ts": "yesterday", "prefix": "Tool", "message": "" });
    match event_from_json(&v, "s") {
        Err(CoreError::Validation(fields)) => {
            let names: Vec<&str> = fields.iter().map(|f| f.field.as_str()).collect();
            assert_eq!(names.len(), 3, "{names:?}");
            for f in ["ts", "category", "message"] {
                assert!(names.contains(&f), "{names:?}");
            }
        }
        other => panic!("expected validation error, got {other:?}"),
    }
    let ok = serde_json::json!({ "ts": "2024-05-06T08:00:00Z", "category": "Tool", "prefix": "Tool", "message": "Wall" });
    let e = event_from_json(&ok, "s").unwrap();
    assert_eq!((e.command_id, e.language.as_str(), e.session_id.as_str()), (0, "und", "s"));
}
