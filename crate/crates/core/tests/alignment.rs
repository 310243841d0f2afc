mod common;

use bimflow_core::align::providers::Embedder;
use bimflow_core::align::{apply_alignment, build_alignment_dictionary, AlignmentConfig};
use bimflow_core::{Prefix, RawSession};
use common::criteria::{alignment_table, alignment_table_rows};
use common::*;

#[test]
fn table_rows_map_to_their_canonical_names() {
    let o = alignment_table();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn lowercase_lookup_hits_the_polish_roof_row() {
    let rows = embedding_rows();
    assert_eq!(rows[17].text, "Create Roof");
    let e = embedder();
    assert_eq!(e.embed("create roof").unwrap(), e.embed("Create Roof").unwrap());
}

fn table_sessions() -> Vec<RawSession> {
    let entries = alignment_table_rows()
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let mut e = entry("t1", t as i64, Prefix::Event, &r.name);
            e.command_id = r.id;
            e.language = r.lang.clone();
            e
        })
        .collect();
    vec![RawSession::new("t1", entries)]
}

#[test]
fn dictionary_is_independent_of_input_order() {
    let fwd = table_sessions();
    let mut rev = fwd.clone();
    rev[0].entries.reverse();
    let cfg = AlignmentConfig::default();
    let (a, _) = build_alignment_dictionary(&fwd, &cfg, &translator(), &embedder()).unwrap();
    let (b, _) = build_alignment_dictionary(&rev, &cfg, &translator(), &embedder()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn applying_rewrites_every_message() {
    let sessions = table_sessions();
    let (mut dict, _) = build_alignment_dictionary(&sessions, &AlignmentConfig::default(), &translator(), &embedder()).unwrap();
    let out = apply_alignment(&sessions, &mut dict, &translator()).unwrap();
    let got: Vec<&str> = out[0].entries.iter().map(|e| e.message.as_str()).collect();
    let want: Vec<String> = alignment_table_rows().into_iter().map(|r| r.aligned).collect();
    assert_eq!(got, want);
}
