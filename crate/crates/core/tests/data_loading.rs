use std::path::PathBuf;

use cmc_core::data::{load_corpus, load_coqa, load_quac};
use cmc_core::{AnswerType, DatasetMode, Error, CANNOTANSWER};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn coqa_file_loads_with_unicode_offsets() {
    let c = load_coqa(&fixture("coqa_mini.json")).unwrap();
    assert_eq!(c.mode, DatasetMode::Coqa);
    assert_eq!(c.dialogues.len(), 2);
    assert_eq!(c.num_questions(), 6);
    let d = &c.dialogues[0];
    assert_eq!(d.domain, "mctest");
    // Articles do not count toward F1, so the shortest best span drops "a".
    assert_eq!(d.span_text(1), Some("café"));
    assert_eq!(d.turns[0].answers, vec!["a café"]);
    assert_eq!(d.span_text(2), Some("Lyon"));
    assert_eq!(d.span_text(3), Some("Her brother Max"));
    assert_eq!(d.turns[3].answer_type, AnswerType::No);
    assert_eq!(d.span_text(4), Some("They closed on Sundays."));
    let d = &c.dialogues[1];
    assert_eq!(d.span_text(1), Some("three"));
    assert_eq!(d.turns[1].answer_type, AnswerType::Unanswerable);
    assert_eq!(d.turns[1].span, None);
}

#[test]
fn quac_file_loads_with_sentinel() {
    let c = load_quac(&fixture("quac_mini.json")).unwrap();
    let d = &c.dialogues[0];
    assert!(d.paragraph.ends_with(CANNOTANSWER));
    assert_eq!(d.span_text(1), Some("Charles Babbage"));
    assert_eq!(d.span_text(2), Some("the first published algorithm"));
    assert_eq!(d.span_text(3), Some(CANNOTANSWER));
    assert_eq!(d.turns[2].answer_type, AnswerType::Unanswerable);
}

#[test]
fn cache_is_detected_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let c = load_corpus(&fixture("coqa_mini.json"), DatasetMode::Coqa).unwrap();
    let cache = dir.path().join("cache.json");
    c.save_cache(&cache).unwrap();
    assert_eq!(load_corpus(&cache, DatasetMode::Coqa).unwrap(), c);
}

#[test]
fn missing_and_malformed_files_report_the_path() {
    let err = load_corpus(&fixture("nope.json"), DatasetMode::Quac).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert!(err.to_string().contains("nope.json"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"data\": [").unwrap();
    let err = load_corpus(&bad, DatasetMode::Coqa).unwrap_err().to_string();
    assert!(err.contains("bad.json"), "{err}");

    // A QuAC file read as CoQA lacks the CoQA fields.
    assert!(load_corpus(&fixture("quac_mini.json"), DatasetMode::Coqa).is_err());
}
