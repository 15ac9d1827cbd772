mod common;

use lexcon::constraints::{
    build_constraint_kv, classify_target_tokens, format_constraint_records,
    parse_constraint_file, parse_constraint_records, read_constraint_records,
    vectorize_constraints, write_constraint_file, ConstraintSet, RawConstraint,
};
use lexcon::datapipe::{learn_bpe, BpeModel, PhrasePair};
use lexcon::Error;
use proptest::prelude::*;

const BEATLES: &str = r#"[{"src": "Beatles", "tgt": "Beatles"}, {"src": "band", "tgt": "乐团"}]"#;

fn bpe() -> BpeModel {
    learn_bpe(["Beatles band", "乐 团 Beatles"], 0).unwrap()
}

#[test]
fn beatles_record_tokenizes_to_two_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    std::fs::write(&p, format!("{BEATLES}\n[]\n")).unwrap();
    let sets = parse_constraint_file(&p, &bpe()).unwrap();
    assert_eq!(sets.len(), 2);
    assert_eq!(sets[0].len(), 2);
    assert!(sets[1].is_empty());
    let band = &sets[0].pairs()[1];
    assert_eq!(band.raw_target, "乐团");
    let v = bpe();
    assert_eq!(v.vocab().tokens_for(&band.target_tokens), vec!["乐@@", "团"]);
    assert_eq!(sets[0].total_target_len(), "Beatles".len() + 2);
}

#[test]
fn classify_covers_every_subword_of_a_target() {
    let b = bpe();
    let set = ConstraintSet::from_raw(&[RawConstraint { src: "band".into(), tgt: "乐团".into() }], &b).unwrap();
    let y = b.encode("Beatles 乐团");
    let marks = classify_target_tokens(&y, &set);
    let n = y.len();
    assert_eq!(marks[n - 2..], [true, true]);
    assert!(marks[..n - 2].iter().all(|m| !m));
    assert!(classify_target_tokens(&y, &ConstraintSet::empty()).iter().all(|m| !m));
}

#[test]
fn unknown_characters_in_constraints_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    std::fs::write(&p, "[]\n[{\"src\": \"band\", \"tgt\": \"乐队\"}]\n").unwrap();
    assert!(matches!(parse_constraint_file(&p, &bpe()), Err(Error::UnknownSymbol { .. })));
}

#[test]
fn malformed_lines_report_their_number() {
    for bad in [
        "[]\n[]\n[{\"src\": \"band\"}]\n",
        "[]\n[]\n[{\"src\": \"band\", \"tgt\": \" \"}]\n",
        "[]\n[]\nnot json\n",
        "[]\n[]\n[{\"src\": \"a\", \"tgt\": \"b\", \"x\": 1}]\n",
    ] {
        assert!(matches!(parse_constraint_records(bad), Err(Error::Parse { line: 3, .. })), "{bad}");
    }
    assert!(matches!(
        read_constraint_records(std::path::Path::new("/nonexistent/c.jsonl")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn phrase_pairs_become_records() {
    let p = PhrasePair {
        source_span: (0, 1),
        target_span: (2, 3),
        source: vec!["a".into(), "b".into()],
        target: vec!["x".into(), "y".into()],
    };
    assert_eq!(RawConstraint::from(&p), RawConstraint { src: "a b".into(), tgt: "x y".into() });
}

#[test]
fn empty_sides_are_rejected() {
    assert!(ConstraintSet::from_ids(&[(&[], &[4])]).is_err());
    assert!(ConstraintSet::from_ids(&[(&[4], &[])]).is_err());
}

#[test]
fn kv_rows_match_phrase_lengths() {
    let model = common::tiny_model(12, 3);
    let set = ConstraintSet::from_ids(&[(&[3, 4], &[5]), (&[6], &[7, 8, 9])]).unwrap();
    let kv = build_constraint_kv(&model, &set).unwrap();
    assert_eq!(kv.boundaries, vec![0..2, 2..3]);
    assert_eq!(kv.keys.cols(), 3);
    assert_eq!(kv.values.cols(), 3);
    let vecs = vectorize_constraints(&model, &set).unwrap();
    assert_eq!(vecs[1].0.cols(), 1);
    assert_eq!(vecs[1].1.cols(), 3);
}

fn word() -> impl Strategy<Value = String> {
    "[a-z乐团]{1,4}"
}

proptest! {
    #[test]
    fn record_files_roundtrip(records in prop::collection::vec(
        prop::collection::vec((prop::collection::vec(word(), 1..3), prop::collection::vec(word(), 1..3)), 0..4),
        0..5,
    )) {
        let records: Vec<Vec<RawConstraint>> = records
            .into_iter()
            .map(|r| r.into_iter().map(|(s, t)| RawConstraint { src: s.join(" "), tgt: t.join(" ") }).collect())
            .collect();
        let text = format_constraint_records(&records);
        prop_assert_eq!(&parse_constraint_records(&text).unwrap(), &records);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_constraint_file(&p, &records).unwrap();
        prop_assert_eq!(read_constraint_records(&p).unwrap(), records);
    }
}
