use std::collections::HashSet;

use lexcon::datapipe::{
    code_switch_corpus, debpe, debpe_line, extract_phrase_pairs, gen_toy_corpus, is_consistent,
    learn_bpe, sample_constraints, seeded_rng, AlignmentLinks, BpeModel, ParallelCorpus,
    PhrasePair, SentencePair, ToyConfig, ToyCorpus,
};
use lexcon::Error;
use proptest::prelude::*;

fn toy(sentences: usize, synonyms: usize, seed: u64) -> ToyCorpus {
    gen_toy_corpus(&ToyConfig {
        sentences,
        synonyms,
        seed,
        ..ToyConfig::default()
    })
    .unwrap()
}

fn bpe_for(c: &ParallelCorpus, merges: i64) -> BpeModel {
    let lines: Vec<String> = c.source_lines().chain(c.target_lines()).collect();
    learn_bpe(lines.iter().map(String::as_str), merges).unwrap()
}

fn sampled(t: &ToyCorpus, seed: u64) -> Vec<Vec<PhrasePair>> {
    let links = t.corpus.links.as_ref().unwrap();
    t.corpus
        .pairs
        .iter()
        .zip(links)
        .enumerate()
        .map(|(i, (p, l))| {
            sample_constraints(&extract_phrase_pairs(p, l, 3), &mut seeded_rng(seed, i as u64))
        })
        .collect()
}

#[test]
fn toy_corpus_is_reproducible_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let files = |tag: &str| {
        let t = toy(300, 3, 9);
        let p = |ext: &str| dir.path().join(format!("{tag}.{ext}"));
        t.corpus.save(&p("src"), &p("tgt"), Some(&p("align"))).unwrap();
        ["src", "tgt", "align"].map(|e| std::fs::read(p(e)).unwrap())
    };
    assert_eq!(files("a"), files("b"));
    let t = toy(300, 3, 9);
    let d = dir.path();
    let back = ParallelCorpus::load(&d.join("a.src"), &d.join("a.tgt"), Some(&d.join("a.align"))).unwrap();
    assert_eq!(back, t.corpus);
    assert_ne!(toy(300, 3, 10).corpus, t.corpus);
}

#[test]
fn toy_targets_are_lexicon_images_of_linked_words() {
    let t = toy(500, 3, 2);
    for (p, l) in t.corpus.pairs.iter().zip(t.corpus.links.as_ref().unwrap()) {
        assert_eq!(p.source.len(), p.target.len());
        assert_eq!(l.len(), p.source.len());
        for (i, j) in l.iter() {
            assert!(t.translations(&p.source[i]).unwrap().contains(&p.target[j]));
        }
    }
    let images: Vec<&String> = t.lexicon.iter().flat_map(|(_, v)| v).collect();
    let distinct: HashSet<&String> = images.iter().copied().collect();
    assert_eq!(images.len(), distinct.len());
    assert!(images.iter().all(|w| w.chars().count() == 1));
}

#[test]
fn no_swaps_gives_diagonal_links() {
    let t = gen_toy_corpus(&ToyConfig {
        swap_rate: 0.0,
        sentences: 50,
        ..ToyConfig::default()
    })
    .unwrap();
    for (p, l) in t.corpus.pairs.iter().zip(t.corpus.links.as_ref().unwrap()) {
        assert_eq!(*l, AlignmentLinks::identity(p.source.len()));
    }
}

#[test]
fn toy_config_errors() {
    let bad = |c: ToyConfig| gen_toy_corpus(&c).is_err();
    assert!(bad(ToyConfig { vocab_size: 9, ..ToyConfig::default() }));
    assert!(bad(ToyConfig { synonyms: 200, ..ToyConfig::default() }));
}

#[test]
fn bpe_roundtrips_the_toy_corpus() {
    let t = toy(2000, 3, 1);
    let bpe = bpe_for(&t.corpus, 300);
    for line in t.corpus.source_lines().chain(t.corpus.target_lines()) {
        let seg = bpe.segment(&line);
        assert!(!seg.lossy);
        assert_eq!(debpe_line(&seg.tokens), line);
        let ids = bpe.encode(&line);
        assert!(!ids.contains(&0));
        assert_eq!(debpe_line(&bpe.vocab().tokens_for(&ids)), line);
    }
}

#[test]
fn bpe_model_file_roundtrip() {
    let t = toy(300, 3, 1);
    let bpe = bpe_for(&t.corpus, 100);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bpe.txt");
    bpe.save(&p).unwrap();
    let back = BpeModel::load(&p).unwrap();
    assert_eq!(back, bpe);
    std::fs::write(&p, "#bpe v1\n#alphabet ab\na b c\n").unwrap();
    assert!(matches!(BpeModel::load(&p), Err(Error::Parse { line: 3, .. })));
}

#[test]
fn split_word_rejoins_and_unknown_characters_are_flagged() {
    let bpe = learn_bpe(["乐 团", "披头士"], 0).unwrap();
    let seg = bpe.segment("乐团");
    assert_eq!(seg.tokens, vec!["乐@@", "团"]);
    assert_eq!(debpe(&seg.tokens), vec!["乐团"]);
    let seg = bpe.segment("乐队");
    assert!(seg.lossy);
    assert!(bpe.encode("乐队").contains(&0));
    assert!(matches!(bpe.encode_strict("乐队"), Err(Error::UnknownSymbol { .. })));
}

#[test]
fn continuation_mask_marks_glued_pieces() {
    let bpe = learn_bpe(["乐 团", "披头士"], 0).unwrap();
    let mask = bpe.continuation_mask();
    let v = bpe.vocab();
    assert!(mask[v.id("乐@@")]);
    assert!(!mask[v.id("团")]);
    assert!(!mask[v.eos()]);
}

/// Consistency restated link by link.
fn box_ok(links: &AlignmentLinks, s: (usize, usize), t: (usize, usize)) -> bool {
    let ls: Vec<(usize, usize)> = links.iter().collect();
    let within = |x: usize, r: (usize, usize)| r.0 <= x && x <= r.1;
    ls.iter().any(|&(i, j)| within(i, s) && within(j, t))
        && ls.iter().all(|&(i, j)| within(i, s) == within(j, t))
}

fn links_strategy() -> impl Strategy<Value = (usize, usize, Vec<(usize, usize)>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(n, m)| {
        (Just(n), Just(m), prop::collection::vec((0..n, 0..m), 0..8))
    })
}

proptest! {
    #[test]
    fn extraction_is_exactly_the_consistent_boxes((n, m, raw) in links_strategy()) {
        let links = AlignmentLinks::new(raw, n, m).unwrap();
        let pair = SentencePair {
            source: (0..n).map(|i| format!("s{i}")).collect(),
            target: (0..m).map(|j| format!("t{j}")).collect(),
        };
        let got: HashSet<_> = extract_phrase_pairs(&pair, &links, 3)
            .into_iter()
            .map(|p| {
                assert_eq!(p.source, pair.source[p.source_span.0..=p.source_span.1]);
                assert_eq!(p.target, pair.target[p.target_span.0..=p.target_span.1]);
                (p.source_span, p.target_span)
            })
            .collect();
        let mut want = HashSet::new();
        for i1 in 0..n {
            for i2 in i1..n.min(i1 + 3) {
                for j1 in 0..m {
                    for j2 in j1..m.min(j1 + 3) {
                        if box_ok(&links, (i1, i2), (j1, j2)) {
                            want.insert(((i1, i2), (j1, j2)));
                        }
                    }
                }
            }
        }
        for &(s, t) in &got {
            prop_assert!(is_consistent(&links, s, t));
        }
        prop_assert_eq!(got, want);
    }

    #[test]
    fn sampled_constraints_obey_the_protocol(seed in any::<u64>(), (n, m, raw) in links_strategy()) {
        let links = AlignmentLinks::new(raw, n, m).unwrap();
        let pair = SentencePair {
            source: (0..n).map(|i| format!("s{i}")).collect(),
            target: (0..m).map(|j| format!("t{j}")).collect(),
        };
        let cands = extract_phrase_pairs(&pair, &links, 3);
        let picked = sample_constraints(&cands, &mut seeded_rng(seed, 0));
        prop_assert!(picked.len() <= 3);
        for (a, p) in picked.iter().enumerate() {
            prop_assert!((1..=3).contains(&p.source_len()) && (1..=3).contains(&p.target_len()));
            prop_assert!(cands.contains(p));
            for q in &picked[a + 1..] {
                prop_assert!(!p.overlaps(q));
            }
        }
        prop_assert_eq!(picked, sample_constraints(&cands, &mut seeded_rng(seed, 0)));
    }
}

#[test]
fn toy_sampling_never_exceeds_three() {
    let t = toy(10_000, 3, 1);
    let s = sampled(&t, 5);
    assert!(s.iter().all(|c| c.len() <= 3));
    assert!(s.iter().any(|c| c.len() == 3) && s.iter().any(|c| c.is_empty()));
}

#[test]
fn crossing_links_give_words_or_the_whole_box() {
    let pair = SentencePair::from_lines("a b", "x y");
    let links = AlignmentLinks::new([(0, 1), (1, 0)], 2, 2).unwrap();
    let cands = extract_phrase_pairs(&pair, &links, 3);
    assert_eq!(cands.len(), 3);
    for i in 0..50 {
        let picked = sample_constraints(&cands, &mut seeded_rng(1, i));
        assert!(picked.len() <= 2);
        assert!(picked.len() < 2 || picked.iter().all(|p| p.source_len() == 1));
    }
}

#[test]
fn code_switch_limits() {
    let t = toy(400, 3, 3);
    let cons = sampled(&t, 4);
    let none = code_switch_corpus(&t.corpus, &cons, 1, 0.0).unwrap();
    assert_eq!(none.corpus.pairs, t.corpus.pairs);
    assert_eq!(none.switched, 0);
    let all = code_switch_corpus(&t.corpus, &cons, 1, 1.0).unwrap();
    assert_eq!(all.switched, all.total);
    for (p, cs) in all.corpus.pairs.iter().zip(&all.constraints) {
        for c in cs {
            assert_eq!(c.target, c.source);
            assert_eq!(p.target[c.target_span.0..=c.target_span.1], c.source[..]);
        }
    }
    assert_eq!(code_switch_corpus(&t.corpus, &cons, 1, 0.5).unwrap(), code_switch_corpus(&t.corpus, &cons, 1, 0.5).unwrap());
    assert!(code_switch_corpus(&t.corpus, &cons, 1, 1.5).is_err());
}

#[test]
fn code_switch_fraction_concentrates() {
    let t = toy(8000, 3, 5);
    let cons = sampled(&t, 6);
    let s = code_switch_corpus(&t.corpus, &cons, 7, 0.5).unwrap();
    assert!(s.total >= 10_000, "{} constraints", s.total);
    let f = s.switched as f64 / s.total as f64;
    assert!((0.47..=0.53).contains(&f), "{f}");
}

#[test]
fn code_switch_missing_span_names_the_sentence() {
    let pair = SentencePair::from_lines("a b", "x y");
    let c = PhrasePair {
        source_span: (0, 0),
        target_span: (1, 1),
        source: vec!["a".into()],
        target: vec!["x".into()],
    };
    let err = code_switch_corpus(&ParallelCorpus::new(vec![pair]), &[vec![c]], 1, 0.5).unwrap_err();
    assert!(err.to_string().contains("sentence 0"));
}

#[test]
fn pharaoh_links() {
    let l = AlignmentLinks::parse_pharaoh("0-1 1-0", 2, 2).unwrap();
    assert!(l.contains(0, 1) && l.contains(1, 0) && !l.contains(0, 0));
    assert_eq!(l.to_pharaoh(), "0-1 1-0");
    assert!(AlignmentLinks::parse_pharaoh("0-5", 2, 2).is_err());
    assert!(AlignmentLinks::parse_pharaoh("0:1", 2, 2).is_err());
}
