use nphd_core::corpus::make_synthetic_corpus;
use nphd_core::tokenizer::{
    collate, train_tokenizer, EncodedExample, SubwordTokenizer, TokenizerError, BOS_ID, EOS_ID, IGNORE_INDEX,
    MAX_SOURCE_LEN, MAX_TARGET_LEN, PAD_ID, UNK_ID,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Pair counts computed independently: whitespace-led chunks, character pairs.
fn brute_pair_counts(texts: &[&str]) -> BTreeMap<(char, char), usize> {
    let mut out = BTreeMap::new();
    for t in texts {
        let chars: Vec<char> = t.chars().collect();
        for w in chars.windows(2) {
            // A pair never spans the start of a new chunk.
            if !w[1].is_whitespace() {
                *out.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
    }
    out
}

fn toy() -> SubwordTokenizer {
    let texts: Vec<String> = make_synthetic_corpus(20, 3)
        .into_iter()
        .flat_map(|r| [r.body, r.headline])
        .collect();
    train_tokenizer(&texts, 400, "सारांश: ").unwrap()
}

#[test]
fn first_merge_is_the_most_frequent_pair() {
    let tok = train_tokenizer(&["कक कक"], 4 + 2 + 1, "").unwrap();
    let counts = brute_pair_counts(&["कक कक"]);
    let (&(l, r), _) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).unwrap();
    assert_eq!((l, r), ('क', 'क'));
    assert_eq!(tok.merges()[0], ("क".to_string(), "क".to_string()));
}

#[test]
fn tie_break_is_lexicographic() {
    let texts = ["खग कख"];
    let mut counts: Vec<((char, char), usize)> = brute_pair_counts(&texts).into_iter().collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let tok = train_tokenizer(&texts, 4 + 4 + 1, "").unwrap();
    let (l, r) = counts[0].0;
    assert_eq!(tok.merges()[0], (l.to_string(), r.to_string()));
}

#[test]
fn alphabet_sized_budget_learns_no_merges() {
    let tok = train_tokenizer(&["कख गघ"], 4 + 5, "").unwrap();
    assert!(tok.merges().is_empty());
    assert_eq!(tok.vocab_size(), 9);
    assert_eq!(
        train_tokenizer(&["कख गघ"], 8, ""),
        Err(TokenizerError::VocabTooSmall { requested: 8, minimum: 9 })
    );
    assert_eq!(train_tokenizer(&[""], 100, ""), Err(TokenizerError::EmptyCorpus));
}

#[test]
fn training_is_deterministic_and_ids_are_dense() {
    let a = toy();
    let b = toy();
    assert_eq!(a.merges(), b.merges());
    assert_eq!(a.to_json(), b.to_json());
    let mut ids: Vec<u32> = a.vocab().values().copied().collect();
    ids.extend([PAD_ID, UNK_ID, BOS_ID, EOS_ID]);
    ids.sort();
    assert_eq!(ids, (0..a.vocab_size() as u32).collect::<Vec<_>>());
}

#[test]
fn encode_adds_markers_prefix_and_truncates() {
    let tok = toy();
    assert_eq!(tok.encode("", usize::MAX, false), vec![BOS_ID, EOS_ID]);
    let with = tok.encode("नेपाल", usize::MAX, true);
    assert_eq!(tok.decode(&with), format!("{}नेपाल", tok.task_prefix()));
    let long = "क ".repeat(30);
    assert!(tok.encode(&long, usize::MAX, false).len() >= 25);
    assert_eq!(tok.encode(&long, 20, false).len(), 20);
    let t = tok.encode_target("क ख", 20);
    assert_eq!(*t.last().unwrap(), EOS_ID);
    assert_ne!(t[0], BOS_ID);
    assert_eq!(tok.encode("Z", 10, false), vec![BOS_ID, UNK_ID, EOS_ID]);
}

#[test]
fn round_trip_on_corpus_text() {
    let tok = toy();
    for r in make_synthetic_corpus(20, 3) {
        assert_eq!(tok.decode(&tok.encode(&r.body, usize::MAX, false)), r.body);
        assert_eq!(tok.decode(&tok.encode_target(&r.headline, usize::MAX)), r.headline);
    }
}

#[test]
fn truncation_fuzz() {
    let tok = toy();
    let alphabet: Vec<char> = tok.vocab().keys().filter_map(|k| {
        let mut c = k.chars();
        match (c.next(), c.next()) {
            (Some(ch), None) => Some(ch),
            _ => None,
        }
    }).chain(['Z', '9', '\n']).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10_000 {
        let len = if rng.gen_bool(0.1) { rng.gen_range(1000..3000) } else { rng.gen_range(0..80) };
        let text: String = (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
        let ex = tok.encode_example(&text, &text, MAX_SOURCE_LEN, MAX_TARGET_LEN);
        assert!(ex.input_ids.len() <= MAX_SOURCE_LEN);
        assert!(ex.label_ids.len() <= MAX_TARGET_LEN);
    }
}

#[test]
fn collate_pads_to_the_batch_maximum() {
    let ex = |s: usize, t: usize| EncodedExample {
        input_ids: (10..10 + s as u32).collect(),
        label_ids: (20..20 + t as u32).collect(),
    };
    let b = collate(&[ex(3, 2), ex(5, 4)], PAD_ID, IGNORE_INDEX).unwrap();
    assert_eq!(b.source_width(), 5);
    assert_eq!(b.attention_mask[0], vec![1, 1, 1, 0, 0]);
    assert_eq!(b.input_ids[0], vec![10, 11, 12, PAD_ID, PAD_ID]);
    assert_eq!(b.labels[0], vec![20, 21, IGNORE_INDEX, IGNORE_INDEX]);
    let single = collate(&[ex(3, 2)], PAD_ID, IGNORE_INDEX).unwrap();
    assert_eq!(single.input_ids[0], vec![10, 11, 12]);
    assert_eq!(single.labels[0], vec![20, 21]);
    assert_eq!(collate(&[], PAD_ID, IGNORE_INDEX), Err(TokenizerError::EmptyBatch));
}

#[test]
fn json_round_trip_and_validation() {
    let tok = toy();
    let back = SubwordTokenizer::from_json(&tok.to_json()).unwrap();
    assert_eq!(back, tok);
    assert_eq!(back.hash(), tok.hash());
    let bumped = tok.to_json().replacen("\"version\": 1", "\"version\": 2", 1);
    assert_eq!(SubwordTokenizer::from_json(&bumped), Err(TokenizerError::Version(2)));
    assert!(matches!(SubwordTokenizer::from_json("{"), Err(TokenizerError::Format(_))));
}

proptest! {
    #[test]
    fn encode_never_exceeds_max_len(text in "[कखगघ नेपाल]{0,60}", max_len in 0usize..30) {
        let tok = train_tokenizer(&["कखगघ नेपाल"], 40, "").unwrap();
        prop_assert!(tok.encode(&text, max_len, true).len() <= max_len);
        prop_assert!(tok.encode_target(&text, max_len).len() <= max_len);
    }

    #[test]
    fn decode_inverts_encode_in_alphabet(text in "[कखगघ नेपाल]{0,60}") {
        let tok = train_tokenizer(&["कखगघ नेपाल कख"], 30, "").unwrap();
        prop_assert_eq!(tok.decode(&tok.encode(&text, usize::MAX, false)), text);
    }

    #[test]
    fn collation_width_is_batch_local(lens in proptest::collection::vec((1usize..40, 1usize..20), 1..8)) {
        let exs: Vec<EncodedExample> = lens.iter().map(|&(s, t)| EncodedExample {
            input_ids: vec![5; s],
            label_ids: vec![6; t],
        }).collect();
        let b = collate(&exs, PAD_ID, IGNORE_INDEX).unwrap();
        prop_assert_eq!(b.source_width(), lens.iter().map(|l| l.0).max().unwrap());
        prop_assert_eq!(b.target_width(), lens.iter().map(|l| l.1).max().unwrap());
        for (ids, mask) in b.input_ids.iter().zip(&b.attention_mask) {
            for (&i, &m) in ids.iter().zip(mask) {
                prop_assert_eq!(m == 1, i != PAD_ID);
            }
        }
    }
}
