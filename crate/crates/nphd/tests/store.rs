use nphd::core::evalsvc::{create_session, EvalSession, ItemInput, ModelOutput, SessionRequest, VoteRecord};
use nphd::store::{parse_vote_log, valid_session_id, SessionStore, SESSION_FILE, VOTE_LOG};
use proptest::prelude::*;

fn session(id: &str) -> EvalSession {
    let req = SessionRequest {
        items: (0..3)
            .map(|i| ItemInput {
                source: format!("लेख {i}"),
                outputs: ["m1", "m2", "m3"]
                    .iter()
                    .map(|m| ModelOutput {
                        model: m.to_string(),
                        summary: format!("{m} शीर्षक {i}"),
                    })
                    .collect(),
            })
            .collect(),
        seed: 5,
        criteria: None,
    };
    create_session(id.to_string(), "2024-01-01T00:00:00Z".into(), &req).unwrap()
}

fn vote(session: &str, rater: usize, item: usize, key: &str) -> VoteRecord {
    VoteRecord {
        session_id: session.into(),
        item_id: format!("item-{}", item + 1),
        rater_id: format!("rater-{rater:04}"),
        option_key: key.into(),
        timestamp: format!("t{rater}-{item}"),
    }
}

#[test]
fn sessions_persist_and_cannot_be_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    let s = session("abc");
    store.save_session(&s).unwrap();
    assert!(store.save_session(&s).is_err());
    assert_eq!(store.load_session("abc").unwrap(), Some(s));
    assert_eq!(store.load_session("zzz").unwrap(), None);
    assert_eq!(store.session_ids().unwrap(), vec!["abc".to_string()]);
    assert!(dir.path().join("abc").join(SESSION_FILE).exists());
    assert_eq!(store.read_votes("abc").unwrap(), vec![]);
}

#[test]
fn path_like_ids_are_refused() {
    for bad in ["", "../x", "a/b", "a b", ".", &"x".repeat(65)] {
        assert!(!valid_session_id(bad), "{bad:?}");
    }
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    assert!(store.load_session("../etc").is_err());
    assert!(store.append_vote(&vote("../x", 0, 0, "A")).is_err());
}

#[test]
fn votes_append_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    store.save_session(&session("s1")).unwrap();
    let votes: Vec<_> = (0..5).map(|i| vote("s1", i, i % 3, "B")).collect();
    for v in &votes {
        store.append_vote(v).unwrap();
    }
    assert_eq!(store.read_votes("s1").unwrap(), votes);
}

#[test]
fn a_torn_tail_is_sealed_before_the_next_append() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    store.save_session(&session("s1")).unwrap();
    let first = vote("s1", 1, 0, "A");
    store.append_vote(&first).unwrap();
    let log = dir.path().join("s1").join(VOTE_LOG);
    let mut bytes = std::fs::read(&log).unwrap();
    bytes.extend_from_slice(b"{\"session_id\":\"s1\",\"ite");
    std::fs::write(&log, bytes).unwrap();
    assert_eq!(store.read_votes("s1").unwrap(), vec![first.clone()]);
    let second = vote("s1", 2, 1, "C");
    store.append_vote(&second).unwrap();
    assert_eq!(store.read_votes("s1").unwrap(), vec![first, second]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Cutting the log at any record boundary leaves a valid aggregate over
    /// exactly the surviving prefix; cutting inside a record drops only
    /// that record.
    #[test]
    fn truncated_logs_aggregate_their_surviving_prefix(
        picks in proptest::collection::vec((0usize..6, 0usize..3, 0usize..3), 1..40),
        frac in 0.0f64..1.0,
    ) {
        let s = session("s1");
        let keys = ["A", "B", "C"];
        let votes: Vec<VoteRecord> = picks.iter().map(|&(r, i, k)| vote("s1", r, i, keys[k])).collect();
        let lines: Vec<String> = votes.iter().map(|v| serde_json::to_string(v).unwrap() + "\n").collect();
        let full = lines.concat();
        for n in 0..=votes.len() {
            let prefix = lines[..n].concat();
            let agg = s.tally(&parse_vote_log(&prefix));
            prop_assert_eq!(&agg, &s.tally(&votes[..n]));
            prop_assert_eq!(agg.models.iter().map(|m| m.votes).sum::<u64>(), agg.total);
        }
        let cut = ((full.len() as f64) * frac) as usize;
        let cut = (0..=cut).rev().find(|&c| full.is_char_boundary(c)).unwrap();
        let survivors = full[..cut].matches('\n').count();
        prop_assert_eq!(parse_vote_log(&full[..cut]), votes[..survivors].to_vec());
    }
}
