use std::fs::{self, OpenOptions};
use std::io::Write;
use std::thread;

use proptest::prelude::*;
use trapline_core::annotation::{read_store_snapshot, AnnotationDraft, AnnotationStore, EventSchema, LOG_FILE_NAME};

fn schema() -> EventSchema {
    EventSchema::parse("event basking\nevent mating id-required\n").unwrap()
}

fn draft(id: &str, start: usize, author: &str) -> AnnotationDraft {
    AnnotationDraft {
        annotation_id: id.into(),
        recording_id: "B03-O-20210314".into(),
        start_frame: start,
        end_frame: start + 3,
        event: "basking".into(),
        animal_id: None,
        author: author.into(),
    }
}

#[test]
fn concurrent_writers_lose_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let store = AnnotationStore::open(tmp.path(), schema()).unwrap();
    thread::scope(|s| {
        for t in 0..8 {
            let store = &store;
            s.spawn(move || {
                for i in 0..25 {
                    store.upsert(draft(&format!("t{t}-{i}"), i, "g")).unwrap();
                    store.upsert(draft("shared", i, &format!("g{t}"))).unwrap();
                }
            });
        }
    });
    assert_eq!(store.get("shared").unwrap().revision, 200);
    let live = store.current();
    assert_eq!(live.len(), 201);
    drop(store);

    let reopened = AnnotationStore::open(tmp.path(), schema()).unwrap();
    assert_eq!(reopened.current(), live);
    assert_eq!(read_store_snapshot(tmp.path()).unwrap(), live);
    let lines = fs::read_to_string(tmp.path().join(LOG_FILE_NAME)).unwrap().lines().count();
    assert_eq!(lines, 1 + 400);
}

#[test]
fn crash_mid_append_keeps_acknowledged_edits() {
    let tmp = tempfile::tempdir().unwrap();
    let store = AnnotationStore::open(tmp.path(), schema()).unwrap();
    store.upsert(draft("a", 1, "g")).unwrap();
    store.upsert(draft("b", 2, "g")).unwrap();
    store.delete("a", "g").unwrap();
    let acknowledged = store.current();
    drop(store);

    let mut f = OpenOptions::new()
        .append(true)
        .open(tmp.path().join(LOG_FILE_NAME))
        .unwrap();
    f.write_all(b"b,B03-O-20210314,9,9,bask").unwrap();
    drop(f);

    let store = AnnotationStore::open(tmp.path(), schema()).unwrap();
    assert_eq!(store.current(), acknowledged);
    let saved = store.upsert(draft("b", 5, "g")).unwrap();
    assert_eq!(saved.revision, 2);
    drop(store);
    let store = AnnotationStore::open(tmp.path(), schema()).unwrap();
    assert_eq!(store.get("b").unwrap().start_frame, 5);
    assert!(store.get("a").is_none());
}

#[derive(Debug, Clone)]
enum Op {
    Upsert(u8, usize),
    Delete(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0u8..6, 0usize..100).prop_map(|(id, start)| Op::Upsert(id, start)),
        1 => (0u8..6).prop_map(Op::Delete),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The folded log after a reopen always equals the in-memory state it
    /// was built from, whatever mix of edits and deletions produced it.
    #[test]
    fn reopen_equals_live_state(ops in prop::collection::vec(op(), 0..40)) {
        let tmp = tempfile::tempdir().unwrap();
        let store = AnnotationStore::open(tmp.path(), schema()).unwrap();
        for op in &ops {
            match op {
                Op::Upsert(id, start) => {
                    store.upsert(draft(&format!("x{id}"), *start, "p")).unwrap();
                }
                Op::Delete(id) => {
                    let _ = store.delete(&format!("x{id}"), "p");
                }
            }
        }
        let live = store.current();
        drop(store);
        let reopened = AnnotationStore::open(tmp.path(), schema()).unwrap();
        prop_assert_eq!(reopened.current(), live);
    }
}
