use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use trapline_core::annotation::{AnnotationStore, EventSchema, FrameService};
use trapline_core::reid::{Prediction, Ranked, SuggestionRecord};
use trapline_core::segmenter::{Segment, Source};
use trapline_core::videopack::{encode_day, plan_day, Encoder};
use trapline_core::{canonical_name, BurrowId, CaptureMeta, RecordingId, View};
use trapline_server::{router, AppState, RecordingSummary, CAPTURE_TIME_HEADER};

const REC: &str = "B07-O-20210314";

fn app(dir: &Path, videos: &Path) -> (Router, Arc<AppState>) {
    let schema = EventSchema::parse("event basking\nevent mating id-required\n").unwrap();
    let state = Arc::new(AppState {
        store: AnnotationStore::open(dir, schema).unwrap(),
        frames: FrameService::new(videos.to_path_buf(), Encoder::from_env()),
    });
    (router(state.clone()), state)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, axum::http::HeaderMap) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, headers)
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn body(start: usize, end: usize, event: &str, animal: Option<&str>) -> Value {
    json!({
        "recording_id": REC,
        "start_frame": start,
        "end_frame": end,
        "event": event,
        "animal_id": animal,
        "author": "grader1",
    })
}

#[tokio::test]
async fn schema_lists_configured_and_implicit_events() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path(), dir.path());
    let (status, bytes, _) = call(&app, "GET", "/api/schema", None).await;
    assert_eq!(status, StatusCode::OK);
    let events = json_of(&bytes);
    let names: Vec<&str> = events
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["animal-present", "basking", "mating"]);
    assert_eq!(events[2]["id_required"], true);
}

#[tokio::test]
async fn annotation_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(dir.path(), dir.path());

    let (status, bytes, _) = call(&app, "PUT", "/api/annotations/a1", Some(body(10, 20, "basking", None))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&bytes)["revision"], 1);

    let (status, bytes, _) = call(&app, "PUT", "/api/annotations/a1", Some(body(10, 25, "mating", Some("T04")))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&bytes)["revision"], 2);

    let (_, bytes, _) = call(&app, "GET", &format!("/api/recordings/{REC}/segments"), None).await;
    let list = json_of(&bytes);
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["end_frame"], 25);
    assert_eq!(list[0]["animal_id"], "T04");

    let (status, bytes, _) = call(&app, "PUT", "/api/annotations/a2", Some(body(1, 2, "mating", None))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(json_of(&bytes)["error"].as_str().unwrap().contains("animal_id"));
    assert!(state.store.get("a2").is_none());

    let mut mismatched = body(1, 2, "basking", None);
    mismatched["annotation_id"] = json!("other");
    let (status, _, _) = call(&app, "PUT", "/api/annotations/a3", Some(mismatched)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _, _) = call(&app, "DELETE", "/api/annotations/a1?author=grader2", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (_, bytes, _) = call(&app, "GET", &format!("/api/recordings/{REC}/segments"), None).await;
    assert!(json_of(&bytes).as_array().unwrap().is_empty());
    let (status, _, _) = call(&app, "DELETE", "/api/annotations/a1", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _, _) = call(&app, "GET", "/api/recordings/not-a-recording/segments", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn concurrent_edits_get_distinct_revisions() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(dir.path(), dir.path());
    let mut handles = Vec::new();
    for i in 0..24 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            let (status, bytes, _) = call(&app, "PUT", "/api/annotations/shared", Some(body(i, i + 5, "basking", None))).await;
            assert_eq!(status, StatusCode::OK);
            json_of(&bytes)["revision"].as_u64().unwrap()
        }));
    }
    let mut revisions = Vec::new();
    for h in handles {
        revisions.push(h.await.unwrap());
    }
    revisions.sort();
    assert_eq!(revisions, (1..=24).collect::<Vec<u64>>());
    assert_eq!(state.store.get("shared").unwrap().revision, 24);
}

#[tokio::test]
async fn suggestions_and_recording_list() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(dir.path(), dir.path());
    let uri = format!("/api/recordings/{REC}/suggestions?frame=12");

    let (status, bytes, _) = call(&app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    let r = json_of(&bytes);
    assert_eq!(r["available"], false);
    assert!(r["suggestions"].as_array().unwrap().is_empty());

    state
        .store
        .import_segments(&[Segment::new(REC, 10, 30, Source::Auto)], chrono::Utc::now())
        .unwrap();
    let ranked = (0..5)
        .map(|i| Ranked {
            individual_id: format!("T{i:02}"),
            distance: 0.1 * i as f64,
        })
        .collect();
    state
        .store
        .store_suggestions(
            REC,
            &[SuggestionRecord {
                recording_id: REC.into(),
                frame_index: 15,
                detection: 0,
                prediction: Prediction { ranked },
            }],
        )
        .unwrap();

    let (_, bytes, _) = call(&app, "GET", &uri, None).await;
    let r = json_of(&bytes);
    assert_eq!(r["available"], true);
    assert_eq!(r["sampled_frame"], 15);
    let s = r["suggestions"].as_array().unwrap();
    assert_eq!(s.len(), 5);
    assert_eq!(s[0]["individual_id"], "T00");

    let (_, bytes, _) = call(&app, "GET", &format!("/api/recordings/{REC}/suggestions?frame=31"), None).await;
    assert!(json_of(&bytes)["suggestions"].as_array().unwrap().is_empty());

    let (_, bytes, _) = call(&app, "GET", "/api/recordings", None).await;
    let list: Vec<RecordingSummary> = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(
        list,
        vec![RecordingSummary {
            recording_id: REC.into(),
            annotations: 1,
            video_available: false,
        }]
    );
}

fn write_day(archive: &Path, frames: usize) -> RecordingId {
    let rec: RecordingId = REC.parse().unwrap();
    let dir = archive.join(rec.archive_dir());
    std::fs::create_dir_all(&dir).unwrap();
    let start = rec.date.and_hms_opt(7, 0, 0).unwrap();
    for i in 0..frames {
        let meta = CaptureMeta::new(
            BurrowId::new("B07").unwrap(),
            View::Overhead,
            start + chrono::Duration::seconds(5 * i as i64),
        );
        let img = image::RgbImage::from_fn(64, 48, |x, y| image::Rgb([(x * 4) as u8, (y * 5) as u8, (i * 20) as u8]));
        img.save(dir.join(canonical_name(&meta))).unwrap();
    }
    rec
}

#[tokio::test]
async fn frames_are_served_as_stable_jpeg() {
    let encoder = Encoder::from_env();
    if let Err(e) = encoder.check_available() {
        eprintln!("skipping frame test, no encoder: {e}");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let archive = dir.path().join("archive");
    let videos = dir.path().join("videos");
    std::fs::create_dir_all(&videos).unwrap();
    let rec = write_day(&archive, 10);
    let (plan, _) = plan_day(&archive, &rec, 30).unwrap();
    encode_day(&plan, &videos.join(format!("{rec}.mp4")), &encoder).unwrap();
    let (app, _) = app(&dir.path().join("store"), &videos);

    let uri = format!("/api/recordings/{REC}/frames/3");
    let (status, first, headers) = call(&app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/jpeg");
    assert_eq!(headers[CAPTURE_TIME_HEADER], "2021-03-14T07:00:15");
    let img = image::load_from_memory(&first).unwrap();
    assert_eq!((img.width(), img.height()), (64, 48));
    let (_, second, _) = call(&app, "GET", &uri, None).await;
    assert_eq!(first, second);

    let (status, _, _) = call(&app, "GET", &format!("/api/recordings/{REC}/frames/10"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = call(&app, "GET", "/api/recordings/B08-O-20210314/frames/0", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
