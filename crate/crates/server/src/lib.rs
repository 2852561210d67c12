//! HTTP+JSON API over the annotation store, consumed by the annotation UI.
//!
//! | route | |
//! |---|---|
//! | `GET /api/recordings` | recordings with annotations or suggestions |
//! | `GET /api/recordings/:id/segments` | current annotations of one recording |
//! | `PUT /api/annotations/:annotation_id` | create or edit |
//! | `DELETE /api/annotations/:annotation_id` | tombstone |
//! | `GET /api/recordings/:id/frames/:n` | one frame as `image/jpeg` |
//! | `GET /api/recordings/:id/suggestions?frame=n` | top-k re-identification |
//! | `GET /api/schema` | events the annotator may assign |

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use trapline_core::annotation::{
    nominal_capture_time, Annotation, AnnotationDraft, AnnotationError, AnnotationStore, EventDef, FrameService,
    SuggestionResponse,
};
use trapline_core::RecordingId;

/// Nominal capture time of a served frame, `YYYY-MM-DDTHH:MM:SS` camera-local.
pub const CAPTURE_TIME_HEADER: &str = "x-trapline-capture-time";

pub struct AppState {
    pub store: AnnotationStore,
    pub frames: FrameService,
}

type Shared = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let status = match &e {
            AnnotationError::Invalid(_) | AnnotationError::Schema(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AnnotationError::NotFound(_) | AnnotationError::MissingVideo(_) | AnnotationError::FrameOutOfRange { .. } => {
                StatusCode::NOT_FOUND
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

fn parse_recording(id: &str) -> Result<RecordingId, ApiError> {
    id.parse()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("recording id {id:?}: {e}")))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, AnnotationError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RecordingSummary {
    pub recording_id: String,
    pub annotations: usize,
    pub video_available: bool,
}

async fn list_recordings(State(app): State<Shared>) -> Result<Json<Vec<RecordingSummary>>, ApiError> {
    let current = app.store.current();
    let ids = app.store.recordings()?;
    Ok(Json(
        ids.into_iter()
            .map(|id| {
                let video_available = id
                    .parse::<RecordingId>()
                    .map(|r| app.frames.video_path(&r).exists())
                    .unwrap_or(false);
                RecordingSummary {
                    annotations: current.iter().filter(|a| a.recording_id == id).count(),
                    recording_id: id,
                    video_available,
                }
            })
            .collect(),
    ))
}

async fn recording_segments(
    State(app): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<Vec<Annotation>>, ApiError> {
    parse_recording(&id)?;
    Ok(Json(app.store.for_recording(&id)))
}

/// Mirrors [`Annotation`]; bookkeeping fields sent back by clients are ignored.
#[derive(Debug, Deserialize)]
pub struct AnnotationBody {
    #[serde(default)]
    pub annotation_id: Option<String>,
    pub recording_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub event: String,
    #[serde(default)]
    pub animal_id: Option<String>,
    pub author: String,
}

async fn put_annotation(
    State(app): State<Shared>,
    Path(annotation_id): Path<String>,
    Json(body): Json<AnnotationBody>,
) -> Result<Json<Annotation>, ApiError> {
    if body.annotation_id.as_ref().is_some_and(|b| *b != annotation_id) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "annotation_id in body does not match the path",
        ));
    }
    let draft = AnnotationDraft {
        annotation_id,
        recording_id: body.recording_id,
        start_frame: body.start_frame,
        end_frame: body.end_frame,
        event: body.event,
        animal_id: body.animal_id.filter(|a| !a.is_empty()),
        author: body.author,
    };
    let saved = blocking(move || app.store.upsert(draft)).await?;
    Ok(Json(saved))
}

#[derive(Debug, Deserialize)]
struct DeleteParams {
    author: Option<String>,
}

async fn delete_annotation(
    State(app): State<Shared>,
    Path(annotation_id): Path<String>,
    Query(q): Query<DeleteParams>,
) -> Result<StatusCode, ApiError> {
    let author = q.author.unwrap_or_else(|| "unknown".into());
    blocking(move || app.store.delete(&annotation_id, &author)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn frame(State(app): State<Shared>, Path((id, n)): Path<(String, usize)>) -> Result<Response, ApiError> {
    let rec = parse_recording(&id)?;
    let captured = nominal_capture_time(&rec, n).format("%Y-%m-%dT%H:%M:%S").to_string();
    let bytes = blocking(move || app.frames.extract_frame(&rec, n)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/jpeg")),
            (
                HeaderName::from_static(CAPTURE_TIME_HEADER),
                HeaderValue::from_str(&captured).expect("ascii timestamp"),
            ),
        ],
        bytes.as_ref().clone(),
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
struct SuggestionParams {
    frame: usize,
    detection: Option<usize>,
}

async fn suggestions(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<SuggestionParams>,
) -> Result<Json<SuggestionResponse>, ApiError> {
    parse_recording(&id)?;
    Ok(Json(app.store.get_suggestions(&id, q.frame, q.detection)?))
}

async fn schema(State(app): State<Shared>) -> Json<Vec<EventDef>> {
    Json(app.store.schema().effective_events())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/recordings", get(list_recordings))
        .route("/api/recordings/:id/segments", get(recording_segments))
        .route("/api/recordings/:id/frames/:n", get(frame))
        .route("/api/recordings/:id/suggestions", get(suggestions))
        .route("/api/annotations/:annotation_id", put(put_annotation).delete(delete_annotation))
        .route("/api/schema", get(schema))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
