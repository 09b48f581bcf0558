//! HTTP+JSON endpoints.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/sessions` | `{"consent": true, "profile": {age_band, gender, education, expertise}}` | 201 `{session_id, total_pairs, next}` |
//! | GET | `/sessions/{id}/next` | | `Next` |
//! | POST | `/sessions/{id}/pairs/{pid}/annotation` | RLE mask | `{accepted, next}` |
//! | GET | `/sessions/{id}/pairs/{pid}/annotation` | | the stored RLE mask |
//! | POST | `/sessions/{id}/pairs/{pid}/ranking` | `{"ranks": {"A": 1, "D": 2}}` | `{accepted, next}` |
//! | GET | `/pairs/{pid}/image.png` | | artwork PNG |
//! | GET | `/sessions/{id}/pairs/{pid}/overlays/{slot}` | | overlay PNG |
//! | GET | `/export` | | `{rankings_csv, profiles_csv, masks_jsonl}` |
//! | GET | `/export/rankings.csv`, `/export/profiles.csv`, `/export/masks.jsonl` | | file body |
//!
//! Ranking keys are the slot letters A-G of the session's overlay order; method
//! ids are accepted too. Errors reply `{"error": message}` with 400 (no
//! consent), 404 (unknown session or pair), 409 (protocol order or
//! resubmission) or 422 (invalid mask or ranking).

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use iconoloc::MethodId;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::export::export;
use crate::mask::RleMask;
use crate::session::{Step, SLOT_LETTERS};
use crate::stimuli::{SetupError, Stimuli, StudyConfig};
use crate::store::{Demographics, Session, Store, StoreError};

pub struct AppState {
    pub store: Mutex<Store>,
    pub stimuli: Stimuli,
}

pub type Shared = Arc<AppState>;

impl AppState {
    pub fn new(store: Store, stimuli: Stimuli) -> Shared {
        Arc::new(Self { store: Mutex::new(store), stimuli })
    }

    fn store(&self) -> std::sync::MutexGuard<'_, Store> {
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct ApiError(StatusCode, String);

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NoConsent => StatusCode::BAD_REQUEST,
            StoreError::UnknownSession(_) | StoreError::UnknownPair(_) => StatusCode::NOT_FOUND,
            StoreError::OutOfOrder(_) => StatusCode::CONFLICT,
            StoreError::Mask(_) | StoreError::Ranking(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Db(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub consent: bool,
    pub profile: Demographics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayRef {
    pub slot: char,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTask {
    pub pair_id: String,
    pub class: String,
    pub width: u32,
    pub height: u32,
    pub image_url: String,
    /// Present on the ranking step only, in slot order.
    pub overlays: Option<Vec<OverlayRef>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Next {
    pub session_id: String,
    pub step: Step,
    /// Pairs finished so far.
    pub position: usize,
    pub total: usize,
    pub pair: Option<PairTask>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingBody {
    pub ranks: BTreeMap<String, u8>,
}

fn next_of(state: &AppState, s: &Session) -> Next {
    let pair = s.current_pair().map(|p| {
        let st = &state.stimuli.pairs[p];
        PairTask {
            pair_id: st.pair_id.clone(),
            class: st.class.clone(),
            width: st.width,
            height: st.height,
            image_url: format!("/pairs/{}/image.png", st.pair_id),
            overlays: (s.cursor.step == Step::Rank).then(|| {
                SLOT_LETTERS
                    .iter()
                    .map(|&slot| OverlayRef {
                        slot,
                        url: format!("/sessions/{}/pairs/{}/overlays/{slot}", s.session_id, st.pair_id),
                    })
                    .collect()
            }),
        }
    });
    Next {
        session_id: s.session_id.clone(),
        step: s.cursor.step,
        position: s.cursor.position,
        total: s.randomization.pair_order.len(),
        pair,
    }
}

fn pair_index(state: &AppState, pair_id: &str) -> ApiResult<usize> {
    state.stimuli.index_of(pair_id).ok_or_else(|| StoreError::UnknownPair(pair_id.to_string()).into())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn create_session(State(state): State<Shared>, Json(body): Json<CreateSession>) -> ApiResult<impl IntoResponse> {
    let s = state.store().create_session(body.consent, body.profile)?;
    let reply = serde_json::json!({
        "session_id": s.session_id,
        "total_pairs": s.randomization.pair_order.len(),
        "next": next_of(&state, &s),
    });
    Ok((StatusCode::CREATED, Json(reply)))
}

async fn next(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Next>> {
    let s = state.store().session(&id)?;
    Ok(Json(next_of(&state, &s)))
}

async fn post_annotation(
    State(state): State<Shared>,
    Path((id, pair_id)): Path<(String, String)>,
    Json(mask): Json<RleMask>,
) -> ApiResult<Json<serde_json::Value>> {
    let p = pair_index(&state, &pair_id)?;
    let dims = (state.stimuli.pairs[p].width, state.stimuli.pairs[p].height);
    let mut store = state.store();
    store.submit_annotation(&id, &pair_id, &mask, dims)?;
    let s = store.session(&id)?;
    Ok(Json(serde_json::json!({ "accepted": true, "next": next_of(&state, &s) })))
}

async fn get_annotation(State(state): State<Shared>, Path((id, pair_id)): Path<(String, String)>) -> ApiResult<Json<RleMask>> {
    state
        .store()
        .annotation(&id, &pair_id)?
        .map(|a| Json(a.mask))
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no annotation for pair {pair_id}")))
}

async fn post_ranking(
    State(state): State<Shared>,
    Path((id, pair_id)): Path<(String, String)>,
    Json(body): Json<RankingBody>,
) -> ApiResult<Json<serde_json::Value>> {
    let p = pair_index(&state, &pair_id)?;
    let mut store = state.store();
    let s = store.session(&id)?;
    let mut ranks = BTreeMap::new();
    for (key, rank) in body.ranks {
        let mut chars = key.chars();
        let method = match (chars.next(), chars.next()) {
            (Some(c), None) => s.randomization.method_in_slot(p, c),
            _ => key.parse::<MethodId>().ok(),
        }
        .ok_or_else(|| StoreError::Ranking(format!("unknown method_id `{key}`")))?;
        if ranks.insert(method, rank).is_some() {
            return Err(StoreError::Ranking(format!("{key} ranked twice")).into());
        }
    }
    store.submit_ranking(&id, &pair_id, &ranks)?;
    let s = store.session(&id)?;
    Ok(Json(serde_json::json!({ "accepted": true, "next": next_of(&state, &s) })))
}

async fn image(State(state): State<Shared>, Path(pair_id): Path<String>) -> ApiResult<Response> {
    let p = pair_index(&state, &pair_id)?;
    Ok(png(state.stimuli.pairs[p].image_png.clone()))
}

async fn overlay(State(state): State<Shared>, Path((id, pair_id, slot)): Path<(String, String, String)>) -> ApiResult<Response> {
    let p = pair_index(&state, &pair_id)?;
    let s = state.store().session(&id)?;
    let mut chars = slot.chars();
    let method = match (chars.next(), chars.next()) {
        (Some(c), None) => s.randomization.method_in_slot(p, c),
        _ => None,
    }
    .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no overlay slot `{slot}`")))?;
    Ok(png(state.stimuli.pairs[p].overlays_png[method.index()].clone()))
}

async fn export_all(State(state): State<Shared>) -> ApiResult<Response> {
    Ok(Json(export(&state.store())?).into_response())
}

async fn export_file(State(state): State<Shared>, Path(name): Path<String>) -> ApiResult<Response> {
    let e = export(&state.store())?;
    let (body, mime) = match name.as_str() {
        "rankings.csv" => (e.rankings_csv, "text/csv"),
        "profiles.csv" => (e.profiles_csv, "text/csv"),
        "masks.jsonl" => (e.masks_jsonl, "application/jsonl"),
        _ => return Err(ApiError(StatusCode::NOT_FOUND, format!("no export `{name}`"))),
    };
    Ok(([(header::CONTENT_TYPE, mime)], body).into_response())
}

pub fn router(state: Shared, static_dir: Option<&std::path::Path>) -> Router {
    let app = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/pairs/{pid}/annotation", post(post_annotation).get(get_annotation))
        .route("/sessions/{id}/pairs/{pid}/ranking", post(post_ranking))
        .route("/sessions/{id}/pairs/{pid}/overlays/{slot}", get(overlay))
        .route("/pairs/{pid}/image.png", get(image))
        .route("/export", get(export_all))
        .route("/export/{name}", get(export_file))
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

/// Renders stimuli, opens the database and serves until the process ends.
pub async fn serve(cfg: &StudyConfig, addr: SocketAddr) -> Result<(), ServeError> {
    let stimuli = Stimuli::prepare(cfg)?;
    let store = Store::open(&cfg.database, cfg.pairs.iter().map(|p| p.pair_id.clone()).collect())?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServeError::Bind { addr, source })?;
    log::info!("study service listening on {}", listener.local_addr()?);
    let app = router(AppState::new(store, stimuli), cfg.static_dir.as_deref());
    axum::serve(listener, app).await?;
    Ok(())
}
