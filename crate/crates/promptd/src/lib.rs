//! Interactive prompting service: sessions over the simulator and a
//! trained policy, driven through HTTP+JSON. See `API.md` for the schemas.
//!
//! Every rollout is an ordinary prompt-mode evaluation rollout, so any
//! result can be reproduced headlessly with the same task, prompt and seed.

pub mod api;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use graspbox_core::demo::{EpisodeRecord, ObservationFrame};
use graspbox_core::detect::{DetectorModel, GraspBox};
use graspbox_core::eval::{rollout_batch_observed, Counts, DetectorSource, Job, RolloutSettings};
use graspbox_core::sim::{ItemId, Simulator, TaskFamily, TaskSpec, WorldState};
use graspbox_core::train::Policy;

use api::*;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_steps: usize,
    pub k: usize,
    /// Pause after each produced frame, for watching rollouts live.
    pub frame_delay: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_steps: 200,
            k: 8,
            frame_delay: Duration::ZERO,
        }
    }
}

/// An API error: HTTP status plus the JSON error body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                field: None,
            },
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} `{id}`"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorResponse { error: self.body })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct RolloutSlot {
    id: u64,
    seed: u64,
    prompt: GraspBox,
    status: RolloutStatus,
    frames: Vec<(ObservationFrame, Option<GraspBox>)>,
    record: Option<EpisodeRecord>,
    error: Option<String>,
}

struct Session {
    id: String,
    task: TaskSpec,
    seed: u64,
    checkpoint: String,
    state: WorldState,
    prompt: Option<GraspBox>,
    history: Vec<HistoryEntry>,
    rollouts: Vec<RolloutSlot>,
    running: bool,
    tallies: Counts,
}

struct Shared {
    sim: Simulator,
    policies: BTreeMap<String, Arc<Policy>>,
    detector: Option<Arc<DetectorModel>>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(
        sim: Simulator,
        policies: BTreeMap<String, Arc<Policy>>,
        detector: Option<Arc<DetectorModel>>,
        config: ServiceConfig,
    ) -> Self {
        Self(Arc::new(Shared {
            sim,
            policies,
            detector,
            config,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.0
            .sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    fn item_name(&self, id: ItemId) -> Option<String> {
        self.0.sim.catalog().item(id).map(|s| s.name.clone())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}/scene", get(get_scene))
        .route("/session/{id}/prompt", post(post_prompt))
        .route("/session/{id}/rollout", post(start_rollout))
        .route("/session/{id}/rollout/{rid}", get(get_rollout))
        .route("/session/{id}/rollout/{rid}/record", get(get_record))
        .route("/session/{id}/history", get(get_history))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn bad_request(code: &str, message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, code, message)
}

async fn create_session(State(app): State<AppState>, body: Option<Json<CreateSession>>) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let Json(req) = body.ok_or_else(|| bad_request("bad_request", "expected a JSON body"))?;
    let shared = &app.0;
    let family: TaskFamily = req.family.parse().map_err(|e: graspbox_core::sim::SimError| bad_request("invalid_task", e.to_string()))?;
    let task = shared
        .sim
        .task(family, req.placement_id, req.target_item.map(ItemId))
        .map_err(|e| bad_request("invalid_task", e.to_string()))?;
    let checkpoint = match req.checkpoint {
        Some(name) => name,
        None if shared.policies.len() == 1 => shared.policies.keys().next().cloned().expect("one policy"),
        None => return Err(bad_request("checkpoint_required", format!("choose one of {:?}", shared.policies.keys().collect::<Vec<_>>()))),
    };
    let policy = shared.policies.get(&checkpoint).ok_or_else(|| ApiError::not_found("checkpoint", &checkpoint))?;
    let cats = shared.sim.catalog().category_count();
    if policy.categories() != cats {
        return Err(bad_request(
            "incompatible_checkpoint",
            format!("checkpoint expects {} categories, scene has {cats}", policy.categories()),
        ));
    }
    let state = shared.sim.reset(&task, req.seed).map_err(|e| bad_request("invalid_task", e.to_string()))?;
    let id = format!("s{}", shared.next_id.fetch_add(1, Ordering::Relaxed));
    let session = Session {
        id: id.clone(),
        task: task.clone(),
        seed: req.seed,
        checkpoint: checkpoint.clone(),
        state,
        prompt: None,
        history: Vec::new(),
        rollouts: Vec::new(),
        running: false,
        tallies: Counts::default(),
    };
    shared.sessions.lock().expect("session table lock").insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: id,
            task,
            seed: req.seed,
            checkpoint,
        }),
    ))
}

async fn get_scene(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Scene>> {
    let session = app.session(&id)?;
    let s = session.lock().expect("session lock");
    let sim = &app.0.sim;
    let images = sim.render_views(&s.state);
    let (boxes, box_source) = match &app.0.detector {
        Some(d) => (
            d.detect(&images[0]).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "detector", e.to_string()))?,
            "detector",
        ),
        None => (sim.groundtruth_boxes(&s.state, &sim.cameras()[0]), "ground_truth"),
    };
    let g = &s.state.gripper;
    Ok(Json(Scene {
        session_id: s.id.clone(),
        task: s.task.clone(),
        views: images.iter().enumerate().map(|(i, v)| EncodedImage::png(i, v)).collect(),
        boxes,
        box_source: box_source.into(),
        items: Scene::items(&s.state),
        gripper: GripperView {
            position: g.position,
            width: g.width,
            holding: g.holding,
        },
        step: s.state.step_count,
    }))
}

async fn post_prompt(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<PromptBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<PromptAck>> {
    let session = app.session(&id)?;
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.body_text()))?;
    let prompt: GraspBox = body.into();
    let cam = &app.0.sim.cameras()[0];
    prompt
        .validate(cam.width, cam.height, app.0.sim.catalog().category_count())
        .map_err(|e| ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: ErrorBody {
                code: "validation".into(),
                message: e.to_string(),
                field: Some(e.field.into()),
            },
        })?;
    let mut s = session.lock().expect("session lock");
    s.prompt = Some(prompt);
    let index = s.history.len();
    s.history.push(HistoryEntry {
        index,
        prompt,
        rollouts: Vec::new(),
    });
    Ok(Json(PromptAck {
        accepted: true,
        prompt,
        history_len: s.history.len(),
    }))
}

async fn start_rollout(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<StartRollout>>,
) -> ApiResult<(StatusCode, Json<RolloutStarted>)> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let session = app.session(&id)?;
    let (job, rid, policy, entry) = {
        let mut s = session.lock().expect("session lock");
        if s.running {
            return Err(ApiError::new(StatusCode::CONFLICT, "busy", "a rollout is already running in this session"));
        }
        let prompt = s
            .prompt
            .ok_or_else(|| ApiError::new(StatusCode::PRECONDITION_FAILED, "no_prompt", "post a prompt before starting a rollout"))?;
        let mut task = s.task.clone();
        task.prompt_box = Some(prompt);
        let seed = req.seed.unwrap_or(s.seed);
        let rid = s.rollouts.len() as u64 + 1;
        s.rollouts.push(RolloutSlot {
            id: rid,
            seed,
            prompt,
            status: RolloutStatus::Running,
            frames: Vec::new(),
            record: None,
            error: None,
        });
        s.running = true;
        let entry = s.history.len() - 1;
        let policy = app.0.policies[&s.checkpoint].clone();
        (Job { task, seed }, rid, policy, entry)
    };
    let settings = RolloutSettings {
        max_steps: req.max_steps.unwrap_or(app.0.config.max_steps),
        k: app.0.config.k,
        source: DetectorSource::Prompt,
        ..Default::default()
    };
    let app2 = app.clone();
    let session2 = session.clone();
    tokio::task::spawn_blocking(move || {
        let shared = &app2.0;
        let delay = shared.config.frame_delay;
        let slot = (rid - 1) as usize;
        let result = rollout_batch_observed(&shared.sim, &policy, std::slice::from_ref(&job), &settings, None, &mut |_, f, b| {
            session2.lock().expect("session lock").rollouts[slot].frames.push((f.clone(), b));
            if !delay.is_zero() {
                std::thread::sleep(delay);
            }
        });
        let mut s = session2.lock().expect("session lock");
        match result.map(|mut v| v.remove(0)) {
            Ok(rec) => {
                if let Ok(end) = rec.replay(&shared.sim) {
                    s.state = end;
                }
                s.tallies.add(&rec);
                let outcome = OutcomeView::of(&rec, |i| app2.item_name(i));
                s.history[entry].rollouts.push(PromptRun {
                    rollout_id: rid,
                    outcome: Some(outcome),
                });
                let r = &mut s.rollouts[slot];
                r.record = Some(rec);
                r.status = RolloutStatus::Done;
            }
            Err(e) => {
                log::warn!("rollout {rid} in session {} failed: {e}", s.id);
                s.history[entry].rollouts.push(PromptRun {
                    rollout_id: rid,
                    outcome: None,
                });
                let r = &mut s.rollouts[slot];
                r.error = Some(e.to_string());
                r.status = RolloutStatus::Failed;
            }
        }
        s.running = false;
    });
    Ok((StatusCode::ACCEPTED, Json(RolloutStarted { rollout_id: rid })))
}

fn slot_index(s: &Session, rid: &str) -> ApiResult<usize> {
    rid.parse::<u64>()
        .ok()
        .and_then(|r| s.rollouts.iter().position(|x| x.id == r))
        .ok_or_else(|| ApiError::not_found("rollout", rid))
}

async fn get_rollout(
    State(app): State<AppState>,
    Path((id, rid)): Path<(String, String)>,
    Query(q): Query<RolloutQuery>,
) -> ApiResult<Json<RolloutView>> {
    let session = app.session(&id)?;
    let s = session.lock().expect("session lock");
    let r = &s.rollouts[slot_index(&s, &rid)?];
    Ok(Json(RolloutView {
        rollout_id: r.id,
        status: r.status,
        seed: r.seed,
        prompt: r.prompt,
        frame_count: r.frames.len(),
        frames: r
            .frames
            .iter()
            .enumerate()
            .skip(q.since)
            .map(|(i, (f, b))| FrameView::new(i, f, *b, q.images))
            .collect(),
        outcome: r.record.as_ref().map(|rec| OutcomeView::of(rec, |i| app.item_name(i))),
        error: r.error.clone(),
    }))
}

/// The complete episode record of a finished rollout.
async fn get_record(State(app): State<AppState>, Path((id, rid)): Path<(String, String)>) -> ApiResult<Json<EpisodeRecord>> {
    let session = app.session(&id)?;
    let s = session.lock().expect("session lock");
    let r = &s.rollouts[slot_index(&s, &rid)?];
    r.record
        .clone()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "not_done", format!("rollout {rid} has not finished")))
}

async fn get_history(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<History>> {
    let session = app.session(&id)?;
    let s = session.lock().expect("session lock");
    Ok(Json(History {
        session_id: s.id.clone(),
        active_prompt: s.prompt,
        entries: s.history.clone(),
        tallies: Tallies {
            counts: s.tallies,
            tsr: s.tallies.tsr(),
            gsr: s.tallies.gsr(),
        },
    }))
}
