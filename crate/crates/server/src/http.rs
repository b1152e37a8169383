//! HTTP side: the hub API, the scene manifest for thin clients, session
//! diagnostics, the `/ws` socket bridge and the static UI bundle.

use std::path::Path;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use nalgebra::Isometry3;
use serde::Serialize;
use teleop_core::protocol::{FrameDecoder, StreamError};
use teleop_core::registry::ResolvedScene;
use teleop_core::scene::Shape;
use tokio::sync::mpsc;
use tower_http::services::ServeDir;

use crate::conn::serve_packets;
use crate::host::{Host, SEND_QUEUE};

fn pose7(p: &Isometry3<f64>) -> [f64; 7] {
    let t = p.translation.vector;
    let q = p.rotation.quaternion();
    [t.x, t.y, t.z, q.w, q.i, q.j, q.k]
}

#[derive(Debug, Serialize)]
pub struct SceneSummary {
    pub id: String,
    pub robot: String,
    pub n: usize,
    pub m: usize,
}

#[derive(Debug, Serialize)]
pub struct JointInfo {
    pub name: String,
    pub kind: String,
    pub parent: usize,
    pub child: usize,
    pub origin: [f64; 7],
    pub axis: [f64; 3],
    pub lower: f64,
    pub upper: f64,
    /// Index into the streamed joint vector; `None` for fixed joints.
    pub dof: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct SphereInfo {
    pub link: usize,
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Serialize)]
pub struct RobotInfo {
    pub name: String,
    pub hash: String,
    pub base: [f64; 7],
    pub links: Vec<String>,
    pub joints: Vec<JointInfo>,
    pub spheres: Vec<SphereInfo>,
}

#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeInfo {
    Box { size: [f64; 3] },
    Sphere { radius: f64 },
    Cylinder { radius: f64, height: f64 },
}

#[derive(Debug, Serialize)]
pub struct ObjectInfo {
    pub id: String,
    pub shape: ShapeInfo,
    /// Declared pose, bottom center.
    pub pose: [f64; 7],
    pub graspable: bool,
}

/// Static data a thin client needs to draw streamed states of a scene.
#[derive(Debug, Serialize)]
pub struct SceneManifest {
    pub id: String,
    pub hash: String,
    pub dt: f64,
    pub n: usize,
    pub m: usize,
    pub home: Vec<f64>,
    pub robot: RobotInfo,
    pub objects: Vec<ObjectInfo>,
}

impl SceneManifest {
    pub fn new(r: &ResolvedScene, dt: f64) -> Self {
        let model = &r.model;
        Self {
            id: r.scene.id.clone(),
            hash: r.scene.hash.clone(),
            dt,
            n: model.dof(),
            m: r.scene.objects.len(),
            home: r.home.clone(),
            robot: RobotInfo {
                name: model.name.clone(),
                hash: model.hash.clone(),
                base: pose7(&model.base),
                links: model.links.iter().map(|l| l.name.clone()).collect(),
                joints: model
                    .joints
                    .iter()
                    .map(|j| JointInfo {
                        name: j.name.clone(),
                        kind: format!("{:?}", j.kind).to_lowercase(),
                        parent: j.parent,
                        child: j.child,
                        origin: pose7(&j.origin),
                        axis: [j.axis.x, j.axis.y, j.axis.z],
                        lower: j.lower,
                        upper: j.upper,
                        dof: j.dof,
                    })
                    .collect(),
                spheres: model
                    .spheres
                    .iter()
                    .map(|s| SphereInfo {
                        link: s.link,
                        center: [s.center.x, s.center.y, s.center.z],
                        radius: s.radius,
                    })
                    .collect(),
            },
            objects: r
                .scene
                .objects
                .iter()
                .map(|o| ObjectInfo {
                    id: o.id.clone(),
                    shape: match o.shape {
                        Shape::Box { size } => ShapeInfo::Box {
                            size: [size.x, size.y, size.z],
                        },
                        Shape::Sphere { radius } => ShapeInfo::Sphere { radius },
                        Shape::Cylinder { radius, height } => ShapeInfo::Cylinder { radius, height },
                    },
                    pose: pose7(&o.pose),
                    graspable: o.graspable,
                })
                .collect(),
        }
    }
}

fn not_found(msg: String) -> Response {
    (StatusCode::NOT_FOUND, Json(serde_json::json!({ "error": msg }))).into_response()
}

async fn scenes(State(host): State<Arc<Host>>) -> Json<Vec<SceneSummary>> {
    let r = host.registry();
    Json(
        r.scene_ids()
            .filter_map(|id| r.scene(id).ok())
            .map(|s| SceneSummary {
                id: s.scene.id.clone(),
                robot: s.model.name.clone(),
                n: s.model.dof(),
                m: s.scene.objects.len(),
            })
            .collect(),
    )
}

async fn scene(State(host): State<Arc<Host>>, UrlPath(id): UrlPath<String>) -> Response {
    match host.registry().scene(&id) {
        Ok(s) => Json(SceneManifest::new(s, host.dt())).into_response(),
        Err(e) => not_found(e.to_string()),
    }
}

async fn profile(State(host): State<Arc<Host>>, UrlPath(id): UrlPath<u32>) -> Response {
    match host.report(id) {
        Some(r) => Json(r).into_response(),
        None => not_found(format!("no session {id}")),
    }
}

async fn ws(State(host): State<Arc<Host>>, upgrade: WebSocketUpgrade) -> Response {
    upgrade.on_upgrade(move |socket| bridge(host, socket))
}

/// Binary messages carry frames exactly as on the TCP stream, length
/// prefix included; a frame may span several messages.
async fn bridge(host: Arc<Host>, socket: WebSocket) {
    let (mut sink, source) = socket.split();
    let (tx, mut rx) = mpsc::channel::<Vec<u8>>(SEND_QUEUE);
    let write = tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            if sink.send(Message::Binary(frame.into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    let incoming = futures_util::stream::unfold((FrameDecoder::default(), source), |(mut decoder, mut source)| async move {
        loop {
            match decoder.next_frame() {
                Ok(Some(f)) => return Some((Ok(f), (decoder, source))),
                Ok(None) => {}
                Err(e) => return Some((Err(StreamError::from(e)), (decoder, source))),
            }
            match source.next().await? {
                Ok(Message::Binary(bytes)) => decoder.push(&bytes),
                Ok(Message::Close(_)) | Err(_) => return None,
                Ok(_) => {}
            }
        }
    });
    serve_packets(host, Box::pin(incoming), tx, "ws").await;
    let _ = write.await;
}

/// All HTTP routes; serves `ui_dir` at `/` when it exists.
pub fn router(host: Arc<Host>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/v1/scenes", get(scenes))
        .route("/api/v1/scenes/{id}", get(scene))
        .route("/api/v1/sessions/{id}/profile", get(profile))
        .route("/ws", get(ws))
        .with_state(Arc::clone(&host));
    let app = api.merge(teleop_hub::api::router(Arc::clone(host.hub())));
    match ui_dir.filter(|d| d.is_dir()) {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}
