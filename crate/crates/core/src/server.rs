//! WebSocket render service.
//!
//! Text frames carry JSON (`pose` requests in, `stats` and `error` replies
//! out); binary frames carry rendered images:
//! `u64 seq | u32 width | u32 height | u8 channels | payload` (little-endian),
//! payload row-major, `channels` bytes per pixel.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch, Mutex};
use tokio_tungstenite::tungstenite::Message;

use crate::costvolume::{select_sources, SourceView};
use crate::dataset::{quantize, SceneDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Mat3, Vec3};
use crate::networks::ModelWeights;
use crate::renderer::{render_with_sources, RenderConfig, RenderOutput, RenderStats, SamplingMode};
use crate::tensor::Graph;

pub const DEFAULT_ADDR: &str = "127.0.0.1:9090";
pub const MAX_PIXELS: usize = 512 * 512;
pub const HEADER_LEN: usize = 17;
const MAX_SAMPLES: usize = 512;

fn default_mode() -> SamplingMode {
    SamplingMode::Guided
}

fn default_samples() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMessage {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_mode")]
    pub mode: SamplingMode,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub request_depth: bool,
    pub seq: u64,
}

impl PoseMessage {
    pub fn from_camera(cam: &Camera, seq: u64) -> Self {
        let flat = |m: &Mat3| {
            let mut out = [0.0; 9];
            for (i, o) in out.iter_mut().enumerate() {
                *o = m[(i / 3, i % 3)];
            }
            out
        };
        Self {
            kind: "pose".into(),
            k: flat(&cam.k),
            r: flat(&cam.r),
            t: [cam.t.x, cam.t.y, cam.t.z],
            width: cam.width,
            height: cam.height,
            mode: SamplingMode::Guided,
            n_samples: 2,
            request_depth: false,
            seq,
        }
    }

    /// Checks the message and builds the camera with the scene's depth bounds.
    pub fn camera(&self, near: f64, far: f64) -> Result<Camera> {
        if self.kind != "pose" {
            return Err(Error::invalid(format!("unsupported message type '{}'", self.kind)));
        }
        if self.width == 0 || self.height == 0 || self.width * self.height > MAX_PIXELS {
            return Err(Error::invalid(format!(
                "image size {}x{} outside 1..={MAX_PIXELS} pixels",
                self.width, self.height
            )));
        }
        if self.n_samples == 0 || self.n_samples > MAX_SAMPLES {
            return Err(Error::invalid(format!("n_samples must be in 1..={MAX_SAMPLES}")));
        }
        if self.k.iter().chain(&self.r).chain(&self.t).any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        let r = Mat3::from_row_slice(&self.r);
        let ortho = (r * r.transpose() - Mat3::identity()).abs().max();
        if ortho > 1e-6 || r.determinant() < 0.0 {
            return Err(Error::invalid(format!("R is not a rotation (|RRᵀ − I| = {ortho:.2e})")));
        }
        Camera::new(
            Mat3::from_row_slice(&self.k),
            r,
            Vec3::from_row_slice(&self.t),
            self.width,
            self.height,
            near,
            far,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsMessage {
    #[serde(rename = "type")]
    pub kind: String,
    pub seq: u64,
    pub render_ms: f64,
    pub mode: SamplingMode,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    #[serde(rename = "type")]
    pub kind: String,
    pub reason: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seq: Option<u64>,
}

impl ErrorMessage {
    fn new(reason: impl Into<String>, seq: Option<u64>) -> Self {
        Self {
            kind: "error".into(),
            reason: reason.into(),
            seq,
        }
    }
}

/// Serializes a render as a binary frame. Depth, when requested, is taken from
/// the cost-volume estimate and mapped linearly from `[near, far]` to bytes.
pub fn encode_frame(out: &RenderOutput, seq: u64, near: f64, far: f64, request_depth: bool) -> Vec<u8> {
    let (w, h) = (out.image.width, out.image.height);
    let channels = if request_depth { 4 } else { 3 };
    let mut buf = Vec::with_capacity(HEADER_LEN + w * h * channels);
    buf.extend_from_slice(&seq.to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.push(channels as u8);
    for (i, px) in out.image.data.chunks_exact(3).enumerate() {
        buf.extend(px.iter().map(|&v| quantize(v)));
        if request_depth {
            let d = (f64::from(out.depth_mvs[i]) - near) / (far - near);
            buf.push(quantize(d as f32));
        }
    }
    buf
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub seq: u64,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub payload: Vec<u8>,
}

pub fn decode_frame(buf: &[u8]) -> Result<Frame> {
    if buf.len() < HEADER_LEN {
        return Err(Error::invalid("frame shorter than header"));
    }
    let seq = u64::from_le_bytes(buf[0..8].try_into().expect("8 bytes"));
    let width = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(buf[12..16].try_into().expect("4 bytes")) as usize;
    let channels = buf[16] as usize;
    let payload = buf[HEADER_LEN..].to_vec();
    if payload.len() != width * height * channels {
        return Err(Error::invalid(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            width * height * channels
        )));
    }
    Ok(Frame {
        seq,
        width,
        height,
        channels,
        payload,
    })
}

/// Weights, dataset and cached source-view features shared by all clients.
pub struct RenderService {
    pub ds: SceneDataset,
    pub weights: ModelWeights,
    pub base: RenderConfig,
    sources: HashMap<usize, SourceView>,
    executor: Mutex<()>,
}

impl RenderService {
    pub fn new(ds: SceneDataset, weights: ModelWeights, base: RenderConfig) -> Result<Self> {
        let g = Graph::new();
        let sources = ds
            .ids(Split::Train)
            .into_iter()
            .map(|id| Ok((id, SourceView::new(&g, &weights, &ds, id)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self {
            ds,
            weights,
            base,
            sources,
            executor: Mutex::new(()),
        })
    }

    /// Renders with cached source features. Matches `render_image` exactly.
    pub fn render(&self, tgt: &Camera, mode: SamplingMode, n_samples: usize) -> Result<RenderOutput> {
        let ids = select_sources(&self.ds, tgt, &self.ds.ids(Split::Train), self.base.n_views)?;
        let sources: Vec<SourceView> = ids.iter().map(|id| self.sources[id].clone()).collect();
        let cfg = RenderConfig {
            mode,
            n_samples,
            ..self.base.clone()
        };
        render_with_sources(&self.weights, &sources, tgt, &cfg, RenderStats::default())
    }

    fn render_pose(&self, pose: &PoseMessage) -> Result<(Vec<u8>, StatsMessage)> {
        let cam = pose.camera(self.ds.near, self.ds.far)?;
        let t = Instant::now();
        let out = self.render(&cam, pose.mode, pose.n_samples)?;
        let stats = StatsMessage {
            kind: "stats".into(),
            seq: pose.seq,
            render_ms: t.elapsed().as_secs_f64() * 1e3,
            mode: pose.mode,
            n_samples: pose.n_samples,
        };
        Ok((encode_frame(&out, pose.seq, self.ds.near, self.ds.far, pose.request_depth), stats))
    }
}

fn json(v: &impl Serialize) -> Message {
    Message::text(serde_json::to_string(v).expect("plain data serializes"))
}

async fn handle_client(service: Arc<RenderService>, stream: TcpStream, peer: SocketAddr) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("{peer}: handshake failed: {e}");
            return;
        }
    };
    let (mut sink, mut incoming) = ws.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            if sink.send(msg).await.is_err() {
                break;
            }
        }
    });

    // Latest-wins slot: a newer pose overwrites any pose not yet picked up.
    let (pose_tx, mut pose_rx) = watch::channel::<Option<PoseMessage>>(None);
    let render_out = out_tx.clone();
    let render_service = service.clone();
    let renderer = tokio::spawn(async move {
        let mut last_seq: Option<u64> = None;
        while pose_rx.changed().await.is_ok() {
            let Some(pose) = pose_rx.borrow_and_update().clone() else {
                continue;
            };
            if last_seq.is_some_and(|s| pose.seq <= s) {
                let _ = render_out.send(json(&ErrorMessage::new("stale seq", Some(pose.seq))));
                continue;
            }
            let guard = render_service.executor.lock().await;
            let svc = render_service.clone();
            let p = pose.clone();
            let result = tokio::task::spawn_blocking(move || svc.render_pose(&p)).await;
            drop(guard);
            match result {
                Ok(Ok((frame, stats))) => {
                    last_seq = Some(pose.seq);
                    let _ = render_out.send(Message::binary(frame));
                    let _ = render_out.send(json(&stats));
                }
                Ok(Err(e)) => {
                    let _ = render_out.send(json(&ErrorMessage::new(e.to_string(), Some(pose.seq))));
                }
                Err(e) => {
                    let _ = render_out.send(json(&ErrorMessage::new(format!("render task failed: {e}"), Some(pose.seq))));
                }
            }
        }
    });

    while let Some(msg) = incoming.next().await {
        let text = match msg {
            Ok(Message::Text(t)) => t,
            Ok(Message::Binary(_)) => {
                let _ = out_tx.send(json(&ErrorMessage::new("binary messages are not accepted", None)));
                continue;
            }
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        let pose = serde_json::from_str::<PoseMessage>(&text)
            .map_err(|e| e.to_string())
            .and_then(|p| p.camera(service.ds.near, service.ds.far).map(|_| p).map_err(|e| e.to_string()));
        match pose {
            Ok(p) => {
                pose_tx.send_replace(Some(p));
            }
            Err(reason) => {
                let seq = serde_json::from_str::<serde_json::Value>(&text)
                    .ok()
                    .and_then(|v| v.get("seq").and_then(|s| s.as_u64()));
                let _ = out_tx.send(json(&ErrorMessage::new(reason, seq)));
            }
        }
    }
    drop(pose_tx);
    let _ = renderer.await;
    drop(out_tx);
    let _ = writer.await;
    log::info!("{peer}: disconnected");
}

/// Accepts clients on `listener` until the task is dropped.
pub async fn serve(service: Arc<RenderService>, listener: TcpListener) -> Result<()> {
    loop {
        let (stream, peer) = listener
            .accept()
            .await
            .map_err(|e| Error::invalid(format!("accept failed: {e}")))?;
        log::info!("{peer}: connected");
        tokio::spawn(handle_client(service.clone(), stream, peer));
    }
}

/// Binds `addr` and serves forever on a fresh runtime.
pub fn run(service: RenderService, addr: &str) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| Error::invalid(format!("cannot start runtime: {e}")))?;
    rt.block_on(async {
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|e| Error::invalid(format!("cannot bind {addr}: {e}")))?;
        log::info!("listening on ws://{}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
        eprintln!("listening on ws://{addr}");
        serve(Arc::new(service), listener).await
    })
}
