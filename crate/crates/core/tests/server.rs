use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;

use enerf_core::cli::parse_pose;
use enerf_core::networks::ModelWeights;
use enerf_core::renderer::{render_image, RenderConfig, SamplingMode};
use enerf_core::scenegen::{generate_scene, SceneSpec};
use enerf_core::server::{decode_frame, encode_frame, serve, PoseMessage, RenderService};

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

fn service() -> Arc<RenderService> {
    let ds = generate_scene(&SceneSpec::preset("micro", 0).unwrap()).unwrap();
    Arc::new(RenderService::new(ds, ModelWeights::init(5), RenderConfig::default()).unwrap())
}

async fn connect(svc: Arc<RenderService>) -> Ws {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(svc, listener));
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}")).await.unwrap();
    ws
}

async fn next(ws: &mut Ws) -> Message {
    tokio::time::timeout(Duration::from_secs(30), ws.next())
        .await
        .expect("server replied in time")
        .expect("stream open")
        .expect("valid message")
}

fn as_json(m: &Message) -> serde_json::Value {
    match m {
        Message::Text(t) => serde_json::from_str(t).unwrap(),
        other => panic!("expected text, got {other:?}"),
    }
}

#[test]
fn cached_render_matches_direct_render() {
    let svc = service();
    let cam = parse_pose(&svc.ds, "view:0").unwrap();
    for (mode, n) in [(SamplingMode::Guided, 2), (SamplingMode::Uniform, 8)] {
        let cfg = RenderConfig {
            mode,
            n_samples: n,
            ..Default::default()
        };
        let direct = render_image(&svc.ds, &svc.weights, &cam, &cfg).unwrap();
        let cached = svc.render(&cam, mode, n).unwrap();
        assert_eq!(direct.image.data, cached.image.data);
        assert_eq!(direct.depth_mvs, cached.depth_mvs);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frame_for_view_zero_matches_cli_render() {
    let svc = service();
    let cam = parse_pose(&svc.ds, "view:0").unwrap();
    let expected = render_image(&svc.ds, &svc.weights, &cam, &RenderConfig::default()).unwrap();
    let mut ws = connect(svc.clone()).await;
    let mut pose = PoseMessage::from_camera(&cam, 7);
    pose.request_depth = true;
    ws.send(Message::text(serde_json::to_string(&pose).unwrap())).await.unwrap();
    let Message::Binary(bytes) = next(&mut ws).await else {
        panic!("expected a frame first");
    };
    assert_eq!(bytes.to_vec(), encode_frame(&expected, 7, svc.ds.near, svc.ds.far, true));
    let frame = decode_frame(&bytes).unwrap();
    assert_eq!((frame.seq, frame.width, frame.height, frame.channels), (7, 32, 32, 4));
    let stats = as_json(&next(&mut ws).await);
    assert_eq!((stats["type"].as_str(), stats["seq"].as_u64()), (Some("stats"), Some(7)));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_messages_get_errors_without_disconnect() {
    let svc = service();
    let cam = parse_pose(&svc.ds, "view:1").unwrap();
    let mut ws = connect(svc).await;
    ws.send(Message::text("{not json")).await.unwrap();
    assert_eq!(as_json(&next(&mut ws).await)["type"], "error");
    let mut bad = PoseMessage::from_camera(&cam, 3);
    bad.r[4] = 2.0;
    ws.send(Message::text(serde_json::to_string(&bad).unwrap())).await.unwrap();
    let err = as_json(&next(&mut ws).await);
    assert_eq!((err["type"].as_str(), err["seq"].as_u64()), (Some("error"), Some(3)));
    ws.send(Message::binary(vec![1u8, 2, 3])).await.unwrap();
    assert_eq!(as_json(&next(&mut ws).await)["type"], "error");
    let good = PoseMessage::from_camera(&cam, 4);
    ws.send(Message::text(serde_json::to_string(&good).unwrap())).await.unwrap();
    assert!(matches!(next(&mut ws).await, Message::Binary(_)));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rapid_poses_are_latest_wins() {
    let svc = service();
    let mut ws = connect(svc.clone()).await;
    for seq in 1..=100u64 {
        let cam = parse_pose(&svc.ds, &format!("orbit:{},25,4", seq * 3)).unwrap();
        ws.send(Message::text(serde_json::to_string(&PoseMessage::from_camera(&cam, seq)).unwrap()))
            .await
            .unwrap();
    }
    let mut seqs = Vec::new();
    while seqs.last() != Some(&100) {
        match next(&mut ws).await {
            Message::Binary(b) => seqs.push(decode_frame(&b).unwrap().seq),
            m => assert_eq!(as_json(&m)["type"], "stats"),
        }
    }
    assert!(seqs.windows(2).all(|w| w[0] < w[1]), "{seqs:?}");

    let cam = parse_pose(&svc.ds, "view:0").unwrap();
    ws.send(Message::text(serde_json::to_string(&PoseMessage::from_camera(&cam, 50)).unwrap()))
        .await
        .unwrap();
    loop {
        let m = next(&mut ws).await;
        if let Message::Text(_) = m {
            let v = as_json(&m);
            if v["type"] == "error" {
                assert_eq!(v["seq"].as_u64(), Some(50));
                break;
            }
        }
    }
}
