//! The HTTP clients against a local stub server speaking the wire formats.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use image::RgbImage;
use serde_json::{json, Value};

use mirror_core::backends::{
    chat, ground, judge_alignment, judge_consistency, judge_quality, judge_score, segment, BackendEndpoints,
    BackendError, ChatMessage, HttpBackends, ImageAttachment, Role,
};
use mirror_core::render::{encode_png, rle_decode, Point};

#[derive(Default)]
struct Stub {
    bodies: Mutex<Vec<(String, Value)>>,
    flaky_hits: AtomicUsize,
}

type Shared = Arc<Stub>;

fn record(s: &Stub, path: &str, body: &Value) {
    s.bodies.lock().unwrap().push((path.to_string(), body.clone()));
}

async fn chat_route(State(s): State<Shared>, Json(body): Json<Value>) -> Json<Value> {
    record(&s, "chat", &body);
    Json(json!({"choices": [{"message": {"role": "assistant", "content": "It is 3."}}], "usage": {"completion_tokens": 4}}))
}

async fn ground_route(State(s): State<Shared>, Json(body): Json<Value>) -> Json<Value> {
    record(&s, "ground", &body);
    match body["query"].as_str() {
        Some("red cup") => Json(json!({"points": [{"x": 0.42, "y": 0.61}]})),
        Some("outside") => Json(json!({"points": [{"x": 1.2, "y": 0.5}]})),
        _ => Json(json!({"points": []})),
    }
}

async fn segment_route(State(s): State<Shared>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    record(&s, "segment", &body);
    if body["points"].as_array().is_none_or(|p| p.is_empty()) {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "no points"})));
    }
    // 4x4 square at (8, 8) in a 16x12 image.
    let mut runs = vec![];
    let mut last = false;
    let mut run = 0u32;
    for y in 0..12u32 {
        for x in 0..16u32 {
            let on = (8..12).contains(&x) && (8..12).contains(&y);
            if on != last {
                runs.push(run);
                run = 0;
                last = on;
            }
            run += 1;
        }
    }
    runs.push(run);
    (StatusCode::OK, Json(json!({"width": 16, "height": 12, "runs": runs, "box": {"x0": 0.5, "y0": 0.66, "x1": 0.75, "y1": 0.99}})))
}

async fn score_route(State(s): State<Shared>, Json(body): Json<Value>) -> Json<Value> {
    record(&s, "score", &body);
    Json(json!({"score": 7, "rationale": "close"}))
}

async fn consistency_route(State(s): State<Shared>, Json(body): Json<Value>) -> Json<Value> {
    record(&s, "consistency", &body);
    Json(json!({"consistent": "yes", "rationale": "marker on cup"}))
}

async fn alignment_route(State(s): State<Shared>, Json(body): Json<Value>) -> Json<Value> {
    record(&s, "alignment", &body);
    Json(json!({"aligned": false, "rationale": "differs"}))
}

async fn quality_route(State(s): State<Shared>, Json(body): Json<Value>) -> Json<Value> {
    record(&s, "quality", &body);
    Json(json!({"logic": 4, "visual": 5, "rationale": "fine"}))
}

async fn flaky_route(State(s): State<Shared>) -> (StatusCode, Json<Value>) {
    if s.flaky_hits.fetch_add(1, Ordering::SeqCst) == 0 {
        (StatusCode::SERVICE_UNAVAILABLE, Json(json!({})))
    } else {
        (StatusCode::OK, Json(json!({"choices": [{"message": {"content": "recovered"}}]})))
    }
}

async fn bad_request_route(State(s): State<Shared>) -> StatusCode {
    s.flaky_hits.fetch_add(1, Ordering::SeqCst);
    StatusCode::BAD_REQUEST
}

async fn garbage_route() -> &'static str {
    "not json"
}

fn start() -> (SocketAddr, Shared) {
    let state: Shared = Arc::default();
    let app = Router::new()
        .route("/v1/chat", post(chat_route))
        .route("/ground", post(ground_route))
        .route("/segment", post(segment_route))
        .route("/score", post(score_route))
        .route("/consistency", post(consistency_route))
        .route("/alignment", post(alignment_route))
        .route("/quality", post(quality_route))
        .route("/flaky", post(flaky_route))
        .route("/bad", post(bad_request_route))
        .route("/garbage", post(garbage_route))
        .with_state(state.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (rx.recv().unwrap(), state)
}

fn client(addr: SocketAddr, chat_path: &str) -> HttpBackends {
    let base = format!("http://{addr}");
    HttpBackends::new(BackendEndpoints {
        chat_url: format!("{base}{chat_path}"),
        grounder_url: base.clone(),
        segmenter_url: base.clone(),
        judge_url: base,
        model: "stub".into(),
        timeout_ms: 5_000,
        max_retries: 2,
        auth_token: None,
        max_in_flight: 4,
    })
    .unwrap()
}

fn png(w: u32, h: u32) -> Vec<u8> {
    encode_png(&RgbImage::new(w, h)).unwrap()
}

#[test]
fn all_roles_round_trip() {
    let (addr, stub) = start();
    let c = client(addr, "/v1/chat");
    let image = png(16, 12);

    let msgs = [ChatMessage::with_image(Role::User, "How many?", ImageAttachment::new(image.clone()))];
    let reply = chat(&c, &msgs).unwrap();
    assert_eq!(reply.text, "It is 3.");
    assert_eq!(reply.completion_tokens, Some(4));

    assert_eq!(ground(&c, &image, "red cup").unwrap(), vec![Point::new(0.42, 0.61)]);
    assert!(ground(&c, &image, "nothing").unwrap().is_empty());
    assert!(matches!(ground(&c, &image, "outside"), Err(BackendError::InvalidCoordinates { .. })));

    let seg = segment(&c, &image, &[Point::new(0.5, 0.7)]).unwrap();
    assert_eq!(rle_decode(&seg.mask).unwrap().count_ones(), 16);
    assert_eq!(seg.bbox, [Point::from_pixel(8, 8, 16, 12), Point::from_pixel(11, 11, 16, 12)]);
    // Same stub reply, wrong image size.
    assert!(matches!(segment(&c, &png(20, 20), &[Point::new(0.5, 0.5)]), Err(BackendError::ContractViolation(_))));

    assert_eq!(judge_score(&c, "q", "2", "3").unwrap().score, 7);
    assert!(judge_consistency(&c, &image, "I missed the cup").unwrap().verdict);
    assert!(!judge_alignment(&c, "q", "2", "3").unwrap().verdict);
    let q = judge_quality(&c, "trajectory", Some(&image)).unwrap();
    assert_eq!((q.logic, q.visual), (4, 5));

    let bodies = stub.bodies.lock().unwrap().clone();
    let find = |p: &str| bodies.iter().find(|(path, _)| path == p).unwrap().1.clone();
    let chat_body = find("chat");
    assert_eq!(chat_body["model"], "stub");
    assert_eq!(chat_body["messages"][0]["content"][1]["type"], "image");
    assert_eq!(find("ground")["query"], "red cup");
    assert!(find("ground")["image"].is_string());
    assert_eq!(find("segment")["points"], json!([{"x": 0.5, "y": 0.7}]));
    assert_eq!(
        find("score").as_object().unwrap().keys().collect::<Vec<_>>(),
        vec!["question", "candidate_answer", "ground_truth"]
    );
    assert_eq!(find("consistency")["reflection_text"], "I missed the cup");
    assert!(find("consistency")["marked_image"].is_string());
    assert_eq!(find("alignment")["answer"], "2");
    assert_eq!(find("quality")["sample"], "trajectory");
}

#[test]
fn transient_errors_are_retried() {
    let (addr, stub) = start();
    let c = client(addr, "/flaky");
    assert_eq!(chat(&c, &[ChatMessage::text(Role::User, "hi")]).unwrap().text, "recovered");
    assert_eq!(stub.flaky_hits.load(Ordering::SeqCst), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (addr, stub) = start();
    let c = client(addr, "/bad");
    let err = chat(&c, &[ChatMessage::text(Role::User, "hi")]).unwrap_err();
    assert_eq!(err, BackendError::BadStatus { code: 400, attempts: 1 });
    assert_eq!(stub.flaky_hits.load(Ordering::SeqCst), 1);
}

#[test]
fn non_json_reply_is_a_contract_violation() {
    let (addr, _) = start();
    let c = client(addr, "/garbage");
    assert!(matches!(chat(&c, &[ChatMessage::text(Role::User, "hi")]), Err(BackendError::ContractViolation(_))));
}
