mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use mnemo_core::engine::{Engine, SessionOptions};
use mnemo_core::gateway::{FnChat, GatewayError, GenerationRequest};
use mnemo_core::ranker::RankerModel;
use mnemo_core::service::{router, ServiceState};

use common::*;

fn app(shift_at: u32) -> Router {
    router(Arc::new(ServiceState::new(Arc::new(engine(shift_at)), vec![two_topic_bundle()], SessionOptions::default())))
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Option<String>, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let retry = resp.headers().get(header::RETRY_AFTER).map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, retry, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, _, v) = send(app, "POST", uri, Some(body.to_string())).await;
    (s, v)
}

fn prefix() -> Vec<mnemo_core::store::Utterance> {
    opening()[..4].to_vec()
}

#[tokio::test]
async fn create_then_message_returns_the_decision_triple() {
    let app = app(3);
    let (status, created) = post(&app, "/sessions", json!({"bundle_id": "piano", "opening": prefix()})).await;
    assert_eq!(status, StatusCode::OK, "{created}");
    assert!(created["scores"].as_array().unwrap().is_empty());
    let id = created["session_id"].as_str().unwrap();

    let (status, reply) =
        post(&app, &format!("/sessions/{id}/messages"), json!({"text": "Yes, I practiced piano to unwind"})).await;
    assert_eq!(status, StatusCode::OK, "{reply}");
    assert_eq!(reply["decision"]["thoughts"], "turn 1 reasoning");
    assert_eq!(reply["decision"]["shift"], false);
    assert_eq!(reply["decision"]["response"], "bot reply 1");
    assert_eq!(reply["shift_turn"], Value::Null);
    assert_eq!(reply["retrieved_topic"]["dialogue_id"], "piano");

    let (status, _, memory) = send(&app, "GET", &format!("/sessions/{id}/memory"), None).await;
    assert_eq!(status, StatusCode::OK);
    let topics = memory["topics"].as_array().unwrap();
    assert_eq!(topics.len(), 2);
    assert_eq!(topics[0]["dialogue_id"], "piano");
    assert_eq!(topics[0]["rank"], 1);
    assert!(topics[0]["score"].as_f64().unwrap() >= topics[1]["score"].as_f64().unwrap());
}

#[tokio::test]
async fn opening_ending_with_user_is_answered_on_create() {
    let app = app(3);
    let (status, created) =
        post(&app, "/sessions", json!({"bundle": two_topic_bundle(), "policy": "per_session", "opening": opening()}))
            .await;
    assert_eq!(status, StatusCode::OK, "{created}");
    assert_eq!(created["decision"]["response"], "bot reply 1");
    assert_eq!(created["retrieved_topic"]["topic"], "User is learning piano");
    assert_eq!(created["scores"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn shift_turn_is_reported() {
    let app = app(2);
    let (_, created) = post(&app, "/sessions", json!({"bundle_id": "piano", "opening": opening()})).await;
    let id = created["session_id"].as_str().unwrap();
    let (_, reply) = post(&app, &format!("/sessions/{id}/messages"), json!({"text": USER_LINES[0]})).await;
    assert_eq!(reply["decision"]["shift"], true);
    assert_eq!(reply["shift_turn"], 2);
    let (_, _, state) = send(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(state["shift_turn"], 2);
    assert_eq!(state["turn_counter"], 2);
    assert_eq!(state["transcript"].as_array().unwrap().len(), 8);
}

#[tokio::test]
async fn unknown_session_is_not_found() {
    let app = app(3);
    let (status, body) = post(&app, "/sessions/nope/messages", json!({"text": "hi"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "not_found");
    let (status, _, _) = send(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = send(&app, "GET", "/sessions/nope/memory", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = post(&app, "/sessions", json!({"bundle_id": "missing"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_bodies_are_bad_requests() {
    let app = app(3);
    let (status, _, _) = send(&app, "POST", "/sessions", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&app, "/sessions", json!({"bundle_id": "piano", "bundle": two_topic_bundle()})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&app, "/sessions", json!({"bundle_id": "piano", "policy": "sometimes"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) =
        post(&app, "/sessions", json!({"bundle_id": "piano", "opening": [{"speaker": "bot", "text": "hi"}]})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (_, created) = post(&app, "/sessions", json!({"bundle_id": "piano"})).await;
    let id = created["session_id"].as_str().unwrap();
    let (status, _) = post(&app, &format!("/sessions/{id}/messages"), json!({"txt": "hi"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&app, &format!("/sessions/{id}/messages"), json!({"text": "   "})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn eleventh_message_conflicts() {
    let app = app(99);
    let (_, created) =
        post(&app, "/sessions", json!({"bundle_id": "piano", "opening": prefix(), "max_turns": 10})).await;
    let id = created["session_id"].as_str().unwrap();
    let uri = format!("/sessions/{id}/messages");
    let lines = std::iter::once("Yes, I practiced piano to unwind").chain(USER_LINES);
    for (i, line) in lines.enumerate() {
        let (status, reply) = post(&app, &uri, json!({"text": line})).await;
        assert_eq!(status, StatusCode::OK, "message {}: {reply}", i + 1);
    }
    let (status, body) = post(&app, &uri, json!({"text": "one more"})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "max_turns_exceeded");
    let (_, _, state) = send(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(state["turn_counter"], 10);
}

#[tokio::test]
async fn nonce_makes_messages_idempotent() {
    let app = app(3);
    let (_, created) =
        post(&app, "/sessions", json!({"bundle_id": "piano", "opening": opening(), "nonce": "c1"})).await;
    let (_, again) = post(&app, "/sessions", json!({"bundle_id": "piano", "opening": opening(), "nonce": "c1"})).await;
    assert_eq!(created, again);
    let id = created["session_id"].as_str().unwrap();
    let uri = format!("/sessions/{id}/messages");
    let (_, a) = post(&app, &uri, json!({"text": USER_LINES[0], "nonce": "m1"})).await;
    let (_, b) = post(&app, &uri, json!({"text": USER_LINES[0], "nonce": "m1"})).await;
    assert_eq!(a, b);
    let (_, _, state) = send(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(state["turn_counter"], 2);
}

#[tokio::test]
async fn backend_failure_is_bad_gateway_with_retry_after() {
    let down = FnChat(|_: &GenerationRequest| -> Result<String, GatewayError> {
        Err(GatewayError::BackendUnavailable { attempts: 4, reason: "connection refused".into() })
    });
    let engine = Engine::new(Arc::new(RankerModel::cosine(BENCH_DIM)), Arc::new(down), Arc::new(engineered_embedder()));
    let app =
        router(Arc::new(ServiceState::new(Arc::new(engine), vec![two_topic_bundle()], SessionOptions::default())));
    let (_, created) = post(&app, "/sessions", json!({"bundle_id": "piano"})).await;
    let id = created["session_id"].as_str().unwrap();
    let (status, retry, body) =
        send(&app, "POST", &format!("/sessions/{id}/messages"), Some(json!({"text": "hello"}).to_string())).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(retry.as_deref(), Some("5"));
    assert_eq!(body["error"], "backend_unavailable");
    let (_, _, state) = send(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(state["turn_counter"], 0);
    assert!(state["transcript"].as_array().unwrap().is_empty());
}
