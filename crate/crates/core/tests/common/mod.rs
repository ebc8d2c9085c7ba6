#![allow(dead_code)]

use std::path::Path;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use chrono::{DateTime, TimeZone, Utc};
use http_body_util::BodyExt;
use tower::ServiceExt;

use switchmon::api::{router, ApiConfig, ApiState, AuthRecord, DeviceInfo};
use switchmon::sample::{GapEvent, GapReason, Sample};
use switchmon::store::Store;

pub const USER: &str = "operator";
pub const PASSWORD: &str = "correct horse";

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 3, 1, 8, 0, 0).unwrap()
}

pub fn at(secs: i64) -> DateTime<Utc> {
    t0() + chrono::Duration::seconds(secs)
}

/// pm01: sample, gap, sample, sample. pm02: declared, empty.
pub fn write_fixture(path: &Path) {
    let mut store = Store::open(path).unwrap();
    store.ensure_table("pm01").unwrap();
    store.ensure_table("pm02").unwrap();
    store.append(Sample::from_values("pm01", at(0), [220.0, 14.0, 50.0, 0.85, 2618.0, 0.0]).into()).unwrap();
    store.append(GapEvent::new("pm01", at(1), GapReason::Timeout).into()).unwrap();
    store
        .append(Sample::from_values("pm01", at(2), [221.5, 14.0, 49.98, 0.85, 2635.85, 0.001456]).into())
        .unwrap();
    store
        .append(Sample::from_values("pm01", at(3), [219.25, 14.0, 50.02, 0.85, 2609.075, 0.002181]).into())
        .unwrap();
}

pub fn api_config(store_path: &Path, ttl: chrono::Duration) -> ApiConfig {
    ApiConfig {
        devices: vec![
            DeviceInfo { name: "pm01".into(), unit: 1 },
            DeviceInfo { name: "pm02".into(), unit: 2 },
        ],
        store_path: store_path.to_owned(),
        // low iteration count keeps the suite quick; production default is higher
        users: vec![AuthRecord::create(USER, PASSWORD, 1000)],
        token_ttl: ttl,
        static_dir: None,
    }
}

pub fn app(store_path: &Path) -> Router {
    router(ApiState::new(api_config(store_path, chrono::Duration::hours(12))), None)
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: axum::http::HeaderMap,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap()
    }

    pub fn text(&self) -> String {
        String::from_utf8(self.body.clone()).unwrap()
    }
}

pub async fn send(app: &Router, req: Request<Body>) -> Reply {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

pub fn login_request(user: &str, password: &str) -> Request<Body> {
    Request::post("/api/login")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(serde_json::json!({"username": user, "password": password}).to_string()))
        .unwrap()
}

pub async fn login(app: &Router) -> String {
    let r = send(app, login_request(USER, PASSWORD)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    r.json()["token"].as_str().unwrap().to_owned()
}

pub fn get(uri: &str, token: Option<&str>) -> Request<Body> {
    let mut b = Request::get(uri);
    if let Some(t) = token {
        b = b.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    b.body(Body::empty()).unwrap()
}
