use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use bumper_core::fixtures;
use bumper_core::pipeline::Bumper;
use bumper_server::{serve, AppState};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::oneshot;

struct Running {
    base: String,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Running {
    async fn shutdown(mut self) {
        self.stop.take().unwrap().send(()).ok();
        self.handle.await.unwrap().unwrap();
    }
}

async fn start(config: &Path, data_dir: &Path) -> Running {
    let bumper = Bumper::load(config, None).unwrap();
    let state = Arc::new(AppState::new(bumper, data_dir).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (stop, rx) = oneshot::channel();
    let handle = tokio::spawn(serve(listener, state, async move {
        rx.await.ok();
    }));
    Running { base, stop: Some(stop), handle }
}

fn measles() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixtures::MEASLES.write_to(dir.path(), false).unwrap();
    (dir, cfg)
}

async fn new_session(http: &reqwest::Client, base: &str) -> String {
    let resp = http.post(format!("{base}/sessions")).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let body: Value = resp.json().await.unwrap();
    body["session_id"].as_str().unwrap().to_string()
}

async fn ask(http: &reqwest::Client, base: &str, id: &str, query: &str) -> (StatusCode, Value) {
    let resp = http.post(format!("{base}/sessions/{id}/ask")).json(&json!({ "query": query })).send().await.unwrap();
    let status = resp.status();
    (status, resp.json().await.unwrap())
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_get_distinct_uuid_ids() {
    let (dir, cfg) = measles();
    let server = start(&cfg, &dir.path().join("state")).await;
    let http = reqwest::Client::new();
    let a = new_session(&http, &server.base).await;
    let b = new_session(&http, &server.base).await;
    assert_ne!(a, b);
    assert!(a.parse::<uuid::Uuid>().is_ok());
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn ask_classes_and_errors() {
    let (dir, cfg) = measles();
    let server = start(&cfg, &dir.path().join("state")).await;
    let http = reqwest::Client::new();
    let id = new_session(&http, &server.base).await;

    let (status, body) = ask(&http, &server.base, &id, "When should the next SIA be run in Chad?").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["check_class"], "check_flag");
    assert_eq!(body["verdict"], "pass");
    assert!(body["score"].as_f64().unwrap() > 0.5);
    assert!(body["explanation"].as_str().is_some());
    assert_eq!(body["actions_used"].as_array().unwrap().len(), 3);

    let (status, body) = ask(&http, &server.base, &id, "Is it more costly to run SIAs in France or Uganda?").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["check_class"], "out_of_scope");
    assert_eq!(body["evidence"], "No tools found");
    assert!(body["verdict"].is_null());

    let (status, _) = ask(&http, &server.base, &id, "   ").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = ask(&http, &server.base, &uuid::Uuid::new_v4().to_string(), "Chad?").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = ask(&http, &server.base, "not-a-uuid", "Chad?").await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let transcript: Value = http.get(format!("{}/sessions/{id}", server.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(transcript["thread"]["turns"].as_array().unwrap().len(), 2);
    assert_eq!(transcript["config_name"], "measles");
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn actions_are_listed() {
    let (dir, cfg) = measles();
    let server = start(&cfg, &dir.path().join("state")).await;
    let actions: Value = reqwest::get(format!("{}/actions", server.base)).await.unwrap().json().await.unwrap();
    let names: Vec<&str> = actions.as_array().unwrap().iter().map(|a| a["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["sia_months", "high_transmission_months", "low_transmission_months", "methodology_retrieval"]);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn restart_preserves_transcripts_exactly() {
    let (dir, cfg) = measles();
    let data = dir.path().join("state");
    let http = reqwest::Client::new();

    let server = start(&cfg, &data).await;
    let id = new_session(&http, &server.base).await;
    ask(&http, &server.base, &id, "When should the next SIA be run in Chad?").await;
    ask(&http, &server.base, &id, "When should SIAs be run in Antarctica?").await;
    let before = http.get(format!("{}/sessions/{id}", server.base)).send().await.unwrap().bytes().await.unwrap();
    server.shutdown().await;

    let server = start(&cfg, &data).await;
    let after = http.get(format!("{}/sessions/{id}", server.base)).send().await.unwrap().bytes().await.unwrap();
    assert_eq!(before, after);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn asks_to_one_session_are_serialized() {
    let (dir, cfg) = measles();
    let server = start(&cfg, &dir.path().join("state")).await;
    let http = reqwest::Client::new();
    let id = new_session(&http, &server.base).await;
    let queries = [
        "When should the next SIA be run in Chad?",
        "When should SIAs be run in Antarctica?",
        "Is it easier to run SIAs in Afghanistan or Pakistan?",
        "Is it more costly to run SIAs in France or Uganda?",
    ];
    let tasks: Vec<_> = queries
        .iter()
        .map(|q| {
            let (http, base, id, q) = (http.clone(), server.base.clone(), id.clone(), q.to_string());
            tokio::spawn(async move { ask(&http, &base, &id, &q).await.0 })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let transcript: Value = http.get(format!("{}/sessions/{id}", server.base)).send().await.unwrap().json().await.unwrap();
    let turns = transcript["thread"]["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 4);
    let time = |v: &Value| v.as_str().unwrap().parse::<chrono::DateTime<chrono::Utc>>().unwrap();
    for pair in turns.windows(2) {
        assert!(time(&pair[0]["answered_at"]) <= time(&pair[1]["asked_at"]), "turns overlap");
    }
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn evaluation_job_runs_to_completion() {
    let (dir, cfg) = measles();
    let server = start(&cfg, &dir.path().join("state")).await;
    let http = reqwest::Client::new();
    let resp = http
        .post(format!("{}/evaluate", server.base))
        .json(&json!({ "query": "When should the next SIA be run in Chad?", "n_answers": 2, "n_checks": 1 }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::ACCEPTED);
    let job: Value = resp.json().await.unwrap();
    let job_id = job["job_id"].as_str().unwrap();

    let mut status = Value::Null;
    for _ in 0..200 {
        status = http.get(format!("{}/evaluate/{job_id}", server.base)).send().await.unwrap().json().await.unwrap();
        if status["status"] == "done" || status["status"] == "failed" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    assert_eq!(status["status"], "done", "{status}");
    let scores = status["paths"]["scores_csv"].as_str().unwrap();
    let rows = std::fs::read_to_string(scores).unwrap().lines().count() - 1;
    assert_eq!(rows, 2);

    let resp = http.get(format!("{}/evaluate/{}", server.base, uuid::Uuid::new_v4())).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    let resp = http.post(format!("{}/evaluate", server.base)).json(&json!({ "query": "x", "variant": "bogus" })).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn storage_failure_is_a_500() {
    let (dir, cfg) = measles();
    let data = dir.path().join("state");
    let server = start(&cfg, &data).await;
    // replace the session directory with a plain file
    std::fs::remove_dir_all(data.join("sessions")).unwrap();
    std::fs::write(data.join("sessions"), "not a directory").unwrap();
    let resp = reqwest::Client::new().post(format!("{}/sessions", server.base)).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::INTERNAL_SERVER_ERROR);
    let body: Value = resp.json().await.unwrap();
    assert!(body["error"].as_str().is_some());
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn responses_never_carry_credentials() {
    const SECRET: &str = "sk-never-leak-this-0123456789";
    let (dir, cfg) = measles();
    let mut raw: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    raw["provider"]["api_key_env"] = json!("BUMPER_SERVER_TEST_SECRET");
    std::fs::write(&cfg, raw.to_string()).unwrap();
    // SAFETY: the variable name is unique to this test
    unsafe { std::env::set_var("BUMPER_SERVER_TEST_SECRET", SECRET) };

    let server = start(&cfg, &dir.path().join("state")).await;
    let http = reqwest::Client::new();
    let id = new_session(&http, &server.base).await;
    let mut bodies = vec![
        http.post(format!("{}/sessions/{id}/ask", server.base))
            .json(&json!({ "query": "When should the next SIA be run in Chad?" }))
            .send()
            .await
            .unwrap()
            .text()
            .await
            .unwrap(),
    ];
    for path in [format!("/sessions/{id}"), "/actions".to_string()] {
        bodies.push(http.get(format!("{}{path}", server.base)).send().await.unwrap().text().await.unwrap());
    }
    for body in bodies {
        assert!(!body.contains(SECRET));
    }
    server.shutdown().await;
}
