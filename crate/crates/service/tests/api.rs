use std::net::SocketAddr;
use std::path::Path;
use std::time::{Duration, Instant};

use clicksim_core::protocol::{Prompt, Response, ResponseKind};
use clicksim_core::session::{simulate_study, SessionRecord, SessionState};
use clicksim_core::subject::{default_population, Answer, Percept};
use clicksim_service::store::{load_session, session_path};
use clicksim_service::telemetry::{Frame, TelemetryEvent};
use clicksim_service::{serve, ServeConfig};
use futures_util::{SinkExt, StreamExt};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio_tungstenite::tungstenite::Message;

struct Server {
    base: String,
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<()>,
}

impl Server {
    async fn start(dir: &Path) -> Server {
        let (bound_tx, bound_rx) = oneshot::channel();
        let (stop, stop_rx) = oneshot::channel::<()>();
        let config = ServeConfig {
            addr: "127.0.0.1:0".parse().unwrap(),
            data_dir: dir.to_owned(),
        };
        let task = tokio::spawn(async move {
            serve(
                config,
                |a| bound_tx.send(a).unwrap(),
                async {
                    let _ = stop_rx.await;
                },
            )
            .await
            .unwrap();
        });
        let addr = bound_rx.await.unwrap();
        Server {
            base: format!("http://{addr}/api/v1"),
            addr,
            stop: Some(stop),
            task,
        }
    }

    async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.task.await.unwrap();
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

fn client() -> reqwest::Client {
    reqwest::Client::new()
}

async fn create_live(s: &Server, label: &str, seed: u64) -> Value {
    let r = client()
        .post(s.url("/sessions"))
        .json(&json!({"mode": "LIVE", "subject_label": label, "seed": seed}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    r.json().await.unwrap()
}

async fn next(s: &Server, id: &str) -> Option<Prompt> {
    let v: Value = client().get(s.url(&format!("/sessions/{id}/next"))).send().await.unwrap().json().await.unwrap();
    serde_json::from_value(v["prompt"].clone()).unwrap()
}

fn scripted(p: &Prompt) -> Response {
    match p.expects {
        ResponseKind::Judgment => Response::Judgment {
            acceptable: if (11..=101).contains(&p.duration_ms()) { Answer::Yes } else { Answer::No },
            percept: if p.duration_ms() <= 61 { Percept::Pulse } else { Percept::Oscillation },
        },
        ResponseKind::Rating => Response::Rating {
            rating: (7 - (p.duration_ms() as i64 - 41).abs().min(60) as u8 / 10).max(1),
        },
    }
}

async fn answer(s: &Server, id: &str, index: usize, response: Response) -> reqwest::Response {
    client()
        .post(s.url(&format!("/sessions/{id}/responses")))
        .json(&json!({"trial_index": index, "response": response, "timestamp_ms": 1000 * index as u64}))
        .send()
        .await
        .unwrap()
}

async fn answer_n(s: &Server, id: &str, n: usize) {
    for _ in 0..n {
        let p = next(s, id).await.unwrap();
        let r = answer(s, id, p.trial_index, scripted(&p)).await;
        assert_eq!(r.status(), StatusCode::OK, "{}", r.text().await.unwrap());
    }
}

fn stored(dir: &Path, id: &str) -> SessionRecord {
    load_session(&session_path(dir, id)).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_roster() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let h: Value = client().get(s.url("/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(h["status"], "ok");
    let roster: Value = client().get(s.url("/roster")).send().await.unwrap().json().await.unwrap();
    assert_eq!(roster.as_array().unwrap().len(), 10);
    let missing = client().get(s.url("/sessions/nope")).send().await.unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn rating_in_section_one_is_rejected_with_phase() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let rec = create_live(&s, "P01", 3).await;
    let id = rec["session_id"].as_str().unwrap();
    let r = answer(&s, id, 0, Response::Rating { rating: 5 }).await;
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["phase"], "section1 expects YES/NO + percept");
    assert_eq!(stored(dir.path(), id).trials.len(), 0);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn duplicate_submission_replays_the_ack() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let id = create_live(&s, "P02", 1).await["session_id"].as_str().unwrap().to_owned();
    let p = next(&s, &id).await.unwrap();
    let first: Value = answer(&s, &id, 0, scripted(&p)).await.json().await.unwrap();
    assert_eq!(first["ack"]["duplicate"], false);
    let again: Value = answer(&s, &id, 0, scripted(&p)).await.json().await.unwrap();
    assert_eq!(again["ack"]["duplicate"], true);
    assert_eq!(again["ack"]["index"], 0);
    assert_eq!(again["status"]["cursor"], 1);
    let other = Response::Judgment {
        acceptable: Answer::Yes,
        percept: Percept::Oscillation,
    };
    let differs = if scripted(&p) == other {
        Response::Judgment {
            acceptable: Answer::No,
            percept: Percept::Pulse,
        }
    } else {
        other
    };
    assert_eq!(answer(&s, &id, 0, differs).await.status(), StatusCode::CONFLICT);
    let skip = answer(&s, &id, 5, scripted(&p)).await;
    assert_eq!(skip.status(), StatusCode::CONFLICT);
    assert_eq!(skip.json::<Value>().await.unwrap()["expected_index"], 1);
    assert_eq!(stored(dir.path(), &id).trials.len(), 1);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn full_block_persists_both_answers() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let id = create_live(&s, "P03", 11).await["session_id"].as_str().unwrap().to_owned();
    answer_n(&s, &id, 26).await;
    let rec = stored(dir.path(), &id);
    assert_eq!(rec.trials.len(), 26);
    assert!(rec.trials.iter().all(|t| t.block == Some(0)
        && matches!(t.response, Response::Judgment { .. })
        && t.responder == "operator"));
    rec.verify().unwrap();
    let csv = client().get(s.url(&format!("/sessions/{id}/trials.csv"))).send().await.unwrap();
    assert!(csv.headers()["content-type"].to_str().unwrap().starts_with("text/csv"));
    assert_eq!(csv.text().await.unwrap().lines().count(), 27);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn restart_resumes_at_persisted_cursor() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let id = create_live(&s, "P04", 99).await["session_id"].as_str().unwrap().to_owned();
    answer_n(&s, &id, 160).await;
    let before: SessionRecord = client().get(s.url(&format!("/sessions/{id}"))).send().await.unwrap().json().await.unwrap();
    let pending = next(&s, &id).await.unwrap();
    s.stop().await;

    let s = Server::start(dir.path()).await;
    let after: SessionRecord = client().get(s.url(&format!("/sessions/{id}"))).send().await.unwrap().json().await.unwrap();
    assert_eq!(after, before);
    assert_eq!(after.status.cursor, 160);
    assert_eq!(next(&s, &id).await.unwrap(), pending);
    // run to the end on the restarted service and compare with an uninterrupted run
    let mut remaining = 0;
    while next(&s, &id).await.is_some() {
        answer_n(&s, &id, 1).await;
        remaining += 1;
    }
    let done = stored(dir.path(), &id);
    assert_eq!(done.status.state, SessionState::Complete);

    let fresh = tempfile::tempdir().unwrap();
    let s2 = Server::start(fresh.path()).await;
    create_live(&s2, "P04", 99).await;
    answer_n(&s2, &id, 160 + remaining).await;
    let reference = stored(fresh.path(), &id);
    assert_eq!(reference.rounds, done.rounds);
    assert_eq!(reference.trials.len(), done.trials.len());
    s2.stop().await;
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn simulated_session_matches_study_run_and_refuses_answers() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let r = client()
        .post(s.url("/sessions"))
        .json(&json!({"mode": "SIMULATED", "subject": "S2", "seed": 7}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    let rec: SessionRecord = r.json().await.unwrap();
    let study = simulate_study(&default_population(), 7).unwrap();
    assert_eq!(rec, study[1]);
    assert_eq!(rec.status.state, SessionState::Complete);
    let again = client()
        .post(s.url("/sessions"))
        .json(&json!({"mode": "SIMULATED", "subject": "S2", "seed": 7}))
        .send()
        .await
        .unwrap();
    assert_eq!(again.status(), StatusCode::CONFLICT);
    let refused = answer(&s, &rec.session_id, 0, Response::Rating { rating: 1 }).await;
    assert_eq!(refused.status(), StatusCode::CONFLICT);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn live_sessions_reject_simulated_responders() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let id = create_live(&s, "P05", 0).await["session_id"].as_str().unwrap().to_owned();
    let p = next(&s, &id).await.unwrap();
    let r = client()
        .post(s.url(&format!("/sessions/{id}/responses")))
        .json(&json!({"trial_index": 0, "response": scripted(&p), "responder": "sim:S1"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let bad = client()
        .post(s.url("/sessions"))
        .json(&json!({"mode": "LIVE", "subject_label": "P06", "subject": "S1"}))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), StatusCode::UNPROCESSABLE_ENTITY);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn abort_blocks_answers_until_resumed() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let id = create_live(&s, "P07", 2).await["session_id"].as_str().unwrap().to_owned();
    answer_n(&s, &id, 3).await;
    let st: Value = client().post(s.url(&format!("/sessions/{id}/abort"))).send().await.unwrap().json().await.unwrap();
    assert_eq!(st["state"], "aborted");
    let p = next(&s, &id).await.unwrap();
    assert_eq!(answer(&s, &id, p.trial_index, scripted(&p)).await.status(), StatusCode::CONFLICT);
    assert_eq!(stored(dir.path(), &id).status.state, SessionState::Aborted);
    client().post(s.url(&format!("/sessions/{id}/resume"))).send().await.unwrap();
    assert_eq!(answer(&s, &id, p.trial_index, scripted(&p)).await.status(), StatusCode::OK);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_sessions_keep_separate_logs() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let ids: Vec<String> = futures_util::future::join_all((0..4).map(|i| {
        let s = &s;
        async move { create_live(s, &format!("C{i}"), i).await["session_id"].as_str().unwrap().to_owned() }
    }))
    .await;
    futures_util::future::join_all(ids.iter().map(|id| answer_n(&s, id, 40))).await;
    for (i, id) in ids.iter().enumerate() {
        let rec = stored(dir.path(), id);
        assert_eq!(rec.trials.len(), 40);
        assert!(rec.trials.iter().enumerate().all(|(k, t)| t.index == k));
        assert_eq!(rec.seed, i as u64);
        rec.verify().unwrap();
    }
    let list: Vec<Value> = client().get(s.url("/sessions")).send().await.unwrap().json().await.unwrap();
    assert_eq!(list.len(), 4);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn analysis_over_complete_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let mut ids = Vec::new();
    for subject in default_population() {
        let r = client()
            .post(s.url("/sessions"))
            .json(&json!({"mode": "SIMULATED", "subject": subject.id, "seed": 0}))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), StatusCode::CREATED);
        ids.push(r.json::<Value>().await.unwrap()["session_id"].as_str().unwrap().to_owned());
    }
    create_live(&s, "unfinished", 0).await;
    let report: Value = client().get(s.url("/analysis")).send().await.unwrap().json().await.unwrap();
    assert_eq!(report["summary"]["n_subjects"], 10);
    assert_eq!(report["summary"]["group_counts"], json!({"1": 6, "2": 3, "3": 1}));
    let overlap = client().get(s.url("/analysis/overlap.csv")).send().await.unwrap();
    assert_eq!(overlap.status(), StatusCode::OK);
    assert!(overlap.text().await.unwrap().starts_with("duty_pct,duration_ms,count"));
    let svg = client().get(s.url("/analysis/fits.svg")).send().await.unwrap();
    assert_eq!(svg.headers()["content-type"], "image/svg+xml");
    let missing = client().get(s.url("/analysis/nothing.txt")).send().await.unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
    let two: Value = client()
        .get(s.url(&format!("/analysis?sessions={},{}", ids[0], ids[3])))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(two["summary"]["n_subjects"], 2);
    let unknown = client().get(s.url("/analysis?sessions=nobody")).send().await.unwrap();
    assert_eq!(unknown.status(), StatusCode::NOT_FOUND);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn blind_prompt_hides_stimulus() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let id = create_live(&s, "P08", 0).await["session_id"].as_str().unwrap().to_owned();
    let v: Value = client()
        .get(s.url(&format!("/sessions/{id}/next?blind=true")))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(v["prompt"].get("params").is_none());
    assert_eq!(v["prompt"]["expects"], "judgment");
    s.stop().await;
}

async fn telemetry(addr: SocketAddr, request: Value, stop_after: Option<usize>) -> (Vec<Frame>, Vec<Value>, Duration) {
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/api/v1/telemetry")).await.unwrap();
    let start = Instant::now();
    ws.send(Message::Text(request.to_string().into())).await.unwrap();
    let mut frames = Vec::new();
    let mut errors = Vec::new();
    while let Some(msg) = ws.next().await {
        match msg.unwrap() {
            Message::Text(t) => {
                let v: Value = serde_json::from_str(&t).unwrap();
                if v.get("error").is_some() {
                    errors.push(v);
                } else {
                    frames.push(serde_json::from_value(v).unwrap());
                    if Some(frames.len()) == stop_after {
                        ws.send(Message::Text(json!({"type": "stop"}).to_string().into())).await.unwrap();
                    }
                }
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    (frames, errors, start.elapsed())
}

#[tokio::test(flavor = "multi_thread")]
async fn telemetry_stream_orders_led_and_trigger() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let (frames, errors, _) = telemetry(s.addr, json!({"realtime": false}), None).await;
    assert!(errors.is_empty());
    let on: Vec<usize> = frames
        .iter()
        .enumerate()
        .filter(|(_, f)| f.event == Some(TelemetryEvent::LedOn))
        .map(|(i, _)| i)
        .collect();
    let trig: Vec<usize> = frames.iter().enumerate().filter(|(_, f)| f.is_trigger()).map(|(i, _)| i).collect();
    assert_eq!(on.len(), 1);
    assert_eq!(trig.len(), 1);
    assert!(trig[0] > on[0]);
    assert!(frames[on[0]].normal_mn >= 600.0 && frames[on[0] - 1].normal_mn < 600.0);
    assert_eq!(frames.iter().filter(|f| !f.is_trigger()).count(), 50);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn telemetry_paces_at_frame_rate_and_stops_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let (frames, _, took) = telemetry(s.addr, json!({}), None).await;
    assert!(frames.len() >= 50);
    assert!(took >= Duration::from_millis(900), "{took:?}");
    let (frames, _, took) = telemetry(s.addr, json!({}), Some(5)).await;
    assert!(frames.len() < 20, "{}", frames.len());
    assert!(took < Duration::from_millis(800), "{took:?}");
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn telemetry_follows_live_session_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let id = create_live(&s, "P09", 0).await["session_id"].as_str().unwrap().to_owned();
    let (frames, errors, _) = telemetry(s.addr, json!({"realtime": false, "session_id": id}), None).await;
    assert!(errors.is_empty());
    assert_eq!(frames.iter().filter(|f| f.is_trigger()).count(), 1);
    let (frames, errors, _) = telemetry(s.addr, json!({"session_id": "missing"}), None).await;
    assert!(frames.is_empty());
    assert_eq!(errors.len(), 1);
    let (_, errors, _) = telemetry(s.addr, json!({"frame_hz": -1.0}), None).await;
    assert_eq!(errors.len(), 1);
    let (_, errors, _) = telemetry(s.addr, json!({"bogus": 1}), None).await;
    assert_eq!(errors.len(), 1);
    s.stop().await;
}
