use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use caspi_core::io::to_json_lines;
use caspi_core::labels::{read_journal, ContextTurn, LabelRecord, LabelStore, TaskContext, TaskRecord};
use caspi_hitl::{router, AppState, Progress, TaskView};
use http_body_util::BodyExt;
use tower::ServiceExt;

fn task(i: usize) -> TaskRecord {
    TaskRecord {
        task_id: format!("task-{i:04}"),
        context: TaskContext {
            goal: "restaurant area=north request phone".into(),
            turns: vec![ContextTurn { user: "i want food".into(), system: "what area".into() }],
        },
        c1_turns: vec![format!("first {i}")],
        c2_turns: vec![format!("second {i}")],
        dialogue_id: format!("d{i}"),
        model_seeds: [0, 1],
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    tasks: PathBuf,
    journal: PathBuf,
}

fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let tasks = dir.path().join("tasks.jsonl");
    let pool: Vec<TaskRecord> = (0..n).map(task).collect();
    std::fs::write(&tasks, to_json_lines(&pool).unwrap()).unwrap();
    let journal = dir.path().join("journal.jsonl");
    Fixture { _dir: dir, tasks, journal }
}

fn app(f: &Fixture, seed: u64) -> Router {
    router(AppState::load(&f.tasks, &f.journal, seed).unwrap(), None)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn next(app: &Router, who: &str) -> (StatusCode, Option<TaskView>) {
    let req = Request::get(format!("/api/tasks/next?annotator={who}")).body(Body::empty()).unwrap();
    let (s, body) = call(app, req).await;
    (s, (s == StatusCode::OK).then(|| serde_json::from_slice(&body).unwrap()))
}

async fn label(app: &Router, id: &str, who: &str, mu: f64) -> (StatusCode, Vec<u8>) {
    let body = serde_json::json!({ "mu_c1": mu, "annotator": who }).to_string();
    let req = Request::post(format!("/api/tasks/{id}/label")).header("content-type", "application/json").body(Body::from(body)).unwrap();
    call(app, req).await
}

async fn progress(app: &Router) -> Progress {
    let (s, body) = call(app, Request::get("/api/progress").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

fn recount(journal: &Path) -> (usize, BTreeMap<String, usize>) {
    let records = read_journal(journal).unwrap();
    let tasks: HashSet<&str> = records.iter().map(|r| r.task_id.as_str()).collect();
    let mut per = BTreeMap::new();
    for r in &records {
        *per.entry(r.annotator.clone()).or_insert(0) += 1;
    }
    (tasks.len(), per)
}

#[tokio::test]
async fn empty_pool_is_no_content() {
    let f = fixture(0);
    assert_eq!(next(&app(&f, 0), "ann").await.0, StatusCode::NO_CONTENT);
}

#[tokio::test]
async fn task_view_hides_model_identity() {
    let f = fixture(1);
    let app = app(&f, 0);
    let req = Request::get("/api/tasks/next?annotator=ann").body(Body::empty()).unwrap();
    let (s, body) = call(&app, req).await;
    assert_eq!(s, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["task_id"], "task-0000");
    assert!(v.get("model_seeds").is_none() && v.get("dialogue_id").is_none());
    let mut shown = [v["c1_turns"][0].as_str().unwrap(), v["c2_turns"][0].as_str().unwrap()];
    shown.sort();
    assert_eq!(shown, ["first 0", "second 0"]);
    assert_eq!(next(&app, "ann").await.0, StatusCode::NO_CONTENT);
    assert_eq!(next(&app, "other").await.0, StatusCode::OK);
}

#[tokio::test]
async fn oldest_unserved_task_comes_first() {
    let f = fixture(3);
    let app = app(&f, 0);
    for i in 0..3 {
        assert_eq!(next(&app, "ann").await.1.unwrap().task_id, format!("task-{i:04}"));
    }
}

#[tokio::test]
async fn labels_are_de_randomized() {
    let f = fixture(40);
    let app = app(&f, 11);
    let mut seen = [false; 2];
    for _ in 0..40 {
        let view = next(&app, "ann").await.1.unwrap();
        let i: usize = view.task_id[5..].parse().unwrap();
        let swapped = view.c1_turns[0] != format!("first {i}");
        seen[swapped as usize] = true;
        let (s, body) = label(&app, &view.task_id, "ann", 1.0).await;
        assert_eq!(s, StatusCode::CREATED);
        let stored: LabelRecord = serde_json::from_slice(&body).unwrap();
        assert_eq!(stored.mu_c1, if swapped { 0.0 } else { 1.0 });
    }
    assert!(seen[0] && seen[1], "display order never varied");
}

#[tokio::test]
async fn tie_is_stored_exactly() {
    let f = fixture(40);
    let app = app(&f, 3);
    for _ in 0..40 {
        let view = next(&app, "ann").await.1.unwrap();
        label(&app, &view.task_id, "ann", 0.5).await;
    }
    assert!(read_journal(&f.journal).unwrap().iter().all(|r| r.mu_c1 == 0.5));
}

#[tokio::test]
async fn error_statuses() {
    let f = fixture(2);
    let app = app(&f, 0);
    assert_eq!(label(&app, "task-0000", "a", 1.5).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(label(&app, "task-0000", "a", -0.1).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(label(&app, "nope", "a", 0.5).await.0, StatusCode::NOT_FOUND);
    assert_eq!(label(&app, "task-0000", "a", 0.5).await.0, StatusCode::CREATED);
    assert_eq!(label(&app, "task-0000", "a", 0.7).await.0, StatusCode::CONFLICT);
    assert_eq!(label(&app, "task-0000", "b", 0.7).await.0, StatusCode::CREATED);
    assert_eq!(read_journal(&f.journal).unwrap().len(), 2);
    // a labeled task is not offered again
    assert_eq!(next(&app, "a").await.1.unwrap().task_id, "task-0001");
}

#[tokio::test]
async fn progress_matches_journal_scan() {
    let f = fixture(40);
    let app = app(&f, 0);
    assert_eq!(progress(&app).await, Progress { total: 40, labeled: 0, per_annotator: BTreeMap::new() });
    label(&app, "task-0003", "a", 1.0).await;
    assert_eq!(progress(&app).await.labeled, 1);
    label(&app, "task-0003", "b", 0.0).await;
    label(&app, "task-0007", "b", 0.2).await;
    let p = progress(&app).await;
    let (labeled, per) = recount(&f.journal);
    assert_eq!((p.labeled, p.per_annotator), (labeled, per));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_polls_never_repeat_a_task_per_annotator() {
    let f = fixture(40);
    let app = app(&f, 5);
    let mut handles = Vec::new();
    for a in 0..6 {
        for _ in 0..3 {
            let app = app.clone();
            handles.push(tokio::spawn(async move {
                let who = format!("ann{a}");
                let mut got = Vec::new();
                while let (StatusCode::OK, Some(v)) = next(&app, &who).await {
                    got.push(v.task_id);
                }
                (who, got)
            }));
        }
    }
    let mut per: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for h in handles {
        let (who, got) = h.await.unwrap();
        per.entry(who).or_default().extend(got);
    }
    for (who, ids) in per {
        let unique: HashSet<&String> = ids.iter().collect();
        assert_eq!(unique.len(), ids.len(), "{who} was served a task twice");
        assert_eq!(ids.len(), 40, "{who} did not see every task");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn hundred_concurrent_labels_give_hundred_journal_lines() {
    let f = fixture(50);
    let app = app(&f, 9);
    let mut handles = Vec::new();
    for who in ["a", "b"] {
        for i in 0..50 {
            let app = app.clone();
            handles.push(tokio::spawn(async move {
                let mu = (i % 11) as f64 / 10.0;
                label(&app, &format!("task-{i:04}"), who, mu.min(1.0)).await.0
            }));
        }
    }
    for h in handles {
        assert_eq!(h.await.unwrap(), StatusCode::CREATED);
    }
    let records = read_journal(&f.journal).unwrap();
    assert_eq!(records.len(), 100);
    let mut content: Vec<(String, String, u64)> =
        records.iter().map(|r| (r.task_id.clone(), r.annotator.clone(), (r.mu_c1 * 10.0).round() as u64)).collect();
    content.sort();
    let mut expected: Vec<(String, String, u64)> = ["a", "b"]
        .iter()
        .flat_map(|w| (0..50).map(move |i| (format!("task-{i:04}"), w.to_string(), ((i % 11) as f64).min(10.0) as u64)))
        .collect();
    expected.sort();
    assert_eq!(content, expected);

    // a restarted service replays the journal into the same state
    let replayed = LabelStore::replay(&records).unwrap();
    let restarted = router(AppState::load(&f.tasks, &f.journal, 0).unwrap(), None);
    let p = progress(&restarted).await;
    assert_eq!(p.labeled, replayed.labeled_tasks());
    assert_eq!(p.per_annotator, replayed.per_annotator());
    assert_eq!(label(&restarted, "task-0000", "a", 0.5).await.0, StatusCode::CONFLICT);
}
