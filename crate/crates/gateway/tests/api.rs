use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use tower::ServiceExt;

use activest::cloud::{read_cloud, Cloud, CloudFormat, SceneSpec};
use activest::ensemble::read_summary;
use activest::labels::{read_journal, Annotation, AnnotationSource, Journal};
use activest::pipeline::{load_dataset_clouds, DatasetSource, ExperimentConfig, Seeds};
use activest::sampler::{Budget, QuerySet};
use activest_gateway::server::{router, AppState, LabelIn, StatusBody};

fn small_config() -> ExperimentConfig {
    let mut spec = SceneSpec::indoor(1);
    spec.surface_density = 60.0;
    spec.points_per_object = 300;
    let mut c = ExperimentConfig {
        dataset: DatasetSource::Synthetic { spec, scenes: 2, seed: 11 },
        budget: Budget { total_n: 8, iterations_k: 2, ..Budget::default() },
        hidden: vec![8],
        k_versions: 2,
        train_augmented_versions: 1,
        seeds: Seeds::new(5),
        ..ExperimentConfig::default()
    };
    c.schedule.steps = 40;
    c
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn create(app: &Router, config: &ExperimentConfig) -> String {
    let (status, body) = call(app, "POST", "/api/v1/experiments", Some(config.to_json())).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    v["id"].as_str().unwrap().to_string()
}

async fn status_of(app: &Router, id: &str) -> StatusBody {
    let (status, body) = call(app, "GET", &format!("/api/v1/experiments/{id}/status"), None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

async fn wait_until(app: &Router, id: &str, pred: impl Fn(&StatusBody) -> bool) -> StatusBody {
    for _ in 0..1200 {
        let s = status_of(app, id).await;
        assert!(s.error.is_none(), "training failed: {:?}", s.error);
        if pred(&s) {
            return s;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("experiment {id} did not reach the expected state");
}

async fn queries(app: &Router, id: &str) -> QuerySet {
    let (status, body) = call(app, "GET", &format!("/api/v1/experiments/{id}/queries"), None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    QuerySet::from_json(std::str::from_utf8(&body).unwrap()).unwrap()
}

fn ground_truth(config: &ExperimentConfig) -> Vec<Cloud> {
    load_dataset_clouds(&config.dataset).unwrap().0
}

fn answers(q: &QuerySet, clouds: &[Cloud]) -> Vec<LabelIn> {
    q.queries
        .iter()
        .map(|query| {
            let cloud = clouds.iter().find(|c| c.scene_id() == query.scene).unwrap();
            LabelIn {
                scene: query.scene.clone(),
                point: query.point,
                class_id: cloud.gt_semantic().unwrap()[query.point as usize],
            }
        })
        .collect()
}

async fn post_labels(app: &Router, id: &str, labels: &[LabelIn]) -> (StatusCode, Vec<u8>) {
    call(app, "POST", &format!("/api/v1/experiments/{id}/labels"), Some(serde_json::to_string(labels).unwrap())).await
}

async fn open(dir: &Path) -> (Arc<AppState>, Router) {
    let state = AppState::open(dir).await.unwrap();
    let app = router(state.clone());
    (state, app)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_round_trip_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let (_state, app) = open(dir.path()).await;
    let config = small_config();
    let gt = ground_truth(&config);
    let id = create(&app, &config).await;

    let (status, body) = call(&app, "GET", "/api/v1/experiments", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8_lossy(&body).contains(&id));

    let s = status_of(&app, &id).await;
    assert_eq!((s.iteration, s.budget_used), (1, 0));
    let q1 = queries(&app, &id).await;
    assert_eq!(q1.iteration, 1);
    assert_eq!(q1.queries.len(), 4);

    let (status, body) = post_labels(&app, &id, &answers(&q1, &gt)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let ack: StatusBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(serde_json::to_value(ack.status).unwrap(), "training");
    assert_eq!(ack.budget_used, 4);

    let s = wait_until(&app, &id, |s| s.iteration == 2).await;
    assert_eq!(s.budget_used, 4);
    let q2 = queries(&app, &id).await;
    assert_eq!(q2.iteration, 2);

    let (status, body) = call(&app, "GET", &format!("/api/v1/experiments/{id}/scene/scene000/heatmap"), None).await;
    assert_eq!(status, StatusCode::OK);
    let summary = read_summary(&mut body.as_slice()).unwrap();
    assert_eq!(summary.n, gt[0].len());
    assert_eq!(summary.mean_probs.len(), summary.n * summary.c);
    assert_eq!(summary.uncertainty.len(), summary.n);

    let (status, _) = post_labels(&app, &id, &answers(&q2, &gt)).await;
    assert_eq!(status, StatusCode::OK);
    let s = wait_until(&app, &id, |s| serde_json::to_value(s.status).unwrap() == "done").await;
    assert_eq!(s.budget_used, 8);

    let (status, body) = call(&app, "GET", &format!("/api/v1/experiments/{id}/metrics"), None).await;
    assert_eq!(status, StatusCode::OK);
    let csv = String::from_utf8(body).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,miou,labeled_true,labeled_pseudo,mean_loss");
    assert_eq!(lines.len(), 3);

    let (status, _) = call(&app, "GET", &format!("/api/v1/experiments/{id}/queries"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn responses_never_carry_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (_state, app) = open(dir.path()).await;
    let config = small_config();
    let gt = ground_truth(&config);
    let id = create(&app, &config).await;

    for scene in ["scene000", "scene001"] {
        let (status, body) = call(&app, "GET", &format!("/api/v1/experiments/{id}/scene/{scene}/cloud"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(&body[..5], b"ASTC1");
        let cloud = read_cloud(body.as_slice(), CloudFormat::TableBinary, scene).unwrap();
        let reference = gt.iter().find(|c| c.scene_id() == scene).unwrap();
        assert_eq!(cloud.len(), reference.len());
        assert!(cloud.gt_semantic().is_none());
        assert!(cloud.gt_instance().is_none());
    }

    let forbidden = ["class_id", "semantic", "instance", "gt"];
    for path in ["", "/status", "/queries", "/metrics"] {
        let uri = if path.is_empty() { "/api/v1/experiments".to_string() } else { format!("/api/v1/experiments/{id}{path}") };
        let (status, body) = call(&app, "GET", &uri, None).await;
        assert_eq!(status, StatusCode::OK, "{uri}");
        let text = String::from_utf8(body).unwrap();
        for word in forbidden {
            assert!(!text.contains(word), "{uri} exposes `{word}`: {text}");
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let (_state, app) = open(dir.path()).await;
    let config = small_config();
    let gt = ground_truth(&config);

    let (status, _) = call(&app, "GET", "/api/v1/experiments/nope/status", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = post_labels(&app, "nope", &[]).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let mut bad = config.clone();
    bad.budget.iterations_k = 0;
    let (status, _) = call(&app, "POST", "/api/v1/experiments", Some(bad.to_json())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let id = create(&app, &config).await;
    let (status, _) = call(&app, "GET", &format!("/api/v1/experiments/{id}/scene/nope/cloud"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", &format!("/api/v1/experiments/{id}/scene/scene000/heatmap"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let q = queries(&app, &id).await;
    let good = answers(&q, &gt);

    let mut not_pending = good.clone();
    let pending: Vec<u32> = q.queries.iter().filter(|x| x.scene == good[0].scene).map(|x| x.point).collect();
    not_pending[0].point = (0..).find(|p| !pending.contains(p)).unwrap();
    let (status, _) = post_labels(&app, &id, &not_pending).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let mut out_of_range = good.clone();
    out_of_range[0].class_id = 99;
    let (status, _) = post_labels(&app, &id, &out_of_range).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _) = post_labels(&app, &id, &good[..good.len() - 1]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _) = call(&app, "POST", &format!("/api/v1/experiments/{id}/labels"), Some("{\"x\":1}".into())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    // Nothing rejected above reached the journal or the state.
    assert_eq!(status_of(&app, &id).await.budget_used, 0);

    let (status, _) = post_labels(&app, &id, &good).await;
    assert_eq!(status, StatusCode::OK);
    // The same batch again, while training and after the iteration advanced.
    let (status, _) = post_labels(&app, &id, &good).await;
    assert_eq!(status, StatusCode::CONFLICT);
    wait_until(&app, &id, |s| s.iteration == 2).await;
    let (status, _) = post_labels(&app, &id, &good).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let journal = read_journal(dir.path().join(&id).join("journal.jsonl")).unwrap();
    assert_eq!(journal.len(), good.len());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_submissions_accept_exactly_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_state, app) = open(dir.path()).await;
    let config = small_config();
    let gt = ground_truth(&config);
    let id = create(&app, &config).await;
    let good = answers(&queries(&app, &id).await, &gt);

    let handles: Vec<_> = (0..6)
        .map(|_| {
            let (app, id, good) = (app.clone(), id.clone(), good.clone());
            tokio::spawn(async move { post_labels(&app, &id, &good).await.0 })
        })
        .collect();
    let mut codes = Vec::new();
    for h in handles {
        codes.push(h.await.unwrap());
    }
    assert_eq!(codes.iter().filter(|&&c| c == StatusCode::OK).count(), 1, "{codes:?}");
    assert!(codes.iter().all(|&c| c == StatusCode::OK || c == StatusCode::CONFLICT));
    let journal = read_journal(dir.path().join(&id).join("journal.jsonl")).unwrap();
    assert_eq!(journal.len(), good.len());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn crash_after_journal_write_replays_once() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config();
    let gt = ground_truth(&config);
    let (id, q) = {
        let (_state, app) = open(dir.path()).await;
        let id = create(&app, &config).await;
        (id.clone(), queries(&app, &id).await)
    };
    // Labels reached the journal (twice, as after a retried write) but were never acknowledged.
    let annotations: Vec<Annotation> = answers(&q, &gt)
        .into_iter()
        .map(|l| Annotation {
            scene_id: l.scene,
            point_index: l.point,
            class_id: l.class_id,
            iteration: 1,
            source: AnnotationSource::Human,
        })
        .collect();
    let mut journal = Journal::open(dir.path().join(&id).join("journal.jsonl")).unwrap();
    journal.append(&annotations).unwrap();
    journal.append(&annotations).unwrap();
    drop(journal);

    let (_state, app) = open(dir.path()).await;
    let s = wait_until(&app, &id, |s| s.iteration == 2).await;
    assert_eq!(s.budget_used, annotations.len());
    let q2 = queries(&app, &id).await;
    assert_eq!(q2.iteration, 2);
    assert!(q2.queries.iter().all(|x| !q.queries.iter().any(|y| y.scene == x.scene && y.point == x.point)));

    // A further restart after the round finished does not apply them again.
    let (_state, app) = open(dir.path()).await;
    let s = status_of(&app, &id).await;
    assert_eq!((s.iteration, s.budget_used), (2, annotations.len()));
}

#[test]
fn data_dir_precedence() {
    use activest_gateway::server::{resolve_data_dir, DATA_DIR_ENV};
    std::env::set_var(DATA_DIR_ENV, "/from/env");
    assert_eq!(resolve_data_dir(Some("/explicit".into())), Path::new("/explicit"));
    assert_eq!(resolve_data_dir(None), Path::new("/from/env"));
    std::env::remove_var(DATA_DIR_ENV);
    assert_eq!(resolve_data_dir(None), Path::new("activest-data"));
}
