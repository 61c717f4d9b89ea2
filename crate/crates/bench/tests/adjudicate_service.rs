use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Barrier};

use plate_bench::adjudicate::{router, ReviewView, Service, TaskView};
use plate_bench::manifest::{load_manifest, save_manifest, DatasetManifest, ImageRecord};
use plate_core::adjudicate::{TaskBoard, TaskStatus};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

struct Fixture {
    _dir: tempfile::TempDir,
    manifest: PathBuf,
    events: PathBuf,
}

fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    let mut m = DatasetManifest::new("to-label");
    for i in 0..n {
        let path = format!("images/img_{i}.png");
        std::fs::write(dir.path().join(&path), format!("png bytes {i}")).unwrap();
        m.records.push(ImageRecord {
            id: format!("img_{i}"),
            path,
            label: None,
            width_px: 120,
            height_px: 50,
            tags: BTreeSet::new(),
            plates: Vec::new(),
        });
    }
    std::fs::write(dir.path().join("secret.txt"), "not for you").unwrap();
    let manifest = dir.path().join("manifest.jsonl");
    save_manifest(&m, &manifest).unwrap();
    let events = dir.path().join("events.jsonl");
    Fixture { _dir: dir, manifest, events }
}

fn serve(f: &Fixture) -> (String, Arc<Service>) {
    let svc = Arc::new(Service::open(&f.manifest, &f.events).unwrap());
    let app = router(svc.clone());
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (format!("http://{}", rx.recv().unwrap()), svc)
}

fn label(c: &Client, base: &str, task: &str, annotator: &str, l: &str) -> (StatusCode, Value) {
    let r = c
        .post(format!("{base}/tasks/{task}/label"))
        .json(&json!({ "annotator": annotator, "label": l }))
        .send()
        .unwrap();
    (r.status(), r.json().unwrap_or(Value::Null))
}

fn list(c: &Client, base: &str, status: &str) -> Vec<ReviewView> {
    c.get(format!("{base}/tasks?status={status}")).send().unwrap().json().unwrap()
}

#[test]
fn labeling_review_and_export_flow() {
    let f = fixture(3);
    let (base, _svc) = serve(&f);
    let c = Client::new();

    let next: TaskView = c.get(format!("{base}/tasks/next?annotator=ann1")).send().unwrap().json().unwrap();
    assert_eq!(next.id, "img_0");
    assert_eq!(next.image_url, "/images/images/img_0.png");
    let img = c.get(format!("{base}{}", next.image_url)).send().unwrap();
    assert_eq!(img.status(), StatusCode::OK);
    assert_eq!(img.bytes().unwrap().as_ref(), b"png bytes 0");
    for bad in ["/images/secret.txt", "/images/manifest.jsonl", "/images/images/../secret.txt"] {
        assert_eq!(c.get(format!("{base}{bad}")).send().unwrap().status(), StatusCode::NOT_FOUND, "{bad}");
    }

    // img_0 unanimous, img_1 two of three, img_2 a conflict at position 6
    let plan = [
        ("img_0", ["ABC1234", "abc 1234", "ABC1234"]),
        ("img_1", ["WXY9876", "WXY9875", "WXY9876"]),
        ("img_2", ["PQR1111", "PQR1112", "PQR1113"]),
    ];
    for (task, labels) in plan {
        for (who, l) in ["ann1", "ann2", "ann3"].iter().zip(labels) {
            let (status, body) = label(&c, &base, task, who, l);
            assert_eq!(status, StatusCode::OK, "{body}");
            if *who == "ann1" {
                // nobody's label is visible while the task is pending
                let pending = c.get(format!("{base}/tasks?status=pending")).send().unwrap().text().unwrap();
                assert!(!pending.contains(&l.to_uppercase().replace(' ', "")), "{pending}");
                assert!(!pending.contains("ann1"), "{pending}");
            }
        }
    }
    assert_eq!(
        c.get(format!("{base}/tasks/next?annotator=ann1")).send().unwrap().status(),
        StatusCode::NO_CONTENT
    );

    let review = list(&c, &base, "needs_review");
    assert_eq!(review.len(), 1);
    assert_eq!(review[0].id, "img_2");
    assert_eq!(review[0].conflict_positions, [6]);
    assert_eq!(review[0].submissions.len(), 3);

    let blocked = c.get(format!("{base}/export")).send().unwrap();
    assert_eq!(blocked.status(), StatusCode::CONFLICT);
    let body: Value = blocked.json().unwrap();
    assert_eq!(body["unresolved"], json!(["img_2"]));

    let r = c
        .post(format!("{base}/tasks/img_2/resolve"))
        .json(&json!({ "reviewer": "rev", "label": "PQR1111" }))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let resolved: ReviewView = r.json().unwrap();
    assert!(resolved.review_override);
    assert!(list(&c, &base, "needs_review").is_empty());

    let done = list(&c, &base, "resolved");
    let labels: Vec<_> = done.iter().map(|t| (t.id.as_str(), t.label.clone().unwrap(), t.review_override)).collect();
    assert_eq!(
        labels,
        [
            ("img_0", "ABC1234".to_string(), false),
            ("img_1", "WXY9876".to_string(), false),
            ("img_2", "PQR1111".to_string(), true)
        ]
    );

    let export = c.get(format!("{base}/export")).send().unwrap();
    assert_eq!(export.status(), StatusCode::OK);
    let out = f.manifest.with_file_name("exported.jsonl");
    std::fs::write(&out, export.bytes().unwrap()).unwrap();
    let m = load_manifest(&out).unwrap();
    let got: Vec<_> = m.records.iter().map(|r| r.label.as_ref().unwrap().text()).collect();
    assert_eq!(got, ["ABC1234", "WXY9876", "PQR1111"]);
}

#[test]
fn invalid_actions_are_rejected() {
    let f = fixture(1);
    let (base, svc) = serve(&f);
    let c = Client::new();
    assert_eq!(label(&c, &base, "img_0", "ann1", "ABC1234").0, StatusCode::OK);
    assert_eq!(label(&c, &base, "img_0", "ann1", "ABC1235").0, StatusCode::CONFLICT);
    assert_eq!(label(&c, &base, "nope", "ann2", "ABC1234").0, StatusCode::NOT_FOUND);
    assert_eq!(label(&c, &base, "img_0", "ann2", "  ").0, StatusCode::BAD_REQUEST);
    assert_eq!(label(&c, &base, "img_0", "ann2", "AB-12$").0, StatusCode::BAD_REQUEST);
    assert_eq!(label(&c, &base, "img_0", "", "ABC1234").0, StatusCode::BAD_REQUEST);
    let r = c
        .post(format!("{base}/tasks/img_0/resolve"))
        .json(&json!({ "reviewer": "rev", "label": "ABC1234" }))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    assert_eq!(c.get(format!("{base}/tasks?status=bogus")).send().unwrap().status(), StatusCode::BAD_REQUEST);
    assert_eq!(c.get(format!("{base}/tasks/next")).send().unwrap().status(), StatusCode::BAD_REQUEST);
    // rejected actions leave no trace
    assert_eq!(svc.board().get("img_0").unwrap().submissions.len(), 1);
    let replayed = replay(&f.events);
    assert_eq!(replayed, svc.board());
}

fn replay(events: &Path) -> TaskBoard {
    let text = std::fs::read_to_string(events).unwrap();
    let events: Vec<_> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    TaskBoard::replay(&events).unwrap()
}

#[test]
fn concurrent_third_submissions_vote_once() {
    let f = fixture(1);
    let (base, svc) = serve(&f);
    let c = Client::new();
    label(&c, &base, "img_0", "ann1", "ABC1234");
    label(&c, &base, "img_0", "ann2", "ABC1234");
    let racers = 8;
    let barrier = Arc::new(Barrier::new(racers));
    let handles: Vec<_> = (0..racers)
        .map(|i| {
            let (base, barrier) = (base.clone(), barrier.clone());
            std::thread::spawn(move || {
                let c = Client::new();
                barrier.wait();
                label(&c, &base, "img_0", &format!("late{i}"), "ABC1299").0
            })
        })
        .collect();
    let statuses: Vec<StatusCode> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::OK).count(), 1, "{statuses:?}");
    assert!(statuses.iter().all(|s| *s == StatusCode::OK || *s == StatusCode::CONFLICT));
    let log = std::fs::read_to_string(&f.events).unwrap();
    assert_eq!(log.matches("\"event\":\"voted\"").count(), 1);
    let task = svc.board().get("img_0").unwrap().clone();
    assert_eq!(task.submissions.len(), 3);
    assert_eq!(task.status, TaskStatus::Resolved);
    assert_eq!(task.resolved_label.unwrap().text(), "ABC1234");
}

#[test]
fn restart_replays_the_log() {
    let f = fixture(2);
    let before = {
        let (base, svc) = serve(&f);
        let c = Client::new();
        label(&c, &base, "img_0", "ann1", "ABC1234");
        label(&c, &base, "img_0", "ann2", "ABD1234");
        label(&c, &base, "img_0", "ann3", "ABE1234");
        label(&c, &base, "img_1", "ann1", "XYZ1");
        svc.board()
    };
    let again = Service::open(&f.manifest, &f.events).unwrap();
    assert_eq!(again.board(), before);
    assert_eq!(
        serde_json::to_string(&again.board().tasks().collect::<Vec<_>>()).unwrap(),
        serde_json::to_string(&before.tasks().collect::<Vec<_>>()).unwrap()
    );
    drop(again);

    // a crash mid-append leaves half a line behind
    let mut text = std::fs::read_to_string(&f.events).unwrap();
    let intact = text.len();
    text.push_str("{\"event\":\"submitted\",\"task\":\"img_1\",\"annot");
    std::fs::write(&f.events, &text).unwrap();
    let again = Service::open(&f.manifest, &f.events).unwrap();
    assert_eq!(again.board(), before);
    assert_eq!(std::fs::metadata(&f.events).unwrap().len(), intact as u64);
    drop(again);

    // damage anywhere else is refused
    std::fs::write(&f.events, text.replacen("{", "[", 1)).unwrap();
    assert!(Service::open(&f.manifest, &f.events).is_err());
}
