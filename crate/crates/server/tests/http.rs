use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;

use formwiki::corpus::fixture_sources;
use formwiki::policy::DEFAULT_POLICY;
use formwiki::vcstore::{objects_for_push, PushRequest, RefUpdate, DEFAULT_BRANCH};
use formwiki::wiki::{Wiki, WikiOptions, MAIN_REPO};
use formwiki_server::{router, AppState};

fn wiki() -> Arc<Wiki> {
    let w = Wiki::create(
        &fixture_sources(),
        DEFAULT_POLICY,
        &WikiOptions {
            workers: 2,
            ..Default::default()
        },
    )
    .unwrap();
    for (name, class) in [
        ("sue", "@superusers"),
        ("max", "@maintainers"),
        ("dan", "@developers"),
    ] {
        w.register(name, "key").unwrap();
        w.set_classes(name, [class]).unwrap();
    }
    w.register("uma", "key").unwrap();
    Arc::new(w)
}

async fn call(
    w: &Arc<Wiki>,
    method: &str,
    uri: &str,
    user: Option<&str>,
    body: Option<Value>,
) -> (StatusCode, Value, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(u) = user {
        req = req.header("X-User", u);
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(AppState { wiki: w.clone() })
        .oneshot(req.body(body).unwrap())
        .await
        .unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let text = String::from_utf8_lossy(&bytes).to_string();
    (
        status,
        serde_json::from_str(&text).unwrap_or(Value::Null),
        text,
    )
}

fn edit_body(repo: &str, article: &str, item: &str, text: &str) -> Value {
    json!({ "repo": repo, "article": article, "item": item, "new_text": text })
}

#[tokio::test]
async fn browse_fixture() {
    let w = wiki();
    let (s, _, html) = call(&w, "GET", "/wiki/main/article/nat", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(html.contains("add_comm"));
    let (s, _, _) = call(&w, "GET", "/wiki/main/article/nat.html", None, None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _, idx) = call(&w, "GET", "/wiki/main/article/index.html", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(idx.contains("calc"));
    let (s, v, _) = call(&w, "GET", "/wiki/main/item/calc/six", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"]["status"], "ok");
    assert_eq!(v["dependents"].as_array().unwrap().len(), 2);
    let (s, v, _) = call(&w, "GET", "/wiki/main/article/nope", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND, "{v}");
}

#[tokio::test]
async fn registration() {
    let w = wiki();
    let (s, v, _) = call(
        &w,
        "POST",
        "/register",
        None,
        Some(json!({"username": "ann", "public_key": "ssh-rsa X"})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["classes"], json!(["@users"]));
    assert_eq!(v["public_key"], "ssh-rsa X");
    let (s, v, _) = call(
        &w,
        "POST",
        "/register",
        None,
        Some(json!({"username": "ann", "public_key": "k"})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "UserExists");
}

#[tokio::test]
async fn anonymous_cannot_edit_main() {
    let w = wiki();
    let (s, v, _) = call(
        &w,
        "POST",
        "/edit",
        None,
        Some(edit_body("main", "calc", "six", "def six := 6;")),
    )
    .await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_eq!(v["code"], "PolicyDenied");
}

#[tokio::test]
async fn dry_run_predicts_the_plan() {
    let w = wiki();
    let (s, v, _) = call(
        &w,
        "POST",
        "/edit?dry_run=true",
        Some("max"),
        Some(edit_body("main", "calc", "six", "def six := 3 * nat.two;")),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["class"], "statement_change");
    assert_eq!(
        v["affected"],
        json!(["calc#six", "calc#six_is_six", "calc#use"])
    );
    assert_eq!(
        v["schedule"],
        json!([["calc#six"], ["calc#six_is_six", "calc#use"]])
    );
    assert!(w.orchestrator().all_jobs().is_empty());
}

#[tokio::test]
async fn edit_job_lifecycle() {
    let w = wiki();
    let (s, v, _) = call(
        &w,
        "POST",
        "/edit",
        Some("max"),
        Some(edit_body("main", "nat", "two", "def two := 2; -- same")),
    )
    .await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let id = v["job_id"].as_u64().unwrap();
    let (_, q, _) = call(&w, "GET", "/queue", Some("max"), None).await;
    assert_eq!(q.as_array().unwrap().len(), 1);
    let (s, v, _) = call(&w, "DELETE", &format!("/jobs/{id}"), Some("dan"), None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_eq!(v["code"], "NotOwner");
    let w2 = w.clone();
    tokio::task::spawn_blocking(move || w2.orchestrator().run_pending())
        .await
        .unwrap();
    let (_, v, _) = call(&w, "GET", &format!("/jobs/{id}"), None, None).await;
    assert_eq!(v["state"], "succeeded", "{v}");
    let (s, v, _) = call(&w, "DELETE", &format!("/jobs/{id}"), Some("max"), None).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    let (s, _, _) = call(&w, "GET", "/jobs/999", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn failing_edit_reports_diagnostics() {
    let w = wiki();
    let (_, v, _) = call(
        &w,
        "POST",
        "/edit",
        Some("max"),
        Some(edit_body("main", "calc", "six", "def six := 7;")),
    )
    .await;
    let id = v["job_id"].as_u64().unwrap();
    let w2 = w.clone();
    tokio::task::spawn_blocking(move || w2.orchestrator().run_pending())
        .await
        .unwrap();
    let (_, v, _) = call(&w, "GET", &format!("/jobs/{id}"), None, None).await;
    assert_eq!(v["state"], "failed");
    let diags = v["diagnostics"].as_array().unwrap();
    assert!(
        diags
            .iter()
            .any(|d| d["item"] == "calc#six_is_six" && d["stage"] == "verify"),
        "{v}"
    );
}

#[tokio::test]
async fn stats_endpoint() {
    let w = wiki();
    let (_, v, _) = call(&w, "GET", "/stats/main?granularity=item", None, None).await;
    assert_eq!(
        (v["deps"].as_u64(), v["tdeps"].as_u64()),
        (Some(8), Some(11))
    );
    let (_, v, _) = call(&w, "GET", "/stats/main?granularity=file", None, None).await;
    assert_eq!(v["deps"].as_u64(), Some(15));
    let (s, _, _) = call(&w, "GET", "/stats/nope", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn repositories() {
    let w = wiki();
    let (s, v, _) = call(
        &w,
        "POST",
        "/repos",
        Some("uma"),
        Some(json!({"name": "user/uma/notes"})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["creator"], "uma");
    let (s, _, _) = call(
        &w,
        "POST",
        "/repos",
        Some("uma"),
        Some(json!({"name": "feature/x"})),
    )
    .await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, _, _) = call(
        &w,
        "POST",
        "/repos",
        Some("dan"),
        Some(json!({"name": "feature/x"})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    let (s, _, _) = call(
        &w,
        "POST",
        "/repos",
        Some("dan"),
        Some(json!({"name": "feature/x"})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, v, _) = call(&w, "GET", "/repos", None, None).await;
    assert_eq!(v, json!(["feature/x", "main", "user/uma/notes"]));
    let (s, _, html) = call(&w, "GET", "/wiki/user/uma/notes/article/calc", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(html.contains("six_is_six"));
}

#[tokio::test]
async fn push_endpoint() {
    let w = wiki();
    let client = Wiki::create(
        &fixture_sources(),
        DEFAULT_POLICY,
        &WikiOptions {
            workers: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let head = client.vc().require_ref(MAIN_REPO, DEFAULT_BRANCH).unwrap();
    let vol = client.vc().repo_info(MAIN_REPO).unwrap().backend;
    client
        .cow()
        .write_file(
            vol,
            "src/extra.fml",
            b"import nat;\ndef nine := nat.three * 3;\n",
        )
        .unwrap();
    let new = client
        .vc()
        .commit_tree(MAIN_REPO, Some(head), vol, "max", "add extra")
        .unwrap();
    let objects = objects_for_push(client.vc().objects(), &new, Some(&head)).unwrap();
    let req = PushRequest::new(
        &RefUpdate {
            repo: "main".into(),
            branch: DEFAULT_BRANCH.into(),
            old: Some(head),
            new,
            pusher: "max".into(),
        },
        &objects,
    );
    let body = serde_json::to_value(&req).unwrap();
    let (s, _, _) = call(&w, "POST", "/push", Some("dan"), Some(body.clone())).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, v, _) = call(&w, "POST", "/push?mode=quick", Some("max"), Some(body)).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let id = v["job_id"].as_u64().unwrap();
    let w2 = w.clone();
    tokio::task::spawn_blocking(move || w2.orchestrator().run_pending())
        .await
        .unwrap();
    let (_, v, _) = call(&w, "GET", &format!("/jobs/{id}"), None, None).await;
    assert_eq!(v["state"], "succeeded", "{v}");
    assert_eq!(v["mode"], "full");
    let (_, refs, _) = call(&w, "GET", "/refs/main", None, None).await;
    assert_eq!(refs["master"], new.to_hex());
    let (s, _, _) = call(&w, "GET", "/wiki/main/article/extra", None, None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn admin_endpoints() {
    let w = wiki();
    let (s, _, _) = call(
        &w,
        "POST",
        "/admin/clone-bench",
        Some("uma"),
        Some(json!({"n": 1})),
    )
    .await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, v, _) = call(
        &w,
        "POST",
        "/admin/clone-bench",
        Some("sue"),
        Some(json!({"n": 2})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["n"], 2);
    assert!(v["data_bytes"].as_f64().unwrap() > 0.0);
    let (s, v, _) = call(&w, "POST", "/mirror/push", None, Some(json!({}))).await;
    assert!(s.is_client_error(), "{v}");
}

/// Every (user, repo, endpoint) triple is answered as the access rules say.
#[tokio::test]
async fn endpoints_follow_the_access_rules() {
    let w = wiki();
    let admin = w.principal(Some("admin"));
    for r in ["devel", "feature/x", "release/x"] {
        w.create_repo(&admin, r).unwrap();
    }
    w.create_repo(&w.principal(Some("uma")), "user/uma/notes")
        .unwrap();
    // Expected write access, written out from the rules.
    let writers: &[(&str, &[&str])] = &[
        ("main", &["sue", "max", "admin"]),
        ("devel", &["sue", "max", "dan", "admin"]),
        ("feature/x", &["sue", "max", "dan", "admin"]),
        ("release/x", &["sue", "max", "admin"]),
        ("user/uma/notes", &["uma", "admin"]),
    ];
    for (repo, allowed) in writers {
        for user in [
            Some("sue"),
            Some("max"),
            Some("dan"),
            Some("uma"),
            Some("admin"),
            None,
        ] {
            let may_write = user.is_some_and(|u| allowed.contains(&u));
            let (s, v, _) = call(&w, "GET", &format!("/wiki/{repo}/article/nat"), user, None).await;
            assert_eq!(s, StatusCode::OK, "{user:?} read {repo}: {v}");
            let (s, v, _) = call(&w, "GET", &format!("/stats/{repo}"), user, None).await;
            assert_eq!(s, StatusCode::OK, "{user:?} stats {repo}: {v}");
            let (s, v, _) = call(
                &w,
                "POST",
                "/edit",
                user,
                Some(edit_body(repo, "nat", "two", "def two := 2;")),
            )
            .await;
            let want = if may_write {
                StatusCode::ACCEPTED
            } else {
                StatusCode::FORBIDDEN
            };
            assert_eq!(s, want, "{user:?} edit {repo}: {v}");
        }
    }
}
