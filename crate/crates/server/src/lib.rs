//! HTTP front end of a wiki store.
//!
//! Requests are authenticated by the trusted `X-User` header; an absent
//! header is the anonymous user. Edits and pushes are queued and answered
//! with a job id; mirror deliveries and benchmarks run to completion.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::json;

use formwiki::depgraph::{DepGraphError, Granularity};
use formwiki::minilib::{ArticlePath, ItemId, Mode};
use formwiki::mirror::{DeliveryResult, MirrorDelivery, MirrorError, Peer, PeerConfig, Transport};
use formwiki::orchestrator::{DelimitedEdit, JobId, JobKind, OrchestratorError, PushJob};
use formwiki::policy::{Action, Principal, Required, VerifyPolicy};
use formwiki::render::source_path;
use formwiki::vcstore::{ObjectId, PushRequest, VcError};
use formwiki::wiki::{Wiki, WikiError, WikiOptions};

pub const USER_HEADER: &str = "x-user";

/// Error body: `{code, message}` with a matching HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "code": self.code, "message": self.message })),
        )
            .into_response()
    }
}

fn vc_error(e: &VcError) -> (StatusCode, &'static str) {
    use StatusCode as S;
    match e {
        VcError::RepoNotFound(_) => (S::NOT_FOUND, "RepoNotFound"),
        VcError::RefNotFound { .. } => (S::NOT_FOUND, "RefNotFound"),
        VcError::AlreadyExists(_) => (S::CONFLICT, "AlreadyExists"),
        VcError::InvalidName(_) => (S::BAD_REQUEST, "InvalidName"),
        VcError::PolicyDenied { .. } => (S::FORBIDDEN, "PolicyDenied"),
        VcError::NonFastForward { .. } => (S::CONFLICT, "NonFastForward"),
        VcError::StaleOld { .. } => (S::CONFLICT, "StaleOld"),
        VcError::VerificationFailed(_) => (S::UNPROCESSABLE_ENTITY, "VerificationFailed"),
        VcError::ParentUnknown(_) | VcError::MissingObject(_) => (S::BAD_REQUEST, "MissingObject"),
        VcError::Corrupt(_) => (S::BAD_REQUEST, "Corrupt"),
        VcError::Cow(_) | VcError::Io(_) => (S::INTERNAL_SERVER_ERROR, "Storage"),
    }
}

fn orch_error(e: &OrchestratorError) -> (StatusCode, &'static str) {
    use StatusCode as S;
    match e {
        OrchestratorError::UnknownJob(_) => (S::NOT_FOUND, "UnknownJob"),
        OrchestratorError::NotOwner { .. } => (S::FORBIDDEN, "NotOwner"),
        OrchestratorError::AlreadyFinished(_) => (S::CONFLICT, "AlreadyFinished"),
        OrchestratorError::SandboxBusy(_) => (S::CONFLICT, "SandboxBusy"),
        OrchestratorError::PolicyDenied { .. } => (S::FORBIDDEN, "PolicyDenied"),
        OrchestratorError::UnknownArticle(_) => (S::NOT_FOUND, "UnknownArticle"),
        OrchestratorError::UnknownItem(_) => (S::NOT_FOUND, "UnknownItem"),
        OrchestratorError::InvalidEdit(_) => (S::BAD_REQUEST, "InvalidEdit"),
        OrchestratorError::Graph(g) => graph_error(g),
        OrchestratorError::Vc(v) => vc_error(v),
        OrchestratorError::State(_) | OrchestratorError::Cow(_) => {
            (S::INTERNAL_SERVER_ERROR, "Storage")
        }
    }
}

fn graph_error(e: &DepGraphError) -> (StatusCode, &'static str) {
    match e {
        DepGraphError::UnknownItem(_) => (StatusCode::NOT_FOUND, "UnknownItem"),
        DepGraphError::CycleDetected(_) => (StatusCode::UNPROCESSABLE_ENTITY, "CycleDetected"),
        DepGraphError::NotVerifiable { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "NotVerifiable"),
        DepGraphError::Syntax { .. } => (StatusCode::BAD_REQUEST, "Syntax"),
    }
}

impl From<WikiError> for ApiError {
    fn from(e: WikiError) -> Self {
        use StatusCode as S;
        let (status, code) = match &e {
            WikiError::Denied { .. } => (S::FORBIDDEN, "PolicyDenied"),
            WikiError::NotFound(_) => (S::NOT_FOUND, "NotFound"),
            WikiError::UserExists(_) => (S::CONFLICT, "UserExists"),
            WikiError::InvalidUsername(_) => (S::BAD_REQUEST, "InvalidUsername"),
            WikiError::Unverified(_) => (S::UNPROCESSABLE_ENTITY, "VerificationFailed"),
            WikiError::Policy(_) => (S::BAD_REQUEST, "PolicySyntax"),
            WikiError::Vc(v) => vc_error(v),
            WikiError::Orchestrator(o) => orch_error(o),
            WikiError::Graph(g) => graph_error(g),
            WikiError::Mirror(m) if matches!(**m, MirrorError::UnknownPeer(_)) => {
                (S::FORBIDDEN, "UnknownPeer")
            }
            WikiError::Mirror(_) => (S::BAD_GATEWAY, "Mirror"),
            WikiError::Io(_) | WikiError::Cow(_) | WikiError::Corrupt(_) => {
                (S::INTERNAL_SERVER_ERROR, "Storage")
            }
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        WikiError::from(e).into()
    }
}

impl From<VcError> for ApiError {
    fn from(e: VcError) -> Self {
        WikiError::from(e).into()
    }
}

impl From<MirrorError> for ApiError {
    fn from(e: MirrorError) -> Self {
        WikiError::from(e).into()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Server configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerConfig {
    /// Access rules replacing the store's own, if given.
    #[serde(default)]
    pub policy_path: Option<PathBuf>,
    pub storage_root: PathBuf,
    #[serde(default)]
    pub peers: Vec<Peer>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Repository pattern -> required mode; replaces the defaults if
    /// non-empty.
    #[serde(default)]
    pub verify_policy: IndexMap<String, Required>,
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// This server's peer id (defaults to the listen address).
    #[serde(default)]
    pub peer_id: Option<String>,
    #[serde(default)]
    pub mirror_patterns: Option<Vec<String>>,
    #[serde(default)]
    pub send_trusted: bool,
    #[serde(default)]
    pub accept_trusted: bool,
    #[serde(default = "default_retry_ms")]
    pub retry_interval_ms: u64,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(4, |n| n.get())
}

fn default_listen() -> SocketAddr {
    ([127, 0, 0, 1], 8080).into()
}

fn default_retry_ms() -> u64 {
    500
}

impl ServerConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ServerConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.storage_root.is_relative() {
            cfg.storage_root = base.join(&cfg.storage_root);
        }
        if let Some(p) = &mut cfg.policy_path {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn wiki_options(&self) -> anyhow::Result<WikiOptions> {
        let mut opts = WikiOptions {
            workers: self.workers,
            ..Default::default()
        };
        if !self.verify_policy.is_empty() {
            opts.verify_policy = VerifyPolicy::from_map(&self.verify_policy)?;
        }
        Ok(opts)
    }

    pub fn peer_config(&self) -> PeerConfig {
        let mut pc = PeerConfig::new(
            self.peer_id
                .clone()
                .unwrap_or_else(|| self.listen.to_string()),
            self.peers.clone(),
        );
        if let Some(p) = &self.mirror_patterns {
            pc.mirror_patterns = p.clone();
        }
        pc.send_trusted = self.send_trusted;
        pc.accept_trusted = self.accept_trusted;
        pc
    }
}

/// Mirror deliveries over `POST <endpoint>/mirror/push`.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    /// Must not be called from inside an async runtime.
    pub fn new(timeout: Duration) -> Self {
        Self {
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .expect("http client"),
        }
    }
}

impl Transport for HttpTransport {
    fn deliver(
        &self,
        peer: &Peer,
        delivery: &MirrorDelivery,
    ) -> formwiki::mirror::Result<DeliveryResult> {
        let url = format!("{}/mirror/push", peer.endpoint.trim_end_matches('/'));
        let unreachable = |e: String| MirrorError::PeerUnreachable(peer.id.clone(), e);
        let resp = self
            .client
            .post(url)
            .json(delivery)
            .send()
            .map_err(|e| unreachable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(unreachable(format!("status {status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Ok(DeliveryResult::Rejected {
                reason: format!("{status}: {body}"),
            });
        }
        resp.json().map_err(|e| unreachable(e.to_string()))
    }
}

#[derive(Clone)]
pub struct AppState {
    pub wiki: Arc<Wiki>,
}

fn principal(state: &AppState, headers: &HeaderMap) -> Principal {
    let user = headers
        .get(USER_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|s| !s.is_empty());
    state.wiki.principal(user)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/wiki/{*rest}", get(wiki_page))
        .route("/edit", post(edit))
        .route("/jobs/{id}", get(job).delete(cancel_job))
        .route("/queue", get(queue))
        .route("/register", post(register))
        .route("/repos", post(create_repo).get(list_repos))
        .route("/refs/{*repo}", get(refs))
        .route("/push", post(push))
        .route("/mirror/push", post(mirror_push))
        .route("/stats/{*repo}", get(stats))
        .route("/admin/clone-bench", post(clone_bench))
        .route("/admin/jobs/{id}", delete(cancel_job))
        .with_state(state)
}

/// Splits `<repo>/<marker>/<rest>` at the first marker segment.
fn split_marker<'a>(rest: &'a str, marker: &str) -> Option<(&'a str, &'a str)> {
    let needle = format!("/{marker}/");
    let at = rest.find(&needle)?;
    Some((&rest[..at], &rest[at + needle.len()..]))
}

fn parse_article(s: &str) -> ApiResult<ArticlePath> {
    let dotted = s.trim_matches('/').replace('/', ".");
    ArticlePath::parse_dotted(&dotted).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn wiki_page(
    State(st): State<AppState>,
    headers: HeaderMap,
    UrlPath(rest): UrlPath<String>,
) -> ApiResult<Response> {
    let who = principal(&st, &headers);
    if let Some((repo, page)) = split_marker(&rest, "article") {
        let html = if page.ends_with(".html") {
            match source_path(page) {
                Ok(path) if !page.contains('/') => st.wiki.article_html(&who, repo, &path),
                _ => st.wiki.page(&who, repo, page),
            }
            .or_else(|_| st.wiki.page(&who, repo, page))?
        } else {
            st.wiki.article_html(&who, repo, &parse_article(page)?)?
        };
        return Ok(Html(html).into_response());
    }
    if let Some((repo, spec)) = split_marker(&rest, "item") {
        let (path, item) = spec
            .rsplit_once('/')
            .ok_or_else(|| ApiError::bad_request("expected <article path>/<item>"))?;
        let id = ItemId::new(parse_article(path)?, item);
        return Ok(Json(st.wiki.item_view(&who, repo, &id)?).into_response());
    }
    if let Some(repo) = rest.strip_suffix("/index.html").or(Some(rest.as_str())) {
        if st.wiki.vc().repo_info(repo).is_ok() {
            return Ok(Html(st.wiki.page(&who, repo, "index.html")?).into_response());
        }
    }
    Err(ApiError::new(
        StatusCode::NOT_FOUND,
        "NotFound",
        format!("no page at /wiki/{rest}"),
    ))
}

#[derive(Debug, Deserialize)]
pub struct EditBody {
    pub repo: String,
    pub article: String,
    pub item: String,
    pub new_text: String,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub base: Option<ObjectId>,
    #[serde(default)]
    pub kind_change: bool,
}

#[derive(Debug, Default, Deserialize)]
pub struct EditQuery {
    #[serde(default)]
    pub dry_run: bool,
}

async fn edit(
    State(st): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<EditQuery>,
    Json(body): Json<EditBody>,
) -> ApiResult<Response> {
    let who = principal(&st, &headers);
    let edit = DelimitedEdit {
        repo: body.repo,
        article: parse_article(&body.article)?,
        item: body.item,
        new_text: body.new_text,
        base: body.base,
        kind_change: body.kind_change,
    };
    if q.dry_run {
        let wiki = st.wiki.clone();
        let (class, plan) = blocking(move || Ok(wiki.orchestrator().dry_run(&who, &edit)?)).await?;
        return Ok(Json(json!({
            "class": class,
            "changed": plan.changed,
            "affected": plan.affected,
            "schedule": plan.schedule,
        }))
        .into_response());
    }
    st.wiki.authorize(&who, &edit.repo, Action::Write)?;
    let mode = body.mode.unwrap_or(Mode::Quick);
    let id = st
        .wiki
        .orchestrator()
        .enqueue(&who, JobKind::Edit(edit), mode)?;
    Ok(accepted(id))
}

fn accepted(id: JobId) -> Response {
    (StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response()
}

async fn job(
    State(st): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<JobId>,
) -> ApiResult<Response> {
    let who = principal(&st, &headers);
    let info = st
        .wiki
        .orchestrator()
        .job(id)
        .ok_or(OrchestratorError::UnknownJob(id))?;
    st.wiki.authorize(&who, &info.repo, Action::Read)?;
    Ok(Json(info).into_response())
}

async fn cancel_job(
    State(st): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<JobId>,
) -> ApiResult<Response> {
    let who = principal(&st, &headers);
    let state = st.wiki.orchestrator().cancel(&who, id)?;
    Ok(Json(json!({ "job_id": id, "state": state })).into_response())
}

async fn queue(State(st): State<AppState>, headers: HeaderMap) -> ApiResult<Response> {
    let who = principal(&st, &headers);
    Ok(Json(st.wiki.orchestrator().list_queue(&who.user)).into_response())
}

#[derive(Debug, Deserialize)]
pub struct RegisterBody {
    pub username: String,
    pub public_key: String,
}

async fn register(
    State(st): State<AppState>,
    Json(body): Json<RegisterBody>,
) -> ApiResult<Response> {
    let rec = st.wiki.register(&body.username, &body.public_key)?;
    Ok((StatusCode::CREATED, Json(rec)).into_response())
}

#[derive(Debug, Deserialize)]
pub struct RepoBody {
    pub name: String,
}

async fn create_repo(
    State(st): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<RepoBody>,
) -> ApiResult<Response> {
    let who = principal(&st, &headers);
    let info = st.wiki.create_repo(&who, &body.name)?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn list_repos(State(st): State<AppState>, headers: HeaderMap) -> ApiResult<Response> {
    let who = principal(&st, &headers);
    let names: Vec<String> = st
        .wiki
        .vc()
        .repos()
        .into_iter()
        .filter(|r| st.wiki.decide(&who, &r.name, Action::Read).is_allow())
        .map(|r| r.name)
        .collect();
    Ok(Json(names).into_response())
}

async fn refs(
    State(st): State<AppState>,
    headers: HeaderMap,
    UrlPath(repo): UrlPath<String>,
) -> ApiResult<Response> {
    let who = principal(&st, &headers);
    st.wiki.authorize(&who, &repo, Action::Read)?;
    Ok(Json(st.wiki.vc().repo_info(&repo)?.refs).into_response())
}

#[derive(Debug, Default, Deserialize)]
pub struct ModeQuery {
    #[serde(default)]
    pub mode: Option<Mode>,
}

async fn push(
    State(st): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<ModeQuery>,
    Json(req): Json<PushRequest>,
) -> ApiResult<Response> {
    let who = principal(&st, &headers);
    st.wiki.authorize(&who, &req.repo, Action::Write)?;
    let objects = req.objects()?;
    let job = PushJob {
        update: req.update(),
        objects,
        via_mirror: false,
        trusted: false,
    };
    let id =
        st.wiki
            .orchestrator()
            .enqueue(&who, JobKind::Push(job), q.mode.unwrap_or(Mode::Quick))?;
    Ok(accepted(id))
}

async fn mirror_push(
    State(st): State<AppState>,
    Json(d): Json<MirrorDelivery>,
) -> ApiResult<Response> {
    let mirror = st.wiki.mirror().ok_or_else(|| {
        ApiError::new(
            StatusCode::FORBIDDEN,
            "MirrorDisabled",
            "this server has no peers",
        )
    })?;
    let wiki = st.wiki.clone();
    let result = blocking(move || Ok(mirror.receive(wiki.orchestrator(), &d)?)).await?;
    Ok(Json(result).into_response())
}

#[derive(Debug, Default, Deserialize)]
pub struct StatsQuery {
    #[serde(default)]
    pub granularity: Option<Granularity>,
}

async fn stats(
    State(st): State<AppState>,
    headers: HeaderMap,
    UrlPath(repo): UrlPath<String>,
    Query(q): Query<StatsQuery>,
) -> ApiResult<Response> {
    let who = principal(&st, &headers);
    let wiki = st.wiki.clone();
    let report =
        blocking(move || Ok(wiki.stats(&who, &repo, q.granularity.unwrap_or_default())?)).await?;
    Ok(Json(report).into_response())
}

#[derive(Debug, Deserialize)]
pub struct BenchBody {
    pub n: usize,
}

async fn clone_bench(
    State(st): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<BenchBody>,
) -> ApiResult<Response> {
    let who = principal(&st, &headers);
    let wiki = st.wiki.clone();
    let report = blocking(move || Ok(wiki.clone_bench(&who, body.n)?)).await?;
    Ok(Json(report).into_response())
}

/// Saves the store whenever refs, repositories or users change.
pub struct Persister {
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

fn store_signature(wiki: &Wiki) -> String {
    let repos = wiki.vc().repos();
    serde_json::to_string(&(repos, wiki.users())).expect("serializable")
}

impl Persister {
    pub fn start(wiki: Arc<Wiki>, interval: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::Builder::new()
            .name("persist".into())
            .spawn(move || {
                let mut last = store_signature(&wiki);
                while !flag.load(Ordering::Relaxed) {
                    std::thread::park_timeout(interval);
                    let now = store_signature(&wiki);
                    if now != last {
                        match wiki.save() {
                            Ok(()) => last = now,
                            Err(e) => log::error!("saving store: {e}"),
                        }
                    }
                }
            })
            .expect("spawn persister");
        Self {
            stop,
            handle: Some(handle),
        }
    }
}

impl Drop for Persister {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            h.thread().unpark();
            let _ = h.join();
        }
    }
}

/// Opens the store named by `cfg`, wires up mirroring and serves until
/// Ctrl-C; the running job is allowed to finish and the store is saved.
pub fn serve(cfg: &ServerConfig) -> anyhow::Result<()> {
    let listener = std::net::TcpListener::bind(cfg.listen)?;
    serve_with(cfg, listener, async {
        let _ = tokio::signal::ctrl_c().await;
    })
}

/// [`serve`] on an already bound listener, stopping when `shutdown`
/// completes.
pub fn serve_with(
    cfg: &ServerConfig,
    listener: std::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let wiki = Arc::new(Wiki::open(&cfg.storage_root, &cfg.wiki_options()?)?);
    if let Some(p) = &cfg.policy_path {
        wiki.set_policy(&std::fs::read_to_string(p)?)?;
    }
    let transport = Arc::new(HttpTransport::new(Duration::from_secs(30)));
    let mirror = wiki.attach_mirror(cfg.peer_config(), transport)?;
    let scheduler = wiki.orchestrator().start();
    let retry = mirror.start(Duration::from_millis(cfg.retry_interval_ms));
    let persister = Persister::start(wiki.clone(), Duration::from_secs(1));

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    let app = router(AppState { wiki: wiki.clone() });
    listener.set_nonblocking(true)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(shutdown)
            .await
    })?;
    drop(rt);
    drop(retry);
    scheduler.stop();
    drop(persister);
    wiki.save()?;
    Ok(())
}
