//! Verification gatekeeper: per-user job queues, sandboxed incremental
//! re-verification over copy-on-write snapshots, parallel scheduling over
//! the dependency DAG, and promote-or-rollback.
//!
//! A repository's working volume holds:
//!
//! * `src/<a>/<b>.fml`: article sources (the only part that is committed)
//! * `.state/status/<a.b>.json`: per-item verification state
//! * `html/`: the rendered site

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use parking_lot::{Condvar, Mutex, RwLock};
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cowstore::{CowError, CowStore, VolumeId};
use crate::depgraph::{extract_item_graph, DepGraph, DepGraphError, RecompPlan};
use crate::minilib::{
    check_item, parse_article, parse_item, text_fingerprint, ArticlePath, Diagnostic, Fingerprint,
    Item, ItemId, ItemStatus, Library, Mode, Stage, VerifyOptions, SOURCE_EXTENSION,
};
use crate::policy::{AccessQuery, Action, PolicyConfig, Principal, VerifyPolicy};
use crate::render::build_site;
use crate::vcstore::{
    GateRequest, NoGate, ObjectId, PostUpdateHook, PushContext, RefUpdate, Staged, VcError,
    VcStore, DEFAULT_BRANCH, SOURCE_DIR,
};

pub const STATE_DIR: &str = ".state/status";
pub const HTML_DIR: &str = "html";

pub type JobId = u64;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("job {0} does not exist")]
    UnknownJob(JobId),
    #[error("job {job} belongs to someone other than {user}")]
    NotOwner { job: JobId, user: String },
    #[error("job {0} has already finished")]
    AlreadyFinished(JobId),
    #[error("repository `{0}` already has a live sandbox")]
    SandboxBusy(String),
    #[error("{user} may not {action} `{repo}`")]
    PolicyDenied {
        user: String,
        repo: String,
        action: Action,
    },
    #[error("article `{0}` not found")]
    UnknownArticle(ArticlePath),
    #[error("item {0} not found")]
    UnknownItem(ItemId),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("verification state is unreadable: {0}")]
    State(String),
    #[error(transparent)]
    Vc(#[from] VcError),
    #[error(transparent)]
    Cow(#[from] CowError),
    #[error(transparent)]
    Graph(#[from] DepGraphError),
}

pub type Result<T> = std::result::Result<T, OrchestratorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditClass {
    ProofOnly,
    StatementChange,
    KindChange,
    NameChange,
}

/// Compares two versions of an item; spans index into the given sources.
pub fn classify_edit(old_src: &str, old: &Item, new_src: &str, new: &Item) -> EditClass {
    if old.name != new.name {
        EditClass::NameChange
    } else if old.kind() != new.kind() {
        EditClass::KindChange
    } else if old_src[old.statement_span.start..old.statement_span.end]
        == new_src[new.statement_span.start..new.statement_span.end]
    {
        EditClass::ProofOnly
    } else {
        EditClass::StatementChange
    }
}

/// Predicted re-verification set for an edit of `item`. With `direct_only`
/// a statement change reaches direct dependents only, which is unsound once
/// definition values flow through evaluation chains.
pub fn plan_impact(
    class: EditClass,
    item: &ItemId,
    graph: &DepGraph,
    direct_only: bool,
) -> Result<RecompPlan> {
    if !graph.contains(item) {
        return Err(DepGraphError::UnknownItem(item.clone()).into());
    }
    let changed: BTreeSet<ItemId> = [item.clone()].into();
    let affected = match class {
        EditClass::ProofOnly => changed.clone(),
        _ if direct_only => {
            let mut s = changed.clone();
            s.extend(graph.dependents(item).into_iter().cloned());
            s
        }
        _ => graph.dependents_closure(&changed),
    };
    let schedule = graph.schedule(&affected);
    Ok(RecompPlan {
        changed,
        affected,
        schedule,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemState {
    pub text: Fingerprint,
    pub mode: Mode,
    pub status: ItemStatus,
}

pub type StateMap = BTreeMap<ItemId, ItemState>;

fn parse_diag(path: &str, e: impl std::fmt::Display) -> Diagnostic {
    Diagnostic::new(None, Stage::Parse, format!("{path}: {e}"))
}

/// Parses every article under `src/`. Unparseable files are reported and
/// left out of the library.
pub fn load_library(cow: &CowStore, vol: VolumeId) -> Result<(Library, Vec<Diagnostic>)> {
    let prefix = format!("{SOURCE_DIR}/");
    let mut lib = Library::new();
    let mut errors = Vec::new();
    for path in cow.list_files(vol, &prefix)? {
        let rel = &path[prefix.len()..];
        if !rel.ends_with(&format!(".{SOURCE_EXTENSION}")) {
            continue;
        }
        let ap = match ArticlePath::from_source_file(rel) {
            Ok(p) => p,
            Err(e) => {
                errors.push(parse_diag(rel, e));
                continue;
            }
        };
        let bytes = cow.read_file(vol, &path)?;
        let Ok(src) = String::from_utf8(bytes) else {
            errors.push(parse_diag(rel, "not UTF-8"));
            continue;
        };
        match parse_article(&src, ap) {
            Ok(a) => {
                lib.insert(a);
            }
            Err(e) => errors.push(parse_diag(rel, e)),
        }
    }
    Ok((lib, errors))
}

fn state_file(path: &ArticlePath) -> String {
    format!("{STATE_DIR}/{}.json", path.dotted())
}

pub fn read_states(cow: &CowStore, vol: VolumeId) -> Result<StateMap> {
    let prefix = format!("{STATE_DIR}/");
    let mut out = StateMap::new();
    for file in cow.list_files(vol, &prefix)? {
        let stem = file[prefix.len()..]
            .strip_suffix(".json")
            .ok_or_else(|| OrchestratorError::State(file.clone()))?;
        let path = ArticlePath::parse_dotted(stem)
            .map_err(|e| OrchestratorError::State(format!("{file}: {e}")))?;
        let items: BTreeMap<String, ItemState> =
            serde_json::from_slice(&cow.read_file(vol, &file)?)
                .map_err(|e| OrchestratorError::State(format!("{file}: {e}")))?;
        for (name, st) in items {
            out.insert(ItemId::new(path.clone(), name), st);
        }
    }
    Ok(out)
}

fn write_if_changed(cow: &CowStore, vol: VolumeId, path: &str, bytes: &[u8]) -> Result<()> {
    if !cow.exists(vol, path)? || cow.read_file(vol, path)? != bytes {
        cow.write_file(vol, path, bytes)?;
    }
    Ok(())
}

/// Writes one state file per article, touching only files whose content
/// changes.
pub fn write_states(cow: &CowStore, vol: VolumeId, states: &StateMap) -> Result<()> {
    let mut per_article: BTreeMap<&ArticlePath, BTreeMap<&str, &ItemState>> = BTreeMap::new();
    for (id, st) in states {
        per_article
            .entry(&id.article)
            .or_default()
            .insert(&id.name, st);
    }
    let keep: HashSet<String> = per_article.keys().map(|p| state_file(p)).collect();
    for file in cow.list_files(vol, &format!("{STATE_DIR}/"))? {
        if !keep.contains(&file) {
            cow.remove_file(vol, &file)?;
        }
    }
    for (path, items) in per_article {
        let json = serde_json::to_vec_pretty(&items).expect("state serializes");
        write_if_changed(cow, vol, &state_file(path), &json)?;
    }
    Ok(())
}

/// Regenerates `html/`, rewriting only pages whose bytes change.
pub fn render_into(cow: &CowStore, vol: VolumeId, lib: &Library, graph: &DepGraph) -> Result<()> {
    let site = build_site(lib, graph);
    let prefix = format!("{HTML_DIR}/");
    for file in cow.list_files(vol, &prefix)? {
        if !site.files.contains_key(&file[prefix.len()..]) {
            cow.remove_file(vol, &file)?;
        }
    }
    for (rel, html) in &site.files {
        write_if_changed(cow, vol, &format!("{prefix}{rel}"), html.as_bytes())?;
    }
    Ok(())
}

pub struct VerifyInput<'a> {
    pub lib: &'a Library,
    pub graph: &'a DepGraph,
    /// Graph of the previous library version, for dependents of removed or
    /// rewritten items.
    pub old_graph: Option<&'a DepGraph>,
    pub old_states: &'a StateMap,
    pub mode: Mode,
    /// The single item a delimited edit touched, and how.
    pub hint: Option<(&'a ItemId, EditClass)>,
    pub direct_only: bool,
    /// Record items as passing without checking them (trusted mirror
    /// deliveries).
    pub assume_ok: bool,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOutcome {
    pub states: StateMap,
    /// The initial re-verification set.
    pub plan: RecompPlan,
    /// Items actually checked, in execution order (batch by batch).
    pub verified: Vec<ItemId>,
    pub cancelled: bool,
}

impl VerifyOutcome {
    pub fn failures(&self) -> Vec<Diagnostic> {
        self.states
            .values()
            .filter_map(|s| match &s.status {
                ItemStatus::Failed(d) => Some(d.clone()),
                ItemStatus::Ok => None,
            })
            .collect()
    }
}

/// Re-verifies what changed since `old_states` and returns the new state
/// of every item. Items whose text changed (and, unless the edit was
/// proof-only, everything depending on them) are checked; an item whose
/// status flips pulls in its direct dependents as well.
pub fn incremental_verify(
    input: &VerifyInput<'_>,
    pool: &ThreadPool,
    opts: &VerifyOptions,
    cancel: &AtomicBool,
) -> VerifyOutcome {
    let VerifyInput {
        lib,
        graph,
        mode,
        old_states,
        ..
    } = *input;
    let texts: HashMap<ItemId, Fingerprint> = lib
        .articles()
        .flat_map(|a| {
            a.items
                .iter()
                .map(move |i| (a.item_id(&i.name), text_fingerprint(a, i)))
        })
        .collect();

    let mut edited = BTreeSet::new();
    let mut upgrade = BTreeSet::new();
    for (id, fp) in &texts {
        match old_states.get(id) {
            Some(st) if st.text == *fp => {
                if st.mode < mode {
                    upgrade.insert(id.clone());
                }
            }
            _ => {
                edited.insert(id.clone());
            }
        }
    }
    let removed: Vec<&ItemId> = old_states
        .keys()
        .filter(|id| !texts.contains_key(*id))
        .collect();

    let proof_only = matches!(input.hint, Some((item, EditClass::ProofOnly)) if edited.len() == 1 && edited.contains(item));
    let mut active: BTreeSet<ItemId> = upgrade;
    if proof_only {
        active.extend(edited.iter().cloned());
    } else {
        let closure =
            |g: &DepGraph, seeds: &mut dyn Iterator<Item = &ItemId>| -> BTreeSet<ItemId> {
                let seeds: Vec<&ItemId> = seeds.collect();
                if input.direct_only {
                    let mut s: BTreeSet<ItemId> = seeds.iter().map(|x| (*x).clone()).collect();
                    for x in &seeds {
                        s.extend(g.dependents(x).into_iter().cloned());
                    }
                    s
                } else {
                    g.dependents_closure(seeds)
                }
            };
        active.extend(closure(graph, &mut edited.iter()));
        if let Some(old) = input.old_graph {
            active.extend(
                closure(old, &mut edited.iter().chain(removed.iter().copied()))
                    .into_iter()
                    .filter(|id| texts.contains_key(id)),
            );
        }
        active.extend(edited.iter().cloned());
    }
    let plan = RecompPlan {
        changed: edited,
        schedule: graph.schedule(&active),
        affected: active.clone(),
    };

    let candidates = graph.dependents_closure(&active);
    let batches = graph.schedule(&candidates);
    let mut status: HashMap<ItemId, ItemStatus> = old_states
        .iter()
        .filter(|(id, _)| texts.contains_key(*id))
        .map(|(id, st)| (id.clone(), st.status.clone()))
        .collect();
    let mut verified = Vec::new();
    let mut cancelled = false;
    for batch in batches {
        if cancel.load(Ordering::Relaxed) {
            cancelled = true;
            break;
        }
        let run: Vec<&ItemId> = batch.iter().filter(|id| active.contains(*id)).collect();
        let results: Vec<(ItemId, Option<ItemStatus>)> = pool.install(|| {
            run.par_iter()
                .map(|id| {
                    if cancel.load(Ordering::Relaxed) {
                        return ((*id).clone(), None);
                    }
                    let s = if input.assume_ok {
                        ItemStatus::Ok
                    } else {
                        check_item(lib, id, mode, &status, opts)
                    };
                    ((*id).clone(), Some(s))
                })
                .collect()
        });
        for (id, s) in results {
            let Some(s) = s else {
                cancelled = true;
                continue;
            };
            if status.get(&id) != Some(&s) {
                active.extend(graph.dependents(&id).into_iter().cloned());
            }
            status.insert(id.clone(), s);
            verified.push(id);
        }
        if cancelled {
            break;
        }
    }

    let ran: HashSet<&ItemId> = verified.iter().collect();
    let states = texts
        .iter()
        .filter_map(|(id, fp)| {
            let st = if ran.contains(id) {
                ItemState {
                    text: *fp,
                    mode,
                    status: status[id].clone(),
                }
            } else {
                old_states.get(id)?.clone()
            };
            Some((id.clone(), st))
        })
        .collect();
    VerifyOutcome {
        states,
        plan,
        verified,
        cancelled,
    }
}

/// Verifies a whole library from scratch.
pub fn verify_library(
    lib: &Library,
    mode: Mode,
    pool: &ThreadPool,
    opts: &VerifyOptions,
) -> Result<StateMap> {
    let graph = extract_item_graph(lib)?;
    let out = incremental_verify(
        &VerifyInput {
            lib,
            graph: &graph,
            old_graph: None,
            old_states: &StateMap::new(),
            mode,
            hint: None,
            direct_only: false,
            assume_ok: false,
        },
        pool,
        opts,
        &AtomicBool::new(false),
    );
    Ok(out.states)
}

pub fn build_pool(workers: usize) -> ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .thread_name(|i| format!("verify-{i}"))
        .build()
        .expect("thread pool")
}

/// Verifies the library in `vol` at `mode` against its stored state and
/// refreshes state and HTML in place. Returns the outcome whether or not
/// items failed; `Err` only for storage problems and dependency cycles.
pub fn refresh_volume(
    cow: &CowStore,
    vol: VolumeId,
    mode: Mode,
    pool: &ThreadPool,
    opts: &VerifyOptions,
) -> Result<std::result::Result<VerifyOutcome, Vec<Diagnostic>>> {
    let (lib, errors) = load_library(cow, vol)?;
    if !errors.is_empty() {
        return Ok(Err(errors));
    }
    let graph = match extract_item_graph(&lib) {
        Ok(g) => g,
        Err(e) => {
            return Ok(Err(vec![Diagnostic::new(
                None,
                Stage::Analyze,
                e.to_string(),
            )]))
        }
    };
    let old = read_states(cow, vol)?;
    let out = incremental_verify(
        &VerifyInput {
            lib: &lib,
            graph: &graph,
            old_graph: None,
            old_states: &old,
            mode,
            hint: None,
            direct_only: false,
            assume_ok: false,
        },
        pool,
        opts,
        &AtomicBool::new(false),
    );
    write_states(cow, vol, &out.states)?;
    render_into(cow, vol, &lib, &graph)?;
    Ok(Ok(out))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelimitedEdit {
    pub repo: String,
    pub article: ArticlePath,
    pub item: String,
    pub new_text: String,
    /// Commit the edit was made against; a moved ref fails the job.
    #[serde(default)]
    pub base: Option<ObjectId>,
    /// Permit turning a def into a thm or back.
    #[serde(default)]
    pub kind_change: bool,
}

#[derive(Debug, Clone)]
pub struct PushJob {
    pub update: RefUpdate,
    pub objects: Vec<Vec<u8>>,
    pub via_mirror: bool,
    /// Skip re-verification (trusted mirror delivery from a Full sender).
    pub trusted: bool,
}

#[derive(Debug, Clone)]
pub enum JobKind {
    Push(PushJob),
    Edit(DelimitedEdit),
}

impl JobKind {
    pub fn repo(&self) -> &str {
        match self {
            JobKind::Push(p) => &p.update.repo,
            JobKind::Edit(e) => &e.repo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "diagnostics", rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed(Vec<Diagnostic>),
    Cancelled,
}

impl JobState {
    pub fn is_finished(&self) -> bool {
        matches!(
            self,
            JobState::Succeeded | JobState::Failed(_) | JobState::Cancelled
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobReport {
    pub planned: BTreeSet<ItemId>,
    pub verified: Vec<ItemId>,
    pub commit: Option<ObjectId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobInfo {
    pub id: JobId,
    pub owner: String,
    pub repo: String,
    pub kind: String,
    pub item: Option<ItemId>,
    pub requested_mode: Mode,
    pub mode: Mode,
    #[serde(flatten)]
    pub state: JobState,
    pub report: Option<JobReport>,
}

struct JobEntry {
    info: JobInfo,
    principal: Principal,
    kind: Option<JobKind>,
    cancel: Arc<AtomicBool>,
}

#[derive(Default)]
struct JobTable {
    next: JobId,
    queued: VecDeque<JobId>,
    jobs: BTreeMap<JobId, JobEntry>,
}

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub workers: usize,
    pub direct_only: bool,
    pub verify: VerifyOptions,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            workers: std::thread::available_parallelism().map_or(4, |n| n.get()),
            direct_only: false,
            verify: VerifyOptions::default(),
        }
    }
}

struct SandboxGuard<'a> {
    busy: &'a Mutex<HashSet<String>>,
    repo: String,
}

impl Drop for SandboxGuard<'_> {
    fn drop(&mut self) {
        self.busy.lock().remove(&self.repo);
    }
}

enum Finish {
    Done(JobReport),
    Failed(Vec<Diagnostic>, Option<JobReport>),
    Cancelled,
}

fn diag(msg: impl std::fmt::Display) -> Vec<Diagnostic> {
    vec![Diagnostic::new(None, Stage::Verify, msg.to_string())]
}

fn vc_failure(e: VcError) -> Vec<Diagnostic> {
    match e {
        VcError::VerificationFailed(d) => d,
        other => diag(other),
    }
}

pub struct Orchestrator {
    vc: Arc<VcStore>,
    policy: RwLock<Arc<PolicyConfig>>,
    verify_policy: RwLock<VerifyPolicy>,
    hooks: RwLock<Vec<Arc<dyn PostUpdateHook>>>,
    cfg: OrchestratorConfig,
    pool: ThreadPool,
    table: Mutex<JobTable>,
    wake: Condvar,
    busy: Mutex<HashSet<String>>,
    shutdown: AtomicBool,
    scheduled: AtomicBool,
}

impl Orchestrator {
    pub fn new(
        vc: Arc<VcStore>,
        policy: PolicyConfig,
        verify_policy: VerifyPolicy,
        cfg: OrchestratorConfig,
    ) -> Self {
        Self {
            vc,
            policy: RwLock::new(Arc::new(policy)),
            verify_policy: RwLock::new(verify_policy),
            hooks: RwLock::new(Vec::new()),
            pool: build_pool(cfg.workers),
            cfg,
            table: Mutex::new(JobTable::default()),
            wake: Condvar::new(),
            busy: Mutex::new(HashSet::new()),
            shutdown: AtomicBool::new(false),
            scheduled: AtomicBool::new(false),
        }
    }

    pub fn vc(&self) -> &Arc<VcStore> {
        &self.vc
    }

    pub fn cow(&self) -> &Arc<CowStore> {
        self.vc.cow()
    }

    pub fn pool(&self) -> &ThreadPool {
        &self.pool
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.cfg
    }

    pub fn policy(&self) -> Arc<PolicyConfig> {
        self.policy.read().clone()
    }

    pub fn set_policy(&self, policy: PolicyConfig) {
        *self.policy.write() = Arc::new(policy);
    }

    pub fn verify_policy(&self) -> VerifyPolicy {
        self.verify_policy.read().clone()
    }

    pub fn set_verify_policy(&self, vp: VerifyPolicy) {
        *self.verify_policy.write() = vp;
    }

    pub fn add_hook(&self, hook: Arc<dyn PostUpdateHook>) {
        self.hooks.write().push(hook);
    }

    /// Requested mode raised to what the repository's policy requires.
    pub fn effective_mode(&self, repo: &str, requested: Mode) -> Mode {
        self.verify_policy
            .read()
            .required_mode(repo)
            .effective(requested)
    }

    fn authorize(&self, who: &Principal, repo: &str, action: Action) -> Result<()> {
        let creator = self.vc.repo_info(repo)?.creator;
        let q = AccessQuery {
            principal: who,
            repo,
            action,
            creator: creator.as_deref(),
        };
        if self.policy().authorize(&q).is_allow() {
            Ok(())
        } else {
            Err(OrchestratorError::PolicyDenied {
                user: who.user.clone(),
                repo: repo.to_string(),
                action,
            })
        }
    }

    pub fn enqueue(&self, who: &Principal, kind: JobKind, requested: Mode) -> Result<JobId> {
        let repo = kind.repo().to_string();
        self.vc.repo_info(&repo)?;
        let item = match &kind {
            JobKind::Edit(e) => Some(ItemId::new(e.article.clone(), e.item.clone())),
            JobKind::Push(_) => None,
        };
        let mut t = self.table.lock();
        t.next += 1;
        let id = t.next;
        let info = JobInfo {
            id,
            owner: who.user.clone(),
            repo: repo.clone(),
            kind: match kind {
                JobKind::Push(_) => "push",
                JobKind::Edit(_) => "edit",
            }
            .to_string(),
            item,
            requested_mode: requested,
            mode: self.effective_mode(&repo, requested),
            state: JobState::Queued,
            report: None,
        };
        t.jobs.insert(
            id,
            JobEntry {
                info,
                principal: who.clone(),
                kind: Some(kind),
                cancel: Arc::new(AtomicBool::new(false)),
            },
        );
        t.queued.push_back(id);
        drop(t);
        self.wake.notify_all();
        Ok(id)
    }

    pub fn job(&self, id: JobId) -> Option<JobInfo> {
        self.table.lock().jobs.get(&id).map(|e| e.info.clone())
    }

    /// The owner's jobs in submission order.
    pub fn list_queue(&self, owner: &str) -> Vec<JobInfo> {
        self.table
            .lock()
            .jobs
            .values()
            .filter(|e| e.info.owner == owner)
            .map(|e| e.info.clone())
            .collect()
    }

    pub fn all_jobs(&self) -> Vec<JobInfo> {
        self.table
            .lock()
            .jobs
            .values()
            .map(|e| e.info.clone())
            .collect()
    }

    /// Cancels a queued job at once, or asks a running one to stop at the
    /// next item boundary.
    pub fn cancel(&self, who: &Principal, id: JobId) -> Result<JobState> {
        let mut t = self.table.lock();
        let e = t
            .jobs
            .get_mut(&id)
            .ok_or(OrchestratorError::UnknownJob(id))?;
        let superuser = who.admin || who.classes.contains("@superusers");
        if e.info.owner != who.user && !superuser {
            return Err(OrchestratorError::NotOwner {
                job: id,
                user: who.user.clone(),
            });
        }
        match e.info.state {
            JobState::Queued => {
                e.info.state = JobState::Cancelled;
                e.kind = None;
                t.queued.retain(|j| *j != id);
                Ok(JobState::Cancelled)
            }
            JobState::Running => {
                e.cancel.store(true, Ordering::Relaxed);
                Ok(JobState::Running)
            }
            _ => Err(OrchestratorError::AlreadyFinished(id)),
        }
    }

    fn take_next(&self) -> Option<(JobId, Principal, JobKind, Mode, Arc<AtomicBool>)> {
        let mut t = self.table.lock();
        while let Some(id) = t.queued.pop_front() {
            let e = t.jobs.get_mut(&id).expect("queued job exists");
            if let Some(kind) = e.kind.take() {
                e.info.state = JobState::Running;
                return Some((id, e.principal.clone(), kind, e.info.mode, e.cancel.clone()));
            }
        }
        None
    }

    /// Runs the oldest queued job to completion; `None` if the queue is
    /// empty.
    pub fn run_next(&self) -> Option<JobId> {
        let (id, who, kind, mode, cancel) = self.take_next()?;
        let finish = match &kind {
            JobKind::Edit(e) => self.run_edit(id, &who, e, mode, &cancel),
            JobKind::Push(p) => self.run_push(id, &who, p, mode, &cancel),
        };
        let (state, report) = match finish {
            Ok(Finish::Done(r)) => (JobState::Succeeded, Some(r)),
            Ok(Finish::Failed(d, r)) => (JobState::Failed(d), r),
            Ok(Finish::Cancelled) => (JobState::Cancelled, None),
            Err(e) => (JobState::Failed(diag(e)), None),
        };
        let mut t = self.table.lock();
        let e = t.jobs.get_mut(&id).expect("job exists");
        e.info.state = state;
        e.info.report = report;
        drop(t);
        self.wake.notify_all();
        Some(id)
    }

    pub fn run_pending(&self) -> usize {
        let mut n = 0;
        while self.run_next().is_some() {
            n += 1;
        }
        n
    }

    /// Blocks until job `id` has finished.
    pub fn wait(&self, id: JobId) -> Option<JobInfo> {
        let mut t = self.table.lock();
        loop {
            let info = t.jobs.get(&id)?.info.clone();
            if info.state.is_finished() {
                return Some(info);
            }
            self.wake.wait(&mut t);
        }
    }

    /// Enqueues a job and blocks until it finishes. Without a scheduler
    /// thread the queue is drained on the calling thread.
    pub fn execute(&self, who: &Principal, kind: JobKind, requested: Mode) -> Result<JobInfo> {
        let id = self.enqueue(who, kind, requested)?;
        if !self.scheduled.load(Ordering::Acquire) {
            while !self.job(id).is_some_and(|j| j.state.is_finished()) {
                if self.run_next().is_none() {
                    break;
                }
            }
        }
        self.wait(id).ok_or(OrchestratorError::UnknownJob(id))
    }

    /// Starts the scheduler thread. Jobs run one at a time; items within a
    /// job run on the worker pool.
    pub fn start(self: &Arc<Self>) -> Scheduler {
        let me = self.clone();
        self.shutdown.store(false, Ordering::Relaxed);
        self.scheduled.store(true, Ordering::Release);
        let handle = std::thread::Builder::new()
            .name("scheduler".into())
            .spawn(move || loop {
                if me.run_next().is_some() {
                    continue;
                }
                let mut t = me.table.lock();
                if me.shutdown.load(Ordering::Relaxed) {
                    return;
                }
                if t.queued.is_empty() {
                    me.wake.wait(&mut t);
                }
            })
            .expect("spawn scheduler");
        Scheduler {
            orch: self.clone(),
            handle: Some(handle),
        }
    }

    fn lock_sandbox(&self, repo: &str) -> Result<SandboxGuard<'_>> {
        if !self.busy.lock().insert(repo.to_string()) {
            return Err(OrchestratorError::SandboxBusy(repo.to_string()));
        }
        Ok(SandboxGuard {
            busy: &self.busy,
            repo: repo.to_string(),
        })
    }

    /// Predicted re-verification set for an edit, without running anything.
    pub fn dry_run(
        &self,
        who: &Principal,
        edit: &DelimitedEdit,
    ) -> Result<(EditClass, RecompPlan)> {
        self.authorize(who, &edit.repo, Action::Read)?;
        let backend = self.vc.repo_info(&edit.repo)?.backend;
        let (lib, _) = load_library(self.cow(), backend)?;
        let (class, _) = self.prepare_edit(&lib, edit)?;
        let graph = extract_item_graph(&lib)?;
        let id = ItemId::new(edit.article.clone(), edit.item.clone());
        Ok((
            class,
            plan_impact(class, &id, &graph, self.cfg.direct_only)?,
        ))
    }

    /// Classifies an edit against `lib` and returns the spliced source.
    fn prepare_edit(&self, lib: &Library, edit: &DelimitedEdit) -> Result<(EditClass, String)> {
        let article = lib
            .get(&edit.article)
            .ok_or_else(|| OrchestratorError::UnknownArticle(edit.article.clone()))?;
        let old = article.item(&edit.item).ok_or_else(|| {
            OrchestratorError::UnknownItem(ItemId::new(edit.article.clone(), edit.item.clone()))
        })?;
        let new = parse_item(&edit.new_text)
            .map_err(|e| OrchestratorError::InvalidEdit(e.to_string()))?;
        let class = classify_edit(&article.source, old, &edit.new_text, &new);
        match class {
            EditClass::NameChange => {
                return Err(OrchestratorError::InvalidEdit(format!(
                    "item must keep its name `{}`",
                    edit.item
                )))
            }
            EditClass::KindChange if !edit.kind_change => {
                return Err(OrchestratorError::InvalidEdit(
                    "kind change not flagged".into(),
                ))
            }
            _ => {}
        }
        let src = article
            .splice_item(&edit.item, edit.new_text.trim())
            .expect("item exists");
        Ok((class, src))
    }

    /// Verifies `sandbox` after a change, writing state and HTML on success.
    fn verify_sandbox(
        &self,
        sandbox: VolumeId,
        old: &(Library, StateMap),
        mode: Mode,
        hint: Option<(&ItemId, EditClass)>,
        assume_ok: bool,
        cancel: &AtomicBool,
    ) -> Result<Finish> {
        let cow = self.cow();
        let (lib, errors) = load_library(cow, sandbox)?;
        if !errors.is_empty() {
            return Ok(Finish::Failed(errors, None));
        }
        let graph = match extract_item_graph(&lib) {
            Ok(g) => g,
            Err(e) => {
                return Ok(Finish::Failed(
                    vec![Diagnostic::new(None, Stage::Analyze, e.to_string())],
                    None,
                ))
            }
        };
        let old_graph = extract_item_graph(&old.0).ok();
        let out = incremental_verify(
            &VerifyInput {
                lib: &lib,
                graph: &graph,
                old_graph: old_graph.as_ref(),
                old_states: &old.1,
                mode,
                hint,
                direct_only: self.cfg.direct_only,
                assume_ok,
            },
            &self.pool,
            &self.cfg.verify,
            cancel,
        );
        if out.cancelled {
            return Ok(Finish::Cancelled);
        }
        let report = JobReport {
            planned: out.plan.affected.clone(),
            verified: out.verified.clone(),
            commit: None,
        };
        let failures = out.failures();
        if !failures.is_empty() {
            return Ok(Finish::Failed(failures, Some(report)));
        }
        write_states(cow, sandbox, &out.states)?;
        render_into(cow, sandbox, &lib, &graph)?;
        Ok(Finish::Done(report))
    }

    fn snapshot_old(&self, vol: VolumeId) -> Result<(Library, StateMap)> {
        let (lib, _) = load_library(self.cow(), vol)?;
        Ok((lib, read_states(self.cow(), vol)?))
    }

    fn run_edit(
        &self,
        job: JobId,
        who: &Principal,
        edit: &DelimitedEdit,
        mode: Mode,
        cancel: &AtomicBool,
    ) -> Result<Finish> {
        self.authorize(who, &edit.repo, Action::Write)?;
        let _guard = self.lock_sandbox(&edit.repo)?;
        let backend = self.vc.repo_info(&edit.repo)?.backend;
        let current = self.vc.get_ref(&edit.repo, DEFAULT_BRANCH)?;
        if edit.base.is_some() && edit.base != current {
            return Ok(Finish::Failed(
                diag(VcError::StaleOld {
                    repo: edit.repo.clone(),
                    branch: DEFAULT_BRANCH.into(),
                    expected: edit.base,
                    actual: current,
                }),
                None,
            ));
        }
        let cow = self.cow();
        let sandbox = cow.snapshot(backend, &format!("sandbox:{}:{job}", edit.repo))?;
        let result = (|| -> Result<Finish> {
            let old = self.snapshot_old(sandbox)?;
            let (class, src) = match self.prepare_edit(&old.0, edit) {
                Ok(x) => x,
                Err(
                    e @ (OrchestratorError::InvalidEdit(_)
                    | OrchestratorError::UnknownItem(_)
                    | OrchestratorError::UnknownArticle(_)),
                ) => {
                    return Ok(Finish::Failed(
                        vec![Diagnostic::new(None, Stage::Parse, e.to_string())],
                        None,
                    ))
                }
                Err(e) => return Err(e),
            };
            cow.write_file(
                sandbox,
                &format!("{SOURCE_DIR}/{}", edit.article.source_file()),
                src.as_bytes(),
            )?;
            let id = ItemId::new(edit.article.clone(), edit.item.clone());
            let finish =
                self.verify_sandbox(sandbox, &old, mode, Some((&id, class)), false, cancel)?;
            let Finish::Done(mut report) = finish else {
                return Ok(finish);
            };
            if cancel.load(Ordering::Relaxed) {
                return Ok(Finish::Cancelled);
            }
            let mut staged = Staged::new(self.vc.objects());
            let message = format!("edit {id}");
            let commit =
                self.vc
                    .stage_commit(&mut staged, current, sandbox, &who.user, &message)?;
            let update = RefUpdate {
                repo: edit.repo.clone(),
                branch: DEFAULT_BRANCH.into(),
                old: current,
                new: commit,
                pusher: who.user.clone(),
            };
            let policy = self.policy();
            let hooks = self.hooks.read().clone();
            let ctx = PushContext {
                principal: who,
                policy: &policy,
                gate: &NoGate,
                hooks: &hooks,
                via_mirror: false,
            };
            match self.vc.push(&update, staged.into_objects(), &ctx) {
                Ok(_) => {
                    report.commit = Some(commit);
                    Ok(Finish::Done(report))
                }
                Err(e) => Ok(Finish::Failed(vc_failure(e), Some(report))),
            }
        })();
        self.settle(sandbox, &result)?;
        result
    }

    fn run_push(
        &self,
        job: JobId,
        who: &Principal,
        push: &PushJob,
        mode: Mode,
        cancel: &AtomicBool,
    ) -> Result<Finish> {
        let repo = &push.update.repo;
        let _guard = self.lock_sandbox(repo)?;
        let backend = self.vc.repo_info(repo)?.backend;
        let cow = self.cow();
        let sandbox = cow.snapshot(backend, &format!("sandbox:{repo}:{job}"))?;
        let result = (|| -> Result<Finish> {
            let old = self.snapshot_old(sandbox)?;
            let outcome: Mutex<Option<Finish>> = Mutex::new(None);
            let gate = |req: &GateRequest<'_>| -> std::result::Result<(), Vec<Diagnostic>> {
                self.vc
                    .checkout_commit(req.objects, &req.update.new, sandbox)
                    .map_err(diag)?;
                let finish = self
                    .verify_sandbox(sandbox, &old, mode, None, push.trusted, cancel)
                    .map_err(diag)?;
                let verdict = match &finish {
                    Finish::Done(_) => Ok(()),
                    Finish::Failed(d, _) => Err(d.clone()),
                    Finish::Cancelled => Err(diag("cancelled")),
                };
                *outcome.lock() = Some(finish);
                verdict
            };
            let policy = self.policy();
            let hooks = self.hooks.read().clone();
            let ctx = PushContext {
                principal: who,
                policy: &policy,
                gate: &gate,
                hooks: &hooks,
                via_mirror: push.via_mirror,
            };
            let pushed = self.vc.push(&push.update, push.objects.clone(), &ctx);
            let outcome = outcome.into_inner();
            Ok(match (pushed, outcome) {
                (Ok(acc), Some(Finish::Done(mut r))) => {
                    r.commit = Some(acc.new);
                    Finish::Done(r)
                }
                // No-op push: nothing was verified.
                (Ok(acc), _) => Finish::Done(JobReport {
                    commit: Some(acc.new),
                    ..Default::default()
                }),
                (Err(_), Some(Finish::Cancelled)) => Finish::Cancelled,
                (Err(e), Some(Finish::Failed(_, r))) => Finish::Failed(vc_failure(e), r),
                (Err(e), _) => Finish::Failed(vc_failure(e), None),
            })
        })();
        self.settle(sandbox, &result)?;
        result
    }

    /// Promotes the sandbox after a committed change, discards it otherwise.
    fn settle(&self, sandbox: VolumeId, result: &Result<Finish>) -> Result<()> {
        match result {
            Ok(Finish::Done(r)) if r.commit.is_some() => {
                self.cow().promote(sandbox)?;
            }
            _ => {
                self.cow().discard(sandbox)?;
            }
        }
        Ok(())
    }
}

/// Handle on the scheduler thread; dropping it stops the scheduler after
/// the running job.
pub struct Scheduler {
    orch: Arc<Orchestrator>,
    handle: Option<JoinHandle<()>>,
}

impl Scheduler {
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.orch.shutdown.store(true, Ordering::Relaxed);
        {
            let _t = self.orch.table.lock();
            self.orch.wake.notify_all();
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        self.orch.scheduled.store(false, Ordering::Release);
    }
}

impl Drop for Scheduler {
    fn drop(&mut self) {
        self.halt();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n: usize,
    pub avg_seconds: f64,
    /// Per clone: data added relative to the base volume.
    pub data_bytes: f64,
    pub metadata_bytes: f64,
    pub total_bytes: f64,
}

/// Clones `base` `n` times; each clone gets `source` at `path`, Full
/// verification of its recompilation set and an index refresh. Clones live
/// until all are measured and are discarded afterwards.
pub fn run_clone_bench(
    cow: &CowStore,
    base: VolumeId,
    path: &ArticlePath,
    source: &str,
    n: usize,
    pool: &ThreadPool,
    opts: &VerifyOptions,
) -> Result<BenchReport> {
    let (base_lib, _) = load_library(cow, base)?;
    let base_graph = extract_item_graph(&base_lib)?;
    let base_states = read_states(cow, base)?;
    let file = format!("{SOURCE_DIR}/{}", path.source_file());
    let mut clones = Vec::with_capacity(n);
    let (mut secs, mut data, mut meta) = (0.0, 0u64, 0u64);
    let bench_id = cow.volumes().iter().map(|v| v.id.0).max().unwrap_or(0);
    for i in 0..n {
        let t0 = Instant::now();
        let clone = cow.snapshot(base, &format!("bench:{bench_id}:{i}"))?;
        clones.push(clone);
        cow.write_file(clone, &file, source.as_bytes())?;
        let (lib, errors) = load_library(cow, clone)?;
        if let Some(e) = errors.first() {
            return Err(OrchestratorError::InvalidEdit(e.message.clone()));
        }
        let graph = extract_item_graph(&lib)?;
        let out = incremental_verify(
            &VerifyInput {
                lib: &lib,
                graph: &graph,
                old_graph: Some(&base_graph),
                old_states: &base_states,
                mode: Mode::Full,
                hint: None,
                direct_only: false,
                assume_ok: false,
            },
            pool,
            opts,
            &AtomicBool::new(false),
        );
        write_states(cow, clone, &out.states)?;
        render_into(cow, clone, &lib, &graph)?;
        secs += t0.elapsed().as_secs_f64();
        data += cow.unshared_bytes(clone, base)?;
        meta += cow.usage(clone)?.metadata_bytes;
    }
    for c in clones {
        cow.discard(c)?;
    }
    let k = n.max(1) as f64;
    Ok(BenchReport {
        n,
        avg_seconds: secs / k,
        data_bytes: data as f64 / k,
        metadata_bytes: meta as f64 / k,
        total_bytes: (data + meta) as f64 / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{fixture_library, fixture_sources};
    use crate::policy::Required;
    use crate::vcstore::{ObjectSource, RepoBase};

    const POLICY: &str = "@all = @superusers @maintainers @developers @users @anonymous
repo main
    RW+ = @superusers @maintainers
    R = @developers @users @anonymous
repo devel
    RW+ = @superusers @maintainers @developers
    R = @users @anonymous
repo user/CREATOR/[a-zA-Z0-9].*
    C = @superusers @maintainers @developers @users
    RW+ = CREATOR
    R = @all
";

    fn id(s: &str) -> ItemId {
        s.parse().unwrap()
    }

    struct Fx {
        orch: Orchestrator,
        backend: VolumeId,
    }

    fn fixture() -> Fx {
        let cow = Arc::new(CowStore::default());
        let base = cow.create_volume("base").unwrap();
        for (p, s) in fixture_sources() {
            cow.write_file(base, &format!("src/{}", p.source_file()), s.as_bytes())
                .unwrap();
        }
        let pool = build_pool(2);
        refresh_volume(&cow, base, Mode::Full, &pool, &Default::default())
            .unwrap()
            .unwrap();
        let vc = Arc::new(VcStore::new(cow.clone()));
        let policy = PolicyConfig::parse(POLICY).unwrap();
        let root = Principal::admin("root");
        let info = vc
            .create_repo("main", &root, &policy, RepoBase::Volume(base))
            .unwrap();
        let c = vc
            .commit_tree("main", None, info.backend, "root", "init")
            .unwrap();
        vc.push(
            &RefUpdate {
                repo: "main".into(),
                branch: DEFAULT_BRANCH.into(),
                old: None,
                new: c,
                pusher: "root".into(),
            },
            vec![],
            &PushContext {
                principal: &root,
                policy: &policy,
                gate: &NoGate,
                hooks: &[],
                via_mirror: false,
            },
        )
        .unwrap();
        let orch = Orchestrator::new(
            vc,
            policy,
            VerifyPolicy::default(),
            OrchestratorConfig {
                workers: 2,
                ..Default::default()
            },
        );
        Fx {
            orch,
            backend: info.backend,
        }
    }

    fn edit(item: &str, article: &str, text: &str) -> JobKind {
        JobKind::Edit(DelimitedEdit {
            repo: "main".into(),
            article: article.parse().unwrap(),
            item: item.into(),
            new_text: text.into(),
            base: None,
            kind_change: false,
        })
    }

    #[test]
    fn classification() {
        let lib = fixture_library();
        let nat = lib.get(&"nat".parse().unwrap()).unwrap();
        let calc = lib.get(&"calc".parse().unwrap()).unwrap();
        let cls = |a: &crate::minilib::Article, name: &str, text: &str| {
            classify_edit(
                &a.source,
                a.item(name).unwrap(),
                text,
                &parse_item(text).unwrap(),
            )
        };
        assert_eq!(
            cls(
                nat,
                "add_comm",
                "thm add_comm : two + three = three + two proof by add_comm;"
            ),
            EditClass::ProofOnly
        );
        assert_eq!(
            cls(calc, "six", "def six := 6;"),
            EditClass::StatementChange
        );
        assert_eq!(
            cls(calc, "six", "thm six : 6 = 6 proof eval;"),
            EditClass::KindChange
        );
        assert_eq!(cls(calc, "six", "def seven := 7;"), EditClass::NameChange);
    }

    #[test]
    fn impact_plans() {
        let lib = fixture_library();
        let g = extract_item_graph(&lib).unwrap();
        let p = plan_impact(EditClass::ProofOnly, &id("nat#add_comm"), &g, false).unwrap();
        assert_eq!(p.affected, [id("nat#add_comm")].into());
        let p = plan_impact(EditClass::StatementChange, &id("calc#six"), &g, false).unwrap();
        assert_eq!(
            p.affected,
            [id("calc#six"), id("calc#six_is_six"), id("calc#use")].into()
        );
        let p = plan_impact(EditClass::StatementChange, &id("calc#use"), &g, false).unwrap();
        assert_eq!(p.affected, [id("calc#use")].into());
        let p = plan_impact(EditClass::StatementChange, &id("nat#two"), &g, true).unwrap();
        assert!(!p.affected.contains(&id("calc#six_is_six")));
        assert!(plan_impact(EditClass::ProofOnly, &id("nat#nope"), &g, false).is_err());
    }

    #[test]
    fn queue_order_and_cancel() {
        let fx = fixture();
        let alice = Principal::new("alice", ["@maintainers"]);
        let bob = Principal::new("bob", ["@users"]);
        let ids: Vec<JobId> = (0..3)
            .map(|_| {
                fx.orch
                    .enqueue(&alice, edit("two", "nat", "def two := 2;"), Mode::Quick)
                    .unwrap()
            })
            .collect();
        let listed: Vec<JobId> = fx.orch.list_queue("alice").iter().map(|j| j.id).collect();
        assert_eq!(listed, ids);
        assert!(matches!(
            fx.orch.cancel(&bob, ids[0]),
            Err(OrchestratorError::NotOwner { .. })
        ));
        assert_eq!(fx.orch.cancel(&alice, ids[1]).unwrap(), JobState::Cancelled);
        assert!(matches!(
            fx.orch.cancel(&alice, 99),
            Err(OrchestratorError::UnknownJob(99))
        ));
        assert_eq!(fx.orch.run_pending(), 2);
        assert_eq!(fx.orch.job(ids[1]).unwrap().state, JobState::Cancelled);
        assert_eq!(fx.orch.job(ids[0]).unwrap().state, JobState::Succeeded);
        // main requires Full.
        assert_eq!(fx.orch.job(ids[0]).unwrap().mode, Mode::Full);
        assert!(fx
            .orch
            .cow()
            .volumes()
            .iter()
            .all(|v| !v.name.starts_with("sandbox")));
    }

    #[test]
    fn proof_only_edit_checks_one_item() {
        let fx = fixture();
        let m = Principal::new("mia", ["@maintainers"]);
        let before = fx.orch.vc().require_ref("main", DEFAULT_BRANCH).unwrap();
        let j = fx
            .orch
            .enqueue(
                &m,
                edit(
                    "add_comm",
                    "nat",
                    "thm add_comm : two + three = three + two proof -- recheck\n  eval;",
                ),
                Mode::Full,
            )
            .unwrap();
        fx.orch.run_pending();
        let info = fx.orch.job(j).unwrap();
        assert_eq!(info.state, JobState::Succeeded, "{info:?}");
        let r = info.report.unwrap();
        assert_eq!(r.verified, vec![id("nat#add_comm")]);
        let after = fx.orch.vc().require_ref("main", DEFAULT_BRANCH).unwrap();
        assert_ne!(before, after);
        let c = fx.orch.vc().objects().commit(&after).unwrap();
        assert_eq!(c.parents, vec![before]);
    }

    #[test]
    fn failing_edit_rolls_back() {
        let fx = fixture();
        let m = Principal::new("mia", ["@maintainers"]);
        let cow = fx.orch.cow().clone();
        let hash = cow.tree_hash(fx.backend).unwrap();
        let j = fx
            .orch
            .enqueue(&m, edit("six", "calc", "def six := 7;"), Mode::Full)
            .unwrap();
        fx.orch.run_pending();
        let info = fx.orch.job(j).unwrap();
        let JobState::Failed(d) = &info.state else {
            panic!("{info:?}")
        };
        assert!(d.iter().any(|d| d.item == Some(id("calc#six_is_six"))));
        assert_eq!(cow.tree_hash(fx.backend).unwrap(), hash);
    }

    #[test]
    fn statement_edit_rechecks_dependents() {
        let fx = fixture();
        let m = Principal::new("mia", ["@maintainers"]);
        let j = fx
            .orch
            .enqueue(
                &m,
                edit("six", "calc", "def six := 3 * nat.two;"),
                Mode::Full,
            )
            .unwrap();
        fx.orch.run_pending();
        let r = fx.orch.job(j).unwrap().report.unwrap();
        assert_eq!(
            r.planned,
            [id("calc#six"), id("calc#six_is_six"), id("calc#use")].into()
        );
        assert_eq!(r.verified.len(), 3);
    }

    #[test]
    fn denied_edit() {
        let fx = fixture();
        let u = Principal::new("uma", ["@users"]);
        let j = fx
            .orch
            .enqueue(&u, edit("two", "nat", "def two := 2;"), Mode::Full)
            .unwrap();
        fx.orch.run_pending();
        assert!(matches!(fx.orch.job(j).unwrap().state, JobState::Failed(_)));
        let anon = Principal::anonymous();
        assert!(fx
            .orch
            .dry_run(
                &anon,
                &DelimitedEdit {
                    repo: "main".into(),
                    article: "calc".parse().unwrap(),
                    item: "six".into(),
                    new_text: "def six := 6;".into(),
                    base: None,
                    kind_change: false,
                }
            )
            .is_ok());
    }

    #[test]
    fn dry_run_predictions() {
        let fx = fixture();
        let who = Principal::new("mia", ["@maintainers"]);
        let mk = |item: &str, article: &str, text: &str| DelimitedEdit {
            repo: "main".into(),
            article: article.parse().unwrap(),
            item: item.into(),
            new_text: text.into(),
            base: None,
            kind_change: false,
        };
        let (c, p) = fx
            .orch
            .dry_run(
                &who,
                &mk(
                    "add_comm",
                    "nat",
                    "thm add_comm : two + three = three + two proof by add_comm;",
                ),
            )
            .unwrap();
        assert_eq!((c, p.affected.len()), (EditClass::ProofOnly, 1));
        let (c, p) = fx
            .orch
            .dry_run(&who, &mk("six", "calc", "def six := 6;"))
            .unwrap();
        assert_eq!((c, p.affected.len()), (EditClass::StatementChange, 3));
        assert!(fx.orch.job(1).is_none());
    }

    #[test]
    fn self_citation_fails() {
        let fx = fixture();
        let m = Principal::new("mia", ["@maintainers"]);
        let before = fx.orch.vc().require_ref("main", DEFAULT_BRANCH).unwrap();
        let j = fx
            .orch
            .enqueue(
                &m,
                edit(
                    "add_comm",
                    "nat",
                    "thm add_comm : two + three = three + two proof by add_comm;",
                ),
                Mode::Full,
            )
            .unwrap();
        fx.orch.run_pending();
        assert!(matches!(fx.orch.job(j).unwrap().state, JobState::Failed(_)));
        assert_eq!(
            fx.orch.vc().require_ref("main", DEFAULT_BRANCH).unwrap(),
            before
        );
    }

    #[test]
    fn incremental_equals_full() {
        use crate::corpus::{apply_item_edit, random_item_edit, random_library, GenConfig};
        use rand::{Rng, SeedableRng};
        let pool = build_pool(4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let lib = random_library(&mut rng, &GenConfig::default());
            let old = verify_library(&lib, Mode::Full, &pool, &Default::default()).unwrap();
            let ids = lib.item_ids();
            let target = &ids[rng.gen_range(0..ids.len())];
            let text = random_item_edit(&mut rng, &lib, target);
            let new_lib = apply_item_edit(&lib, target, &text);
            let (a, item) = lib.item(target).unwrap();
            let new_item = parse_item(&text).unwrap();
            let class = classify_edit(&a.source, item, &text, &new_item);
            let g = extract_item_graph(&new_lib).unwrap();
            let og = extract_item_graph(&lib).unwrap();
            let inc = incremental_verify(
                &VerifyInput {
                    lib: &new_lib,
                    graph: &g,
                    old_graph: Some(&og),
                    old_states: &old,
                    mode: Mode::Full,
                    hint: Some((target, class)),
                    direct_only: false,
                    assume_ok: false,
                },
                &pool,
                &Default::default(),
                &AtomicBool::new(false),
            );
            let full = verify_library(&new_lib, Mode::Full, &pool, &Default::default()).unwrap();
            let strip = |m: &StateMap| {
                m.iter()
                    .map(|(k, v)| (k.clone(), v.status.clone()))
                    .collect::<Vec<_>>()
            };
            assert_eq!(strip(&inc.states), strip(&full));
        }
    }

    #[test]
    fn worker_count_does_not_matter() {
        use crate::corpus::{random_library, GenConfig};
        use rand::SeedableRng;
        let lib = random_library(
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(1),
            &GenConfig::default(),
        );
        let a = verify_library(&lib, Mode::Full, &build_pool(1), &Default::default()).unwrap();
        let b = verify_library(&lib, Mode::Full, &build_pool(4), &Default::default()).unwrap();
        let c = verify_library(&lib, Mode::Full, &build_pool(16), &Default::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn effective_mode() {
        let fx = fixture();
        assert_eq!(fx.orch.effective_mode("main", Mode::Quick), Mode::Full);
        assert_eq!(fx.orch.effective_mode("user/a/x", Mode::Quick), Mode::Quick);
        fx.orch
            .set_verify_policy(VerifyPolicy::new([(".*", Required::Medium)]).unwrap());
        assert_eq!(
            fx.orch.effective_mode("user/a/x", Mode::Quick),
            Mode::Medium
        );
    }

    #[test]
    fn clone_bench_is_deterministic() {
        let cow = CowStore::default();
        let base = cow.create_volume("base").unwrap();
        for (p, s) in fixture_sources() {
            cow.write_file(base, &format!("src/{}", p.source_file()), s.as_bytes())
                .unwrap();
        }
        let pool = build_pool(2);
        refresh_volume(&cow, base, Mode::Full, &pool, &Default::default())
            .unwrap()
            .unwrap();
        let path: ArticlePath = "extra".parse().unwrap();
        let src = "import nat;\ndef nine := nat.three * 3;\nthm n : nine = 9 proof eval;\n";
        let a = run_clone_bench(&cow, base, &path, src, 3, &pool, &Default::default()).unwrap();
        let b = run_clone_bench(&cow, base, &path, src, 3, &pool, &Default::default()).unwrap();
        assert_eq!(a.data_bytes, b.data_bytes);
        assert!(a.data_bytes > 0.0);
        assert_eq!(cow.volumes().len(), 1);
    }

    #[test]
    fn scheduler_thread_runs_jobs() {
        let fx = fixture();
        let orch = Arc::new(fx.orch);
        let sched = orch.start();
        let m = Principal::new("mia", ["@maintainers"]);
        let j = orch
            .enqueue(&m, edit("two", "nat", "def two := 2;"), Mode::Full)
            .unwrap();
        let info = orch.wait(j).unwrap();
        assert_eq!(info.state, JobState::Succeeded);
        sched.stop();
    }
}
