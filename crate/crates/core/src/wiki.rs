//! One wiki server's state: storage, repositories, users, access rules,
//! the verification queue and an optional mirror, plus on-disk persistence.
//!
//! Store layout:
//!
//! ```text
//! <root>/cow/          volumes and extents
//! <root>/vc/           objects/ and repos.json
//! <root>/policy.conf   access rules
//! <root>/users.json    registered users
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cowstore::{CowConfig, CowError, CowStore};
use crate::depgraph::{
    compute_stats, extract_graph, extract_item_graph, minimize_environment, DepGraphError,
    Granularity, StatsReport,
};
use crate::minilib::{
    ArticlePath, Diagnostic, ItemId, ItemKind, ItemStatus, Library, Mode, VerifyOptions,
    SOURCE_EXTENSION,
};
use crate::mirror::{Mirror, MirrorError, PeerConfig, Transport};
use crate::orchestrator::{
    load_library, read_states, refresh_volume, run_clone_bench, verify_library, BenchReport,
    Orchestrator, OrchestratorConfig, OrchestratorError, StateMap, HTML_DIR,
};
use crate::policy::{
    AccessQuery, Action, Decision, PolicyConfig, PolicyError, Principal, VerifyPolicy,
    DEFAULT_POLICY,
};
use crate::render::html_name;
use crate::vcstore::{
    NoGate, PushContext, RefUpdate, RepoBase, RepoInfo, VcError, VcStore, DEFAULT_BRANCH,
    SOURCE_DIR,
};

pub const MAIN_REPO: &str = "main";
pub const ADMIN_USER: &str = "admin";

#[derive(Debug, Error)]
pub enum WikiError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cow(#[from] CowError),
    #[error(transparent)]
    Vc(#[from] VcError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Graph(#[from] DepGraphError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Mirror(Box<MirrorError>),
    #[error("user `{0}` already exists")]
    UserExists(String),
    #[error("invalid user name `{0}`")]
    InvalidUsername(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{user} may not {action} `{repo}`")]
    Denied {
        user: String,
        repo: String,
        action: Action,
    },
    #[error("library does not verify: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Unverified(Vec<Diagnostic>),
    #[error("store is corrupt: {0}")]
    Corrupt(String),
}

impl From<MirrorError> for WikiError {
    fn from(e: MirrorError) -> Self {
        WikiError::Mirror(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, WikiError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub username: String,
    /// Opaque, stored verbatim.
    pub public_key: String,
    pub classes: BTreeSet<String>,
    /// Bypasses access rules.
    #[serde(default)]
    pub admin: bool,
}

#[derive(Debug, Clone)]
pub struct WikiOptions {
    pub workers: usize,
    pub verify_policy: VerifyPolicy,
    /// Re-check only direct dependents of a statement change (unsound).
    pub direct_only: bool,
    pub verify: VerifyOptions,
    pub cow: CowConfig,
}

impl Default for WikiOptions {
    fn default() -> Self {
        let o = OrchestratorConfig::default();
        Self {
            workers: o.workers,
            verify_policy: VerifyPolicy::default(),
            direct_only: o.direct_only,
            verify: o.verify,
            cow: CowConfig::default(),
        }
    }
}

impl WikiOptions {
    fn orchestrator(&self) -> OrchestratorConfig {
        OrchestratorConfig {
            workers: self.workers,
            direct_only: self.direct_only,
            verify: self.verify.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemView {
    pub id: ItemId,
    pub kind: ItemKind,
    pub text: String,
    pub statement: String,
    pub status: Option<ItemStatus>,
    pub mode: Option<Mode>,
    pub dependencies: Vec<ItemId>,
    pub dependents: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub repo: String,
    pub mode: Mode,
    pub items: usize,
    pub ok: usize,
    pub failures: Vec<Diagnostic>,
}

pub struct Wiki {
    root: Option<PathBuf>,
    orch: Arc<Orchestrator>,
    users: RwLock<BTreeMap<String, UserRecord>>,
    policy_text: RwLock<String>,
    mirror: RwLock<Option<Arc<Mirror>>>,
}

fn valid_username(name: &str) -> bool {
    let mut chars = name.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        && name.len() <= 64
        && name != "anonymous"
}

/// Every `.fml` file below `dir`, as (article path, source).
pub fn read_library_dir(dir: &Path) -> Result<Vec<(ArticlePath, String)>> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<(ArticlePath, String)>) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if e.file_type()?.is_dir() {
                walk(&p, base, out)?;
            } else if p.extension().is_some_and(|x| x == SOURCE_EXTENSION) {
                let rel = p
                    .strip_prefix(base)
                    .expect("below base")
                    .to_string_lossy()
                    .replace('\\', "/");
                let path = ArticlePath::from_source_file(&rel)
                    .map_err(|e| WikiError::Corrupt(format!("{rel}: {e}")))?;
                out.push((path, std::fs::read_to_string(&p)?));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

impl Wiki {
    /// An in-memory wiki whose `main` repository holds `sources`, verified
    /// at Full and committed by the administrator.
    pub fn create(
        sources: &[(ArticlePath, String)],
        policy_text: &str,
        opts: &WikiOptions,
    ) -> Result<Self> {
        let policy = PolicyConfig::parse(policy_text)?;
        let cow = Arc::new(CowStore::new(opts.cow.clone()));
        let base = cow.create_volume("library")?;
        for (path, src) in sources {
            cow.write_file(
                base,
                &format!("{SOURCE_DIR}/{}", path.source_file()),
                src.as_bytes(),
            )?;
        }
        let orch_cfg = opts.orchestrator();
        let pool = crate::orchestrator::build_pool(orch_cfg.workers);
        match refresh_volume(&cow, base, Mode::Full, &pool, &orch_cfg.verify)? {
            Err(diags) => return Err(WikiError::Unverified(diags)),
            Ok(out) if !out.failures().is_empty() => {
                return Err(WikiError::Unverified(out.failures()))
            }
            Ok(_) => {}
        }
        drop(pool);
        let vc = Arc::new(VcStore::new(cow));
        let admin = Principal::admin(ADMIN_USER);
        let info = vc.create_repo(MAIN_REPO, &admin, &policy, RepoBase::Volume(base))?;
        let commit = vc.commit_tree(MAIN_REPO, None, info.backend, ADMIN_USER, "import library")?;
        vc.push(
            &RefUpdate {
                repo: MAIN_REPO.into(),
                branch: DEFAULT_BRANCH.into(),
                old: None,
                new: commit,
                pusher: ADMIN_USER.into(),
            },
            Vec::new(),
            &PushContext {
                principal: &admin,
                policy: &policy,
                gate: &NoGate,
                hooks: &[],
                via_mirror: false,
            },
        )?;
        let orch = Arc::new(Orchestrator::new(
            vc,
            policy,
            opts.verify_policy.clone(),
            orch_cfg,
        ));
        let users = [(
            ADMIN_USER.to_string(),
            UserRecord {
                username: ADMIN_USER.into(),
                public_key: String::new(),
                classes: ["@superusers".to_string()].into(),
                admin: true,
            },
        )];
        Ok(Self {
            root: None,
            orch,
            users: RwLock::new(users.into()),
            policy_text: RwLock::new(policy_text.to_string()),
            mirror: RwLock::new(None),
        })
    }

    /// Creates a store at `root` from the articles under `library`, using
    /// the default access rules.
    pub fn init(library: &Path, root: &Path, opts: &WikiOptions) -> Result<Self> {
        if root.join("users.json").exists() {
            return Err(WikiError::Corrupt(format!(
                "{} already holds a store",
                root.display()
            )));
        }
        let sources = read_library_dir(library)?;
        let mut wiki = Self::create(&sources, DEFAULT_POLICY, opts)?;
        wiki.root = Some(root.to_path_buf());
        wiki.save()?;
        Ok(wiki)
    }

    pub fn open(root: &Path, opts: &WikiOptions) -> Result<Self> {
        if !root.join("users.json").exists() {
            return Err(WikiError::NotFound(format!("store at {}", root.display())));
        }
        let cow = Arc::new(CowStore::load(&root.join("cow"), opts.cow.clone())?);
        let vc = Arc::new(VcStore::load(&root.join("vc"), cow)?);
        let policy_text = std::fs::read_to_string(root.join("policy.conf"))?;
        let policy = PolicyConfig::parse(&policy_text)?;
        let users: Vec<UserRecord> =
            serde_json::from_slice(&std::fs::read(root.join("users.json"))?)
                .map_err(|e| WikiError::Corrupt(e.to_string()))?;
        let orch = Arc::new(Orchestrator::new(
            vc,
            policy,
            opts.verify_policy.clone(),
            opts.orchestrator(),
        ));
        Ok(Self {
            root: Some(root.to_path_buf()),
            orch,
            users: RwLock::new(users.into_iter().map(|u| (u.username.clone(), u)).collect()),
            policy_text: RwLock::new(policy_text),
            mirror: RwLock::new(None),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Writes everything to the store root; a no-op for in-memory wikis.
    pub fn save(&self) -> Result<()> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        std::fs::create_dir_all(root)?;
        self.cow().save(&root.join("cow"))?;
        self.vc().save(&root.join("vc"))?;
        std::fs::write(root.join("policy.conf"), self.policy_text.read().as_bytes())?;
        let users: Vec<UserRecord> = self.users.read().values().cloned().collect();
        let tmp = root.join("users.json.tmp");
        std::fs::write(
            &tmp,
            serde_json::to_vec_pretty(&users).expect("users serialize"),
        )?;
        std::fs::rename(tmp, root.join("users.json"))?;
        Ok(())
    }

    pub fn orchestrator(&self) -> &Arc<Orchestrator> {
        &self.orch
    }

    pub fn vc(&self) -> &Arc<VcStore> {
        self.orch.vc()
    }

    pub fn cow(&self) -> &Arc<CowStore> {
        self.orch.cow()
    }

    pub fn mirror(&self) -> Option<Arc<Mirror>> {
        self.mirror.read().clone()
    }

    /// Installs peer mirroring; accepted updates are queued for delivery
    /// from then on.
    pub fn attach_mirror(
        &self,
        cfg: PeerConfig,
        transport: Arc<dyn Transport>,
    ) -> Result<Arc<Mirror>> {
        let m = Arc::new(Mirror::new(
            cfg,
            self.vc().clone(),
            transport,
            self.orch.verify_policy(),
        )?);
        self.orch.add_hook(m.clone());
        *self.mirror.write() = Some(m.clone());
        Ok(m)
    }

    pub fn policy_text(&self) -> String {
        self.policy_text.read().clone()
    }

    pub fn set_policy(&self, text: &str) -> Result<()> {
        self.orch.set_policy(PolicyConfig::parse(text)?);
        *self.policy_text.write() = text.to_string();
        Ok(())
    }

    /// The principal for a request: `None` is anonymous, unknown names get
    /// no classes.
    pub fn principal(&self, user: Option<&str>) -> Principal {
        match user {
            None | Some("anonymous") | Some("anon") => Principal::anonymous(),
            Some(name) => match self.users.read().get(name) {
                Some(u) => Principal {
                    user: u.username.clone(),
                    classes: u.classes.clone(),
                    admin: u.admin,
                },
                None => Principal::new(name, Vec::<String>::new()),
            },
        }
    }

    pub fn users(&self) -> Vec<UserRecord> {
        self.users.read().values().cloned().collect()
    }

    /// Self-registration: new users join `@users`.
    pub fn register(&self, username: &str, public_key: &str) -> Result<UserRecord> {
        if !valid_username(username) {
            return Err(WikiError::InvalidUsername(username.into()));
        }
        let mut users = self.users.write();
        if users.contains_key(username) {
            return Err(WikiError::UserExists(username.into()));
        }
        let rec = UserRecord {
            username: username.into(),
            public_key: public_key.into(),
            classes: ["@users".to_string()].into(),
            admin: false,
        };
        users.insert(username.into(), rec.clone());
        Ok(rec)
    }

    pub fn set_classes(
        &self,
        username: &str,
        classes: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<()> {
        let mut users = self.users.write();
        let u = users
            .get_mut(username)
            .ok_or_else(|| WikiError::NotFound(format!("user `{username}`")))?;
        u.classes = classes.into_iter().map(Into::into).collect();
        Ok(())
    }

    pub fn decide(&self, who: &Principal, repo: &str, action: Action) -> Decision {
        let creator = self.vc().repo_info(repo).ok().and_then(|r| r.creator);
        self.orch.policy().authorize(&AccessQuery {
            principal: who,
            repo,
            action,
            creator: creator.as_deref(),
        })
    }

    pub fn authorize(&self, who: &Principal, repo: &str, action: Action) -> Result<()> {
        if self.decide(who, repo, action).is_allow() {
            Ok(())
        } else {
            Err(WikiError::Denied {
                user: who.user.clone(),
                repo: repo.into(),
                action,
            })
        }
    }

    /// A new repository cloned from `main`.
    pub fn create_repo(&self, who: &Principal, name: &str) -> Result<RepoInfo> {
        Ok(self
            .vc()
            .create_repo(name, who, &self.orch.policy(), RepoBase::Repo(MAIN_REPO))?)
    }

    fn readable(&self, who: &Principal, repo: &str) -> Result<RepoInfo> {
        let info = self.vc().repo_info(repo)?;
        self.authorize(who, repo, Action::Read)?;
        Ok(info)
    }

    pub fn library(&self, who: &Principal, repo: &str) -> Result<Library> {
        let info = self.readable(who, repo)?;
        Ok(load_library(self.cow(), info.backend)?.0)
    }

    pub fn states(&self, who: &Principal, repo: &str) -> Result<StateMap> {
        let info = self.readable(who, repo)?;
        Ok(read_states(self.cow(), info.backend)?)
    }

    pub fn stats(
        &self,
        who: &Principal,
        repo: &str,
        granularity: Granularity,
    ) -> Result<StatsReport> {
        let lib = self.library(who, repo)?;
        Ok(compute_stats(&extract_graph(&lib, granularity)?))
    }

    pub fn mindeps(&self, who: &Principal, repo: &str, item: &ItemId) -> Result<BTreeSet<ItemId>> {
        let lib = self.library(who, repo)?;
        Ok(minimize_environment(&lib, item)?)
    }

    /// A rendered page of the repository's site, e.g. `nat.html`.
    pub fn page(&self, who: &Principal, repo: &str, file: &str) -> Result<String> {
        let info = self.readable(who, repo)?;
        let path = format!("{HTML_DIR}/{file}");
        if file.contains("..") || !self.cow().exists(info.backend, &path)? {
            return Err(WikiError::NotFound(format!("page `{file}`")));
        }
        String::from_utf8(self.cow().read_file(info.backend, &path)?)
            .map_err(|e| WikiError::Corrupt(e.to_string()))
    }

    pub fn article_html(&self, who: &Principal, repo: &str, path: &ArticlePath) -> Result<String> {
        self.page(who, repo, &html_name(path))
    }

    pub fn item_view(&self, who: &Principal, repo: &str, id: &ItemId) -> Result<ItemView> {
        let lib = self.library(who, repo)?;
        let (article, item) = lib
            .item(id)
            .ok_or_else(|| WikiError::NotFound(format!("item {id}")))?;
        let graph = extract_item_graph(&lib)?;
        let state = self.states(who, repo)?.remove(id);
        Ok(ItemView {
            id: id.clone(),
            kind: item.kind(),
            text: article.item_text(item).to_string(),
            statement: article.statement_text(item).to_string(),
            status: state.as_ref().map(|s| s.status.clone()),
            mode: state.map(|s| s.mode),
            dependencies: graph.dependees(id).into_iter().cloned().collect(),
            dependents: graph.dependents(id).into_iter().cloned().collect(),
        })
    }

    /// Verifies the repository from scratch without changing it.
    pub fn verify_repo(&self, who: &Principal, repo: &str, mode: Mode) -> Result<VerifySummary> {
        let info = self.readable(who, repo)?;
        let (lib, parse_errors) = load_library(self.cow(), info.backend)?;
        let states = verify_library(&lib, mode, self.orch.pool(), &self.orch.config().verify)?;
        let mut failures = parse_errors;
        failures.extend(states.values().filter_map(|s| match &s.status {
            ItemStatus::Failed(d) => Some(d.clone()),
            ItemStatus::Ok => None,
        }));
        Ok(VerifySummary {
            repo: repo.into(),
            mode,
            items: states.len(),
            ok: states
                .values()
                .filter(|s| s.status == ItemStatus::Ok)
                .count(),
            failures,
        })
    }

    /// Clone benchmark against `main` (superusers only). Each clone adds a
    /// small article importing every top-level article of the library.
    pub fn clone_bench(&self, who: &Principal, n: usize) -> Result<BenchReport> {
        if !(who.admin || who.classes.contains("@superusers")) {
            return Err(WikiError::Denied {
                user: who.user.clone(),
                repo: MAIN_REPO.into(),
                action: Action::Write,
            });
        }
        let info = self.vc().repo_info(MAIN_REPO)?;
        let lib = load_library(self.cow(), info.backend)?.0;
        let (path, source) = bench_article(&lib);
        Ok(run_clone_bench(
            self.cow(),
            info.backend,
            &path,
            &source,
            n,
            self.orch.pool(),
            &self.orch.config().verify,
        )?)
    }
}

/// A fresh article, importing the whole library, for clone benchmarks.
pub fn bench_article(lib: &Library) -> (ArticlePath, String) {
    let mut name = "bench_probe".to_string();
    while lib
        .get(&ArticlePath::parse_dotted(&name).expect("valid"))
        .is_some()
    {
        name.push('_');
    }
    let mut src: String = lib
        .articles()
        .map(|a| format!("import {};\n", a.path.dotted()))
        .collect();
    src.push_str("def probe := 6 * 7;\nthm probe_ok : probe = 42 proof eval;\n");
    (ArticlePath::parse_dotted(&name).expect("valid"), src)
}
