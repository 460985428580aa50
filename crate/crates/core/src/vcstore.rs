//! Minimal content-addressed version control: blobs, trees and commits,
//! per-repository refs, and a push pipeline with a policy gate, a
//! pre-receive verification gate and post-update hooks.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use base64::Engine;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cowstore::{CowError, CowStore, VolumeId};
use crate::minilib::Diagnostic;
use crate::policy::{AccessQuery, Action, PolicyConfig, Principal};

/// Default branch of every repository.
pub const DEFAULT_BRANCH: &str = "master";
/// Working-volume directory mirrored by commits and checkouts.
pub const SOURCE_DIR: &str = "src";

#[derive(Debug, Error)]
pub enum VcError {
    #[error("repository `{0}` not found")]
    RepoNotFound(String),
    #[error("repository `{0}` already exists")]
    AlreadyExists(String),
    #[error("invalid name `{0}`")]
    InvalidName(String),
    #[error("{repo}: branch `{branch}` not found")]
    RefNotFound { repo: String, branch: String },
    #[error("parent commit {0} is unknown")]
    ParentUnknown(ObjectId),
    #[error("object {0} is missing")]
    MissingObject(ObjectId),
    #[error("object store is corrupt: {0}")]
    Corrupt(String),
    #[error("{user} may not {action} `{repo}`")]
    PolicyDenied {
        user: String,
        repo: String,
        action: Action,
    },
    #[error("{repo}/{branch}: {new} does not descend from {old}; rewind permission required")]
    NonFastForward {
        repo: String,
        branch: String,
        old: ObjectId,
        new: ObjectId,
    },
    #[error("verification failed ({} diagnostics)", .0.len())]
    VerificationFailed(Vec<Diagnostic>),
    #[error("{repo}/{branch}: expected {}, found {}", fmt_opt(.expected), fmt_opt(.actual))]
    StaleOld {
        repo: String,
        branch: String,
        expected: Option<ObjectId>,
        actual: Option<ObjectId>,
    },
    #[error(transparent)]
    Cow(#[from] CowError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_opt(id: &Option<ObjectId>) -> String {
    id.map_or_else(|| "nothing".to_string(), |i| i.short())
}

pub type Result<T> = std::result::Result<T, VcError>;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId(pub [u8; 32]);

impl ObjectId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        Some(Self(hex::decode(s).ok()?.try_into().ok()?))
    }

    pub fn short(&self) -> String {
        self.to_hex()[..12].to_string()
    }
}

impl fmt::Debug for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObjectId({})", self.short())
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ObjectId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ObjectId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad object id"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntryKind {
    Blob,
    Tree,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeEntry {
    pub name: String,
    pub kind: EntryKind,
    pub id: ObjectId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Commit {
    pub parents: Vec<ObjectId>,
    pub tree: ObjectId,
    pub author: String,
    pub logical_time: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Object {
    Blob(Vec<u8>),
    /// Entries are kept sorted by name.
    Tree(Vec<TreeEntry>),
    Commit(Commit),
}

fn put_bytes32(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

impl Object {
    fn tag(&self) -> &'static str {
        match self {
            Object::Blob(_) => "blob",
            Object::Tree(_) => "tree",
            Object::Commit(_) => "commit",
        }
    }

    /// `u32 tag length, tag, u64 payload length, payload`.
    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        match self {
            Object::Blob(b) => payload.extend_from_slice(b),
            Object::Tree(entries) => {
                let mut sorted: Vec<&TreeEntry> = entries.iter().collect();
                sorted.sort_by(|a, b| a.name.cmp(&b.name));
                for e in sorted {
                    payload.push(match e.kind {
                        EntryKind::Blob => 0,
                        EntryKind::Tree => 1,
                    });
                    put_bytes32(&mut payload, e.name.as_bytes());
                    payload.extend_from_slice(&e.id.0);
                }
            }
            Object::Commit(c) => {
                payload.extend_from_slice(&(c.parents.len() as u32).to_be_bytes());
                for p in &c.parents {
                    payload.extend_from_slice(&p.0);
                }
                payload.extend_from_slice(&c.tree.0);
                put_bytes32(&mut payload, c.author.as_bytes());
                payload.extend_from_slice(&c.logical_time.to_be_bytes());
                put_bytes32(&mut payload, c.message.as_bytes());
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 16);
        put_bytes32(&mut out, self.tag().as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_be_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn id(&self) -> ObjectId {
        id_of(&self.encode())
    }

    pub fn decode(bytes: &[u8]) -> Result<Object> {
        let mut r = Reader { bytes, pos: 0 };
        let tag = r.bytes32()?;
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after object"));
        }
        let mut p = Reader {
            bytes: payload,
            pos: 0,
        };
        let obj = match tag {
            b"blob" => Object::Blob(payload.to_vec()),
            b"tree" => {
                let mut entries: Vec<TreeEntry> = Vec::new();
                while p.pos < payload.len() {
                    let kind = match p.take(1)?[0] {
                        0 => EntryKind::Blob,
                        1 => EntryKind::Tree,
                        k => return Err(corrupt(&format!("tree entry kind {k}"))),
                    };
                    let name = String::from_utf8(p.bytes32()?.to_vec())
                        .map_err(|_| corrupt("entry name"))?;
                    let id = p.id()?;
                    if entries.last().is_some_and(|l| l.name >= name) {
                        return Err(corrupt("tree entries not sorted"));
                    }
                    entries.push(TreeEntry { name, kind, id });
                }
                Object::Tree(entries)
            }
            b"commit" => {
                let n = p.u32()? as usize;
                let parents = (0..n).map(|_| p.id()).collect::<Result<_>>()?;
                let tree = p.id()?;
                let author =
                    String::from_utf8(p.bytes32()?.to_vec()).map_err(|_| corrupt("author"))?;
                let logical_time = p.u64()?;
                let message =
                    String::from_utf8(p.bytes32()?.to_vec()).map_err(|_| corrupt("message"))?;
                if p.pos != payload.len() {
                    return Err(corrupt("trailing bytes in commit"));
                }
                Object::Commit(Commit {
                    parents,
                    tree,
                    author,
                    logical_time,
                    message,
                })
            }
            other => {
                return Err(corrupt(&format!(
                    "unknown tag {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        Ok(obj)
    }
}

fn corrupt(msg: &str) -> VcError {
    VcError::Corrupt(msg.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt("truncated object"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn bytes32(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn id(&mut self) -> Result<ObjectId> {
        Ok(ObjectId(self.take(32)?.try_into().expect("32 bytes")))
    }
}

pub fn id_of(encoded: &[u8]) -> ObjectId {
    ObjectId(Sha256::digest(encoded).into())
}

/// Read access to encoded objects.
pub trait ObjectSource {
    fn raw(&self, id: &ObjectId) -> Option<Arc<[u8]>>;

    fn contains(&self, id: &ObjectId) -> bool {
        self.raw(id).is_some()
    }

    /// Decodes an object, checking its id against its content.
    fn object(&self, id: &ObjectId) -> Result<Object> {
        let raw = self.raw(id).ok_or(VcError::MissingObject(*id))?;
        if id_of(&raw) != *id {
            return Err(VcError::Corrupt(format!("object {id} fails its hash")));
        }
        Object::decode(&raw)
    }

    fn commit(&self, id: &ObjectId) -> Result<Commit> {
        match self.object(id)? {
            Object::Commit(c) => Ok(c),
            other => Err(VcError::Corrupt(format!(
                "{id} is a {}, not a commit",
                other.tag()
            ))),
        }
    }
}

/// Thread-safe, append-only object store.
#[derive(Default)]
pub struct ObjectStore {
    objects: RwLock<HashMap<ObjectId, Arc<[u8]>>>,
}

impl ObjectSource for ObjectStore {
    fn raw(&self, id: &ObjectId) -> Option<Arc<[u8]>> {
        self.objects.read().get(id).cloned()
    }
}

impl ObjectStore {
    pub fn put(&self, obj: &Object) -> ObjectId {
        let enc = obj.encode();
        let id = id_of(&enc);
        self.objects.write().entry(id).or_insert_with(|| enc.into());
        id
    }

    pub fn len(&self) -> usize {
        self.objects.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> BTreeSet<ObjectId> {
        self.objects.read().keys().copied().collect()
    }

    fn absorb(&self, staged: HashMap<ObjectId, Arc<[u8]>>) {
        let mut g = self.objects.write();
        for (id, raw) in staged {
            g.entry(id).or_insert(raw);
        }
    }
}

/// Objects received with a push, visible on top of the store until the
/// push is accepted.
pub struct Staged<'a> {
    store: &'a ObjectStore,
    extra: HashMap<ObjectId, Arc<[u8]>>,
}

impl ObjectSource for Staged<'_> {
    fn raw(&self, id: &ObjectId) -> Option<Arc<[u8]>> {
        self.extra.get(id).cloned().or_else(|| self.store.raw(id))
    }
}

impl<'a> Staged<'a> {
    pub fn new(store: &'a ObjectStore) -> Self {
        Self {
            store,
            extra: HashMap::new(),
        }
    }

    pub fn put(&mut self, obj: &Object) -> ObjectId {
        let enc = obj.encode();
        let id = id_of(&enc);
        if !self.store.contains(&id) {
            self.extra.entry(id).or_insert_with(|| enc.into());
        }
        id
    }

    /// Encoded objects not already in the store.
    pub fn into_objects(self) -> Vec<Vec<u8>> {
        let mut v: Vec<(ObjectId, Arc<[u8]>)> = self.extra.into_iter().collect();
        v.sort_by_key(|(id, _)| *id);
        v.into_iter().map(|(_, raw)| raw.to_vec()).collect()
    }

    pub fn put_raw(&mut self, raw: Vec<u8>) -> Result<ObjectId> {
        Object::decode(&raw)?;
        let id = id_of(&raw);
        if !self.store.contains(&id) {
            self.extra.entry(id).or_insert_with(|| raw.into());
        }
        Ok(id)
    }
}

/// Whether `ancestor` is reachable from `descendant` by parent links
/// (a commit is its own ancestor).
pub fn is_ancestor(
    src: &dyn ObjectSource,
    ancestor: &ObjectId,
    descendant: &ObjectId,
) -> Result<bool> {
    let mut seen = HashSet::new();
    let mut stack = vec![*descendant];
    while let Some(c) = stack.pop() {
        if c == *ancestor {
            return Ok(true);
        }
        if seen.insert(c) {
            stack.extend(src.commit(&c)?.parents);
        }
    }
    Ok(false)
}

/// Every object reachable from `tips`.
pub fn reachable(src: &dyn ObjectSource, tips: &[ObjectId]) -> Result<BTreeSet<ObjectId>> {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<ObjectId> = tips.to_vec();
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        match src.object(&id)? {
            Object::Blob(_) => {}
            Object::Tree(entries) => stack.extend(entries.iter().map(|e| e.id)),
            Object::Commit(c) => {
                stack.push(c.tree);
                stack.extend(c.parents);
            }
        }
    }
    Ok(seen)
}

/// Encoded objects reachable from `new` but not from `have`.
pub fn objects_for_push(
    src: &dyn ObjectSource,
    new: &ObjectId,
    have: Option<&ObjectId>,
) -> Result<Vec<Vec<u8>>> {
    let skip = match have {
        Some(h) if src.contains(h) => reachable(src, &[*h])?,
        _ => BTreeSet::new(),
    };
    reachable(src, &[*new])?
        .into_iter()
        .filter(|id| !skip.contains(id))
        .map(|id| {
            src.raw(&id)
                .map(|r| r.to_vec())
                .ok_or(VcError::MissingObject(id))
        })
        .collect()
}

/// Sequence of `u64` length-prefixed encoded objects.
pub fn encode_bundle(objects: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for o in objects {
        out.extend_from_slice(&(o.len() as u64).to_be_bytes());
        out.extend_from_slice(o);
    }
    out
}

pub fn decode_bundle(bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    let mut r = Reader { bytes, pos: 0 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let n = r.u64()? as usize;
        out.push(r.take(n)?.to_vec());
    }
    Ok(out)
}

/// Flattened `path -> bytes` view of a tree.
pub fn tree_files(src: &dyn ObjectSource, tree: &ObjectId) -> Result<BTreeMap<String, Vec<u8>>> {
    fn walk(
        src: &dyn ObjectSource,
        tree: &ObjectId,
        prefix: &str,
        out: &mut BTreeMap<String, Vec<u8>>,
    ) -> Result<()> {
        let Object::Tree(entries) = src.object(tree)? else {
            return Err(VcError::Corrupt(format!("{tree} is not a tree")));
        };
        for e in entries {
            let path = if prefix.is_empty() {
                e.name.clone()
            } else {
                format!("{prefix}/{}", e.name)
            };
            match e.kind {
                EntryKind::Tree => walk(src, &e.id, &path, out)?,
                EntryKind::Blob => match src.object(&e.id)? {
                    Object::Blob(b) => {
                        out.insert(path, b);
                    }
                    _ => return Err(VcError::Corrupt(format!("{} is not a blob", e.id))),
                },
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(src, tree, "", &mut out)?;
    Ok(out)
}

/// Stores `files` as nested trees; returns the root tree id.
pub fn write_tree(staged: &mut Staged<'_>, files: &BTreeMap<String, Vec<u8>>) -> ObjectId {
    #[derive(Default)]
    struct Dir<'a> {
        files: BTreeMap<&'a str, &'a [u8]>,
        dirs: BTreeMap<&'a str, Dir<'a>>,
    }
    fn store(staged: &mut Staged<'_>, d: &Dir<'_>) -> ObjectId {
        let mut entries = Vec::new();
        for (name, sub) in &d.dirs {
            entries.push(TreeEntry {
                name: name.to_string(),
                kind: EntryKind::Tree,
                id: store(staged, sub),
            });
        }
        for (name, bytes) in &d.files {
            entries.push(TreeEntry {
                name: name.to_string(),
                kind: EntryKind::Blob,
                id: staged.put(&Object::Blob(bytes.to_vec())),
            });
        }
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        staged.put(&Object::Tree(entries))
    }
    let mut root = Dir::default();
    for (path, bytes) in files {
        let mut parts: Vec<&str> = path.split('/').collect();
        let file = parts.pop().expect("non-empty path");
        let mut d = &mut root;
        for p in parts {
            d = d.dirs.entry(p).or_default();
        }
        d.files.insert(file, bytes);
    }
    store(staged, &root)
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.split('/').all(|seg| {
            !seg.is_empty()
                && seg != "."
                && seg != ".."
                && seg
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefUpdate {
    pub repo: String,
    pub branch: String,
    /// Expected current value; `None` accepts whatever the ref holds when
    /// the push starts (it is still compare-and-set against that value).
    pub old: Option<ObjectId>,
    pub new: ObjectId,
    pub pusher: String,
}

/// Push wire format: the update envelope plus a base64 object bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushRequest {
    pub repo: String,
    pub branch: String,
    pub old: Option<ObjectId>,
    pub new: ObjectId,
    pub pusher: String,
    pub bundle: String,
}

impl PushRequest {
    pub fn new(update: &RefUpdate, objects: &[Vec<u8>]) -> Self {
        Self {
            repo: update.repo.clone(),
            branch: update.branch.clone(),
            old: update.old,
            new: update.new,
            pusher: update.pusher.clone(),
            bundle: base64::engine::general_purpose::STANDARD.encode(encode_bundle(objects)),
        }
    }

    pub fn update(&self) -> RefUpdate {
        RefUpdate {
            repo: self.repo.clone(),
            branch: self.branch.clone(),
            old: self.old,
            new: self.new,
            pusher: self.pusher.clone(),
        }
    }

    pub fn objects(&self) -> Result<Vec<Vec<u8>>> {
        let raw = base64::engine::general_purpose::STANDARD
            .decode(&self.bundle)
            .map_err(|e| VcError::Corrupt(format!("bundle: {e}")))?;
        decode_bundle(&raw)
    }
}

/// What the verification gate sees.
pub struct GateRequest<'a> {
    pub update: &'a RefUpdate,
    /// Current ref value the update will be compared against.
    pub current: Option<ObjectId>,
    pub objects: &'a dyn ObjectSource,
}

pub trait PreReceiveGate {
    fn check(&self, req: &GateRequest<'_>) -> std::result::Result<(), Vec<Diagnostic>>;
}

impl<F: Fn(&GateRequest<'_>) -> std::result::Result<(), Vec<Diagnostic>>> PreReceiveGate for F {
    fn check(&self, req: &GateRequest<'_>) -> std::result::Result<(), Vec<Diagnostic>> {
        self(req)
    }
}

/// Accepts everything.
pub struct NoGate;

impl PreReceiveGate for NoGate {
    fn check(&self, _: &GateRequest<'_>) -> std::result::Result<(), Vec<Diagnostic>> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedUpdate {
    pub repo: String,
    pub branch: String,
    pub old: Option<ObjectId>,
    pub new: ObjectId,
    pub pusher: String,
    /// The update arrived as a mirror delivery.
    pub via_mirror: bool,
}

pub trait PostUpdateHook: Send + Sync {
    fn post_update(&self, update: &AppliedUpdate);
}

pub struct PushContext<'a> {
    pub principal: &'a Principal,
    pub policy: &'a PolicyConfig,
    pub gate: &'a dyn PreReceiveGate,
    pub hooks: &'a [Arc<dyn PostUpdateHook>],
    pub via_mirror: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accepted {
    pub old: Option<ObjectId>,
    pub new: ObjectId,
    /// False when the ref already held `new`.
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoInfo {
    pub name: String,
    pub creator: Option<String>,
    pub backend: VolumeId,
    pub refs: BTreeMap<String, ObjectId>,
}

struct Repo {
    name: String,
    creator: Option<String>,
    backend: VolumeId,
    refs: Mutex<BTreeMap<String, ObjectId>>,
}

impl Repo {
    fn info(&self) -> RepoInfo {
        RepoInfo {
            name: self.name.clone(),
            creator: self.creator.clone(),
            backend: self.backend,
            refs: self.refs.lock().clone(),
        }
    }
}

/// Where a new repository's working volume comes from.
#[derive(Debug, Clone, Copy)]
pub enum RepoBase<'a> {
    Volume(VolumeId),
    /// Snapshot of another repository's backend, starting with its refs.
    Repo(&'a str),
    /// A fresh, empty volume.
    Empty,
}

pub struct VcStore {
    objects: ObjectStore,
    repos: RwLock<BTreeMap<String, Arc<Repo>>>,
    cow: Arc<CowStore>,
}

impl VcStore {
    pub fn new(cow: Arc<CowStore>) -> Self {
        Self {
            objects: ObjectStore::default(),
            repos: RwLock::new(BTreeMap::new()),
            cow,
        }
    }

    pub fn objects(&self) -> &ObjectStore {
        &self.objects
    }

    pub fn cow(&self) -> &Arc<CowStore> {
        &self.cow
    }

    fn repo(&self, name: &str) -> Result<Arc<Repo>> {
        self.repos
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| VcError::RepoNotFound(name.to_string()))
    }

    pub fn repo_info(&self, name: &str) -> Result<RepoInfo> {
        Ok(self.repo(name)?.info())
    }

    pub fn repos(&self) -> Vec<RepoInfo> {
        self.repos.read().values().map(|r| r.info()).collect()
    }

    pub fn get_ref(&self, repo: &str, branch: &str) -> Result<Option<ObjectId>> {
        Ok(self.repo(repo)?.refs.lock().get(branch).copied())
    }

    pub fn require_ref(&self, repo: &str, branch: &str) -> Result<ObjectId> {
        self.get_ref(repo, branch)?
            .ok_or_else(|| VcError::RefNotFound {
                repo: repo.to_string(),
                branch: branch.to_string(),
            })
    }

    /// Creates a repository if `principal` may create it, with a working
    /// volume snapshotted from `base`.
    pub fn create_repo(
        &self,
        name: &str,
        principal: &Principal,
        policy: &PolicyConfig,
        base: RepoBase<'_>,
    ) -> Result<RepoInfo> {
        if !valid_name(name) {
            return Err(VcError::InvalidName(name.to_string()));
        }
        let q = AccessQuery {
            principal,
            repo: name,
            action: Action::Create,
            creator: Some(&principal.user),
        };
        if !policy.authorize(&q).is_allow() {
            return Err(VcError::PolicyDenied {
                user: principal.user.clone(),
                repo: name.to_string(),
                action: Action::Create,
            });
        }
        let mut repos = self.repos.write();
        if repos.contains_key(name) {
            return Err(VcError::AlreadyExists(name.to_string()));
        }
        let vol_name = format!("repo:{name}");
        let (backend, refs) = match base {
            RepoBase::Volume(v) => (self.cow.snapshot(v, &vol_name)?, BTreeMap::new()),
            RepoBase::Repo(src) => {
                let r = repos
                    .get(src)
                    .ok_or_else(|| VcError::RepoNotFound(src.to_string()))?;
                (
                    self.cow.snapshot(r.backend, &vol_name)?,
                    r.refs.lock().clone(),
                )
            }
            RepoBase::Empty => (self.cow.create_volume(&vol_name)?, BTreeMap::new()),
        };
        let repo = Arc::new(Repo {
            name: name.to_string(),
            creator: Some(principal.user.clone()),
            backend,
            refs: Mutex::new(refs),
        });
        let info = repo.info();
        repos.insert(name.to_string(), repo);
        Ok(info)
    }

    /// Registers a repository around an existing volume without any policy
    /// check (store bootstrap and reload).
    pub fn adopt_repo(&self, info: RepoInfo) -> Result<()> {
        if !valid_name(&info.name) {
            return Err(VcError::InvalidName(info.name));
        }
        self.cow.volume(info.backend)?;
        let mut repos = self.repos.write();
        if repos.contains_key(&info.name) {
            return Err(VcError::AlreadyExists(info.name));
        }
        repos.insert(
            info.name.clone(),
            Arc::new(Repo {
                name: info.name,
                creator: info.creator,
                backend: info.backend,
                refs: Mutex::new(info.refs),
            }),
        );
        Ok(())
    }

    /// Builds commit objects for the `src/` tree of `workdir` into `staged`.
    pub fn stage_commit(
        &self,
        staged: &mut Staged<'_>,
        parent: Option<ObjectId>,
        workdir: VolumeId,
        author: &str,
        message: &str,
    ) -> Result<ObjectId> {
        let prefix = format!("{SOURCE_DIR}/");
        let mut files = BTreeMap::new();
        for path in self.cow.list_files(workdir, &prefix)? {
            let bytes = self.cow.read_file(workdir, &path)?;
            files.insert(path[prefix.len()..].to_string(), bytes);
        }
        let tree = write_tree(staged, &files);
        let logical_time = match parent {
            Some(p) => {
                staged
                    .commit(&p)
                    .map_err(|_| VcError::ParentUnknown(p))?
                    .logical_time
                    + 1
            }
            None => 0,
        };
        Ok(staged.put(&Object::Commit(Commit {
            parents: parent.into_iter().collect(),
            tree,
            author: author.to_string(),
            logical_time,
            message: message.to_string(),
        })))
    }

    /// Stores a commit of `workdir`'s `src/` tree. The commit's logical time
    /// is one past its parent's, so identical inputs give identical ids.
    pub fn commit_tree(
        &self,
        repo: &str,
        parent: Option<ObjectId>,
        workdir: VolumeId,
        author: &str,
        message: &str,
    ) -> Result<ObjectId> {
        self.repo(repo)?;
        let mut staged = Staged::new(&self.objects);
        let id = self.stage_commit(&mut staged, parent, workdir, author, message)?;
        self.objects.absorb(staged.extra);
        Ok(id)
    }

    /// Makes `into`'s `src/` tree equal to the commit's tree, rewriting only
    /// paths whose content differs.
    pub fn checkout_commit(
        &self,
        src: &dyn ObjectSource,
        commit: &ObjectId,
        into: VolumeId,
    ) -> Result<()> {
        let c = src.commit(commit)?;
        let files = tree_files(src, &c.tree)?;
        let prefix = format!("{SOURCE_DIR}/");
        for path in self.cow.list_files(into, &prefix)? {
            if !files.contains_key(&path[prefix.len()..]) {
                self.cow.remove_file(into, &path)?;
            }
        }
        for (rel, bytes) in files {
            let path = format!("{prefix}{rel}");
            let same = self.cow.exists(into, &path)? && self.cow.read_file(into, &path)? == bytes;
            if !same {
                self.cow.write_file(into, &path, &bytes)?;
            }
        }
        Ok(())
    }

    pub fn checkout(&self, repo: &str, branch: &str, into: VolumeId) -> Result<()> {
        let id = self.require_ref(repo, branch)?;
        self.checkout_commit(&self.objects, &id, into)
    }

    pub fn files_at(&self, commit: &ObjectId) -> Result<BTreeMap<String, Vec<u8>>> {
        let c = self.objects.commit(commit)?;
        tree_files(&self.objects, &c.tree)
    }

    /// Runs the push pipeline: stage objects, policy, fast-forward check,
    /// verification gate, compare-and-set, post-update hooks. A rejected
    /// push changes nothing.
    pub fn push(
        &self,
        update: &RefUpdate,
        objects: Vec<Vec<u8>>,
        ctx: &PushContext<'_>,
    ) -> Result<Accepted> {
        let repo = self.repo(&update.repo)?;
        if !valid_name(&update.branch) {
            return Err(VcError::InvalidName(update.branch.clone()));
        }
        let mut staged = Staged::new(&self.objects);
        for raw in objects {
            staged.put_raw(raw)?;
        }
        // Everything reachable from the new tip must be present.
        reachable(&staged, &[update.new])?;
        staged.commit(&update.new)?;

        let ask = |action| {
            ctx.policy.authorize(&AccessQuery {
                principal: ctx.principal,
                repo: &update.repo,
                action,
                creator: repo.creator.as_deref(),
            })
        };
        if !ask(Action::Write).is_allow() {
            return Err(VcError::PolicyDenied {
                user: ctx.principal.user.clone(),
                repo: update.repo.clone(),
                action: Action::Write,
            });
        }

        let current = repo.refs.lock().get(&update.branch).copied();
        if update.old.is_some() && update.old != current {
            return Err(VcError::StaleOld {
                repo: update.repo.clone(),
                branch: update.branch.clone(),
                expected: update.old,
                actual: current,
            });
        }
        if current == Some(update.new) {
            return Ok(Accepted {
                old: current,
                new: update.new,
                changed: false,
            });
        }

        if let Some(old) = current {
            if !is_ancestor(&staged, &old, &update.new)? && !ask(Action::Rewind).is_allow() {
                return Err(VcError::NonFastForward {
                    repo: update.repo.clone(),
                    branch: update.branch.clone(),
                    old,
                    new: update.new,
                });
            }
        }

        ctx.gate
            .check(&GateRequest {
                update,
                current,
                objects: &staged,
            })
            .map_err(VcError::VerificationFailed)?;

        {
            let mut refs = repo.refs.lock();
            let now = refs.get(&update.branch).copied();
            if now != current {
                return Err(VcError::StaleOld {
                    repo: update.repo.clone(),
                    branch: update.branch.clone(),
                    expected: current,
                    actual: now,
                });
            }
            self.objects.absorb(staged.extra);
            refs.insert(update.branch.clone(), update.new);
        }

        let applied = AppliedUpdate {
            repo: update.repo.clone(),
            branch: update.branch.clone(),
            old: current,
            new: update.new,
            pusher: update.pusher.clone(),
            via_mirror: ctx.via_mirror,
        };
        for h in ctx.hooks {
            h.post_update(&applied);
        }
        Ok(Accepted {
            old: current,
            new: update.new,
            changed: true,
        })
    }

    /// Writes `objects/` (one file per object) and `repos.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let obj_dir = dir.join("objects");
        std::fs::create_dir_all(&obj_dir)?;
        for (id, raw) in self.objects.objects.read().iter() {
            let p = obj_dir.join(id.to_hex());
            if !p.exists() {
                std::fs::write(p, raw)?;
            }
        }
        let repos: Vec<RepoInfo> = self.repos();
        let tmp = dir.join("repos.json.tmp");
        std::fs::write(
            &tmp,
            serde_json::to_vec_pretty(&repos).map_err(|e| VcError::Corrupt(e.to_string()))?,
        )?;
        std::fs::rename(tmp, dir.join("repos.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path, cow: Arc<CowStore>) -> Result<Self> {
        let vc = Self::new(cow);
        {
            let mut objects = vc.objects.objects.write();
            for entry in std::fs::read_dir(dir.join("objects"))? {
                let entry = entry?;
                let name = entry.file_name();
                let id = name
                    .to_str()
                    .and_then(ObjectId::from_hex)
                    .ok_or_else(|| VcError::Corrupt(format!("stray file {:?}", entry.path())))?;
                let raw = std::fs::read(entry.path())?;
                if id_of(&raw) != id {
                    return Err(VcError::Corrupt(format!("object {id} fails its hash")));
                }
                objects.insert(id, raw.into());
            }
        }
        let repos: Vec<RepoInfo> = serde_json::from_slice(&std::fs::read(dir.join("repos.json"))?)
            .map_err(|e| VcError::Corrupt(e.to_string()))?;
        for r in repos {
            vc.adopt_repo(r)?;
        }
        Ok(vc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Principal;

    const FIG5: &str = "@all = @superusers @maintainers @developers @users @anonymous
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

    struct Fixture {
        cow: Arc<CowStore>,
        vc: VcStore,
        policy: PolicyConfig,
        base: VolumeId,
    }

    fn fixture() -> Fixture {
        let cow = Arc::new(CowStore::default());
        let base = cow.create_volume("base").unwrap();
        cow.write_file(base, "src/nat.fml", b"def two := 2;")
            .unwrap();
        let vc = VcStore::new(cow.clone());
        let policy = PolicyConfig::parse(FIG5).unwrap();
        for name in ["main", "devel"] {
            vc.create_repo(
                name,
                &Principal::admin("root"),
                &policy,
                RepoBase::Volume(base),
            )
            .unwrap();
        }
        Fixture {
            cow,
            vc,
            policy,
            base,
        }
    }

    fn ctx<'a>(who: &'a Principal, policy: &'a PolicyConfig) -> PushContext<'a> {
        PushContext {
            principal: who,
            policy,
            gate: &NoGate,
            hooks: &[],
            via_mirror: false,
        }
    }

    /// Commit of `files` on top of `parent`, as (id, encoded objects).
    fn make_commit(
        f: &Fixture,
        parent: Option<ObjectId>,
        files: &[(&str, &str)],
        author: &str,
    ) -> (ObjectId, Vec<Vec<u8>>) {
        let mut staged = Staged::new(&f.vc.objects);
        let map: BTreeMap<String, Vec<u8>> = files
            .iter()
            .map(|(p, c)| (p.to_string(), c.as_bytes().to_vec()))
            .collect();
        let tree = write_tree(&mut staged, &map);
        let time = parent.map_or(0, |p| staged.commit(&p).unwrap().logical_time + 1);
        let id = staged.put(&Object::Commit(Commit {
            parents: parent.into_iter().collect(),
            tree,
            author: author.into(),
            logical_time: time,
            message: "m".into(),
        }));
        let objs = staged.extra.values().map(|r| r.to_vec()).collect();
        (id, objs)
    }

    fn upd(repo: &str, old: Option<ObjectId>, new: ObjectId, who: &str) -> RefUpdate {
        RefUpdate {
            repo: repo.into(),
            branch: DEFAULT_BRANCH.into(),
            old,
            new,
            pusher: who.into(),
        }
    }

    #[test]
    fn encoding_roundtrips_and_sorts() {
        let t = Object::Tree(vec![
            TreeEntry {
                name: "b".into(),
                kind: EntryKind::Blob,
                id: Object::Blob(vec![1]).id(),
            },
            TreeEntry {
                name: "a".into(),
                kind: EntryKind::Tree,
                id: Object::Tree(vec![]).id(),
            },
        ]);
        let decoded = Object::decode(&t.encode()).unwrap();
        let Object::Tree(e) = &decoded else { panic!() };
        assert_eq!(e[0].name, "a");
        assert_eq!(decoded.id(), t.id());
        assert!(Object::decode(&t.encode()[..10]).is_err());
        let c = Object::Commit(Commit {
            parents: vec![t.id()],
            tree: t.id(),
            author: "a".into(),
            logical_time: 3,
            message: "hi".into(),
        });
        assert_eq!(Object::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn commits_are_deterministic_and_share_subtrees() {
        let f = fixture();
        let main = f.vc.repo_info("main").unwrap();
        let a =
            f.vc.commit_tree("main", None, main.backend, "root", "init")
                .unwrap();
        let b =
            f.vc.commit_tree("main", None, main.backend, "root", "init")
                .unwrap();
        assert_eq!(a, b);

        let empty_vol = f.cow.create_volume("empty").unwrap();
        let e =
            f.vc.commit_tree("main", None, empty_vol, "root", "empty")
                .unwrap();
        let ec = f.vc.objects.commit(&e).unwrap();
        assert_eq!(ec.tree, Object::Tree(vec![]).id());

        f.cow
            .write_file(main.backend, "src/deep/x.fml", b"def x := 1;")
            .unwrap();
        f.cow
            .write_file(main.backend, "src/other/y.fml", b"def y := 1;")
            .unwrap();
        let c1 =
            f.vc.commit_tree("main", Some(a), main.backend, "root", "two dirs")
                .unwrap();
        f.cow
            .write_file(main.backend, "src/deep/x.fml", b"def x := 2;")
            .unwrap();
        let c2 =
            f.vc.commit_tree("main", Some(c1), main.backend, "root", "edit")
                .unwrap();
        let sub = |c: &ObjectId, name: &str| {
            let Object::Tree(e) =
                f.vc.objects
                    .object(&f.vc.objects.commit(c).unwrap().tree)
                    .unwrap()
            else {
                panic!()
            };
            e.into_iter().find(|x| x.name == name).unwrap().id
        };
        assert_ne!(sub(&c1, "deep"), sub(&c2, "deep"));
        assert_eq!(sub(&c1, "other"), sub(&c2, "other"));
        assert!(matches!(
            f.vc.commit_tree("main", Some(ObjectId([9; 32])), main.backend, "r", "m"),
            Err(VcError::ParentUnknown(_))
        ));
    }

    #[test]
    fn checkout_roundtrip() {
        let f = fixture();
        let main = f.vc.repo_info("main").unwrap();
        let c =
            f.vc.commit_tree("main", None, main.backend, "root", "init")
                .unwrap();
        let (c2, objs) = make_commit(
            &f,
            Some(c),
            &[("nat.fml", "def two := 2;"), ("calc.fml", "def six := 6;")],
            "root",
        );
        f.vc.push(
            &upd("main", None, c2, "root"),
            objs,
            &ctx(&Principal::admin("root"), &f.policy),
        )
        .unwrap();

        let wd = f.cow.snapshot(f.base, "wd").unwrap();
        f.cow.write_file(wd, "src/stale.fml", b"x").unwrap();
        f.vc.checkout("main", DEFAULT_BRANCH, wd).unwrap();
        assert_eq!(
            f.cow.list_files(wd, "src/").unwrap(),
            ["src/calc.fml", "src/nat.fml"]
        );
        let again = f.vc.commit_tree("main", Some(c), wd, "root", "m").unwrap();
        assert_eq!(
            f.vc.objects.commit(&again).unwrap().tree,
            f.vc.objects.commit(&c2).unwrap().tree
        );

        // Unchanged nat.fml keeps its extents.
        let before = f.cow.stat(wd, "src/nat.fml").unwrap();
        f.vc.checkout("main", DEFAULT_BRANCH, wd).unwrap();
        assert_eq!(f.cow.stat(wd, "src/nat.fml").unwrap(), before);
        assert!(matches!(
            f.vc.checkout("main", "nope", wd),
            Err(VcError::RefNotFound { .. })
        ));
    }

    #[test]
    fn push_policy_and_fast_forward() {
        let f = fixture();
        let dev = Principal::new("dana", ["@developers"]);
        let user = Principal::new("uma", ["@users"]);
        let (c1, o1) = make_commit(&f, None, &[("a.fml", "def a := 1;")], "dana");
        f.vc.push(&upd("devel", None, c1, "dana"), o1, &ctx(&dev, &f.policy))
            .unwrap();

        let (c2, o2) = make_commit(&f, None, &[("a.fml", "def a := 2;")], "uma");
        let before = f.vc.objects.len();
        let err =
            f.vc.push(
                &upd("main", None, c2, "uma"),
                o2.clone(),
                &ctx(&user, &f.policy),
            )
            .unwrap_err();
        assert!(matches!(err, VcError::PolicyDenied { .. }));
        assert_eq!(f.vc.objects.len(), before);

        // Developers hold RW+ on devel, so a rewind is accepted; a
        // maintainer-free repo would reject it.
        f.vc.push(
            &upd("devel", Some(c1), c2, "dana"),
            o2,
            &ctx(&dev, &f.policy),
        )
        .unwrap();
        assert_eq!(f.vc.get_ref("devel", DEFAULT_BRANCH).unwrap(), Some(c2));
    }

    #[test]
    fn non_fast_forward_needs_rewind() {
        let f = fixture();
        let policy = PolicyConfig::parse("repo main\n RW = dana").unwrap();
        let dana = Principal::new("dana", Vec::<String>::new());
        let (c1, o1) = make_commit(&f, None, &[("a.fml", "1")], "dana");
        f.vc.push(&upd("main", None, c1, "dana"), o1, &ctx(&dana, &policy))
            .unwrap();
        let (c2, o2) = make_commit(&f, Some(c1), &[("a.fml", "2")], "dana");
        f.vc.push(&upd("main", Some(c1), c2, "dana"), o2, &ctx(&dana, &policy))
            .unwrap();
        let (c3, o3) = make_commit(&f, None, &[("a.fml", "3")], "dana");
        assert!(matches!(
            f.vc.push(&upd("main", Some(c2), c3, "dana"), o3, &ctx(&dana, &policy)),
            Err(VcError::NonFastForward { .. })
        ));
    }

    #[test]
    fn creator_repos() {
        let f = fixture();
        let alice = Principal::new("alice", ["@users"]);
        let bob = Principal::new("bob", ["@users"]);
        f.vc.create_repo(
            "user/alice/scratch",
            &alice,
            &f.policy,
            RepoBase::Repo("main"),
        )
        .unwrap();
        assert!(matches!(
            f.vc.create_repo(
                "user/bob/scratch",
                &alice,
                &f.policy,
                RepoBase::Repo("main")
            ),
            Err(VcError::PolicyDenied { .. })
        ));
        assert!(matches!(
            f.vc.create_repo(
                "user/alice/scratch",
                &alice,
                &f.policy,
                RepoBase::Repo("main")
            ),
            Err(VcError::AlreadyExists(_))
        ));
        let (c1, o1) = make_commit(&f, None, &[("a.fml", "1")], "alice");
        f.vc.push(
            &upd("user/alice/scratch", None, c1, "alice"),
            o1,
            &ctx(&alice, &f.policy),
        )
        .unwrap();
        let (c2, o2) = make_commit(&f, None, &[("a.fml", "2")], "alice");
        f.vc.push(
            &upd("user/alice/scratch", Some(c1), c2, "alice"),
            o2.clone(),
            &ctx(&alice, &f.policy),
        )
        .unwrap();
        assert!(matches!(
            f.vc.push(
                &upd("user/alice/scratch", Some(c2), c1, "bob"),
                vec![],
                &ctx(&bob, &f.policy)
            ),
            Err(VcError::PolicyDenied { .. })
        ));
    }

    #[test]
    fn gate_rejection_is_invisible() {
        let f = fixture();
        let root = Principal::admin("root");
        let (c1, o1) = make_commit(&f, None, &[("a.fml", "1")], "root");
        let before = f.vc.objects.ids();
        let gate = |_: &GateRequest<'_>| -> std::result::Result<(), Vec<Diagnostic>> {
            Err(vec![Diagnostic::new(
                None,
                crate::minilib::Stage::Verify,
                "no",
            )])
        };
        let c = PushContext {
            principal: &root,
            policy: &f.policy,
            gate: &gate,
            hooks: &[],
            via_mirror: false,
        };
        assert!(matches!(
            f.vc.push(&upd("main", None, c1, "root"), o1, &c),
            Err(VcError::VerificationFailed(_))
        ));
        assert_eq!(f.vc.objects.ids(), before);
        assert_eq!(f.vc.get_ref("main", DEFAULT_BRANCH).unwrap(), None);
    }

    #[test]
    fn missing_objects_are_rejected() {
        let f = fixture();
        let (c1, mut o1) = make_commit(&f, None, &[("a.fml", "1")], "root");
        o1.retain(|raw| matches!(Object::decode(raw).unwrap(), Object::Commit(_)));
        assert!(matches!(
            f.vc.push(
                &upd("main", None, c1, "root"),
                o1,
                &ctx(&Principal::admin("root"), &f.policy)
            ),
            Err(VcError::MissingObject(_))
        ));
    }

    #[test]
    fn concurrent_pushes_one_winner() {
        let f = fixture();
        let root = Principal::admin("root");
        let (base, o) = make_commit(&f, None, &[("a.fml", "0")], "root");
        f.vc.push(&upd("main", None, base, "root"), o, &ctx(&root, &f.policy))
            .unwrap();
        let candidates: Vec<_> = (0..8)
            .map(|i| make_commit(&f, Some(base), &[("a.fml", &i.to_string())], "root"))
            .collect();
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = candidates
                .iter()
                .map(|(c, objs)| {
                    let (vc, policy, root) = (&f.vc, &f.policy, &root);
                    s.spawn(move || {
                        vc.push(
                            &upd("main", Some(base), *c, "root"),
                            objs.clone(),
                            &ctx(root, policy),
                        )
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
        assert!(results
            .iter()
            .filter(|r| r.is_err())
            .all(|r| matches!(r, Err(VcError::StaleOld { .. }))));
    }

    #[test]
    fn wire_format_roundtrip() {
        let f = fixture();
        let (c1, o1) = make_commit(&f, None, &[("a.fml", "1")], "root");
        let req = PushRequest::new(&upd("main", None, c1, "root"), &o1);
        let json = serde_json::to_string(&req).unwrap();
        let back: PushRequest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.objects().unwrap(), o1);
        assert_eq!(back.update(), upd("main", None, c1, "root"));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let f = fixture();
        let (c1, o1) = make_commit(&f, None, &[("a.fml", "1")], "root");
        f.vc.push(
            &upd("main", None, c1, "root"),
            o1,
            &ctx(&Principal::admin("root"), &f.policy),
        )
        .unwrap();
        f.vc.save(dir.path()).unwrap();
        let back = VcStore::load(dir.path(), f.cow.clone()).unwrap();
        assert_eq!(back.repos(), f.vc.repos());
        assert_eq!(back.objects.ids(), f.vc.objects.ids());
    }
}
