//! In-process copy-on-write volume store with content-addressed extents and
//! exact space accounting.
//!
//! Volume trees are persistent maps behind `Arc`, so a snapshot is a pointer
//! copy. Extents are immutable, shared by `Arc`, and looked up through a
//! table of weak references: an extent is live exactly while some file
//! entry of some live volume holds it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Weak};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CowError {
    #[error("volume {0} not found")]
    VolumeNotFound(VolumeId),
    #[error("volume named `{0}` already exists")]
    NameCollision(String),
    #[error("volume {0} still has live snapshots")]
    HasChildren(VolumeId),
    #[error("volume {0} is not a snapshot")]
    NoParent(VolumeId),
    #[error("`{0}` is a directory")]
    PathIsDirectory(String),
    #[error("`{path}` not found in volume {vol}")]
    FileNotFound { vol: VolumeId, path: String },
    #[error("invalid path `{0}`")]
    InvalidPath(String),
    #[error("byte range {offset}+{len} outside `{path}`")]
    OutOfRange { path: String, offset: u64, len: u64 },
    #[error("store is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("snapshot backend: {0}")]
    Backend(String),
}

pub type Result<T> = std::result::Result<T, CowError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VolumeId(pub u64);

impl fmt::Display for VolumeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExtentId(pub [u8; 32]);

impl ExtentId {
    fn of(data: &[u8]) -> Self {
        Self(Sha256::digest(data).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    fn from_hex(s: &str) -> Option<Self> {
        Some(Self(hex::decode(s).ok()?.try_into().ok()?))
    }
}

impl fmt::Debug for ExtentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ExtentId({})", &self.to_hex()[..12])
    }
}

#[derive(Debug, Clone)]
pub struct CowConfig {
    /// Writes are split into content-addressed extents of at most this size.
    pub chunk_size: usize,
    /// Charged the first time a volume changes metadata of a shared file.
    pub file_metadata_bytes: u64,
    /// Charged for every file write (inode and extent records).
    pub write_overhead_bytes: u64,
    /// Charged when a volume or snapshot is created.
    pub snapshot_metadata_bytes: u64,
}

impl Default for CowConfig {
    fn default() -> Self {
        Self {
            chunk_size: 64 * 1024,
            file_metadata_bytes: 256,
            write_overhead_bytes: 512,
            snapshot_metadata_bytes: 256,
        }
    }
}

struct Extent {
    id: ExtentId,
    data: Box<[u8]>,
}

#[derive(Clone)]
struct ExtentRef {
    extent: Arc<Extent>,
    offset: u64,
    len: u64,
}

#[derive(Clone)]
struct FileEntry {
    extents: Vec<ExtentRef>,
    mtime: u64,
    size: u64,
    /// Volume that last wrote this entry; other volumes share it read-only.
    owner: VolumeId,
}

type Tree = Arc<BTreeMap<String, Arc<FileEntry>>>;

struct Volume {
    name: String,
    parent: Option<VolumeId>,
    tree: Tree,
    metadata_bytes: u64,
}

/// Public view of one extent reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtentInfo {
    pub id: ExtentId,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileStat {
    pub size: u64,
    pub mtime: u64,
    pub extents: Vec<ExtentInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeInfo {
    pub id: VolumeId,
    pub name: String,
    pub parent: Option<VolumeId>,
}

/// Space used by one volume.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageReport {
    /// Sum of file sizes (reflinked ranges counted every time).
    pub logical_bytes: u64,
    /// Unique extent bytes reachable from the volume.
    pub referenced_bytes: u64,
    /// Unique extent bytes reachable from no other live volume.
    pub exclusive_bytes: u64,
    pub metadata_bytes: u64,
}

/// Space used by the whole store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreUsage {
    pub volumes: usize,
    pub extents: usize,
    pub data_bytes: u64,
    pub metadata_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Default)]
struct Inner {
    volumes: BTreeMap<VolumeId, Volume>,
    extents: HashMap<ExtentId, Weak<Extent>>,
    next_id: u64,
    clock: u64,
}

impl Inner {
    fn vol(&self, id: VolumeId) -> Result<&Volume> {
        self.volumes.get(&id).ok_or(CowError::VolumeNotFound(id))
    }

    fn vol_mut(&mut self, id: VolumeId) -> Result<&mut Volume> {
        self.volumes
            .get_mut(&id)
            .ok_or(CowError::VolumeNotFound(id))
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn check_name(&self, name: &str) -> Result<()> {
        if self.volumes.values().any(|v| v.name == name) {
            Err(CowError::NameCollision(name.to_string()))
        } else {
            Ok(())
        }
    }

    fn new_volume(
        &mut self,
        name: &str,
        parent: Option<VolumeId>,
        tree: Tree,
        metadata_bytes: u64,
    ) -> VolumeId {
        let id = VolumeId(self.next_id);
        self.next_id += 1;
        self.volumes.insert(
            id,
            Volume {
                name: name.to_string(),
                parent,
                tree,
                metadata_bytes,
            },
        );
        id
    }

    fn intern(&mut self, id: ExtentId, data: &[u8]) -> Arc<Extent> {
        if let Some(e) = self.extents.get(&id).and_then(Weak::upgrade) {
            return e;
        }
        let e = Arc::new(Extent {
            id,
            data: data.into(),
        });
        self.extents.insert(id, Arc::downgrade(&e));
        e
    }

    fn live_data(&self) -> (usize, u64) {
        self.extents
            .values()
            .filter_map(Weak::upgrade)
            .fold((0, 0), |(n, b), e| (n + 1, b + e.data.len() as u64))
    }

    fn prune(&mut self) {
        self.extents.retain(|_, w| w.strong_count() > 0);
    }
}

fn validate_path(path: &str) -> Result<()> {
    let ok = !path.is_empty()
        && path
            .split('/')
            .all(|seg| !seg.is_empty() && seg != "." && seg != ".." && !seg.contains('\0'));
    if ok {
        Ok(())
    } else {
        Err(CowError::InvalidPath(path.to_string()))
    }
}

fn is_dir(tree: &BTreeMap<String, Arc<FileEntry>>, path: &str) -> bool {
    let prefix = format!("{path}/");
    tree.range(prefix.clone()..)
        .next()
        .is_some_and(|(k, _)| k.starts_with(&prefix))
}

/// Some proper prefix of `path` that is a file, if any.
fn file_ancestor(tree: &BTreeMap<String, Arc<FileEntry>>, path: &str) -> Option<String> {
    path.match_indices('/')
        .map(|(i, _)| &path[..i])
        .find(|p| tree.contains_key(*p))
        .map(str::to_string)
}

fn unique_extents(tree: &BTreeMap<String, Arc<FileEntry>>) -> HashMap<ExtentId, &Arc<Extent>> {
    let mut out = HashMap::new();
    for e in tree.values() {
        for r in &e.extents {
            out.entry(r.extent.id).or_insert(&r.extent);
        }
    }
    out
}

/// A thread-safe copy-on-write store.
pub struct CowStore {
    cfg: CowConfig,
    inner: RwLock<Inner>,
}

impl Default for CowStore {
    fn default() -> Self {
        Self::new(CowConfig::default())
    }
}

impl CowStore {
    pub fn new(cfg: CowConfig) -> Self {
        Self {
            cfg,
            inner: RwLock::new(Inner::default()),
        }
    }

    pub fn config(&self) -> &CowConfig {
        &self.cfg
    }

    pub fn create_volume(&self, name: &str) -> Result<VolumeId> {
        let mut g = self.inner.write();
        g.check_name(name)?;
        Ok(g.new_volume(
            name,
            None,
            Tree::default(),
            self.cfg.snapshot_metadata_bytes,
        ))
    }

    /// A writable clone sharing every extent of `vol`. Constant time.
    pub fn snapshot(&self, vol: VolumeId, name: &str) -> Result<VolumeId> {
        let mut g = self.inner.write();
        let tree = g.vol(vol)?.tree.clone();
        g.check_name(name)?;
        Ok(g.new_volume(name, Some(vol), tree, self.cfg.snapshot_metadata_bytes))
    }

    /// Drops a volume without children and reports what it freed.
    pub fn discard(&self, vol: VolumeId) -> Result<UsageReport> {
        let mut g = self.inner.write();
        let v = g.vol(vol)?;
        if g.volumes.values().any(|o| o.parent == Some(vol)) {
            return Err(CowError::HasChildren(vol));
        }
        let metadata_bytes = v.metadata_bytes;
        let logical_bytes = v.tree.values().map(|e| e.size).sum();
        let referenced_bytes = unique_extents(&v.tree)
            .values()
            .map(|e| e.data.len() as u64)
            .sum();
        let (_, before) = g.live_data();
        g.volumes.remove(&vol);
        g.prune();
        let (_, after) = g.live_data();
        Ok(UsageReport {
            logical_bytes,
            referenced_bytes,
            exclusive_bytes: before - after,
            metadata_bytes,
        })
    }

    /// Replaces the contents of `sandbox`'s parent with the sandbox's and
    /// retires the sandbox id. The parent keeps its id and name; the report
    /// is what the parent's previous contents freed.
    pub fn promote(&self, sandbox: VolumeId) -> Result<UsageReport> {
        let mut g = self.inner.write();
        let s = g.vol(sandbox)?;
        let parent = s.parent.ok_or(CowError::NoParent(sandbox))?;
        if g.volumes.values().any(|o| o.parent == Some(sandbox)) {
            return Err(CowError::HasChildren(sandbox));
        }
        let (tree, meta) = (s.tree.clone(), s.metadata_bytes);
        let old = g.vol(parent)?;
        let old_meta = old.metadata_bytes;
        let logical_bytes = old.tree.values().map(|e| e.size).sum();
        let referenced_bytes = unique_extents(&old.tree)
            .values()
            .map(|e| e.data.len() as u64)
            .sum();
        let (_, before) = g.live_data();
        g.volumes.remove(&sandbox);
        let p = g.vol_mut(parent)?;
        p.tree = tree;
        p.metadata_bytes = meta;
        g.prune();
        let (_, after) = g.live_data();
        Ok(UsageReport {
            logical_bytes,
            referenced_bytes,
            exclusive_bytes: before - after,
            metadata_bytes: old_meta,
        })
    }

    pub fn write_file(&self, vol: VolumeId, path: &str, bytes: &[u8]) -> Result<()> {
        validate_path(path)?;
        // Hash outside the lock.
        let chunks: Vec<(ExtentId, &[u8])> = bytes
            .chunks(self.cfg.chunk_size.max(1))
            .map(|c| (ExtentId::of(c), c))
            .collect();
        let mut g = self.inner.write();
        let v = g.vol(vol)?;
        if is_dir(&v.tree, path) {
            return Err(CowError::PathIsDirectory(path.to_string()));
        }
        if let Some(f) = file_ancestor(&v.tree, path) {
            return Err(CowError::InvalidPath(format!(
                "{path} (parent `{f}` is a file)"
            )));
        }
        let extents: Vec<ExtentRef> = chunks
            .into_iter()
            .map(|(id, c)| ExtentRef {
                extent: g.intern(id, c),
                offset: 0,
                len: c.len() as u64,
            })
            .collect();
        let mtime = g.tick();
        self.put_entry(&mut g, vol, path, extents, mtime)
    }

    fn put_entry(
        &self,
        g: &mut Inner,
        vol: VolumeId,
        path: &str,
        extents: Vec<ExtentRef>,
        mtime: u64,
    ) -> Result<()> {
        let entry = Arc::new(FileEntry {
            size: extents.iter().map(|e| e.len).sum(),
            extents,
            mtime,
            owner: vol,
        });
        let v = g.vol_mut(vol)?;
        Arc::make_mut(&mut v.tree).insert(path.to_string(), entry);
        v.metadata_bytes += self.cfg.write_overhead_bytes;
        Ok(())
    }

    /// Reflink copy: `dst` in `vol` shares every extent of `src` in
    /// `from`, with no data growth.
    pub fn clone_file(&self, from: VolumeId, src: &str, vol: VolumeId, dst: &str) -> Result<()> {
        validate_path(dst)?;
        let mut g = self.inner.write();
        let extents = g
            .vol(from)?
            .tree
            .get(src)
            .ok_or_else(|| CowError::FileNotFound {
                vol: from,
                path: src.to_string(),
            })?
            .extents
            .clone();
        let v = g.vol(vol)?;
        if is_dir(&v.tree, dst) {
            return Err(CowError::PathIsDirectory(dst.to_string()));
        }
        let mtime = g.tick();
        self.put_entry(&mut g, vol, dst, extents, mtime)
    }

    /// Builds a file out of `count` reflinked copies of `src`.
    pub fn clone_file_repeated(
        &self,
        from: VolumeId,
        src: &str,
        vol: VolumeId,
        dst: &str,
        count: usize,
    ) -> Result<()> {
        validate_path(dst)?;
        let mut g = self.inner.write();
        let one = g
            .vol(from)?
            .tree
            .get(src)
            .ok_or_else(|| CowError::FileNotFound {
                vol: from,
                path: src.to_string(),
            })?
            .extents
            .clone();
        let extents: Vec<ExtentRef> = std::iter::repeat_n(one, count).flatten().collect();
        let mtime = g.tick();
        self.put_entry(&mut g, vol, dst, extents, mtime)
    }

    pub fn read_file(&self, vol: VolumeId, path: &str) -> Result<Vec<u8>> {
        let g = self.inner.read();
        let v = g.vol(vol)?;
        let Some(e) = v.tree.get(path) else {
            if is_dir(&v.tree, path) {
                return Err(CowError::PathIsDirectory(path.to_string()));
            }
            return Err(CowError::FileNotFound {
                vol,
                path: path.to_string(),
            });
        };
        let mut out = Vec::with_capacity(e.size as usize);
        for r in &e.extents {
            out.extend_from_slice(&r.extent.data[r.offset as usize..(r.offset + r.len) as usize]);
        }
        Ok(out)
    }

    /// Updates the logical timestamp. The first change to a file shared
    /// with another volume costs one fixed metadata charge; data is never
    /// copied.
    pub fn set_mtime(&self, vol: VolumeId, path: &str, t: u64) -> Result<()> {
        let mut g = self.inner.write();
        g.tick();
        let cost = self.cfg.file_metadata_bytes;
        let v = g.vol_mut(vol)?;
        let tree = Arc::make_mut(&mut v.tree);
        let e = tree.get_mut(path).ok_or_else(|| CowError::FileNotFound {
            vol,
            path: path.to_string(),
        })?;
        if e.owner != vol {
            v.metadata_bytes += cost;
        }
        let entry = Arc::make_mut(e);
        entry.mtime = t;
        entry.owner = vol;
        Ok(())
    }

    pub fn remove_file(&self, vol: VolumeId, path: &str) -> Result<()> {
        let mut g = self.inner.write();
        let v = g.vol_mut(vol)?;
        if !v.tree.contains_key(path) {
            return Err(CowError::FileNotFound {
                vol,
                path: path.to_string(),
            });
        }
        Arc::make_mut(&mut v.tree).remove(path);
        g.prune();
        Ok(())
    }

    pub fn exists(&self, vol: VolumeId, path: &str) -> Result<bool> {
        Ok(self.inner.read().vol(vol)?.tree.contains_key(path))
    }

    pub fn stat(&self, vol: VolumeId, path: &str) -> Result<FileStat> {
        let g = self.inner.read();
        let e = g
            .vol(vol)?
            .tree
            .get(path)
            .ok_or_else(|| CowError::FileNotFound {
                vol,
                path: path.to_string(),
            })?;
        Ok(FileStat {
            size: e.size,
            mtime: e.mtime,
            extents: e
                .extents
                .iter()
                .map(|r| ExtentInfo {
                    id: r.extent.id,
                    offset: r.offset,
                    len: r.len,
                })
                .collect(),
        })
    }

    /// File paths under `prefix` (all files when empty), sorted.
    pub fn list_files(&self, vol: VolumeId, prefix: &str) -> Result<Vec<String>> {
        let g = self.inner.read();
        Ok(g.vol(vol)?
            .tree
            .keys()
            .filter(|k| prefix.is_empty() || k.starts_with(prefix))
            .cloned()
            .collect())
    }

    pub fn volume(&self, vol: VolumeId) -> Result<VolumeInfo> {
        let g = self.inner.read();
        let v = g.vol(vol)?;
        Ok(VolumeInfo {
            id: vol,
            name: v.name.clone(),
            parent: v.parent,
        })
    }

    pub fn volumes(&self) -> Vec<VolumeInfo> {
        self.inner
            .read()
            .volumes
            .iter()
            .map(|(id, v)| VolumeInfo {
                id: *id,
                name: v.name.clone(),
                parent: v.parent,
            })
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<VolumeId> {
        self.inner
            .read()
            .volumes
            .iter()
            .find(|(_, v)| v.name == name)
            .map(|(id, _)| *id)
    }

    pub fn usage(&self, vol: VolumeId) -> Result<UsageReport> {
        let g = self.inner.read();
        let v = g.vol(vol)?;
        let mine = unique_extents(&v.tree);
        // Entries shared by pointer carry the same extents; skip them.
        let own_entries: HashSet<*const FileEntry> = v.tree.values().map(Arc::as_ptr).collect();
        let mut elsewhere: HashSet<ExtentId> = HashSet::new();
        for (id, o) in &g.volumes {
            if *id == vol || Arc::ptr_eq(&o.tree, &v.tree) {
                if *id != vol {
                    elsewhere.extend(mine.keys().copied());
                }
                continue;
            }
            for e in o.tree.values() {
                if own_entries.contains(&Arc::as_ptr(e)) {
                    elsewhere.extend(e.extents.iter().map(|r| r.extent.id));
                    continue;
                }
                for r in &e.extents {
                    if mine.contains_key(&r.extent.id) {
                        elsewhere.insert(r.extent.id);
                    }
                }
            }
        }
        let size = |id: &ExtentId| mine[id].data.len() as u64;
        Ok(UsageReport {
            logical_bytes: v.tree.values().map(|e| e.size).sum(),
            referenced_bytes: mine.keys().map(size).sum(),
            exclusive_bytes: mine
                .keys()
                .filter(|id| !elsewhere.contains(*id))
                .map(size)
                .sum(),
            metadata_bytes: v.metadata_bytes,
        })
    }

    /// Bytes of extents referenced by `vol` but not by `base`: the data a
    /// clone added relative to its origin, whether or not another volume
    /// happens to hold the same content.
    pub fn unshared_bytes(&self, vol: VolumeId, base: VolumeId) -> Result<u64> {
        let g = self.inner.read();
        let v = g.vol(vol)?;
        let b = g.vol(base)?;
        let mut mine: HashMap<ExtentId, u64> = HashMap::new();
        for (path, e) in v.tree.iter() {
            if b.tree.get(path).is_some_and(|o| Arc::ptr_eq(o, e)) {
                continue;
            }
            for r in &e.extents {
                mine.entry(r.extent.id)
                    .or_insert(r.extent.data.len() as u64);
            }
        }
        if !mine.is_empty() {
            for e in b.tree.values() {
                for r in &e.extents {
                    mine.remove(&r.extent.id);
                }
            }
        }
        Ok(mine.values().sum())
    }

    /// Totals from the extent table.
    pub fn store_usage(&self) -> StoreUsage {
        let g = self.inner.read();
        let (extents, data_bytes) = g.live_data();
        let metadata_bytes = g.volumes.values().map(|v| v.metadata_bytes).sum();
        StoreUsage {
            volumes: g.volumes.len(),
            extents,
            data_bytes,
            metadata_bytes,
            total_bytes: data_bytes + metadata_bytes,
        }
    }

    /// Totals recomputed by walking every live volume tree; must equal
    /// [`store_usage`](Self::store_usage).
    pub fn audit(&self) -> StoreUsage {
        let g = self.inner.read();
        let mut seen: HashMap<ExtentId, u64> = HashMap::new();
        for v in g.volumes.values() {
            for e in v.tree.values() {
                for r in &e.extents {
                    seen.insert(r.extent.id, r.extent.data.len() as u64);
                }
            }
        }
        let data_bytes = seen.values().sum();
        let metadata_bytes = g.volumes.values().map(|v| v.metadata_bytes).sum();
        StoreUsage {
            volumes: g.volumes.len(),
            extents: seen.len(),
            data_bytes,
            metadata_bytes,
            total_bytes: data_bytes + metadata_bytes,
        }
    }

    /// Hash over every path, timestamp and extent reference of the volume.
    pub fn tree_hash(&self, vol: VolumeId) -> Result<[u8; 32]> {
        let g = self.inner.read();
        let mut h = Sha256::new();
        for (path, e) in g.vol(vol)?.tree.iter() {
            h.update((path.len() as u64).to_be_bytes());
            h.update(path.as_bytes());
            h.update(e.mtime.to_be_bytes());
            h.update((e.extents.len() as u64).to_be_bytes());
            for r in &e.extents {
                h.update(r.extent.id.0);
                h.update(r.offset.to_be_bytes());
                h.update(r.len.to_be_bytes());
            }
        }
        Ok(h.finalize().into())
    }

    /// Writes the store under `dir`: `manifest.json` plus one file per
    /// extent in `extents/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let g = self.inner.read();
        let ext_dir = dir.join("extents");
        std::fs::create_dir_all(&ext_dir)?;
        let mut written: HashSet<ExtentId> = HashSet::new();
        let mut volumes = Vec::new();
        for (id, v) in &g.volumes {
            let mut files = BTreeMap::new();
            for (path, e) in v.tree.iter() {
                for r in &e.extents {
                    if written.insert(r.extent.id) {
                        let p = ext_dir.join(r.extent.id.to_hex());
                        if !p.exists() {
                            std::fs::write(&p, &r.extent.data)?;
                        }
                    }
                }
                files.insert(
                    path.clone(),
                    SavedFile {
                        extents: e
                            .extents
                            .iter()
                            .map(|r| (r.extent.id.to_hex(), r.offset, r.len))
                            .collect(),
                        mtime: e.mtime,
                        owner: e.owner,
                    },
                );
            }
            volumes.push(SavedVolume {
                id: *id,
                name: v.name.clone(),
                parent: v.parent,
                metadata_bytes: v.metadata_bytes,
                files,
            });
        }
        let manifest = Manifest {
            next_id: g.next_id,
            clock: g.clock,
            volumes,
        };
        let tmp = dir.join("manifest.json.tmp");
        std::fs::write(
            &tmp,
            serde_json::to_vec(&manifest).map_err(|e| CowError::Corrupt(e.to_string()))?,
        )?;
        std::fs::rename(tmp, dir.join("manifest.json"))?;
        // Extents no volume references any more.
        for entry in std::fs::read_dir(&ext_dir)? {
            let entry = entry?;
            let keep = entry
                .file_name()
                .to_str()
                .and_then(ExtentId::from_hex)
                .is_some_and(|id| written.contains(&id));
            if !keep {
                std::fs::remove_file(entry.path())?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path, cfg: CowConfig) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)
            .map_err(|e| CowError::Corrupt(e.to_string()))?;
        let mut inner = Inner {
            next_id: manifest.next_id,
            clock: manifest.clock,
            ..Inner::default()
        };
        let mut loaded: HashMap<ExtentId, Arc<Extent>> = HashMap::new();
        for sv in manifest.volumes {
            let mut tree = BTreeMap::new();
            for (path, f) in sv.files {
                let mut extents = Vec::new();
                for (hexid, offset, len) in f.extents {
                    let id = ExtentId::from_hex(&hexid)
                        .ok_or_else(|| CowError::Corrupt(format!("extent id {hexid}")))?;
                    let extent = match loaded.get(&id) {
                        Some(e) => e.clone(),
                        None => {
                            let data = std::fs::read(dir.join("extents").join(&hexid))?;
                            if ExtentId::of(&data) != id {
                                return Err(CowError::Corrupt(format!(
                                    "extent {hexid} fails its hash"
                                )));
                            }
                            let e = inner.intern(id, &data);
                            loaded.insert(id, e.clone());
                            e
                        }
                    };
                    extents.push(ExtentRef {
                        extent,
                        offset,
                        len,
                    });
                }
                tree.insert(
                    path,
                    Arc::new(FileEntry {
                        size: extents.iter().map(|e| e.len).sum(),
                        extents,
                        mtime: f.mtime,
                        owner: f.owner,
                    }),
                );
            }
            inner.volumes.insert(
                sv.id,
                Volume {
                    name: sv.name,
                    parent: sv.parent,
                    tree: Arc::new(tree),
                    metadata_bytes: sv.metadata_bytes,
                },
            );
        }
        Ok(Self {
            cfg,
            inner: RwLock::new(inner),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SavedFile {
    extents: Vec<(String, u64, u64)>,
    mtime: u64,
    owner: VolumeId,
}

#[derive(Serialize, Deserialize)]
struct SavedVolume {
    id: VolumeId,
    name: String,
    parent: Option<VolumeId>,
    metadata_bytes: u64,
    files: BTreeMap<String, SavedFile>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    next_id: u64,
    clock: u64,
    volumes: Vec<SavedVolume>,
}

/// A real snapshotting filesystem driven from outside the process.
pub trait SnapshotBackend: Send + Sync {
    fn snapshot(&self, src: &str, dst: &str) -> Result<()>;
    fn discard(&self, vol: &str) -> Result<()>;
}

/// Runs `<program> snapshot <src> <dst>` and `<program> discard <vol>`;
/// exit status 0 means success.
#[derive(Debug, Clone)]
pub struct CommandBackend {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl CommandBackend {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
        }
    }

    fn run(&self, extra: &[&str]) -> Result<()> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .args(extra)
            .output()?;
        if out.status.success() {
            Ok(())
        } else {
            Err(CowError::Backend(format!(
                "`{} {}` exited with {}: {}",
                self.program.display(),
                extra.join(" "),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )))
        }
    }
}

impl SnapshotBackend for CommandBackend {
    fn snapshot(&self, src: &str, dst: &str) -> Result<()> {
        self.run(&["snapshot", src, dst])
    }

    fn discard(&self, vol: &str) -> Result<()> {
        self.run(&["discard", vol])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_shares_everything() {
        let s = CowStore::default();
        let a = s.create_volume("a").unwrap();
        s.write_file(a, "f", &[7u8; 4096]).unwrap();
        let b = s.snapshot(a, "b").unwrap();
        assert_eq!(s.usage(b).unwrap().exclusive_bytes, 0);
        assert_eq!(s.store_usage().data_bytes, 4096);
        assert_eq!(s.read_file(a, "f").unwrap(), s.read_file(b, "f").unwrap());
        let empty = s.create_volume("e").unwrap();
        let e2 = s.snapshot(empty, "e2").unwrap();
        assert!(s.list_files(e2, "").unwrap().is_empty());
    }

    #[test]
    fn new_file_grows_proportionally() {
        let s = CowStore::default();
        let a = s.create_volume("a").unwrap();
        s.write_file(a, "old", b"shared").unwrap();
        let b = s.snapshot(a, "b").unwrap();
        let before = s.usage(b).unwrap();
        s.write_file(b, "new", &vec![1u8; 1000]).unwrap();
        let after = s.usage(b).unwrap();
        assert_eq!(after.exclusive_bytes - before.exclusive_bytes, 1000);
        assert_eq!(
            after.metadata_bytes - before.metadata_bytes,
            s.config().write_overhead_bytes
        );
        assert_eq!(s.read_file(a, "old").unwrap(), b"shared");
        assert!(!s.exists(a, "new").unwrap());
    }

    #[test]
    fn set_mtime_is_metadata_only_and_one_time() {
        let s = CowStore::default();
        let a = s.create_volume("a").unwrap();
        s.write_file(a, "f", &[3u8; 5000]).unwrap();
        let b = s.snapshot(a, "b").unwrap();
        let before = s.store_usage();
        s.set_mtime(b, "f", 99).unwrap();
        let mid = s.store_usage();
        assert_eq!(mid.data_bytes, before.data_bytes);
        assert_eq!(
            mid.metadata_bytes - before.metadata_bytes,
            s.config().file_metadata_bytes
        );
        s.set_mtime(b, "f", 100).unwrap();
        assert_eq!(s.store_usage(), mid);
        assert_ne!(s.stat(a, "f").unwrap().mtime, 100);
    }

    #[test]
    fn identical_writes_are_stored_once() {
        let s = CowStore::default();
        let a = s.create_volume("a").unwrap();
        let b = s.snapshot(a, "b").unwrap();
        let c = s.snapshot(a, "c").unwrap();
        s.write_file(b, "x", &[9u8; 3000]).unwrap();
        s.write_file(c, "y", &[9u8; 3000]).unwrap();
        let u = s.store_usage();
        assert_eq!((u.extents, u.data_bytes), (1, 3000));
        assert_eq!(s.usage(b).unwrap().exclusive_bytes, 0);
    }

    #[test]
    fn discard_frees_exclusive_bytes() {
        let s = CowStore::default();
        let a = s.create_volume("a").unwrap();
        s.write_file(a, "base", &[1u8; 10_000]).unwrap();
        let fresh = s.snapshot(a, "fresh").unwrap();
        assert_eq!(s.discard(fresh).unwrap().exclusive_bytes, 0);

        let b = s.snapshot(a, "b").unwrap();
        let unique: Vec<u8> = (0..5_000_000u64).map(|i| (i * 7919 % 251) as u8).collect();
        s.write_file(b, "big", &unique).unwrap();
        let excl = s.usage(b).unwrap();
        let before = s.store_usage();
        let freed = s.discard(b).unwrap();
        let after = s.store_usage();
        assert_eq!(freed.exclusive_bytes, excl.exclusive_bytes);
        assert_eq!(
            before.total_bytes - after.total_bytes,
            excl.exclusive_bytes + excl.metadata_bytes
        );
        assert_eq!(s.read_file(a, "base").unwrap(), vec![1u8; 10_000]);
    }

    #[test]
    fn discard_with_children_fails_and_ids_are_not_reused() {
        let s = CowStore::default();
        let a = s.create_volume("a").unwrap();
        let b = s.snapshot(a, "b").unwrap();
        assert!(matches!(s.discard(a), Err(CowError::HasChildren(_))));
        s.discard(b).unwrap();
        let c = s.snapshot(a, "b").unwrap();
        assert!(c.0 > b.0);
        assert!(s.snapshot(a, "c").is_ok());
        assert!(matches!(
            s.snapshot(a, "c"),
            Err(CowError::NameCollision(_))
        ));
        assert!(matches!(
            s.read_file(b, "x"),
            Err(CowError::VolumeNotFound(_))
        ));
    }

    #[test]
    fn promote_swaps_contents() {
        let s = CowStore::default();
        let a = s.create_volume("backend").unwrap();
        s.write_file(a, "f", b"old").unwrap();
        let sb = s.snapshot(a, "sandbox").unwrap();
        s.write_file(sb, "f", b"new").unwrap();
        let freed = s.promote(sb).unwrap();
        assert_eq!(freed.exclusive_bytes, 3);
        assert_eq!(s.read_file(a, "f").unwrap(), b"new");
        assert!(s.volume(sb).is_err());
        assert_eq!(s.volume(a).unwrap().name, "backend");
        assert_eq!(s.store_usage(), s.audit());
    }

    #[test]
    fn directories() {
        let s = CowStore::default();
        let a = s.create_volume("a").unwrap();
        s.write_file(a, "src/nat.fml", b"x").unwrap();
        assert!(matches!(
            s.write_file(a, "src", b"y"),
            Err(CowError::PathIsDirectory(_))
        ));
        assert!(matches!(
            s.read_file(a, "src"),
            Err(CowError::PathIsDirectory(_))
        ));
        assert!(matches!(
            s.write_file(a, "src/nat.fml/x", b"y"),
            Err(CowError::InvalidPath(_))
        ));
        assert!(matches!(
            s.write_file(a, "a//b", b"y"),
            Err(CowError::InvalidPath(_))
        ));
        assert_eq!(s.list_files(a, "src/").unwrap(), ["src/nat.fml"]);
    }

    #[test]
    fn reflinks_share_extents() {
        let s = CowStore::new(CowConfig {
            chunk_size: 1024,
            ..CowConfig::default()
        });
        let a = s.create_volume("a").unwrap();
        s.write_file(a, "blob", &[5u8; 4096]).unwrap();
        s.clone_file_repeated(a, "blob", a, "huge", 1000).unwrap();
        let u = s.usage(a).unwrap();
        assert_eq!(u.logical_bytes, 4096 * 1001);
        assert_eq!(u.referenced_bytes, 1024);
        assert_eq!(s.read_file(a, "huge").unwrap().len(), 4096 * 1000);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let s = CowStore::default();
        let a = s.create_volume("a").unwrap();
        s.write_file(a, "src/x.fml", b"def x := 1;").unwrap();
        let b = s.snapshot(a, "b").unwrap();
        s.write_file(b, "src/y.fml", b"def y := 2;").unwrap();
        s.save(dir.path()).unwrap();
        let t = CowStore::load(dir.path(), CowConfig::default()).unwrap();
        assert_eq!(t.tree_hash(b).unwrap(), s.tree_hash(b).unwrap());
        assert_eq!(t.store_usage(), s.store_usage());
        assert_eq!(t.read_file(b, "src/y.fml").unwrap(), b"def y := 2;");
        let c = t.snapshot(a, "c").unwrap();
        assert!(c.0 > b.0);
    }

    #[test]
    fn command_backend_reports_exit_status() {
        let ok = CommandBackend::new("true");
        assert!(ok.snapshot("a", "b").is_ok());
        assert!(ok.discard("a").is_ok());
        let bad = CommandBackend::new("false");
        assert!(matches!(bad.snapshot("a", "b"), Err(CowError::Backend(_))));
    }
}
