//! Peer mirroring: accepted updates to public repositories are fanned out
//! to every configured peer from the post-update hook. Peers apply a
//! delivery only as a fast-forward and never forward it further.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minilib::Mode;
use crate::orchestrator::{JobKind, JobState, Orchestrator, OrchestratorError, PushJob};
use crate::policy::{Principal, VerifyPolicy};
use crate::vcstore::{
    is_ancestor, objects_for_push, AppliedUpdate, ObjectId, ObjectSource, PostUpdateHook,
    PushRequest, RefUpdate, RepoBase, Staged, VcError, VcStore,
};

#[derive(Debug, Error)]
pub enum MirrorError {
    #[error("peer `{0}` is unreachable: {1}")]
    PeerUnreachable(String, String),
    #[error("`{0}` is not a configured peer")]
    UnknownPeer(String),
    #[error("invalid peer configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Vc(#[from] VcError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

pub type Result<T> = std::result::Result<T, MirrorError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Peer {
    pub id: String,
    pub endpoint: String,
}

fn default_patterns() -> Vec<String> {
    ["main", "devel", "release/.*", "hotfix/.*"]
        .map(String::from)
        .to_vec()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerConfig {
    /// This server's own peer id.
    pub self_id: String,
    #[serde(default)]
    pub peers: Vec<Peer>,
    /// Repository-name regexes, anchored at both ends.
    #[serde(default = "default_patterns")]
    pub mirror_patterns: Vec<String>,
    /// Flag outgoing deliveries as trusted when this server's policy
    /// verifies the repository at Full.
    #[serde(default)]
    pub send_trusted: bool,
    /// Skip re-verification of deliveries flagged trusted.
    #[serde(default)]
    pub accept_trusted: bool,
}

impl PeerConfig {
    pub fn new(self_id: impl Into<String>, peers: Vec<Peer>) -> Self {
        Self {
            self_id: self_id.into(),
            peers,
            mirror_patterns: default_patterns(),
            send_trusted: false,
            accept_trusted: false,
        }
    }

    fn compile(&self) -> Result<Vec<Regex>> {
        if self.peers.iter().any(|p| p.id == self.self_id) {
            return Err(MirrorError::Config(format!(
                "`{}` peers with itself",
                self.self_id
            )));
        }
        let mut ids: Vec<&str> = self.peers.iter().map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(MirrorError::Config("duplicate peer id".into()));
        }
        self.mirror_patterns
            .iter()
            .map(|p| {
                Regex::new(&format!("^(?:{p})$")).map_err(|e| MirrorError::Config(e.to_string()))
            })
            .collect()
    }
}

/// What travels between peers: the push wire format plus a small header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorDelivery {
    pub origin_peer: String,
    pub trusted: bool,
    /// Always 1: receivers do not relay.
    pub hops: u8,
    #[serde(flatten)]
    pub push: PushRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum DeliveryResult {
    Applied {
        current: ObjectId,
    },
    /// The receiver already has the commit, or is ahead of it.
    NoOp {
        current: ObjectId,
    },
    /// The receiver's ref is unrelated to the delivered commit; left as is.
    Diverged {
        current: ObjectId,
    },
    Rejected {
        reason: String,
    },
}

pub trait Transport: Send + Sync {
    /// `Err(PeerUnreachable)` means retry later; anything else is final.
    fn deliver(&self, peer: &Peer, delivery: &MirrorDelivery) -> Result<DeliveryResult>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub peer: String,
    pub repo: String,
    pub branch: String,
    pub ours: ObjectId,
    pub theirs: ObjectId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryLog {
    pub peer: String,
    pub repo: String,
    pub branch: String,
    pub new: ObjectId,
    /// `None` when the peer was unreachable.
    pub result: Option<DeliveryResult>,
}

#[derive(Debug, Clone)]
struct Pending {
    repo: String,
    branch: String,
    new: ObjectId,
    trusted: bool,
    attempts: u32,
    due: u64,
}

#[derive(Default)]
struct State {
    tick: u64,
    queues: BTreeMap<String, VecDeque<Pending>>,
    /// Last commit of ours each peer acknowledged, per (peer, repo, branch).
    acked: HashMap<(String, String, String), ObjectId>,
    divergences: Vec<Divergence>,
    log: Vec<DeliveryLog>,
}

const MAX_BACKOFF_EXP: u32 = 6;

pub struct Mirror {
    cfg: PeerConfig,
    patterns: Vec<Regex>,
    vc: Arc<VcStore>,
    transport: Arc<dyn Transport>,
    verify_policy: RwLock<VerifyPolicy>,
    state: Mutex<State>,
}

impl Mirror {
    pub fn new(
        cfg: PeerConfig,
        vc: Arc<VcStore>,
        transport: Arc<dyn Transport>,
        verify_policy: VerifyPolicy,
    ) -> Result<Self> {
        let patterns = cfg.compile()?;
        Ok(Self {
            cfg,
            patterns,
            vc,
            transport,
            verify_policy: RwLock::new(verify_policy),
            state: Mutex::new(State::default()),
        })
    }

    pub fn config(&self) -> &PeerConfig {
        &self.cfg
    }

    pub fn set_verify_policy(&self, vp: VerifyPolicy) {
        *self.verify_policy.write() = vp;
    }

    pub fn is_mirrored(&self, repo: &str) -> bool {
        self.patterns.iter().any(|p| p.is_match(repo))
    }

    /// Queues one delivery per peer for an accepted local update. Updates
    /// that arrived by mirroring are not relayed.
    pub fn on_post_update(&self, update: &AppliedUpdate) -> usize {
        if update.via_mirror || !self.is_mirrored(&update.repo) {
            return 0;
        }
        let trusted = self.cfg.send_trusted
            && self
                .verify_policy
                .read()
                .required_mode(&update.repo)
                .effective(Mode::Quick)
                == Mode::Full;
        let mut st = self.state.lock();
        let due = st.tick;
        let mut n = 0;
        for peer in &self.cfg.peers {
            let key = (peer.id.clone(), update.repo.clone(), update.branch.clone());
            if st.acked.get(&key) == Some(&update.new) {
                continue;
            }
            st.queues
                .entry(peer.id.clone())
                .or_default()
                .push_back(Pending {
                    repo: update.repo.clone(),
                    branch: update.branch.clone(),
                    new: update.new,
                    trusted,
                    attempts: 0,
                    due,
                });
            n += 1;
        }
        n
    }

    pub fn pending(&self) -> usize {
        self.state.lock().queues.values().map(VecDeque::len).sum()
    }

    pub fn divergences(&self) -> Vec<Divergence> {
        self.state.lock().divergences.clone()
    }

    pub fn log(&self) -> Vec<DeliveryLog> {
        self.state.lock().log.clone()
    }

    fn build_delivery(&self, peer: &str, p: &Pending) -> Result<MirrorDelivery> {
        let have = self
            .state
            .lock()
            .acked
            .get(&(peer.to_string(), p.repo.clone(), p.branch.clone()))
            .copied();
        let objects = objects_for_push(self.vc.objects(), &p.new, have.as_ref())?;
        let update = RefUpdate {
            repo: p.repo.clone(),
            branch: p.branch.clone(),
            old: have,
            new: p.new,
            pusher: self.cfg.self_id.clone(),
        };
        Ok(MirrorDelivery {
            origin_peer: self.cfg.self_id.clone(),
            trusted: p.trusted,
            hops: 1,
            push: PushRequest::new(&update, &objects),
        })
    }

    /// Advances the logical clock by one tick and attempts every due
    /// delivery, peer queues in order. Deliveries whose commit is no
    /// longer the local ref are dropped as superseded. Returns the number
    /// of deliveries completed.
    pub fn retry_pending(&self) -> usize {
        let tick = {
            let mut st = self.state.lock();
            st.tick += 1;
            st.tick
        };
        let mut done = 0;
        for peer in &self.cfg.peers {
            loop {
                let next = {
                    let mut st = self.state.lock();
                    let Some(q) = st.queues.get_mut(&peer.id) else {
                        break;
                    };
                    match q.front() {
                        Some(p) if p.due <= tick => q.pop_front().expect("front exists"),
                        _ => break,
                    }
                };
                let current = self.vc.get_ref(&next.repo, &next.branch).ok().flatten();
                if current != Some(next.new) {
                    continue;
                }
                let outcome = self
                    .build_delivery(&peer.id, &next)
                    .and_then(|d| self.transport.deliver(peer, &d));
                let mut st = self.state.lock();
                match outcome {
                    Err(MirrorError::PeerUnreachable(..)) => {
                        st.log.push(DeliveryLog {
                            peer: peer.id.clone(),
                            repo: next.repo.clone(),
                            branch: next.branch.clone(),
                            new: next.new,
                            result: None,
                        });
                        let mut p = next;
                        p.attempts += 1;
                        p.due = tick + (1u64 << p.attempts.min(MAX_BACKOFF_EXP));
                        st.queues
                            .get_mut(&peer.id)
                            .expect("queue exists")
                            .push_front(p);
                        break;
                    }
                    other => {
                        let result = other.unwrap_or_else(|e| DeliveryResult::Rejected {
                            reason: e.to_string(),
                        });
                        let key = (peer.id.clone(), next.repo.clone(), next.branch.clone());
                        match &result {
                            DeliveryResult::Applied { .. } | DeliveryResult::NoOp { .. } => {
                                st.acked.insert(key, next.new);
                            }
                            DeliveryResult::Diverged { current } => {
                                st.divergences.push(Divergence {
                                    peer: peer.id.clone(),
                                    repo: next.repo.clone(),
                                    branch: next.branch.clone(),
                                    ours: next.new,
                                    theirs: *current,
                                })
                            }
                            DeliveryResult::Rejected { .. } => {}
                        }
                        st.log.push(DeliveryLog {
                            peer: peer.id.clone(),
                            repo: next.repo,
                            branch: next.branch,
                            new: next.new,
                            result: Some(result),
                        });
                        done += 1;
                    }
                }
            }
        }
        done
    }

    /// Applies a delivery from a peer through the local verification
    /// queue. The commit must fast-forward the local ref.
    pub fn receive(&self, orch: &Orchestrator, d: &MirrorDelivery) -> Result<DeliveryResult> {
        if !self.cfg.peers.iter().any(|p| p.id == d.origin_peer) {
            return Err(MirrorError::UnknownPeer(d.origin_peer.clone()));
        }
        let repo = &d.push.repo;
        if !self.is_mirrored(repo) {
            return Ok(DeliveryResult::Rejected {
                reason: format!("`{repo}` is not mirrored here"),
            });
        }
        let who = Principal::admin(format!("mirror:{}", d.origin_peer));
        if self.vc.repo_info(repo).is_err() {
            match self
                .vc
                .create_repo(repo, &who, &orch.policy(), RepoBase::Empty)
            {
                Ok(_) | Err(VcError::AlreadyExists(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let objects = d.push.objects()?;
        let current = self.vc.get_ref(repo, &d.push.branch)?;
        let new = d.push.new;
        if let Some(cur) = current {
            let mut staged = Staged::new(self.vc.objects());
            for raw in &objects {
                staged.put_raw(raw.clone())?;
            }
            if cur == new || is_ancestor(&staged, &new, &cur)? {
                return Ok(DeliveryResult::NoOp { current: cur });
            }
            if !ObjectSource::contains(&staged, &new) || !is_ancestor(&staged, &cur, &new)? {
                self.state.lock().divergences.push(Divergence {
                    peer: d.origin_peer.clone(),
                    repo: repo.clone(),
                    branch: d.push.branch.clone(),
                    ours: cur,
                    theirs: new,
                });
                return Ok(DeliveryResult::Diverged { current: cur });
            }
        }
        let job = PushJob {
            update: RefUpdate {
                repo: repo.clone(),
                branch: d.push.branch.clone(),
                old: current,
                new,
                pusher: who.user.clone(),
            },
            objects,
            via_mirror: true,
            trusted: d.trusted && self.cfg.accept_trusted,
        };
        let info = orch.execute(&who, JobKind::Push(job), Mode::Quick)?;
        Ok(match info.state {
            JobState::Succeeded => DeliveryResult::Applied { current: new },
            JobState::Failed(diags) => {
                let now = self.vc.get_ref(repo, &d.push.branch)?;
                match now {
                    Some(c) if c == new => DeliveryResult::NoOp { current: c },
                    _ => DeliveryResult::Rejected {
                        reason: diags
                            .iter()
                            .map(|d| d.to_string())
                            .collect::<Vec<_>>()
                            .join("; "),
                    },
                }
            }
            other => DeliveryResult::Rejected {
                reason: format!("{other:?}"),
            },
        })
    }

    /// Runs `retry_pending` every `interval` until the handle is dropped.
    pub fn start(self: &Arc<Self>, interval: Duration) -> RetryTimer {
        let stop = Arc::new(AtomicBool::new(false));
        let (me, flag) = (self.clone(), stop.clone());
        let handle = std::thread::Builder::new()
            .name("mirror-retry".into())
            .spawn(move || {
                while !flag.load(Ordering::Relaxed) {
                    me.retry_pending();
                    std::thread::park_timeout(interval);
                }
            })
            .expect("spawn mirror timer");
        RetryTimer {
            stop,
            handle: Some(handle),
        }
    }
}

impl PostUpdateHook for Mirror {
    fn post_update(&self, update: &AppliedUpdate) {
        self.on_post_update(update);
    }
}

pub struct RetryTimer {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Drop for RetryTimer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            h.thread().unpark();
            let _ = h.join();
        }
    }
}

type NodeHandle = (Arc<Mirror>, Arc<Orchestrator>);

/// In-process transport for simulations: peers are looked up by id and
/// deliveries can be made to fail.
#[derive(Default)]
pub struct LocalNetwork {
    nodes: RwLock<HashMap<String, NodeHandle>>,
    down: RwLock<std::collections::HashSet<String>>,
    #[allow(clippy::type_complexity)]
    fault: RwLock<Option<Box<dyn Fn(&Peer, &MirrorDelivery) -> bool + Send + Sync>>>,
}

impl LocalNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn join(&self, id: &str, mirror: Arc<Mirror>, orch: Arc<Orchestrator>) {
        self.nodes.write().insert(id.to_string(), (mirror, orch));
    }

    pub fn set_down(&self, id: &str, down: bool) {
        let mut d = self.down.write();
        if down {
            d.insert(id.to_string());
        } else {
            d.remove(id);
        }
    }

    /// Installs a predicate; deliveries for which it returns true fail as
    /// unreachable.
    pub fn set_fault(&self, f: impl Fn(&Peer, &MirrorDelivery) -> bool + Send + Sync + 'static) {
        *self.fault.write() = Some(Box::new(f));
    }
}

impl Transport for LocalNetwork {
    fn deliver(&self, peer: &Peer, delivery: &MirrorDelivery) -> Result<DeliveryResult> {
        let unreachable =
            || MirrorError::PeerUnreachable(peer.id.clone(), "injected failure".into());
        if self.down.read().contains(&peer.id) {
            return Err(unreachable());
        }
        if self
            .fault
            .read()
            .as_ref()
            .is_some_and(|f| f(peer, delivery))
        {
            return Err(unreachable());
        }
        let (m, o) =
            self.nodes.read().get(&peer.id).cloned().ok_or_else(|| {
                MirrorError::PeerUnreachable(peer.id.clone(), "no such node".into())
            })?;
        m.receive(&o, delivery)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let p = |id: &str| Peer {
            id: id.into(),
            endpoint: format!("http://{id}"),
        };
        assert!(PeerConfig::new("a", vec![p("b"), p("c")]).compile().is_ok());
        assert!(PeerConfig::new("a", vec![p("a")]).compile().is_err());
        assert!(PeerConfig::new("a", vec![p("b"), p("b")])
            .compile()
            .is_err());
        let mut c = PeerConfig::new("a", vec![]);
        c.mirror_patterns = vec!["(".into()];
        assert!(c.compile().is_err());
    }

    #[test]
    fn default_patterns_cover_public_repos() {
        let vc = Arc::new(VcStore::new(Arc::new(crate::cowstore::CowStore::default())));
        let m = Mirror::new(
            PeerConfig::new("a", vec![]),
            vc,
            Arc::new(LocalNetwork::new()),
            VerifyPolicy::default(),
        )
        .unwrap();
        for r in ["main", "devel", "release/1.0", "hotfix/x"] {
            assert!(m.is_mirrored(r), "{r}");
        }
        for r in ["user/alice/x", "feature/x", "mainline", "xmain"] {
            assert!(!m.is_mirrored(r), "{r}");
        }
    }

    #[test]
    fn delivery_wire_roundtrip() {
        let update = RefUpdate {
            repo: "main".into(),
            branch: "master".into(),
            old: None,
            new: ObjectId([7; 32]),
            pusher: "a".into(),
        };
        let d = MirrorDelivery {
            origin_peer: "a".into(),
            trusted: true,
            hops: 1,
            push: PushRequest::new(&update, &[b"x".to_vec()]),
        };
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"origin_peer\":\"a\""));
        let back: MirrorDelivery = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.push.objects().unwrap(), vec![b"x".to_vec()]);
    }
}
