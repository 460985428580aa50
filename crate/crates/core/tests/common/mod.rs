#![allow(dead_code)]

use std::sync::Arc;

use formwiki::corpus::fixture_sources;
use formwiki::minilib::Mode;
use formwiki::mirror::{LocalNetwork, Mirror, Peer, PeerConfig};
use formwiki::orchestrator::{JobInfo, JobKind, PushJob};
use formwiki::policy::{Principal, DEFAULT_POLICY};
use formwiki::vcstore::{objects_for_push, ObjectId, RefUpdate, DEFAULT_BRANCH};
use formwiki::wiki::{Wiki, WikiOptions, MAIN_REPO};

pub fn opts() -> WikiOptions {
    WikiOptions {
        workers: 2,
        ..Default::default()
    }
}

pub fn fixture_wiki() -> Wiki {
    Wiki::create(&fixture_sources(), DEFAULT_POLICY, &opts()).unwrap()
}

pub struct Node {
    pub id: String,
    pub wiki: Wiki,
    pub mirror: Arc<Mirror>,
}

impl Node {
    pub fn head(&self, repo: &str) -> Option<ObjectId> {
        self.wiki.vc().get_ref(repo, DEFAULT_BRANCH).unwrap()
    }
}

/// Fully meshed peers, each starting from the fixture library.
pub fn mesh(ids: &[&str]) -> (Vec<Node>, Arc<LocalNetwork>) {
    let net = Arc::new(LocalNetwork::new());
    let nodes: Vec<Node> = ids
        .iter()
        .map(|id| {
            let wiki = fixture_wiki();
            let peers = ids
                .iter()
                .filter(|p| *p != id)
                .map(|p| Peer {
                    id: p.to_string(),
                    endpoint: format!("local://{p}"),
                })
                .collect();
            let mirror = wiki
                .attach_mirror(PeerConfig::new(*id, peers), net.clone())
                .unwrap();
            net.join(id, mirror.clone(), wiki.orchestrator().clone());
            Node {
                id: id.to_string(),
                wiki,
                mirror,
            }
        })
        .collect();
    (nodes, net)
}

/// Retries every node's queue until all are empty; returns the rounds used.
pub fn quiesce(nodes: &[Node], max_rounds: usize) -> usize {
    for round in 0..max_rounds {
        if nodes.iter().all(|n| n.mirror.pending() == 0) {
            return round;
        }
        for n in nodes {
            n.mirror.retry_pending();
        }
    }
    max_rounds
}

/// Builds a linear history on top of the fixture's initial commit.
pub struct Client {
    wiki: Wiki,
    pub head: ObjectId,
    count: usize,
    nat: String,
}

impl Client {
    pub fn new() -> Self {
        let wiki = fixture_wiki();
        let head = wiki.vc().require_ref(MAIN_REPO, DEFAULT_BRANCH).unwrap();
        let nat = fixture_sources()
            .into_iter()
            .find(|(p, _)| p.dotted() == "nat")
            .unwrap()
            .1;
        Self {
            wiki,
            head,
            count: 0,
            nat,
        }
    }

    /// A child of `parent` that appends one definition to `nat`.
    pub fn commit_on(&mut self, parent: ObjectId) -> ObjectId {
        self.count += 1;
        self.nat
            .push_str(&format!("def v{} := {};\n", self.count, self.count));
        let vol = self.wiki.vc().repo_info(MAIN_REPO).unwrap().backend;
        self.wiki
            .cow()
            .write_file(vol, "src/nat.fml", self.nat.as_bytes())
            .unwrap();
        self.wiki
            .vc()
            .commit_tree(
                MAIN_REPO,
                Some(parent),
                vol,
                "client",
                &format!("step {}", self.count),
            )
            .unwrap()
    }

    /// A child of `parent` whose `nat` article is `source`.
    pub fn commit_with(&mut self, parent: ObjectId, source: &str) -> ObjectId {
        let vol = self.wiki.vc().repo_info(MAIN_REPO).unwrap().backend;
        self.wiki
            .cow()
            .write_file(vol, "src/nat.fml", source.as_bytes())
            .unwrap();
        self.wiki
            .vc()
            .commit_tree(MAIN_REPO, Some(parent), vol, "client", "custom")
            .unwrap()
    }

    pub fn next(&mut self) -> ObjectId {
        self.head = self.commit_on(self.head);
        self.head
    }

    pub fn objects(&self, new: &ObjectId) -> Vec<Vec<u8>> {
        objects_for_push(self.wiki.vc().objects(), new, None).unwrap()
    }
}

pub fn maintainer() -> Principal {
    Principal::new("mia", ["@maintainers"])
}

/// Pushes `new` to `repo` on `node` as a fast-forward of its current ref.
pub fn push(
    node: &Node,
    who: &Principal,
    repo: &str,
    new: ObjectId,
    objects: Vec<Vec<u8>>,
) -> JobInfo {
    let job = PushJob {
        update: RefUpdate {
            repo: repo.into(),
            branch: DEFAULT_BRANCH.into(),
            old: node.head(repo),
            new,
            pusher: who.user.clone(),
        },
        objects,
        via_mirror: false,
        trusted: false,
    };
    node.wiki
        .orchestrator()
        .execute(who, JobKind::Push(job), Mode::Full)
        .unwrap()
}
