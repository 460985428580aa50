use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Article, ArticlePath, Item, ItemId, ItemKind, Library};

/// SHA-256 content hash.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let v = hex::decode(s).ok()?;
        Some(Self(v.try_into().ok()?))
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad fingerprint"))
    }
}

/// Length-prefixed, domain-separated hashing.
pub(crate) struct FpBuilder(Sha256);

impl FpBuilder {
    pub(crate) fn new(domain: &str) -> Self {
        let mut b = Self(Sha256::new());
        b.str(domain);
        b
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update((b.len() as u64).to_be_bytes());
        self.0.update(b);
        self
    }

    pub(crate) fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub(crate) fn fp(&mut self, f: &Fingerprint) -> &mut Self {
        self.0.update(f.0);
        self
    }

    pub(crate) fn finish(self) -> Fingerprint {
        Fingerprint(self.0.finalize().into())
    }
}

/// Per-article and per-item fingerprints of a library.
///
/// * `parse`: article path and source text.
/// * `text`: the item's own text plus its article's import list; an edit to
///   an item changes exactly that item's text fingerprint.
/// * `analyze`: the item's text, the resolution of its direct references and
///   the texts of every definition reachable through definition references.
/// * `verify`: the item's text and the texts of everything in its transitive
///   dependency closure.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LibraryFingerprints {
    pub parse: BTreeMap<ArticlePath, Fingerprint>,
    pub text: HashMap<ItemId, Fingerprint>,
    pub analyze: HashMap<ItemId, Fingerprint>,
    pub verify: HashMap<ItemId, Fingerprint>,
}

pub(crate) fn parse_fingerprint(path: &ArticlePath, source: &str) -> Fingerprint {
    let mut b = FpBuilder::new("parse");
    b.str(&path.dotted()).str(source);
    b.finish()
}

/// Fingerprint of one item's text and its article's import list.
pub fn text_fingerprint(article: &Article, item: &Item) -> Fingerprint {
    let mut b = FpBuilder::new("text");
    b.str(&article.path.dotted());
    for imp in &article.imports {
        b.str(&imp.dotted());
    }
    b.str(article.item_text(item));
    b.finish()
}

fn text_of(lib: &Library, id: &ItemId) -> Option<Fingerprint> {
    lib.item(id).map(|(a, i)| text_fingerprint(a, i))
}

/// Fingerprint guarding a cached analysis result for `id`.
pub fn analyze_fingerprint(lib: &Library, id: &ItemId) -> Option<Fingerprint> {
    let (article, item) = lib.item(id)?;
    let mut b = FpBuilder::new("analyze");
    b.fp(&text_fingerprint(article, item));
    for r in item.all_refs() {
        match lib.resolve(article, r) {
            Ok(t) => {
                let kind = lib.item(&t).map(|(_, i)| i.kind()).expect("resolved");
                b.str(&t.to_string()).str(&kind.to_string())
            }
            Err(_) => b.str("?").str(&r.to_string()),
        };
    }
    let defs = closure(
        lib,
        id,
        |t| matches!(lib.item(t), Some((_, i)) if i.kind() == ItemKind::Def),
    );
    for d in &defs {
        b.str(&d.to_string())
            .fp(&text_of(lib, d).expect("resolved"));
    }
    Some(b.finish())
}

/// Fingerprint guarding a cached verification result for `id`.
pub fn verify_fingerprint(lib: &Library, id: &ItemId) -> Option<Fingerprint> {
    let mut b = FpBuilder::new("verify");
    b.fp(&analyze_fingerprint(lib, id)?);
    for d in &closure(lib, id, |_| true) {
        b.str(&d.to_string())
            .fp(&text_of(lib, d).expect("resolved"));
    }
    Some(b.finish())
}

impl LibraryFingerprints {
    pub fn compute(lib: &Library) -> Self {
        let mut out = Self::default();
        for article in lib.articles() {
            out.parse.insert(
                article.path.clone(),
                parse_fingerprint(&article.path, &article.source),
            );
            for item in &article.items {
                let id = article.item_id(&item.name);
                out.text.insert(id.clone(), text_fingerprint(article, item));
                out.analyze
                    .insert(id.clone(), analyze_fingerprint(lib, &id).expect("present"));
                out.verify
                    .insert(id.clone(), verify_fingerprint(lib, &id).expect("present"));
            }
        }
        out
    }
}

/// Transitive dependencies of `start` through items accepted by `follow`.
fn closure(lib: &Library, start: &ItemId, follow: impl Fn(&ItemId) -> bool) -> BTreeSet<ItemId> {
    let mut seen = BTreeSet::new();
    let mut stack = lib.resolved_refs(start);
    while let Some(n) = stack.pop() {
        if !follow(&n) || seen.contains(&n) {
            continue;
        }
        stack.extend(lib.resolved_refs(&n));
        seen.insert(n);
    }
    seen
}
