//! MiniLib: the bundled toy formal language and its staged batch verifier.
//!
//! An article is a sequence of `import` lines followed by items. Items are
//! either definitions (`def name := expr;`) or theorems asserting that two
//! integer expressions are equal (`thm name : lhs = rhs proof just;`).
//! Verification evaluates expressions in 64-bit signed arithmetic with
//! referenced definitions substituted transitively.
//!
//! The verifier runs in three stages, mirroring the exporter / analyzer /
//! verifier split of real proof assistants:
//!
//! * [`Stage::Parse`] runs [`parse_article`]
//! * [`Stage::Analyze`] runs [`analyze`] (name resolution, reference kinds, definition cycles)
//! * [`Stage::Verify`] runs [`verify_item`] (evaluation and citation checks)

mod analyze;
mod fingerprint;
mod parse;
mod stages;
mod verify;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analyze::{analyze, analyze_item, AnalyzeError, AnalyzeReport};
pub use fingerprint::{text_fingerprint, Fingerprint, LibraryFingerprints};
pub use parse::{parse_article, parse_item, ParseError};
pub use stages::{run_stages, Mode, Stage, StageCache, StageResult, StageStatus};
pub use verify::{
    check_item, eval_item, verify_item, AssumeVerified, Citations, Diagnostic, ItemStatus,
    VerifyError, VerifyOptions,
};

/// File extension of MiniLib sources.
pub const SOURCE_EXTENSION: &str = "fml";

/// Single-segment article names that would collide with generated site pages.
const RESERVED_ARTICLE_NAMES: &[&str] = &["index", "names"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("article path must have at least one segment")]
    Empty,
    #[error("invalid path segment {0:?}: expected [a-z][a-z0-9_]*")]
    InvalidSegment(String),
    #[error("article name {0:?} is reserved")]
    Reserved(String),
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Location of an article in a (possibly nested) library.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArticlePath(Vec<String>);

impl ArticlePath {
    pub fn new<I, S>(segments: I) -> Result<Self, PathError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        if segments.is_empty() {
            return Err(PathError::Empty);
        }
        if let Some(bad) = segments.iter().find(|s| !is_identifier(s)) {
            return Err(PathError::InvalidSegment(bad.clone()));
        }
        if segments.len() == 1 && RESERVED_ARTICLE_NAMES.contains(&segments[0].as_str()) {
            return Err(PathError::Reserved(segments[0].clone()));
        }
        Ok(Self(segments))
    }

    /// Parses `algebra.groups`.
    pub fn parse_dotted(s: &str) -> Result<Self, PathError> {
        Self::new(s.split('.'))
    }

    /// Parses a source file path relative to the source root, e.g.
    /// `algebra/groups.fml`.
    pub fn from_source_file(rel: &str) -> Result<Self, PathError> {
        let stem = rel
            .strip_suffix(&format!(".{SOURCE_EXTENSION}"))
            .ok_or_else(|| PathError::InvalidSegment(rel.to_string()))?;
        Self::new(stem.split('/'))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    /// The last segment.
    pub fn name(&self) -> &str {
        self.0.last().expect("non-empty")
    }

    pub fn dotted(&self) -> String {
        self.0.join(".")
    }

    /// `algebra/groups.fml`
    pub fn source_file(&self) -> String {
        format!("{}.{SOURCE_EXTENSION}", self.0.join("/"))
    }
}

impl fmt::Display for ArticlePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dotted())
    }
}

impl FromStr for ArticlePath {
    type Err = PathError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_dotted(s)
    }
}

impl Serialize for ArticlePath {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.dotted())
    }
}

impl<'de> Deserialize<'de> for ArticlePath {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse_dotted(&s).map_err(serde::de::Error::custom)
    }
}

/// Fully-qualified item identifier, printed as `path.to.article#item`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemId {
    pub article: ArticlePath,
    pub name: String,
}

impl ItemId {
    pub fn new(article: ArticlePath, name: impl Into<String>) -> Self {
        Self {
            article,
            name: name.into(),
        }
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.article, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ItemIdError {
    #[error("item id {0:?} must look like `path.to.article#item`")]
    Malformed(String),
    #[error(transparent)]
    Path(#[from] PathError),
}

impl FromStr for ItemId {
    type Err = ItemIdError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (path, name) = s
            .split_once('#')
            .ok_or_else(|| ItemIdError::Malformed(s.to_string()))?;
        if !is_identifier(name) {
            return Err(ItemIdError::Malformed(s.to_string()));
        }
        Ok(Self::new(ArticlePath::parse_dotted(path)?, name))
    }
}

impl Serialize for ItemId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ItemId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Half-open byte range into an article's source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn empty_at(pos: usize) -> Self {
        Self::new(pos, pos)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    /// Shifts the span left by `base`.
    pub fn relative_to(&self, base: usize) -> Span {
        Span::new(self.start - base, self.end - base)
    }
}

/// Reference to an item, as written in source.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ItemRef {
    /// `None` for a local reference.
    pub article: Option<ArticlePath>,
    pub item: String,
    pub span: Span,
}

impl fmt::Display for ItemRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.article {
            Some(a) => write!(f, "{a}.{}", self.item),
            None => f.write_str(&self.item),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Int(i64),
    Ref(ItemRef),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

impl Expr {
    /// All references in left-to-right source order.
    pub fn refs(&self) -> Vec<&ItemRef> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a ItemRef>) {
        match self {
            Expr::Int(_) => {}
            Expr::Ref(r) => out.push(r),
            Expr::Add(a, b) | Expr::Mul(a, b) => {
                a.collect_refs(out);
                b.collect_refs(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Justification {
    Eval,
    By(Vec<ItemRef>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Def,
    Thm,
}

impl fmt::Display for ItemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ItemKind::Def => "def",
            ItemKind::Thm => "thm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ItemBody {
    Def {
        value: Expr,
    },
    Thm {
        lhs: Expr,
        rhs: Expr,
        proof: Justification,
    },
}

/// A definition or theorem together with its location in the article text.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Item {
    pub name: String,
    pub body: ItemBody,
    /// From the leading keyword through the terminating `;`.
    pub span: Span,
    /// The defining expression (def) or `lhs = rhs` (thm).
    pub statement_span: Span,
    /// The justification after `proof`; empty for definitions.
    pub proof_span: Span,
}

impl Item {
    pub fn kind(&self) -> ItemKind {
        match self.body {
            ItemBody::Def { .. } => ItemKind::Def,
            ItemBody::Thm { .. } => ItemKind::Thm,
        }
    }

    /// References appearing in the statement (expressions).
    pub fn expr_refs(&self) -> Vec<&ItemRef> {
        match &self.body {
            ItemBody::Def { value } => value.refs(),
            ItemBody::Thm { lhs, rhs, .. } => {
                let mut v = lhs.refs();
                v.extend(rhs.refs());
                v
            }
        }
    }

    /// Theorems cited by a `by` justification.
    pub fn citations(&self) -> &[ItemRef] {
        match &self.body {
            ItemBody::Thm {
                proof: Justification::By(refs),
                ..
            } => refs,
            _ => &[],
        }
    }

    /// Every reference, statement first.
    pub fn all_refs(&self) -> Vec<&ItemRef> {
        let mut v = self.expr_refs();
        v.extend(self.citations());
        v
    }
}

/// A parsed MiniLib source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Article {
    pub path: ArticlePath,
    pub imports: Vec<ArticlePath>,
    pub items: Vec<Item>,
    pub source: String,
}

impl Article {
    pub fn item(&self, name: &str) -> Option<&Item> {
        self.items.iter().find(|i| i.name == name)
    }

    pub fn item_index(&self, name: &str) -> Option<usize> {
        self.items.iter().position(|i| i.name == name)
    }

    pub fn item_id(&self, name: &str) -> ItemId {
        ItemId::new(self.path.clone(), name)
    }

    pub fn item_text(&self, item: &Item) -> &str {
        &self.source[item.span.start..item.span.end]
    }

    pub fn statement_text(&self, item: &Item) -> &str {
        &self.source[item.statement_span.start..item.statement_span.end]
    }

    pub fn proof_text(&self, item: &Item) -> &str {
        &self.source[item.proof_span.start..item.proof_span.end]
    }

    /// Splits the source into alternating inter-item text and item text, in
    /// order. Concatenating the pieces gives back the source exactly.
    pub fn pieces(&self) -> Vec<(Option<usize>, &str)> {
        let mut out = Vec::with_capacity(self.items.len() * 2 + 1);
        let mut pos = 0;
        for (idx, item) in self.items.iter().enumerate() {
            out.push((None, &self.source[pos..item.span.start]));
            out.push((Some(idx), &self.source[item.span.start..item.span.end]));
            pos = item.span.end;
        }
        out.push((None, &self.source[pos..]));
        out
    }

    /// Returns the source with one item's text replaced.
    pub fn splice_item(&self, name: &str, new_text: &str) -> Option<String> {
        let item = self.item(name)?;
        let mut s = String::with_capacity(self.source.len() + new_text.len());
        s.push_str(&self.source[..item.span.start]);
        s.push_str(new_text);
        s.push_str(&self.source[item.span.end..]);
        Some(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("`{0}` is not declared in this article")]
    UnknownLocal(String),
    #[error("article `{0}` is not imported")]
    ImportMissing(ArticlePath),
    #[error("article `{0}` is not in the library")]
    UnknownArticle(ArticlePath),
    #[error("article `{0}` has no item `{1}`")]
    UnknownItem(ArticlePath, String),
}

/// A set of articles keyed by path; the environment for analysis and
/// verification.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Library {
    articles: BTreeMap<ArticlePath, Article>,
}

impl Library {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, article: Article) -> Option<Article> {
        self.articles.insert(article.path.clone(), article)
    }

    pub fn remove(&mut self, path: &ArticlePath) -> Option<Article> {
        self.articles.remove(path)
    }

    pub fn get(&self, path: &ArticlePath) -> Option<&Article> {
        self.articles.get(path)
    }

    pub fn articles(&self) -> impl Iterator<Item = &Article> {
        self.articles.values()
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn item(&self, id: &ItemId) -> Option<(&Article, &Item)> {
        let article = self.articles.get(&id.article)?;
        Some((article, article.item(&id.name)?))
    }

    /// All item ids, ordered by article path then source order.
    pub fn item_ids(&self) -> Vec<ItemId> {
        self.articles
            .values()
            .flat_map(|a| a.items.iter().map(|i| a.item_id(&i.name)))
            .collect()
    }

    pub fn item_count(&self) -> usize {
        self.articles.values().map(|a| a.items.len()).sum()
    }

    /// Resolves a reference written inside `from`. Qualified references must
    /// go through one of `from`'s imports.
    pub fn resolve(&self, from: &Article, r: &ItemRef) -> Result<ItemId, ResolveError> {
        match &r.article {
            None => {
                if from.item(&r.item).is_some() {
                    Ok(from.item_id(&r.item))
                } else {
                    Err(ResolveError::UnknownLocal(r.item.clone()))
                }
            }
            Some(path) => {
                if !from.imports.contains(path) {
                    return Err(ResolveError::ImportMissing(path.clone()));
                }
                let target = self
                    .articles
                    .get(path)
                    .ok_or_else(|| ResolveError::UnknownArticle(path.clone()))?;
                if target.item(&r.item).is_none() {
                    return Err(ResolveError::UnknownItem(path.clone(), r.item.clone()));
                }
                Ok(ItemId::new(path.clone(), r.item.clone()))
            }
        }
    }

    /// Resolved references of one item (statement refs then citations);
    /// unresolvable references are skipped.
    pub fn resolved_refs(&self, id: &ItemId) -> Vec<ItemId> {
        let Some((article, item)) = self.item(id) else {
            return Vec::new();
        };
        item.all_refs()
            .into_iter()
            .filter_map(|r| self.resolve(article, r).ok())
            .collect()
    }

    /// Articles reachable from `path` through imports, excluding `path`.
    pub fn transitive_imports(&self, path: &ArticlePath) -> Vec<ArticlePath> {
        let mut seen = std::collections::BTreeSet::new();
        let mut stack: Vec<ArticlePath> = self
            .get(path)
            .map(|a| a.imports.clone())
            .unwrap_or_default();
        while let Some(p) = stack.pop() {
            if &p == path || !seen.insert(p.clone()) {
                continue;
            }
            if let Some(a) = self.get(&p) {
                stack.extend(a.imports.iter().cloned());
            }
        }
        seen.into_iter().collect()
    }
}

impl FromIterator<Article> for Library {
    fn from_iter<T: IntoIterator<Item = Article>>(iter: T) -> Self {
        let mut lib = Library::new();
        for a in iter {
            lib.insert(a);
        }
        lib
    }
}
