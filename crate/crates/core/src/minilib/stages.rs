use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::analyze::{analyze, analyze_item};
use super::fingerprint::{analyze_fingerprint, parse_fingerprint, verify_fingerprint, FpBuilder};
use super::verify::{verify_item, Citations, Diagnostic, VerifyOptions};
use super::{parse_article, Article, ArticlePath, Fingerprint, ItemId, Library, ParseError};

/// How much of the pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Parse only.
    Quick,
    /// Parse and analyze.
    Medium,
    /// Parse, analyze and verify.
    Full,
}

impl Mode {
    pub fn stages(self) -> &'static [Stage] {
        match self {
            Mode::Quick => &[Stage::Parse],
            Mode::Medium => &[Stage::Parse, Stage::Analyze],
            Mode::Full => &[Stage::Parse, Stage::Analyze, Stage::Verify],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Quick => "quick",
            Mode::Medium => "medium",
            Mode::Full => "full",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "quick" => Ok(Mode::Quick),
            "medium" => Ok(Mode::Medium),
            "full" => Ok(Mode::Full),
            other => Err(format!(
                "unknown mode `{other}` (expected quick, medium or full)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Parse,
    Analyze,
    Verify,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Parse => "parse",
            Stage::Analyze => "analyze",
            Stage::Verify => "verify",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed(Vec<Diagnostic>),
}

impl StageStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, StageStatus::Ok)
    }

    fn from_diagnostics(d: Vec<Diagnostic>) -> Self {
        if d.is_empty() {
            StageStatus::Ok
        } else {
            StageStatus::Failed(d)
        }
    }
}

/// Outcome of one stage. For the item-level stages (analyze, verify) of
/// [`run_stages`] the fingerprint combines every item's fingerprint and
/// `cached` is true when no item had to be recomputed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub status: StageStatus,
    pub input_fingerprint: Fingerprint,
    pub cached: bool,
}

type ParseOutcome = Arc<Result<Article, ParseError>>;

/// Shared memo of stage results keyed by input fingerprint. A cached result
/// is only ever looked up under the fingerprint of the current inputs, so it
/// is valid by construction.
#[derive(Default)]
pub struct StageCache {
    parsed: Mutex<HashMap<Fingerprint, ParseOutcome>>,
    results: Mutex<HashMap<(Stage, Fingerprint), StageStatus>>,
    hits: Mutex<HashMap<Stage, usize>>,
    misses: Mutex<HashMap<Stage, usize>>,
}

impl StageCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of (hits, misses) recorded for a stage since creation.
    pub fn counters(&self, stage: Stage) -> (usize, usize) {
        (
            self.hits.lock().get(&stage).copied().unwrap_or(0),
            self.misses.lock().get(&stage).copied().unwrap_or(0),
        )
    }

    fn count(&self, stage: Stage, hit: bool) {
        let map = if hit { &self.hits } else { &self.misses };
        *map.lock().entry(stage).or_default() += 1;
    }

    fn parse(
        &self,
        fp: Fingerprint,
        f: impl FnOnce() -> Result<Article, ParseError>,
    ) -> (ParseOutcome, bool) {
        if let Some(hit) = self.parsed.lock().get(&fp).cloned() {
            self.count(Stage::Parse, true);
            return (hit, true);
        }
        let computed = Arc::new(f());
        self.count(Stage::Parse, false);
        let v = self.parsed.lock().entry(fp).or_insert(computed).clone();
        (v, false)
    }

    fn get_or_compute(
        &self,
        stage: Stage,
        fp: Fingerprint,
        f: impl FnOnce() -> StageStatus,
    ) -> (StageStatus, bool) {
        if let Some(hit) = self.results.lock().get(&(stage, fp)).cloned() {
            self.count(stage, true);
            return (hit, true);
        }
        // Computed outside the lock; results are deterministic so a racing
        // insert stores the same value.
        let computed = f();
        self.count(stage, false);
        let v = self
            .results
            .lock()
            .entry((stage, fp))
            .or_insert(computed)
            .clone();
        (v, false)
    }

    fn analyze_status(&self, lib: &Library, id: &ItemId) -> (StageStatus, bool) {
        let Some(fp) = analyze_fingerprint(lib, id) else {
            return (
                StageStatus::Failed(vec![Diagnostic::new(
                    Some(id.clone()),
                    Stage::Analyze,
                    "no such item",
                )]),
                false,
            );
        };
        self.get_or_compute(Stage::Analyze, fp, || {
            let (article, item) = lib.item(id).expect("fingerprinted");
            let a = analyze_item(article, item, lib);
            StageStatus::from_diagnostics(
                a.errors
                    .iter()
                    .map(|e| Diagnostic::new(Some(id.clone()), Stage::Analyze, e.to_string()))
                    .collect(),
            )
        })
    }

    fn verify_status(
        &self,
        lib: &Library,
        id: &ItemId,
        opts: &VerifyOptions,
        visiting: &RefCell<HashSet<ItemId>>,
    ) -> (StageStatus, bool) {
        let fp = verify_fingerprint(lib, id).expect("analyzed item exists");
        self.get_or_compute(Stage::Verify, fp, || {
            let cites = CachedCitations {
                cache: self,
                lib,
                opts,
                visiting,
            };
            visiting.borrow_mut().insert(id.clone());
            let r = verify_item(lib, id, &cites, opts);
            visiting.borrow_mut().remove(id);
            r.status
        })
    }

    /// Analysis then verification, both through the cache.
    fn fully_verified(
        &self,
        lib: &Library,
        id: &ItemId,
        opts: &VerifyOptions,
        visiting: &RefCell<HashSet<ItemId>>,
    ) -> bool {
        if visiting.borrow().contains(id) {
            return false;
        }
        self.analyze_status(lib, id).0.is_ok()
            && self.verify_status(lib, id, opts, visiting).0.is_ok()
    }
}

/// Cited theorems are verified on demand through the same cache.
struct CachedCitations<'a> {
    cache: &'a StageCache,
    lib: &'a Library,
    opts: &'a VerifyOptions,
    visiting: &'a RefCell<HashSet<ItemId>>,
}

impl Citations for CachedCitations<'_> {
    fn is_verified(&self, id: &ItemId) -> bool {
        self.cache
            .fully_verified(self.lib, id, self.opts, self.visiting)
    }
}

fn combine(fps: impl Iterator<Item = Fingerprint>, stage: Stage) -> Fingerprint {
    let mut b = FpBuilder::new(&stage.to_string());
    for f in fps {
        b.fp(&f);
    }
    b.finish()
}

/// Runs the stages selected by `mode` over one article source in the
/// environment `env`, reusing cached stage results whose input fingerprint
/// matches. Later stages are not attempted after a failing one.
pub fn run_stages(
    source: &str,
    path: ArticlePath,
    env: &Library,
    mode: Mode,
    cache: &StageCache,
    opts: &VerifyOptions,
) -> Vec<StageResult> {
    let mut results = Vec::new();

    let pfp = parse_fingerprint(&path, source);
    let (parsed, cached) = cache.parse(pfp, || parse_article(source, path.clone()));
    let article = match parsed.as_ref() {
        Ok(a) => a.clone(),
        Err(e) => {
            results.push(StageResult {
                stage: Stage::Parse,
                status: StageStatus::Failed(vec![Diagnostic::new(
                    None,
                    Stage::Parse,
                    e.to_string(),
                )]),
                input_fingerprint: pfp,
                cached,
            });
            return results;
        }
    };
    results.push(StageResult {
        stage: Stage::Parse,
        status: StageStatus::Ok,
        input_fingerprint: pfp,
        cached,
    });
    if mode == Mode::Quick {
        return results;
    }

    let ids: Vec<ItemId> = article
        .items
        .iter()
        .map(|i| article.item_id(&i.name))
        .collect();
    let mut lib = env.clone();
    lib.insert(article.clone());

    let mut diags: Vec<Diagnostic> = analyze(&article, &lib)
        .article_errors
        .iter()
        .map(|e| Diagnostic::new(None, Stage::Analyze, e.to_string()))
        .collect();
    let mut all_cached = true;
    for id in &ids {
        let (status, hit) = cache.analyze_status(&lib, id);
        all_cached &= hit;
        if let StageStatus::Failed(d) = status {
            diags.extend(d);
        }
    }
    let analyze_ok = diags.is_empty();
    results.push(StageResult {
        stage: Stage::Analyze,
        status: StageStatus::from_diagnostics(diags),
        input_fingerprint: combine(
            ids.iter().filter_map(|i| analyze_fingerprint(&lib, i)),
            Stage::Analyze,
        ),
        cached: all_cached,
    });
    if mode == Mode::Medium || !analyze_ok {
        return results;
    }

    let visiting = RefCell::new(HashSet::new());
    let mut diags = Vec::new();
    let mut all_cached = true;
    for id in &ids {
        let (status, hit) = cache.verify_status(&lib, id, opts, &visiting);
        all_cached &= hit;
        if let StageStatus::Failed(d) = status {
            diags.extend(d);
        }
    }
    results.push(StageResult {
        stage: Stage::Verify,
        status: StageStatus::from_diagnostics(diags),
        input_fingerprint: combine(
            ids.iter().filter_map(|i| verify_fingerprint(&lib, i)),
            Stage::Verify,
        ),
        cached: all_cached,
    });
    results
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    fn nat_env() -> (Library, Article) {
        let mut lib = corpus::fixture_library();
        let nat = lib
            .remove(&ArticlePath::parse_dotted("nat").unwrap())
            .unwrap();
        (lib, nat)
    }

    #[test]
    fn cold_cache_runs_every_stage() {
        let lib = corpus::fixture_library();
        let calc = lib.get(&"calc".parse().unwrap()).unwrap();
        let cache = StageCache::new();
        let r = run_stages(
            &calc.source,
            calc.path.clone(),
            &lib,
            Mode::Full,
            &cache,
            &Default::default(),
        );
        assert_eq!(
            r.iter().map(|s| s.stage).collect::<Vec<_>>(),
            Mode::Full.stages()
        );
        assert!(r.iter().all(|s| s.status.is_ok() && !s.cached), "{r:?}");
    }

    #[test]
    fn medium_then_full_reuses_parse_and_analysis() {
        let (env, nat) = nat_env();
        let cache = StageCache::new();
        let opts = VerifyOptions::default();
        let medium = run_stages(
            &nat.source,
            nat.path.clone(),
            &env,
            Mode::Medium,
            &cache,
            &opts,
        );
        assert_eq!(medium.len(), 2);
        let full = run_stages(
            &nat.source,
            nat.path.clone(),
            &env,
            Mode::Full,
            &cache,
            &opts,
        );
        assert!(full[0].cached && full[1].cached);
        assert!(!full[2].cached);
        assert_eq!(medium[1].input_fingerprint, full[1].input_fingerprint);
    }

    #[test]
    fn proof_byte_change_recomputes_only_changed_fingerprints() {
        let (env, nat) = nat_env();
        let cache = StageCache::new();
        let opts = VerifyOptions::default();
        run_stages(
            &nat.source,
            nat.path.clone(),
            &env,
            Mode::Full,
            &cache,
            &opts,
        );
        let before_analyze = cache.counters(Stage::Analyze).1;
        let before_verify = cache.counters(Stage::Verify).1;

        let edited = nat.source.replace("proof eval", "proof  eval");
        let r = run_stages(&edited, nat.path.clone(), &env, Mode::Full, &cache, &opts);
        assert!(!r[0].cached);
        assert!(r.iter().all(|s| s.status.is_ok()));
        // Only add_comm's inputs changed.
        assert_eq!(cache.counters(Stage::Analyze).1 - before_analyze, 1);
        assert_eq!(cache.counters(Stage::Verify).1 - before_verify, 1);
    }

    #[test]
    fn failure_stops_later_stages() {
        let cache = StageCache::new();
        let opts = VerifyOptions::default();
        let p = ArticlePath::parse_dotted("x").unwrap();
        let r = run_stages(
            "def a := ;",
            p.clone(),
            &Library::new(),
            Mode::Full,
            &cache,
            &opts,
        );
        assert_eq!(r.len(), 1);
        assert!(!r[0].status.is_ok());
        let r = run_stages(
            "def a := b;",
            p.clone(),
            &Library::new(),
            Mode::Full,
            &cache,
            &opts,
        );
        assert_eq!(r.len(), 2);
        assert!(!r[1].status.is_ok());
        let r = run_stages(
            "thm t : 1 = 2 proof eval;",
            p,
            &Library::new(),
            Mode::Full,
            &cache,
            &opts,
        );
        let StageStatus::Failed(d) = &r[2].status else {
            panic!()
        };
        assert!(d[0].message.contains("1 != 2"), "{d:?}");
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("FULL".parse::<Mode>(), Ok(Mode::Full));
        assert!("slow".parse::<Mode>().is_err());
        assert!(Mode::Quick < Mode::Medium && Mode::Medium < Mode::Full);
    }
}
