//! Reference fixture and random library generators, used by tests,
//! benchmarks and `init` demos.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::minilib::{eval_item, parse_article, Article, ArticlePath, ItemId, ItemKind, Library};

pub const FIXTURE_NAT: &str = "\
-- Small facts about the first few naturals.
def two := 2;
def three := 3;
thm add_comm : two + three = three + two proof eval;
";

pub const FIXTURE_CALC: &str = "\
import nat;

def six := nat.two * nat.three;
thm six_is_six : six = 6 proof eval;
thm use : six = nat.two * 3 proof by nat.add_comm;
";

/// The two-article reference corpus (`nat`, `calc`).
pub fn fixture_library() -> Library {
    fixture_sources()
        .into_iter()
        .map(|(p, s)| parse_article(&s, p).expect("fixture parses"))
        .collect()
}

pub fn fixture_sources() -> Vec<(ArticlePath, String)> {
    vec![
        (
            ArticlePath::parse_dotted("nat").unwrap(),
            FIXTURE_NAT.to_string(),
        ),
        (
            ArticlePath::parse_dotted("calc").unwrap(),
            FIXTURE_CALC.to_string(),
        ),
    ]
}

/// Shape of a generated library.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub articles: usize,
    pub min_items: usize,
    pub max_items: usize,
    /// Maximum number of earlier articles each article imports.
    pub max_imports: usize,
    /// Probability that a reference targets an imported article rather than
    /// a preceding local item.
    pub cross_ref_prob: f64,
    pub thm_prob: f64,
    /// Probability that a theorem is justified `by` citations.
    pub by_prob: f64,
    /// Place articles under two-level paths (`part0.a3`).
    pub nested: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            articles: 6,
            min_items: 3,
            max_items: 8,
            max_imports: 2,
            cross_ref_prob: 0.3,
            thm_prob: 0.4,
            by_prob: 0.4,
            nested: true,
        }
    }
}

impl GenConfig {
    /// 100 articles x 20 items, 10% cross-article references.
    pub fn layered() -> Self {
        Self {
            articles: 100,
            min_items: 20,
            max_items: 20,
            max_imports: 3,
            cross_ref_prob: 0.1,
            thm_prob: 0.4,
            by_prob: 0.4,
            nested: true,
        }
    }
}

const VALUE_LIMIT: i128 = 1_000_000_000;

#[derive(Clone)]
struct Candidate {
    /// Reference text as written from the current article.
    text: String,
    id: ItemId,
}

struct Generator<'a, R: Rng> {
    rng: &'a mut R,
    values: HashMap<ItemId, i128>,
}

impl<R: Rng> Generator<'_, R> {
    fn leaf(&mut self, defs: &[Candidate]) -> (String, i128) {
        if !defs.is_empty() && self.rng.gen_bool(0.5) {
            let c = defs.choose(self.rng).expect("non-empty");
            let v = self.values[&c.id];
            if v.abs() <= 1_000_000 {
                return (c.text.clone(), v);
            }
        }
        let n: i64 = self.rng.gen_range(-5..=12);
        (n.to_string(), n as i128)
    }

    fn expr(&mut self, defs: &[Candidate], depth: u32) -> (String, i128) {
        if depth == 0 || self.rng.gen_bool(0.4) {
            return self.leaf(defs);
        }
        let (a, x) = self.expr(defs, depth - 1);
        let (b, y) = self.expr(defs, depth - 1);
        let (text, v) = if self.rng.gen_bool(0.5) && (x * y).abs() <= VALUE_LIMIT {
            (format!("({a} * {b})"), x * y)
        } else {
            (format!("({a} + {b})"), x + y)
        };
        if v.abs() > VALUE_LIMIT {
            self.leaf(&[])
        } else {
            (text, v)
        }
    }
}

fn pick_refs<R: Rng>(
    rng: &mut R,
    local: &[Candidate],
    imported: &[Candidate],
    cross_prob: f64,
    max: usize,
) -> Vec<Candidate> {
    let n = rng.gen_range(1..=max);
    let mut out: Vec<Candidate> = Vec::new();
    for _ in 0..n {
        let pool = if !imported.is_empty() && (local.is_empty() || rng.gen_bool(cross_prob)) {
            imported
        } else {
            local
        };
        if let Some(c) = pool.choose(rng) {
            if !out.iter().any(|o| o.id == c.id) {
                out.push(c.clone());
            }
        }
    }
    out
}

fn article_path(cfg: &GenConfig, k: usize) -> ArticlePath {
    if cfg.nested {
        ArticlePath::new([format!("part{}", k / 10), format!("a{k}")]).expect("valid")
    } else {
        ArticlePath::new([format!("a{k}")]).expect("valid")
    }
}

/// Generates a library in which every item verifies. References only point
/// backwards (to preceding local items or imported articles), so the
/// library is acyclic.
pub fn random_library<R: Rng>(rng: &mut R, cfg: &GenConfig) -> Library {
    random_sources(rng, cfg)
        .into_iter()
        .map(|(p, s)| parse_article(&s, p).expect("generated source parses"))
        .collect()
}

pub fn random_sources<R: Rng>(rng: &mut R, cfg: &GenConfig) -> Vec<(ArticlePath, String)> {
    let mut g = Generator {
        rng,
        values: HashMap::new(),
    };
    // (path, defs, thms) of already generated articles.
    let mut done: Vec<(ArticlePath, Vec<String>, Vec<String>)> = Vec::new();
    let mut out = Vec::new();
    for k in 0..cfg.articles {
        let path = article_path(cfg, k);
        let n_imports = g.rng.gen_range(0..=cfg.max_imports.min(done.len()));
        let mut imports: Vec<usize> = (0..done.len()).collect();
        imports.shuffle(g.rng);
        imports.truncate(n_imports);
        imports.sort_unstable();

        let mut imp_defs = Vec::new();
        let mut imp_thms = Vec::new();
        for &i in &imports {
            let (p, defs, thms) = &done[i];
            for d in defs {
                imp_defs.push(Candidate {
                    text: format!("{p}.{d}"),
                    id: ItemId::new(p.clone(), d.clone()),
                });
            }
            for t in thms {
                imp_thms.push(Candidate {
                    text: format!("{p}.{t}"),
                    id: ItemId::new(p.clone(), t.clone()),
                });
            }
        }

        let mut src = String::new();
        for &i in &imports {
            src.push_str(&format!("import {};\n", done[i].0));
        }
        src.push('\n');
        let mut local_defs: Vec<Candidate> = Vec::new();
        let mut local_thms: Vec<Candidate> = Vec::new();
        let n_items = g.rng.gen_range(cfg.min_items..=cfg.max_items);
        for j in 0..n_items {
            let is_thm = g.rng.gen_bool(cfg.thm_prob);
            let name = if is_thm {
                format!("t{j}")
            } else {
                format!("d{j}")
            };
            let id = ItemId::new(path.clone(), name.clone());
            let refs = pick_refs(g.rng, &local_defs, &imp_defs, cfg.cross_ref_prob, 3);
            let (e, v) = g.expr(&refs, 2);
            if is_thm {
                let proof = if g.rng.gen_bool(cfg.by_prob) {
                    let cites = pick_refs(g.rng, &local_thms, &imp_thms, cfg.cross_ref_prob, 2);
                    if cites.is_empty() {
                        "eval".to_string()
                    } else {
                        format!(
                            "by {}",
                            cites
                                .iter()
                                .map(|c| c.text.as_str())
                                .collect::<Vec<_>>()
                                .join(", ")
                        )
                    }
                } else {
                    "eval".to_string()
                };
                src.push_str(&format!("thm {name} : {e} = {v} proof {proof};\n"));
                local_thms.push(Candidate { text: name, id });
            } else {
                src.push_str(&format!("def {name} := {e};\n"));
                g.values.insert(id.clone(), v);
                local_defs.push(Candidate { text: name, id });
            }
        }
        done.push((
            path.clone(),
            local_defs.iter().map(|c| c.text.clone()).collect(),
            local_thms.iter().map(|c| c.text.clone()).collect(),
        ));
        out.push((path, src));
    }
    out
}

/// Produces replacement text for one item (same name and kind), drawing
/// references from what the item may legally see. Theorems are made false
/// about a third of the time.
pub fn random_item_edit<R: Rng>(rng: &mut R, lib: &Library, id: &ItemId) -> String {
    let (article, item) = lib.item(id).expect("item exists");
    let pos = article.item_index(&item.name).expect("present");
    let mut defs = Vec::new();
    let mut thms = Vec::new();
    for prev in &article.items[..pos] {
        let c = Candidate {
            text: prev.name.clone(),
            id: article.item_id(&prev.name),
        };
        match prev.kind() {
            ItemKind::Def => defs.push(c),
            ItemKind::Thm => thms.push(c),
        }
    }
    let mut imp_defs = Vec::new();
    let mut imp_thms = Vec::new();
    for p in &article.imports {
        if let Some(a) = lib.get(p) {
            for it in &a.items {
                let c = Candidate {
                    text: format!("{p}.{}", it.name),
                    id: a.item_id(&it.name),
                };
                match it.kind() {
                    ItemKind::Def => imp_defs.push(c),
                    ItemKind::Thm => imp_thms.push(c),
                }
            }
        }
    }
    let mut g = Generator {
        rng,
        values: HashMap::new(),
    };
    for c in defs.iter().chain(&imp_defs) {
        // Values only steer magnitude; failing evaluations are skipped.
        if let Ok(v) = eval_item(lib, &c.id) {
            g.values.insert(c.id.clone(), v as i128);
        }
    }
    defs.retain(|c| g.values.contains_key(&c.id));
    imp_defs.retain(|c| g.values.contains_key(&c.id));
    let refs = pick_refs(g.rng, &defs, &imp_defs, 0.3, 3);
    let (e, v) = g.expr(&refs, 2);
    match item.kind() {
        ItemKind::Def => format!("def {} := {e};", item.name),
        ItemKind::Thm => {
            let rhs = if g.rng.gen_bool(0.33) { v + 1 } else { v };
            let proof = if g.rng.gen_bool(0.5) {
                let cites = pick_refs(g.rng, &thms, &imp_thms, 0.3, 2);
                if cites.is_empty() {
                    "eval".to_string()
                } else {
                    format!(
                        "by {}",
                        cites
                            .iter()
                            .map(|c| c.text.as_str())
                            .collect::<Vec<_>>()
                            .join(", ")
                    )
                }
            } else {
                "eval".to_string()
            };
            format!("thm {} : {e} = {rhs} proof {proof};", item.name)
        }
    }
}

/// Replaces one item's text and reparses the article.
pub fn apply_item_edit(lib: &Library, id: &ItemId, new_text: &str) -> Library {
    let article: &Article = lib.get(&id.article).expect("article exists");
    let src = article
        .splice_item(&id.name, new_text)
        .expect("item exists");
    let mut out = lib.clone();
    out.insert(parse_article(&src, article.path.clone()).expect("edited source parses"));
    out
}
