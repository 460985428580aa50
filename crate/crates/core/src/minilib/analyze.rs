use std::collections::HashSet;

use thiserror::Error;

use super::{Article, ArticlePath, Item, ItemId, ItemKind, Library, ResolveError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyzeError {
    #[error("{item}: unresolved reference `{reference}`: {reason}")]
    UnresolvedRef {
        item: ItemId,
        reference: String,
        reason: String,
    },
    #[error("{item}: `{reference}` is a {found}, expected a {expected}")]
    IllegalRefKind {
        item: ItemId,
        reference: String,
        expected: ItemKind,
        found: ItemKind,
    },
    #[error("{item}: `{reference}` refers to article `{import}` which is not imported")]
    ImportMissing {
        item: ItemId,
        reference: String,
        import: ArticlePath,
    },
    #[error("{item}: definition cycle {}", fmt_cycle(.cycle))]
    DefCycle { item: ItemId, cycle: Vec<ItemId> },
    #[error("{article}: imported article `{import}` does not exist")]
    UnknownImport {
        article: ArticlePath,
        import: ArticlePath,
    },
}

fn fmt_cycle(cycle: &[ItemId]) -> String {
    cycle
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" -> ")
}

impl AnalyzeError {
    /// The offending item, if the error is item-level.
    pub fn item(&self) -> Option<&ItemId> {
        match self {
            AnalyzeError::UnresolvedRef { item, .. }
            | AnalyzeError::IllegalRefKind { item, .. }
            | AnalyzeError::ImportMissing { item, .. }
            | AnalyzeError::DefCycle { item, .. } => Some(item),
            AnalyzeError::UnknownImport { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemAnalysis {
    pub name: String,
    /// Resolved dependencies: statement references then citations, deduplicated.
    pub deps: Vec<ItemId>,
    pub errors: Vec<AnalyzeError>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalyzeReport {
    pub article: ArticlePath,
    pub items: Vec<ItemAnalysis>,
    pub article_errors: Vec<AnalyzeError>,
}

impl AnalyzeReport {
    pub fn is_ok(&self) -> bool {
        self.article_errors.is_empty() && self.items.iter().all(|i| i.errors.is_empty())
    }

    pub fn errors(&self) -> impl Iterator<Item = &AnalyzeError> {
        self.article_errors
            .iter()
            .chain(self.items.iter().flat_map(|i| i.errors.iter()))
    }
}

/// The analysed article shadows any copy of it in the library.
struct Scope<'a> {
    lib: &'a Library,
    article: &'a Article,
}

impl<'a> Scope<'a> {
    fn article(&self, path: &ArticlePath) -> Option<&'a Article> {
        if path == &self.article.path {
            Some(self.article)
        } else {
            self.lib.get(path)
        }
    }

    fn item(&self, id: &ItemId) -> Option<(&'a Article, &'a Item)> {
        let a = self.article(&id.article)?;
        Some((a, a.item(&id.name)?))
    }

    fn resolve(&self, from: &Article, r: &super::ItemRef) -> Result<ItemId, ResolveError> {
        match &r.article {
            None => {
                if from.item(&r.item).is_some() {
                    Ok(from.item_id(&r.item))
                } else {
                    Err(ResolveError::UnknownLocal(r.item.clone()))
                }
            }
            Some(p) => {
                if !from.imports.contains(p) {
                    return Err(ResolveError::ImportMissing(p.clone()));
                }
                let target = self
                    .article(p)
                    .ok_or_else(|| ResolveError::UnknownArticle(p.clone()))?;
                if target.item(&r.item).is_none() {
                    return Err(ResolveError::UnknownItem(p.clone(), r.item.clone()));
                }
                Ok(ItemId::new(p.clone(), r.item.clone()))
            }
        }
    }

    /// Defs referenced from a Def's body (resolvable ones only).
    fn def_refs(&self, id: &ItemId) -> Vec<ItemId> {
        let Some((article, item)) = self.item(id) else {
            return Vec::new();
        };
        if item.kind() != ItemKind::Def {
            return Vec::new();
        }
        item.expr_refs()
            .into_iter()
            .filter_map(|r| self.resolve(article, r).ok())
            .filter(|t| matches!(self.item(t), Some((_, i)) if i.kind() == ItemKind::Def))
            .collect()
    }

    /// A path `start -> ... -> start` through Def references, if one exists.
    fn find_def_cycle(&self, start: &ItemId) -> Option<Vec<ItemId>> {
        let mut visited = HashSet::new();
        let mut path = vec![start.clone()];
        self.cycle_dfs(start, start, &mut visited, &mut path)
    }

    fn cycle_dfs(
        &self,
        start: &ItemId,
        at: &ItemId,
        visited: &mut HashSet<ItemId>,
        path: &mut Vec<ItemId>,
    ) -> Option<Vec<ItemId>> {
        for next in self.def_refs(at) {
            if &next == start {
                let mut cycle = path.clone();
                cycle.push(next);
                return Some(cycle);
            }
            if visited.insert(next.clone()) {
                path.push(next.clone());
                if let Some(c) = self.cycle_dfs(start, &next, visited, path) {
                    return Some(c);
                }
                path.pop();
            }
        }
        None
    }
}

fn ref_error(item: &ItemId, reference: &super::ItemRef, err: ResolveError) -> AnalyzeError {
    match err {
        ResolveError::ImportMissing(import) => AnalyzeError::ImportMissing {
            item: item.clone(),
            reference: reference.to_string(),
            import,
        },
        other => AnalyzeError::UnresolvedRef {
            item: item.clone(),
            reference: reference.to_string(),
            reason: other.to_string(),
        },
    }
}

fn analyze_in_scope(scope: &Scope<'_>, item: &Item) -> ItemAnalysis {
    let article = scope.article;
    let id = article.item_id(&item.name);
    let mut deps: Vec<ItemId> = Vec::new();
    let mut errors = Vec::new();

    let mut check = |r: &super::ItemRef, expected: ItemKind| match scope.resolve(article, r) {
        Ok(target) => {
            let found = scope
                .item(&target)
                .map(|(_, i)| i.kind())
                .expect("resolved");
            if found != expected {
                errors.push(AnalyzeError::IllegalRefKind {
                    item: id.clone(),
                    reference: r.to_string(),
                    expected,
                    found,
                });
            }
            if !deps.contains(&target) {
                deps.push(target);
            }
        }
        Err(e) => errors.push(ref_error(&id, r, e)),
    };
    for r in item.expr_refs() {
        check(r, ItemKind::Def);
    }
    for r in item.citations() {
        check(r, ItemKind::Thm);
    }

    if item.kind() == ItemKind::Def {
        if let Some(cycle) = scope.find_def_cycle(&id) {
            errors.push(AnalyzeError::DefCycle {
                item: id.clone(),
                cycle,
            });
        }
    }
    ItemAnalysis {
        name: item.name.clone(),
        deps,
        errors,
    }
}

/// Analyses a single item of `article` against `env`.
pub fn analyze_item(article: &Article, item: &Item, env: &Library) -> ItemAnalysis {
    analyze_in_scope(&Scope { lib: env, article }, item)
}

/// Resolves every reference of `article` against `env` (plus the article
/// itself), checks reference kinds and rejects definition cycles.
pub fn analyze(article: &Article, env: &Library) -> AnalyzeReport {
    let scope = Scope { lib: env, article };
    let article_errors = article
        .imports
        .iter()
        .filter(|p| env.get(p).is_none())
        .map(|p| AnalyzeError::UnknownImport {
            article: article.path.clone(),
            import: p.clone(),
        })
        .collect();
    AnalyzeReport {
        article: article.path.clone(),
        items: article
            .items
            .iter()
            .map(|i| analyze_in_scope(&scope, i))
            .collect(),
        article_errors,
    }
}
