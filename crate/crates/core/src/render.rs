//! Static HTML for a library: one flat page per article, a contents page,
//! a global name index, and aggregated per-article dependency pages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use html_escape::{encode_double_quoted_attribute as attr, encode_text as text};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depgraph::DepGraph;
use crate::minilib::{Article, ArticlePath, ItemRef, Library, Span};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("malformed page name `{0}`")]
    MalformedName(String),
}

pub const CONTENTS_PAGE: &str = "index.html";
pub const NAMES_PAGE: &str = "names.html";
pub const DEPS_DIR: &str = "deps";

/// Flat page name: segments joined by `.`, plus `.html`.
pub fn html_name(path: &ArticlePath) -> String {
    format!("{}.html", path.dotted())
}

/// Inverse of [`html_name`].
pub fn source_path(name: &str) -> Result<ArticlePath, RenderError> {
    let stem = name
        .strip_suffix(".html")
        .ok_or_else(|| RenderError::MalformedName(name.to_string()))?;
    ArticlePath::parse_dotted(stem).map_err(|_| RenderError::MalformedName(name.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditTarget {
    pub span: Span,
    pub statement: Span,
    pub proof: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedArticle {
    pub html: String,
    /// Item name to fragment id.
    pub anchors: BTreeMap<String, String>,
    pub edit_targets: BTreeMap<String, EditTarget>,
}

fn page(title: &str, depth: usize, body: &str) -> String {
    let up = "../".repeat(depth);
    format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n</head>\n<body>\n\
         <nav><a href=\"{up}{CONTENTS_PAGE}\">Contents</a> <a href=\"{up}{NAMES_PAGE}\">Index</a></nav>\n{body}</body>\n</html>\n",
        text(title)
    )
}

/// Writes `article.source[span]`, turning each ref inside it into a link.
fn linked(
    out: &mut String,
    lib: &Library,
    article: &Article,
    span: Span,
    refs: &[&ItemRef],
    prefix: &str,
) {
    let mut pos = span.start;
    for r in refs.iter().filter(|r| span.contains(&r.span)) {
        out.push_str(&text(&article.source[pos..r.span.start]));
        let written = &article.source[r.span.start..r.span.end];
        match lib.resolve(article, r) {
            Ok(id) => {
                let _ = write!(
                    out,
                    "<a class=\"ref\" href=\"{}\">{}</a>",
                    attr(&format!("{prefix}{}#{}", html_name(&id.article), id.name)),
                    text(written)
                );
            }
            Err(_) => {
                let _ = write!(out, "<span class=\"unresolved\">{}</span>", text(written));
            }
        }
        pos = r.span.end;
    }
    out.push_str(&text(&article.source[pos..span.end]));
}

pub fn render_article(article: &Article, graph: &DepGraph, lib: &Library) -> RenderedArticle {
    let mut body = String::new();
    let name = article.path.dotted();
    let _ = writeln!(
        body,
        "<h1>{}</h1>\n<p><a href=\"{}\">Dependencies</a></p>",
        text(&name),
        attr(&format!("{DEPS_DIR}/{}", html_name(&article.path)))
    );
    let mut anchors = BTreeMap::new();
    let mut edit_targets = BTreeMap::new();
    body.push_str("<pre class=\"article\">");
    for (idx, piece) in article.pieces() {
        let Some(idx) = idx else {
            body.push_str(&text(piece));
            continue;
        };
        let item = &article.items[idx];
        anchors.insert(item.name.clone(), item.name.clone());
        edit_targets.insert(
            item.name.clone(),
            EditTarget {
                span: item.span,
                statement: item.statement_span,
                proof: item.proof_span,
            },
        );
        let refs = item.all_refs();
        let _ = write!(
            body,
            "<span class=\"item\" id=\"{}\" data-kind=\"{}\">",
            attr(&item.name),
            item.kind()
        );
        let cut = |b: &mut String, from: usize, to: usize| {
            linked(b, lib, article, Span::new(from, to), &refs, "")
        };
        cut(&mut body, item.span.start, item.statement_span.start);
        body.push_str("<span class=\"stmt\">");
        cut(
            &mut body,
            item.statement_span.start,
            item.statement_span.end,
        );
        body.push_str("</span>");
        if item.proof_span.is_empty() {
            cut(&mut body, item.statement_span.end, item.span.end);
        } else {
            cut(&mut body, item.statement_span.end, item.proof_span.start);
            body.push_str("<span class=\"proof\">");
            cut(&mut body, item.proof_span.start, item.proof_span.end);
            body.push_str("</span>");
            cut(&mut body, item.proof_span.end, item.span.end);
        }
        let _ = write!(
            body,
            "</span> <a class=\"edit-link\" href=\"#{n}\" data-item=\"{n}\" data-span=\"{}-{}\" data-stmt=\"{}-{}\" data-proof=\"{}-{}\">[edit]</a>",
            item.span.start,
            item.span.end,
            item.statement_span.start,
            item.statement_span.end,
            item.proof_span.start,
            item.proof_span.end,
            n = attr(&item.name),
        );
        let id = article.item_id(&item.name);
        if graph.contains(&id) {
            let users: Vec<String> = graph
                .dependents(&id)
                .into_iter()
                .map(|d| {
                    format!(
                        "<a href=\"{}\">{}</a>",
                        attr(&format!("{}#{}", html_name(&d.article), d.name)),
                        text(&d.to_string())
                    )
                })
                .collect();
            if !users.is_empty() {
                let _ = write!(
                    body,
                    " <span class=\"used-by\">used by {}</span>",
                    users.join(", ")
                );
            }
        }
    }
    body.push_str("</pre>\n");
    RenderedArticle {
        html: page(&name, 0, &body),
        anchors,
        edit_targets,
    }
}

/// Item-level links between one article and another, seen from the first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepGroup {
    /// Items of this article taking part.
    pub local_items: BTreeSet<String>,
    /// Items of the other article taking part.
    pub remote_items: BTreeSet<String>,
    /// Direct item edges between the two.
    pub edges: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepSummary {
    /// Articles this article's items depend on.
    pub dependencies: BTreeMap<ArticlePath, DepGroup>,
    /// Articles whose items depend on this article's items.
    pub dependents: BTreeMap<ArticlePath, DepGroup>,
    /// Edges within the article.
    pub internal_edges: usize,
}

/// Aggregates the direct item edges of `graph` per article pair.
pub fn dependency_summaries(lib: &Library, graph: &DepGraph) -> BTreeMap<ArticlePath, DepSummary> {
    let mut out: BTreeMap<ArticlePath, DepSummary> = lib
        .articles()
        .map(|a| (a.path.clone(), DepSummary::default()))
        .collect();
    for (from, to) in graph.edges() {
        if from.article == to.article {
            if let Some(s) = out.get_mut(&from.article) {
                s.internal_edges += 1;
            }
            continue;
        }
        if let Some(s) = out.get_mut(&from.article) {
            let g = s.dependencies.entry(to.article.clone()).or_default();
            g.local_items.insert(from.name.clone());
            g.remote_items.insert(to.name.clone());
            g.edges += 1;
        }
        if let Some(s) = out.get_mut(&to.article) {
            let g = s.dependents.entry(from.article.clone()).or_default();
            g.local_items.insert(to.name.clone());
            g.remote_items.insert(from.name.clone());
            g.edges += 1;
        }
    }
    out
}

fn dep_section(out: &mut String, title: &str, groups: &BTreeMap<ArticlePath, DepGroup>) {
    let _ = writeln!(out, "<h2>{title}</h2>\n<ul class=\"dep-groups\">");
    for (path, g) in groups {
        let page = html_name(path);
        let remote: Vec<String> = g
            .remote_items
            .iter()
            .map(|n| {
                format!(
                    "<a href=\"../{}\">{}</a>",
                    attr(&format!("{page}#{n}")),
                    text(n)
                )
            })
            .collect();
        let _ = writeln!(
            out,
            "<li><a href=\"../{}\">{}</a>: {} items here, {} there, {} edges ({})</li>",
            attr(&page),
            text(&path.dotted()),
            g.local_items.len(),
            g.remote_items.len(),
            g.edges,
            remote.join(", ")
        );
    }
    out.push_str("</ul>\n");
}

pub struct Indexes {
    pub contents: String,
    pub names: String,
    /// Keyed by the article's page name.
    pub deps: BTreeMap<String, String>,
}

pub fn build_indexes(lib: &Library, graph: &DepGraph) -> Indexes {
    let mut paths: Vec<&ArticlePath> = lib.articles().map(|a| &a.path).collect();
    paths.sort();
    let mut body = format!(
        "<h1>Contents</h1>\n<p>{} articles</p>\n<ul class=\"contents\">\n",
        paths.len()
    );
    for p in &paths {
        let _ = writeln!(
            body,
            "<li><a href=\"{}\">{}</a></li>",
            attr(&html_name(p)),
            text(&p.dotted())
        );
    }
    body.push_str("</ul>\n");
    let contents = page("Contents", 0, &body);

    let mut entries: Vec<(&str, &ArticlePath, String)> = lib
        .articles()
        .flat_map(|a| {
            a.items
                .iter()
                .map(move |i| (i.name.as_str(), &a.path, i.kind().to_string()))
        })
        .collect();
    entries.sort();
    let mut body = String::from("<h1>Index</h1>\n<ul class=\"names\">\n");
    for (name, path, kind) in entries {
        let _ = writeln!(
            body,
            "<li><a href=\"{}\">{}</a> <span class=\"kind\">{kind}</span> in {}</li>",
            attr(&format!("{}#{name}", html_name(path))),
            text(name),
            text(&path.dotted())
        );
    }
    body.push_str("</ul>\n");
    let names = page("Index", 0, &body);

    let deps = dependency_summaries(lib, graph)
        .into_iter()
        .map(|(path, s)| {
            let mut body = format!(
                "<h1>Dependencies of <a href=\"../{}\">{}</a></h1>\n<p>{} internal edges</p>\n",
                attr(&html_name(&path)),
                text(&path.dotted()),
                s.internal_edges
            );
            dep_section(&mut body, "Uses", &s.dependencies);
            dep_section(&mut body, "Used by", &s.dependents);
            (
                html_name(&path),
                page(&format!("Dependencies of {}", path.dotted()), 1, &body),
            )
        })
        .collect();
    Indexes {
        contents,
        names,
        deps,
    }
}

/// Every generated file, keyed by its path relative to the output root.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Site {
    pub files: BTreeMap<String, String>,
}

impl Site {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir.join(DEPS_DIR))?;
        for (rel, html) in &self.files {
            std::fs::write(dir.join(rel), html)?;
        }
        Ok(())
    }

    /// Hrefs that do not resolve to a generated file and an existing id,
    /// as `(page, href)`.
    pub fn dangling_links(&self) -> Vec<(String, String)> {
        let href = Regex::new(r#"href="([^"]*)""#).expect("valid regex");
        let id = Regex::new(r#"id="([^"]*)""#).expect("valid regex");
        let ids: BTreeMap<&str, BTreeSet<String>> = self
            .files
            .iter()
            .map(|(k, v)| {
                let set = id
                    .captures_iter(v)
                    .map(|c| html_escape::decode_html_entities(&c[1]).into_owned())
                    .collect();
                (k.as_str(), set)
            })
            .collect();
        let mut out = Vec::new();
        for (file, html) in &self.files {
            let base = file.rsplit_once('/').map_or("", |(d, _)| d);
            for c in href.captures_iter(html) {
                let raw = html_escape::decode_html_entities(&c[1]).into_owned();
                let (target, frag) = raw
                    .split_once('#')
                    .map_or((raw.as_str(), None), |(t, f)| (t, Some(f)));
                let resolved = if target.is_empty() {
                    Some(file.clone())
                } else {
                    resolve_relative(base, target)
                };
                let ok = resolved
                    .as_deref()
                    .and_then(|r| ids.get(r))
                    .is_some_and(|set| frag.is_none_or(|f| set.contains(f)));
                if !ok {
                    out.push((file.clone(), raw));
                }
            }
        }
        out
    }
}

fn resolve_relative(base: &str, target: &str) -> Option<String> {
    let mut parts: Vec<&str> = base.split('/').filter(|s| !s.is_empty()).collect();
    for seg in target.split('/') {
        match seg {
            ".." => {
                parts.pop()?;
            }
            "." | "" => {}
            s => parts.push(s),
        }
    }
    Some(parts.join("/"))
}

/// Renders every article and index. Articles render in parallel; output is
/// a pure function of the inputs.
pub fn build_site(lib: &Library, graph: &DepGraph) -> Site {
    let articles: Vec<&Article> = lib.articles().collect();
    let mut files: BTreeMap<String, String> = articles
        .par_iter()
        .map(|a| (html_name(&a.path), render_article(a, graph, lib).html))
        .collect();
    let idx = build_indexes(lib, graph);
    files.insert(CONTENTS_PAGE.to_string(), idx.contents);
    files.insert(NAMES_PAGE.to_string(), idx.names);
    for (name, html) in idx.deps {
        files.insert(format!("{DEPS_DIR}/{name}"), html);
    }
    Site { files }
}
