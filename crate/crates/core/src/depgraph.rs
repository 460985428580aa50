//! Item- and file-level dependency graphs, closures, statistics,
//! recompilation plans and environment minimization.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minilib::{
    check_item, Article, AssumeVerified, Diagnostic, ItemId, ItemStatus, Library, Mode,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DepGraphError {
    #[error("dependency cycle: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join(" -> "))]
    CycleDetected(Vec<ItemId>),
    #[error("unknown item {0}")]
    UnknownItem(ItemId),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{item} does not verify even with its full environment: {}", .diagnostic.message)]
    NotVerifiable {
        item: ItemId,
        diagnostic: Box<Diagnostic>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Item,
    File,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Item => "item",
            Granularity::File => "file",
        })
    }
}

impl FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "item" => Ok(Granularity::Item),
            "file" => Ok(Granularity::File),
            other => Err(format!(
                "unknown granularity `{other}` (expected item or file)"
            )),
        }
    }
}

/// A directed acyclic graph over item ids. Edges point from a dependent to
/// its dependee.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepGraph {
    granularity: Granularity,
    nodes: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
    /// Sorted, deduplicated dependees per node.
    succ: Vec<Vec<usize>>,
    /// Nodes ordered so that every dependee precedes its dependents.
    topo: Vec<usize>,
}

impl DepGraph {
    /// Builds a graph, rejecting cycles. Edge endpoints missing from `nodes`
    /// are added.
    pub fn from_edges(
        granularity: Granularity,
        nodes: impl IntoIterator<Item = ItemId>,
        edges: impl IntoIterator<Item = (ItemId, ItemId)>,
    ) -> Result<Self, DepGraphError> {
        let mut g = DepGraph {
            granularity,
            nodes: Vec::new(),
            index: HashMap::new(),
            succ: Vec::new(),
            topo: Vec::new(),
        };
        for n in nodes {
            g.intern(n);
        }
        for (a, b) in edges {
            let (i, j) = (g.intern(a), g.intern(b));
            g.succ[i].push(j);
        }
        for s in &mut g.succ {
            s.sort_unstable();
            s.dedup();
        }
        g.topo = g.toposort()?;
        Ok(g)
    }

    fn intern(&mut self, id: ItemId) -> usize {
        if let Some(&i) = self.index.get(&id) {
            return i;
        }
        let i = self.nodes.len();
        self.index.insert(id.clone(), i);
        self.nodes.push(id);
        self.succ.push(Vec::new());
        i
    }

    fn toposort(&self) -> Result<Vec<usize>, DepGraphError> {
        let n = self.nodes.len();
        let mut remaining: Vec<usize> = self.succ.iter().map(Vec::len).collect();
        let preds = self.preds();
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| remaining[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &p in &preds[i] {
                remaining[p] -= 1;
                if remaining[p] == 0 {
                    queue.push_back(p);
                }
            }
        }
        if order.len() == n {
            return Ok(order);
        }
        // Every leftover node has a leftover dependee; walk until a repeat.
        let start = (0..n).find(|&i| remaining[i] > 0).expect("leftover");
        let mut pos: HashMap<usize, usize> = HashMap::new();
        let mut path: Vec<usize> = Vec::new();
        let mut at = start;
        loop {
            if let Some(&k) = pos.get(&at) {
                let mut cycle: Vec<ItemId> =
                    path[k..].iter().map(|&i| self.nodes[i].clone()).collect();
                cycle.push(self.nodes[at].clone());
                return Err(DepGraphError::CycleDetected(cycle));
            }
            pos.insert(at, path.len());
            path.push(at);
            at = *self.succ[at]
                .iter()
                .find(|&&j| remaining[j] > 0)
                .expect("leftover node has a leftover dependee");
        }
    }

    fn preds(&self) -> Vec<Vec<usize>> {
        let mut preds = vec![Vec::new(); self.nodes.len()];
        for (i, s) in self.succ.iter().enumerate() {
            for &j in s {
                preds[j].push(i);
            }
        }
        preds
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn nodes(&self) -> &[ItemId] {
        &self.nodes
    }

    pub fn contains(&self, id: &ItemId) -> bool {
        self.index.contains_key(id)
    }

    pub fn edge_count(&self) -> usize {
        self.succ.iter().map(Vec::len).sum()
    }

    /// All edges as (dependent, dependee), sorted.
    pub fn edges(&self) -> Vec<(ItemId, ItemId)> {
        let mut out: Vec<(ItemId, ItemId)> = self
            .succ
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&j| (i, j)))
            .map(|(i, j)| (self.nodes[i].clone(), self.nodes[j].clone()))
            .collect();
        out.sort();
        out
    }

    pub fn dependees(&self, id: &ItemId) -> Vec<&ItemId> {
        self.index
            .get(id)
            .map(|&i| self.succ[i].iter().map(|&j| &self.nodes[j]).collect())
            .unwrap_or_default()
    }

    pub fn dependents(&self, id: &ItemId) -> Vec<&ItemId> {
        let Some(&j) = self.index.get(id) else {
            return Vec::new();
        };
        let mut out: Vec<&ItemId> = (0..self.nodes.len())
            .filter(|&i| self.succ[i].binary_search(&j).is_ok())
            .map(|i| &self.nodes[i])
            .collect();
        out.sort();
        out
    }

    /// Node ids with dependees before dependents.
    pub fn topological_order(&self) -> Vec<&ItemId> {
        self.topo.iter().map(|&i| &self.nodes[i]).collect()
    }

    /// Row `i` holds everything node `i` transitively depends on.
    fn reach(&self) -> Vec<FixedBitSet> {
        let n = self.nodes.len();
        let mut reach = vec![FixedBitSet::with_capacity(n); n];
        for &i in &self.topo {
            let mut row = FixedBitSet::with_capacity(n);
            for &j in &self.succ[i] {
                row.insert(j);
                row.union_with(&reach[j]);
            }
            reach[i] = row;
        }
        reach
    }

    /// The irreflexive transitive closure.
    pub fn transitive_closure(&self) -> DepGraph {
        let reach = self.reach();
        let succ: Vec<Vec<usize>> = reach.iter().map(|r| r.ones().collect()).collect();
        DepGraph {
            granularity: self.granularity,
            nodes: self.nodes.clone(),
            index: self.index.clone(),
            succ,
            topo: self.topo.clone(),
        }
    }

    /// `seeds` together with everything that transitively depends on them.
    /// Ids not in the graph are ignored.
    pub fn dependents_closure<'a>(
        &self,
        seeds: impl IntoIterator<Item = &'a ItemId>,
    ) -> BTreeSet<ItemId> {
        let preds = self.preds();
        let mut seen = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = seeds
            .into_iter()
            .filter_map(|s| self.index.get(s).copied())
            .collect();
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            stack.extend(preds[i].iter().copied());
        }
        (0..self.nodes.len())
            .filter(|&i| seen[i])
            .map(|i| self.nodes[i].clone())
            .collect()
    }

    /// Batches of `items` (ids outside the graph are ignored) such that each
    /// item's dependees within `items` lie in strictly earlier batches and
    /// every item sits in the earliest batch allowed.
    pub fn schedule(&self, items: &BTreeSet<ItemId>) -> Vec<Vec<ItemId>> {
        let mut member = vec![false; self.nodes.len()];
        for i in items.iter().filter_map(|i| self.index.get(i)) {
            member[*i] = true;
        }
        // floor[i]: first batch a dependent of i may occupy. Non-members pass
        // their floor through, since they can connect members transitively.
        let mut floor = vec![0usize; self.nodes.len()];
        let mut batches: Vec<Vec<ItemId>> = Vec::new();
        for &i in &self.topo {
            let l = self.succ[i].iter().map(|&j| floor[j]).max().unwrap_or(0);
            if !member[i] {
                floor[i] = l;
                continue;
            }
            floor[i] = l + 1;
            if batches.len() <= l {
                batches.resize_with(l + 1, Vec::new);
            }
            batches[l].push(self.nodes[i].clone());
        }
        for b in &mut batches {
            b.sort();
        }
        batches
    }

    /// One `dependent<TAB>dependee` line per edge; nodes without edges are
    /// written as a bare id so the node set survives a round trip.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut touched = vec![false; self.nodes.len()];
        for (i, s) in self.succ.iter().enumerate() {
            for &j in s {
                touched[i] = true;
                touched[j] = true;
            }
        }
        let mut isolated: Vec<&ItemId> = (0..self.nodes.len())
            .filter(|&i| !touched[i])
            .map(|i| &self.nodes[i])
            .collect();
        isolated.sort();
        for id in isolated {
            out.push_str(&format!("{id}\n"));
        }
        for (a, b) in self.edges() {
            out.push_str(&format!("{a}\t{b}\n"));
        }
        out
    }

    pub fn from_text(granularity: Granularity, text: &str) -> Result<DepGraph, DepGraphError> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let parse = |line: usize, s: &str| {
            s.trim()
                .parse::<ItemId>()
                .map_err(|e| DepGraphError::Syntax {
                    line,
                    message: e.to_string(),
                })
        };
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match line.split_once('\t') {
                Some((a, b)) => edges.push((parse(k + 1, a)?, parse(k + 1, b)?)),
                None => nodes.push(parse(k + 1, line)?),
            }
        }
        DepGraph::from_edges(granularity, nodes, edges)
    }
}

/// Edge `i -> j` iff item `i` references `j` in its statement or proof.
/// Unresolvable references contribute no edge.
pub fn extract_item_graph(lib: &Library) -> Result<DepGraph, DepGraphError> {
    let nodes = lib.item_ids();
    let edges: Vec<(ItemId, ItemId)> = nodes
        .iter()
        .flat_map(|id| {
            lib.resolved_refs(id)
                .into_iter()
                .map(move |t| (id.clone(), t))
        })
        .collect();
    DepGraph::from_edges(Granularity::Item, nodes, edges)
}

/// Edge `i -> j` iff `i`'s article directly imports `j`'s article, or both
/// share an article and `j` precedes `i`.
pub fn extract_file_graph(lib: &Library) -> Result<DepGraph, DepGraphError> {
    let mut edges = Vec::new();
    for article in lib.articles() {
        let imported: Vec<ItemId> = article
            .imports
            .iter()
            .filter_map(|p| lib.get(p))
            .flat_map(|a| a.items.iter().map(|i| a.item_id(&i.name)))
            .collect();
        for (k, item) in article.items.iter().enumerate() {
            let id = article.item_id(&item.name);
            for dep in imported
                .iter()
                .cloned()
                .chain(article.items[..k].iter().map(|p| article.item_id(&p.name)))
            {
                edges.push((id.clone(), dep));
            }
        }
    }
    DepGraph::from_edges(Granularity::File, lib.item_ids(), edges)
}

pub fn extract_graph(lib: &Library, granularity: Granularity) -> Result<DepGraph, DepGraphError> {
    match granularity {
        Granularity::Item => extract_item_graph(lib),
        Granularity::File => extract_file_graph(lib),
    }
}

/// Dependency statistics of one graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub items: usize,
    pub deps: usize,
    pub tdeps: usize,
    /// Percentage of item pairs related by a transitive dependency.
    pub p: f64,
    /// Average number of items recompiled when one item changes.
    pub arl: f64,
    /// Median of the same per-item counts.
    pub mrl: f64,
}

/// `100 * tdeps / C(n, 2)`; zero below two items.
pub fn pair_percentage(items: usize, tdeps: usize) -> f64 {
    if items < 2 {
        return 0.0;
    }
    let pairs = items as f64 * (items as f64 - 1.0) / 2.0;
    100.0 * tdeps as f64 / pairs
}

/// `tdeps / n`: every closure edge is one recompilation of a dependent.
pub fn average_recompilation_length(items: usize, tdeps: usize) -> f64 {
    if items == 0 {
        0.0
    } else {
        tdeps as f64 / items as f64
    }
}

pub fn median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        (v[m - 1] + v[m]) as f64 / 2.0
    }
}

/// Number of transitive dependents of every node, in node order.
pub fn dependent_counts(g: &DepGraph) -> Vec<usize> {
    let mut counts = vec![0usize; g.nodes.len()];
    for row in g.reach() {
        for j in row.ones() {
            counts[j] += 1;
        }
    }
    counts
}

pub fn compute_stats(g: &DepGraph) -> StatsReport {
    let counts = dependent_counts(g);
    let n = g.nodes.len();
    let tdeps: usize = counts.iter().sum();
    StatsReport {
        items: n,
        deps: g.edge_count(),
        tdeps,
        p: pair_percentage(n, tdeps),
        arl: average_recompilation_length(n, tdeps),
        mrl: median(&counts),
    }
}

/// What to re-verify after `changed` items were modified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RecompPlan {
    pub changed: BTreeSet<ItemId>,
    pub affected: BTreeSet<ItemId>,
    pub schedule: Vec<Vec<ItemId>>,
}

pub fn recompilation_plan<'a>(
    g: &DepGraph,
    changed: impl IntoIterator<Item = &'a ItemId>,
) -> Result<RecompPlan, DepGraphError> {
    let changed: BTreeSet<ItemId> = changed.into_iter().cloned().collect();
    if let Some(bad) = changed.iter().find(|c| !g.contains(c)) {
        return Err(DepGraphError::UnknownItem(bad.clone()));
    }
    let affected = g.dependents_closure(&changed);
    let schedule = g.schedule(&affected);
    Ok(RecompPlan {
        changed,
        affected,
        schedule,
    })
}

/// The library restricted to `keep` plus the whole target item: every
/// article retains its path and imports but only the kept items.
pub fn micro_library(lib: &Library, target: &ItemId, keep: &BTreeSet<ItemId>) -> Library {
    lib.articles()
        .filter_map(|a| {
            let items: Vec<_> = a
                .items
                .iter()
                .filter(|i| {
                    let id = a.item_id(&i.name);
                    &id == target || keep.contains(&id)
                })
                .cloned()
                .collect();
            if items.is_empty() && a.path != target.article {
                return None;
            }
            Some(Article {
                path: a.path.clone(),
                imports: a.imports.clone(),
                items,
                source: a.source.clone(),
            })
        })
        .collect()
}

fn micro_verifies(lib: &Library, target: &ItemId, env: &BTreeSet<ItemId>) -> ItemStatus {
    let micro = micro_library(lib, target, env);
    check_item(
        &micro,
        target,
        Mode::Full,
        &AssumeVerified,
        &Default::default(),
    )
}

/// Brute-force minimal environment of `target`: start from every item of
/// the transitively imported articles plus the preceding local items, then
/// try dropping each in reverse topological order, keeping the drop when the
/// one-item micro-article still passes full verification.
pub fn minimize_environment(
    lib: &Library,
    target: &ItemId,
) -> Result<BTreeSet<ItemId>, DepGraphError> {
    let (article, _) = lib
        .item(target)
        .ok_or_else(|| DepGraphError::UnknownItem(target.clone()))?;
    let pos = article.item_index(&target.name).expect("present");
    let mut env: BTreeSet<ItemId> = article.items[..pos]
        .iter()
        .map(|i| article.item_id(&i.name))
        .collect();
    for p in lib.transitive_imports(&article.path) {
        if let Some(a) = lib.get(&p) {
            env.extend(a.items.iter().map(|i| a.item_id(&i.name)));
        }
    }
    if let ItemStatus::Failed(diagnostic) = micro_verifies(lib, target, &env) {
        return Err(DepGraphError::NotVerifiable {
            item: target.clone(),
            diagnostic: Box::new(diagnostic),
        });
    }
    let order: Vec<ItemId> = match extract_item_graph(lib) {
        Ok(g) => g
            .topological_order()
            .into_iter()
            .rev()
            .filter(|i| env.contains(*i))
            .cloned()
            .collect(),
        Err(_) => env.iter().rev().cloned().collect(),
    };
    for candidate in order {
        env.remove(&candidate);
        if !micro_verifies(lib, target, &env).is_ok() {
            env.insert(candidate);
        }
    }
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::minilib::{parse_article, ArticlePath};
    use proptest::prelude::*;

    fn id(s: &str) -> ItemId {
        s.parse().unwrap()
    }

    fn ids(v: &[&str]) -> BTreeSet<ItemId> {
        v.iter().map(|s| id(s)).collect()
    }

    #[test]
    fn fixture_item_graph() {
        let g = extract_item_graph(&corpus::fixture_library()).unwrap();
        assert_eq!(g.edge_count(), 8);
        let use_deps: BTreeSet<ItemId> =
            g.dependees(&id("calc#use")).into_iter().cloned().collect();
        assert_eq!(use_deps, ids(&["calc#six", "nat#two", "nat#add_comm"]));
        assert_eq!(g.transitive_closure().edge_count(), 11);
    }

    #[test]
    fn fixture_file_graph() {
        let g = extract_file_graph(&corpus::fixture_library()).unwrap();
        assert_eq!(g.edge_count(), 15);
    }

    #[test]
    fn fixture_stats() {
        let s = compute_stats(&extract_item_graph(&corpus::fixture_library()).unwrap());
        assert_eq!((s.items, s.deps, s.tdeps), (6, 8, 11));
        assert!((s.p - 73.333).abs() < 1e-2);
        assert!((s.arl - 11.0 / 6.0).abs() < 1e-9);
        assert_eq!(s.mrl, 1.5);
    }

    #[test]
    fn chain_closure() {
        let g = DepGraph::from_edges(
            Granularity::Item,
            [],
            [(id("x#c"), id("x#b")), (id("x#b"), id("x#a"))],
        )
        .unwrap();
        assert_eq!(g.transitive_closure().edge_count(), 3);
        assert_eq!(
            DepGraph::from_edges(Granularity::Item, [], [])
                .unwrap()
                .transitive_closure()
                .edge_count(),
            0
        );
    }

    #[test]
    fn cycle_across_articles() {
        let a = parse_article(
            "import b; def a := b.b;",
            ArticlePath::parse_dotted("a").unwrap(),
        )
        .unwrap();
        let b = parse_article(
            "import a; def b := a.a;",
            ArticlePath::parse_dotted("b").unwrap(),
        )
        .unwrap();
        let lib: Library = [a, b].into_iter().collect();
        match extract_item_graph(&lib) {
            Err(DepGraphError::CycleDetected(c)) => {
                assert_eq!(c.first(), c.last());
                assert_eq!(c.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plans() {
        let g = extract_item_graph(&corpus::fixture_library()).unwrap();
        let p = recompilation_plan(&g, &ids(&["calc#six"])).unwrap();
        assert_eq!(
            p.affected,
            ids(&["calc#six", "calc#six_is_six", "calc#use"])
        );
        assert_eq!(
            p.schedule,
            vec![
                vec![id("calc#six")],
                vec![id("calc#six_is_six"), id("calc#use")]
            ]
        );
        assert_eq!(
            recompilation_plan(&g, &ids(&["calc#use"]))
                .unwrap()
                .affected,
            ids(&["calc#use"])
        );
        assert!(recompilation_plan(&g, &ids(&[]))
            .unwrap()
            .affected
            .is_empty());
        assert!(matches!(
            recompilation_plan(&g, &ids(&["calc#nope"])),
            Err(DepGraphError::UnknownItem(_))
        ));
    }

    #[test]
    fn minimization_on_fixture() {
        let lib = corpus::fixture_library();
        assert_eq!(
            minimize_environment(&lib, &id("calc#use")).unwrap(),
            ids(&["calc#six", "nat#two", "nat#three", "nat#add_comm"])
        );
        assert!(minimize_environment(&lib, &id("nat#two"))
            .unwrap()
            .is_empty());
        assert_eq!(
            minimize_environment(&lib, &id("calc#six_is_six")).unwrap(),
            ids(&["calc#six", "nat#two", "nat#three"])
        );
    }

    #[test]
    fn minimization_rejects_false_items() {
        let lib: Library = [parse_article(
            "thm t : 1 = 2 proof eval;",
            ArticlePath::parse_dotted("x").unwrap(),
        )
        .unwrap()]
        .into_iter()
        .collect();
        assert!(matches!(
            minimize_environment(&lib, &id("x#t")),
            Err(DepGraphError::NotVerifiable { .. })
        ));
    }

    #[test]
    fn text_roundtrip() {
        let g = extract_item_graph(&corpus::fixture_library()).unwrap();
        let text = g.to_text();
        assert!(text.contains("calc#use\tnat#add_comm\n"));
        let back = DepGraph::from_text(Granularity::Item, &text).unwrap();
        assert_eq!(back.edges(), g.edges());
        let mut a: Vec<_> = back.nodes().to_vec();
        let mut b: Vec<_> = g.nodes().to_vec();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(matches!(
            DepGraph::from_text(Granularity::Item, "a#b\tnot an id"),
            Err(DepGraphError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn stats_json_has_six_fields() {
        let s = compute_stats(&extract_item_graph(&corpus::fixture_library()).unwrap());
        let v: serde_json::Value = serde_json::to_value(s).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 6);
    }

    /// Random DAG: edges only from higher to lower index.
    fn dag() -> impl Strategy<Value = DepGraph> {
        (2usize..40).prop_flat_map(|n| {
            proptest::collection::vec((0..n, 0..n), 0..120).prop_map(move |pairs| {
                let node = |i: usize| id(&format!("g#n{i}"));
                let edges = pairs
                    .into_iter()
                    .filter(|(a, b)| a != b)
                    .map(|(a, b)| (node(a.max(b)), node(a.min(b))));
                DepGraph::from_edges(Granularity::Item, (0..n).map(node), edges).unwrap()
            })
        })
    }

    /// Reachability by plain DFS, independent of the bitset closure.
    fn reachable(g: &DepGraph, from: &ItemId) -> BTreeSet<ItemId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<ItemId> = g.dependees(from).into_iter().cloned().collect();
        while let Some(x) = stack.pop() {
            if seen.insert(x.clone()) {
                stack.extend(g.dependees(&x).into_iter().cloned());
            }
        }
        seen
    }

    proptest! {
        #[test]
        fn closure_matches_dfs(g in dag()) {
            let c = g.transitive_closure();
            for n in g.nodes() {
                let expect = reachable(&g, n);
                let got: BTreeSet<ItemId> = c.dependees(n).into_iter().cloned().collect();
                prop_assert_eq!(got, expect);
            }
        }

        #[test]
        fn stats_identities(g in dag()) {
            let s = compute_stats(&g);
            let n = s.items as f64;
            prop_assert!(s.tdeps >= s.deps);
            prop_assert_eq!(s.tdeps, g.transitive_closure().edge_count());
            prop_assert_eq!(dependent_counts(&g).iter().sum::<usize>(), s.tdeps);
            prop_assert!((s.arl - s.tdeps as f64 / n).abs() < 1e-12);
            prop_assert!((s.p - 100.0 * s.tdeps as f64 / (n * (n - 1.0) / 2.0)).abs() < 1e-9);
            prop_assert!(s.p <= 100.0 + 1e-9);
        }

        #[test]
        fn schedule_is_sound_and_maximal(g in dag(), picks in proptest::collection::vec(0usize..40, 0..5)) {
            let changed: BTreeSet<ItemId> = picks.iter().filter_map(|&k| g.nodes().get(k).cloned()).collect();
            let plan = recompilation_plan(&g, &changed).unwrap();
            prop_assert!(changed.is_subset(&plan.affected));
            let mut batch_of = HashMap::new();
            for (k, b) in plan.schedule.iter().enumerate() {
                for i in b {
                    batch_of.insert(i.clone(), k);
                }
            }
            prop_assert_eq!(batch_of.len(), plan.affected.len());
            let closure = g.transitive_closure();
            for i in &plan.affected {
                let deps: Vec<usize> = closure
                    .dependees(i)
                    .into_iter()
                    .filter_map(|d| batch_of.get(d).copied())
                    .collect();
                for &d in &deps {
                    prop_assert!(d < batch_of[i]);
                }
                // Earliest placement: one level past the latest dependee.
                prop_assert_eq!(batch_of[i], deps.iter().max().map_or(0, |m| m + 1));
            }
        }

        #[test]
        fn text_export_roundtrips(g in dag()) {
            let back = DepGraph::from_text(Granularity::Item, &g.to_text()).unwrap();
            prop_assert_eq!(back.edges(), g.edges());
            prop_assert_eq!(back.nodes().len(), g.nodes().len());
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[0, 0, 1, 2, 4, 4]), 1.5);
        assert_eq!(median(&[3, 1, 2]), 2.0);
        assert_eq!(median(&[]), 0.0);
    }
}
