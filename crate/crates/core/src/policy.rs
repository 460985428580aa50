//! Gitolite-style access rules and per-repository verification requirements.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use indexmap::IndexMap;
use parking_lot::Mutex;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minilib::Mode;

/// Token standing for the recorded creator of a repository.
pub const CREATOR: &str = "CREATOR";

/// Branch-based access rules for a small wiki team.
pub const DEFAULT_POLICY: &str = "\
@all = @superusers @maintainers @developers @users @anonymous

repo    main
        RW+     =   @superusers @maintainers
        R       =   @developers @users @anonymous

repo    devel
        RW+     =   @superusers @maintainers @developers
        R       =   @users @anonymous

repo    feature/[a-zA-Z0-9].*
        C       =   @superusers @maintainers @developers
        RW+     =   @superusers @maintainers @developers
        R       =   @users @anonymous

repo    (release|hotfix)/[a-zA-Z0-9].*
        C       =   @superusers @maintainers
        RW+     =   @superusers @maintainers
        R       =   @developers @users @anonymous

repo   user/CREATOR/[a-zA-Z0-9].*
       C       =   @superusers @maintainers @developers @users
       RW+     =   CREATOR
       R       =   @all
";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("line {line}: {message}")]
    SyntaxError { line: usize, message: String },
    #[error("line {line}: unknown permission `{token}` (expected C, R, RW or RW+)")]
    UnknownPermToken { line: usize, token: String },
    #[error("group cycle: {}", .0.join(" -> "))]
    GroupCycle(Vec<String>),
    #[error("line {line}: invalid repo pattern `{pattern}`: {message}")]
    InvalidPattern {
        line: usize,
        pattern: String,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Perm {
    #[serde(rename = "C")]
    Create,
    #[serde(rename = "R")]
    Read,
    #[serde(rename = "RW")]
    ReadWrite,
    #[serde(rename = "RW+")]
    ReadWriteRewind,
}

impl Perm {
    pub fn grants(self, action: Action) -> bool {
        match self {
            Perm::Create => action == Action::Create,
            Perm::Read => action == Action::Read,
            Perm::ReadWrite => matches!(action, Action::Read | Action::Write),
            Perm::ReadWriteRewind => {
                matches!(action, Action::Read | Action::Write | Action::Rewind)
            }
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Perm::Create => "C",
            Perm::Read => "R",
            Perm::ReadWrite => "RW",
            Perm::ReadWriteRewind => "RW+",
        }
    }
}

impl FromStr for Perm {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "C" => Ok(Perm::Create),
            "R" => Ok(Perm::Read),
            "RW" => Ok(Perm::ReadWrite),
            "RW+" => Ok(Perm::ReadWriteRewind),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Create,
    Read,
    Write,
    Rewind,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Create, Action::Read, Action::Write, Action::Rewind];
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Create => "create",
            Action::Read => "read",
            Action::Write => "write",
            Action::Rewind => "rewind",
        })
    }
}

impl FromStr for Action {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "create" | "c" => Ok(Action::Create),
            "read" | "r" => Ok(Action::Read),
            "write" | "w" => Ok(Action::Write),
            "rewind" | "force" => Ok(Action::Rewind),
            other => Err(format!(
                "unknown action `{other}` (expected create, read, write or rewind)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Allow,
    Deny,
}

impl Decision {
    pub fn is_allow(self) -> bool {
        self == Decision::Allow
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Allow => "allow",
            Decision::Deny => "deny",
        })
    }
}

/// Who is asking: a user name plus the `@class` groups it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Principal {
    pub user: String,
    pub classes: BTreeSet<String>,
    /// Bypasses policy evaluation entirely.
    #[serde(default)]
    pub admin: bool,
}

impl Principal {
    pub fn new(
        user: impl Into<String>,
        classes: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        Self {
            user: user.into(),
            classes: classes.into_iter().map(Into::into).collect(),
            admin: false,
        }
    }

    pub fn anonymous() -> Self {
        Self::new("anonymous", ["@anonymous"])
    }

    pub fn admin(user: impl Into<String>) -> Self {
        Self {
            user: user.into(),
            classes: BTreeSet::new(),
            admin: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessQuery<'a> {
    pub principal: &'a Principal,
    pub repo: &'a str,
    pub action: Action,
    /// Recorded creator of the repository; ignored for `Create`, where the
    /// asking user is the prospective creator.
    pub creator: Option<&'a str>,
}

#[derive(Debug, Clone)]
pub struct RepoRule {
    pub pattern: String,
    pub grants: Vec<(Perm, Vec<String>)>,
    /// Compiled anchored pattern when it does not mention CREATOR.
    fixed: Option<Regex>,
    /// Compiled patterns per creator otherwise.
    per_creator: Arc<Mutex<HashMap<String, Option<Regex>>>>,
}

impl RepoRule {
    fn new(pattern: String, line: usize) -> Result<Self, PolicyError> {
        let invalid = |e: regex::Error| PolicyError::InvalidPattern {
            line,
            pattern: pattern.clone(),
            message: e.to_string(),
        };
        let fixed = if pattern.contains(CREATOR) {
            compile(&pattern.replace(CREATOR, "creator")).map_err(invalid)?;
            None
        } else {
            Some(compile(&pattern).map_err(invalid)?)
        };
        Ok(Self {
            pattern,
            grants: Vec::new(),
            fixed,
            per_creator: Arc::default(),
        })
    }

    fn matches(&self, repo: &str, creator: Option<&str>) -> bool {
        match &self.fixed {
            Some(re) => re.is_match(repo),
            None => match creator {
                Some(c) => {
                    let mut cache = self.per_creator.lock();
                    let re = cache.entry(c.to_string()).or_insert_with(|| {
                        compile(&self.pattern.replace(CREATOR, &regex::escape(c))).ok()
                    });
                    re.as_ref().is_some_and(|re| re.is_match(repo))
                }
                None => false,
            },
        }
    }
}

impl PartialEq for RepoRule {
    fn eq(&self, other: &Self) -> bool {
        self.pattern == other.pattern && self.grants == other.grants
    }
}

impl Eq for RepoRule {}

fn compile(pattern: &str) -> Result<Regex, regex::Error> {
    Regex::new(&format!("^(?:{pattern})$"))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PolicyConfig {
    pub groups: BTreeMap<String, Vec<String>>,
    pub rules: Vec<RepoRule>,
}

impl PolicyConfig {
    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut cfg = PolicyConfig::default();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = strip_comment(raw).trim();
            if content.is_empty() {
                continue;
            }
            let syntax = |message: &str| PolicyError::SyntaxError {
                line,
                message: message.to_string(),
            };
            if let Some(rest) = content.strip_prefix("repo") {
                if !rest.starts_with(char::is_whitespace) {
                    return Err(syntax("expected `repo <pattern>`"));
                }
                let pattern = rest.trim();
                if pattern.split_whitespace().count() != 1 {
                    return Err(syntax("expected exactly one repo pattern"));
                }
                cfg.rules.push(RepoRule::new(pattern.to_string(), line)?);
                continue;
            }
            let Some((lhs, rhs)) = content.split_once('=') else {
                return Err(syntax(
                    "expected `@group = members`, `repo <pattern>` or `<perm> = members`",
                ));
            };
            let lhs = lhs.trim();
            let members: Vec<String> = rhs.split_whitespace().map(str::to_string).collect();
            if lhs.starts_with('@') {
                if lhs.len() < 2 || lhs.contains(char::is_whitespace) {
                    return Err(syntax("invalid group name"));
                }
                if members.iter().any(|m| m == CREATOR) {
                    return Err(syntax("CREATOR cannot be a group member"));
                }
                cfg.groups
                    .entry(lhs.to_string())
                    .or_default()
                    .extend(members);
                continue;
            }
            let perm: Perm = lhs.parse().map_err(|_| PolicyError::UnknownPermToken {
                line,
                token: lhs.to_string(),
            })?;
            if members.is_empty() {
                return Err(syntax("grant lists no members"));
            }
            let Some(rule) = cfg.rules.last_mut() else {
                return Err(syntax("grant outside a `repo` section"));
            };
            rule.grants.push((perm, members));
        }
        cfg.check_group_cycles()?;
        Ok(cfg)
    }

    fn check_group_cycles(&self) -> Result<(), PolicyError> {
        fn visit(
            cfg: &PolicyConfig,
            g: &str,
            path: &mut Vec<String>,
            done: &mut BTreeSet<String>,
        ) -> Result<(), PolicyError> {
            if let Some(pos) = path.iter().position(|p| p == g) {
                let mut cycle = path[pos..].to_vec();
                cycle.push(g.to_string());
                return Err(PolicyError::GroupCycle(cycle));
            }
            if done.contains(g) {
                return Ok(());
            }
            path.push(g.to_string());
            for m in cfg
                .groups
                .get(g)
                .into_iter()
                .flatten()
                .filter(|m| m.starts_with('@'))
            {
                visit(cfg, m, path, done)?;
            }
            path.pop();
            done.insert(g.to_string());
            Ok(())
        }
        let mut done = BTreeSet::new();
        for g in self.groups.keys() {
            visit(self, g, &mut Vec::new(), &mut done)?;
        }
        Ok(())
    }

    /// Every `@group` name mentioned anywhere, defined or not.
    pub fn group_names(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self.groups.keys().cloned().collect();
        for members in self.groups.values() {
            out.extend(members.iter().filter(|m| m.starts_with('@')).cloned());
        }
        for r in &self.rules {
            for (_, members) in &r.grants {
                out.extend(members.iter().filter(|m| m.starts_with('@')).cloned());
            }
        }
        out
    }

    fn in_group(&self, p: &Principal, group: &str, depth: usize) -> bool {
        if p.classes.contains(group) {
            return true;
        }
        match self.groups.get(group) {
            Some(members) if depth < 64 => members.iter().any(|m| {
                if m.starts_with('@') {
                    self.in_group(p, m, depth + 1)
                } else {
                    m == &p.user
                }
            }),
            // An undefined @all means everybody.
            None => group == "@all",
            Some(_) => false,
        }
    }

    fn is_member(&self, p: &Principal, member: &str, creator: Option<&str>) -> bool {
        if member == CREATOR {
            creator == Some(p.user.as_str())
        } else if member.starts_with('@') {
            self.in_group(p, member, 0)
        } else {
            member == p.user
        }
    }

    /// Grants-union over every rule whose pattern matches the repo. The
    /// admin flag is not consulted; see [`authorize`](Self::authorize).
    pub fn evaluate(&self, q: &AccessQuery<'_>) -> Decision {
        let creator = if q.action == Action::Create {
            Some(q.principal.user.as_str())
        } else {
            q.creator
        };
        let allowed = self
            .rules
            .iter()
            .filter(|r| r.matches(q.repo, creator))
            .flat_map(|r| r.grants.iter())
            .any(|(perm, members)| {
                perm.grants(q.action)
                    && members
                        .iter()
                        .any(|m| self.is_member(q.principal, m, creator))
            });
        if allowed {
            Decision::Allow
        } else {
            Decision::Deny
        }
    }

    /// [`evaluate`](Self::evaluate), with admins allowed everything.
    pub fn authorize(&self, q: &AccessQuery<'_>) -> Decision {
        if q.principal.admin {
            Decision::Allow
        } else {
            self.evaluate(q)
        }
    }

    /// Whether `repo` is covered by any rule pattern (CREATOR bound to
    /// `creator`).
    pub fn covers(&self, repo: &str, creator: Option<&str>) -> bool {
        self.rules.iter().any(|r| r.matches(repo, creator))
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) if i == 0 || line[..i].ends_with(char::is_whitespace) => &line[..i],
        _ => line,
    }
}

impl fmt::Display for PolicyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (g, members) in &self.groups {
            writeln!(f, "{g} = {}", members.join(" "))?;
        }
        for r in &self.rules {
            writeln!(f, "\nrepo {}", r.pattern)?;
            for (perm, members) in &r.grants {
                writeln!(f, "    {:<4} = {}", perm.token(), members.join(" "))?;
            }
        }
        Ok(())
    }
}

impl FromStr for PolicyConfig {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// Verification a repository requires before accepting changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Required {
    None,
    Quick,
    Medium,
    Full,
}

impl Required {
    pub fn mode(self) -> Option<Mode> {
        match self {
            Required::None => None,
            Required::Quick => Some(Mode::Quick),
            Required::Medium => Some(Mode::Medium),
            Required::Full => Some(Mode::Full),
        }
    }

    /// The stronger of a requested mode and this requirement.
    pub fn effective(self, requested: Mode) -> Mode {
        self.mode().map_or(requested, |m| m.max(requested))
    }
}

impl FromStr for Required {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("none") {
            Ok(Required::None)
        } else {
            s.parse::<Mode>().map(|m| match m {
                Mode::Quick => Required::Quick,
                Mode::Medium => Required::Medium,
                Mode::Full => Required::Full,
            })
        }
    }
}

/// Ordered (pattern, requirement) list; the first full match wins and
/// unmatched repositories need Quick.
#[derive(Debug, Clone)]
pub struct VerifyPolicy {
    entries: Vec<(String, Regex, Required)>,
}

impl VerifyPolicy {
    pub fn new<S: Into<String>>(
        entries: impl IntoIterator<Item = (S, Required)>,
    ) -> Result<Self, regex::Error> {
        let entries = entries
            .into_iter()
            .map(|(p, r)| {
                let p = p.into();
                compile(&p).map(|re| (p, re, r))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn from_map(map: &IndexMap<String, Required>) -> Result<Self, regex::Error> {
        Self::new(map.iter().map(|(k, v)| (k.clone(), *v)))
    }

    pub fn required_mode(&self, repo: &str) -> Required {
        self.entries
            .iter()
            .find(|(_, re, _)| re.is_match(repo))
            .map_or(Required::Quick, |(_, _, r)| *r)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, Required)> {
        self.entries.iter().map(|(p, _, r)| (p.as_str(), *r))
    }
}

impl Default for VerifyPolicy {
    fn default() -> Self {
        Self::new([
            ("main", Required::Full),
            ("devel", Required::Full),
            ("release/.*", Required::Full),
            ("hotfix/.*", Required::Full),
            ("feature/.*", Required::Quick),
            ("user/.*", Required::Quick),
        ])
        .expect("valid defaults")
    }
}
