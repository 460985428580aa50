use std::collections::{HashMap, HashSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::analyze::analyze_item;
use super::fingerprint::verify_fingerprint;
use super::stages::{Mode, Stage, StageResult, StageStatus};
use super::{Article, Expr, ItemBody, ItemId, ItemKind, Justification, Library};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("{item}: 64-bit integer overflow")]
    EvalOverflow { item: ItemId },
    #[error("sides differ: {lhs} != {rhs}")]
    NotEqual { lhs: i64, rhs: i64 },
    #[error("cited theorem {cited} is not verified")]
    CitedUnverified { cited: ItemId },
    #[error("{item}: `{reference}` cannot be resolved in this environment")]
    Unresolved { item: ItemId, reference: String },
    #[error("{item}: `{reference}` has the wrong kind")]
    IllegalRefKind { item: ItemId, reference: String },
    #[error("{item}: evaluation does not terminate (definition cycle)")]
    Cycle { item: ItemId },
    #[error("{0}: no such item")]
    UnknownItem(ItemId),
}

/// Something that can say whether a cited theorem is verified.
pub trait Citations {
    fn is_verified(&self, id: &ItemId) -> bool;
}

impl<F: Fn(&ItemId) -> bool> Citations for F {
    fn is_verified(&self, id: &ItemId) -> bool {
        self(id)
    }
}

impl Citations for HashMap<ItemId, ItemStatus> {
    fn is_verified(&self, id: &ItemId) -> bool {
        matches!(self.get(id), Some(ItemStatus::Ok))
    }
}

/// Treats every cited theorem as verified (environment items of a verified
/// library, micro-articles).
#[derive(Debug, Clone, Copy, Default)]
pub struct AssumeVerified;

impl Citations for AssumeVerified {
    fn is_verified(&self, _: &ItemId) -> bool {
        true
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Artificial per-item cost, for timing experiments.
    pub delay: Option<Duration>,
}

/// One failure, as reported to users (`{item, stage, message}`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Diagnostic {
    pub item: Option<ItemId>,
    pub stage: Stage,
    pub message: String,
}

impl Diagnostic {
    pub fn new(item: Option<ItemId>, stage: Stage, message: impl Into<String>) -> Self {
        Self {
            item,
            stage,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.item {
            Some(id) => write!(f, "{} ({}): {}", id, self.stage, self.message),
            None => write!(f, "({}): {}", self.stage, self.message),
        }
    }
}

/// Verification outcome of one item at some mode.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", content = "diagnostic", rename_all = "lowercase")]
pub enum ItemStatus {
    Ok,
    Failed(Diagnostic),
}

impl ItemStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ItemStatus::Ok)
    }
}

struct Evaluator<'a> {
    lib: &'a Library,
    memo: HashMap<ItemId, Result<i64, VerifyError>>,
    active: HashSet<ItemId>,
}

impl<'a> Evaluator<'a> {
    fn new(lib: &'a Library) -> Self {
        Self {
            lib,
            memo: HashMap::new(),
            active: HashSet::new(),
        }
    }

    fn def_value(&mut self, id: &ItemId) -> Result<i64, VerifyError> {
        if let Some(v) = self.memo.get(id) {
            return v.clone();
        }
        if !self.active.insert(id.clone()) {
            return Err(VerifyError::Cycle { item: id.clone() });
        }
        let lib = self.lib;
        let result = match lib.item(id) {
            None => Err(VerifyError::UnknownItem(id.clone())),
            Some((article, item)) => match &item.body {
                ItemBody::Def { value } => self.expr(article, id, value),
                ItemBody::Thm { .. } => Err(VerifyError::UnknownItem(id.clone())),
            },
        };
        self.active.remove(id);
        self.memo.insert(id.clone(), result.clone());
        result
    }

    fn expr(&mut self, article: &Article, owner: &ItemId, e: &Expr) -> Result<i64, VerifyError> {
        match e {
            Expr::Int(n) => Ok(*n),
            Expr::Ref(r) => {
                let target = self
                    .lib
                    .resolve(article, r)
                    .map_err(|_| VerifyError::Unresolved {
                        item: owner.clone(),
                        reference: r.to_string(),
                    })?;
                match self.lib.item(&target) {
                    Some((_, t)) if t.kind() == ItemKind::Def => self.def_value(&target),
                    _ => Err(VerifyError::IllegalRefKind {
                        item: owner.clone(),
                        reference: r.to_string(),
                    }),
                }
            }
            Expr::Add(a, b) => {
                let (x, y) = (self.expr(article, owner, a)?, self.expr(article, owner, b)?);
                x.checked_add(y).ok_or_else(|| VerifyError::EvalOverflow {
                    item: owner.clone(),
                })
            }
            Expr::Mul(a, b) => {
                let (x, y) = (self.expr(article, owner, a)?, self.expr(article, owner, b)?);
                x.checked_mul(y).ok_or_else(|| VerifyError::EvalOverflow {
                    item: owner.clone(),
                })
            }
        }
    }
}

/// Value of a definition with every referenced definition substituted.
pub fn eval_item(lib: &Library, id: &ItemId) -> Result<i64, VerifyError> {
    Evaluator::new(lib).def_value(id)
}

fn verify_body(lib: &Library, id: &ItemId, citations: &dyn Citations) -> Result<(), VerifyError> {
    let (article, item) = lib
        .item(id)
        .ok_or_else(|| VerifyError::UnknownItem(id.clone()))?;
    let mut ev = Evaluator::new(lib);
    match &item.body {
        ItemBody::Def { .. } => ev.def_value(id).map(|_| ()),
        ItemBody::Thm { lhs, rhs, proof } => {
            let l = ev.expr(article, id, lhs)?;
            let r = ev.expr(article, id, rhs)?;
            if l != r {
                return Err(VerifyError::NotEqual { lhs: l, rhs: r });
            }
            if let Justification::By(refs) = proof {
                for r in refs {
                    let cited = lib
                        .resolve(article, r)
                        .map_err(|_| VerifyError::Unresolved {
                            item: id.clone(),
                            reference: r.to_string(),
                        })?;
                    if lib.item(&cited).map(|(_, i)| i.kind()) != Some(ItemKind::Thm) {
                        return Err(VerifyError::IllegalRefKind {
                            item: id.clone(),
                            reference: r.to_string(),
                        });
                    }
                    if !citations.is_verified(&cited) {
                        return Err(VerifyError::CitedUnverified { cited });
                    }
                }
            }
            Ok(())
        }
    }
}

/// Runs the verification stage on one item. Parse and analysis are assumed
/// to have succeeded for the item and its environment.
pub fn verify_item(
    lib: &Library,
    id: &ItemId,
    citations: &dyn Citations,
    opts: &VerifyOptions,
) -> StageResult {
    if let Some(d) = opts.delay {
        std::thread::sleep(d);
    }
    let input_fingerprint =
        verify_fingerprint(lib, id).unwrap_or_else(|| super::Fingerprint::of(b""));
    let status = match verify_body(lib, id, citations) {
        Ok(()) => StageStatus::Ok,
        Err(e) => StageStatus::Failed(vec![Diagnostic::new(
            Some(id.clone()),
            Stage::Verify,
            e.to_string(),
        )]),
    };
    StageResult {
        stage: Stage::Verify,
        status,
        input_fingerprint,
        cached: false,
    }
}

/// Checks one item of a parsed library up to `mode`: Quick only requires the
/// item to have parsed, Medium adds analysis, Full adds verification.
pub fn check_item(
    lib: &Library,
    id: &ItemId,
    mode: Mode,
    citations: &dyn Citations,
    opts: &VerifyOptions,
) -> ItemStatus {
    let Some((article, item)) = lib.item(id) else {
        return ItemStatus::Failed(Diagnostic::new(
            Some(id.clone()),
            Stage::Parse,
            "no such item",
        ));
    };
    if mode == Mode::Quick {
        return ItemStatus::Ok;
    }
    let analysis = analyze_item(article, item, lib);
    if let Some(e) = analysis.errors.first() {
        return ItemStatus::Failed(Diagnostic::new(
            Some(id.clone()),
            Stage::Analyze,
            e.to_string(),
        ));
    }
    if mode == Mode::Medium {
        return ItemStatus::Ok;
    }
    match verify_item(lib, id, citations, opts).status {
        StageStatus::Ok => ItemStatus::Ok,
        StageStatus::Failed(mut d) => ItemStatus::Failed(d.remove(0)),
    }
}
