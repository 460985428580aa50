use thiserror::Error;

use super::{
    is_identifier, Article, ArticlePath, Expr, Item, ItemBody, ItemRef, Justification, Span,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {message}")]
pub struct ParseError {
    /// 1-based.
    pub line: usize,
    /// 1-based, in characters.
    pub column: usize,
    pub message: String,
}

impl ParseError {
    fn at(source: &str, offset: usize, message: impl Into<String>) -> Self {
        let before = &source[..offset.min(source.len())];
        let line = before.matches('\n').count() + 1;
        let line_start = before.rfind('\n').map(|i| i + 1).unwrap_or(0);
        let column = before[line_start..].chars().count() + 1;
        Self {
            line,
            column,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    Semi,
    Assign,
    Colon,
    Eq,
    Plus,
    Star,
    LParen,
    RParen,
    Comma,
    Dot,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Int(n) => format!("integer `{n}`"),
            Tok::Semi => "`;`".into(),
            Tok::Assign => "`:=`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Eq => "`=`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Star => "`*`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Dot => "`.`".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: Span,
}

fn lex(source: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = source.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'-' && bytes.get(i + 1) == Some(&b'-') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let single = |tok| Token {
            tok,
            span: Span::new(start, start + 1),
        };
        match c {
            b';' => {
                out.push(single(Tok::Semi));
                i += 1;
            }
            b':' if bytes.get(i + 1) == Some(&b'=') => {
                out.push(Token {
                    tok: Tok::Assign,
                    span: Span::new(start, start + 2),
                });
                i += 2;
            }
            b':' => {
                out.push(single(Tok::Colon));
                i += 1;
            }
            b'=' => {
                out.push(single(Tok::Eq));
                i += 1;
            }
            b'+' => {
                out.push(single(Tok::Plus));
                i += 1;
            }
            b'*' => {
                out.push(single(Tok::Star));
                i += 1;
            }
            b'(' => {
                out.push(single(Tok::LParen));
                i += 1;
            }
            b')' => {
                out.push(single(Tok::RParen));
                i += 1;
            }
            b',' => {
                out.push(single(Tok::Comma));
                i += 1;
            }
            b'.' => {
                out.push(single(Tok::Dot));
                i += 1;
            }
            b'-' | b'0'..=b'9' => {
                if c == b'-' && !bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
                    return Err(ParseError::at(source, i, "unexpected `-`"));
                }
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let text = &source[start..i];
                let n: i64 = text.parse().map_err(|_| {
                    ParseError::at(
                        source,
                        start,
                        format!("integer literal `{text}` out of range"),
                    )
                })?;
                out.push(Token {
                    tok: Tok::Int(n),
                    span: Span::new(start, i),
                });
            }
            b'a'..=b'z' => {
                i += 1;
                while i < bytes.len()
                    && (bytes[i].is_ascii_lowercase()
                        || bytes[i].is_ascii_digit()
                        || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(source[start..i].to_string()),
                    span: Span::new(start, i),
                });
            }
            _ => {
                let ch = source[i..].chars().next().unwrap_or('?');
                return Err(ParseError::at(
                    source,
                    i,
                    format!("unexpected character {ch:?}"),
                ));
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    source: &'a str,
    toks: Vec<Token>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(source: &'a str) -> Result<Self, ParseError> {
        Ok(Self {
            source,
            toks: lex(source)?,
            pos: 0,
        })
    }

    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn peek_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Ident(s), .. }) if s == kw)
    }

    fn error_here(&self, expected: &str) -> ParseError {
        match self.peek() {
            Some(t) => ParseError::at(
                self.source,
                t.span.start,
                format!("expected {expected}, found {}", t.tok.describe()),
            ),
            None => ParseError::at(
                self.source,
                self.source.len(),
                format!("expected {expected}, found end of input"),
            ),
        }
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok) -> Result<Span, ParseError> {
        match self.peek() {
            Some(t) if t.tok == tok => Ok(self.next().expect("peeked").span),
            _ => Err(self.error_here(&tok.describe())),
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<Span, ParseError> {
        if self.peek_keyword(kw) {
            Ok(self.next().expect("peeked").span)
        } else {
            Err(self.error_here(&format!("`{kw}`")))
        }
    }

    fn ident(&mut self) -> Result<(String, Span), ParseError> {
        match self.peek() {
            Some(Token {
                tok: Tok::Ident(s), ..
            }) => {
                let s = s.clone();
                let span = self.next().expect("peeked").span;
                Ok((s, span))
            }
            _ => Err(self.error_here("identifier")),
        }
    }

    /// `IDENT { "." IDENT }`
    fn dotted(&mut self) -> Result<(Vec<String>, Span), ParseError> {
        let (first, span) = self.ident()?;
        let mut segs = vec![first];
        let mut end = span.end;
        while matches!(self.peek(), Some(Token { tok: Tok::Dot, .. })) {
            self.next();
            let (s, sp) = self.ident()?;
            segs.push(s);
            end = sp.end;
        }
        Ok((segs, Span::new(span.start, end)))
    }

    fn itemref(&mut self) -> Result<ItemRef, ParseError> {
        let (mut segs, span) = self.dotted()?;
        let item = segs.pop().expect("non-empty");
        let article = if segs.is_empty() {
            None
        } else {
            Some(
                ArticlePath::new(segs)
                    .map_err(|e| ParseError::at(self.source, span.start, e.to_string()))?,
            )
        };
        Ok(ItemRef {
            article,
            item,
            span,
        })
    }

    fn expr(&mut self) -> Result<(Expr, Span), ParseError> {
        let (mut lhs, mut span) = self.term()?;
        while matches!(self.peek(), Some(Token { tok: Tok::Plus, .. })) {
            self.next();
            let (rhs, rs) = self.term()?;
            lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
            span.end = rs.end;
        }
        Ok((lhs, span))
    }

    fn term(&mut self) -> Result<(Expr, Span), ParseError> {
        let (mut lhs, mut span) = self.factor()?;
        while matches!(self.peek(), Some(Token { tok: Tok::Star, .. })) {
            self.next();
            let (rhs, rs) = self.factor()?;
            lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
            span.end = rs.end;
        }
        Ok((lhs, span))
    }

    fn factor(&mut self) -> Result<(Expr, Span), ParseError> {
        match self.peek().map(|t| t.tok.clone()) {
            Some(Tok::Int(n)) => {
                let span = self.next().expect("peeked").span;
                Ok((Expr::Int(n), span))
            }
            Some(Tok::Ident(_)) => {
                let r = self.itemref()?;
                let span = r.span;
                Ok((Expr::Ref(r), span))
            }
            Some(Tok::LParen) => {
                let open = self.next().expect("peeked").span;
                let (e, _) = self.expr()?;
                let close = self.expect(Tok::RParen)?;
                Ok((e, Span::new(open.start, close.end)))
            }
            _ => Err(self.error_here("integer, reference or `(`")),
        }
    }

    fn item(&mut self) -> Result<Item, ParseError> {
        let start = self
            .peek()
            .map(|t| t.span.start)
            .unwrap_or(self.source.len());
        if self.peek_keyword("def") {
            self.next();
            let (name, _) = self.ident()?;
            self.expect(Tok::Assign)?;
            let (value, stmt) = self.expr()?;
            let semi = self.expect(Tok::Semi)?;
            Ok(Item {
                name,
                body: ItemBody::Def { value },
                span: Span::new(start, semi.end),
                statement_span: stmt,
                proof_span: Span::empty_at(stmt.end),
            })
        } else if self.peek_keyword("thm") {
            self.next();
            let (name, _) = self.ident()?;
            self.expect(Tok::Colon)?;
            let (lhs, ls) = self.expr()?;
            self.expect(Tok::Eq)?;
            let (rhs, rs) = self.expr()?;
            self.expect_keyword("proof")?;
            let (proof, proof_span) = if self.peek_keyword("eval") {
                (Justification::Eval, self.next().expect("peeked").span)
            } else if self.peek_keyword("by") {
                let by = self.next().expect("peeked").span;
                let mut refs = vec![self.itemref()?];
                while matches!(
                    self.peek(),
                    Some(Token {
                        tok: Tok::Comma,
                        ..
                    })
                ) {
                    self.next();
                    refs.push(self.itemref()?);
                }
                let end = refs.last().expect("non-empty").span.end;
                (Justification::By(refs), Span::new(by.start, end))
            } else {
                return Err(self.error_here("`eval` or `by`"));
            };
            let semi = self.expect(Tok::Semi)?;
            Ok(Item {
                name,
                body: ItemBody::Thm { lhs, rhs, proof },
                span: Span::new(start, semi.end),
                statement_span: Span::new(ls.start, rs.end),
                proof_span,
            })
        } else {
            Err(self.error_here("`def` or `thm`"))
        }
    }
}

/// Parses one MiniLib source file.
pub fn parse_article(source: &str, path: ArticlePath) -> Result<Article, ParseError> {
    let mut p = Parser::new(source)?;
    let mut imports: Vec<ArticlePath> = Vec::new();
    while p.peek_keyword("import") {
        p.next();
        let (segs, span) = p.dotted()?;
        let import = ArticlePath::new(segs)
            .map_err(|e| ParseError::at(source, span.start, e.to_string()))?;
        p.expect(Tok::Semi)?;
        if import == path {
            return Err(ParseError::at(
                source,
                span.start,
                "an article cannot import itself",
            ));
        }
        if imports.contains(&import) {
            return Err(ParseError::at(
                source,
                span.start,
                format!("duplicate import `{import}`"),
            ));
        }
        imports.push(import);
    }
    let mut items: Vec<Item> = Vec::new();
    while p.peek().is_some() {
        let item = p.item()?;
        if items.iter().any(|i| i.name == item.name) {
            return Err(ParseError::at(
                source,
                item.span.start,
                format!("duplicate item `{}`", item.name),
            ));
        }
        items.push(item);
    }
    Ok(Article {
        path,
        imports,
        items,
        source: source.to_string(),
    })
}

/// Parses text that must contain exactly one item (and nothing else besides
/// whitespace and comments). Spans are relative to `text`.
pub fn parse_item(text: &str) -> Result<Item, ParseError> {
    let mut p = Parser::new(text)?;
    if p.peek().is_none() {
        return Err(p.error_here("an item"));
    }
    let item = p.item()?;
    if p.peek().is_some() {
        return Err(p.error_here("end of item text"));
    }
    debug_assert!(is_identifier(&item.name));
    Ok(item)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilib::ItemKind;

    fn path(s: &str) -> ArticlePath {
        ArticlePath::parse_dotted(s).unwrap()
    }

    #[test]
    fn minimal_def() {
        let a = parse_article("def two := 2;", path("nat")).unwrap();
        assert_eq!(a.items.len(), 1);
        assert_eq!(a.items[0].name, "two");
        assert_eq!(a.items[0].kind(), ItemKind::Def);
        assert_eq!(
            a.items[0].body,
            ItemBody::Def {
                value: Expr::Int(2)
            }
        );
        assert!(a.items[0].proof_span.is_empty());
    }

    #[test]
    fn import_and_theorem() {
        let src = "import nat; thm t : nat.two = 2 proof eval;";
        let a = parse_article(src, path("calc")).unwrap();
        assert_eq!(a.imports, vec![path("nat")]);
        assert_eq!(a.items.len(), 1);
        let t = &a.items[0];
        assert_eq!(t.kind(), ItemKind::Thm);
        assert_eq!(a.statement_text(t), "nat.two = 2");
        assert_eq!(a.proof_text(t), "eval");
        assert_eq!(a.item_text(t), "thm t : nat.two = 2 proof eval;");
        let refs = t.expr_refs();
        assert_eq!(refs.len(), 1);
        assert_eq!(refs[0].article, Some(path("nat")));
        assert_eq!(refs[0].item, "two");
    }

    #[test]
    fn identifier_must_not_start_with_digit() {
        let err = parse_article("def 2x := 1;", path("nat")).unwrap_err();
        assert_eq!((err.line, err.column), (1, 5));
    }

    #[test]
    fn nested_qualified_refs_and_precedence() {
        let src = "import algebra.groups;\n-- comment\nthm t : 1 + 2 * (algebra.groups.e + -3) = 0 proof by algebra.groups.law, local;\ndef local := 0;";
        let a = parse_article(src, path("x")).unwrap();
        let ItemBody::Thm { lhs, proof, .. } = &a.items[0].body else {
            panic!()
        };
        match lhs {
            Expr::Add(l, r) => {
                assert_eq!(**l, Expr::Int(1));
                assert!(matches!(**r, Expr::Mul(_, _)));
            }
            other => panic!("{other:?}"),
        }
        let Justification::By(refs) = proof else {
            panic!()
        };
        assert_eq!(refs[0].article, Some(path("algebra.groups")));
        assert_eq!(refs[0].item, "law");
        assert_eq!(refs[1].article, None);
        assert_eq!(a.proof_text(&a.items[0]), "by algebra.groups.law, local");
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse_article("def a := 1;\ndef b := ;", path("x")).unwrap_err();
        assert_eq!((e.line, e.column), (2, 10));
        let e = parse_article("def a := 1", path("x")).unwrap_err();
        assert!(e.message.contains("end of input"), "{e}");
        assert!(parse_article("def a := 1; def a := 2;", path("x")).is_err());
        assert!(parse_article("import x; def a := 1;", path("x")).is_err());
        assert!(parse_article("import y; import y;", path("x")).is_err());
        assert!(parse_article("def a := 1; import y;", path("x")).is_err());
        assert!(parse_article("def a := 99999999999999999999;", path("x")).is_err());
        assert!(parse_article("def a := 1 - 2;", path("x")).is_err());
        assert!(parse_article("def A := 1;", path("x")).is_err());
        assert!(parse_article("thm t : 1 = 1 proof;", path("x")).is_err());
    }

    #[test]
    fn parse_single_item() {
        let it =
            parse_item("  thm add_comm : two + three = three + two proof by nat.add_comm; -- c")
                .unwrap();
        assert_eq!(it.name, "add_comm");
        assert_eq!(it.span.start, 2);
        assert!(parse_item("def a := 1; def b := 2;").is_err());
        assert!(parse_item("").is_err());
    }

    #[test]
    fn pieces_reproduce_source() {
        let src = "import nat;\n\n-- hi\ndef a := 1;  thm b : a = 1 proof eval;\n-- tail\n";
        let a = parse_article(src, path("x")).unwrap();
        let joined: String = a.pieces().iter().map(|(_, s)| *s).collect();
        assert_eq!(joined, src);
    }
}
