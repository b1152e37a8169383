//! Brace-structured text syntax shared by robot, scene and script files.
//!
//! A document is a sequence of statements. A statement is a keyword followed
//! by zero or more words and terminated either by `;` or by a `{ ... }` block
//! holding nested statements. `#` starts a comment that runs to end of line.
//!
//! ```text
//! robot planar1 {
//!     link base {}
//!     joint j1 { kind hinge; parent base; child arm; axis 0 0 1; limits -3 3; vlimit 1; }
//! }
//! ```

use std::fmt;
use std::str::FromStr;

/// Line/column of a token, both 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Span {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Word {
    pub text: String,
    pub span: Span,
}

/// One statement with its optional nested block.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub keyword: String,
    pub span: Span,
    pub args: Vec<Word>,
    pub children: Option<Vec<Node>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{span}: {message}")]
pub struct SyntaxError {
    pub span: Span,
    pub message: String,
}

impl SyntaxError {
    pub fn new(span: Span, message: impl Into<String>) -> Self {
        Self {
            span,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Open,
    Close,
    Semi,
}

fn tokenize(text: &str) -> Vec<(Tok, Span)> {
    let mut out = Vec::new();
    for (li, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        };
        let mut chars = line.char_indices().peekable();
        while let Some(&(ci, c)) = chars.peek() {
            let span = Span {
                line: li + 1,
                col: line[..ci].chars().count() + 1,
            };
            match c {
                c if c.is_whitespace() => {
                    chars.next();
                }
                '{' => {
                    chars.next();
                    out.push((Tok::Open, span));
                }
                '}' => {
                    chars.next();
                    out.push((Tok::Close, span));
                }
                ';' => {
                    chars.next();
                    out.push((Tok::Semi, span));
                }
                _ => {
                    let mut word = String::new();
                    while let Some(&(_, c)) = chars.peek() {
                        if c.is_whitespace() || matches!(c, '{' | '}' | ';') {
                            break;
                        }
                        word.push(c);
                        chars.next();
                    }
                    out.push((Tok::Word(word), span));
                }
            }
        }
    }
    out
}

/// Parses a document into its top-level statements.
pub fn parse(text: &str) -> Result<Vec<Node>, SyntaxError> {
    let toks = tokenize(text);
    let end = toks
        .last()
        .map(|(_, s)| Span {
            line: s.line,
            col: s.col + 1,
        })
        .unwrap_or(Span { line: 1, col: 1 });
    let mut pos = 0;
    let nodes = parse_block(&toks, &mut pos, end, false)?;
    Ok(nodes)
}

fn parse_block(
    toks: &[(Tok, Span)],
    pos: &mut usize,
    end: Span,
    nested: bool,
) -> Result<Vec<Node>, SyntaxError> {
    let mut nodes = Vec::new();
    loop {
        let Some((tok, span)) = toks.get(*pos) else {
            if nested {
                return Err(SyntaxError::new(end, "unexpected end of input, expected `}`"));
            }
            return Ok(nodes);
        };
        match tok {
            Tok::Close if nested => {
                *pos += 1;
                return Ok(nodes);
            }
            Tok::Close => return Err(SyntaxError::new(*span, "unmatched `}`")),
            Tok::Open => return Err(SyntaxError::new(*span, "expected keyword before `{`")),
            Tok::Semi => return Err(SyntaxError::new(*span, "empty statement")),
            Tok::Word(kw) => {
                let kw_span = *span;
                let keyword = kw.clone();
                *pos += 1;
                let mut args = Vec::new();
                loop {
                    match toks.get(*pos) {
                        Some((Tok::Word(w), s)) => {
                            args.push(Word {
                                text: w.clone(),
                                span: *s,
                            });
                            *pos += 1;
                        }
                        Some((Tok::Semi, _)) => {
                            *pos += 1;
                            nodes.push(Node {
                                keyword,
                                span: kw_span,
                                args,
                                children: None,
                            });
                            break;
                        }
                        Some((Tok::Open, _)) => {
                            *pos += 1;
                            let children = parse_block(toks, pos, end, true)?;
                            // optional trailing `;` after a block
                            if let Some((Tok::Semi, _)) = toks.get(*pos) {
                                *pos += 1;
                            }
                            nodes.push(Node {
                                keyword,
                                span: kw_span,
                                args,
                                children: Some(children),
                            });
                            break;
                        }
                        Some((Tok::Close, s)) => {
                            return Err(SyntaxError::new(
                                *s,
                                format!("missing `;` after `{keyword}` statement"),
                            ))
                        }
                        None => {
                            return Err(SyntaxError::new(
                                end,
                                format!("unexpected end of input in `{keyword}` statement"),
                            ))
                        }
                    }
                }
            }
        }
    }
}

impl Node {
    pub fn children(&self) -> &[Node] {
        self.children.as_deref().unwrap_or(&[])
    }

    /// Argument after the keyword used as a name (`joint <name> { ... }`).
    pub fn name(&self) -> Result<&str, SyntaxError> {
        self.args
            .first()
            .map(|w| w.text.as_str())
            .ok_or_else(|| SyntaxError::new(self.span, format!("`{}` requires a name", self.keyword)))
    }

    pub fn expect_block(&self) -> Result<&[Node], SyntaxError> {
        self.children
            .as_deref()
            .ok_or_else(|| SyntaxError::new(self.span, format!("`{}` requires a `{{ }}` block", self.keyword)))
    }

    pub fn expect_arity(&self, n: usize) -> Result<&[Word], SyntaxError> {
        if self.args.len() != n {
            return Err(SyntaxError::new(
                self.span,
                format!("`{}` expects {n} value(s), found {}", self.keyword, self.args.len()),
            ));
        }
        Ok(&self.args)
    }

    pub fn word(&self) -> Result<&str, SyntaxError> {
        Ok(self.expect_arity(1)?[0].text.as_str())
    }

    pub fn numbers<const N: usize>(&self) -> Result<[f64; N], SyntaxError> {
        let words = self.expect_arity(N)?;
        let mut out = [0.0; N];
        for (o, w) in out.iter_mut().zip(words) {
            *o = w.parse()?;
        }
        Ok(out)
    }

    pub fn number_list(&self) -> Result<Vec<f64>, SyntaxError> {
        self.args.iter().map(|w| w.parse()).collect()
    }

    pub fn boolean(&self) -> Result<bool, SyntaxError> {
        match self.word()? {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(SyntaxError::new(self.args[0].span, format!("expected boolean, found `{other}`"))),
        }
    }
}

impl Word {
    pub fn parse<T: FromStr>(&self) -> Result<T, SyntaxError> {
        self.text
            .parse()
            .map_err(|_| SyntaxError::new(self.span, format!("invalid number `{}`", self.text)))
    }
}
