//! Tokenizer for the rule language. Whitespace-separated, `#` comments to
//! end of line, keywords case-sensitive.

use super::{DslError, Pos};

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Keyword(&'static str),
    Number(f64),
    Str(String),
    Cmp(&'static str),
    LBrace,
    RBrace,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Semi,
    Comma,
    Plus,
    Star,
    Assign,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Keyword(k) => format!("`{k}`"),
            Tok::Number(n) => format!("number `{n}`"),
            Tok::Str(_) => "string literal".into(),
            Tok::Cmp(c) => format!("`{c}`"),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Semi => "`;`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Star => "`*`".into(),
            Tok::Assign => "`=`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

pub const KEYWORDS: &[&str] = &[
    "rule", "describe", "when", "effect", "params", "present", "not", "and", "or", "in",
    "frozen", "sigmoid", "ramp", "linear", "gate", "const",
];

pub struct Lexer<'a> {
    src: &'a [u8],
    at: usize,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    pub fn new(source: &'a str) -> Self {
        Self { src: source.as_bytes(), at: 0, line: 1, col: 1 }
    }

    pub fn pos(&self) -> Pos {
        Pos { line: self.line, col: self.col }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.at).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.at += 1;
        if b == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(b)
    }

    fn skip_trivia(&mut self) {
        loop {
            match self.peek() {
                Some(b' ') | Some(b'\t') | Some(b'\r') | Some(b'\n') => {
                    self.bump();
                }
                Some(b'#') => {
                    while let Some(b) = self.peek() {
                        if b == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => break,
            }
        }
    }

    /// Returns the next token and the position where it starts.
    pub fn next_token(&mut self) -> Result<(Tok, Pos), DslError> {
        self.skip_trivia();
        let pos = self.pos();
        let Some(b) = self.peek() else {
            return Ok((Tok::Eof, pos));
        };
        let tok = match b {
            b'{' => {
                self.bump();
                Tok::LBrace
            }
            b'}' => {
                self.bump();
                Tok::RBrace
            }
            b'(' => {
                self.bump();
                Tok::LParen
            }
            b')' => {
                self.bump();
                Tok::RParen
            }
            b'[' => {
                self.bump();
                Tok::LBracket
            }
            b']' => {
                self.bump();
                Tok::RBracket
            }
            b';' => {
                self.bump();
                Tok::Semi
            }
            b',' => {
                self.bump();
                Tok::Comma
            }
            b'+' => {
                self.bump();
                Tok::Plus
            }
            b'*' => {
                self.bump();
                Tok::Star
            }
            b'=' => {
                self.bump();
                if self.peek() == Some(b'=') {
                    self.bump();
                    Tok::Cmp("==")
                } else {
                    Tok::Assign
                }
            }
            b'!' => {
                self.bump();
                if self.peek() == Some(b'=') {
                    self.bump();
                    Tok::Cmp("!=")
                } else {
                    return Err(DslError::Syntax {
                        pos,
                        message: "expected `!=`".into(),
                    });
                }
            }
            b'<' => {
                self.bump();
                if self.peek() == Some(b'=') {
                    self.bump();
                    Tok::Cmp("<=")
                } else {
                    Tok::Cmp("<")
                }
            }
            b'>' => {
                self.bump();
                if self.peek() == Some(b'=') {
                    self.bump();
                    Tok::Cmp(">=")
                } else {
                    Tok::Cmp(">")
                }
            }
            b'"' => self.lex_string(pos)?,
            b'-' => self.lex_number(pos)?,
            b'0'..=b'9' => self.lex_number(pos)?,
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => self.lex_word(),
            other => {
                return Err(DslError::Syntax {
                    pos,
                    message: format!("unexpected character `{}`", other as char),
                })
            }
        };
        Ok((tok, pos))
    }

    fn lex_word(&mut self) -> Tok {
        let start = self.at;
        while let Some(b) = self.peek() {
            if b.is_ascii_alphanumeric() || b == b'_' {
                self.bump();
            } else {
                break;
            }
        }
        let word = std::str::from_utf8(&self.src[start..self.at]).unwrap();
        match KEYWORDS.iter().find(|k| **k == word) {
            Some(k) => Tok::Keyword(k),
            None => Tok::Ident(word.to_string()),
        }
    }

    fn lex_string(&mut self, pos: Pos) -> Result<Tok, DslError> {
        self.bump(); // opening quote
        let mut out = String::new();
        loop {
            match self.bump() {
                None | Some(b'\n') => {
                    return Err(DslError::Syntax {
                        pos,
                        message: "unterminated string literal".into(),
                    })
                }
                Some(b'"') => break,
                Some(b'\\') => match self.bump() {
                    Some(b'"') => out.push('"'),
                    Some(b'\\') => out.push('\\'),
                    Some(b'n') => out.push('\n'),
                    Some(b't') => out.push('\t'),
                    other => {
                        return Err(DslError::Syntax {
                            pos,
                            message: format!(
                                "invalid escape `\\{}`",
                                other.map(|b| b as char).unwrap_or(' ')
                            ),
                        })
                    }
                },
                Some(b) => {
                    if b < 0x80 {
                        out.push(b as char);
                    } else {
                        // Re-decode the UTF-8 sequence starting at the byte
                        // we just consumed.
                        let start = self.at - 1;
                        let width = utf8_width(b);
                        for _ in 1..width {
                            self.bump();
                        }
                        let chunk = std::str::from_utf8(&self.src[start..self.at]).map_err(
                            |_| DslError::Syntax {
                                pos,
                                message: "invalid UTF-8 in string literal".into(),
                            },
                        )?;
                        out.push_str(chunk);
                    }
                }
            }
        }
        Ok(Tok::Str(out))
    }

    /// Decimal with optional sign, fraction, and exponent. No leading dot,
    /// no trailing dot.
    fn lex_number(&mut self, pos: Pos) -> Result<Tok, DslError> {
        let start = self.at;
        if self.peek() == Some(b'-') {
            self.bump();
        }
        let int_digits = self.take_digits();
        if int_digits == 0 {
            return Err(DslError::Syntax {
                pos,
                message: "expected digits in number".into(),
            });
        }
        if self.peek() == Some(b'.') {
            self.bump();
            if self.take_digits() == 0 {
                return Err(DslError::Syntax {
                    pos,
                    message: "expected digits after decimal point".into(),
                });
            }
        }
        if matches!(self.peek(), Some(b'e') | Some(b'E')) {
            self.bump();
            if matches!(self.peek(), Some(b'+') | Some(b'-')) {
                self.bump();
            }
            if self.take_digits() == 0 {
                return Err(DslError::Syntax {
                    pos,
                    message: "expected digits in exponent".into(),
                });
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.at]).unwrap();
        let value: f64 = text.parse().map_err(|_| DslError::Syntax {
            pos,
            message: format!("invalid number `{text}`"),
        })?;
        if !value.is_finite() {
            return Err(DslError::NumberOutOfRange { pos });
        }
        Ok(Tok::Number(value))
    }

    fn take_digits(&mut self) -> usize {
        let mut n = 0;
        while let Some(b) = self.peek() {
            if b.is_ascii_digit() {
                self.bump();
                n += 1;
            } else {
                break;
            }
        }
        n
    }
}

fn utf8_width(first: u8) -> usize {
    if first >= 0xF0 {
        4
    } else if first >= 0xE0 {
        3
    } else {
        2
    }
}
