use super::{CmpOp, Field, Literal, Pred, Query, QueryError};
use crate::metastore::Entity;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    Dot,
    Comma,
    LParen,
    RParen,
    Op(CmpOp),
    Eof,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn syntax(line: usize, col: usize, expected: &str) -> QueryError {
    QueryError::SyntaxError { line, col, expected: expected.to_string() }
}

fn lex(src: &str) -> Result<Vec<Token>, QueryError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let (start_line, start_col, start) = (line, col, i);
        let tok = match c {
            '.' => {
                i += 1;
                Tok::Dot
            }
            ',' => {
                i += 1;
                Tok::Comma
            }
            '(' => {
                i += 1;
                Tok::LParen
            }
            ')' => {
                i += 1;
                Tok::RParen
            }
            '=' => {
                i += 1;
                Tok::Op(CmpOp::Eq)
            }
            '!' if chars.get(i + 1) == Some(&'=') => {
                i += 2;
                Tok::Op(CmpOp::Ne)
            }
            '<' | '>' => {
                let eq = chars.get(i + 1) == Some(&'=');
                i += if eq { 2 } else { 1 };
                Tok::Op(match (c, eq) {
                    ('<', false) => CmpOp::Lt,
                    ('<', true) => CmpOp::Le,
                    ('>', false) => CmpOp::Gt,
                    _ => CmpOp::Ge,
                })
            }
            '\'' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(syntax(start_line, start_col, "closing quote")),
                        Some('\'') if chars.get(i + 1) == Some(&'\'') => {
                            s.push('\'');
                            i += 2;
                        }
                        Some('\'') => {
                            i += 1;
                            break;
                        }
                        Some('\n') => return Err(syntax(start_line, start_col, "closing quote")),
                        Some(ch) => {
                            s.push(*ch);
                            i += 1;
                        }
                    }
                }
                Tok::Str(s)
            }
            c if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) => {
                let mut j = i + 1;
                let mut float = false;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
                if chars.get(j) == Some(&'.') && chars.get(j + 1).is_some_and(|d| d.is_ascii_digit()) {
                    float = true;
                    j += 1;
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                }
                if matches!(chars.get(j), Some('e' | 'E')) {
                    let mut k = j + 1;
                    if matches!(chars.get(k), Some('+' | '-')) {
                        k += 1;
                    }
                    if chars.get(k).is_some_and(|d| d.is_ascii_digit()) {
                        float = true;
                        j = k;
                        while j < chars.len() && chars[j].is_ascii_digit() {
                            j += 1;
                        }
                    }
                }
                let text: String = chars[i..j].iter().collect();
                i = j;
                if float {
                    Tok::Float(text.parse().map_err(|_| syntax(start_line, start_col, "number"))?)
                } else {
                    Tok::Int(text.parse().map_err(|_| syntax(start_line, start_col, "64-bit integer"))?)
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i + 1;
                while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                    j += 1;
                }
                let text: String = chars[i..j].iter().collect();
                i = j;
                if text.eq_ignore_ascii_case("contains") {
                    Tok::Op(CmpOp::Contains)
                } else {
                    Tok::Ident(text)
                }
            }
            _ => return Err(syntax(line, col, "token")),
        };
        col += i - start;
        out.push(Token { tok, line: start_line, col: start_col });
    }
    out.push(Token { tok: Tok::Eof, line, col });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, expected: &str) -> QueryError {
        let t = self.peek();
        syntax(t.line, t.col, expected)
    }

    fn at_kw(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), QueryError> {
        if self.at_kw(kw) {
            self.bump();
            Ok(())
        } else {
            Err(self.err(kw))
        }
    }

    fn query(&mut self) -> Result<Query, QueryError> {
        self.expect_kw("SELECT")?;
        let mut proj = vec![self.field()?];
        while self.peek().tok == Tok::Comma {
            self.bump();
            proj.push(self.field()?);
        }
        self.expect_kw("WHERE")?;
        let pred = self.or()?;
        let mut order_by = None;
        if self.at_kw("ORDER") {
            self.bump();
            self.expect_kw("BY")?;
            order_by = Some(self.field()?);
        }
        let mut limit = None;
        if self.at_kw("LIMIT") {
            self.bump();
            match self.peek().tok {
                Tok::Int(n) if n >= 0 => {
                    self.bump();
                    limit = Some(n as u64);
                }
                _ => return Err(self.err("unsigned integer")),
            }
        }
        if self.peek().tok != Tok::Eof {
            return Err(self.err(if order_by.is_none() && limit.is_none() {
                "AND, OR, ORDER BY, LIMIT or end of query"
            } else {
                "end of query"
            }));
        }
        Ok(Query { proj, pred, order_by, limit })
    }

    fn field(&mut self) -> Result<Field, QueryError> {
        let entity = match &self.peek().tok {
            Tok::Ident(s) => Entity::parse(s),
            _ => None,
        };
        let Some(entity) = entity else {
            return Err(self.err("field (patient.*, study.*, image.*)"));
        };
        self.bump();
        if self.peek().tok != Tok::Dot {
            return Err(self.err("'.'"));
        }
        self.bump();
        match self.peek().tok.clone() {
            Tok::Ident(attr) => {
                self.bump();
                Ok(Field { entity, attr })
            }
            _ => Err(self.err("attribute name")),
        }
    }

    fn or(&mut self) -> Result<Pred, QueryError> {
        let mut left = self.and()?;
        while self.at_kw("OR") {
            self.bump();
            let right = self.and()?;
            left = Pred::or(left, right);
        }
        Ok(left)
    }

    fn and(&mut self) -> Result<Pred, QueryError> {
        let mut left = self.unary()?;
        while self.at_kw("AND") {
            self.bump();
            let right = self.unary()?;
            left = Pred::and(left, right);
        }
        Ok(left)
    }

    fn unary(&mut self) -> Result<Pred, QueryError> {
        if self.at_kw("NOT") {
            self.bump();
            return Ok(Pred::not(self.unary()?));
        }
        if self.peek().tok == Tok::LParen {
            self.bump();
            let p = self.or()?;
            if self.peek().tok != Tok::RParen {
                return Err(self.err("')'"));
            }
            self.bump();
            return Ok(p);
        }
        let field = self.field()?;
        let op = match self.peek().tok {
            Tok::Op(op) => op,
            _ => return Err(self.err("comparison operator")),
        };
        self.bump();
        let lit = match self.peek().tok.clone() {
            Tok::Int(i) => Literal::Int(i),
            Tok::Float(f) => Literal::Float(f),
            Tok::Str(s) => Literal::String(s),
            _ => return Err(self.err("literal")),
        };
        self.bump();
        Ok(Pred::cmp(field, op, lit))
    }
}

pub fn parse(text: &str) -> Result<Query, QueryError> {
    let toks = lex(text)?;
    Parser { toks, pos: 0 }.query()
}
