//! Text condition compiler: `hop_latency > 10 and (queue_occupancy > 100 or max(hop_latency) >= 50)`.
//!
//! Grammar (keywords case-insensitive, `and` binds tighter than `or`):
//! ```text
//! expr    := conj ("or" conj)*
//! conj    := atom ("and" atom)*
//! atom    := "(" expr ")" | literal
//! literal := item CMP UINT
//! item    := IDENT | ("sum" | "max") "(" IDENT ")"
//! CMP     := "<" | ">" | "<=" | ">=" | "==" | "!="
//! ```
//! A bare identifier aggregates by sum over hops.

use thiserror::Error;

use crate::detection::{Aggregate, CnfError, CnfExpression, Comparator, Literal};
use crate::int_wire::{HopMetadata, MetadataKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),
    #[error("malformed number `{0}`")]
    MalformedNumber(String),
    #[error("unexpected character `{ch}` at offset {at}")]
    UnexpectedChar { ch: char, at: usize },
    #[error("expected {expected}, found {found}")]
    Unexpected { expected: &'static str, found: String },
    #[error("expression too large after CNF conversion: {0}")]
    TooLarge(#[from] CnfError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Ident(String),
    Number(String),
    Cmp(Comparator),
    LParen,
    RParen,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Ident(s) | Token::Number(s) => format!("`{s}`"),
            Token::Cmp(c) => format!("`{}`", c.symbol()),
            Token::LParen => "`(`".into(),
            Token::RParen => "`)`".into(),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            _ if c.is_ascii_whitespace() => i += 1,
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '<' | '>' | '=' | '!' => {
                let two = bytes.get(i + 1) == Some(&b'=');
                let cmp = match (c, two) {
                    ('<', false) => Comparator::Lt,
                    ('>', false) => Comparator::Gt,
                    ('<', true) => Comparator::Le,
                    ('>', true) => Comparator::Ge,
                    ('=', true) => Comparator::Eq,
                    ('!', true) => Comparator::Ne,
                    _ => return Err(ExprError::UnexpectedChar { ch: c, at: i }),
                };
                out.push(Token::Cmp(cmp));
                i += if two { 2 } else { 1 };
            }
            _ if c.is_ascii_digit() => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                    i += 1;
                }
                out.push(Token::Number(text[start..i].to_string()));
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    if d.is_ascii_alphanumeric() || d == '_' || d == '-' {
                        i += 1;
                    } else {
                        break;
                    }
                }
                out.push(Token::Ident(text[start..i].to_string()));
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(ExprError::UnexpectedChar { ch, at: i });
            }
        }
    }
    Ok(out)
}

/// Parsed condition before normalisation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ast {
    Lit(Literal),
    And(Vec<Ast>),
    Or(Vec<Ast>),
}

impl Ast {
    pub fn eval(&self, hops: &[HopMetadata]) -> bool {
        match self {
            Ast::Lit(l) => l.eval(hops),
            Ast::And(xs) => xs.iter().all(|x| x.eval(hops)),
            Ast::Or(xs) => xs.iter().any(|x| x.eval(hops)),
        }
    }

    fn to_clauses(&self) -> Vec<Vec<Literal>> {
        match self {
            Ast::Lit(l) => vec![vec![*l]],
            Ast::And(xs) => xs.iter().flat_map(Ast::to_clauses).collect(),
            Ast::Or(xs) => {
                let mut acc: Vec<Vec<Literal>> = vec![Vec::new()];
                for x in xs {
                    let rhs = x.to_clauses();
                    let mut next = Vec::with_capacity(acc.len() * rhs.len());
                    for a in &acc {
                        for b in &rhs {
                            let mut c = a.clone();
                            for lit in b {
                                if !c.contains(lit) {
                                    c.push(*lit);
                                }
                            }
                            next.push(c);
                        }
                    }
                    acc = simplify(next);
                }
                acc
            }
        }
    }
}

/// Drop duplicate and subsumed clauses, keeping first-seen order.
fn simplify(clauses: Vec<Vec<Literal>>) -> Vec<Vec<Literal>> {
    let subset = |a: &[Literal], b: &[Literal]| a.iter().all(|l| b.contains(l));
    let mut out: Vec<Vec<Literal>> = Vec::with_capacity(clauses.len());
    for (i, c) in clauses.iter().enumerate() {
        let dominated = clauses.iter().enumerate().any(|(j, d)| {
            j != i && subset(d, c) && (!subset(c, d) || j < i)
        });
        if !dominated {
            out.push(c.clone());
        }
    }
    out
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self, expected: &'static str) -> Result<Token, ExprError> {
        let tok = self.tokens.get(self.pos).cloned().ok_or(ExprError::Unexpected {
            expected,
            found: "end of input".into(),
        })?;
        self.pos += 1;
        Ok(tok)
    }

    fn keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Token::Ident(s)) if s.eq_ignore_ascii_case(kw))
    }

    fn expr(&mut self) -> Result<Ast, ExprError> {
        let mut parts = vec![self.conj()?];
        while self.keyword("or") {
            self.pos += 1;
            parts.push(self.conj()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().expect("one")
        } else {
            Ast::Or(parts)
        })
    }

    fn conj(&mut self) -> Result<Ast, ExprError> {
        let mut parts = vec![self.atom()?];
        while self.keyword("and") {
            self.pos += 1;
            parts.push(self.atom()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().expect("one")
        } else {
            Ast::And(parts)
        })
    }

    fn atom(&mut self) -> Result<Ast, ExprError> {
        if self.peek() == Some(&Token::LParen) {
            self.pos += 1;
            let inner = self.expr()?;
            self.expect_rparen()?;
            return Ok(inner);
        }
        self.literal().map(Ast::Lit)
    }

    fn expect_rparen(&mut self) -> Result<(), ExprError> {
        match self.next("`)`")? {
            Token::RParen => Ok(()),
            other => Err(ExprError::Unexpected {
                expected: "`)`",
                found: other.describe(),
            }),
        }
    }

    fn ident(&mut self) -> Result<String, ExprError> {
        match self.next("identifier")? {
            Token::Ident(s) => Ok(s),
            other => Err(ExprError::Unexpected {
                expected: "identifier",
                found: other.describe(),
            }),
        }
    }

    fn literal(&mut self) -> Result<Literal, ExprError> {
        let name = self.ident()?;
        let (aggregate, item) = if self.peek() == Some(&Token::LParen) {
            let agg = match name.to_ascii_lowercase().as_str() {
                "sum" => Aggregate::Sum,
                "max" => Aggregate::Max,
                _ => return Err(ExprError::UnknownIdentifier(name)),
            };
            self.pos += 1;
            let item = self.ident()?;
            self.expect_rparen()?;
            (agg, item)
        } else {
            (Aggregate::Sum, name)
        };
        let metadata: MetadataKind = item
            .parse()
            .map_err(|_| ExprError::UnknownIdentifier(item.clone()))?;
        let cmp = match self.next("comparison operator")? {
            Token::Cmp(c) => c,
            other => {
                return Err(ExprError::Unexpected {
                    expected: "comparison operator",
                    found: other.describe(),
                })
            }
        };
        let constant = match self.next("number")? {
            Token::Number(s) => s.parse::<u32>().map_err(|_| ExprError::MalformedNumber(s))?,
            other => {
                return Err(ExprError::Unexpected {
                    expected: "number",
                    found: other.describe(),
                })
            }
        };
        Ok(Literal {
            metadata,
            cmp,
            constant,
            aggregate,
        })
    }
}

pub fn parse_expression(text: &str) -> Result<Ast, ExprError> {
    let mut p = Parser {
        tokens: tokenize(text)?,
        pos: 0,
    };
    let ast = p.expr()?;
    if let Some(tok) = p.peek() {
        return Err(ExprError::Unexpected {
            expected: "`and`, `or` or end of input",
            found: tok.describe(),
        });
    }
    Ok(ast)
}

/// Parse `text` and normalise it to a bounded CNF.
pub fn compile_expression(text: &str) -> Result<CnfExpression, ExprError> {
    let ast = parse_expression(text)?;
    Ok(CnfExpression::new(simplify(ast.to_clauses()))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hop(latency: u32, queue: u32) -> HopMetadata {
        HopMetadata::default()
            .with(MetadataKind::HopLatency, latency)
            .with(MetadataKind::QueueOccupancy, queue)
    }

    #[test]
    fn conjunction_gives_two_unit_clauses() {
        let e = compile_expression("hop_latency > 10 and queue_occupancy > 100").unwrap();
        assert_eq!(e.clauses().len(), 2);
        assert!(e.clauses().iter().all(|c| c.len() == 1));
        assert!(e.eval(&[hop(12, 150)]));
        assert!(!e.eval(&[hop(12, 50)]));
    }

    #[test]
    fn operator_spelling_accepted() {
        let e = compile_expression("hop-latency > 10 AND queue-buildup > 100").unwrap();
        assert_eq!(
            e,
            compile_expression("hop_latency > 10 and queue_occupancy > 100").unwrap()
        );
    }

    #[test]
    fn single_literal() {
        let e = compile_expression("hop_latency > 10").unwrap();
        assert_eq!(
            e.clauses(),
            &[vec![Literal::new(MetadataKind::HopLatency, Comparator::Gt, 10)]]
        );
    }

    #[test]
    fn and_binds_tighter_than_or() {
        // a or (b and c) -> (a or b) and (a or c)
        let e = compile_expression("hop_latency > 1 or queue_occupancy > 2 and switch_id == 3")
            .unwrap();
        assert_eq!(e.clauses().len(), 2);
        assert!(e.clauses().iter().all(|c| c.len() == 2));
        let e = compile_expression("(hop_latency > 1 or queue_occupancy > 2) and switch_id == 3")
            .unwrap();
        assert_eq!(e.clauses().iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn aggregates_and_comparators() {
        let e = compile_expression("max(hop_latency) >= 7 and sum(queue_occupancy) != 0").unwrap();
        let lit = e.clauses()[0][0];
        assert_eq!(lit.aggregate, Aggregate::Max);
        assert_eq!(lit.cmp, Comparator::Ge);
        assert!(e.eval(&[hop(7, 1), hop(3, 0)]));
        assert!(!e.eval(&[hop(6, 1), hop(3, 0)]));
    }

    #[test]
    fn duplicates_and_subsumed_clauses_removed() {
        let e = compile_expression("hop_latency > 1 and hop_latency > 1").unwrap();
        assert_eq!(e.literal_count(), 1);
        // (a) and (a or b) -> (a)
        let e = compile_expression("hop_latency > 1 and (hop_latency > 1 or switch_id < 4)")
            .unwrap();
        assert_eq!(e.literal_count(), 1);
    }

    #[test]
    fn errors() {
        assert_eq!(
            compile_expression("jitter > 3"),
            Err(ExprError::UnknownIdentifier("jitter".into()))
        );
        assert_eq!(
            compile_expression("hop_latency > 12x"),
            Err(ExprError::MalformedNumber("12x".into()))
        );
        assert_eq!(
            compile_expression("hop_latency > 99999999999"),
            Err(ExprError::MalformedNumber("99999999999".into()))
        );
        assert!(matches!(
            compile_expression("hop_latency >"),
            Err(ExprError::Unexpected { expected: "number", .. })
        ));
        assert!(matches!(
            compile_expression("(hop_latency > 1"),
            Err(ExprError::Unexpected { expected: "`)`", .. })
        ));
        assert!(matches!(
            compile_expression("hop_latency = 1"),
            Err(ExprError::UnexpectedChar { ch: '=', .. })
        ));
        assert!(matches!(
            compile_expression("hop_latency > 1 hop_latency"),
            Err(ExprError::Unexpected { .. })
        ));
    }

    #[test]
    fn cnf_blowup_is_rejected() {
        // (a1 and a2 and a3) or (b1 and b2 and b3) -> 9 clauses
        let text = "(hop_latency > 1 and hop_latency > 2 and hop_latency > 3) or \
                    (queue_occupancy > 1 and queue_occupancy > 2 and queue_occupancy > 3)";
        assert!(matches!(
            compile_expression(text),
            Err(ExprError::TooLarge(CnfError::TooManyClauses(9)))
        ));
        let wide = "hop_latency > 1 or hop_latency > 2 or hop_latency > 3 or hop_latency > 4 or hop_latency > 5";
        assert!(matches!(
            compile_expression(wide),
            Err(ExprError::TooLarge(CnfError::TooManyLiterals { .. }))
        ));
    }
}
